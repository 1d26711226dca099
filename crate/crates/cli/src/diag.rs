//! `mde mask-stats` and `mde grad-check`.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Result};
use mde_core::gradcheck::GradCheckReport;
use mde_core::maskgen::{center_box, corruption_stats, make_mask, Task};
use mde_core::trainer::derived_rng;
use mde_core::verify::{grad_check_suite, suite_config};

use crate::settings::{RunManifest, Settings};
use crate::{UsageError, VerificationFailed};

const MASK_DEFAULTS: [(&str, &str); 7] = [
    ("task", "rec"),
    ("col_visible", "1"),
    ("ratio", "0.1"),
    ("size", "96"),
    ("n", "20000"),
    ("seed", "0"),
    ("out", "runs/mask-stats"),
];

/// Masks are drawn in chunks to bound memory.
const CHUNK: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskStats {
    pub task: Task,
    pub ratio: f64,
    pub size: usize,
    pub n: usize,
    pub dropped: f64,
    pub corrupted: f64,
    /// Fraction of hidden (pixel, channel) entries.
    pub hidden: f64,
    pub analytic_dropped: f64,
    pub analytic_corrupted: f64,
    pub analytic_hidden: f64,
}

impl MaskStats {
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "task {} | S {} | {}x{} | {} masks",
            self.task, self.ratio, self.size, self.size, self.n
        );
        let _ = writeln!(s, "{:<10} {:>10} {:>10}", "", "empirical", "analytic");
        let _ = writeln!(s, "{:<10} {:>10.4} {:>10.4}", "dropped", self.dropped, self.analytic_dropped);
        let _ = writeln!(s, "{:<10} {:>10.4} {:>10.4}", "corrupted", self.corrupted, self.analytic_corrupted);
        let _ = writeln!(s, "{:<10} {:>10.4} {:>10.4}", "hidden", self.hidden, self.analytic_hidden);
        s
    }
}

/// Expected fractions of pixels with every channel dropped, of pixels with at
/// least one channel dropped, and of hidden (pixel, channel) entries. Fixed
/// boxes give exact pixel fractions.
pub fn analytic_stats(task: Task, ratio: f64, size: usize) -> (f64, f64, f64) {
    match task {
        Task::Rec => ((1.0 - ratio).powi(3), 1.0 - ratio.powi(3), 1.0 - ratio),
        Task::RandomExtrapolation => (1.0 - ratio, 1.0 - ratio, 1.0 - ratio),
        Task::Colorization { visible } => (0.0, 1.0, (3 - visible) as f64 / 3.0),
        Task::Inpainting | Task::ReverseInpainting => {
            let area = center_box(ratio, size, size, 0).area() as f64 / (size * size) as f64;
            let dropped = if task == Task::Inpainting { area } else { 1.0 - area };
            (dropped, dropped, dropped)
        }
    }
}

pub fn mask_stats(settings: &Settings) -> Result<MaskStats> {
    let r = settings.resolve(&MASK_DEFAULTS, &[])?;
    let task = Task::parse(r.str("task"), Some(r.parse("col_visible")?))?;
    let ratio: f64 = r.parse("ratio")?;
    let size: usize = r.parse("size")?;
    let n: usize = r.parse("n")?;
    if n == 0 {
        bail!(UsageError("n must be at least 1".into()));
    }
    let seed: u64 = r.parse("seed")?;
    let out = r.path("out")?;
    let report_path = out.join("report.txt");
    RunManifest::new("mask-stats", r.clone())
        .artifact("report", report_path.clone())
        .write(&out)?;
    eprint!("{}", r.echo());

    let mut rng = derived_rng(seed, 0);
    let (mut dropped, mut corrupted, mut hidden) = (0.0, 0.0, 0.0);
    let mut left = n;
    while left > 0 {
        let k = left.min(CHUNK);
        let batch = make_mask(task, &mut rng, ratio, size, size, k)?;
        let (d, c) = corruption_stats(&batch);
        dropped += d * k as f64;
        corrupted += c * k as f64;
        hidden += batch.mask.data().iter().map(|&m| f64::from(1.0 - m)).sum::<f64>() / (3 * size * size) as f64;
        left -= k;
    }
    let (analytic_dropped, analytic_corrupted, analytic_hidden) = analytic_stats(task, ratio, size);
    let stats = MaskStats {
        task,
        ratio,
        size,
        n,
        dropped: dropped / n as f64,
        corrupted: corrupted / n as f64,
        hidden: hidden / n as f64,
        analytic_dropped,
        analytic_corrupted,
        analytic_hidden,
    };
    std::fs::write(&report_path, stats.report())?;
    Ok(stats)
}

const GRAD_DEFAULTS: [(&str, &str); 3] = [("tolerance", "1e-4"), ("step", "1e-5"), ("out", "runs/grad-check")];

/// Runs the full suite; any failure becomes a `VerificationFailed` naming the
/// failed checks.
pub fn grad_check(settings: &Settings, print: bool) -> Result<Vec<GradCheckReport>> {
    let r = settings.resolve(&GRAD_DEFAULTS, &[])?;
    let mut cfg = suite_config();
    cfg.tolerance = r.parse("tolerance")?;
    cfg.step = r.parse("step")?;
    if !(cfg.tolerance > 0.0 && cfg.step > 0.0) {
        bail!(UsageError("tolerance and step must be positive".into()));
    }
    let out: PathBuf = r.path("out")?;
    let report_path = out.join("report.txt");
    RunManifest::new("grad-check", r.clone())
        .artifact("report", report_path.clone())
        .write(&out)?;
    if print {
        eprint!("{}", r.echo());
    }
    let reports = grad_check_suite(&cfg)?;
    let mut text = String::new();
    for rep in &reports {
        let _ = writeln!(
            text,
            "{} {:<48} max rel err {:.2e}",
            if rep.passed() { "PASS" } else { "FAIL" },
            rep.label,
            rep.max_rel_error()
        );
    }
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.label.clone()).collect();
    let _ = writeln!(text, "{} of {} checks passed", reports.len() - failed.len(), reports.len());
    std::fs::write(&report_path, &text)?;
    if print {
        print!("{text}");
    }
    if !failed.is_empty() {
        bail!(VerificationFailed(failed));
    }
    Ok(reports)
}
