//! Central-difference verification of tape gradients (64-bit only).

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference half step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries: Option<usize>,
    /// Denominator floor for the relative error, so exact zeros compare sanely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            max_entries: None,
            abs_floor: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub label: String,
    pub tolerance: f64,
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamReport> {
        self.params
            .iter()
            .filter(move |p| !(p.max_rel_error < self.tolerance))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} {:<32} max rel err {:.3e} (tol {:.0e})",
            self.label,
            self.max_rel_error(),
            self.tolerance
        )?;
        for p in self.failures() {
            write!(
                f,
                "\n    {} [{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                p.name, p.worst_index, p.analytic, p.numeric, p.max_rel_error
            )?;
        }
        Ok(())
    }
}

/// Registers `params` on a fresh tape and evaluates `f` to a scalar.
fn evaluate<F>(f: &F, params: &BTreeMap<String, Tensor<f64>>) -> Result<(Tape<f64>, Var)>
where
    F: Fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|(k, v)| (k.clone(), tape.param(k.clone(), v.clone())))
        .collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape, loss))
}

/// Analytic tape gradients of `f` at `params`.
pub fn analytic_gradients<F>(
    f: &F,
    params: &BTreeMap<String, Tensor<f64>>,
) -> Result<BTreeMap<String, Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> Result<Var>,
{
    let (tape, loss) = evaluate(f, params)?;
    Ok(tape.backward(loss)?.params())
}

/// Compares tape gradients of `f` against central differences.
pub fn grad_check<F>(
    label: &str,
    f: F,
    params: &BTreeMap<String, Tensor<f64>>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    check_against(label, f, params, &analytic, cfg)
}

/// Compares caller-supplied gradients against central differences of `f`.
pub fn check_against<F>(
    label: &str,
    f: F,
    params: &BTreeMap<String, Tensor<f64>>,
    analytic: &BTreeMap<String, Tensor<f64>>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut reports = Vec::with_capacity(params.len());
    for (name, value) in params {
        let len = value.len();
        let indices: Vec<usize> = match cfg.max_entries {
            Some(k) if k < len => {
                let mut v = sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let grad = &analytic[name];
        let mut report = ParamReport {
            name: name.clone(),
            checked: indices.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &indices {
            let orig = value.data()[i];
            work.get_mut(name).expect("param").data_mut()[i] = orig + cfg.step;
            let (tp, lp) = evaluate(&f, &work)?;
            let plus = tp.value(lp).item();
            work.get_mut(name).expect("param").data_mut()[i] = orig - cfg.step;
            let (tm, lm) = evaluate(&f, &work)?;
            let minus = tm.value(lm).item();
            work.get_mut(name).expect("param").data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        label: label.to_string(),
        tolerance: cfg.tolerance,
        params: reports,
    })
}
