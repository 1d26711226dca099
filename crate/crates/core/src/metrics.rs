//! Image-quality metrics: PSNR (full image or a region), SSIM and the
//! inception score with an injected classifier.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared error over the entries where `region` is nonzero (all entries
/// when `region` is `None`).
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, region: Option<&Tensor<T>>) -> Result<f64> {
    same_shape("mse", a, b)?;
    if let Some(r) = region {
        same_shape("mse", a, r)?;
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if region.is_some_and(|r| r.data()[i] == T::zero()) {
            continue;
        }
        let d = x.to_f64().unwrap_or(f64::NAN) - y.to_f64().unwrap_or(f64::NAN);
        sum += d * d;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Parameter("empty PSNR region".into()));
    }
    Ok(sum / count as f64)
}

/// `10 log10(1 / MSE)` for unit dynamic range, capped at `cap` dB.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, region: Option<&Tensor<T>>, cap: f64) -> Result<f64> {
    let m = mse(a, b, region)?;
    if m == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / m).log10()).min(cap))
}

/// Normalized 1-D Gaussian taps.
fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Channel mean of a `[C, H, W]` image.
fn grayscale<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = match img.shape() {
        &[c, h, w] => (c, h, w),
        other => return Err(Error::dim("ssim", format!("expected [C, H, W], got {other:?}"))),
    };
    let plane = h * w;
    let mut g = vec![0.0f64; plane];
    for ch in img.data().chunks(plane) {
        for (o, v) in g.iter_mut().zip(ch) {
            *o += v.to_f64().unwrap_or(f64::NAN);
        }
    }
    g.iter_mut().for_each(|v| *v /= c as f64);
    Ok((h, w, g))
}

/// Separable "valid" Gaussian filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().enumerate().map(|(t, &g)| g * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(t, &g)| g * rows[(y + t) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two `[C, H, W]` images after grayscale conversion.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (h, w, x) = grayscale(a)?;
    let (_, _, y) = grayscale(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Parameter(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &taps);
    let my = filter_valid(&y, h, w, &taps);
    let mxx = filter_valid(&prod(&x, &x), h, w, &taps);
    let myy = filter_valid(&prod(&y, &y), h, w, &taps);
    let mxy = filter_valid(&prod(&x, &y), h, w, &taps);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        let num = (2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2);
        let den = (ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2);
        total += num / den;
    }
    Ok(total / n as f64)
}

/// `exp(E_x KL(p(y|x) || p(y)))` per split; returns the mean and standard
/// deviation over splits.
pub fn inception_score_from_probs(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    if splits == 0 {
        return Err(Error::Parameter("inception score needs at least one split".into()));
    }
    if probs.len() < splits {
        return Err(Error::Parameter(format!(
            "{} images cannot be divided into {splits} splits",
            probs.len()
        )));
    }
    let k = probs[0].len();
    for (i, p) in probs.iter().enumerate() {
        let s: f64 = p.iter().sum();
        if p.len() != k || p.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::Parameter(format!("classifier output {i} is not a probability vector")));
        }
    }
    let n = probs.len();
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let part = &probs[s * n / splits..(s + 1) * n / splits];
            let m = part.len() as f64;
            let marginal: Vec<f64> = (0..k).map(|j| part.iter().map(|p| p[j]).sum::<f64>() / m).collect();
            let kl: f64 = part
                .iter()
                .map(|p| {
                    p.iter()
                        .zip(&marginal)
                        .filter(|(&pj, _)| pj > 0.0)
                        .map(|(&pj, &qj)| pj * (pj / qj).ln())
                        .sum::<f64>()
                })
                .sum::<f64>()
                / m;
            kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// Inception score of `images` under an injected `classifier`.
pub fn inception_score<T: Scalar>(
    images: &[Tensor<T>],
    classifier: &dyn Fn(&Tensor<T>) -> Result<Vec<f64>>,
    splits: usize,
) -> Result<(f64, f64)> {
    if images.len() < splits {
        return Err(Error::Parameter(format!(
            "{} images cannot be divided into {splits} splits",
            images.len()
        )));
    }
    let probs = images.iter().map(classifier).collect::<Result<Vec<_>>>()?;
    inception_score_from_probs(&probs, splits)
}

/// Completion that keeps visible entries and fills the rest from `fill`
/// (typically the training-set mean image).
pub fn mean_fill<T: Scalar>(image: &Tensor<T>, mask: &Tensor<T>, fill: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mean_fill", image, mask)?;
    same_shape("mean_fill", image, fill)?;
    let data = image
        .data()
        .iter()
        .zip(mask.data())
        .zip(fill.data())
        .map(|((&x, &m), &f)| m * x + (T::one() - m) * f)
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricReport {
    pub psnr_full: f64,
    pub psnr_masked_region: f64,
    pub ssim: f64,
    /// `(mean, std)` when a classifier was supplied.
    pub inception_score: Option<(f64, f64)>,
}

impl MetricReport {
    /// PSNR over the whole image and over the dropped entries (`mask == 0`),
    /// and SSIM, for one `[3, H, W]` completion.
    pub fn compute<T: Scalar>(completed: &Tensor<T>, truth: &Tensor<T>, mask: &Tensor<T>) -> Result<Self> {
        let dropped = mask.map(|m| T::one() - m);
        let psnr_masked_region = if dropped.data().iter().any(|&v| v != T::zero()) {
            psnr(completed, truth, Some(&dropped), DEFAULT_PSNR_CAP)?
        } else {
            DEFAULT_PSNR_CAP
        };
        Ok(MetricReport {
            psnr_full: psnr(completed, truth, None, DEFAULT_PSNR_CAP)?,
            psnr_masked_region,
            ssim: ssim(completed, truth)?,
            inception_score: None,
        })
    }

    /// Element-wise mean of several reports; inception scores are dropped.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::Parameter("no metric reports to average".into()));
        }
        let n = reports.len() as f64;
        Ok(MetricReport {
            psnr_full: reports.iter().map(|r| r.psnr_full).sum::<f64>() / n,
            psnr_masked_region: reports.iter().map(|r| r.psnr_masked_region).sum::<f64>() / n,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
            inception_score: None,
        })
    }

    pub const CSV_HEADER: &'static str = "psnr_full,psnr_masked_region,ssim,inception_mean,inception_std";

    pub fn csv_row(&self) -> String {
        let (im, is) = self
            .inception_score
            .map_or((String::new(), String::new()), |(m, s)| (m.to_string(), s.to_string()));
        format!("{},{},{},{im},{is}", self.psnr_full, self.psnr_masked_region, self.ssim)
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "pSNR (full) {:.3} dB | pSNR (masked region) {:.3} dB | SSIM {:.4}",
            self.psnr_full, self.psnr_masked_region, self.ssim
        );
        if let Some((m, sd)) = self.inception_score {
            let _ = write!(s, " | IS {m:.3} +/- {sd:.3}");
        }
        s
    }
}
