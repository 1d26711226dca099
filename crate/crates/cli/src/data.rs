//! Image sources named on the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mde_core::dataio::{
    load_idx, read_manifest, read_png, resize, synthetic_dataset, ImageDataset, ResizeMode, SyntheticKind,
};
use mde_core::Tensor;

use crate::UsageError;

/// `synthetic:<kind>`, `idx:<images file>`, `manifest:<list file>`, a PNG file
/// or a directory of PNG files.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Synthetic(SyntheticKind),
    Idx(PathBuf),
    Manifest(PathBuf),
    Png(PathBuf),
    Dir(PathBuf),
}

impl Source {
    pub fn parse(spec: &str) -> Result<Source> {
        if let Some(kind) = spec.strip_prefix("synthetic:") {
            return Ok(Source::Synthetic(kind.parse().map_err(|e: mde_core::Error| UsageError(e.to_string()))?));
        }
        if let Some(p) = spec.strip_prefix("idx:") {
            return Ok(Source::Idx(p.into()));
        }
        if let Some(p) = spec.strip_prefix("manifest:") {
            return Ok(Source::Manifest(p.into()));
        }
        let p = PathBuf::from(spec);
        if p.is_dir() {
            Ok(Source::Dir(p))
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            Ok(Source::Png(p))
        } else {
            Err(UsageError(format!(
                "data source `{spec}`: expected synthetic:<kind>, idx:<file>, manifest:<file>, a .png file or a directory"
            ))
            .into())
        }
    }

    pub fn is_idx(&self) -> bool {
        matches!(self, Source::Idx(_))
    }
}

/// What to do when an image's size differs from the model's.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizePolicy {
    Fail,
    Resize,
}

impl std::str::FromStr for SizePolicy {
    type Err = UsageError;
    fn from_str(s: &str) -> std::result::Result<Self, UsageError> {
        match s {
            "fail" => Ok(SizePolicy::Fail),
            "resize" => Ok(SizePolicy::Resize),
            other => Err(UsageError(format!("size_mismatch must be fail or resize, got `{other}`"))),
        }
    }
}

fn fit(img: Tensor<f32>, width: usize, height: usize, policy: SizePolicy, what: &str) -> Result<Tensor<f32>> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if (w, h) == (width, height) {
        return Ok(img);
    }
    match policy {
        SizePolicy::Resize => Ok(resize(&img, width, height, ResizeMode::Bilinear)?),
        SizePolicy::Fail => bail!(UsageError(format!(
            "{what} is {w}x{h} but the model expects {width}x{height}; pass --size-mismatch resize to rescale"
        ))),
    }
}

fn png_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(UsageError(format!("no PNG files in {}", dir.display())));
    }
    Ok(files)
}

/// Loads at most `n` images (all of a file source when `n` is 0) at the model size.
pub fn load(source: &Source, n: usize, seed: u64, width: usize, height: usize, policy: SizePolicy) -> Result<ImageDataset> {
    let (images, name) = match source {
        Source::Synthetic(kind) => {
            if width != height {
                bail!(UsageError("synthetic data is square; the model is not".into()));
            }
            let ds = synthetic_dataset(*kind, n.max(1), width, seed)?;
            return Ok(ds);
        }
        Source::Idx(p) => {
            let ds = load_idx(p, None)?;
            (ds.images, format!("idx:{}", p.display()))
        }
        Source::Manifest(p) => {
            let imgs = read_manifest(p)?.iter().map(|f| read_png(f)).collect::<mde_core::Result<Vec<_>>>()?;
            (imgs, format!("manifest:{}", p.display()))
        }
        Source::Png(p) => (vec![read_png(p)?], p.display().to_string()),
        Source::Dir(d) => {
            let imgs = png_dir(d)?.iter().map(|f| read_png(f)).collect::<mde_core::Result<Vec<_>>>()?;
            (imgs, d.display().to_string())
        }
    };
    let take = if n == 0 { images.len() } else { n.min(images.len()) };
    let fitted = images
        .into_iter()
        .take(take)
        .enumerate()
        .map(|(i, img)| fit(img, width, height, policy, &format!("image {i} of {name}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageDataset::new(fitted, name)?)
}
