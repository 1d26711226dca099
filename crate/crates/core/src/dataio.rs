//! Image datasets: IDX and PNG ingestion, resizing, synthetic corpora and PNG export.
//!
//! Images are `[3, H, W]` tensors with values in `[0, 1]`.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{BigEndian, ByteOrder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct ImageDataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Option<Vec<u8>>,
    pub source: String,
    pub height: usize,
    pub width: usize,
}

impl ImageDataset {
    pub fn new(images: Vec<Tensor<f32>>, source: impl Into<String>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Parameter("empty dataset".into()))?;
        let (height, width) = match first.shape() {
            &[3, h, w] => (h, w),
            other => return Err(Error::dim("dataset", format!("image shape {other:?}"))),
        };
        for img in &images {
            if img.shape() != [3, height, width] {
                return Err(Error::dim(
                    "dataset",
                    format!("image {:?} in a {height}x{width} dataset", img.shape()),
                ));
            }
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Parameter("image values outside [0,1]".into()));
            }
        }
        Ok(ImageDataset {
            images,
            labels: None,
            source: source.into(),
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the chosen images into `[n, 3, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let items: Vec<Tensor<f32>> = indices
            .iter()
            .map(|&i| {
                self.images
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Parameter(format!("image index {i} out of range")))
            })
            .collect::<Result<_>>()?;
        Tensor::stack(&items)
    }

    /// Splits off the last `n_tail` images as a second dataset.
    pub fn split_tail(mut self, n_tail: usize) -> Result<(ImageDataset, ImageDataset)> {
        if n_tail == 0 || n_tail >= self.len() {
            return Err(Error::Parameter(format!(
                "cannot split {n_tail} of {} images",
                self.len()
            )));
        }
        let tail_images = self.images.split_off(self.len() - n_tail);
        let tail_labels = self
            .labels
            .as_mut()
            .map(|l| l.split_off(l.len() - n_tail));
        let tail = ImageDataset {
            images: tail_images,
            labels: tail_labels,
            source: format!("{} (held-out)", self.source),
            height: self.height,
            width: self.width,
        };
        Ok((self, tail))
    }

    pub fn resized(&self, width: usize, height: usize, mode: ResizeMode) -> Result<ImageDataset> {
        let images = self
            .images
            .iter()
            .map(|im| resize(im, width, height, mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageDataset {
            images,
            labels: self.labels.clone(),
            source: self.source.clone(),
            height,
            width,
        })
    }

    /// Per-pixel, per-channel mean image.
    pub fn mean_image(&self) -> Tensor<f32> {
        let mut acc = vec![0.0f64; 3 * self.height * self.width];
        for img in &self.images {
            for (a, &v) in acc.iter_mut().zip(img.data()) {
                *a += v as f64;
            }
        }
        let n = self.len() as f64;
        Tensor::new(
            vec![3, self.height, self.width],
            acc.into_iter().map(|v| (v / n) as f32).collect(),
        )
        .expect("mean image shape")
    }
}

fn parse_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        detail: detail.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(BigEndian::read_u32)
        .ok_or_else(|| parse_err(offset, "truncated header"))
}

/// Parses an IDX image file (`u8`, 3 dims) into grayscale planes replicated to RGB.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Tensor<f32>>)> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(0, format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(parse_err(8, "zero image dimension"));
    }
    let body = &bytes[16..];
    let expect = n * rows * cols;
    if body.len() != expect {
        return Err(parse_err(
            16 + body.len().min(expect),
            format!("declared {expect} pixel bytes, found {}", body.len()),
        ));
    }
    let plane = rows * cols;
    let images = body
        .chunks(plane)
        .map(|px| {
            let mut data = Vec::with_capacity(3 * plane);
            for _ in 0..3 {
                data.extend(px.iter().map(|&b| b as f32 / 255.0));
            }
            Tensor::new(vec![3, rows, cols], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(0, format!("bad label magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(parse_err(
            8 + body.len().min(n),
            format!("declared {n} labels, found {}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<ImageDataset> {
    let bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let (_, _, images) = parse_idx_images(&bytes)?;
    let mut ds = ImageDataset::new(images, format!("idx:{}", images_path.display()))?;
    if let Some(lp) = labels_path {
        let lb = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;
        let labels = parse_idx_labels(&lb)?;
        if labels.len() != ds.len() {
            return Err(Error::Parameter(format!(
                "{} labels for {} images",
                labels.len(),
                ds.len()
            )));
        }
        ds.labels = Some(labels);
    }
    Ok(ds)
}

/// Serializes `[1 or 3, h, w]` grayscale images (first channel) as an IDX image file.
pub fn encode_idx_images(images: &[Tensor<f32>]) -> Result<Vec<u8>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Parameter("no images to encode".into()))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let mut out = Vec::with_capacity(16 + images.len() * h * w);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend(img.data()[..h * w].iter().map(|&v| quantize(v)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    Bilinear,
}

impl FromStr for ResizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(ResizeMode::Nearest),
            "bilinear" => Ok(ResizeMode::Bilinear),
            _ => Err(Error::Parameter(format!("unknown resize mode `{s}`"))),
        }
    }
}

/// Resamples a `[c, h, w]` image with half-pixel-centre alignment.
pub fn resize(image: &Tensor<f32>, width: usize, height: usize, mode: ResizeMode) -> Result<Tensor<f32>> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        other => return Err(Error::dim("resize", format!("image shape {other:?}"))),
    };
    if width == 0 || height == 0 {
        return Err(Error::Parameter("resize target must be at least 1x1".into()));
    }
    if (w, h) == (width, height) {
        return Ok(image.clone());
    }
    let src = image.data();
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let mut out = Vec::with_capacity(c * width * height);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..height {
            for ox in 0..width {
                let v = match mode {
                    ResizeMode::Nearest => {
                        let iy = (((oy as f64 + 0.5) * sy) as usize).min(h - 1);
                        let ix = (((ox as f64 + 0.5) * sx) as usize).min(w - 1);
                        plane[iy * w + ix]
                    }
                    ResizeMode::Bilinear => {
                        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                        let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                        let (ty, tx) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
                        let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                        let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                        top * (1.0 - ty) + bot * ty
                    }
                };
                out.push(v);
            }
        }
    }
    Tensor::new(vec![c, height, width], out)
}

/// Central crop keeping `fraction` of the shorter side, as a square.
pub fn center_crop(image: &Tensor<f32>, fraction: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        other => return Err(Error::dim("center_crop", format!("image shape {other:?}"))),
    };
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!("crop fraction {fraction}")));
    }
    let side = ((h.min(w) as f64 * fraction).round() as usize).max(1);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let src = image.data();
    let mut out = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        for y in y0..y0 + side {
            out.extend_from_slice(&src[(ch * h + y) * w + x0..(ch * h + y) * w + x0 + side]);
        }
    }
    Tensor::new(vec![c, side, side], out)
}

/// Face-crop preprocessing: keep the central 75% and resize to `size` x `size`.
pub fn face_crop_recipe(image: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    resize(&center_crop(image, 0.75)?, size, size, ResizeMode::Bilinear)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Two-color stripes with random orientation and period.
    Stripes,
    /// One soft-edged disc on a flat background.
    Blobs,
    /// Linear blend between two colors along a random direction.
    Gradients,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(SyntheticKind::Stripes),
            "blobs" => Ok(SyntheticKind::Blobs),
            "gradients" => Ok(SyntheticKind::Gradients),
            _ => Err(Error::Parameter(format!("unknown synthetic dataset `{s}`"))),
        }
    }
}

impl SyntheticKind {
    pub fn name(&self) -> &'static str {
        match self {
            SyntheticKind::Stripes => "stripes",
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Gradients => "gradients",
        }
    }
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [0, 1, 2].map(|_| rng.random_range(0.1f32..0.9))
}

pub fn synthetic_dataset(kind: SyntheticKind, n: usize, size: usize, seed: u64) -> Result<ImageDataset> {
    if n == 0 || size == 0 {
        return Err(Error::Parameter("synthetic dataset needs n >= 1 and size >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let images = (0..n)
        .map(|_| {
            let mut data = vec![0.0f32; 3 * plane];
            match kind {
                SyntheticKind::Stripes => {
                    let (a, b) = (random_color(&mut rng), random_color(&mut rng));
                    let vertical = rng.random_bool(0.5);
                    let band = rng.random_range(2..=(size / 4).max(2));
                    let phase = rng.random_range(0..2 * band);
                    for y in 0..size {
                        for x in 0..size {
                            let t = if vertical { x } else { y };
                            let col = if ((t + phase) / band) % 2 == 0 { a } else { b };
                            for c in 0..3 {
                                data[c * plane + y * size + x] = col[c];
                            }
                        }
                    }
                }
                SyntheticKind::Blobs => {
                    let (bg, fg) = (random_color(&mut rng), random_color(&mut rng));
                    let s = size as f64;
                    let r = rng.random_range(0.2..0.35) * s;
                    let cx = rng.random_range(r..s - r);
                    let cy = rng.random_range(r..s - r);
                    for y in 0..size {
                        for x in 0..size {
                            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                            // one-pixel linear edge
                            let t = (r + 0.5 - d).clamp(0.0, 1.0) as f32;
                            for c in 0..3 {
                                data[c * plane + y * size + x] = bg[c] * (1.0 - t) + fg[c] * t;
                            }
                        }
                    }
                }
                SyntheticKind::Gradients => {
                    let (a, b) = (random_color(&mut rng), random_color(&mut rng));
                    let theta = rng.random_range(0.0..2.0 * PI);
                    let (dx, dy) = (theta.cos(), theta.sin());
                    let half = (size as f64 - 1.0) / 2.0;
                    let extent = half * (dx.abs() + dy.abs());
                    for y in 0..size {
                        for x in 0..size {
                            let p = (x as f64 - half) * dx + (y as f64 - half) * dy;
                            let t = if extent > 0.0 { ((p / extent + 1.0) / 2.0) as f32 } else { 0.5 };
                            for c in 0..3 {
                                data[c * plane + y * size + x] = a[c] * (1.0 - t) + b[c] * t;
                            }
                        }
                    }
                }
            }
            Tensor::new(vec![3, size, size], data)
        })
        .collect::<Result<Vec<_>>>()?;
    ImageDataset::new(images, format!("synthetic:{}:{size}:{seed}", kind.name()))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, h, w]` float image -> interleaved RGB bytes.
pub fn tensor_to_rgb8(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        &[3, h, w] => (h, w),
        other => return Err(Error::dim("png", format!("expected [3,h,w], got {other:?}"))),
    };
    let plane = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + p]));
        }
    }
    Ok(out)
}

pub fn write_rgb8_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}

pub fn write_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let rgb = tensor_to_rgb8(image)?;
    write_rgb8_png(path, image.shape()[2], image.shape()[1], &rgb)
}

/// Tiles equally-shaped images row-major into a `cols`-wide grid.
pub fn png_grid(images: &[Tensor<f32>], cols: usize) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Parameter("no images for grid".into()))?;
    if cols == 0 {
        return Err(Error::Parameter("grid needs at least one column".into()));
    }
    let (h, w) = match first.shape() {
        &[3, h, w] => (h, w),
        other => return Err(Error::dim("grid", format!("image shape {other:?}"))),
    };
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut data = vec![0.0f32; 3 * gh * gw];
    for (i, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::dim("grid", format!("{:?} vs {:?}", img.shape(), first.shape())));
        }
        let (r, c) = (i / cols, i % cols);
        for ch in 0..3 {
            for y in 0..h {
                let dst = (ch * gh + r * h + y) * gw + c * w;
                data[dst..dst + w].copy_from_slice(&img.data()[(ch * h + y) * w..(ch * h + y + 1) * w]);
            }
        }
    }
    Tensor::new(vec![3, gh, gw], data)
}

pub fn write_png_grid(images: &[Tensor<f32>], cols: usize, path: &Path) -> Result<()> {
    write_png(&png_grid(images, cols)?, path)
}

pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let step = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Png("unexpanded palette".into())),
    };
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        let px = &buf[p * step..p * step + step];
        for c in 0..3 {
            let byte = if step >= 3 { px[c] } else { px[0] };
            data[c * plane + p] = byte as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Reads a manifest of image paths (one per line, `#` comments) relative to its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}

/// Loads every PNG in a manifest, resizing to `size` x `size` when given.
pub fn load_manifest(path: &Path, size: Option<usize>) -> Result<ImageDataset> {
    let images = read_manifest(path)?
        .iter()
        .map(|p| {
            let img = read_png(p)?;
            match size {
                Some(s) => resize(&img, s, s, ResizeMode::Bilinear),
                None => Ok(img),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ImageDataset::new(images, format!("manifest:{}", path.display()))
}
