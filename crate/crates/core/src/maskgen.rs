//! Channel-wise binary masks for the five completion tasks, plus the fixed
//! occlusion templates used for targeted-occlusion evaluation.
//!
//! Convention: a mask value of 1 means the pixel/channel is visible to the
//! generator, 0 means it is dropped.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHANNELS: usize = 3;

/// Axis-aligned rectangle in one color channel, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub channel: usize,
}

impl ChannelBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    pub fn is_valid(&self, width: usize, height: usize) -> bool {
        self.w >= 1
            && self.h >= 1
            && self.x + self.w <= width
            && self.y + self.h <= height
            && self.channel < CHANNELS
    }
}

/// Box corners scaled to `[0, 1]`: `(x/W, y/H, (x+w)/W, (y+h)/H)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedBox(pub [f64; 4]);

pub fn normalize_box(b: &ChannelBox, width: usize, height: usize) -> NormalizedBox {
    let (w, h) = (width as f64, height as f64);
    NormalizedBox([
        b.x as f64 / w,
        b.y as f64 / h,
        (b.x + b.w) as f64 / w,
        (b.y + b.h) as f64 / h,
    ])
}

pub fn denormalize_box(nb: &NormalizedBox, channel: usize, width: usize, height: usize) -> ChannelBox {
    let [x0, y0, x1, y1] = nb.0;
    let (w, h) = (width as f64, height as f64);
    let (px0, py0) = ((x0 * w).round() as usize, (y0 * h).round() as usize);
    let (px1, py1) = ((x1 * w).round() as usize, (y1 * h).round() as usize);
    ChannelBox {
        x: px0,
        y: py0,
        w: px1 - px0,
        h: py1 - py0,
        channel,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    /// Central box dropped.
    Inpainting,
    /// Only the central box visible.
    ReverseInpainting,
    /// `visible` whole channels visible, the others dropped.
    Colorization { visible: u8 },
    /// One random box, shared by all channels.
    RandomExtrapolation,
    /// One independent random box per channel.
    Rec,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Inpainting,
        Task::ReverseInpainting,
        Task::Colorization { visible: 1 },
        Task::Colorization { visible: 2 },
        Task::RandomExtrapolation,
        Task::Rec,
    ];

    /// Builds a task from its short name; colorization takes the visible-channel count.
    pub fn parse(name: &str, k: Option<u8>) -> Result<Task> {
        let task = match name.to_ascii_lowercase().as_str() {
            "i" | "inpainting" => Task::Inpainting,
            "ri" | "reverse-inpainting" => Task::ReverseInpainting,
            "re" => Task::RandomExtrapolation,
            "rec" => Task::Rec,
            "col" | "colorization" => Task::Colorization { visible: k.unwrap_or(1) },
            "col1" => Task::Colorization { visible: 1 },
            "col2" => Task::Colorization { visible: 2 },
            other => return Err(Error::Parameter(format!("unknown task `{other}`"))),
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Task::Colorization { visible } if !(1..=2).contains(visible) => Err(Error::Parameter(
                format!("colorization needs 1 or 2 visible channels, got {visible}"),
            )),
            _ => Ok(()),
        }
    }

    /// Whether the task draws random boxes the hide-and-seek game can regress.
    pub fn supports_hide_and_seek(&self) -> bool {
        matches!(self, Task::RandomExtrapolation | Task::Rec)
    }

    pub fn short_name(&self) -> String {
        match self {
            Task::Inpainting => "i".into(),
            Task::ReverseInpainting => "ri".into(),
            Task::Colorization { visible } => format!("col{visible}"),
            Task::RandomExtrapolation => "re".into(),
            Task::Rec => "rec".into(),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.short_name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::parse(s, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Occlusion {
    RightHalf,
    LeftHalf,
    BothEyes,
    RightEye,
    LeftEye,
    Mouth,
}

impl Occlusion {
    pub const ALL: [Occlusion; 6] = [
        Occlusion::RightHalf,
        Occlusion::LeftHalf,
        Occlusion::BothEyes,
        Occlusion::RightEye,
        Occlusion::LeftEye,
        Occlusion::Mouth,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Occlusion::RightHalf => "right_half",
            Occlusion::LeftHalf => "left_half",
            Occlusion::BothEyes => "both_eyes",
            Occlusion::RightEye => "right_eye",
            Occlusion::LeftEye => "left_eye",
            Occlusion::Mouth => "mouth",
        }
    }
}

impl FromStr for Occlusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Occlusion::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown occlusion template `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Task(Task),
    Occlusion(Occlusion),
}

/// A batch of realized masks and the boxes that generated them.
#[derive(Debug, Clone)]
pub struct MaskBatch {
    pub kind: MaskKind,
    pub ratio: f64,
    pub width: usize,
    pub height: usize,
    /// Per image, per channel. `None` means the channel has no box (fully
    /// dropped for colorization). For inpainting and occlusions the box marks
    /// the *dropped* region.
    pub boxes: Vec<[Option<ChannelBox>; CHANNELS]>,
    /// `[n, 3, height, width]` of exact 0/1 values.
    pub mask: Tensor<f32>,
}

impl MaskBatch {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn mask_as<T: Scalar>(&self) -> Tensor<T> {
        self.mask.cast()
    }

    /// Normalized visible boxes for the hide-and-seek targets, one triple per image.
    pub fn normalized_boxes(&self) -> Result<Vec<[NormalizedBox; CHANNELS]>> {
        self.boxes
            .iter()
            .map(|per_image| {
                let mut out = [NormalizedBox([0.0; 4]); CHANNELS];
                for (c, b) in per_image.iter().enumerate() {
                    let b = b.ok_or_else(|| {
                        Error::Parameter("mask has no box for every channel".into())
                    })?;
                    out[c] = normalize_box(&b, self.width, self.height);
                }
                Ok(out)
            })
            .collect()
    }

    /// Mask restricted to one image, as `[3, h, w]`.
    pub fn image_mask(&self, index: usize) -> Result<Tensor<f32>> {
        self.mask.index_first(index)
    }
}

fn check_ratio(ratio: f64, width: usize, height: usize) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!("masking ratio {ratio} outside (0,1)")));
    }
    if ratio * ((width * height) as f64) < 1.0 || ratio * (height as f64) < 1.0 {
        return Err(Error::Parameter(format!(
            "masking ratio {ratio} leaves less than one pixel on {width}x{height}"
        )));
    }
    Ok(())
}

/// Continuous box height, uniform on `[S*H, H]`.
pub fn sample_height(rng: &mut impl Rng, ratio: f64, height: usize) -> f64 {
    let h = height as f64;
    let lo = ratio * h;
    lo + rng.random::<f64>() * (h - lo)
}

/// One box of area `S*W*H` (up to rounding) at a uniformly random position.
pub fn sample_box(
    rng: &mut impl Rng,
    ratio: f64,
    width: usize,
    height: usize,
    channel: usize,
) -> Result<ChannelBox> {
    check_ratio(ratio, width, height)?;
    let h_cont = sample_height(rng, ratio, height);
    let h = (h_cont.round() as usize).clamp(1, height);
    let area = ratio * (width * height) as f64;
    let w = ((area / h as f64).round() as usize).clamp(1, width);
    let x = rng.random_range(0..=width - w);
    let y = rng.random_range(0..=height - h);
    Ok(ChannelBox { x, y, w, h, channel })
}

/// Independent boxes for the three channels.
pub fn sample_rec_mask(
    rng: &mut impl Rng,
    ratio: f64,
    width: usize,
    height: usize,
) -> Result<[ChannelBox; CHANNELS]> {
    Ok([
        sample_box(rng, ratio, width, height, 0)?,
        sample_box(rng, ratio, width, height, 1)?,
        sample_box(rng, ratio, width, height, 2)?,
    ])
}

/// The fixed centered box of reverse inpainting, `round(W sqrt S) x round(H sqrt S)`.
pub fn center_box(ratio: f64, width: usize, height: usize, channel: usize) -> ChannelBox {
    let w = ((width as f64 * ratio.sqrt()).round() as usize).clamp(1, width);
    let h = ((height as f64 * ratio.sqrt()).round() as usize).clamp(1, height);
    ChannelBox {
        x: (width - w) / 2,
        y: (height - h) / 2,
        w,
        h,
        channel,
    }
}

fn paint_box(mask: &mut [f32], b: &ChannelBox, width: usize, height: usize, value: f32) {
    let plane = &mut mask[b.channel * width * height..(b.channel + 1) * width * height];
    for y in b.y..b.y + b.h {
        plane[y * width + b.x..y * width + b.x + b.w].fill(value);
    }
}

pub fn make_mask(
    task: Task,
    rng: &mut impl Rng,
    ratio: f64,
    width: usize,
    height: usize,
    n: usize,
) -> Result<MaskBatch> {
    task.validate()?;
    if n == 0 {
        return Err(Error::Parameter("mask batch needs at least one image".into()));
    }
    if !matches!(task, Task::Colorization { .. }) {
        check_ratio(ratio, width, height)?;
    }
    let plane = width * height;
    let mut data = vec![0.0f32; n * CHANNELS * plane];
    let mut boxes = Vec::with_capacity(n);
    for img in data.chunks_mut(CHANNELS * plane) {
        let per_image: [Option<ChannelBox>; CHANNELS] = match task {
            Task::Rec => sample_rec_mask(rng, ratio, width, height)?.map(Some),
            Task::RandomExtrapolation => {
                let b = sample_box(rng, ratio, width, height, 0)?;
                [0, 1, 2].map(|c| Some(ChannelBox { channel: c, ..b }))
            }
            Task::ReverseInpainting | Task::Inpainting => {
                [0, 1, 2].map(|c| Some(center_box(ratio, width, height, c)))
            }
            Task::Colorization { visible } => {
                let mut chans = [0usize, 1, 2];
                // Fisher-Yates so the visible subset is uniform.
                for i in (1..CHANNELS).rev() {
                    let j = rng.random_range(0..=i);
                    chans.swap(i, j);
                }
                let mut out = [None; CHANNELS];
                for &c in &chans[..visible as usize] {
                    out[c] = Some(ChannelBox {
                        x: 0,
                        y: 0,
                        w: width,
                        h: height,
                        channel: c,
                    });
                }
                out
            }
        };
        if task == Task::Inpainting {
            img.fill(1.0);
            for b in per_image.iter().flatten() {
                paint_box(img, b, width, height, 0.0);
            }
        } else {
            for b in per_image.iter().flatten() {
                paint_box(img, b, width, height, 1.0);
            }
        }
        boxes.push(per_image);
    }
    Ok(MaskBatch {
        kind: MaskKind::Task(task),
        ratio,
        width,
        height,
        boxes,
        mask: Tensor::new(vec![n, CHANNELS, height, width], data)?,
    })
}

/// Fractions of pixels with all channels dropped and with at least one dropped.
pub fn corruption_stats(batch: &MaskBatch) -> (f64, f64) {
    let plane = batch.width * batch.height;
    let (mut dropped, mut corrupted) = (0usize, 0usize);
    for img in batch.mask.data().chunks(CHANNELS * plane) {
        for p in 0..plane {
            let hidden = (0..CHANNELS).filter(|&c| img[c * plane + p] == 0.0).count();
            if hidden == CHANNELS {
                dropped += 1;
            }
            if hidden > 0 {
                corrupted += 1;
            }
        }
    }
    let total = (batch.len() * plane) as f64;
    (dropped as f64 / total, corrupted as f64 / total)
}

/// Dropped region of an occlusion template, in pixels.
pub fn occlusion_region(kind: Occlusion, width: usize, height: usize) -> ChannelBox {
    let centered = |cx: usize, cy: usize, w: usize, h: usize| ChannelBox {
        x: cx - w / 2,
        y: cy - h / 2,
        w,
        h,
        channel: 0,
    };
    let eye = |cx: usize| centered(cx, height / 3, width / 3, height / 6);
    match kind {
        Occlusion::RightHalf => ChannelBox {
            x: width / 2,
            y: 0,
            w: width - width / 2,
            h: height,
            channel: 0,
        },
        Occlusion::LeftHalf => ChannelBox {
            x: 0,
            y: 0,
            w: width / 2,
            h: height,
            channel: 0,
        },
        Occlusion::LeftEye => eye(width / 3),
        Occlusion::RightEye => eye(2 * width / 3),
        Occlusion::BothEyes => {
            let (l, r) = (eye(width / 3), eye(2 * width / 3));
            ChannelBox {
                x: l.x,
                y: l.y,
                w: r.x + r.w - l.x,
                h: l.h,
                channel: 0,
            }
        }
        Occlusion::Mouth => centered(width / 2, 3 * height / 4, width / 2, height / 6),
    }
}

/// Deterministic single-image mask with the named region dropped in every channel.
pub fn occlusion_template(kind: Occlusion, width: usize, height: usize) -> Result<MaskBatch> {
    if width < 8 || height < 8 {
        return Err(Error::Parameter(format!(
            "occlusion templates need at least 8x8, got {width}x{height}"
        )));
    }
    let region = occlusion_region(kind, width, height);
    let mut data = vec![1.0f32; CHANNELS * width * height];
    let per_image = [0, 1, 2].map(|c| Some(ChannelBox { channel: c, ..region }));
    for b in per_image.iter().flatten() {
        paint_box(&mut data, b, width, height, 0.0);
    }
    let dropped = region.area() as f64 / (width * height) as f64;
    Ok(MaskBatch {
        kind: MaskKind::Occlusion(kind),
        ratio: 1.0 - dropped,
        width,
        height,
        boxes: vec![per_image],
        mask: Tensor::new(vec![1, CHANNELS, height, width], data)?,
    })
}

/// Writes one image's mask as an 8-bit RGB PNG, 255 where visible.
pub fn write_mask_png(batch: &MaskBatch, index: usize, path: &Path) -> Result<()> {
    let m = batch.image_mask(index)?;
    let rgb = crate::dataio::tensor_to_rgb8(&m)?;
    crate::dataio::write_rgb8_png(path, batch.width, batch.height, &rgb)
}

/// Writes the `c x y w h` sidecar for one image, one line per boxed channel.
pub fn write_box_sidecar(batch: &MaskBatch, index: usize, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let per_image = batch
        .boxes
        .get(index)
        .ok_or_else(|| Error::Parameter(format!("no image {index} in mask batch")))?;
    for b in per_image.iter().flatten() {
        writeln!(file, "{} {} {} {} {}", b.channel, b.x, b.y, b.w, b.h).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_box_sidecar(path: &Path) -> Result<Vec<ChannelBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0;
    let mut out = Vec::new();
    for line in text.lines() {
        let fields: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                offset,
                detail: format!("bad box line `{line}`: {e}"),
            })?;
        offset += line.len() + 1;
        match fields[..] {
            [] => continue,
            [channel, x, y, w, h] => out.push(ChannelBox { x, y, w, h, channel }),
            _ => {
                return Err(Error::Parse {
                    offset,
                    detail: format!("expected `c x y w h`, got `{line}`"),
                })
            }
        }
    }
    Ok(out)
}
