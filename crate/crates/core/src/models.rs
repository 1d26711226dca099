//! Generator (encoder / fully-connected bottleneck / decoder with concatenated
//! skips) and discriminator (strided convolutions, global average pooling,
//! realness head and per-channel box-regression head).

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::error::{Error, Result};
use crate::maskgen::CHANNELS;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{s, Scalar, Tensor};

pub const KERNEL: usize = 3;
pub const PAD: usize = KERNEL / 2;
pub const BOX_COORDS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub height: usize,
    /// Channel width of the first generator level; doubles at every level.
    pub base_width: usize,
    /// Number of stride-2 down (and up) levels.
    pub depth: usize,
    pub bottleneck: usize,
    pub leaky_slope: f64,
    /// Append x/y coordinate planes to the discriminator input.
    pub coord_channels: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            width: 32,
            height: 32,
            base_width: 32,
            depth: 3,
            bottleneck: 256,
            leaky_slope: 0.2,
            coord_channels: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Best-effort reconstruction at 96x96 with a 4000-wide embedding. Layer
    /// counts and widths are not published; this is an approximation.
    pub fn full_scale() -> Self {
        ModelConfig {
            width: 96,
            height: 96,
            base_width: 64,
            depth: 5,
            bottleneck: 4000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = 1usize << self.depth;
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.width % f != 0 || self.height % f != 0 {
            return Err(Error::Config(format!(
                "{}x{} input is not divisible by 2^{}",
                self.width, self.height, self.depth
            )));
        }
        if self.base_width < 2 || self.bottleneck == 0 {
            return Err(Error::Config("base width must be >= 2 and bottleneck >= 1".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky slope {} outside (0,1)", self.leaky_slope)));
        }
        Ok(())
    }

    pub fn gen_channels(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn disc_channels(&self, level: usize) -> usize {
        (self.base_width / 2) << level
    }

    /// Spatial size `(h, w)` at an encoder level.
    pub fn level_size(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }

    pub fn disc_in_channels(&self) -> usize {
        if self.coord_channels {
            CHANNELS + 2
        } else {
            CHANNELS
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named tensors in a deterministic (sorted) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

pub type Bound = BTreeMap<String, Var>;

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Names and shapes, in order.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    /// Hash of every name, shape and scalar bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (k, v) in &self.tensors {
            k.hash(&mut h);
            v.shape().hash(&mut h);
            for x in v.data() {
                x.to_f64().map(f64::to_bits).hash(&mut h);
            }
        }
        h.finish()
    }

    /// Places every tensor on the tape, as trainable parameters or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        self.tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(k.clone(), v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

fn bound<'a>(b: &'a Bound, name: &str) -> Result<Var> {
    b.get(name)
        .copied()
        .ok_or_else(|| Error::Contract(format!("parameter `{name}` not bound")))
}

fn he_normal<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn add_conv<T: Scalar>(p: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) {
    p.insert(
        format!("{name}.w"),
        he_normal(vec![cout, cin, KERNEL, KERNEL], cin * KERNEL * KERNEL, rng),
    );
    p.insert(format!("{name}.b"), Tensor::zeros(vec![cout]));
}

fn add_conv_t<T: Scalar>(p: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) {
    p.insert(
        format!("{name}.w"),
        he_normal(vec![cin, cout, KERNEL, KERNEL], cin * KERNEL * KERNEL, rng),
    );
    p.insert(format!("{name}.b"), Tensor::zeros(vec![cout]));
}

fn add_linear<T: Scalar>(p: &mut ParamSet<T>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) {
    p.insert(format!("{name}.w"), he_normal(vec![din, dout], din, rng));
    p.insert(format!("{name}.b"), Tensor::zeros(vec![dout]));
}

fn add_bn<T: Scalar>(p: &mut ParamSet<T>, buffers: &mut ParamSet<T>, name: &str, c: usize) {
    p.insert(format!("{name}.gamma"), Tensor::ones(vec![c]));
    p.insert(format!("{name}.beta"), Tensor::zeros(vec![c]));
    buffers.insert(format!("{name}.mean"), Tensor::zeros(vec![c]));
    buffers.insert(format!("{name}.var"), Tensor::ones(vec![c]));
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    /// Batch-norm running statistics.
    pub buffers: ParamSet<T>,
}

pub struct GeneratorOutput<T> {
    pub image: Var,
    /// Train-mode batch statistics per batch-norm layer.
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> Generator<T> {
    pub fn build(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let mut buf = ParamSet::new();
        let ch = |l| config.gen_channels(l);
        add_conv(&mut p, "enc0.conv", CHANNELS, ch(0), rng);
        add_bn(&mut p, &mut buf, "enc0.bn", ch(0));
        for l in 1..=config.depth {
            add_conv(&mut p, &format!("enc{l}.conv"), ch(l - 1), ch(l), rng);
            add_bn(&mut p, &mut buf, &format!("enc{l}.bn"), ch(l));
        }
        let (hd, wd) = config.level_size(config.depth);
        let flat = ch(config.depth) * hd * wd;
        add_linear(&mut p, "fc.in", flat, config.bottleneck, rng);
        add_linear(&mut p, "fc.out", config.bottleneck, flat, rng);
        for l in (0..=config.depth).rev() {
            add_conv(&mut p, &format!("dec{l}.merge"), 2 * ch(l), ch(l), rng);
            add_bn(&mut p, &mut buf, &format!("dec{l}.bn"), ch(l));
            if l > 0 {
                add_conv_t(&mut p, &format!("dec{l}.up"), ch(l), ch(l - 1), rng);
                add_bn(&mut p, &mut buf, &format!("dec{l}.upbn"), ch(l - 1));
            }
        }
        add_conv(&mut p, "out.conv", ch(0), CHANNELS, rng);
        Ok(Generator {
            config: config.clone(),
            params: p,
            buffers: buf,
        })
    }

    /// Which encoder level feeds which decoder level: identical indices.
    pub fn skip_table(&self) -> Vec<(usize, usize)> {
        (0..=self.config.depth).map(|l| (l, l)).collect()
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        x: Var,
        conv: &str,
        bn: &str,
        stride: usize,
        mode: Mode,
        stats: &mut Vec<(String, BatchStats<T>)>,
    ) -> Result<Var> {
        let y = tape.conv2d(x, bound(b, &format!("{conv}.w"))?, bound(b, &format!("{conv}.b"))?, stride, PAD)?;
        let y = self.batchnorm(tape, b, y, bn, mode, stats)?;
        tape.relu(y)
    }

    fn batchnorm(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        x: Var,
        bn: &str,
        mode: Mode,
        stats: &mut Vec<(String, BatchStats<T>)>,
    ) -> Result<Var> {
        let gamma = bound(b, &format!("{bn}.gamma"))?;
        let beta = bound(b, &format!("{bn}.beta"))?;
        match mode {
            Mode::Train => {
                let (y, st) = tape.batchnorm2d_train(x, gamma, beta, self.config.bn_eps)?;
                stats.push((bn.to_string(), st));
                Ok(y)
            }
            Mode::Eval => tape.batchnorm2d_eval(
                x,
                gamma,
                beta,
                self.buffers.get(&format!("{bn}.mean"))?.data(),
                self.buffers.get(&format!("{bn}.var"))?.data(),
                self.config.bn_eps,
            ),
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            &[_, c, h, w] if c == CHANNELS && h == self.config.height && w == self.config.width => Ok(()),
            other => Err(Error::dim(
                "generator",
                format!(
                    "input {other:?} for a {}x{} RGB model",
                    self.config.height, self.config.width
                ),
            )),
        }
    }

    /// Maps a masked `[n, 3, H, W]` image to a completed one in (0, 1).
    pub fn forward(&self, tape: &mut Tape<T>, b: &Bound, input: Var, mode: Mode) -> Result<GeneratorOutput<T>> {
        self.check_input(tape.shape(input))?;
        let n = tape.shape(input)[0];
        let depth = self.config.depth;
        let mut stats = Vec::new();
        let mut skips = Vec::with_capacity(depth + 1);
        let mut x = self.block(tape, b, input, "enc0.conv", "enc0.bn", 1, mode, &mut stats)?;
        skips.push(x);
        for l in 1..=depth {
            x = self.block(tape, b, x, &format!("enc{l}.conv"), &format!("enc{l}.bn"), 2, mode, &mut stats)?;
            skips.push(x);
        }
        let enc_shape = tape.shape(x).to_vec();
        let flat = tape.reshape(x, &[n, enc_shape[1..].iter().product()])?;
        let z = tape.linear(flat, bound(b, "fc.in.w")?, bound(b, "fc.in.b")?)?;
        let z = tape.relu(z)?;
        let y = tape.linear(z, bound(b, "fc.out.w")?, bound(b, "fc.out.b")?)?;
        let y = tape.relu(y)?;
        let mut y = tape.reshape(y, &enc_shape)?;
        for l in (0..=depth).rev() {
            let cat = tape.concat_channels(&[y, skips[l]])?;
            y = self.block(tape, b, cat, &format!("dec{l}.merge"), &format!("dec{l}.bn"), 1, mode, &mut stats)?;
            if l > 0 {
                let up = tape.conv2d_transpose(
                    y,
                    bound(b, &format!("dec{l}.up.w"))?,
                    bound(b, &format!("dec{l}.up.b"))?,
                    2,
                    PAD,
                    1,
                )?;
                let up = self.batchnorm(tape, b, up, &format!("dec{l}.upbn"), mode, &mut stats)?;
                y = tape.relu(up)?;
            }
        }
        let logits = tape.conv2d(y, bound(b, "out.conv.w")?, bound(b, "out.conv.b")?, 1, PAD)?;
        let image = tape.sigmoid(logits)?;
        Ok(GeneratorOutput { image, bn_stats: stats })
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<T>)]) -> Result<()> {
        let m: T = s(self.config.bn_momentum);
        for (name, st) in stats {
            let mean = self.buffers.get_mut(&format!("{name}.mean"))?;
            for (r, &v) in mean.data_mut().iter_mut().zip(&st.mean) {
                *r = (T::one() - m) * *r + m * v;
            }
            let var = self.buffers.get_mut(&format!("{name}.var"))?;
            for (r, &v) in var.data_mut().iter_mut().zip(&st.var) {
                *r = (T::one() - m) * *r + m * v;
            }
        }
        Ok(())
    }

    /// Eval-mode completion of a masked batch, outside of any training tape.
    pub fn complete(&self, masked: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(masked.clone());
        let out = self.forward(&mut tape, &b, x, Mode::Eval)?;
        Ok(tape.value(out.image).clone())
    }
}

/// `[n, 2, h, w]` planes: x ramp `i/(W-1)` then y ramp `j/(H-1)`.
pub fn coord_planes<T: Scalar>(n: usize, height: usize, width: usize) -> Tensor<T> {
    let ramp = |i: usize, len: usize| -> T {
        if len > 1 {
            s(i as f64 / (len - 1) as f64)
        } else {
            T::zero()
        }
    };
    let plane = height * width;
    Tensor::from_fn(vec![n, 2, height, width], |idx| {
        let within = idx % (2 * plane);
        let (ch, p) = (within / plane, within % plane);
        let (y, x) = (p / width, p % width);
        if ch == 0 {
            ramp(x, width)
        } else {
            ramp(y, height)
        }
    })
}

/// Appends the two coordinate planes to a `[n, 3, h, w]` image.
pub fn add_coord_channels<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = image.dims4("add_coord_channels")?;
    let coords = coord_planes::<T>(n, h, w);
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (c + 2) * plane);
    for b in 0..n {
        data.extend_from_slice(&image.data()[b * c * plane..(b + 1) * c * plane]);
        data.extend_from_slice(&coords.data()[b * 2 * plane..(b + 1) * 2 * plane]);
    }
    Tensor::new(vec![n, c + 2, h, w], data)
}

#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

pub struct DiscriminatorOutput {
    /// `[n]` probability that each image is real.
    pub realness: Var,
    /// `[n, 3, 4]` normalized box estimates per channel.
    pub boxes: Var,
}

impl<T: Scalar> Discriminator<T> {
    pub fn build(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let ch = |l| config.disc_channels(l);
        add_conv(&mut p, "d0.conv", config.disc_in_channels(), ch(0), rng);
        for l in 1..=config.depth {
            add_conv(&mut p, &format!("d{l}.conv"), ch(l - 1), ch(l), rng);
        }
        let feat = ch(config.depth);
        add_linear(&mut p, "real.fc", feat, 1, rng);
        add_linear(&mut p, "box.fc", feat, CHANNELS * BOX_COORDS, rng);
        Ok(Discriminator {
            config: config.clone(),
            params: p,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, b: &Bound, image: Var) -> Result<DiscriminatorOutput> {
        let shape = tape.shape(image).to_vec();
        let [n, c, h, w] = match shape[..] {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::dim("discriminator", format!("input {shape:?}"))),
        };
        if c != CHANNELS || h != self.config.height || w != self.config.width {
            return Err(Error::dim(
                "discriminator",
                format!("input {shape:?} for a {}x{} RGB model", self.config.height, self.config.width),
            ));
        }
        let mut x = image;
        if self.config.coord_channels {
            let coords = tape.constant(coord_planes(n, h, w));
            x = tape.concat_channels(&[x, coords])?;
        }
        for l in 0..=self.config.depth {
            let stride = if l == 0 { 1 } else { 2 };
            x = tape.conv2d(x, bound(b, &format!("d{l}.conv.w"))?, bound(b, &format!("d{l}.conv.b"))?, stride, PAD)?;
            x = tape.leaky_relu(x, self.config.leaky_slope)?;
        }
        let pooled = tape.global_avg_pool(x)?;
        let r = tape.linear(pooled, bound(b, "real.fc.w")?, bound(b, "real.fc.b")?)?;
        let r = tape.sigmoid(r)?;
        let realness = tape.reshape(r, &[n])?;
        let bx = tape.linear(pooled, bound(b, "box.fc.w")?, bound(b, "box.fc.b")?)?;
        let bx = tape.sigmoid(bx)?;
        let boxes = tape.reshape(bx, &[n, CHANNELS, BOX_COORDS])?;
        Ok(DiscriminatorOutput { realness, boxes })
    }

    /// Evaluates on a batch outside of training; returns `(realness, boxes)`.
    pub fn evaluate(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, &b, x)?;
        Ok((tape.value(out.realness).clone(), tape.value(out.boxes).clone()))
    }
}
