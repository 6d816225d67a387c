//! Learnable networks: the correspondence encoder, the rendering U-Net with
//! spatially adaptive modulation, and the multi-scale patch discriminator.
//!
//! Parameters live in a [`ParamSet`] keyed by dotted paths
//! (`gmr.dec1.spade.gamma.weight`). A forward pass binds them to a tape through
//! [`Bound`], which decides per network whether they are trainable leaves or
//! constants.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::image::{Image, ParsingMap, NUM_LABELS};
use crate::pyramid::{bilinear_resize, validate_factor};
use crate::tensor::{Array, Real};

const LRELU: f64 = 0.2;
const IN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters, stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Low-frequency downsampling factor.
    pub d: usize,
    /// Encoder widths: the first for the full-resolution block, the rest for
    /// the `log2(d)` down blocks (the last width repeats if there are fewer).
    pub esc_widths: Vec<usize>,
    /// Channels of the correspondence features.
    pub feat_channels: usize,
    /// Renderer widths per U-Net level.
    pub gmr_widths: Vec<usize>,
    pub gmr_res_blocks: usize,
    /// Hidden width of each modulation head.
    pub spade_hidden: usize,
    pub disc_width: usize,
    pub disc_scales: usize,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d: 2,
            esc_widths: vec![32, 64],
            feat_channels: 64,
            gmr_widths: vec![32, 64, 64],
            gmr_res_blocks: 2,
            spade_hidden: 16,
            disc_width: 32,
            disc_scales: 3,
            seed: 0,
        }
    }
}

impl ArchConfig {
    /// Tiny widths for tests and gradient checks.
    pub fn toy(d: usize) -> Self {
        Self {
            d,
            esc_widths: vec![4, 6],
            feat_channels: 5,
            gmr_widths: vec![4, 6],
            gmr_res_blocks: 1,
            spade_hidden: 3,
            disc_width: 4,
            disc_scales: 2,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_factor(self.d)?;
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        if self.esc_widths.is_empty() || self.gmr_widths.is_empty() {
            return Err(Error::Config("network widths must not be empty".into()));
        }
        for &w in self.esc_widths.iter().chain(&self.gmr_widths) {
            positive("network width", w)?;
        }
        positive("feat_channels", self.feat_channels)?;
        positive("spade_hidden", self.spade_hidden)?;
        positive("disc_width", self.disc_width)?;
        positive("disc_scales", self.disc_scales)?;
        Ok(())
    }

    /// Input side lengths must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        let gmr = 1 << (self.gmr_widths.len() - 1);
        let disc = 1 << (self.disc_scales + 1);
        self.d.max(gmr).max(disc)
    }

    fn esc_width(&self, i: usize) -> usize {
        self.esc_widths[i.min(self.esc_widths.len() - 1)]
    }

    fn esc_downs(&self) -> usize {
        self.d.trailing_zeros() as usize
    }

    /// Every block of the three networks, in forward order.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut b = Vec::new();
        b.push(BlockSpec::new("esc.conv0", BlockKind::Conv, 3 + NUM_LABELS, self.esc_width(0)));
        for i in 1..=self.esc_downs() {
            b.push(BlockSpec::new(&format!("esc.down{i}"), BlockKind::Down, self.esc_width(i - 1), self.esc_width(i)));
        }
        b.push(BlockSpec {
            kernel: 1,
            norm: false,
            ..BlockSpec::new("esc.proj", BlockKind::Conv, self.esc_width(self.esc_downs()), self.feat_channels)
        });

        let w = &self.gmr_widths;
        let levels = w.len();
        b.push(BlockSpec::new("gmr.e0", BlockKind::Conv, 6, w[0]));
        for l in 1..levels {
            b.push(BlockSpec::new(&format!("gmr.e{l}"), BlockKind::Down, w[l - 1], w[l]));
        }
        for r in 0..self.gmr_res_blocks {
            b.push(BlockSpec::new(&format!("gmr.res{r}"), BlockKind::Res, w[levels - 1], w[levels - 1]));
        }
        let mut ch = w[levels - 1];
        for l in (1..levels).rev() {
            b.push(BlockSpec::new(&format!("gmr.dec{l}.spade"), BlockKind::Spade, 3, ch));
            b.push(BlockSpec::new(&format!("gmr.dec{l}.up"), BlockKind::Up, ch, w[l - 1]));
            ch = 2 * w[l - 1];
        }
        b.push(BlockSpec::new("gmr.dec0.spade", BlockKind::Spade, 3, ch));
        b.push(BlockSpec::new("gmr.dec0.conv", BlockKind::Conv, ch, w[0]));
        b.push(BlockSpec {
            norm: false,
            ..BlockSpec::new("gmr.out", BlockKind::Conv, w[0], 3)
        });

        let dw = self.disc_width;
        for s in 0..self.disc_scales {
            let p = format!("d.s{s}");
            b.push(BlockSpec {
                kernel: 4,
                norm: false,
                ..BlockSpec::new(&format!("{p}.l0"), BlockKind::Down, 3, dw)
            });
            b.push(BlockSpec {
                kernel: 4,
                ..BlockSpec::new(&format!("{p}.l1"), BlockKind::Down, dw, 2 * dw)
            });
            b.push(BlockSpec::new(&format!("{p}.l2"), BlockKind::Conv, 2 * dw, 2 * dw));
            b.push(BlockSpec {
                norm: false,
                ..BlockSpec::new(&format!("{p}.l3"), BlockKind::Conv, 2 * dw, 1)
            });
        }
        b
    }

    /// Parameter paths and shapes; biases are present only where no
    /// normalisation follows.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut m = BTreeMap::new();
        let k = |out: usize, inp: usize, ks: usize| vec![out, inp, ks, ks];
        for b in self.blocks() {
            match b.kind {
                BlockKind::Conv | BlockKind::Down | BlockKind::Up => {
                    m.insert(format!("{}.weight", b.path), k(b.cout, b.cin, b.kernel));
                    if !b.norm {
                        m.insert(format!("{}.bias", b.path), vec![b.cout]);
                    }
                }
                BlockKind::Res => {
                    m.insert(format!("{}.conv1.weight", b.path), k(b.cout, b.cin, 3));
                    m.insert(format!("{}.conv2.weight", b.path), k(b.cout, b.cout, 3));
                    m.insert(format!("{}.conv2.bias", b.path), vec![b.cout]);
                }
                BlockKind::Spade => {
                    let h = self.spade_hidden;
                    m.insert(format!("{}.shared.weight", b.path), k(h, b.cin, 3));
                    m.insert(format!("{}.shared.bias", b.path), vec![h]);
                    for head in ["gamma", "beta"] {
                        m.insert(format!("{}.{head}.weight", b.path), k(b.cout, h, 3));
                        m.insert(format!("{}.{head}.bias", b.path), vec![b.cout]);
                    }
                }
            }
        }
        m
    }
}

/// The five block kinds the networks are assembled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Conv,
    Down,
    Up,
    Res,
    Spade,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub path: String,
    pub kind: BlockKind,
    /// For modulation blocks `cin` is the conditioning channel count and
    /// `cout` the modulated feature channels.
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub norm: bool,
}

impl BlockSpec {
    fn new(path: &str, kind: BlockKind, cin: usize, cout: usize) -> Self {
        Self {
            path: path.to_string(),
            kind,
            cin,
            cout,
            kernel: 3,
            norm: true,
        }
    }
}

/// Named parameter arrays plus the architecture that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    pub config: ArchConfig,
    pub tensors: BTreeMap<String, Array<T>>,
}

impl<T: Real> ParamSet<T> {
    /// Normal(0, 0.02) weights and zero biases from the config seed.
    pub fn init(config: &ArchConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(path, shape)| {
                let a = if path.ends_with(".bias") {
                    Array::zeros(&shape)
                } else {
                    Array::from_fn(&shape, |_| T::c(normal.sample(&mut rng)))
                };
                (path, a)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Checks that paths and shapes match the config and values are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let want = self.config.param_shapes();
        for (path, shape) in &want {
            let a = self
                .tensors
                .get(path)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {path}")))?;
            if a.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {path} has shape {:?}, expected {shape:?}",
                    a.shape()
                )));
            }
            if !a.all_finite() {
                return Err(Error::non_finite(path.clone(), "parameter is not finite"));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !want.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Array<T>> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::Config(format!("unknown parameter {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Array<T>> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::Config(format!("unknown parameter {path}")))
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Array::len).sum()
    }

    pub fn paths_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.tensors.keys().filter(move |k| k.starts_with(prefix))
    }
}

/// Network selector for trainability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Net {
    Encoder,
    Renderer,
    Discriminator,
}

impl Net {
    pub fn prefix(self) -> &'static str {
        match self {
            Net::Encoder => "esc.",
            Net::Renderer => "gmr.",
            Net::Discriminator => "d.",
        }
    }
}

/// Parameters bound to one tape. Each path is materialised once, on first use.
pub struct Bound<'t, 'p, T: Real> {
    tape: &'t Tape<T>,
    params: &'p ParamSet<T>,
    trainable: Vec<Net>,
    vars: RefCell<BTreeMap<String, Var<'t, T>>>,
}

impl<'t, 'p, T: Real> Bound<'t, 'p, T> {
    pub fn new(tape: &'t Tape<T>, params: &'p ParamSet<T>, trainable: &[Net]) -> Self {
        Self {
            tape,
            params,
            trainable: trainable.to_vec(),
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    /// All parameters as constants.
    pub fn frozen(tape: &'t Tape<T>, params: &'p ParamSet<T>) -> Self {
        Self::new(tape, params, &[])
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn config(&self) -> &'p ArchConfig {
        &self.params.config
    }

    fn is_trainable(&self, path: &str) -> bool {
        self.trainable.iter().any(|n| path.starts_with(n.prefix()))
    }

    pub fn var(&self, path: &str) -> Var<'t, T> {
        if let Some(v) = self.vars.borrow().get(path) {
            return *v;
        }
        let a = self
            .params
            .tensors
            .get(path)
            .unwrap_or_else(|| panic!("parameter {path} missing from a validated set"))
            .clone();
        let v = if self.is_trainable(path) {
            self.tape.leaf(a)
        } else {
            self.tape.constant(a)
        };
        self.vars.borrow_mut().insert(path.to_string(), v);
        v
    }

    fn opt_var(&self, path: &str) -> Option<Var<'t, T>> {
        self.params.tensors.contains_key(path).then(|| self.var(path))
    }

    /// Gradients of every trainable parameter touched by this tape; untouched
    /// trainable parameters get zeros.
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Array<T>> {
        let vars = self.vars.borrow();
        self.params
            .tensors
            .iter()
            .filter(|(k, _)| self.is_trainable(k))
            .map(|(k, a)| {
                let g = vars
                    .get(k)
                    .and_then(|v| grads.get(*v).cloned())
                    .unwrap_or_else(|| Array::zeros(a.shape()));
                (k.clone(), g)
            })
            .collect()
    }
}

fn conv<'t, T: Real>(b: &Bound<'t, '_, T>, x: Var<'t, T>, path: &str, stride: usize) -> Var<'t, T> {
    let w = b.var(&format!("{path}.weight"));
    let k = w.value().shape()[2];
    let pad = (k - 1) / 2;
    x.conv2d(w, b.opt_var(&format!("{path}.bias")), stride, pad)
}

fn lrelu<T: Real>(x: Var<'_, T>) -> Var<'_, T> {
    x.leaky_relu(T::c(LRELU))
}

fn norm<T: Real>(x: Var<'_, T>) -> Var<'_, T> {
    x.instance_norm(T::c(IN_EPS))
}

/// conv 3×3 → instance norm → leaky ReLU.
fn conv_block<'t, T: Real>(b: &Bound<'t, '_, T>, x: Var<'t, T>, path: &str) -> Var<'t, T> {
    lrelu(norm(conv(b, x, path, 1)))
}

/// Strided conv 3×3 → instance norm → leaky ReLU.
fn down_block<'t, T: Real>(b: &Bound<'t, '_, T>, x: Var<'t, T>, path: &str) -> Var<'t, T> {
    lrelu(norm(conv(b, x, path, 2)))
}

/// conv 3×3 followed by nearest ×2 upsampling.
fn up_block<'t, T: Real>(b: &Bound<'t, '_, T>, x: Var<'t, T>, path: &str) -> Var<'t, T> {
    conv(b, x, path, 1).upsample_nearest2()
}

/// Pre-activation residual block.
fn res_block<'t, T: Real>(b: &Bound<'t, '_, T>, x: Var<'t, T>, path: &str) -> Var<'t, T> {
    let h = conv(b, lrelu(norm(x)), &format!("{path}.conv1"), 1);
    let h = conv(b, lrelu(norm(h)), &format!("{path}.conv2"), 1);
    x + h
}

/// `IN(x)·(1 + γ) + β`, with γ and β predicted from the resized condition.
fn spade<'t, T: Real>(b: &Bound<'t, '_, T>, x: Var<'t, T>, cond: Var<'t, T>, path: &str) -> Var<'t, T> {
    let s = x.shape();
    let c = bilinear_resize(cond, s[2], s[3]);
    let h = conv(b, c, &format!("{path}.shared"), 1).relu();
    let gamma = conv(b, h, &format!("{path}.gamma"), 1);
    let beta = conv(b, h, &format!("{path}.beta"), 1);
    norm(x) * gamma.add_scalar(T::ONE) + beta
}

fn check_input(v: &Var<'_, impl Real>, what: &str, channels: usize, multiple: usize) -> Result<(usize, usize)> {
    let (n, c, h, w) = v.value().dims4()?;
    if n != 1 || c != channels {
        return Err(Error::Dimension(format!(
            "{what}: expected (1, {channels}, H, W), got {:?}",
            v.shape()
        )));
    }
    if h % multiple != 0 || w % multiple != 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!(
            "{what}: {h}x{w} is not a positive multiple of {multiple}"
        )));
    }
    Ok((h, w))
}

/// Correspondence features from a foreground-masked image and its one-hot
/// parsing: `(1, C, H/d, W/d)`.
pub fn sc_encode_var<'t, T: Real>(
    b: &Bound<'t, '_, T>,
    img_fg: Var<'t, T>,
    onehot: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let cfg = b.config();
    let (h, w) = check_input(&img_fg, "encoder image", 3, cfg.d)?;
    let (h2, w2) = check_input(&onehot, "encoder parsing", NUM_LABELS, cfg.d)?;
    if (h, w) != (h2, w2) {
        return Err(Error::Dimension(format!("encoder image {h}x{w} vs parsing {h2}x{w2}")));
    }
    let mut x = conv_block(b, Var::concat_channels(&[img_fg, onehot]), "esc.conv0");
    for i in 1..=cfg.esc_downs() {
        x = down_block(b, x, &format!("esc.down{i}"));
    }
    Ok(conv(b, x, "esc.proj", 1))
}

/// Renders `(1, 3, H, W)` in `[0, 1]` from background, high-frequency detail
/// and a low-frequency condition at `(H/d, W/d)`.
pub fn render_var<'t, T: Real>(
    b: &Bound<'t, '_, T>,
    bg: Var<'t, T>,
    hf: Var<'t, T>,
    cond: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let cfg = b.config();
    let levels = cfg.gmr_widths.len();
    let multiple = cfg.d.max(1 << (levels - 1));
    let (h, w) = check_input(&bg, "renderer background", 3, multiple)?;
    if hf.shape() != bg.shape() {
        return Err(Error::Dimension(format!(
            "renderer: background {:?} vs high-frequency {:?}",
            bg.shape(),
            hf.shape()
        )));
    }
    let cs = cond.shape();
    if cs != [1, 3, h / cfg.d, w / cfg.d] {
        return Err(Error::Dimension(format!(
            "renderer: condition {cs:?} does not match {h}x{w} at factor {}",
            cfg.d
        )));
    }
    let mut skips = vec![conv_block(b, Var::concat_channels(&[bg, hf]), "gmr.e0")];
    for l in 1..levels {
        let prev = *skips.last().expect("non-empty");
        skips.push(down_block(b, prev, &format!("gmr.e{l}")));
    }
    let mut x = skips.pop().expect("non-empty");
    for r in 0..cfg.gmr_res_blocks {
        x = res_block(b, x, &format!("gmr.res{r}"));
    }
    for l in (1..levels).rev() {
        x = lrelu(spade(b, x, cond, &format!("gmr.dec{l}.spade")));
        x = up_block(b, x, &format!("gmr.dec{l}.up"));
        x = Var::concat_channels(&[x, skips.pop().expect("skip per level")]);
    }
    x = lrelu(spade(b, x, cond, "gmr.dec0.spade"));
    x = conv_block(b, x, "gmr.dec0.conv");
    let t = conv(b, x, "gmr.out", 1).tanh();
    Ok(t.add_scalar(T::ONE).scale(T::c(0.5)))
}

/// Patch scores at scales 1, 1/2, 1/4, ... of the input.
pub fn discriminate_var<'t, T: Real>(b: &Bound<'t, '_, T>, img: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
    let cfg = b.config();
    check_input(&img, "discriminator input", 3, 1 << (cfg.disc_scales + 1))?;
    let mut x = img;
    let mut out = Vec::with_capacity(cfg.disc_scales);
    for s in 0..cfg.disc_scales {
        if s > 0 {
            x = x.avg_pool2();
        }
        let p = format!("d.s{s}");
        let h = lrelu(conv(b, x, &format!("{p}.l0"), 2));
        let h = lrelu(norm(conv(b, h, &format!("{p}.l1"), 2)));
        let h = lrelu(norm(conv(b, h, &format!("{p}.l2"), 1)));
        out.push(conv(b, h, &format!("{p}.l3"), 1));
    }
    Ok(out)
}

/// Encoder input tensors for an image: foreground-masked RGB and one-hot parsing.
pub fn encoder_inputs<T: Real>(img: &Image, parsing: &ParsingMap) -> Result<(Array<T>, Array<T>)> {
    if (img.height(), img.width()) != (parsing.height(), parsing.width()) {
        return Err(Error::Dimension(format!(
            "image {}x{} vs parsing {}x{}",
            img.height(),
            img.width(),
            parsing.height(),
            parsing.width()
        )));
    }
    let fg = parsing.foreground();
    Ok((img.masked(&fg).to_array(), parsing.one_hot()))
}

/// Correspondence features `(1, C, H/d, W/d)` of an image.
pub fn sc_encode<T: Real>(params: &ParamSet<T>, img: &Image, parsing: &ParsingMap) -> Result<Array<T>> {
    let (x, oh) = encoder_inputs::<T>(img, parsing)?;
    let tape = Tape::new();
    let b = Bound::frozen(&tape, params);
    let f = sc_encode_var(&b, tape.constant(x), tape.constant(oh))?;
    Ok((*f.value()).clone())
}

pub fn render<T: Real>(params: &ParamSet<T>, bg: &Array<T>, hf: &Array<T>, cond: &Array<T>) -> Result<Array<T>> {
    let tape = Tape::new();
    let b = Bound::frozen(&tape, params);
    let out = render_var(&b, tape.constant(bg.clone()), tape.constant(hf.clone()), tape.constant(cond.clone()))?;
    Ok((*out.value()).clone())
}

pub fn discriminate<T: Real>(params: &ParamSet<T>, img: &Array<T>) -> Result<Vec<Array<T>>> {
    let tape = Tape::new();
    let b = Bound::frozen(&tape, params);
    Ok(discriminate_var(&b, tape.constant(img.clone()))?
        .into_iter()
        .map(|v| (*v.value()).clone())
        .collect())
}
