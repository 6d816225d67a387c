//! Training loop: unpaired sampling, alternating discriminator/generator
//! updates with Adam, JSON-lines metrics and resumable checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::correspondence::{validate_tau, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::facedata::{validate_size, Dataset, FaceSample};
use crate::losses::{loss_adv_d, total_generator_loss, LossParts, LossWeights, DEFAULT_N_NEG};
use crate::networks::{discriminate_var, ArchConfig, Bound, Net, ParamSet};
use crate::perceptual::{FeatureExtractor, DEFAULT_EXTRACTOR_SEED};
use crate::pipeline::{ensure_finite, forward_transfer_vars, generator_losses, AugInputs};
use crate::tensor::Array;
use crate::transforms::SpatialTransform;

pub const METRICS_FILE: &str = "metrics.jsonl";
const ITERATION_KEY: &str = "iteration";
const TRAIN_CONFIG_KEY: &str = "train_config";
const STEP_STREAM_SALT: u64 = 0x7472_6169_6e5f_7374;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "default_n")]
        n_makeup: usize,
        #[serde(default = "default_n")]
        n_non_makeup: usize,
        #[serde(default)]
        seed: u64,
    },
    Directory {
        root: PathBuf,
    },
}

fn default_n() -> usize {
    200
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            n_makeup: default_n(),
            n_non_makeup: default_n(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn load(&self, size: usize) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic {
                n_makeup,
                n_non_makeup,
                seed,
            } => {
                if *n_makeup == 0 || *n_non_makeup == 0 {
                    return Err(Error::Config("synthetic dataset needs samples in both domains".into()));
                }
                Dataset::synthetic(*seed, *n_makeup, *n_non_makeup, size)
            }
            DatasetSpec::Directory { root } => {
                let ds = Dataset::load(root, Some(size))?;
                if ds.skipped > 0 {
                    log::warn!("{} unreadable files skipped under {}", ds.skipped, root.display());
                }
                Ok(ds)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExtractorSpec {
    Random { seed: u64 },
    File { path: PathBuf },
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::Random {
            seed: DEFAULT_EXTRACTOR_SEED,
        }
    }
}

impl ExtractorSpec {
    pub fn load(&self) -> Result<FeatureExtractor<f32>> {
        match self {
            ExtractorSpec::Random { seed } => Ok(FeatureExtractor::random(*seed)),
            ExtractorSpec::File { path } => FeatureExtractor::load(path),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            lr: 2e-4,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.lr > 0.0
            && self.lr.is_finite()
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Everything a training run depends on. `d` and `seed` override the
/// corresponding fields of `arch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub size: usize,
    pub d: usize,
    pub tau: f64,
    pub weights: LossWeights,
    pub n_neg: usize,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    pub dataset: DatasetSpec,
    pub extractor: ExtractorSpec,
    pub arch: ArchConfig,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            size: 64,
            d: 2,
            tau: DEFAULT_TAU,
            weights: LossWeights::default(),
            n_neg: DEFAULT_N_NEG,
            optimizer: AdamConfig::default(),
            batch_size: 1,
            max_iterations: 2000,
            seed: 0,
            checkpoint_interval: 500,
            log_interval: 50,
            dataset: DatasetSpec::default(),
            extractor: ExtractorSpec::default(),
            arch: ArchConfig::default(),
            out_dir: PathBuf::from("runs/desk"),
        }
    }
}

impl TrainConfig {
    /// Reads JSON (`.json`) or TOML (anything else).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            d: self.d,
            seed: self.seed,
            ..self.arch.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_size(self.size)?;
        validate_tau(self.tau)?;
        self.weights.validate()?;
        self.optimizer.validate()?;
        let arch = self.arch();
        arch.validate()?;
        if self.size % arch.size_multiple() != 0 {
            return Err(Error::Config(format!(
                "size {} is not a multiple of {} required by the networks",
                self.size,
                arch.size_multiple()
            )));
        }
        if self.batch_size != 1 {
            return Err(Error::Config("only batch_size = 1 is supported".into()));
        }
        if self.n_neg == 0 {
            return Err(Error::Config("n_neg must be at least 1".into()));
        }
        if self.checkpoint_interval == 0 || self.log_interval == 0 {
            return Err(Error::Config("checkpoint and log intervals must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with per-parameter first and second moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub m: BTreeMap<String, Array<f32>>,
    pub v: BTreeMap<String, Array<f32>>,
}

impl Adam {
    /// One update of `param` at 1-based step `t`.
    pub fn step(&mut self, cfg: &AdamConfig, path: &str, param: &mut Array<f32>, grad: &Array<f32>, t: u64) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape for {path}");
        let m = self.m.entry(path.to_string()).or_insert_with(|| Array::zeros(param.shape()));
        let v = self.v.entry(path.to_string()).or_insert_with(|| Array::zeros(param.shape()));
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let it = param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((p, &g), (mi, vi)) in it {
            let g = g as f64;
            let mn = b1 * *mi as f64 + (1.0 - b1) * g;
            let vn = b2 * *vi as f64 + (1.0 - b2) * g * g;
            *mi = mn as f32;
            *vi = vn as f32;
            let mhat = mn / c1;
            let vhat = vn / c2;
            *p = (*p as f64 - cfg.lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
        }
    }
}

/// Parameters, optimizer moments and completed iteration count.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamSet<f32>,
    pub adam: Adam,
    pub iteration: u64,
}

impl TrainState {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        Ok(Self {
            params: ParamSet::init(arch)?,
            adam: Adam::default(),
            iteration: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.clone());
        for (k, a) in &self.adam.m {
            ck.extra.insert(format!("adam.m/{k}"), a.clone());
        }
        for (k, a) in &self.adam.v {
            ck.extra.insert(format!("adam.v/{k}"), a.clone());
        }
        ck.metadata.insert(ITERATION_KEY.into(), self.iteration.to_string());
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let iteration = ck
            .metadata
            .get(ITERATION_KEY)
            .map(|s| s.parse::<u64>())
            .transpose()
            .map_err(|_| Error::Checkpoint("iteration is not an integer".into()))?
            .unwrap_or(0);
        let mut adam = Adam::default();
        for (k, a) in ck.extra {
            if let Some(p) = k.strip_prefix("adam.m/") {
                adam.m.insert(p.to_string(), a);
            } else if let Some(p) = k.strip_prefix("adam.v/") {
                adam.v.insert(p.to_string(), a);
            }
        }
        for (k, a) in adam.m.iter().chain(&adam.v) {
            let p = ck.params.get(k).map_err(|_| Error::Checkpoint(format!("optimizer state for unknown parameter {k}")))?;
            if p.shape() != a.shape() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {k}")));
            }
        }
        Ok(Self {
            params: ck.params,
            adam,
            iteration,
        })
    }
}

/// Per-iteration log record. Loss terms are the undecorated values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iteration: u64,
    pub makeup: f64,
    pub content: f64,
    pub cycle: f64,
    pub adv_g: f64,
    pub aug: f64,
    pub cts: f64,
    pub total: f64,
    pub d_loss: f64,
    pub wall_time: f64,
}

impl Metrics {
    /// Equality on every field except wall time.
    pub fn same_values(&self, o: &Metrics) -> bool {
        Metrics {
            wall_time: 0.0,
            ..self.clone()
        } == Metrics {
            wall_time: 0.0,
            ..o.clone()
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<Metrics>> {
    let f = fs::File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// The three faces of one iteration.
pub struct Batch<'a> {
    pub x: &'a FaceSample,
    pub y: &'a FaceSample,
    pub aug: &'a FaceSample,
}

/// Generator for iteration `iteration` (0-based) of a run seeded with `seed`.
pub fn step_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ STEP_STREAM_SALT);
    rng.set_stream(iteration);
    rng
}

/// `x` from the non-makeup set and `y` from the makeup set; the
/// augmentation face is `y`.
pub fn sample_batch<'a>(ds: &'a Dataset, rng: &mut impl Rng) -> Batch<'a> {
    let x = &ds.non_makeup[rng.random_range(0..ds.non_makeup.len())];
    let y = &ds.makeup[rng.random_range(0..ds.makeup.len())];
    Batch { x, y, aug: y }
}

/// Settings `train_step` needs from the run config.
pub struct StepSettings<'a> {
    pub tau: f64,
    pub weights: &'a LossWeights,
    pub n_neg: usize,
    pub optimizer: &'a AdamConfig,
    pub extractor: &'a FeatureExtractor<f32>,
}

impl<'a> StepSettings<'a> {
    pub fn from_config(cfg: &'a TrainConfig, extractor: &'a FeatureExtractor<f32>) -> Self {
        Self {
            tau: cfg.tau,
            weights: &cfg.weights,
            n_neg: cfg.n_neg,
            optimizer: &cfg.optimizer,
            extractor,
        }
    }
}

fn check_grads(grads: &BTreeMap<String, Array<f32>>, stage: &str) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.all_finite()) {
        Some((k, _)) => Err(Error::non_finite(stage, format!("gradient of {k}"))),
        None => Ok(()),
    }
}

/// One discriminator update on `y` vs detached `x̂`, then one generator
/// update scored by the updated discriminator. The state is left untouched
/// on error.
pub fn train_step(state: &mut TrainState, batch: &Batch<'_>, s: &StepSettings<'_>, rng: &mut impl Rng) -> Result<Metrics> {
    let t = state.iteration + 1;
    let aug_transform = SpatialTransform::sample(rng);
    let tape = Tape::new();
    let g = Bound::new(&tape, &state.params, &[Net::Encoder, Net::Renderer]);
    let v = forward_transfer_vars(&g, (&batch.x.image, &batch.x.parsing), (&batch.y.image, &batch.y.parsing), s.tau)?;

    // discriminator
    let mut d_new: BTreeMap<String, Array<f32>> = BTreeMap::new();
    let mut d_adam = Adam::default();
    let d_loss = {
        let dt = Tape::new();
        let db = Bound::new(&dt, &state.params, &[Net::Discriminator]);
        let real = discriminate_var(&db, dt.constant(batch.y.image.to_array()))?;
        let fake = discriminate_var(&db, dt.constant((*v.transfer.xhat.value()).clone()))?;
        let loss = ensure_finite(loss_adv_d(&real, &fake)?, "loss term adv_d")?;
        let grads = db.gradients(&dt.backward(loss));
        check_grads(&grads, "discriminator step")?;
        for (k, grad) in &grads {
            let mut p = state.params.get(k)?.clone();
            if let Some(m) = state.adam.m.get(k) {
                d_adam.m.insert(k.clone(), m.clone());
                d_adam.v.insert(k.clone(), state.adam.v[k].clone());
            }
            d_adam.step(s.optimizer, k, &mut p, grad, t);
            d_new.insert(k.clone(), p);
        }
        loss.item() as f64
    };

    // generator against the updated discriminator
    let d_view = ParamSet {
        config: state.params.config.clone(),
        tensors: d_new,
    };
    let disc = Bound::frozen(&tape, &d_view);
    let aug = AugInputs {
        face: (&batch.aug.image, &batch.aug.parsing),
        transform: aug_transform,
    };
    let parts = generator_losses(
        &g,
        &disc,
        &v,
        &aug,
        (&batch.y.image, &batch.y.parsing),
        s.tau,
        s.n_neg,
        s.extractor,
        rng,
    )?;
    let total = total_generator_loss(&parts, s.weights)?;
    let values: LossParts<f64> = parts.map(|p| p.item() as f64);
    let total_value = values.total(s.weights)?;
    let grads = g.gradients(&tape.backward(total));
    if let Err(e) = check_grads(&grads, "generator step") {
        // attribute to the first term whose own gradient is non-finite
        for (name, p) in parts.named() {
            if !g.gradients(&tape.backward(p)).values().all(|a| a.all_finite()) {
                return Err(Error::non_finite(format!("gradient of loss term {name}"), e.to_string()));
            }
        }
        return Err(e);
    }
    drop(g);
    drop(disc);

    let ParamSet { tensors: d_new, .. } = d_view;
    for (k, p) in d_new {
        *state.params.get_mut(&k)? = p;
    }
    state.adam.m.extend(d_adam.m);
    state.adam.v.extend(d_adam.v);
    for (k, grad) in &grads {
        let p = state.params.get_mut(k)?;
        state.adam.step(s.optimizer, k, p, grad, t);
    }
    state.iteration = t;
    Ok(Metrics {
        iteration: t,
        makeup: values.makeup,
        content: values.content,
        cycle: values.cycle,
        adv_g: values.adv_g,
        aug: values.aug,
        cts: values.cts,
        total: total_value,
        d_loss,
        wall_time: 0.0,
    })
}

pub fn checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{iteration:06}.safetensors"))
}

fn save_state(state: &TrainState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut ck = state.to_checkpoint();
    ck.metadata.insert(TRAIN_CONFIG_KEY.into(), serde_json::to_string(cfg)?);
    ck.save(path)
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub metrics: Vec<Metrics>,
    pub state: TrainState,
}

fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let probe = dir.join(".write_probe");
    fs::write(&probe, b"probe").map_err(|e| Error::io(format!("{} is not writable", dir.display()), e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(format!("cleaning {}", probe.display()), e))
}

/// Runs `cfg.max_iterations` iterations, starting fresh or from `resume`.
pub fn train(cfg: &TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure_writable(&cfg.out_dir)?;
    let extractor = cfg.extractor.load()?;
    let ds = cfg.dataset.load(cfg.size)?;
    info!(
        "training on {} non-makeup and {} makeup faces at {}x{}",
        ds.non_makeup.len(),
        ds.makeup.len(),
        cfg.size,
        cfg.size
    );
    let arch = cfg.arch();
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    let (mut state, mut metrics) = match resume {
        Some(p) => {
            let state = TrainState::from_checkpoint(Checkpoint::load(p)?)?;
            if state.params.config != arch {
                return Err(Error::Config(format!("{} was trained with a different architecture", p.display())));
            }
            let kept: Vec<Metrics> = if metrics_path.exists() {
                read_metrics(&metrics_path)?
                    .into_iter()
                    .filter(|m| m.iteration <= state.iteration)
                    .collect()
            } else {
                Vec::new()
            };
            (state, kept)
        }
        None => {
            let state = TrainState::new(&arch)?;
            save_state(&state, cfg, &checkpoint_path(&cfg.out_dir, 0))?;
            (state, Vec::new())
        }
    };
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(format!("creating {}", metrics_path.display()), e))?;
    let mut writer = BufWriter::new(file);
    let io_err = |e| Error::io(format!("writing {}", metrics_path.display()), e);
    for m in &metrics {
        writeln!(writer, "{}", serde_json::to_string(m)?).map_err(io_err)?;
    }
    writer.flush().map_err(io_err)?;

    let settings = StepSettings::from_config(cfg, &extractor);
    let start = Instant::now();
    let mut last_ckpt = checkpoint_path(&cfg.out_dir, state.iteration);
    while state.iteration < cfg.max_iterations {
        let mut rng = step_rng(cfg.seed, state.iteration);
        let batch = sample_batch(&ds, &mut rng);
        let mut m = match train_step(&mut state, &batch, &settings, &mut rng) {
            Ok(m) => m,
            Err(e) => {
                let p = cfg.out_dir.join(format!("ckpt_failed_{:06}.safetensors", state.iteration));
                save_state(&state, cfg, &p)?;
                log::error!("step {} failed; state saved to {}", state.iteration + 1, p.display());
                return Err(e);
            }
        };
        m.wall_time = start.elapsed().as_secs_f64();
        writeln!(writer, "{}", serde_json::to_string(&m)?).map_err(io_err)?;
        writer.flush().map_err(io_err)?;
        if state.iteration % cfg.log_interval == 0 {
            info!(
                "iter {} total {:.4} cycle {:.4} aug {:.4} adv_g {:.4} d {:.4} ({:.1}s)",
                m.iteration, m.total, m.cycle, m.aug, m.adv_g, m.d_loss, m.wall_time
            );
        }
        metrics.push(m);
        if state.iteration % cfg.checkpoint_interval == 0 || state.iteration == cfg.max_iterations {
            last_ckpt = checkpoint_path(&cfg.out_dir, state.iteration);
            save_state(&state, cfg, &last_ckpt)?;
        }
    }
    if !last_ckpt.exists() {
        save_state(&state, cfg, &last_ckpt)?;
    }
    Ok(TrainOutcome {
        final_checkpoint: last_ckpt,
        metrics_path,
        metrics,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facedata::{synth_sample, Domain};

    fn toy_config(dir: &Path, iters: u64) -> TrainConfig {
        TrainConfig {
            size: 32,
            arch: ArchConfig::toy(2),
            max_iterations: iters,
            checkpoint_interval: 2,
            log_interval: 1,
            dataset: DatasetSpec::Synthetic {
                n_makeup: 3,
                n_non_makeup: 3,
                seed: 1,
            },
            out_dir: dir.to_path_buf(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn published_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.optimizer.beta1, c.optimizer.beta2, c.optimizer.lr), (0.5, 0.999, 2e-4));
        assert_eq!((c.batch_size, c.size, c.d, c.tau, c.n_neg), (1, 64, 2, 100.0, 4));
        c.validate().unwrap();
    }

    #[test]
    fn adam_matches_hand_formula() {
        let cfg = AdamConfig::default();
        let mut adam = Adam::default();
        let mut p = Array::from_vec(&[1], vec![0.3f32]).unwrap();
        let (g1, g2) = (0.7f64, -0.2f64);
        adam.step(&cfg, "w", &mut p, &Array::from_vec(&[1], vec![g1 as f32]).unwrap(), 1);
        // t = 1: m̂ = g, v̂ = g², step = lr·g/(|g| + eps)
        let want1 = 0.3f32 as f64 - 2e-4 * g1 / (g1.abs() + 1e-8);
        assert!((p.data()[0] as f64 - want1).abs() < 1e-7);
        adam.step(&cfg, "w", &mut p, &Array::from_vec(&[1], vec![g2 as f32]).unwrap(), 2);
        let m = 0.5 * 0.5 * g1 + 0.5 * g2;
        let v = 0.999 * 0.001 * g1 * g1 + 0.001 * g2 * g2;
        let want2 = want1 - 2e-4 * (m / (1.0 - 0.25)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((p.data()[0] as f64 - want2).abs() < 1e-7, "{} vs {want2}", p.data()[0]);
    }

    #[test]
    fn config_files_parse() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        fs::write(&t, "max_iterations = 5\nseed = 3\n[dataset]\nkind = \"synthetic\"\nn_makeup = 7\n").unwrap();
        let c = TrainConfig::from_file(&t).unwrap();
        assert_eq!((c.max_iterations, c.seed), (5, 3));
        assert_eq!(
            c.dataset,
            DatasetSpec::Synthetic {
                n_makeup: 7,
                n_non_makeup: 200,
                seed: 0
            }
        );
        let j = dir.path().join("c.json");
        fs::write(&j, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(TrainConfig::from_file(&j).unwrap(), c);
        fs::write(&j, r#"{"learning_rate": 1}"#).unwrap();
        assert!(TrainConfig::from_file(&j).is_err());
        fs::write(&j, r#"{"tau": -1}"#).unwrap();
        assert!(matches!(TrainConfig::from_file(&j), Err(Error::Config(_))));
    }

    fn step_inputs() -> (Dataset, FeatureExtractor<f32>) {
        let ds = Dataset {
            non_makeup: vec![synth_sample(0, Domain::NonMakeup, 0, 32).unwrap()],
            makeup: vec![synth_sample(0, Domain::Makeup, 0, 32).unwrap()],
            skipped: 0,
        };
        (ds, FeatureExtractor::random(1))
    }

    #[test]
    fn zero_weights_leave_generator_unchanged() {
        let (ds, fe) = step_inputs();
        let mut state = TrainState::new(&ArchConfig::toy(2)).unwrap();
        let before = state.params.clone();
        let w = LossWeights::zero();
        let opt = AdamConfig::default();
        let s = StepSettings {
            tau: 100.0,
            weights: &w,
            n_neg: 2,
            optimizer: &opt,
            extractor: &fe,
        };
        let mut rng = step_rng(0, 0);
        let batch = sample_batch(&ds, &mut rng);
        let m = train_step(&mut state, &batch, &s, &mut rng).unwrap();
        assert_eq!(m.total, 0.0);
        for (k, a) in &before.tensors {
            let same = state.params.tensors[k] == *a;
            assert_eq!(same, !k.starts_with("d."), "{k}");
        }
    }

    #[test]
    fn optimizer_state_round_trip() {
        let (ds, fe) = step_inputs();
        let cfg = TrainConfig::default();
        let s = StepSettings::from_config(&cfg, &fe);
        let mut state = TrainState::new(&ArchConfig::toy(2)).unwrap();
        for i in 0..2 {
            let mut rng = step_rng(0, i);
            train_step(&mut state, &sample_batch(&ds, &mut rng), &s, &mut rng).unwrap();
        }
        let back = TrainState::from_checkpoint(Checkpoint::from_bytes(&state.to_checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, state);
        let mut a = state.clone();
        let mut b = back;
        let ma = train_step(&mut a, &sample_batch(&ds, &mut step_rng(0, 2)), &s, &mut step_rng(0, 2));
        let mb = train_step(&mut b, &sample_batch(&ds, &mut step_rng(0, 2)), &s, &mut step_rng(0, 2));
        assert_eq!(ma.unwrap(), mb.unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_iterations_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&toy_config(dir.path(), 0), None).unwrap();
        assert_eq!(out.final_checkpoint, checkpoint_path(dir.path(), 0));
        let ckpts: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "safetensors"))
            .collect();
        assert_eq!(ckpts.len(), 1);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let full = train(&toy_config(d1.path(), 4), None).unwrap();
        assert_eq!(full.metrics.len(), 4);
        assert_eq!(read_metrics(&full.metrics_path).unwrap().len(), 4);

        let half = train(&toy_config(d2.path(), 2), None).unwrap();
        let resumed = train(&toy_config(d2.path(), 4), Some(&half.final_checkpoint)).unwrap();
        assert_eq!(resumed.metrics.len(), 4);
        for (a, b) in full.metrics.iter().zip(&resumed.metrics) {
            assert!(a.same_values(b), "{a:?} vs {b:?}");
        }
        assert_eq!(full.state, resumed.state);
        let load = |d: &Path| TrainState::from_checkpoint(Checkpoint::load(&checkpoint_path(d, 4)).unwrap()).unwrap();
        assert_eq!(load(d1.path()), load(d2.path()));
    }

    #[test]
    fn unwritable_output_fails_before_training() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        fs::write(&file, b"x").unwrap();
        let e = train(&toy_config(&file.join("sub"), 1), None).unwrap_err();
        assert!(matches!(e, Error::Io { .. }), "{e}");
    }

    #[test]
    fn divergence_aborts_with_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_config(dir.path(), 5);
        cfg.optimizer.lr = 1e38;
        match train(&cfg, None) {
            Err(Error::NonFinite { stage, .. }) => assert!(!stage.is_empty()),
            other => panic!("{:?}", other.map(|_| ())),
        }
        let failed: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("ckpt_failed_"))
            .collect();
        assert_eq!(failed.len(), 1);
    }
}
