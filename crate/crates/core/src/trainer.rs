//! Clone-based training: one shared encoder evaluated on `Q` equivalent
//! observations per batch row, optionally followed by a shared decoder.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::{
    objective_node, sample_laplace, DecoderTerms, KernelConfig, LaplacePrior, ObjectiveBreakdown, ObjectiveSpec,
    ObjectiveWeights, SimilarityVariant,
};
use crate::nn::{encode, standard_normal, Activation, DecoderParams, EncoderParams, LayerSpec, Mlp, NetworkRecord};
use crate::optim::{AdamState, NoiseSchedule};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::toydata::{sample_batch, CloneBatch, FormantWorld, SampleOptions, TargetMode, WorldConfig};

/// Full training configuration. Optional fields are resolved by [`TrainConfig::expand`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub world: WorldConfig,
    pub clones: usize,
    pub batch: usize,
    pub steps: u64,
    /// Defaults to the world's observation dimension.
    pub input_dim: Option<usize>,
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub feature_dim: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: ObjectiveWeights,
    pub kernel: KernelConfig,
    pub schedule: NoiseSchedule,
    pub prior_scale: f64,
    pub similarity: SimilarityVariant,
    pub use_decoder: bool,
    /// Clones whose features enter the MMD term; defaults to all.
    pub mmd_clone_count: Option<usize>,
    /// Clones decoded for the reconstruction term; defaults to all.
    pub decoder_clone_count: Option<usize>,
    pub target: TargetMode,
    pub seed: u64,
    pub metrics_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            clones: 32,
            batch: 144,
            steps: 1_000_000,
            input_dim: None,
            hidden: vec![128, 128],
            hidden_activation: Activation::Relu,
            feature_dim: 2,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weights: ObjectiveWeights::default(),
            kernel: KernelConfig::default(),
            schedule: NoiseSchedule::default(),
            prior_scale: LaplacePrior::default().scale_b,
            similarity: SimilarityVariant::default(),
            use_decoder: false,
            mmd_clone_count: None,
            decoder_clone_count: None,
            target: TargetMode::default(),
            seed: 0,
            metrics_every: 100,
            checkpoint_every: 5000,
        }
    }
}

impl TrainConfig {
    /// Fills every derived field so the serialized form is self-contained.
    pub fn expand(mut self) -> Result<Self> {
        self.input_dim.get_or_insert(self.world.dim);
        self.mmd_clone_count.get_or_insert(self.clones);
        self.decoder_clone_count.get_or_insert(self.clones);
        self.kernel.expand(self.feature_dim);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let positive = [
            ("clones", self.clones),
            ("batch", self.batch),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be ≥ 1")));
            }
        }
        if self.batch < 2 {
            return Err(Error::invalid("batch must be ≥ 2 for the MMD estimator"));
        }
        if self.metrics_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::invalid("metrics_every and checkpoint_every must be ≥ 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be ≥ 1"));
        }
        if let Some(d) = self.input_dim {
            if d != self.world.dim {
                return Err(Error::invalid(format!(
                    "input_dim {d} does not match world dim {}",
                    self.world.dim
                )));
            }
        }
        for (name, count) in [
            ("mmd_clone_count", self.mmd_clone_count),
            ("decoder_clone_count", self.decoder_clone_count),
        ] {
            if let Some(n) = count {
                if n == 0 || n > self.clones {
                    return Err(Error::invalid(format!(
                        "{name} must be in 1..={}, got {n}",
                        self.clones
                    )));
                }
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        self.weights.validate()?;
        self.kernel.validate()?;
        self.schedule.validate()?;
        LaplacePrior::new(self.prior_scale)?;
        Ok(())
    }

    /// `λ_d` as used by the objective: zero without a decoder.
    pub fn effective_weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            lambda_d: if self.use_decoder { self.weights.lambda_d } else { 0.0 },
            ..self.weights
        }
    }

    pub fn encoder_spec(&self) -> LayerSpec {
        LayerSpec::mlp(self.world.dim, &self.hidden, self.feature_dim, self.hidden_activation)
    }

    fn sample_options(&self) -> SampleOptions {
        SampleOptions {
            target: self.target,
            share_excitation: false,
        }
    }

    /// Equal apart from the step budget.
    fn resumable_from(&self, other: &TrainConfig) -> bool {
        let mut a = self.clone();
        a.steps = other.steps;
        &a == other
    }
}

/// Parameters, optimizer moments, step counter and random streams.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub encoder: EncoderParams,
    pub decoder: Option<DecoderParams>,
    /// Moments for encoder parameters followed by decoder parameters.
    pub adam: AdamState,
    pub step: u64,
    pub data_rng: Rng,
    pub noise_rng: Rng,
    pub prior_rng: Rng,
}

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const PRIOR_STREAM: u64 = 3;

impl TrainState {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = Rng::stream(config.seed, INIT_STREAM);
        let encoder = EncoderParams::init(&config.encoder_spec(), &mut init_rng)?;
        let decoder = if config.use_decoder {
            Some(DecoderParams::init_mirrored(&encoder, &mut init_rng)?)
        } else {
            None
        };
        let mut state = Self {
            encoder,
            decoder,
            adam: AdamState::new(&[], config.lr, config.beta1, config.beta2, config.eps),
            step: 0,
            data_rng: Rng::stream(config.seed, DATA_STREAM),
            noise_rng: Rng::stream(config.seed, NOISE_STREAM),
            prior_rng: Rng::stream(config.seed, PRIOR_STREAM),
        };
        state.adam = AdamState::new(&state.params(), config.lr, config.beta1, config.beta2, config.eps);
        Ok(state)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.net.params();
        if let Some(d) = &self.decoder {
            p.extend(d.net.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.net.params_mut();
        if let Some(d) = &mut self.decoder {
            p.extend(d.net.params_mut());
        }
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.encoder.net.param_names("encoder");
        if let Some(d) = &self.decoder {
            n.extend(d.net.param_names("decoder"));
        }
        n
    }
}

/// Random draws consumed by one training step.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub batch: CloneBatch,
    /// `σ_ε · ε` for the stacked clone features, absent when `σ_ε = 0`.
    pub noise: Option<Tensor>,
    /// Prior samples `[batch × feature_dim]`.
    pub prior: Tensor,
}

impl StepInputs {
    pub fn draw(state: &mut TrainState, world: &FormantWorld, config: &TrainConfig, sigma: f64) -> Result<Self> {
        let batch = sample_batch(
            world,
            config.clones,
            config.batch,
            &mut state.data_rng,
            config.sample_options(),
        )?;
        let noise = (sigma > 0.0).then(|| {
            standard_normal(
                &[config.clones * config.batch, config.feature_dim],
                &mut state.noise_rng,
            )
            .map(|e| sigma * e)
        });
        let prior = sample_laplace(
            &LaplacePrior::new(config.prior_scale)?,
            &[config.batch, config.feature_dim],
            &mut state.prior_rng,
        )?;
        Ok(Self { batch, noise, prior })
    }
}

/// One logged training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub d_s: f64,
    pub d_f: f64,
    pub d_d: f64,
    pub total: f64,
    pub sigma_eps: f64,
    pub wall_ms: f64,
}

/// Objective value and gradients (in [`TrainState::params`] order) for fixed draws.
pub fn objective_gradients(
    encoder: &EncoderParams,
    decoder: Option<&DecoderParams>,
    inputs: &StepInputs,
    config: &TrainConfig,
) -> Result<(ObjectiveBreakdown, Vec<Tensor>)> {
    let (q, b) = (config.clones, config.batch);
    if inputs.batch.clones() != q || inputs.batch.batch() != b {
        return Err(Error::invalid(format!(
            "batch holds {}×{} observations, config expects {q}×{b}",
            inputs.batch.clones(),
            inputs.batch.batch()
        )));
    }
    if inputs.batch.dim() != encoder.input_dim() {
        return Err(Error::Shape {
            op: "train_step",
            lhs: inputs.batch.x.shape().to_vec(),
            rhs: vec![encoder.input_dim()],
        });
    }
    let mut g = Graph::new();
    let enc = encoder.net.bind(&mut g);
    let dec = decoder.map(|d| d.net.bind(&mut g));

    let x = g.constant(inputs.batch.stacked());
    let mut z = enc.forward(&mut g, x)?;
    if let Some(noise) = &inputs.noise {
        let n = g.constant(noise.clone());
        z = g.add(z, n)?;
    }
    let clones: Vec<NodeId> = (0..q)
        .map(|c| g.slice_rows(z, c * b, (c + 1) * b))
        .collect::<Result<_>>()?;
    let prior = g.constant(inputs.prior.clone());

    let kernel = config.kernel.kernel_for(g.value(clones[0]), &inputs.prior)?;
    let weights = config.effective_weights();
    let spec = ObjectiveSpec {
        weights,
        kernel: &kernel,
        mmd_clone_count: config.mmd_clone_count.unwrap_or(q),
        similarity: config.similarity,
    };

    let outputs: Vec<NodeId>;
    let terms = match &dec {
        Some(dec) if weights.lambda_d > 0.0 => {
            let n = config.decoder_clone_count.unwrap_or(q);
            let head = g.slice_rows(z, 0, n * b)?;
            let y_hat = dec.forward(&mut g, head)?;
            outputs = (0..n)
                .map(|c| g.slice_rows(y_hat, c * b, (c + 1) * b))
                .collect::<Result<_>>()?;
            let target = g.constant(inputs.batch.target.clone());
            Some(DecoderTerms {
                outputs: &outputs,
                target,
            })
        }
        _ => None,
    };
    let nodes = objective_node(&mut g, &clones, prior, terms, &spec)?;
    let breakdown = nodes.breakdown(&g);
    let grads = g.backward(nodes.total)?;

    let mut ids = enc.param_ids();
    if let Some(dec) = &dec {
        ids.extend(dec.param_ids());
    }
    let grads = ids.iter().map(|&id| grads.get_or_zeros(id, g.value(id))).collect();
    Ok((breakdown, grads))
}

/// Samples a batch, evaluates the objective and applies one Adam update.
pub fn train_step(state: &mut TrainState, world: &FormantWorld, config: &TrainConfig) -> Result<StepMetrics> {
    if world.dim() != state.encoder.input_dim() {
        return Err(Error::invalid(format!(
            "world dim {} does not match encoder input {}",
            world.dim(),
            state.encoder.input_dim()
        )));
    }
    let sigma = config.schedule.sigma_at(state.step);
    let inputs = StepInputs::draw(state, world, config, sigma)?;
    let (loss, grads) = objective_gradients(&state.encoder, state.decoder.as_ref(), &inputs, config)?;
    for (name, v) in [
        ("d_s", loss.d_s),
        ("d_f", loss.d_f),
        ("d_d", loss.d_d),
        ("total", loss.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective term {name} at step {}",
                state.step
            )));
        }
    }
    let names = state.param_names();
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    let mut adam = std::mem::replace(&mut state.adam, AdamState::new(&[], 0.0, 0.0, 0.0, 0.0));
    let result = adam.step(&mut state.params_mut(), &grad_refs, &names);
    state.adam = adam;
    result?;

    let metrics = StepMetrics {
        step: state.step,
        d_s: loss.d_s,
        d_f: loss.d_f,
        d_d: loss.d_d,
        total: loss.total,
        sigma_eps: sigma,
        wall_ms: 0.0,
    };
    state.step += 1;
    Ok(metrics)
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub encoder: NetworkRecord,
    pub decoder: Option<NetworkRecord>,
    pub adam: AdamState,
    pub data_rng: Rng,
    pub noise_rng: Rng,
    pub prior_rng: Rng,
}

impl Checkpoint {
    pub fn capture(state: &TrainState, config: &TrainConfig) -> Self {
        Self {
            config: config.clone(),
            step: state.step,
            encoder: NetworkRecord::from(&state.encoder.net),
            decoder: state.decoder.as_ref().map(|d| NetworkRecord::from(&d.net)),
            adam: state.adam.clone(),
            data_rng: state.data_rng.clone(),
            noise_rng: state.noise_rng.clone(),
            prior_rng: state.prior_rng.clone(),
        }
    }

    pub fn encoder(&self) -> Result<EncoderParams> {
        EncoderParams::new(Mlp::try_from(&self.encoder)?)
    }

    pub fn restore(&self) -> Result<TrainState> {
        let encoder = self.encoder()?;
        let decoder = self
            .decoder
            .as_ref()
            .map(|rec| DecoderParams::for_encoder(Mlp::try_from(rec)?, &encoder))
            .transpose()?;
        if decoder.is_some() != self.config.use_decoder {
            return Err(Error::format("checkpoint", "decoder presence disagrees with config"));
        }
        let state = TrainState {
            encoder,
            decoder,
            adam: self.adam.clone(),
            step: self.step,
            data_rng: self.data_rng.clone(),
            noise_rng: self.noise_rng.clone(),
            prior_rng: self.prior_rng.clone(),
        };
        let shapes_match = state.adam.m.len() == state.params().len()
            && state
                .adam
                .m
                .iter()
                .zip(state.params())
                .all(|(m, p)| m.shape() == p.shape())
            && state
                .adam
                .v
                .iter()
                .zip(&state.adam.m)
                .all(|(v, m)| v.shape() == m.shape());
        if !shapes_match || state.adam.v.len() != state.adam.m.len() {
            return Err(Error::format("checkpoint", "optimizer moments do not match parameters"));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format("checkpoint", e.to_string()))
    }
}

/// Deterministic features `z = f(x)` of a trained encoder (no feature noise).
pub fn infer(checkpoint: &Checkpoint, x: &Tensor) -> Result<Tensor> {
    encode(&checkpoint.encoder()?, x)
}

/// Files written by [`run`].
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub config_path: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub final_step: u64,
}

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step-{step:08}.json"))
}

/// [`run_with`] without a per-step observer.
pub fn run(config: &TrainConfig, dir: &Path, resume: Option<&Path>) -> Result<RunOutput> {
    run_with(config, dir, resume, |_| {})
}

/// Trains up to `config.steps` total steps inside `dir`.
///
/// Writes the expanded config, one JSONL metrics row for every step that is
/// a multiple of `metrics_every`, periodic checkpoints under `checkpoints/`
/// and the final checkpoint as `checkpoint.json`. `observe` sees every step.
pub fn run_with(
    config: &TrainConfig,
    dir: &Path,
    resume: Option<&Path>,
    mut observe: impl FnMut(&StepMetrics),
) -> Result<RunOutput> {
    let config = config.clone().expand()?;
    let world = FormantWorld::new(config.world.clone())?;
    let mut state = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if !ckpt.config.resumable_from(&config) {
                return Err(Error::invalid(format!(
                    "checkpoint {} was written with a different configuration",
                    path.display()
                )));
            }
            ckpt.restore()?
        }
        None => TrainState::init(&config)?,
    };
    if state.encoder.input_dim() != world.dim() {
        return Err(Error::invalid(format!(
            "checkpoint encoder expects {} inputs, world produces {}",
            state.encoder.input_dim(),
            world.dim()
        )));
    }

    fs::create_dir_all(dir.join("checkpoints"))?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, serde_json::to_string_pretty(&config)?)?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(resume.is_some())
            .truncate(resume.is_none())
            .open(&metrics_path)?,
    );

    let start = Instant::now();
    while state.step < config.steps {
        let mut m = train_step(&mut state, &world, &config)?;
        m.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        observe(&m);
        if m.step % config.metrics_every == 0 {
            serde_json::to_writer(&mut metrics, &m)?;
            metrics.write_all(b"\n")?;
        }
        if state.step % config.checkpoint_every == 0 && state.step < config.steps {
            metrics.flush()?;
            Checkpoint::capture(&state, &config).save(&checkpoint_path(dir, state.step))?;
        }
    }
    metrics.flush()?;
    let checkpoint = Checkpoint::capture(&state, &config);
    checkpoint.save(&checkpoint_path(dir, state.step))?;
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    checkpoint.save(&checkpoint_path)?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        config_path,
        metrics_path,
        checkpoint_path,
        final_step: state.step,
    })
}
