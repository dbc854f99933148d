//! Training harness shared by pretraining and fine-tuning.
//!
//! A step draws a batch with replacement, a uniform timestep and fresh
//! Gaussian noise per sample, noises the images under the *current* schedule
//! (the progressive controller may change it between steps), and minimises
//! the box-weighted ε loss with AdamW over the selected parameters only.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{param_err, Error, Result};
use crate::model::{patchify, DiT, ParamRole, ParamStore};
use crate::scalar::Scalar;
use crate::scene::{BBox, SceneSample};
use crate::schedule::{LinearBetas, NoiseSchedule, ProgressiveController, DEFAULT_OFFSET};
use crate::ssei::{assign_conditions, SemanticIndex};
use crate::tensor::Tensor;

/// Which parameters a run may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    PretrainFull,
    FinetuneFull,
    FinetuneBiasOnly,
    FinetuneLowrankAdditive,
    FinetuneModulation,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::PretrainFull,
        TrainMode::FinetuneFull,
        TrainMode::FinetuneBiasOnly,
        TrainMode::FinetuneLowrankAdditive,
        TrainMode::FinetuneModulation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::PretrainFull => "pretrain_full",
            TrainMode::FinetuneFull => "finetune_full",
            TrainMode::FinetuneBiasOnly => "finetune_bias_only",
            TrainMode::FinetuneLowrankAdditive => "finetune_lowrank_additive",
            TrainMode::FinetuneModulation => "finetune_modulation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown training mode {s:?}")))
    }

    /// Whether the mode trains adapter factors (and so needs wrapped layers).
    pub fn needs_adapters(self) -> bool {
        matches!(self, TrainMode::FinetuneLowrankAdditive | TrainMode::FinetuneModulation)
    }

    pub fn is_finetune(self) -> bool {
        self != TrainMode::PretrainFull
    }
}

/// Forward process used during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleSpec {
    Linear,
    CosinePower(f64),
    Scos(f64),
    /// Scos with the power annealed 6 → 2 over `tau` steps.
    ProgressiveScos,
}

impl ScheduleSpec {
    /// The schedule the final training steps saw; sampling uses this one.
    pub fn final_schedule(&self, steps: usize, lin: LinearBetas) -> Result<NoiseSchedule> {
        match *self {
            ScheduleSpec::Linear => NoiseSchedule::linear(steps, lin.beta_1, lin.beta_t),
            ScheduleSpec::CosinePower(p) => NoiseSchedule::cosine_power(steps, p, DEFAULT_OFFSET),
            ScheduleSpec::Scos(p) => NoiseSchedule::scos(steps, p, DEFAULT_OFFSET, lin),
            ScheduleSpec::ProgressiveScos => NoiseSchedule::scos(steps, 2.0, DEFAULT_OFFSET, lin),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Annealing span of the progressive controller, in optimizer steps.
    pub tau: usize,
    pub osl_lambda: f64,
    pub schedule: ScheduleSpec,
    /// Linear endpoints; `None` picks [`LinearBetas::scaled_for`] the model horizon.
    pub linear: Option<LinearBetas>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::FinetuneModulation,
            steps: 500,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            seed: 0,
            tau: 500,
            osl_lambda: 1.0,
            schedule: ScheduleSpec::ProgressiveScos,
            linear: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(param_err("steps must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(param_err("batch size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(param_err(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(param_err("weight decay must be >= 0"));
        }
        if !(self.osl_lambda >= 0.0) {
            return Err(param_err(format!("osl lambda must be >= 0, got {}", self.osl_lambda)));
        }
        if self.schedule == ScheduleSpec::ProgressiveScos && self.tau == 0 {
            return Err(param_err("progressive schedule needs tau >= 1"));
        }
        Ok(())
    }

    pub fn linear_betas(&self, horizon: usize) -> LinearBetas {
        self.linear.unwrap_or_else(|| LinearBetas::scaled_for(horizon))
    }
}

/// Per-pixel loss weights: 1 outside every box, `1 + λ` inside any box.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ObjectMask {
    /// Broadcast over `channels` into an `[H × W × C]` tensor.
    pub fn to_tensor<F: Scalar>(&self, channels: usize) -> Tensor<F> {
        let data = self
            .values
            .iter()
            .flat_map(|&v| core::iter::repeat_n(F::of(v), channels))
            .collect();
        Tensor::new(&[self.height, self.width, channels], data).expect("mask extents match")
    }
}

pub fn build_mask(boxes: &[BBox], height: usize, width: usize, lambda: f64) -> Result<ObjectMask> {
    if !(lambda >= 0.0) {
        return Err(param_err(format!("osl lambda must be >= 0, got {lambda}")));
    }
    let mut values = vec![1.0; height * width];
    for b in boxes {
        if !b.fits(width, height) {
            return Err(Error::Input(format!("box {b:?} outside a {width}×{height} image")));
        }
        for y in b.y as usize..(b.y + b.h) as usize {
            for x in b.x as usize..(b.x + b.w) as usize {
                values[y * width + x] = 1.0 + lambda;
            }
        }
    }
    Ok(ObjectMask { height, width, values })
}

/// `mean((mask · (ε − ε̂))²)`.
pub fn osl_loss<F: Scalar>(eps_true: &Tensor<F>, eps_pred: &Tensor<F>, mask: &Tensor<F>) -> Result<F> {
    for other in [eps_pred, mask] {
        if other.shape() != eps_true.shape() {
            return Err(Error::ShapeMismatch {
                op: "osl_loss",
                left: eps_true.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
    }
    let total = eps_true
        .data()
        .iter()
        .zip(eps_pred.data())
        .zip(mask.data())
        .fold(F::zero(), |acc, ((&e, &p), &m)| {
            let r = m * (e - p);
            acc + r * r
        });
    Ok(total / F::of(eps_true.len() as f64))
}

/// Plain `mean((ε − ε̂)²)`.
pub fn simple_loss<F: Scalar>(eps_true: &Tensor<F>, eps_pred: &Tensor<F>) -> Result<F> {
    osl_loss(eps_true, eps_pred, &Tensor::ones(eps_true.shape()))
}

/// Graph form of [`osl_loss`].
pub fn osl_loss_graph<F: Scalar>(g: &mut Graph<F>, pred: Var, target: Var, mask: Var) -> Result<Var> {
    let r = g.sub(target, pred)?;
    let r = g.mul(r, mask)?;
    let r = g.mul(r, r)?;
    g.mean(r)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Moment buffers of one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// One decoupled-decay Adam update of `p` in place.
pub fn adamw_step<F: Scalar>(p: &mut [F], grad: &[F], state: &mut AdamWState, hp: &AdamWConfig) {
    if state.m.is_empty() {
        state.m = vec![0.0; p.len()];
        state.v = vec![0.0; p.len()];
    }
    state.t += 1;
    let bc1 = 1.0 - Float::powi(hp.beta1, state.t as i32);
    let bc2 = 1.0 - Float::powi(hp.beta2, state.t as i32);
    for (i, (w, g)) in p.iter_mut().zip(grad).enumerate() {
        let g = g.as_f64();
        let m = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        let v = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let mut x = w.as_f64();
        x -= hp.lr * hp.weight_decay * x;
        x -= hp.lr * (m / bc1) / (Float::sqrt(v / bc2) + hp.eps);
        *w = F::of(x);
    }
}

/// AdamW over a parameter store; frozen parameters are never touched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    states: Vec<AdamWState>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: usize) -> Self {
        Self {
            config,
            states: vec![AdamWState::default(); params],
        }
    }

    /// `grads[i]` is the gradient of parameter `i`, if any flowed.
    pub fn step<F: Scalar>(&mut self, params: &mut ParamStore<F>, grads: &[Option<Tensor<F>>]) {
        for ((p, g), state) in params.iter_mut().zip(grads).zip(&mut self.states) {
            if !p.trainable {
                continue;
            }
            let zeros;
            let grad = match g {
                Some(g) => g.data(),
                None => {
                    zeros = vec![F::zero(); p.value.len()];
                    &zeros
                }
            };
            adamw_step(p.value.data_mut(), grad, state, &self.config);
        }
    }
}

/// Marks the parameters `mode` may update and returns their element count.
pub fn select_trainable<F: Scalar>(model: &mut DiT<F>, mode: TrainMode) -> Result<usize> {
    if mode.needs_adapters() && !model.is_wrapped() {
        return Err(Error::Contract(format!("{} needs adapter-wrapped layers", mode.name())));
    }
    for p in model.params_mut().iter_mut() {
        p.trainable = match mode {
            TrainMode::PretrainFull | TrainMode::FinetuneFull => true,
            TrainMode::FinetuneBiasOnly => p.role == ParamRole::Bias,
            TrainMode::FinetuneLowrankAdditive => p.role == ParamRole::AdapterShift,
            TrainMode::FinetuneModulation => matches!(
                p.role,
                ParamRole::AdapterGamma | ParamRole::AdapterShift | ParamRole::EmbeddingExpanded
            ),
        };
    }
    Ok(model.params().trainable_count())
}

pub fn trainable_fraction<F: Scalar>(model: &DiT<F>) -> f64 {
    model.params().trainable_count() as f64 / model.params().total_count() as f64
}

/// Embedding row used for a sample's label under `mode`: source classes map
/// to their own row; target conditions map to the appended rows.
pub fn condition_row<F: Scalar>(model: &DiT<F>, mode: TrainMode, label: u8) -> Result<usize> {
    let table = model.embeddings();
    let row = if mode.is_finetune() && table.expanded_rows > 0 {
        table.base_rows + label as usize
    } else {
        label as usize
    };
    if row >= table.rows() {
        return Err(Error::Index {
            index: row,
            len: table.rows(),
        });
    }
    Ok(row)
}

/// One row of the loss trace; `power` is the Scos power in force, if any.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub power: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub trainable: usize,
    pub total: usize,
}

impl TrainReport {
    pub fn mean_loss(&self, range: core::ops::Range<usize>) -> f64 {
        let rows = &self.trace[range];
        rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64
    }
}

/// Schedules keyed by the value that selects them, rebuilt on change.
struct ScheduleCache {
    spec: ScheduleSpec,
    horizon: usize,
    lin: LinearBetas,
    controller: ProgressiveController,
    current: Option<(Option<f64>, NoiseSchedule)>,
}

impl ScheduleCache {
    fn power_at(&self, step: usize) -> Option<f64> {
        match self.spec {
            ScheduleSpec::Linear => None,
            ScheduleSpec::CosinePower(p) | ScheduleSpec::Scos(p) => Some(p),
            ScheduleSpec::ProgressiveScos => Some(self.controller.current_power(step) as f64),
        }
    }

    fn at(&mut self, step: usize) -> Result<(Option<f64>, &NoiseSchedule)> {
        let power = self.power_at(step);
        if self.current.as_ref().is_none_or(|(p, _)| *p != power) {
            let sched = match (self.spec, power) {
                (ScheduleSpec::Linear, _) => NoiseSchedule::linear(self.horizon, self.lin.beta_1, self.lin.beta_t)?,
                (ScheduleSpec::CosinePower(p), _) => NoiseSchedule::cosine_power(self.horizon, p, DEFAULT_OFFSET)?,
                (_, Some(p)) => NoiseSchedule::scos(self.horizon, p, DEFAULT_OFFSET, self.lin)?,
                (_, None) => unreachable!("scos always carries a power"),
            };
            self.current = Some((power, sched));
        }
        let (p, s) = self.current.as_ref().expect("filled above");
        Ok((*p, s))
    }
}

fn gaussian<F: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::of(StandardNormal.sample(rng)))
}

/// Runs `cfg.steps` optimizer steps on `model`, which must already carry the
/// structure `cfg.mode` needs (see [`prepare_finetune`]).
pub fn train<F: Scalar>(model: &mut DiT<F>, data: &[SceneSample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let trainable = select_trainable(model, cfg.mode)?;
    let horizon = model.config().steps;
    let mut cache = ScheduleCache {
        spec: cfg.schedule,
        horizon,
        lin: cfg.linear_betas(horizon),
        controller: ProgressiveController::new(cfg.tau),
        current: None,
    };
    let rows: Vec<usize> = data
        .iter()
        .map(|s| condition_row(model, cfg.mode, s.label))
        .collect::<Result<_>>()?;
    let patch = model.config().patch;
    let channels = model.config().channels;
    let masks: Vec<Tensor<F>> = data
        .iter()
        .map(|s| {
            let c = model.config();
            let m = build_mask(&s.boxes, c.image_size, c.image_size, cfg.osl_lambda)?;
            patchify(&m.to_tensor(channels), patch)
        })
        .collect::<Result<_>>()?;
    let inputs: Vec<Tensor<F>> = data.iter().map(|s| s.model_input()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(
        AdamWConfig::new(cfg.learning_rate, cfg.weight_decay),
        model.params().len(),
    );
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (power, sched) = cache.at(step)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true)?;
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..data.len());
            let t = rng.random_range(1..=horizon);
            let eps: Tensor<F> = gaussian(inputs[i].shape(), &mut rng);
            let xt = sched.q_sample(&inputs[i], t, &eps)?;
            let x = g.constant(patchify(&xt, patch)?);
            let target = g.constant(patchify(&eps, patch)?);
            let mask = g.constant(masks[i].clone());
            let pred = model
                .forward_tokens(&mut g, &bound, x, t, rows[i])
                .map_err(|e| diverged(e, step))?;
            losses.push(osl_loss_graph(&mut g, pred, target, mask).map_err(|e| diverged(e, step))?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l)?;
        }
        let loss = g.scale(total, F::of(1.0 / losses.len() as f64))?;
        let value = g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        g.backward(loss).map_err(|e| diverged(e, step))?;
        opt.step(model.params_mut(), &bound.grads(&g));
        trace.push(TraceRow {
            step,
            loss: value,
            power,
        });
    }
    Ok(TrainReport {
        trace,
        trainable,
        total: model.params().total_count(),
    })
}

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
        other => other,
    }
}

/// How new condition rows start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingInit {
    /// Each new row copies a uniformly drawn source row.
    Random,
    /// Each new row copies the semantically nearest source class's row.
    Ssei,
}

impl EmbeddingInit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(EmbeddingInit::Random),
            "ssei" => Ok(EmbeddingInit::Ssei),
            other => Err(Error::Input(format!("unknown embedding init {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingInit::Random => "random",
            EmbeddingInit::Ssei => "ssei",
        }
    }
}

/// Source row chosen for each new condition.
pub fn embedding_sources(
    init: EmbeddingInit,
    source: &[SceneSample],
    target: &[SceneSample],
    source_classes: usize,
    conditions: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    match init {
        EmbeddingInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..conditions).map(|_| rng.random_range(0..source_classes)).collect())
        }
        EmbeddingInit::Ssei => {
            let s = SemanticIndex::build(source, source_classes)?;
            let t = SemanticIndex::build(target, conditions)?;
            Ok(assign_conditions(&s, &t)?.into_iter().map(|a| a.source_class).collect())
        }
    }
}

/// Fine-tuning copy of a pretrained model: condition rows appended and
/// initialised from `sources`, adapters attached when the mode needs them,
/// and the mode's trainable set selected.
pub fn prepare_finetune<F: Scalar>(
    pretrained: &DiT<F>,
    mode: TrainMode,
    rank: usize,
    sources: &[usize],
    seed: u64,
) -> Result<DiT<F>> {
    if !mode.is_finetune() {
        return Err(param_err("prepare_finetune needs a fine-tuning mode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = pretrained.clone();
    model.expand_conditions(sources.len(), &mut rng)?;
    model.copy_embedding_rows(sources)?;
    if mode.needs_adapters() {
        model.wrap_modulation(rank, &mut rng)?;
    }
    select_trainable(&mut model, mode)?;
    Ok(model)
}

/// Names of frozen parameters in `after` that differ bitwise from `before`.
pub fn frozen_unchanged<F: Scalar>(before: &DiT<F>, after: &DiT<F>) -> Result<Vec<String>> {
    let mut changed = Vec::new();
    for p in after.params().iter().filter(|p| !p.trainable) {
        let id = before
            .params()
            .find(&p.name)
            .ok_or_else(|| Error::Input(format!("parameter {} missing from reference", p.name)))?;
        if before.params().get(id).value != p.value {
            changed.push(p.name.clone());
        }
    }
    Ok(changed)
}
