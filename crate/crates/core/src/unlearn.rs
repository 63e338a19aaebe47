//! Unlearning engine: dynamic forgetting with distribution-level feature
//! distancing, and the baselines it is compared against.
//!
//! Every run is a pure function of `(model, splits, config)`: batch order is
//! drawn from seeded epoch samplers, one stream for the retain split and an
//! independent one for the forget split. Each run keeps an [`AccessLog`] of
//! the sample indices it read for training.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::DatasetTag;
use crate::matrix::Matrix;
use crate::nn::{cross_entropy, GradientBundle, MlpModel};
use crate::ot::{cost_matrix, ot_loss_grad_features, sinkhorn_uniform, SinkhornConfig};
use crate::synth::DatasetSplits;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    pub total_iterations: usize,
    pub dlfd_steps: usize,
    pub learning_rate: f64,
    pub step_size: f64,
    pub batch_size: usize,
    pub forgetting_threshold: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub sinkhorn: SinkhornConfig,
    /// Iterations between forgetting-score evaluations; the last score is held in between.
    pub eval_every: usize,
    pub seed: u64,
    /// Perturbed inputs are clamped to this range when set.
    pub input_clamp: Option<(f64, f64)>,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            total_iterations: 40,
            dlfd_steps: 3,
            learning_rate: 0.01,
            step_size: 0.05,
            batch_size: 32,
            forgetting_threshold: 0.05,
            lambda_min: 0.0,
            lambda_max: 1.0,
            sinkhorn: SinkhornConfig::default(),
            eval_every: 10,
            seed: 0,
            input_clamp: None,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.total_iterations == 0 {
            return fail("total_iterations must be >= 1".into());
        }
        if self.dlfd_steps == 0 {
            return fail("dlfd_steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be >= 1".into());
        }
        if !(0.0..=0.5).contains(&self.forgetting_threshold) {
            return fail(format!(
                "forgetting_threshold must be in [0, 0.5], got {}",
                self.forgetting_threshold
            ));
        }
        if !(self.lambda_min.is_finite() && self.lambda_max.is_finite())
            || self.lambda_min > self.lambda_max
        {
            return fail(format!(
                "need lambda_min <= lambda_max, got {} and {}",
                self.lambda_min, self.lambda_max
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return fail(format!("step_size must be >= 0, got {}", self.step_size));
        }
        if let Some((lo, hi)) = self.input_clamp {
            if !(lo < hi) {
                return fail(format!("input_clamp must satisfy lo < hi, got ({lo}, {hi})"));
            }
        }
        self.sinkhorn.validate()
    }

    fn perturb_params(&self, lambda: f64) -> PerturbParams {
        PerturbParams {
            steps: self.dlfd_steps,
            step_size: self.step_size,
            lambda,
            sinkhorn: self.sinkhorn,
            clamp: self.input_clamp,
        }
    }
}

/// Budget for training a model from scratch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodKind {
    Retrain,
    FineTune,
    NegGrad,
    ErrorMax,
    #[serde(rename = "DLFD")]
    Dlfd,
}

impl MethodKind {
    pub const ALL: [MethodKind; 5] = [
        MethodKind::Retrain,
        MethodKind::FineTune,
        MethodKind::NegGrad,
        MethodKind::ErrorMax,
        MethodKind::Dlfd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Retrain => "Retrain",
            MethodKind::FineTune => "FineTune",
            MethodKind::NegGrad => "NegGrad",
            MethodKind::ErrorMax => "ErrorMax",
            MethodKind::Dlfd => "DLFD",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = MethodKind::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method {s:?}; valid methods: {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Perturb,
    FineTune,
    NegGrad,
    ErrorMax,
    Train,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Perturb => "perturb",
            Branch::FineTune => "finetune",
            Branch::NegGrad => "neggrad",
            Branch::ErrorMax => "errormax",
            Branch::Train => "train",
        })
    }
}

/// Sample indices read for training, per split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccessLog {
    reads: BTreeMap<DatasetTag, BTreeSet<usize>>,
}

impl AccessLog {
    pub fn record(&mut self, tag: DatasetTag, indices: &[usize]) {
        self.reads.entry(tag).or_default().extend(indices.iter().copied());
    }

    pub fn indices(&self, tag: DatasetTag) -> BTreeSet<usize> {
        self.reads.get(&tag).cloned().unwrap_or_default()
    }

    pub fn touched(&self, tag: DatasetTag) -> bool {
        self.reads.get(&tag).is_some_and(|s| !s.is_empty())
    }

    pub fn merge(&mut self, other: &AccessLog) {
        for (tag, set) in &other.reads {
            self.reads.entry(*tag).or_default().extend(set.iter().copied());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub branch: Branch,
    /// Classification weight used by the perturbation; perturb branch only.
    pub lambda: Option<f64>,
    pub train_loss: f64,
    /// Set on iterations where the forgetting score was evaluated.
    pub forgetting_score: Option<f64>,
    pub retain_indices: Vec<usize>,
    /// Labels the model was trained towards on the retain batch.
    pub target_labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub method: MethodKind,
    pub records: Vec<IterationRecord>,
    pub access: AccessLog,
}

impl RunHistory {
    fn new(method: MethodKind) -> Self {
        Self {
            method,
            records: Vec::new(),
            access: AccessLog::default(),
        }
    }

    pub fn count_branch(&self, branch: Branch) -> usize {
        self.records.iter().filter(|r| r.branch == branch).count()
    }

    /// `iteration,branch,lambda,train_loss,forgetting_score` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,branch,lambda,train_loss,forgetting_score\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iteration,
                r.branch,
                opt(r.lambda),
                r.train_loss,
                opt(r.forgetting_score)
            ));
        }
        out
    }
}

/// Source of the forgetting score consulted by [`dlfd_run`].
pub trait ForgettingEvaluator {
    fn forgetting_score(&mut self, model: &MlpModel) -> Result<f64>;
}

impl<F> ForgettingEvaluator for F
where
    F: FnMut(&MlpModel) -> Result<f64>,
{
    fn forgetting_score(&mut self, model: &MlpModel) -> Result<f64> {
        self(model)
    }
}

/// Linearly interpolated classification weight for iteration `k` of `total`.
pub fn linear_weight(k: usize, total: usize, lambda_min: f64, lambda_max: f64) -> Result<f64> {
    if k == 0 || k > total {
        return Err(Error::Input(format!("iteration {k} outside 1..={total}")));
    }
    let t = (k - 1) as f64 / (total.saturating_sub(1)).max(1) as f64;
    Ok((1.0 - t) * lambda_min + t * lambda_max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbParams {
    pub steps: usize,
    pub step_size: f64,
    pub lambda: f64,
    pub sinkhorn: SinkhornConfig,
    pub clamp: Option<(f64, f64)>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Applies one signed step to every coordinate, then clamps into the
/// optional range and within `steps_so_far · step_size` of the origin.
fn signed_step(
    current: &mut Matrix,
    origin: &Matrix,
    grad: &Matrix,
    step_size: f64,
    steps_so_far: usize,
    clamp: Option<(f64, f64)>,
) {
    let radius = steps_so_far as f64 * step_size;
    for ((x, &g), &x0) in current
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(origin.as_slice())
    {
        let mut v = *x + step_size * sign(g);
        if let Some((lo, hi)) = clamp {
            v = v.clamp(lo, hi);
        }
        // rounding in the additions must not push the total displacement past the radius
        while (v - x0).abs() > radius {
            v = if v > x0 { v.next_down() } else { v.next_up() };
        }
        *x = v;
    }
}

/// Perturbs a retain batch away from the forget batch in feature space.
///
/// Each of `steps` iterations ascends `⟨T, C(F(x*), F(x'))⟩ − λ · CE(y, θ(x*))`
/// by a signed step of `step_size`, with the transport plan treated as fixed.
pub fn perturb_batch(
    model: &MlpModel,
    retain_inputs: &Matrix,
    retain_labels: &[usize],
    forget_inputs: &Matrix,
    params: &PerturbParams,
) -> Result<Matrix> {
    if retain_inputs.rows() == 0 || forget_inputs.rows() == 0 {
        return Err(Error::Input("perturbation needs non-empty retain and forget batches".into()));
    }
    if retain_inputs.cols() != forget_inputs.cols() {
        return Err(Error::Shape(format!(
            "retain width {} differs from forget width {}",
            retain_inputs.cols(),
            forget_inputs.cols()
        )));
    }
    let (forget_features, _) = model.feature_extract(forget_inputs)?;
    let mut current = retain_inputs.clone();
    for step in 1..=params.steps {
        let (features, ftrace) = model.feature_extract(&current)?;
        let cost = cost_matrix(&features, &forget_features)?;
        let plan = sinkhorn_uniform(&cost, &params.sinkhorn)?;
        let dfeatures = ot_loss_grad_features(&plan, &features, &forget_features)?;
        let mut grad = model.feature_vjp(&ftrace, &dfeatures)?;

        if params.lambda != 0.0 {
            let (logits, trace) = model.forward(&current)?;
            let (_, dlogits) = cross_entropy(&logits, retain_labels)?;
            let ce_grad = model.backward(&trace, &dlogits)?.input_grads;
            for (g, c) in grad.as_mut_slice().iter_mut().zip(ce_grad.as_slice()) {
                *g -= params.lambda * c;
            }
        }
        if !grad.is_finite() {
            return Err(Error::Numeric("non-finite perturbation gradient".into()));
        }
        signed_step(&mut current, retain_inputs, &grad, params.step_size, step, params.clamp);
    }
    Ok(current)
}

/// Error-maximizing perturbation: ascends the batch's own cross-entropy.
pub fn error_max_batch(
    model: &MlpModel,
    inputs: &Matrix,
    labels: &[usize],
    steps: usize,
    step_size: f64,
    clamp: Option<(f64, f64)>,
) -> Result<Matrix> {
    let mut current = inputs.clone();
    for step in 1..=steps {
        let (logits, trace) = model.forward(&current)?;
        let (_, dlogits) = cross_entropy(&logits, labels)?;
        let grad = model.backward(&trace, &dlogits)?.input_grads;
        if !grad.is_finite() {
            return Err(Error::Numeric("non-finite error-maximizing gradient".into()));
        }
        signed_step(&mut current, inputs, &grad, step_size, step, clamp);
    }
    Ok(current)
}

/// Seeded sampler that walks a fresh permutation every epoch. The final
/// batch of an epoch may be shorter.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            batch_size,
            cursor: 0,
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

const RETAIN_STREAM: u64 = 0x7265_7461_696e;
const FORGET_STREAM: u64 = 0x666f_7267_6574;

fn stream_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Training tensors for one split, plus its tag for the access log.
struct SplitData {
    tag: DatasetTag,
    inputs: Matrix,
    labels: Vec<usize>,
}

impl SplitData {
    fn load(splits: &DatasetSplits, tag: DatasetTag) -> Result<Self> {
        if splits.get(tag).is_empty() {
            return Err(Error::Input(format!("{tag} split is empty")));
        }
        Ok(Self {
            tag,
            inputs: splits.inputs(tag),
            labels: splits.labels(tag),
        })
    }

    fn batch(&self, idx: &[usize], log: &mut AccessLog) -> (Matrix, Vec<usize>) {
        log.record(self.tag, idx);
        (
            self.inputs.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    fn sampler(&self, batch_size: usize, seed: u64, stream: u64) -> EpochSampler {
        EpochSampler::new(self.inputs.rows(), batch_size, stream_seed(seed, stream))
    }
}

/// Mean cross-entropy of a batch and its gradient bundle.
pub fn loss_and_grads(model: &MlpModel, inputs: &Matrix, labels: &[usize]) -> Result<(f64, GradientBundle)> {
    let (logits, trace) = model.forward(inputs)?;
    let (loss, dlogits) = cross_entropy(&logits, labels)?;
    let grads = model.backward(&trace, &dlogits)?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Numeric("non-finite loss or gradient".into()));
    }
    Ok((loss, grads))
}

fn check_score(score: f64) -> Result<f64> {
    if !(0.0..=0.5).contains(&score) {
        return Err(Error::Evaluator(format!("forgetting score {score} outside [0, 0.5]")));
    }
    Ok(score)
}

/// Dynamic forgetting: perturbation-based training while the forgetting
/// score is at or above the threshold, plain fine-tuning otherwise.
pub fn dlfd_run(
    model: &MlpModel,
    splits: &DatasetSplits,
    config: &UnlearnConfig,
    evaluator: &mut dyn ForgettingEvaluator,
) -> Result<(MlpModel, RunHistory)> {
    config.validate()?;
    let retain = SplitData::load(splits, DatasetTag::Retain)?;
    let forget = SplitData::load(splits, DatasetTag::Forget)?;
    let mut retain_sampler = retain.sampler(config.batch_size, config.seed, RETAIN_STREAM);
    let mut forget_sampler = forget.sampler(config.batch_size, config.seed, FORGET_STREAM);

    let mut model = model.clone();
    let mut history = RunHistory::new(MethodKind::Dlfd);
    let mut score = f64::NAN;
    for k in 1..=config.total_iterations {
        let r_idx = retain_sampler.next_batch();
        let f_idx = forget_sampler.next_batch();
        let evaluated = if (k - 1) % config.eval_every == 0 {
            score = check_score(evaluator.forgetting_score(&model)?)?;
            Some(score)
        } else {
            None
        };
        let (x, y) = retain.batch(&r_idx, &mut history.access);
        let (branch, lambda, (loss, grads)) = if score >= config.forgetting_threshold {
            let lambda = linear_weight(k, config.total_iterations, config.lambda_min, config.lambda_max)?;
            let (fx, _) = forget.batch(&f_idx, &mut history.access);
            let perturbed = perturb_batch(&model, &x, &y, &fx, &config.perturb_params(lambda))?;
            (Branch::Perturb, Some(lambda), loss_and_grads(&model, &perturbed, &y)?)
        } else {
            (Branch::FineTune, None, loss_and_grads(&model, &x, &y)?)
        };
        model = model.sgd_step(&grads, config.learning_rate)?;
        history.records.push(IterationRecord {
            iteration: k,
            branch,
            lambda,
            train_loss: loss,
            forgetting_score: evaluated,
            retain_indices: r_idx,
            target_labels: y,
        });
    }
    Ok((model, history))
}

/// Plain cross-entropy SGD on retain batches.
pub fn finetune_run(
    model: &MlpModel,
    splits: &DatasetSplits,
    config: &UnlearnConfig,
) -> Result<(MlpModel, RunHistory)> {
    config.validate()?;
    let retain = SplitData::load(splits, DatasetTag::Retain)?;
    let mut sampler = retain.sampler(config.batch_size, config.seed, RETAIN_STREAM);
    let mut model = model.clone();
    let mut history = RunHistory::new(MethodKind::FineTune);
    for k in 1..=config.total_iterations {
        let idx = sampler.next_batch();
        let (x, y) = retain.batch(&idx, &mut history.access);
        let (loss, grads) = loss_and_grads(&model, &x, &y)?;
        model = model.sgd_step(&grads, config.learning_rate)?;
        history.records.push(IterationRecord {
            iteration: k,
            branch: Branch::FineTune,
            lambda: None,
            train_loss: loss,
            forgetting_score: None,
            retain_indices: idx,
            target_labels: y,
        });
    }
    Ok((model, history))
}

fn negated(grads: &GradientBundle) -> GradientBundle {
    let zero = GradientBundle {
        weight_grads: grads
            .weight_grads
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect(),
        bias_grads: grads.bias_grads.iter().map(|b| vec![0.0; b.len()]).collect(),
        input_grads: grads.input_grads.clone(),
    };
    zero.combine(grads, -1.0).expect("same shapes")
}

/// Alternates a descent step on a retain batch with an ascent step on a forget batch.
pub fn neggrad_run(
    model: &MlpModel,
    splits: &DatasetSplits,
    config: &UnlearnConfig,
) -> Result<(MlpModel, RunHistory)> {
    config.validate()?;
    let retain = SplitData::load(splits, DatasetTag::Retain)?;
    let forget = SplitData::load(splits, DatasetTag::Forget)?;
    let mut retain_sampler = retain.sampler(config.batch_size, config.seed, RETAIN_STREAM);
    let mut forget_sampler = forget.sampler(config.batch_size, config.seed, FORGET_STREAM);
    let mut model = model.clone();
    let mut history = RunHistory::new(MethodKind::NegGrad);
    for k in 1..=config.total_iterations {
        let r_idx = retain_sampler.next_batch();
        let f_idx = forget_sampler.next_batch();
        let (x, y) = retain.batch(&r_idx, &mut history.access);
        let (loss, grads) = loss_and_grads(&model, &x, &y)?;
        model = model.sgd_step(&grads, config.learning_rate)?;

        let (fx, fy) = forget.batch(&f_idx, &mut history.access);
        let (_, fgrads) = loss_and_grads(&model, &fx, &fy)?;
        model = model.sgd_step(&negated(&fgrads), config.learning_rate)?;
        history.records.push(IterationRecord {
            iteration: k,
            branch: Branch::NegGrad,
            lambda: None,
            train_loss: loss,
            forgetting_score: None,
            retain_indices: r_idx,
            target_labels: y,
        });
    }
    Ok((model, history))
}

/// Instance-level error maximization: forget inputs are pushed up their own
/// loss surface, then the model descends on retain while ascending on the
/// perturbed forget batch.
pub fn errormax_run(
    model: &MlpModel,
    splits: &DatasetSplits,
    config: &UnlearnConfig,
) -> Result<(MlpModel, RunHistory)> {
    config.validate()?;
    let retain = SplitData::load(splits, DatasetTag::Retain)?;
    let forget = SplitData::load(splits, DatasetTag::Forget)?;
    let mut retain_sampler = retain.sampler(config.batch_size, config.seed, RETAIN_STREAM);
    let mut forget_sampler = forget.sampler(config.batch_size, config.seed, FORGET_STREAM);
    let mut model = model.clone();
    let mut history = RunHistory::new(MethodKind::ErrorMax);
    for k in 1..=config.total_iterations {
        let r_idx = retain_sampler.next_batch();
        let f_idx = forget_sampler.next_batch();
        let (x, y) = retain.batch(&r_idx, &mut history.access);
        let (fx, fy) = forget.batch(&f_idx, &mut history.access);
        let noisy = error_max_batch(
            &model,
            &fx,
            &fy,
            config.dlfd_steps,
            config.step_size,
            config.input_clamp,
        )?;
        let (loss, grads) = loss_and_grads(&model, &x, &y)?;
        let (_, fgrads) = loss_and_grads(&model, &noisy, &fy)?;
        model = model.sgd_step(&grads.combine(&fgrads, -1.0)?, config.learning_rate)?;
        history.records.push(IterationRecord {
            iteration: k,
            branch: Branch::ErrorMax,
            lambda: None,
            train_loss: loss,
            forgetting_score: None,
            retain_indices: r_idx,
            target_labels: y,
        });
    }
    Ok((model, history))
}

/// Per-epoch summary of a from-scratch training run.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

pub fn training_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_loss,train_accuracy\n");
    for e in log {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.mean_loss, e.train_accuracy));
    }
    out
}

/// Minibatch SGD over the concatenation of `parts`.
fn train_from_scratch(
    template: &MlpModel,
    parts: &[&SplitData],
    train: &TrainConfig,
    method: MethodKind,
) -> Result<(MlpModel, RunHistory, Vec<EpochLog>)> {
    train.validate()?;
    let feature = template.feature_layer_index();
    let mut model = MlpModel::init(template.layer_dims(), feature, train.seed)?;
    // global index -> (part, local index)
    let owners: Vec<(usize, usize)> = parts
        .iter()
        .enumerate()
        .flat_map(|(p, d)| (0..d.inputs.rows()).map(move |i| (p, i)))
        .collect();
    if owners.is_empty() {
        return Err(Error::Input("no training data".into()));
    }
    let mut sampler = EpochSampler::new(owners.len(), train.batch_size, stream_seed(train.seed, RETAIN_STREAM));
    let batches_per_epoch = owners.len().div_ceil(train.batch_size);
    let mut history = RunHistory::new(method);
    let mut epochs = Vec::with_capacity(train.epochs);
    let mut iteration = 0;
    for epoch in 1..=train.epochs {
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for _ in 0..batches_per_epoch {
            let idx = sampler.next_batch();
            let mut x = Matrix::zeros(idx.len(), template.input_dim());
            let mut y = Vec::with_capacity(idx.len());
            for (row, &g) in idx.iter().enumerate() {
                let (p, i) = owners[g];
                x.row_mut(row).copy_from_slice(parts[p].inputs.row(i));
                y.push(parts[p].labels[i]);
                history.access.record(parts[p].tag, &[i]);
            }
            let (logits, trace) = model.forward(&x)?;
            let (loss, dlogits) = cross_entropy(&logits, &y)?;
            hits += crate::nn::argmax_rows(&logits)
                .iter()
                .zip(&y)
                .filter(|(a, b)| a == b)
                .count();
            loss_sum += loss * idx.len() as f64;
            let grads = model.backward(&trace, &dlogits)?;
            model = model.sgd_step(&grads, train.learning_rate)?;
            iteration += 1;
            history.records.push(IterationRecord {
                iteration,
                branch: Branch::Train,
                lambda: None,
                train_loss: loss,
                forgetting_score: None,
                retain_indices: idx,
                target_labels: y,
            });
        }
        epochs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / owners.len() as f64,
            train_accuracy: hits as f64 / owners.len() as f64,
        });
    }
    Ok((model, history, epochs))
}

/// Trains the original model on retain ∪ forget.
pub fn train_original(
    template: &MlpModel,
    splits: &DatasetSplits,
    train: &TrainConfig,
) -> Result<(MlpModel, Vec<EpochLog>, AccessLog)> {
    let retain = SplitData::load(splits, DatasetTag::Retain)?;
    let forget = SplitData::load(splits, DatasetTag::Forget)?;
    let (model, history, log) = train_from_scratch(template, &[&retain, &forget], train, MethodKind::Retrain)?;
    Ok((model, log, history.access))
}

/// Ground-truth reference: a fresh model trained on the retain split only.
pub fn retrain_run(
    splits: &DatasetSplits,
    template: &MlpModel,
    train: &TrainConfig,
) -> Result<(MlpModel, RunHistory)> {
    let retain = SplitData::load(splits, DatasetTag::Retain)?;
    let (model, history, _) = train_from_scratch(template, &[&retain], train, MethodKind::Retrain)?;
    Ok((model, history))
}
