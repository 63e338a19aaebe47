//! Forgetting evaluation.
//!
//! The membership-inference attacker is a one-dimensional logistic
//! classifier on the per-sample loss. It is fitted on half of each group
//! (forget = positive, unseen = negative) with class-balanced weights, and
//! scored by balanced accuracy on the other half. The forgetting score is
//! `|accuracy − 0.5|`; NoMUS combines it with test accuracy as
//! `½ (test_accuracy + 1 − 2 · forgetting_score)`.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::nn::{argmax_rows, per_sample_cross_entropy, MlpModel};
use crate::synth::DatasetSplits;
use crate::unlearn::ForgettingEvaluator;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Retain,
    Forget,
    Unseen,
    Test,
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetTag::Retain => "retain",
            DatasetTag::Forget => "forget",
            DatasetTag::Unseen => "unseen",
            DatasetTag::Test => "test",
        })
    }
}

/// Per-sample cross-entropy of one labeled dataset under a fixed model.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDistribution {
    pub tag: DatasetTag,
    pub losses: Vec<f64>,
}

impl LossDistribution {
    pub fn new(tag: DatasetTag, losses: Vec<f64>) -> Result<Self> {
        if losses.iter().any(|&l| !(l.is_finite() && l >= 0.0)) {
            return Err(Error::Numeric(format!("{tag} losses must be finite and >= 0")));
        }
        Ok(Self { tag, losses })
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.losses.is_empty() {
            return 0.0;
        }
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

pub fn sample_losses(
    model: &MlpModel,
    inputs: &Matrix,
    labels: &[usize],
    tag: DatasetTag,
) -> Result<LossDistribution> {
    if inputs.rows() == 0 {
        return Err(Error::Input(format!("{tag} dataset is empty")));
    }
    let logits = model.predict(inputs)?;
    // exact zero can come out slightly negative through rounding
    let losses = per_sample_cross_entropy(&logits, labels)?
        .into_iter()
        .map(|l| l.max(0.0))
        .collect();
    LossDistribution::new(tag, losses)
}

/// Fraction of rows whose highest logit is the true label.
pub fn accuracy(model: &MlpModel, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
    if inputs.rows() == 0 {
        return Err(Error::Input("accuracy of an empty dataset".into()));
    }
    if labels.len() != inputs.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), inputs.rows())));
    }
    let predicted = argmax_rows(&model.predict(inputs)?);
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fitted attacker: `P(member | loss) = σ(weight · (loss − center) / scale + bias)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiaClassifier {
    pub weight: f64,
    pub bias: f64,
    /// Standardization applied to the loss before the logistic unit.
    pub center: f64,
    pub scale: f64,
}

impl MiaClassifier {
    pub fn logit(&self, loss: f64) -> f64 {
        self.weight * (loss - self.center) / self.scale + self.bias
    }

    pub fn predicts_member(&self, loss: f64) -> bool {
        self.logit(loss) > 0.0
    }

    /// Mean of the true positive rate on `members` and the true negative rate
    /// on `non_members`.
    pub fn balanced_accuracy(&self, members: &[f64], non_members: &[f64]) -> f64 {
        let tpr = members.iter().filter(|&&l| self.predicts_member(l)).count() as f64
            / members.len() as f64;
        let tnr = non_members.iter().filter(|&&l| !self.predicts_member(l)).count() as f64
            / non_members.len() as f64;
        0.5 * (tpr + tnr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiaResult {
    pub accuracy: f64,
    pub forgetting_score: f64,
    pub seed: u64,
    pub classifier: MiaClassifier,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiaConfig {
    pub max_iters: usize,
    pub learning_rate: f64,
    /// L2 penalty on the weight; keeps the fit bounded on separable data.
    pub l2: f64,
    /// Gradient-norm stopping threshold.
    pub tolerance: f64,
}

impl Default for MiaConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            learning_rate: 0.5,
            l2: 1e-4,
            tolerance: 1e-10,
        }
    }
}

/// Seeded 50/50 split of `0..n`; depends only on `n` and the seed so that
/// both groups are split independently of argument order.
fn half_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let eval = idx.split_off(n / 2);
    (idx, eval)
}

fn fit_logistic(
    members: &[f64],
    non_members: &[f64],
    config: &MiaConfig,
) -> (MiaClassifier, usize) {
    let all = members.iter().chain(non_members);
    let n = (members.len() + non_members.len()) as f64;
    let center = all.clone().sum::<f64>() / n;
    let var = all.map(|l| (l - center).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-24 { var.sqrt() } else { 1.0 };

    // each class carries half of the total weight
    let w_pos = 0.5 / members.len() as f64;
    let w_neg = 0.5 / non_members.len() as f64;
    let (mut w, mut b) = (0.0f64, 0.0f64);
    let mut iterations = 0;
    for it in 1..=config.max_iters {
        let (mut gw, mut gb) = (config.l2 * w, 0.0);
        for (&l, y, wt) in members
            .iter()
            .map(|l| (l, 1.0, w_pos))
            .chain(non_members.iter().map(|l| (l, 0.0, w_neg)))
        {
            let x = (l - center) / scale;
            let p = sigmoid(w * x + b);
            gw += wt * (p - y) * x;
            gb += wt * (p - y);
        }
        iterations = it;
        if gw.hypot(gb) < config.tolerance {
            break;
        }
        w -= config.learning_rate * gw;
        b -= config.learning_rate * gb;
    }
    (
        MiaClassifier {
            weight: w,
            bias: b,
            center,
            scale,
        },
        iterations,
    )
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Trains the loss-threshold attacker and reports its held-out balanced accuracy.
pub fn train_mia(
    forget: &LossDistribution,
    unseen: &LossDistribution,
    seed: u64,
) -> Result<MiaResult> {
    train_mia_with(forget, unseen, seed, &MiaConfig::default())
}

pub fn train_mia_with(
    forget: &LossDistribution,
    unseen: &LossDistribution,
    seed: u64,
    config: &MiaConfig,
) -> Result<MiaResult> {
    if forget.len() < 2 || unseen.len() < 2 {
        return Err(Error::Input(format!(
            "membership inference needs at least two samples per group, got {} and {}",
            forget.len(),
            unseen.len()
        )));
    }
    let (fit_pos, eval_pos) = half_split(forget.len(), seed);
    let (fit_neg, eval_neg) = half_split(unseen.len(), seed);
    let pick = |d: &LossDistribution, idx: &[usize]| idx.iter().map(|&i| d.losses[i]).collect::<Vec<_>>();

    let (classifier, iterations) =
        fit_logistic(&pick(forget, &fit_pos), &pick(unseen, &fit_neg), config);
    if !(classifier.weight.is_finite() && classifier.bias.is_finite()) {
        return Err(Error::Numeric("attack classifier diverged".into()));
    }
    let accuracy = classifier.balanced_accuracy(&pick(forget, &eval_pos), &pick(unseen, &eval_neg));
    Ok(MiaResult {
        accuracy,
        forgetting_score: (accuracy - 0.5).abs(),
        seed,
        classifier,
        iterations,
    })
}

/// `½ (test_accuracy + 1 − 2 · forgetting_score)`.
pub fn nomus(test_accuracy: f64, forgetting_score: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&test_accuracy) {
        return Err(Error::Input(format!("test accuracy {test_accuracy} outside [0, 1]")));
    }
    if !(0.0..=0.5).contains(&forgetting_score) {
        return Err(Error::Input(format!(
            "forgetting score {forgetting_score} outside [0, 0.5]"
        )));
    }
    Ok(0.5 * (test_accuracy + 1.0 - 2.0 * forgetting_score))
}

/// One evaluated model, as reported per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NomusReport {
    pub method: String,
    pub test_accuracy: f64,
    pub mia_accuracy: f64,
    pub forgetting_score: f64,
    pub nomus: f64,
}

impl NomusReport {
    pub fn new(method: impl Into<String>, test_accuracy: f64, mia: &MiaResult) -> Result<Self> {
        Ok(Self {
            method: method.into(),
            test_accuracy,
            mia_accuracy: mia.accuracy,
            forgetting_score: mia.forgetting_score,
            nomus: nomus(test_accuracy, mia.forgetting_score)?,
        })
    }
}

/// Membership-inference attacker bound to the forget and unseen splits of a dataset.
#[derive(Debug, Clone)]
pub struct MiaEvaluator {
    forget_inputs: Matrix,
    forget_labels: Vec<usize>,
    unseen_inputs: Matrix,
    unseen_labels: Vec<usize>,
    seed: u64,
}

impl MiaEvaluator {
    pub fn from_splits(splits: &DatasetSplits, seed: u64) -> Self {
        Self {
            forget_inputs: splits.inputs(DatasetTag::Forget),
            forget_labels: splits.labels(DatasetTag::Forget),
            unseen_inputs: splits.inputs(DatasetTag::Unseen),
            unseen_labels: splits.labels(DatasetTag::Unseen),
            seed,
        }
    }

    pub fn losses(&self, model: &MlpModel) -> Result<(LossDistribution, LossDistribution)> {
        Ok((
            sample_losses(model, &self.forget_inputs, &self.forget_labels, DatasetTag::Forget)?,
            sample_losses(model, &self.unseen_inputs, &self.unseen_labels, DatasetTag::Unseen)?,
        ))
    }

    pub fn attack(&self, model: &MlpModel) -> Result<MiaResult> {
        let (forget, unseen) = self.losses(model)?;
        train_mia(&forget, &unseen, self.seed)
    }
}

impl ForgettingEvaluator for MiaEvaluator {
    fn forgetting_score(&mut self, model: &MlpModel) -> Result<f64> {
        Ok(self.attack(model)?.forgetting_score)
    }
}

/// Test accuracy, membership attack and NoMUS of one model.
pub fn evaluate_model(
    method: impl Into<String>,
    model: &MlpModel,
    splits: &DatasetSplits,
    mia_seed: u64,
) -> Result<NomusReport> {
    let test_accuracy = accuracy(
        model,
        &splits.inputs(DatasetTag::Test),
        &splits.labels(DatasetTag::Test),
    )?;
    let mia = MiaEvaluator::from_splits(splits, mia_seed).attack(model)?;
    NomusReport::new(method, test_accuracy, &mia)
}

/// Fixed-width histogram over `[lo, hi]` with explicit under/overflow counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.underflow + self.overflow
    }

    pub fn bin_edges(&self, bin: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + width * bin as f64, self.lo + width * (bin + 1) as f64)
    }

    /// `bin_lo,bin_hi,count` rows with a header; under/overflow rows use
    /// open-ended `-inf`/`inf` edges.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        out.push_str(&format!("-inf,{},{}\n", self.lo, self.underflow));
        for (i, c) in self.counts.iter().enumerate() {
            let (a, b) = self.bin_edges(i);
            out.push_str(&format!("{a},{b},{c}\n"));
        }
        out.push_str(&format!("{},inf,{}\n", self.hi, self.overflow));
        out
    }
}

pub fn loss_histogram(dist: &LossDistribution, bin_count: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if bin_count == 0 {
        return Err(Error::Input("histogram needs at least one bin".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Input(format!("invalid histogram range [{lo}, {hi}]")));
    }
    let mut hist = Histogram {
        lo,
        hi,
        counts: vec![0; bin_count],
        underflow: 0,
        overflow: 0,
    };
    let width = (hi - lo) / bin_count as f64;
    for &v in &dist.losses {
        if v < lo {
            hist.underflow += 1;
        } else if v > hi {
            hist.overflow += 1;
        } else {
            let bin = (((v - lo) / width) as usize).min(bin_count - 1);
            hist.counts[bin] += 1;
        }
    }
    Ok(hist)
}
