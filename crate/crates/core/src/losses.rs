//! Matching, distillation and uncertainty-weighting losses.
//!
//! Every candidate vector follows one convention: position 0 is the
//! positive pair and the rest are negatives. Batch losses reduce by sum over
//! queries. Each loss comes with a `*_with_grad` form returning the gradient
//! with respect to the student logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::CandidateList;
use crate::tensor::{check_logits, log_sum_exp, stable_softmax};

/// A reduced loss plus the per-query terms it was reduced from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub per_query_terms: Vec<f64>,
}

impl LossValue {
    fn from_terms(per_query_terms: Vec<f64>) -> Self {
        LossValue {
            value: per_query_terms.iter().sum(),
            per_query_terms,
        }
    }

    pub fn mean(&self) -> f64 {
        if self.per_query_terms.is_empty() {
            0.0
        } else {
            self.value / self.per_query_terms.len() as f64
        }
    }
}

/// Loss value and `d loss / d student logits`, one row per query.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub loss: LossValue,
    pub grad: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightKind {
    /// `w`, applied to the hard-label task term.
    Hard,
    /// `c`, applied to the soft-label distillation term.
    Soft,
}

/// Per-query batch weights: strictly positive, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    kind: WeightKind,
    weights: Vec<f64>,
}

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

impl WeightVector {
    pub fn new(kind: WeightKind, weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Usage("weight vector is empty".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Numeric(format!(
                "weights must be positive and finite, found {w}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::Numeric(format!("weights sum to {sum}, not 1")));
        }
        Ok(WeightVector { kind, weights })
    }

    pub fn uniform(kind: WeightKind, k: usize) -> Result<Self> {
        WeightVector::new(kind, vec![1.0 / k as f64; k])
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Student and (adjusted) teacher logits over the same candidate list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillPair {
    pub student_logits: Vec<f64>,
    pub teacher_logits: Vec<f64>,
}

impl DistillPair {
    pub fn new(student_logits: Vec<f64>, teacher_logits: Vec<f64>) -> Result<Self> {
        let pair = DistillPair {
            student_logits,
            teacher_logits,
        };
        pair.check()?;
        Ok(pair)
    }

    fn check(&self) -> Result<()> {
        if self.student_logits.len() != self.teacher_logits.len() {
            return Err(Error::shape(
                "student logits",
                self.student_logits.len(),
                "teacher logits",
                self.teacher_logits.len(),
            ));
        }
        check_logits(&self.student_logits)?;
        check_logits(&self.teacher_logits)
    }
}

fn non_empty<T>(batch: &[T]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Usage("loss over an empty batch".into()));
    }
    Ok(())
}

fn check_weights(weights: &WeightVector, batch: usize) -> Result<()> {
    if weights.len() != batch {
        return Err(Error::shape("weights", weights.len(), "batch", batch));
    }
    Ok(())
}

/// `−log softmax(s)[0]` and its gradient `softmax(s) − e₀`.
fn positive_cross_entropy(scores: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_logits(scores)?;
    let lse = log_sum_exp(scores);
    let term = lse - scores[0];
    let mut grad: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
    grad[0] -= 1.0;
    Ok((term, grad))
}

fn cross_entropy_batch(batch: &[Vec<f64>]) -> Result<LossWithGrad> {
    non_empty(batch)?;
    let (terms, grad): (Vec<f64>, Vec<Vec<f64>>) = batch
        .iter()
        .map(|s| positive_cross_entropy(s))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(LossWithGrad {
        loss: LossValue::from_terms(terms),
        grad,
    })
}

/// Softmax contrastive loss over candidate score vectors.
pub fn nce_loss(batch: &[Vec<f64>]) -> Result<LossValue> {
    Ok(nce_loss_with_grad(batch)?.loss)
}

pub fn nce_loss_with_grad(batch: &[Vec<f64>]) -> Result<LossWithGrad> {
    cross_entropy_batch(batch)
}

/// Matching loss with exactly one negative per query.
pub fn itm_loss(batch: &[Vec<f64>]) -> Result<LossValue> {
    Ok(itm_loss_with_grad(batch)?.loss)
}

pub fn itm_loss_with_grad(batch: &[Vec<f64>]) -> Result<LossWithGrad> {
    if let Some((i, s)) = batch.iter().enumerate().find(|(_, s)| s.len() != 2) {
        return Err(Error::Usage(format!(
            "itm loss takes one positive and one negative; query {i} has {} scores",
            s.len()
        )));
    }
    cross_entropy_batch(batch)
}

/// Matching loss over the positive and its `M'` mined negatives.
pub fn itm_hard_loss(candidates: &[CandidateList], student: &[Vec<f64>]) -> Result<LossValue> {
    Ok(itm_hard_loss_with_grad(candidates, student)?.loss)
}

pub fn itm_hard_loss_with_grad(
    candidates: &[CandidateList],
    student: &[Vec<f64>],
) -> Result<LossWithGrad> {
    if candidates.len() != student.len() {
        return Err(Error::shape(
            "candidate lists",
            candidates.len(),
            "student logit vectors",
            student.len(),
        ));
    }
    for (c, s) in candidates.iter().zip(student) {
        if c.len() != s.len() {
            return Err(Error::shape(
                "candidate list",
                c.len(),
                "student logits",
                s.len(),
            ));
        }
    }
    cross_entropy_batch(student)
}

/// `τ² · Σ_j p_t^j log(p_t^j / p_s^j)` per query, summed over the batch.
pub fn kl_distill_loss(pairs: &[DistillPair], temperature: f64) -> Result<LossValue> {
    Ok(kl_distill_loss_with_grad(pairs, temperature)?.loss)
}

pub fn kl_distill_loss_with_grad(pairs: &[DistillPair], temperature: f64) -> Result<LossWithGrad> {
    non_empty(pairs)?;
    let mut terms = Vec::with_capacity(pairs.len());
    let mut grad = Vec::with_capacity(pairs.len());
    for pair in pairs {
        pair.check()?;
        let p_s = stable_softmax(&pair.student_logits, temperature)?;
        let p_t = stable_softmax(&pair.teacher_logits, temperature)?;
        let scaled = |z: &[f64]| z.iter().map(|v| v / temperature).collect::<Vec<_>>();
        let (zs, zt) = (scaled(&pair.student_logits), scaled(&pair.teacher_logits));
        let (lse_s, lse_t) = (log_sum_exp(&zs), log_sum_exp(&zt));
        let kl: f64 = p_t
            .iter()
            .zip(zt.iter().zip(&zs))
            .map(|(p, (t, s))| p * ((t - lse_t) - (s - lse_s)))
            .sum();
        terms.push(temperature * temperature * kl.max(0.0));
        grad.push(
            p_s.iter()
                .zip(&p_t)
                .map(|(s, t)| temperature * (s - t))
                .collect(),
        );
    }
    Ok(LossWithGrad {
        loss: LossValue::from_terms(terms),
        grad,
    })
}

/// `‖z_s − z_t‖²` per query, summed over the batch.
pub fn mse_distill_loss(pairs: &[DistillPair]) -> Result<LossValue> {
    Ok(mse_distill_loss_with_grad(pairs)?.loss)
}

pub fn mse_distill_loss_with_grad(pairs: &[DistillPair]) -> Result<LossWithGrad> {
    non_empty(pairs)?;
    let mut terms = Vec::with_capacity(pairs.len());
    let mut grad = Vec::with_capacity(pairs.len());
    for pair in pairs {
        pair.check()?;
        let diff: Vec<f64> = pair
            .student_logits
            .iter()
            .zip(&pair.teacher_logits)
            .map(|(s, t)| s - t)
            .collect();
        terms.push(diff.iter().map(|d| d * d).sum());
        grad.push(diff.iter().map(|d| 2.0 * d).collect());
    }
    Ok(LossWithGrad {
        loss: LossValue::from_terms(terms),
        grad,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    Ok(())
}

fn blend(first: &LossValue, second: &LossValue, alpha: f64) -> Result<LossValue> {
    check_alpha(alpha)?;
    if first.per_query_terms.len() != second.per_query_terms.len() {
        return Err(Error::shape(
            "first loss terms",
            first.per_query_terms.len(),
            "second loss terms",
            second.per_query_terms.len(),
        ));
    }
    Ok(LossValue {
        value: alpha * first.value + (1.0 - alpha) * second.value,
        per_query_terms: first
            .per_query_terms
            .iter()
            .zip(&second.per_query_terms)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect(),
    })
}

/// Blends gradients the same way the objectives blend values.
pub fn blend_grads(first: &[Vec<f64>], second: &[Vec<f64>], alpha: f64) -> Vec<Vec<f64>> {
    first
        .iter()
        .zip(second)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
                .collect()
        })
        .collect()
}

/// `α · L_mse + (1 − α) · L_task`.
pub fn vanilla_kd_objective(mse: &LossValue, task: &LossValue, alpha: f64) -> Result<LossValue> {
    blend(mse, task, alpha)
}

/// `α · L_wds + (1 − α) · L_witm`.
pub fn dcd_objective(wds: &LossValue, witm: &LossValue, alpha: f64) -> Result<LossValue> {
    blend(wds, witm, alpha)
}

/// Entropy of `softmax(logits)`, in nats.
pub fn teacher_uncertainty(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    let lse = log_sum_exp(logits);
    let u: f64 = -logits
        .iter()
        .map(|z| {
            let log_p = z - lse;
            log_p.exp() * log_p
        })
        .sum::<f64>();
    Ok(u.clamp(0.0, (logits.len() as f64).ln()))
}

/// Entropies below this are treated as this, keeping every weight positive
/// when a distribution saturates to one-hot in floating point.
pub const UNCERTAINTY_FLOOR: f64 = 1e-12;

/// `w_i = u_i / Σ_j u_j`. All-zero uncertainties give uniform weights.
pub fn hard_label_weights(uncertainties: &[f64]) -> Result<WeightVector> {
    non_empty(uncertainties)?;
    if let Some(u) = uncertainties
        .iter()
        .find(|u| !(u.is_finite() && **u >= 0.0))
    {
        return Err(Error::Numeric(format!(
            "uncertainty must be finite and non-negative, got {u}"
        )));
    }
    if uncertainties.iter().all(|&u| u == 0.0) {
        return WeightVector::uniform(WeightKind::Hard, uncertainties.len());
    }
    let floored: Vec<f64> = uncertainties
        .iter()
        .map(|u| u.max(UNCERTAINTY_FLOOR))
        .collect();
    let total: f64 = floored.iter().sum();
    WeightVector::new(
        WeightKind::Hard,
        floored.iter().map(|u| u / total).collect(),
    )
}

/// `c_i = exp((1 − w_i)²) / Σ_j exp((1 − w_j)²)`: queries with larger hard
/// weight get smaller soft weight.
pub fn soft_label_weights(hard: &WeightVector) -> Result<WeightVector> {
    let exponents: Vec<f64> = hard
        .as_slice()
        .iter()
        .map(|w| (1.0 - w) * (1.0 - w))
        .collect();
    WeightVector::new(WeightKind::Soft, stable_softmax(&exponents, 1.0)?)
}

/// `−Σ_i w_i · log softmax(s_i)[0]`.
pub fn witm_loss(batch: &[Vec<f64>], weights: &WeightVector) -> Result<LossValue> {
    Ok(witm_loss_with_grad(batch, weights)?.loss)
}

pub fn witm_loss_with_grad(batch: &[Vec<f64>], weights: &WeightVector) -> Result<LossWithGrad> {
    check_weights(weights, batch.len())?;
    let mut ce = cross_entropy_batch(batch)?;
    for ((term, grad), &w) in ce
        .loss
        .per_query_terms
        .iter_mut()
        .zip(&mut ce.grad)
        .zip(weights.as_slice())
    {
        *term *= w;
        grad.iter_mut().for_each(|g| *g *= w);
    }
    Ok(LossWithGrad {
        loss: LossValue::from_terms(ce.loss.per_query_terms),
        grad: ce.grad,
    })
}

/// `Σ_i c_i · ‖z_i(student) − z_i(teacher)‖²`.
pub fn wds_loss(pairs: &[DistillPair], weights: &WeightVector) -> Result<LossValue> {
    Ok(wds_loss_with_grad(pairs, weights)?.loss)
}

pub fn wds_loss_with_grad(pairs: &[DistillPair], weights: &WeightVector) -> Result<LossWithGrad> {
    check_weights(weights, pairs.len())?;
    let mut mse = mse_distill_loss_with_grad(pairs)?;
    for ((term, grad), &c) in mse
        .loss
        .per_query_terms
        .iter_mut()
        .zip(&mut mse.grad)
        .zip(weights.as_slice())
    {
        *term *= c;
        grad.iter_mut().for_each(|g| *g *= c);
    }
    Ok(LossWithGrad {
        loss: LossValue::from_terms(mse.loss.per_query_terms),
        grad: mse.grad,
    })
}
