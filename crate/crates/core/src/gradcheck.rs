//! Analytic-versus-numeric gradient checks for every loss and for the full
//! student graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{batch_iterator, synthesize, DatasetManifest};
use crate::error::Result;
use crate::losses::{
    blend_grads, dcd_objective, hard_label_weights, itm_hard_loss_with_grad, itm_loss_with_grad,
    kl_distill_loss_with_grad, mse_distill_loss_with_grad, nce_loss_with_grad, soft_label_weights,
    vanilla_kd_objective, wds_loss_with_grad, witm_loss_with_grad, DistillPair, LossWithGrad,
};
use crate::mining::{BatchView, CandidateList, Direction};
use crate::model::{init_scorer, ScorerConfig};
use crate::seed::derive_seed;
use crate::tensor::{finite_diff_grad, Matrix};
use crate::train::{batch_objective, Regime, TrainConfig};

/// Names of the checks, in report order.
pub const CHECKS: [&str; 10] = [
    "nce",
    "itm",
    "itm_hard",
    "kl_distill",
    "mse_distill",
    "vanilla_kd",
    "witm",
    "wds",
    "dcd_objective",
    "student_graph",
];

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub instances: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Test hook: scale the analytic gradient of this check by 1.01.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            instances: 20,
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub instances: usize,
    /// Largest `max|a − n| / max(max|a|, max|n|)` over the instances.
    pub worst_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !e.passed)
            .map(|e| e.name.as_str())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("tolerance={:e}\n", self.tolerance);
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\tinstances={}\tworst_rel_error={:.3e}\n",
                if e.passed { "PASS" } else { "FAIL" },
                e.name,
                e.instances,
                e.worst_rel_error
            ));
        }
        out
    }
}

/// Relative error between two gradients, normalized by the larger of the
/// two max-norms.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sd * z
}

fn logit_batch(rng: &mut ChaCha8Rng, len: Option<usize>) -> Vec<Vec<f64>> {
    let k = rng.random_range(1..=4);
    let n = len.unwrap_or_else(|| rng.random_range(2..=9));
    (0..k)
        .map(|_| (0..n).map(|_| normal(rng, 2.0)).collect())
        .collect()
}

fn flatten(batch: &[Vec<f64>]) -> Matrix {
    Matrix::row_vector(batch.iter().flatten().copied().collect())
}

fn unflatten(m: &Matrix, like: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut at = 0;
    like.iter()
        .map(|v| {
            let s = m.as_slice()[at..at + v.len()].to_vec();
            at += v.len();
            s
        })
        .collect()
}

fn dummy_lists(batch: &[Vec<f64>]) -> Vec<CandidateList> {
    batch
        .iter()
        .map(|s| CandidateList {
            direction: Direction::ImageToText,
            query_id: 0,
            positive_key_id: 0,
            negative_key_ids: (1..s.len() as u64).collect(),
            key_positions: (0..s.len()).collect(),
            teacher_logits_raw: vec![0.0; s.len()],
            teacher_logits_adjusted: vec![0.0; s.len()],
            selection_provenance: (0..s.len() - 1).collect(),
        })
        .collect()
}

/// A loss of student logits with its analytic gradient.
type LogitLoss = Box<dyn Fn(&[Vec<f64>]) -> Result<LossWithGrad>>;

/// Builds one random instance of the named logit-level loss: the student
/// logits and the closure evaluating it.
fn logit_instance(name: &str, rng: &mut ChaCha8Rng) -> Result<(Vec<Vec<f64>>, LogitLoss)> {
    let pairs_for = |student: &[Vec<f64>], teacher: &[Vec<f64>]| -> Result<Vec<DistillPair>> {
        student
            .iter()
            .zip(teacher)
            .map(|(s, t)| DistillPair::new(s.clone(), t.clone()))
            .collect()
    };
    let student = logit_batch(rng, if name == "itm" { Some(2) } else { None });
    let teacher: Vec<Vec<f64>> = student
        .iter()
        .map(|s| s.iter().map(|_| normal(rng, 3.0)).collect())
        .collect();
    let alpha: f64 = rng.random();
    let tau = rng.random_range(0.5..4.0);
    let u: Vec<f64> = student
        .iter()
        .map(|_| rng.random_range(0.01..2.0))
        .collect();
    let w = hard_label_weights(&u)?;
    let c = soft_label_weights(&w)?;
    let f: LogitLoss = match name {
        "nce" => Box::new(nce_loss_with_grad),
        "itm" => Box::new(itm_loss_with_grad),
        "itm_hard" => Box::new(|s| itm_hard_loss_with_grad(&dummy_lists(s), s)),
        "kl_distill" => Box::new(move |s| kl_distill_loss_with_grad(&pairs_for(s, &teacher)?, tau)),
        "mse_distill" => Box::new(move |s| mse_distill_loss_with_grad(&pairs_for(s, &teacher)?)),
        "vanilla_kd" => Box::new(move |s| {
            let mse = mse_distill_loss_with_grad(&pairs_for(s, &teacher)?)?;
            let task = itm_hard_loss_with_grad(&dummy_lists(s), s)?;
            Ok(LossWithGrad {
                loss: vanilla_kd_objective(&mse.loss, &task.loss, alpha)?,
                grad: blend_grads(&mse.grad, &task.grad, alpha),
            })
        }),
        "witm" => Box::new(move |s| witm_loss_with_grad(s, &w)),
        "wds" => Box::new(move |s| wds_loss_with_grad(&pairs_for(s, &teacher)?, &c)),
        "dcd_objective" => Box::new(move |s| {
            let wds = wds_loss_with_grad(&pairs_for(s, &teacher)?, &c)?;
            let witm = witm_loss_with_grad(s, &w)?;
            Ok(LossWithGrad {
                loss: dcd_objective(&wds.loss, &witm.loss, alpha)?,
                grad: blend_grads(&wds.grad, &witm.grad, alpha),
            })
        }),
        other => unreachable!("no logit-level check named {other}"),
    };
    Ok((student, f))
}

fn check_logit_loss(name: &str, opts: &GradCheckOptions) -> Result<GradCheckEntry> {
    let mut worst = 0.0f64;
    let corrupt = if opts.corrupt.as_deref() == Some(name) {
        1.01
    } else {
        1.0
    };
    for i in 0..opts.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, i as u64));
        let (student, f) = logit_instance(name, &mut rng)?;
        let analytic: Vec<f64> = f(&student)?
            .grad
            .into_iter()
            .flatten()
            .map(|g| g * corrupt)
            .collect();
        let numeric = finite_diff_grad(
            |m| f(&unflatten(m, &student)).map_or(f64::NAN, |l| l.loss.value),
            &flatten(&student),
            STEP,
        )?;
        worst = worst.max(relative_error(&analytic, numeric.as_slice()));
    }
    Ok(entry(name, opts, worst))
}

fn entry(name: &str, opts: &GradCheckOptions, worst: f64) -> GradCheckEntry {
    GradCheckEntry {
        name: name.to_string(),
        instances: opts.instances,
        worst_rel_error: worst,
        passed: worst < opts.tolerance,
    }
}

/// Full DCD batch objective against every student weight and bias, on a
/// small synthetic batch with an untrained teacher.
fn check_student_graph(opts: &GradCheckOptions) -> Result<GradCheckEntry> {
    let corrupt = if opts.corrupt.as_deref() == Some("student_graph") {
        1.01
    } else {
        1.0
    };
    let ds = synthesize(&DatasetManifest {
        captions_per_image: 2,
        image_dim: 5,
        text_dim: 4,
        latent_dim: 3,
        noise_sigma: 0.2,
        train_images: 24,
        val_images: 1,
        test_images: 1,
        seed: opts.seed,
    })?;
    let mut worst = 0.0f64;
    for i in 0..opts.instances {
        let seed = derive_seed(opts.seed, 1000 + i as u64);
        let config = TrainConfig {
            m: 6,
            m_prime: 3,
            batch_size: 16,
            hidden: vec![6, 5],
            seed,
            ..TrainConfig::student(Regime::Dcd)
        };
        let teacher = init_scorer(&ScorerConfig {
            hidden: vec![7, 7],
            seed: seed ^ 1,
            ..ScorerConfig::teacher(5, 4)
        })?;
        let student = init_scorer(&config.scorer_config(5, 4))?;
        let batch = &batch_iterator(&ds.train, 16, seed, 0)?[0];
        let view = BatchView::new(&ds.train, batch);
        let out = batch_objective(&student, Some(&teacher), &view, &config, seed)?;
        for (l, grads) in out.grads.iter().enumerate() {
            for bias in [false, true] {
                let base = if bias {
                    &student.layers[l].bias
                } else {
                    &student.layers[l].weights
                };
                let numeric = finite_diff_grad(
                    |m| {
                        let mut s = student.clone();
                        if bias {
                            s.layers[l].bias = m.clone();
                        } else {
                            s.layers[l].weights = m.clone();
                        }
                        batch_objective(&s, Some(&teacher), &view, &config, seed)
                            .map_or(f64::NAN, |o| o.combined)
                    },
                    base,
                    STEP,
                )?;
                let g = if bias { &grads.bias } else { &grads.weights };
                let analytic: Vec<f64> = g.as_slice().iter().map(|v| v * corrupt).collect();
                worst = worst.max(relative_error(&analytic, numeric.as_slice()));
            }
        }
    }
    Ok(entry("student_graph", opts, worst))
}

pub fn run_gradchecks(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut entries = Vec::with_capacity(CHECKS.len());
    for name in CHECKS {
        entries.push(if name == "student_graph" {
            check_student_graph(opts)?
        } else {
            check_logit_loss(name, opts)?
        });
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        entries,
    })
}
