//! Teacher pretraining and student training under every regime, with
//! seeded, resumable runs.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iterator, Dataset, Split};
use crate::error::{Divergence, Error, Result};
use crate::eval::{evaluate_retrieval, RetrievalMetrics};
use crate::kv::{format_list, parse_list, KvDoc};
use crate::losses::{
    dcd_objective, hard_label_weights, kl_distill_loss_with_grad, mse_distill_loss_with_grad,
    nce_loss_with_grad, soft_label_weights, teacher_uncertainty, vanilla_kd_objective,
    wds_loss_with_grad, witm_loss_with_grad, DistillPair, LossValue, LossWithGrad, WeightVector,
};
use crate::mining::{
    build_candidate_lists, random_candidates, BatchView, CandidateScorer, Direction, MiningConfig,
    MiningSteps, ScoreTable,
};
use crate::model::{
    init_scorer, load_checkpoint, save_checkpoint, Role, ScorerConfig, ScorerParams,
    STUDENT_HIDDEN, TEACHER_HIDDEN,
};
use crate::seed::{derive_seed, derive_seed_path};
use crate::tensor::{Activation, DenseLayer, GradTape, Matrix};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

const INIT_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const NEGATIVE_STREAM: u64 = 3;

/// Which loss graph trains the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Matching loss on random negatives; no teacher.
    Finetune,
    /// MSE to raw teacher logits plus the matching loss, random negatives.
    VanillaKd,
    /// Mined candidates, adjusted targets, both uncertainty weightings.
    Dcd,
    /// DCD with its three components switched independently.
    Ablation { ds_ka: bool, hw: bool, sw: bool },
}

/// Component switches of a teacher-guided regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    /// Teacher selection of hard negatives plus knowledge adjustment.
    pub ds_ka: bool,
    /// Uncertainty weights on the hard-label term.
    pub hw: bool,
    /// Reversed weights on the soft-label term.
    pub sw: bool,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Finetune => "finetune",
            Regime::VanillaKd => "vanilla_kd",
            Regime::Dcd => "dcd",
            Regime::Ablation { .. } => "ablation",
        }
    }

    /// `None` for the teacher-free regime.
    pub fn components(self) -> Option<Components> {
        match self {
            Regime::Finetune => None,
            Regime::VanillaKd => Some(Components {
                ds_ka: false,
                hw: false,
                sw: false,
            }),
            Regime::Dcd => Some(Components {
                ds_ka: true,
                hw: true,
                sw: true,
            }),
            Regime::Ablation { ds_ka, hw, sw } => Some(Components { ds_ka, hw, sw }),
        }
    }

    pub fn needs_teacher(self) -> bool {
        self.components().is_some()
    }

    pub fn validate(self) -> Result<()> {
        if let Regime::Ablation {
            ds_ka: false,
            hw,
            sw,
        } = self
        {
            if hw || sw {
                return Err(Error::Config(
                    "ablation flags hw and sw require ds_ka".into(),
                ));
            }
        }
        Ok(())
    }

    /// Rows of the ablation table, in order.
    pub const LADDER: [(&'static str, Regime); 5] = [
        ("vanilla", Regime::VanillaKd),
        (
            "ds_ka",
            Regime::Ablation {
                ds_ka: true,
                hw: false,
                sw: false,
            },
        ),
        (
            "ds_ka+hw",
            Regime::Ablation {
                ds_ka: true,
                hw: true,
                sw: false,
            },
        ),
        (
            "ds_ka+sw",
            Regime::Ablation {
                ds_ka: true,
                hw: false,
                sw: true,
            },
        ),
        ("full", Regime::Dcd),
    ];
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Ablation { ds_ka, hw, sw } => {
                write!(f, "ablation(ds_ka={ds_ka},hw={hw},sw={sw})")
            }
            r => f.write_str(r.name()),
        }
    }
}

/// Whose logits the per-query uncertainty is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UncertaintySource {
    Teacher,
    /// Diagnostic variant: the student's own candidate logits.
    Student,
}

/// Unweighted soft-label term of the teacher-guided regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistillKind {
    Mse,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub role: Role,
    pub regime: Regime,
    pub alpha: f64,
    pub tau: f64,
    pub m: usize,
    pub m_prime: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub uncertainty: UncertaintySource,
    pub distill: DistillKind,
    /// Score the whole training split with the teacher once instead of
    /// batch by batch. Values are identical; only the cost moves.
    pub teacher_cache: bool,
}

/// Every key [`TrainConfig::set`] accepts.
pub const CONFIG_KEYS: [&str; 21] = [
    "role",
    "regime",
    "ds_ka",
    "hw",
    "sw",
    "alpha",
    "tau",
    "m",
    "m_prime",
    "batch_size",
    "epochs",
    "seed",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "hidden",
    "activation",
    "uncertainty",
    "distill",
    "teacher_cache",
];

impl TrainConfig {
    pub fn teacher() -> Self {
        TrainConfig {
            role: Role::Teacher,
            regime: Regime::Finetune,
            alpha: 0.5,
            tau: 1.0,
            m: 63,
            m_prime: 7,
            batch_size: 128,
            epochs: 30,
            seed: 0,
            adam: AdamConfig::default(),
            hidden: TEACHER_HIDDEN.to_vec(),
            activation: Activation::Tanh,
            uncertainty: UncertaintySource::Teacher,
            distill: DistillKind::Mse,
            teacher_cache: true,
        }
    }

    pub fn student(regime: Regime) -> Self {
        TrainConfig {
            role: Role::Student,
            regime,
            epochs: 40,
            hidden: STUDENT_HIDDEN.to_vec(),
            ..TrainConfig::teacher()
        }
    }

    pub fn defaults_for(role: Role) -> Self {
        match role {
            Role::Teacher => TrainConfig::teacher(),
            Role::Student => TrainConfig::student(Regime::Dcd),
        }
    }

    pub fn mining(&self) -> MiningConfig {
        MiningConfig {
            m: self.m,
            m_prime: self.m_prime,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.regime.validate()?;
        if self.role == Role::Teacher && self.regime != Regime::Finetune {
            return Err(Error::Config(format!(
                "a teacher trains without a teacher; regime {} is student-only",
                self.regime
            )));
        }
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        self.mining().validate()?;
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", a.lr));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return bad(format!(
                "adam decays must lie in [0, 1), got {} and {}",
                a.beta1, a.beta2
            ));
        }
        if a.eps.is_nan() || a.eps <= 0.0 {
            return bad(format!("adam epsilon must be positive, got {}", a.eps));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!(
                "hidden layers must be non-empty and positive, got {:?}",
                self.hidden
            ));
        }
        if self.uncertainty == UncertaintySource::Student
            && self.regime.components().is_none_or(|c| !(c.hw || c.sw))
        {
            return bad("student uncertainty needs a regime with weighting".into());
        }
        Ok(())
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse {key}={value:?}")))
        }
        let flags = |r: Regime| match r {
            Regime::Ablation { ds_ka, hw, sw } => (ds_ka, hw, sw),
            _ => (false, false, false),
        };
        match key {
            "role" => {
                self.role = Role::parse(value)
                    .ok_or_else(|| Error::Config(format!("unknown role {value:?}")))?;
            }
            "regime" => {
                let (ds_ka, hw, sw) = flags(self.regime);
                self.regime = match value.trim() {
                    "finetune" => Regime::Finetune,
                    "vanilla_kd" => Regime::VanillaKd,
                    "dcd" => Regime::Dcd,
                    "ablation" => Regime::Ablation { ds_ka, hw, sw },
                    other => return Err(Error::Config(format!("unknown regime {other:?}"))),
                };
            }
            "ds_ka" | "hw" | "sw" => {
                let v: bool = parse(key, value)?;
                match &mut self.regime {
                    Regime::Ablation { ds_ka, hw, sw } => match key {
                        "ds_ka" => *ds_ka = v,
                        "hw" => *hw = v,
                        _ => *sw = v,
                    },
                    r => {
                        let implied = r.components().map(|c| match key {
                            "ds_ka" => c.ds_ka,
                            "hw" => c.hw,
                            _ => c.sw,
                        });
                        if implied != Some(v) {
                            return Err(Error::Config(format!(
                                "{key} is an ablation flag; regime {r} fixes it"
                            )));
                        }
                    }
                }
            }
            "alpha" => self.alpha = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "m_prime" => self.m_prime = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "eps" => self.adam.eps = parse(key, value)?,
            "hidden" => {
                self.hidden = parse_list(value)
                    .map_err(|_| Error::Config(format!("cannot parse hidden={value:?}")))?;
            }
            "activation" => {
                self.activation = Activation::parse(value.trim())
                    .ok_or_else(|| Error::Config(format!("unknown activation {value:?}")))?;
            }
            "uncertainty" => {
                self.uncertainty = match value.trim() {
                    "teacher" => UncertaintySource::Teacher,
                    "student" => UncertaintySource::Student,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown uncertainty source {other:?}"
                        )))
                    }
                };
            }
            "distill" => {
                self.distill = match value.trim() {
                    "mse" => DistillKind::Mse,
                    "kl" => DistillKind::Kl,
                    other => return Err(Error::Config(format!("unknown distill loss {other:?}"))),
                };
            }
            "teacher_cache" => self.teacher_cache = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown training key {other:?}"))),
        }
        Ok(())
    }

    /// Defaults for the role named in `doc` (student if absent), then every
    /// key of `doc` applied in order.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let role = match doc.get("role") {
            Some(r) => {
                Role::parse(r).ok_or_else(|| Error::Config(format!("unknown role {r:?}")))?
            }
            None => Role::Student,
        };
        let mut config = TrainConfig::defaults_for(role);
        // The regime must be known before its flags.
        if let Some(r) = doc.get("regime") {
            config.set("regime", r)?;
        }
        for (k, v) in doc.entries() {
            if k != "regime" {
                config.set(k, v)?;
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("role", self.role);
        doc.set("regime", self.regime.name());
        if let Some(c) = self.regime.components() {
            doc.set("ds_ka", c.ds_ka);
            doc.set("hw", c.hw);
            doc.set("sw", c.sw);
        }
        doc.set("alpha", self.alpha);
        doc.set("tau", self.tau);
        doc.set("m", self.m);
        doc.set("m_prime", self.m_prime);
        doc.set("batch_size", self.batch_size);
        doc.set("epochs", self.epochs);
        doc.set("seed", self.seed);
        doc.set("lr", self.adam.lr);
        doc.set("beta1", self.adam.beta1);
        doc.set("beta2", self.adam.beta2);
        doc.set("eps", self.adam.eps);
        doc.set("hidden", format_list(&self.hidden));
        doc.set("activation", self.activation);
        doc.set(
            "uncertainty",
            match self.uncertainty {
                UncertaintySource::Teacher => "teacher",
                UncertaintySource::Student => "student",
            },
        );
        doc.set(
            "distill",
            match self.distill {
                DistillKind::Mse => "mse",
                DistillKind::Kl => "kl",
            },
        );
        doc.set("teacher_cache", self.teacher_cache);
        doc
    }

    pub fn scorer_config(&self, image_dim: usize, text_dim: usize) -> ScorerConfig {
        ScorerConfig {
            role: self.role,
            image_dim,
            text_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
            seed: derive_seed(self.seed, INIT_STREAM),
        }
    }
}

/// First and second moment accumulators, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<DenseLayer>,
    pub v: Vec<DenseLayer>,
}

impl AdamState {
    pub fn new(params: &[DenseLayer]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|l| DenseLayer::zeros(l.fan_in(), l.fan_out()))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected adaptive-moment update.
pub fn optimizer_step(
    params: &mut [DenseLayer],
    grads: &[DenseLayer],
    state: &mut AdamState,
    hp: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "parameter layers",
            params.len(),
            "gradient layers",
            grads.len(),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.weights.shape() != g.weights.shape() || p.bias.shape() != g.bias.shape() {
            return Err(Error::shape(
                "parameter layer",
                format!("{:?}", p.weights.shape()),
                "gradient layer",
                format!("{:?}", g.weights.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let slots = [
            (
                p.weights.as_mut_slice(),
                g.weights.as_slice(),
                m.weights.as_mut_slice(),
                v.weights.as_mut_slice(),
            ),
            (
                p.bias.as_mut_slice(),
                g.bias.as_slice(),
                m.bias.as_mut_slice(),
                v.bias.as_mut_slice(),
            ),
        ];
        for (p, g, m, v) in slots {
            for i in 0..p.len() {
                m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
                v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
                p[i] -= hp.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + hp.eps);
            }
        }
    }
    Ok(())
}

/// Frozen teacher, with an optional whole-split score table built on first
/// use.
#[derive(Debug)]
pub struct FrozenTeacher {
    pub params: ScorerParams,
    table: OnceLock<ScoreTable>,
}

impl FrozenTeacher {
    pub fn new(params: ScorerParams) -> Self {
        FrozenTeacher {
            params,
            table: OnceLock::new(),
        }
    }

    /// Score table over `split`, which must be the same split on every call.
    pub fn table(&self, split: &Split) -> Result<&ScoreTable> {
        if self.table.get().is_none() {
            let t = ScoreTable::new(&self.params, split)?;
            let _ = self.table.set(t);
        }
        let t = self.table.get().expect("set above");
        if t.scores().shape() != (split.images.len(), split.texts.len()) {
            return Err(Error::shape(
                "cached teacher table",
                format!("{:?}", t.scores().shape()),
                "split",
                format!("{}x{}", split.images.len(), split.texts.len()),
            ));
        }
        Ok(t)
    }
}

/// Losses of one batch, summed over both directions, and the gradient of
/// `combined` with respect to every student layer.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub task: f64,
    pub distill: f64,
    pub combined: f64,
    pub grads: Vec<DenseLayer>,
    /// Hard and soft weights per direction, when a weighting is active.
    pub weights: Vec<(Option<WeightVector>, Option<WeightVector>)>,
}

struct DirectionPlan {
    keys: Vec<Vec<usize>>,
    targets: Option<Vec<Vec<f64>>>,
}

fn plan_direction<S: CandidateScorer + ?Sized>(
    teacher: Option<&S>,
    view: &BatchView,
    dir: Direction,
    config: &TrainConfig,
    batch_seed: u64,
) -> Result<DirectionPlan> {
    match (config.regime.components(), teacher) {
        (None, _) => Ok(DirectionPlan {
            keys: random_candidates(view, dir, config.m_prime, batch_seed)?,
            targets: None,
        }),
        (Some(c), Some(teacher)) => {
            let steps = if c.ds_ka {
                MiningSteps::FULL
            } else {
                MiningSteps {
                    select: false,
                    adjust: false,
                }
            };
            let lists =
                build_candidate_lists(teacher, view, dir, &config.mining(), steps, batch_seed)?;
            Ok(DirectionPlan {
                keys: lists.iter().map(|l| l.key_positions.clone()).collect(),
                targets: Some(
                    lists
                        .into_iter()
                        .map(|l| l.teacher_logits_adjusted)
                        .collect(),
                ),
            })
        }
        (Some(_), None) => Err(Error::Usage(format!(
            "regime {} needs a teacher",
            config.regime
        ))),
    }
}

fn scale(mut l: LossWithGrad, factor: f64) -> LossWithGrad {
    l.loss.value *= factor;
    l.loss.per_query_terms.iter_mut().for_each(|t| *t *= factor);
    l.grad.iter_mut().flatten().for_each(|g| *g *= factor);
    l
}

/// Task loss, distillation loss, total, gradient and the (hard, soft) weights.
type DirectionTerms = (
    LossValue,
    Option<LossValue>,
    LossValue,
    Vec<Vec<f64>>,
    (Option<WeightVector>, Option<WeightVector>),
);

/// Per-direction objective on student logits split per query.
///
/// Weighted terms are multiplied by the batch size so that weights with
/// mean one stand in for the unit weights of the unweighted sums; switching
/// a weighting off therefore leaves the other term's scale untouched.
fn direction_objective(
    student: &[Vec<f64>],
    targets: Option<&[Vec<f64>]>,
    config: &TrainConfig,
) -> Result<DirectionTerms> {
    let k = student.len() as f64;
    let (Some(c), Some(targets)) = (config.regime.components(), targets) else {
        let task = nce_loss_with_grad(student)?;
        return Ok((task.loss.clone(), None, task.loss, task.grad, (None, None)));
    };
    let hard = if c.hw || c.sw {
        let source = match config.uncertainty {
            UncertaintySource::Teacher => targets,
            UncertaintySource::Student => student,
        };
        let u: Vec<f64> = source
            .iter()
            .map(|z| teacher_uncertainty(z))
            .collect::<Result<_>>()?;
        Some(hard_label_weights(&u)?)
    } else {
        None
    };
    let soft = match (&hard, c.sw) {
        (Some(w), true) => Some(soft_label_weights(w)?),
        _ => None,
    };
    let task = match (&hard, c.hw) {
        (Some(w), true) => scale(witm_loss_with_grad(student, w)?, k),
        _ => nce_loss_with_grad(student)?,
    };
    let pairs: Vec<DistillPair> = student
        .iter()
        .zip(targets)
        .map(|(s, t)| DistillPair::new(s.clone(), t.clone()))
        .collect::<Result<_>>()?;
    let distill = match (&soft, config.distill) {
        (Some(cw), _) => scale(wds_loss_with_grad(&pairs, cw)?, k),
        (None, DistillKind::Mse) => mse_distill_loss_with_grad(&pairs)?,
        (None, DistillKind::Kl) => kl_distill_loss_with_grad(&pairs, config.tau)?,
    };
    let combined = if config.regime == Regime::VanillaKd {
        vanilla_kd_objective(&distill.loss, &task.loss, config.alpha)?
    } else {
        dcd_objective(&distill.loss, &task.loss, config.alpha)?
    };
    let a = config.alpha;
    let grad = distill
        .grad
        .iter()
        .zip(&task.grad)
        .map(|(d, t)| {
            d.iter()
                .zip(t)
                .map(|(x, y)| a * x + (1.0 - a) * y)
                .collect()
        })
        .collect();
    Ok((task.loss, Some(distill.loss), combined, grad, (hard, soft)))
}

/// Forward, loss and backward for one batch. `teacher` is required for the
/// teacher-guided regimes and ignored otherwise.
pub fn batch_objective<S: CandidateScorer + ?Sized>(
    student: &ScorerParams,
    teacher: Option<&S>,
    view: &BatchView,
    config: &TrainConfig,
    batch_seed: u64,
) -> Result<StepOutput> {
    let plans: Vec<(Direction, DirectionPlan)> = Direction::BOTH
        .iter()
        .map(|&dir| Ok((dir, plan_direction(teacher, view, dir, config, batch_seed)?)))
        .collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for (dir, plan) in &plans {
        for keys in &plan.keys {
            let q = keys[0];
            pairs.extend(keys.iter().map(|&k| view.pair(q, k, *dir)));
        }
    }
    let mut tape = GradTape::new();
    let logits = student.forward(&view.images, &view.texts, &pairs, Some(&mut tape))?;

    let mut out = StepOutput {
        task: 0.0,
        distill: 0.0,
        combined: 0.0,
        grads: Vec::new(),
        weights: Vec::new(),
    };
    let mut upstream = Vec::with_capacity(logits.len());
    let mut offset = 0;
    for (_, plan) in &plans {
        let per_query: Vec<Vec<f64>> = plan
            .keys
            .iter()
            .map(|keys| {
                let s = logits[offset..offset + keys.len()].to_vec();
                offset += keys.len();
                s
            })
            .collect();
        let (task, distill, combined, grad, weights) =
            direction_objective(&per_query, plan.targets.as_deref(), config)?;
        out.task += task.value;
        out.distill += distill.map_or(0.0, |d| d.value);
        out.combined += combined.value;
        upstream.extend(grad.into_iter().flatten());
        out.weights.push(weights);
    }
    let n = upstream.len();
    out.grads = tape.backward(&student.layers, Matrix::new(n, 1, upstream)?)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Losses averaged over the epoch's steps.
    pub task_loss: f64,
    pub distill_loss: f64,
    pub combined_loss: f64,
    pub val: RetrievalMetrics,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Combined loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<RetrievalMetrics>,
    pub wall_seconds: f64,
    pub checkpoint: Option<PathBuf>,
    /// Set when the run stopped on a divergent loss.
    pub diverged: Option<String>,
}

impl RunRecord {
    fn new(config: &TrainConfig) -> Self {
        RunRecord {
            config: config.clone(),
            epochs: Vec::new(),
            step_losses: Vec::new(),
            best_epoch: None,
            best_val: None,
            wall_seconds: 0.0,
            checkpoint: None,
            diverged: None,
        }
    }

    pub fn best_mean_r1(&self) -> f64 {
        self.best_val.map_or(0.0, |m| m.mean_r1())
    }

    pub fn final_val(&self) -> Option<RetrievalMetrics> {
        self.epochs.last().map(|e| e.val)
    }
}

/// Where a run keeps its files, and whether to continue an earlier one.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
    /// Keep a checkpoint of every epoch under `epochs/`.
    pub keep_epoch_checkpoints: bool,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    /// Parameters of the epoch with the best validation R@1.
    pub best: ScorerParams,
    pub last: ScorerParams,
    pub record: RunRecord,
}

pub fn train_teacher(
    dataset: &Dataset,
    config: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainedModel> {
    if config.role != Role::Teacher {
        return Err(Error::Config("train_teacher needs role=teacher".into()));
    }
    run::<ScorerParams>(dataset, None, config, opts)
}

pub fn train_student(
    dataset: &Dataset,
    teacher: &FrozenTeacher,
    config: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainedModel> {
    if config.role != Role::Student {
        return Err(Error::Config("train_student needs role=student".into()));
    }
    check_teacher_dims(dataset, &teacher.params)?;
    if !config.regime.needs_teacher() {
        return run::<ScorerParams>(dataset, None, config, opts);
    }
    if config.teacher_cache {
        run(dataset, Some(teacher.table(&dataset.train)?), config, opts)
    } else {
        run(dataset, Some(&teacher.params), config, opts)
    }
}

/// DCD with uncertainties taken from the student's own logits. Divergence is
/// an outcome here: the partial record is returned instead of an error.
pub fn student_uncertainty_variant(
    dataset: &Dataset,
    teacher: &FrozenTeacher,
    config: &TrainConfig,
    opts: &RunOptions,
) -> Result<RunRecord> {
    let config = TrainConfig {
        uncertainty: UncertaintySource::Student,
        ..config.clone()
    };
    match train_student(dataset, teacher, &config, opts) {
        Ok(model) => Ok(model.record),
        Err(Error::Diverged(d)) => Ok(d.record),
        Err(e) => Err(e),
    }
}

fn check_teacher_dims(dataset: &Dataset, teacher: &ScorerParams) -> Result<()> {
    let (di, dt) = (dataset.train.images.dim(), dataset.train.texts.dim());
    if teacher.config.image_dim != di || teacher.config.text_dim != dt {
        return Err(Error::shape(
            "teacher input dims",
            format!("{}+{}", teacher.config.image_dim, teacher.config.text_dim),
            "dataset dims",
            format!("{di}+{dt}"),
        ));
    }
    Ok(())
}

struct RunState {
    params: ScorerParams,
    best: ScorerParams,
    adam: AdamState,
    record: RunRecord,
}

fn run<S: CandidateScorer + ?Sized>(
    dataset: &Dataset,
    teacher: Option<&S>,
    config: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainedModel> {
    config.validate()?;
    let started = Instant::now();
    let train = &dataset.train;
    let scorer_config = config.scorer_config(train.images.dim(), train.texts.dim());

    let mut state = match &opts.out_dir {
        Some(dir) => prepare_dir(dir, config, opts.resume)?,
        None => None,
    }
    .map_or_else(
        || -> Result<RunState> {
            let params = init_scorer(&scorer_config)?;
            Ok(RunState {
                best: params.clone(),
                adam: AdamState::new(&params.layers),
                params,
                record: RunRecord::new(config),
            })
        },
        Ok,
    )?;
    state.record.config = config.clone();
    let prior_seconds = state.record.wall_seconds;

    let order_seed = derive_seed(config.seed, ORDER_STREAM);
    for epoch in state.record.epochs.len()..config.epochs {
        let epoch_start = Instant::now();
        let batches = batch_iterator(train, config.batch_size, order_seed, epoch)?;
        let (mut task, mut distill, mut combined) = (0.0, 0.0, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            let view = BatchView::new(train, batch);
            let batch_seed =
                derive_seed_path(config.seed, &[NEGATIVE_STREAM, epoch as u64, b as u64]);
            // Non-finite activations surface as numeric errors before any
            // loss exists; both end the run the same way.
            let (step, loss) =
                match batch_objective(&state.params, teacher, &view, config, batch_seed) {
                    Ok(step) => {
                        let loss = step.combined;
                        (Some(step), loss)
                    }
                    Err(Error::Numeric(_)) => (None, f64::NAN),
                    Err(e) => return Err(e),
                };
            let step = match step {
                Some(step) if loss.is_finite() && loss <= DIVERGENCE_LIMIT => step,
                _ => {
                    state.record.diverged = Some(format!("epoch {epoch} step {b}: loss {loss}"));
                    state.record.wall_seconds = prior_seconds + started.elapsed().as_secs_f64();
                    if let Some(dir) = &opts.out_dir {
                        write_record(dir, &state.record)?;
                    }
                    return Err(Error::Diverged(Box::new(Divergence {
                        epoch,
                        step: b,
                        loss,
                        record: state.record,
                    })));
                }
            };
            optimizer_step(
                &mut state.params.layers,
                &step.grads,
                &mut state.adam,
                &config.adam,
            )?;
            state.record.step_losses.push(step.combined);
            task += step.task;
            distill += step.distill;
            combined += step.combined;
        }
        let val = evaluate_retrieval(&state.params, &dataset.val)?;
        let n = batches.len() as f64;
        let rec = EpochRecord {
            epoch,
            task_loss: task / n,
            distill_loss: distill / n,
            combined_loss: combined / n,
            val,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        if state
            .record
            .best_val
            .is_none_or(|b| val.mean_r1() > b.mean_r1())
        {
            state.record.best_val = Some(val);
            state.record.best_epoch = Some(epoch);
            state.best = state.params.clone();
        }
        state.record.epochs.push(rec);
        state.record.wall_seconds = prior_seconds + started.elapsed().as_secs_f64();
        if let Some(dir) = &opts.out_dir {
            save_state(dir, &state, opts.keep_epoch_checkpoints)?;
        }
    }

    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&state.best, &dir.join("best"))?;
        save_checkpoint(&state.params, &dir.join("last"))?;
        state.record.checkpoint = Some(dir.join("best"));
        write_record(dir, &state.record)?;
    }
    Ok(TrainedModel {
        best: state.best,
        last: state.params,
        record: state.record,
    })
}

pub const CONFIG_SNAPSHOT: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RECORD_FILE: &str = "record.json";

/// Writes the snapshot, or on resume checks it and loads saved state.
fn prepare_dir(dir: &Path, config: &TrainConfig, resume: bool) -> Result<Option<RunState>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let snapshot = dir.join(CONFIG_SNAPSHOT);
    let state_dir = dir.join("state");
    if resume && state_dir.join("state.txt").exists() {
        // A resumed run may extend the epoch budget; nothing else may change.
        let saved = TrainConfig {
            epochs: config.epochs,
            ..TrainConfig::from_kv(&KvDoc::read(&snapshot)?)?
        };
        if &saved != config {
            return Err(Error::Config(format!(
                "cannot resume {}: config differs from its snapshot",
                dir.display()
            )));
        }
        config.to_kv().write(&snapshot)?;
        let state = load_state(dir)?;
        if state.record.epochs.len() > config.epochs {
            return Err(Error::Config(format!(
                "cannot resume {}: it already ran {} epochs, more than the {} requested",
                dir.display(),
                state.record.epochs.len(),
                config.epochs
            )));
        }
        return Ok(Some(state));
    }
    config.to_kv().write(&snapshot)?;
    let metrics = dir.join(METRICS_FILE);
    fs::write(&metrics, "").map_err(|e| Error::io(&metrics, e))?;
    Ok(None)
}

fn save_state(dir: &Path, state: &RunState, keep_epochs: bool) -> Result<()> {
    let epoch = state.record.epochs.last().expect("saved after an epoch");
    let metrics = dir.join(METRICS_FILE);
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&metrics)
        .map_err(|e| Error::io(&metrics, e))?;
    let line = serde_json::to_string(epoch).map_err(|e| Error::Numeric(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(&metrics, e))?;

    // Written to a staging directory and swapped in, so an interrupted save
    // leaves the previous state intact.
    let staging = dir.join("state.partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    save_checkpoint(&state.params, &staging.join("params"))?;
    save_checkpoint(&state.best, &staging.join("best"))?;
    let moments = |layers: &[DenseLayer]| ScorerParams {
        config: state.params.config.clone(),
        layers: layers.to_vec(),
    };
    save_checkpoint(&moments(&state.adam.m), &staging.join("adam_m"))?;
    save_checkpoint(&moments(&state.adam.v), &staging.join("adam_v"))?;
    let mut doc = KvDoc::new();
    doc.set("adam_step", state.adam.step);
    doc.set("epochs_done", state.record.epochs.len());
    doc.write(&staging.join("state.txt"))?;
    let record = staging.join(RECORD_FILE);
    fs::write(
        &record,
        serde_json::to_vec(&state.record).map_err(|e| Error::Numeric(e.to_string()))?,
    )
    .map_err(|e| Error::io(&record, e))?;
    let live = dir.join("state");
    if live.exists() {
        fs::remove_dir_all(&live).map_err(|e| Error::io(&live, e))?;
    }
    fs::rename(&staging, &live).map_err(|e| Error::io(&live, e))?;
    write_record(dir, &state.record)?;
    if keep_epochs {
        save_checkpoint(
            &state.params,
            &dir.join("epochs").join(format!("epoch_{:03}", epoch.epoch)),
        )?;
    }
    Ok(())
}

fn load_state(dir: &Path) -> Result<RunState> {
    let s = dir.join("state");
    let doc = KvDoc::read(&s.join("state.txt"))?;
    let record_path = s.join(RECORD_FILE);
    let bytes = fs::read(&record_path).map_err(|e| Error::io(&record_path, e))?;
    let record: RunRecord = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(&record_path, e.column() as u64, e.to_string()))?;
    let epochs_done: usize = doc.parse_value("epochs_done")?;
    if record.epochs.len() != epochs_done {
        return Err(Error::format(
            s.join("state.txt"),
            0,
            format!(
                "state says {epochs_done} epochs, record has {}",
                record.epochs.len()
            ),
        ));
    }
    Ok(RunState {
        params: load_checkpoint(&s.join("params"))?,
        best: load_checkpoint(&s.join("best"))?,
        adam: AdamState {
            step: doc.parse_value("adam_step")?,
            m: load_checkpoint(&s.join("adam_m"))?.layers,
            v: load_checkpoint(&s.join("adam_v"))?.layers,
        },
        record,
    })
}

pub fn write_record(dir: &Path, record: &RunRecord) -> Result<()> {
    let path = dir.join(RECORD_FILE);
    let text = serde_json::to_string_pretty(record).map_err(|e| Error::Numeric(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_record(dir: &Path) -> Result<RunRecord> {
    let path = dir.join(RECORD_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(&path, e.column() as u64, e.to_string()))
}
