//! Acceptance suite: one PASS/FAIL line per criterion. Pass criterion
//! numbers as arguments to run a subset, e.g.
//! `cargo test -p dcd-cli --test acceptance -- 1 2 3`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use dcd_core::data::{synthesize, DatasetManifest};
use dcd_core::eval::{evaluate_retrieval, separability_point, PairScorer, SeparabilityPoint};
use dcd_core::experiment::{seed_list, sweep_mm, PAPER_MM_GRID};
use dcd_core::gradcheck::{run_gradchecks, GradCheckOptions, CHECKS};
use dcd_core::losses::{
    dcd_objective, hard_label_weights, itm_hard_loss, itm_loss, kl_distill_loss, mse_distill_loss,
    nce_loss, soft_label_weights, teacher_uncertainty, vanilla_kd_objective, wds_loss, witm_loss,
    WeightKind,
};
use dcd_core::mining::{knowledge_adjust, select_hard_negatives};
use dcd_core::model::init_scorer;
use dcd_core::tensor::{dense_forward, finite_diff_grad, stable_softmax, DenseLayer};
use dcd_core::train::{
    optimizer_step, train_student, train_teacher, AdamConfig, AdamState, FrozenTeacher, RunOptions,
};
use dcd_core::{
    CandidateList, Dataset, Direction, DistillPair, LossValue, Matrix, Regime, ScorerConfig,
    ScorerParams, TrainConfig, WeightVector,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Scale of the training criteria.
const TRAIN_IMAGES: usize = 400;
const VAL_IMAGES: usize = 100;
const TEST_IMAGES: usize = 60;
const BATCH: usize = 128;
const TEACHER_EPOCHS: usize = 40;
const STUDENT_EPOCHS: usize = 40;
const SWEEP_EPOCHS: usize = 30;
const SEEDS: usize = 5;

// Tolerances.
const GRAD_TOL: f64 = 1e-4;
const POINT_TOL: f64 = 1e-6;
const WEIGHT_SUM_TOL: f64 = 1e-9;
const WITM_TOL: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-10;
const TREND_MARGIN: f64 = 0.5;
const POSITIVE_GAP: f64 = 0.05;
const MC_SIGMAS: f64 = 4.0;

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure(
        (got - want).abs() <= tol,
        format!("{name}: got {got:.9}, want {want:.9} ± {tol:e}"),
    )
}

fn close_all(name: &str, got: &[f64], want: &[f64], tol: f64) -> Result<(), String> {
    ensure(
        got.len() == want.len(),
        format!("{name}: length {} vs {}", got.len(), want.len()),
    )?;
    for (g, w) in got.iter().zip(want) {
        close(name, *g, *w, tol)?;
    }
    Ok(())
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    let report = run_gradchecks(&GradCheckOptions {
        instances: 20,
        tolerance: GRAD_TOL,
        ..GradCheckOptions::default()
    })
    .map_err(e)?;
    for name in [
        "nce",
        "itm",
        "itm_hard",
        "kl_distill",
        "mse_distill",
        "witm",
        "wds",
        "dcd_objective",
        "student_graph",
    ] {
        let entry = report.entries.iter().find(|x| x.name == name);
        ensure(
            entry.is_some_and(|x| x.instances >= 20),
            format!("{name} not checked on 20 instances"),
        )?;
    }
    let worst = report
        .entries
        .iter()
        .map(|x| x.worst_rel_error)
        .fold(0.0, f64::max);
    ensure(
        report.passed(),
        format!("failing: {}", report.failures().join(", ")),
    )?;
    Ok(format!(
        "{} checks, worst relative error {worst:.2e}",
        CHECKS.len()
    ))
}

// ---------------------------------------------------------------- 2

fn lv(v: f64) -> LossValue {
    LossValue {
        value: v,
        per_query_terms: vec![v],
    }
}

fn cands(n: usize) -> CandidateList {
    CandidateList {
        direction: Direction::ImageToText,
        query_id: 0,
        positive_key_id: 0,
        negative_key_ids: (1..n as u64).collect(),
        key_positions: (0..n).collect(),
        teacher_logits_raw: vec![0.0; n],
        teacher_logits_adjusted: vec![0.0; n],
        selection_provenance: (0..n - 1).collect(),
    }
}

fn point_checks() -> Outcome {
    let mut n = 0;
    let mut c = |r: Result<(), String>| -> Result<(), String> {
        n += 1;
        r
    };
    let m = |rows: &[&[f64]]| {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    };

    let out = dense_forward(
        &m(&[&[1.0, 1.0]]),
        &m(&[&[1.0, 2.0], &[3.0, 4.0]]),
        &m(&[&[0.0, 0.0]]),
    )
    .map_err(e)?;
    c(close_all(
        "dense hand multiply",
        out.as_slice(),
        &[4.0, 6.0],
        POINT_TOL,
    ))?;
    let out = dense_forward(
        &m(&[&[1.0, 2.0]]),
        &m(&[&[1.0, 0.0], &[0.0, 1.0]]),
        &m(&[&[0.0, 0.0]]),
    )
    .map_err(e)?;
    c(close_all(
        "dense identity",
        out.as_slice(),
        &[1.0, 2.0],
        0.0,
    ))?;

    c(close_all(
        "softmax τ=2",
        &stable_softmax(&[2.0, 0.0], 2.0).map_err(e)?,
        &[0.7311, 0.2689],
        1e-4,
    ))?;
    c(close_all(
        "softmax shift",
        &stable_softmax(&[-41.5, -41.5 + 3f64.ln()], 1.0).map_err(e)?,
        &[0.25, 0.75],
        1e-12,
    ))?;
    c(close_all(
        "softmax uniform",
        &stable_softmax(&[0.0; 4], 1.0).map_err(e)?,
        &[0.25; 4],
        0.0,
    ))?;

    let g = finite_diff_grad(
        |t| t.as_slice().iter().map(|x| x * x).sum(),
        &m(&[&[1.0, -2.0]]),
        1e-5,
    )
    .map_err(e)?;
    c(close_all(
        "finite diff Σθ²",
        g.as_slice(),
        &[2.0, -4.0],
        POINT_TOL,
    ))?;
    let g = finite_diff_grad(|t| t.get(0, 0) * t.get(0, 1), &m(&[&[3.0, 5.0]]), 1e-5).map_err(e)?;
    c(close_all(
        "finite diff θ0θ1",
        g.as_slice(),
        &[5.0, 3.0],
        POINT_TOL,
    ))?;

    c(ensure(
        select_hard_negatives(&[0.1, 0.9, 0.5, 0.3], 2) == [1, 2],
        "selection example",
    ))?;
    c(ensure(
        select_hard_negatives(&[0.4; 4], 2) == [0, 1],
        "selection tie-break",
    ))?;
    c(ensure(
        knowledge_adjust(&[0.2, 0.9, 0.5, 0.1]) == [0.9, 0.5, 0.2, 0.1],
        "adjustment example",
    ))?;
    c(ensure(
        knowledge_adjust(&[0.9, 0.2, 0.5]) == [0.9, 0.2, 0.5],
        "adjustment fixed point",
    ))?;

    c(close(
        "nce uniform n=5",
        nce_loss(&[vec![0.7; 5]]).map_err(e)?.value,
        5f64.ln(),
        POINT_TOL,
    ))?;
    c(close(
        "nce saturated",
        nce_loss(&[vec![30.0, 0.0, 0.0]]).map_err(e)?.value,
        0.0,
        1e-12,
    ))?;
    c(close(
        "itm margin 2",
        itm_loss(&[vec![2.0, 0.0]]).map_err(e)?.value,
        0.126928,
        POINT_TOL,
    ))?;
    c(close(
        "itm margin 0",
        itm_loss(&[vec![1.0, 1.0]]).map_err(e)?.value,
        std::f64::consts::LN_2,
        POINT_TOL,
    ))?;
    c(close(
        "itm margin -2",
        itm_loss(&[vec![0.0, 2.0]]).map_err(e)?.value,
        2.126928,
        POINT_TOL,
    ))?;
    c(close(
        "itm_hard uniform 8",
        itm_hard_loss(&[cands(8)], &[vec![0.3; 8]])
            .map_err(e)?
            .value,
        2.079442,
        POINT_TOL,
    ))?;
    c(close(
        "itm_hard [1,0,0,0]",
        itm_hard_loss(&[cands(4)], &[vec![1.0, 0.0, 0.0, 0.0]])
            .map_err(e)?
            .value,
        (1.0 + 3.0 / 1f64.exp()).ln(),
        POINT_TOL,
    ))?;

    let pair = |s: &[f64], t: &[f64]| DistillPair::new(s.to_vec(), t.to_vec()).unwrap();
    c(close(
        "kl example",
        kl_distill_loss(&[pair(&[0.0, 0.0], &[3f64.ln(), 0.0])], 1.0)
            .map_err(e)?
            .value,
        0.130812,
        POINT_TOL,
    ))?;
    c(close(
        "kl identical",
        kl_distill_loss(&[pair(&[1.0, 2.0], &[1.0, 2.0])], 3.0)
            .map_err(e)?
            .value,
        0.0,
        0.0,
    ))?;
    c(close(
        "mse example",
        mse_distill_loss(&[pair(&[3.0, 0.0, 1.0], &[1.0, 1.0, 1.0])])
            .map_err(e)?
            .value,
        5.0,
        0.0,
    ))?;
    c(close(
        "mse unit",
        mse_distill_loss(&[pair(&[1.0, -1.0], &[0.0, 0.0])])
            .map_err(e)?
            .value,
        2.0,
        0.0,
    ))?;

    c(close(
        "vanilla α=0.5",
        vanilla_kd_objective(&lv(4.0), &lv(2.0), 0.5)
            .map_err(e)?
            .value,
        3.0,
        0.0,
    ))?;
    c(close(
        "vanilla α=0",
        vanilla_kd_objective(&lv(4.0), &lv(2.0), 0.0)
            .map_err(e)?
            .value,
        2.0,
        0.0,
    ))?;
    c(close(
        "vanilla α=1",
        vanilla_kd_objective(&lv(4.0), &lv(2.0), 1.0)
            .map_err(e)?
            .value,
        4.0,
        0.0,
    ))?;

    c(close(
        "entropy uniform 8",
        teacher_uncertainty(&[0.0; 8]).map_err(e)?,
        2.079442,
        POINT_TOL,
    ))?;
    c(ensure(
        teacher_uncertainty(&[30.0, 0.0, 0.0]).map_err(e)? < 1e-9,
        "entropy near one-hot",
    ))?;
    c(close(
        "entropy [0.9,0.1]",
        teacher_uncertainty(&[9f64.ln(), 0.0]).map_err(e)?,
        0.325083,
        POINT_TOL,
    ))?;

    c(close_all(
        "w for u=[1,1,2]",
        hard_label_weights(&[1.0, 1.0, 2.0]).map_err(e)?.as_slice(),
        &[0.25, 0.25, 0.5],
        1e-15,
    ))?;
    c(close_all(
        "w for u=[0.2,0.8]",
        hard_label_weights(&[0.2, 0.8]).map_err(e)?.as_slice(),
        &[0.2, 0.8],
        1e-15,
    ))?;
    let w = WeightVector::new(WeightKind::Hard, vec![0.2, 0.8]).map_err(e)?;
    c(close_all(
        "c for w=[0.2,0.8]",
        soft_label_weights(&w).map_err(e)?.as_slice(),
        &[0.645656, 0.354344],
        POINT_TOL,
    ))?;
    let u = WeightVector::uniform(WeightKind::Hard, 4).map_err(e)?;
    c(close_all(
        "c for uniform w",
        soft_label_weights(&u).map_err(e)?.as_slice(),
        &[0.25; 4],
        1e-15,
    ))?;

    let w = WeightVector::new(WeightKind::Hard, vec![0.25, 0.75]).map_err(e)?;
    let want = 0.25 * 2f64.ln() + 0.75 * (1.0 + (-2f64).exp()).ln();
    c(close(
        "witm example",
        witm_loss(&[vec![0.0, 0.0], vec![2.0, 0.0]], &w)
            .map_err(e)?
            .value,
        want,
        POINT_TOL,
    ))?;
    let cw = WeightVector::new(WeightKind::Soft, vec![0.6, 0.4]).map_err(e)?;
    let pairs = [
        pair(&[1.0, -1.0], &[0.0, 0.0]),
        pair(&[2.0, 1.0], &[0.0, 0.0]),
    ];
    c(close(
        "wds example",
        wds_loss(&pairs, &cw).map_err(e)?.value,
        3.2,
        1e-12,
    ))?;
    c(close(
        "dcd example",
        dcd_objective(&lv(3.2), &lv(0.268531), 0.5)
            .map_err(e)?
            .value,
        1.734266,
        POINT_TOL,
    ))?;

    let layer = |v: f64| {
        vec![DenseLayer {
            weights: Matrix::new(1, 1, vec![v]).unwrap(),
            bias: Matrix::zeros(1, 1),
        }]
    };
    let mut p = layer(0.0);
    let mut st = AdamState::new(&p);
    let hp = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    optimizer_step(&mut p, &layer(1.0), &mut st, &hp).map_err(e)?;
    c(close(
        "adam first step",
        p[0].weights.get(0, 0),
        -0.1,
        POINT_TOL,
    ))?;

    let params = init_scorer(&ScorerConfig {
        seed: 9,
        ..ScorerConfig::student(50, 50)
    })
    .map_err(e)?;
    c(ensure(
        params.layers[0]
            .weights
            .as_slice()
            .iter()
            .all(|w| w.abs() <= 0.1),
        "fan-in 100 init bound",
    ))?;
    Ok(format!("{n} point checks"))
}

// ---------------------------------------------------------------- 3

fn selection_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let len = rng.random_range(1..=64);
        let lattice = rng.random_bool(0.5);
        let s: Vec<f64> = (0..len)
            .map(|_| {
                if lattice {
                    rng.random_range(-4i32..4) as f64
                } else {
                    rng.random_range(-3.0..3.0)
                }
            })
            .collect();
        let m_prime = rng.random_range(0..=len);
        let mut idx: Vec<usize> = (0..len).collect();
        // Full sort, then truncate.
        idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        idx.truncate(m_prime);
        ensure(
            select_hard_negatives(&s, m_prime) == idx,
            format!("selection case {case}: {s:?}, M'={m_prime}"),
        )?;
    }
    for case in 0..1000 {
        let len = rng.random_range(1..=65);
        let s: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
        let a = knowledge_adjust(&s);
        let bits = |v: &[f64]| {
            let mut b: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
            b.sort_unstable();
            b
        };
        ensure(
            bits(&a) == bits(&s),
            format!("adjustment case {case} changed the multiset"),
        )?;
        let argmax = (0..len).fold(0, |best, i| if a[i] > a[best] { i } else { best });
        ensure(
            argmax == 0,
            format!("adjustment case {case}: argmax {argmax}"),
        )?;
    }
    Ok("1000 selection cases, 1000 adjustment cases".into())
}

// ---------------------------------------------------------------- 4

fn weight_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut degenerate = 0;
    for b in 0..1000 {
        let k = rng.random_range(1..=128);
        let n = rng.random_range(2..=16);
        let row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-15.0..15.0)).collect()
        };
        let u: Vec<f64> = match b % 10 {
            // Every query shares one teacher distribution.
            0 => {
                degenerate += 1;
                let z = row(&mut rng);
                vec![teacher_uncertainty(&z).map_err(e)?; k]
            }
            // Saturated teacher: every entropy is zero.
            1 => {
                degenerate += 1;
                let mut z = vec![0.0; n];
                z[0] = 1e3;
                vec![teacher_uncertainty(&z).map_err(e)?; k]
            }
            _ => (0..k)
                .map(|_| teacher_uncertainty(&row(&mut rng)))
                .collect::<Result<_, _>>()
                .map_err(e)?,
        };
        let w = hard_label_weights(&u).map_err(e)?;
        let c = soft_label_weights(&w).map_err(e)?;
        for (name, v) in [("w", &w), ("c", &c)] {
            let s = v.as_slice();
            ensure(
                s.len() == k,
                format!("batch {b}: {name} has {} entries", s.len()),
            )?;
            ensure(
                s.iter().all(|&x| x > 0.0),
                format!("batch {b}: {name} not strictly positive"),
            )?;
            let sum: f64 = s.iter().sum();
            ensure(
                (sum - 1.0).abs() <= WEIGHT_SUM_TOL,
                format!("batch {b}: {name} sums to {sum:.17}"),
            )?;
        }
    }
    Ok(format!(
        "1000 batches ({degenerate} with equal uncertainties)"
    ))
}

// ---------------------------------------------------------------- 5

fn tiny_world() -> (Dataset, FrozenTeacher) {
    let ds = synthesize(&DatasetManifest {
        captions_per_image: 3,
        image_dim: 10,
        text_dim: 8,
        latent_dim: 4,
        noise_sigma: 0.2,
        train_images: 60,
        val_images: 10,
        test_images: 10,
        seed: 5,
    })
    .unwrap();
    let tc = TrainConfig {
        batch_size: 48,
        epochs: 3,
        hidden: vec![16, 16],
        ..TrainConfig::teacher()
    };
    let teacher = train_teacher(&ds, &tc, &RunOptions::default())
        .unwrap()
        .best;
    (ds, FrozenTeacher::new(teacher))
}

fn reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..500 {
        let k = rng.random_range(1..=32);
        let batch: Vec<Vec<f64>> = (0..k)
            .map(|_| vec![rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)])
            .collect();
        let lists: Vec<CandidateList> = (0..k).map(|_| cands(2)).collect();
        let hard = itm_hard_loss(&lists, &batch).map_err(e)?.value;
        let plain = itm_loss(&batch).map_err(e)?.value;
        ensure(
            hard.to_bits() == plain.to_bits(),
            format!("case {case}: itm_hard(M'=1) {hard:e} vs itm {plain:e}"),
        )?;

        let n = rng.random_range(2..=9);
        let batch: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..n).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let lists: Vec<CandidateList> = (0..k).map(|_| cands(n)).collect();
        let hard = itm_hard_loss(&lists, &batch).map_err(e)?.value;
        let w = witm_loss(
            &batch,
            &WeightVector::uniform(WeightKind::Hard, k).map_err(e)?,
        )
        .map_err(e)?
        .value;
        ensure(
            (w - hard / k as f64).abs() <= WITM_TOL,
            format!(
                "case {case}: uniform witm {w} vs itm_hard/K {}",
                hard / k as f64
            ),
        )?;
    }

    let (ds, teacher) = tiny_world();
    let base = TrainConfig {
        batch_size: 48,
        epochs: 3,
        m: 20,
        m_prime: 4,
        hidden: vec![12],
        seed: 11,
        ..TrainConfig::student(Regime::VanillaKd)
    };
    let vanilla = train_student(&ds, &teacher, &base, &RunOptions::default())
        .map_err(e)?
        .record;
    let off = TrainConfig {
        regime: Regime::Ablation {
            ds_ka: false,
            hw: false,
            sw: false,
        },
        ..base
    };
    let ablated = train_student(&ds, &teacher, &off, &RunOptions::default())
        .map_err(e)?
        .record;
    ensure(
        vanilla.step_losses.len() == ablated.step_losses.len(),
        "trace lengths differ",
    )?;
    let worst = vanilla
        .step_losses
        .iter()
        .zip(&ablated.step_losses)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(
        worst <= TRACE_TOL,
        format!("loss traces differ by {worst:e}"),
    )?;
    Ok(format!(
        "500 bitwise/uniform cases; {} training steps agree within {worst:.1e}",
        vanilla.step_losses.len()
    ))
}

// ---------------------------------------------------------------- 6

struct Fixed(Matrix);

impl PairScorer for Fixed {
    fn score_all(&self, _: &Matrix, _: &Matrix) -> dcd_core::Result<Matrix> {
        Ok(self.0.clone())
    }
}

/// Recall by reranking: a query hits at K when fewer than K keys of other
/// groups outrank its best-placed key, smaller index winning ties.
fn brute_force(scores: &Matrix, ig: &[u64], tg: &[u64]) -> [f64; 6] {
    let recall = |queries: usize,
                  keys: usize,
                  score: &dyn Fn(usize, usize) -> f64,
                  qg: &[u64],
                  kg: &[u64]| {
        let mut hits = [0usize; 3];
        for (q, &group) in qg.iter().enumerate().take(queries) {
            let mut order: Vec<usize> = (0..keys).collect();
            order.sort_by(|&a, &b| {
                score(q, b)
                    .partial_cmp(&score(q, a))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let first = order.iter().position(|&k| kg[k] == group).unwrap();
            for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
                if first < k {
                    *h += 1;
                }
            }
        }
        hits.map(|h| 100.0 * h as f64 / queries as f64)
    };
    let t = recall(ig.len(), tg.len(), &|q, k| scores.get(q, k), ig, tg);
    let i = recall(tg.len(), ig.len(), &|q, k| scores.get(k, q), tg, ig);
    [t[0], t[1], t[2], i[0], i[1], i[2]]
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..200 {
        let images = rng.random_range(1..=50);
        let ds = synthesize(&DatasetManifest {
            captions_per_image: rng.random_range(1..=5),
            image_dim: 2,
            text_dim: 2,
            latent_dim: 1,
            noise_sigma: 0.1,
            train_images: 1,
            val_images: 1,
            test_images: images,
            seed: case,
        })
        .map_err(e)?;
        let split = &ds.test;
        let (ni, nt) = (split.images.len(), split.texts.len());
        let lattice = case % 2 == 0;
        let data = (0..ni * nt)
            .map(|_| {
                if lattice {
                    rng.random_range(0..4) as f64
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect();
        let scores = Matrix::new(ni, nt, data).map_err(e)?;
        let got = evaluate_retrieval(&Fixed(scores.clone()), split)
            .map_err(e)?
            .values();
        let want = brute_force(&scores, &split.images.groups, &split.texts.groups);
        ensure(
            got == want,
            format!("case {case}: {got:?} vs oracle {want:?}"),
        )?;
    }

    let ds = synthesize(&DatasetManifest {
        captions_per_image: 5,
        image_dim: 2,
        text_dim: 2,
        latent_dim: 1,
        train_images: 1,
        val_images: 1,
        test_images: 200,
        ..DatasetManifest::default()
    })
    .map_err(e)?;
    let split = &ds.test;
    let runs = 50;
    let mut total = 0.0;
    for seed in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let data = (0..200 * 1000).map(|_| rng.random::<f64>()).collect();
        let m = evaluate_retrieval(&Fixed(Matrix::new(200, 1000, data).map_err(e)?), split)
            .map_err(e)?;
        total += m.text_r1;
    }
    let mean = total / runs as f64;
    let p = 5.0 / 1000.0;
    let se = 100.0 * (p * (1.0 - p) / (200.0 * runs as f64)).sqrt();
    ensure(
        (mean - 100.0 * p).abs() <= MC_SIGMAS * se,
        format!("random text R@1 {mean:.3}% vs 0.5% (se {se:.3})"),
    )?;
    Ok(format!(
        "200 oracle datasets exact; random text R@1 {mean:.3}% (0.5% ± {:.3})",
        MC_SIGMAS * se
    ))
}

// ------------------------------------------------------- 7, 8, 9 shared

struct World {
    dataset: Dataset,
    teacher: FrozenTeacher,
}

fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let dataset = synthesize(&DatasetManifest {
            train_images: TRAIN_IMAGES,
            val_images: VAL_IMAGES,
            test_images: TEST_IMAGES,
            ..DatasetManifest::default()
        })
        .expect("benchmark dataset");
        let start = Instant::now();
        let config = TrainConfig {
            batch_size: BATCH,
            epochs: TEACHER_EPOCHS,
            ..TrainConfig::teacher()
        };
        let teacher =
            train_teacher(&dataset, &config, &RunOptions::default()).expect("teacher trains");
        println!(
            "     teacher: {:.0}s, best val mean R@1 {:.2}",
            start.elapsed().as_secs_f64(),
            teacher.record.best_mean_r1()
        );
        World {
            dataset,
            teacher: FrozenTeacher::new(teacher.best),
        }
    })
}

struct RegimeRuns {
    best_r1: Vec<f64>,
    last: Vec<ScorerParams>,
}

fn regime_runs() -> &'static [(Regime, RegimeRuns); 3] {
    static RUNS: OnceLock<[(Regime, RegimeRuns); 3]> = OnceLock::new();
    RUNS.get_or_init(|| {
        let w = world();
        [Regime::Finetune, Regime::VanillaKd, Regime::Dcd].map(|regime| {
            let start = Instant::now();
            let mut runs = RegimeRuns {
                best_r1: Vec::new(),
                last: Vec::new(),
            };
            for seed in seed_list(0, SEEDS) {
                let config = TrainConfig {
                    batch_size: BATCH,
                    epochs: STUDENT_EPOCHS,
                    seed,
                    ..TrainConfig::student(regime)
                };
                let model = train_student(&w.dataset, &w.teacher, &config, &RunOptions::default())
                    .unwrap_or_else(|err| panic!("{regime} seed {seed}: {err}"));
                runs.best_r1.push(model.record.best_mean_r1());
                runs.last.push(model.last);
            }
            println!(
                "     {regime}: {:.0}s, val mean R@1 per seed {:?}",
                start.elapsed().as_secs_f64(),
                runs.best_r1
                    .iter()
                    .map(|v| format!("{v:.2}"))
                    .collect::<Vec<_>>()
            );
            (regime, runs)
        })
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- 7

fn trend() -> Outcome {
    let runs = regime_runs();
    let [ft, van, full] = [0, 1, 2].map(|i| mean(&runs[i].1.best_r1));
    let detail = format!("finetune {ft:.2}, vanilla KD {van:.2}, DCD {full:.2}");
    ensure(
        full >= van && van >= ft && full - van >= TREND_MARGIN && van - ft >= TREND_MARGIN,
        detail.clone(),
    )?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn separability() -> Outcome {
    let runs = regime_runs();
    let probe = &world().dataset.test;
    let points = |i: usize| -> Result<Vec<SeparabilityPoint>, String> {
        runs[i]
            .1
            .last
            .iter()
            .map(|p| separability_point(p, probe).map_err(e))
            .collect()
    };
    let (van, dcd) = (points(1)?, points(2)?);
    let mut wins = 0;
    let mut rows = Vec::new();
    for (seed, (v, d)) in van.iter().zip(&dcd).enumerate() {
        let lower = d.negatives[0] < v.negatives[0];
        let near = (d.positive - v.positive).abs() <= POSITIVE_GAP;
        if lower && near {
            wins += 1;
        }
        rows.push(format!(
            "seed {seed}: top neg {:.5} vs {:.5}, pos {:.5} vs {:.5}",
            d.negatives[0], v.negatives[0], d.positive, v.positive
        ));
    }
    let detail = format!(
        "DCD vs vanilla, {wins}/{} seeds separate better [{}]",
        van.len(),
        rows.join("; ")
    );
    ensure(wins >= 4, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn sweep() -> Outcome {
    let w = world();
    // Wall time with the teacher scoring every step, as a deployed sweep would.
    let mut seconds = Vec::new();
    for &(m, m_prime) in &PAPER_MM_GRID {
        let config = TrainConfig {
            batch_size: BATCH,
            epochs: 1,
            m,
            m_prime,
            teacher_cache: false,
            ..TrainConfig::student(Regime::Dcd)
        };
        let start = Instant::now();
        train_student(&w.dataset, &w.teacher, &config, &RunOptions::default()).map_err(e)?;
        seconds.push(start.elapsed().as_secs_f64());
    }
    let time =
        |cell: (usize, usize)| seconds[PAPER_MM_GRID.iter().position(|&c| c == cell).unwrap()];

    let base = TrainConfig {
        batch_size: BATCH,
        epochs: SWEEP_EPOCHS,
        ..TrainConfig::student(Regime::Dcd)
    };
    let rows = sweep_mm(
        &w.dataset,
        &w.teacher,
        &base,
        &PAPER_MM_GRID,
        &seed_list(0, SEEDS),
        1,
        None,
    )
    .map_err(e)?;
    let r1 = |cell: (usize, usize)| {
        rows.iter()
            .find(|r| (r.m, r.m_prime) == cell)
            .and_then(|r| r.val)
            .map_or(f64::NAN, |s| s.mean.mean_r1())
    };
    let table: Vec<String> = PAPER_MM_GRID
        .iter()
        .map(|&c| format!("({},{}) {:.2}s R@1 {:.2}", c.0, c.1, time(c), r1(c)))
        .collect();
    let detail = table.join("; ");
    for (small, large) in [((32, 4), (64, 4)), ((32, 8), (64, 8)), ((16, 16), (64, 16))] {
        ensure(
            time(large) > time(small),
            format!("time not increasing from {small:?} to {large:?}: {detail}"),
        )?;
    }
    ensure(
        r1((64, 8)) >= r1((32, 8)),
        format!("(64,8) below (32,8): {detail}"),
    )?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn dcd(args: &[&str], root: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dcd"))
        .args(args)
        .env("DCD_OUTPUT_ROOT", root)
        .output()
        .map_err(e)?;
    ensure(
        out.status.success(),
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)),
    )
}

fn losses_of(run: &Path) -> Result<Vec<u64>, String> {
    let text = std::fs::read_to_string(run.join("record.json")).map_err(e)?;
    let record: dcd_core::RunRecord = serde_json::from_str(&text).map_err(e)?;
    Ok(record.step_losses.iter().map(|v| v.to_bits()).collect())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e)?;
    let root = tmp.path();
    let p = |name: &str| root.join(name).display().to_string();
    dcd(
        &[
            "gen-data",
            "--out",
            &p("data"),
            "--train-images",
            "60",
            "--val-images",
            "10",
            "--test-images",
            "10",
            "--captions-per-image",
            "3",
            "--image-dim",
            "12",
            "--text-dim",
            "10",
            "--latent-dim",
            "4",
        ],
        root,
    )?;
    let small = ["--epochs", "3", "--batch-size", "48", "--seed", "4"];
    let mut runs = vec![("teacher".to_string(), {
        let mut a = vec!["train-teacher", "--data", "DATA", "--hidden", "24,24"];
        a.extend(small);
        a
    })];
    for regime in ["finetune", "vanilla_kd", "dcd"] {
        let mut a = vec![
            "distill",
            "--data",
            "DATA",
            "--teacher",
            "TEACHER",
            "--regime",
            regime,
            "--m",
            "24",
            "--m-prime",
            "5",
            "--hidden",
            "16",
        ];
        a.extend(small);
        runs.push((regime.to_string(), a));
    }
    let mut a = vec![
        "distill",
        "--data",
        "DATA",
        "--teacher",
        "TEACHER",
        "--regime",
        "ablation",
        "--ds-ka",
        "true",
        "--sw",
        "true",
        "--m",
        "24",
        "--m-prime",
        "5",
        "--hidden",
        "16",
        "--uncertainty",
        "student",
    ];
    a.extend(small);
    runs.push(("ablation".to_string(), a));

    let (data, teacher) = (p("data"), p("teacher"));
    let mut steps = 0;
    for (name, args) in &runs {
        let first = p(name);
        let mut args: Vec<&str> = args
            .iter()
            .map(|&a| match a {
                "DATA" => data.as_str(),
                "TEACHER" => teacher.as_str(),
                a => a,
            })
            .collect();
        args.extend(["--out", &first]);
        dcd(&args, root)?;
        let replay = p(&format!("{name}-replay"));
        let snapshot = Path::new(&first).join("spec.txt").display().to_string();
        let command = args[0];
        dcd(&[command, "--config", &snapshot, "--out", &replay], root)?;
        let (a, b) = (
            losses_of(Path::new(&first))?,
            losses_of(Path::new(&replay))?,
        );
        ensure(
            !a.is_empty() && a == b,
            format!("{name}: replayed loss trace differs"),
        )?;
        steps += a.len();
    }
    Ok(format!(
        "{} commands replayed from snapshots, {steps} step losses bit-identical",
        runs.len()
    ))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, Criterion); 10] = [
        ("gradient correctness", gradients),
        ("formula point-checks", point_checks),
        ("selection oracle", selection_oracle),
        ("weight normalization", weight_normalization),
        ("reduction equalities", reductions),
        ("retrieval-metric oracle", metric_oracle),
        ("trend reproduction", trend),
        ("separability trend", separability),
        ("sweep behavior", sweep),
        ("determinism", determinism),
    ];
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !wanted.is_empty() && !wanted.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {number:>2} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                println!("FAIL {number:>2} {name} ({secs:.1}s): {detail}");
                failed.push(number);
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
