//! Multi-run grids: the (M, M') sweep and the ablation ladder. Cells run
//! concurrently up to a job limit, each in its own output directory.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::eval::{evaluate_retrieval, RetrievalMetrics};
use crate::train::{train_student, FrozenTeacher, Regime, RunOptions, TrainConfig};

/// The sweep grid of (teacher-scored, student-kept) negatives.
pub const PAPER_MM_GRID: [(usize, usize); 6] =
    [(16, 16), (32, 4), (32, 8), (64, 4), (64, 8), (64, 16)];

/// Seeds for a multi-seed grid: `base + run_index`.
pub fn seed_list(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base + i).collect()
}

/// Outcome of one student run inside a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub label: String,
    pub seed: u64,
    /// Validation metrics of the best epoch.
    pub val: Option<RetrievalMetrics>,
    /// Test metrics of the best-epoch checkpoint.
    pub test: Option<RetrievalMetrics>,
    pub seconds: f64,
    pub out_dir: Option<PathBuf>,
    pub error: Option<String>,
}

/// Mean and sample standard deviation of each metric over the cells that
/// finished.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: RetrievalMetrics,
    pub spread: RetrievalMetrics,
    pub runs: usize,
}

pub fn summarize(metrics: &[RetrievalMetrics]) -> Option<MetricSummary> {
    if metrics.is_empty() {
        return None;
    }
    let n = metrics.len() as f64;
    let mut mean = [0.0; 6];
    for m in metrics {
        for (acc, v) in mean.iter_mut().zip(m.values()) {
            *acc += v / n;
        }
    }
    let mut var = [0.0; 6];
    if metrics.len() > 1 {
        for m in metrics {
            for ((acc, v), mu) in var.iter_mut().zip(m.values()).zip(mean) {
                *acc += (v - mu) * (v - mu) / (n - 1.0);
            }
        }
    }
    Some(MetricSummary {
        mean: RetrievalMetrics::from_values(mean),
        spread: RetrievalMetrics::from_values(var.map(f64::sqrt)),
        runs: metrics.len(),
    })
}

struct Job {
    label: String,
    config: TrainConfig,
    out_dir: Option<PathBuf>,
}

fn run_cell(dataset: &Dataset, teacher: &FrozenTeacher, job: &Job) -> CellOutcome {
    let start = Instant::now();
    let opts = RunOptions {
        out_dir: job.out_dir.clone(),
        ..RunOptions::default()
    };
    let result = train_student(dataset, teacher, &job.config, &opts).and_then(|m| {
        Ok((
            m.record.best_val,
            evaluate_retrieval(&m.best, &dataset.test)?,
        ))
    });
    let seconds = start.elapsed().as_secs_f64();
    let (val, test, error) = match result {
        Ok((val, test)) => (val, Some(test), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    CellOutcome {
        label: job.label.clone(),
        seed: job.config.seed,
        val,
        test,
        seconds,
        out_dir: job.out_dir.clone(),
        error,
    }
}

/// Runs every job, at most `jobs` at a time; results keep job order. A
/// failing cell is recorded and the rest continue.
fn run_jobs(
    dataset: &Dataset,
    teacher: &FrozenTeacher,
    list: &[Job],
    jobs: usize,
) -> Result<Vec<CellOutcome>> {
    if list
        .iter()
        .any(|j| j.config.teacher_cache && j.config.regime.needs_teacher())
    {
        // Build the shared table once instead of racing to build it per cell.
        teacher.table(&dataset.train)?;
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellOutcome>>> = Mutex::new(vec![None; list.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, list.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = list.get(i) else { break };
                let outcome = run_cell(dataset, teacher, job);
                results
                    .lock()
                    .expect("no cell panics while holding the lock")[i] = Some(outcome);
            });
        }
    });
    Ok(results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|o| o.expect("every job ran"))
        .collect())
}

fn cell_dir(root: Option<&Path>, label: &str, seed: u64) -> Option<PathBuf> {
    root.map(|r| r.join(label).join(format!("seed_{seed}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub m_prime: usize,
    pub cells: Vec<CellOutcome>,
    /// Mean wall time of the finished cells, in seconds.
    pub mean_seconds: f64,
    pub val: Option<MetricSummary>,
    pub test: Option<MetricSummary>,
}

impl SweepRow {
    pub fn label(&self) -> String {
        format!("m{}_mp{}", self.m, self.m_prime)
    }
}

/// One student run per (M, M') and seed, on top of `base`.
pub fn sweep_mm(
    dataset: &Dataset,
    teacher: &FrozenTeacher,
    base: &TrainConfig,
    grid: &[(usize, usize)],
    seeds: &[u64],
    jobs: usize,
    out_root: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    let mut list = Vec::new();
    for &(m, m_prime) in grid {
        for &seed in seeds {
            let label = format!("m{m}_mp{m_prime}");
            list.push(Job {
                out_dir: cell_dir(out_root, &label, seed),
                label,
                config: TrainConfig {
                    m,
                    m_prime,
                    seed,
                    ..base.clone()
                },
            });
        }
    }
    let mut outcomes = run_jobs(dataset, teacher, &list, jobs)?.into_iter();
    Ok(grid
        .iter()
        .map(|&(m, m_prime)| {
            let cells: Vec<CellOutcome> = outcomes.by_ref().take(seeds.len()).collect();
            row(m, m_prime, cells)
        })
        .collect())
}

fn row(m: usize, m_prime: usize, cells: Vec<CellOutcome>) -> SweepRow {
    let done: Vec<&CellOutcome> = cells.iter().filter(|c| c.error.is_none()).collect();
    let mean_seconds = if done.is_empty() {
        0.0
    } else {
        done.iter().map(|c| c.seconds).sum::<f64>() / done.len() as f64
    };
    SweepRow {
        m,
        m_prime,
        mean_seconds,
        val: summarize(&done.iter().filter_map(|c| c.val).collect::<Vec<_>>()),
        test: summarize(&done.iter().filter_map(|c| c.test).collect::<Vec<_>>()),
        cells,
    }
}

/// Tab-separated sweep table: wall time and R@1 in both directions.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "m\tm_prime\tseconds\tval_text_r1\tval_image_r1\ttest_text_r1\ttest_image_r1\tfailed\n",
    );
    let r1 = |s: &Option<MetricSummary>| {
        s.map_or((f64::NAN, f64::NAN), |s| (s.mean.text_r1, s.mean.image_r1))
    };
    for r in rows {
        let (vt, vi) = r1(&r.val);
        let (tt, ti) = r1(&r.test);
        let failed = r.cells.iter().filter(|c| c.error.is_some()).count();
        out.push_str(&format!(
            "{}\t{}\t{:.3}\t{vt:.2}\t{vi:.2}\t{tt:.2}\t{ti:.2}\t{failed}\n",
            r.m, r.m_prime, r.mean_seconds
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub regime: Regime,
    pub cells: Vec<CellOutcome>,
    pub val: Option<MetricSummary>,
    pub test: Option<MetricSummary>,
}

/// The five regimes of [`Regime::LADDER`] over every seed.
pub fn ablate(
    dataset: &Dataset,
    teacher: &FrozenTeacher,
    base: &TrainConfig,
    seeds: &[u64],
    jobs: usize,
    out_root: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut list = Vec::new();
    for (label, regime) in Regime::LADDER {
        for &seed in seeds {
            list.push(Job {
                label: label.to_string(),
                out_dir: cell_dir(out_root, label, seed),
                config: TrainConfig {
                    regime,
                    seed,
                    ..base.clone()
                },
            });
        }
    }
    let mut outcomes = run_jobs(dataset, teacher, &list, jobs)?.into_iter();
    Ok(Regime::LADDER
        .iter()
        .map(|&(label, regime)| {
            let cells: Vec<CellOutcome> = outcomes.by_ref().take(seeds.len()).collect();
            let done: Vec<&CellOutcome> = cells.iter().filter(|c| c.error.is_none()).collect();
            AblationRow {
                label: label.to_string(),
                regime,
                val: summarize(&done.iter().filter_map(|c| c.val).collect::<Vec<_>>()),
                test: summarize(&done.iter().filter_map(|c| c.test).collect::<Vec<_>>()),
                cells,
            }
        })
        .collect())
}

/// Tab-separated ablation table: mean ± spread of the six test metrics.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("regime");
    for name in RetrievalMetrics::NAMES {
        out.push('\t');
        out.push_str(name);
    }
    out.push_str("\truns\tfailed\n");
    for r in rows {
        out.push_str(&r.label);
        match r.test {
            Some(s) => {
                for (m, sd) in s.mean.values().iter().zip(s.spread.values()) {
                    out.push_str(&format!("\t{m:.2}±{sd:.2}"));
                }
            }
            None => out.push_str(&"\tNA".repeat(6)),
        }
        let failed = r.cells.iter().filter(|c| c.error.is_some()).count();
        out.push_str(&format!("\t{}\t{failed}\n", r.cells.len() - failed));
    }
    out
}
