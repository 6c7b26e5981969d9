//! Teacher-driven candidate construction: sample `M` in-batch negatives,
//! keep the `M'` the teacher scores highest, and permute the teacher's
//! scores so the positive holds the maximum.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Split};
use crate::error::{Error, Result};
use crate::model::ScorerParams;
use crate::seed::derive_seed_path;
use crate::tensor::Matrix;

/// Which modality plays the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Image queries ranked against text keys.
    ImageToText,
    /// Text queries ranked against image keys.
    TextToImage,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

    pub fn stream(self) -> u64 {
        match self {
            Direction::ImageToText => 0,
            Direction::TextToImage => 1,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::ImageToText => "i2t",
            Direction::TextToImage => "t2i",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Negatives scored by the teacher per query.
    pub m: usize,
    /// Negatives kept for the student.
    pub m_prime: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig { m: 63, m_prime: 7 }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_prime == 0 || self.m_prime > self.m {
            return Err(Error::Config(format!(
                "need 1 <= M' <= M, got M={} M'={}",
                self.m, self.m_prime
            )));
        }
        Ok(())
    }
}

/// A batch with its features gathered into batch-local matrices. Row `p` of
/// `images` and `texts` belongs to batch pair `p`.
#[derive(Debug, Clone)]
pub struct BatchView {
    pub images: Matrix,
    pub texts: Matrix,
    pub image_ids: Vec<u64>,
    pub text_ids: Vec<u64>,
    pub groups: Vec<u64>,
    /// Split row of each pair's image; captions of one image share it.
    pub image_rows: Vec<usize>,
    /// Split row of each pair's text.
    pub text_rows: Vec<usize>,
}

impl BatchView {
    pub fn new(split: &Split, batch: &Batch) -> Self {
        let image_rows: Vec<usize> = batch.pairs.iter().map(|p| p.image).collect();
        let text_rows: Vec<usize> = batch.pairs.iter().map(|p| p.text).collect();
        BatchView {
            images: split.images.features.select_rows(&image_rows),
            texts: split.texts.features.select_rows(&text_rows),
            image_ids: image_rows.iter().map(|&i| split.images.ids[i]).collect(),
            text_ids: text_rows.iter().map(|&t| split.texts.ids[t]).collect(),
            groups: text_rows.iter().map(|&t| split.texts.groups[t]).collect(),
            image_rows,
            text_rows,
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    fn query_id(&self, pos: usize, dir: Direction) -> u64 {
        match dir {
            Direction::ImageToText => self.image_ids[pos],
            Direction::TextToImage => self.text_ids[pos],
        }
    }

    pub fn key_id(&self, pos: usize, dir: Direction) -> u64 {
        match dir {
            Direction::ImageToText => self.text_ids[pos],
            Direction::TextToImage => self.image_ids[pos],
        }
    }

    /// Batch-local (image row, text row) for query `query` against key `key`.
    pub fn pair(&self, query: usize, key: usize, dir: Direction) -> (usize, usize) {
        match dir {
            Direction::ImageToText => (query, key),
            Direction::TextToImage => (key, query),
        }
    }

    /// Batch positions usable as negatives: keys from other groups, each
    /// distinct key counted once.
    pub fn negative_pool(&self, query: usize, dir: Direction) -> Vec<usize> {
        let group = self.groups[query];
        let mut seen_images = HashSet::new();
        (0..self.len())
            .filter(|&p| self.groups[p] != group)
            .filter(|&p| match dir {
                Direction::ImageToText => true,
                Direction::TextToImage => seen_images.insert(self.image_rows[p]),
            })
            .collect()
    }
}

/// Scores batch-local (image row, text row) pairs for mining.
pub trait CandidateScorer {
    fn score_view_pairs(&self, view: &BatchView, pairs: &[(usize, usize)]) -> Result<Vec<f64>>;
}

impl CandidateScorer for ScorerParams {
    fn score_view_pairs(&self, view: &BatchView, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        self.score_pairs(&view.images, &view.texts, pairs)
    }
}

/// Every image-text score of one split, computed once up front. A frozen
/// teacher gives the same values it would give batch by batch.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    scores: Matrix,
}

impl ScoreTable {
    pub fn new(teacher: &ScorerParams, split: &Split) -> Result<Self> {
        Ok(ScoreTable {
            scores: teacher.score_matrix(&split.images.features, &split.texts.features)?,
        })
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }
}

impl CandidateScorer for ScoreTable {
    fn score_view_pairs(&self, view: &BatchView, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|&(i, t)| {
                let (r, c) = (view.image_rows[i], view.text_rows[t]);
                if r >= self.scores.rows() || c >= self.scores.cols() {
                    return Err(Error::shape(
                        "score table",
                        format!("{:?}", self.scores.shape()),
                        "batch pair",
                        format!("({r}, {c})"),
                    ));
                }
                Ok(self.scores.get(r, c))
            })
            .collect()
    }
}

/// Random generator for one query of one batch, independent of the order in
/// which queries are processed.
pub fn query_rng(batch_seed: u64, query: usize, dir: Direction) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_path(batch_seed, &[dir.stream(), query as u64]))
}

/// `m` distinct negative key positions for `query`, uniform without
/// replacement over the pool.
pub fn sample_negatives(
    view: &BatchView,
    query: usize,
    dir: Direction,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let pool = view.negative_pool(query, dir);
    if pool.len() < m {
        return Err(Error::Config(format!(
            "query {query} ({dir}) needs {m} negatives but the batch offers only {} non-matching keys",
            pool.len()
        )));
    }
    Ok(index::sample(rng, pool.len(), m)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

/// Key positions for every query of a batch, positive first, followed by
/// `m_prime` uniformly drawn negatives. Uses the same per-query generators as
/// mining without selection, so both see identical negatives.
pub fn random_candidates(
    view: &BatchView,
    dir: Direction,
    m_prime: usize,
    batch_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    (0..view.len())
        .map(|q| {
            let negs = sample_negatives(view, q, dir, m_prime, &mut query_rng(batch_seed, q, dir))?;
            Ok(std::iter::once(q).chain(negs).collect())
        })
        .collect()
}

/// Indices of the `m_prime` largest scores, best first; ties go to the
/// smaller index.
pub fn select_hard_negatives(scores: &[f64], m_prime: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(m_prime);
    order
}

/// Permutes `raw` (positive at position 0) so the positive takes the
/// maximum. The remaining values go to the negatives in descending order,
/// the negative with the highest raw score receiving the largest.
pub fn knowledge_adjust(raw: &[f64]) -> Vec<f64> {
    if raw.len() <= 1 {
        return raw.to_vec();
    }
    let mut values = raw.to_vec();
    values.sort_by(|a, b| b.total_cmp(a));
    let negatives_by_score = select_hard_negatives(&raw[1..], raw.len() - 1);
    let mut out = vec![0.0; raw.len()];
    out[0] = values[0];
    for (rank, neg) in negatives_by_score.into_iter().enumerate() {
        out[neg + 1] = values[rank + 1];
    }
    out
}

/// One query's candidates for the student: the positive first, then `M'`
/// selected negatives, with the teacher's raw and adjusted logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub direction: Direction,
    pub query_id: u64,
    pub positive_key_id: u64,
    pub negative_key_ids: Vec<u64>,
    /// Batch positions of the keys, positive first.
    pub key_positions: Vec<usize>,
    pub teacher_logits_raw: Vec<f64>,
    pub teacher_logits_adjusted: Vec<f64>,
    /// For each kept negative, its index in the sampled pool of `M`.
    pub selection_provenance: Vec<usize>,
}

impl CandidateList {
    pub fn len(&self) -> usize {
        self.key_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key_positions.is_empty()
    }

    /// The four structural invariants of a mined list.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.negative_key_ids.len() + 1;
        if self.teacher_logits_raw.len() != n
            || self.teacher_logits_adjusted.len() != n
            || self.key_positions.len() != n
        {
            return Err(Error::Numeric(format!(
                "candidate list lengths disagree (expected {n})"
            )));
        }
        let mut a = self.teacher_logits_raw.clone();
        let mut b = self.teacher_logits_adjusted.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(Error::Numeric(
                "adjusted logits are not a permutation of raw logits".into(),
            ));
        }
        let max = self
            .teacher_logits_adjusted
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if self.teacher_logits_adjusted[0] != max {
            return Err(Error::Numeric(
                "positive does not hold the maximum adjusted logit".into(),
            ));
        }
        let distinct: HashSet<u64> = self.negative_key_ids.iter().copied().collect();
        if distinct.len() != self.negative_key_ids.len() || distinct.contains(&self.positive_key_id)
        {
            return Err(Error::Numeric(
                "negative keys repeat or include the positive".into(),
            ));
        }
        Ok(())
    }
}

/// Options that switch the two teacher-side transforms independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningSteps {
    pub select: bool,
    pub adjust: bool,
}

impl MiningSteps {
    pub const FULL: MiningSteps = MiningSteps {
        select: true,
        adjust: true,
    };
}

/// Candidate lists for every query of a batch in one direction.
///
/// With selection on, `M` negatives are sampled and the teacher keeps the
/// top `M'`; with it off, `M'` negatives are sampled directly. The teacher
/// scores every sampled pair in one batched call.
pub fn build_candidate_lists<S: CandidateScorer + ?Sized>(
    teacher: &S,
    view: &BatchView,
    dir: Direction,
    config: &MiningConfig,
    steps: MiningSteps,
    batch_seed: u64,
) -> Result<Vec<CandidateList>> {
    build_for_queries(
        teacher,
        view,
        dir,
        config,
        steps,
        batch_seed,
        &(0..view.len()).collect::<Vec<_>>(),
    )
}

/// The fully mined list for a single query. Identical to the corresponding
/// entry of [`build_candidate_lists`] with [`MiningSteps::FULL`].
pub fn build_candidate_list<S: CandidateScorer + ?Sized>(
    teacher: &S,
    view: &BatchView,
    query: usize,
    dir: Direction,
    config: &MiningConfig,
    batch_seed: u64,
) -> Result<CandidateList> {
    Ok(build_for_queries(
        teacher,
        view,
        dir,
        config,
        MiningSteps::FULL,
        batch_seed,
        &[query],
    )?
    .remove(0))
}

fn build_for_queries<S: CandidateScorer + ?Sized>(
    teacher: &S,
    view: &BatchView,
    dir: Direction,
    config: &MiningConfig,
    steps: MiningSteps,
    batch_seed: u64,
    queries: &[usize],
) -> Result<Vec<CandidateList>> {
    config.validate()?;
    let draw = if steps.select {
        config.m
    } else {
        config.m_prime
    };
    let sampled: Vec<Vec<usize>> = queries
        .iter()
        .map(|&q| sample_negatives(view, q, dir, draw, &mut query_rng(batch_seed, q, dir)))
        .collect::<Result<_>>()?;
    let mut pairs = Vec::with_capacity(queries.len() * (draw + 1));
    for (&q, negs) in queries.iter().zip(&sampled) {
        pairs.push(view.pair(q, q, dir));
        pairs.extend(negs.iter().map(|&k| view.pair(q, k, dir)));
    }
    let scores = teacher.score_view_pairs(view, &pairs)?;
    let lists = queries
        .iter()
        .zip(&sampled)
        .zip(scores.chunks_exact(draw + 1))
        .map(|((&q, negs), scores)| {
            let provenance = if steps.select {
                select_hard_negatives(&scores[1..], config.m_prime)
            } else {
                (0..draw).collect()
            };
            let key_positions: Vec<usize> = std::iter::once(q)
                .chain(provenance.iter().map(|&i| negs[i]))
                .collect();
            let raw: Vec<f64> = std::iter::once(scores[0])
                .chain(provenance.iter().map(|&i| scores[i + 1]))
                .collect();
            let adjusted = if steps.adjust {
                knowledge_adjust(&raw)
            } else {
                raw.clone()
            };
            CandidateList {
                direction: dir,
                query_id: view.query_id(q, dir),
                positive_key_id: view.key_id(q, dir),
                negative_key_ids: key_positions[1..]
                    .iter()
                    .map(|&k| view.key_id(k, dir))
                    .collect(),
                key_positions,
                teacher_logits_raw: raw,
                teacher_logits_adjusted: adjusted,
                selection_provenance: provenance,
            }
        })
        .collect();
    Ok(lists)
}

/// Writes one JSON record per candidate list.
pub fn dump_candidate_lists<W: Write>(mut out: W, lists: &[CandidateList]) -> std::io::Result<()> {
    for list in lists {
        serde_json::to_writer(&mut out, list)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
