//! Recall@K retrieval metrics and score-separability traces.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Projections, Split};
use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::model::{load_checkpoint, ScorerParams};
use crate::tensor::Matrix;

/// Anything that can score every image of a split against every text.
pub trait PairScorer {
    /// Row `i`, column `j`: score of image `i` with text `j`.
    fn score_all(&self, images: &Matrix, texts: &Matrix) -> Result<Matrix>;
}

impl PairScorer for ScorerParams {
    fn score_all(&self, images: &Matrix, texts: &Matrix) -> Result<Matrix> {
        self.score_matrix(images, texts)
    }
}

impl<S: PairScorer + ?Sized> PairScorer for &S {
    fn score_all(&self, images: &Matrix, texts: &Matrix) -> Result<Matrix> {
        (**self).score_all(images, texts)
    }
}

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Recall in percent. "Text retrieval" means image queries ranking texts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub text_r1: f64,
    pub text_r5: f64,
    pub text_r10: f64,
    pub image_r1: f64,
    pub image_r5: f64,
    pub image_r10: f64,
}

impl RetrievalMetrics {
    pub const NAMES: [&'static str; 6] = [
        "text_r1",
        "text_r5",
        "text_r10",
        "image_r1",
        "image_r5",
        "image_r10",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.text_r1,
            self.text_r5,
            self.text_r10,
            self.image_r1,
            self.image_r5,
            self.image_r10,
        ]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        RetrievalMetrics {
            text_r1: v[0],
            text_r5: v[1],
            text_r10: v[2],
            image_r1: v[3],
            image_r5: v[4],
            image_r10: v[5],
        }
    }

    /// R@1 averaged over both directions.
    pub fn mean_r1(&self) -> f64 {
        0.5 * (self.text_r1 + self.image_r1)
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (dir, r) in [
            ("text", [self.text_r1, self.text_r5, self.text_r10]),
            ("image", [self.image_r1, self.image_r5, self.image_r10]),
        ] {
            if !(0.0 <= r[0] && r[0] <= r[1] && r[1] <= r[2] && r[2] <= 100.0) {
                return Err(Error::Numeric(format!(
                    "{dir} recall not monotone within [0, 100]: {r:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        for (name, v) in Self::NAMES.iter().zip(self.values()) {
            doc.set(name, format!("{v}"));
        }
        doc
    }
}

/// A scorer that knows the generator: both modalities are mapped back to
/// the latent space by least squares and pairs score by negative squared
/// latent distance. On a learnable dataset its recall is near 100.
#[derive(Debug, Clone)]
pub struct LatentOracle {
    /// `latent_dim × image_dim`
    image_inverse: Matrix,
    /// `latent_dim × text_dim`
    text_inverse: Matrix,
}

impl LatentOracle {
    pub fn new(projections: &Projections) -> Result<Self> {
        let pinv = |m: &Matrix| -> Result<Matrix> {
            let a = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
            let p = a
                .pseudo_inverse(1e-12)
                .map_err(|e| Error::Numeric(e.to_string()))?;
            // nalgebra is column-major; the transpose's storage is our row-major layout.
            Matrix::new(p.nrows(), p.ncols(), p.transpose().as_slice().to_vec())
        };
        Ok(LatentOracle {
            image_inverse: pinv(&projections.image)?,
            text_inverse: pinv(&projections.text)?,
        })
    }

    fn latents(inverse: &Matrix, features: &Matrix) -> Result<Vec<Vec<f64>>> {
        if features.cols() != inverse.cols() {
            return Err(Error::shape(
                "features",
                format!("{:?}", features.shape()),
                "oracle inverse",
                format!("{:?}", inverse.shape()),
            ));
        }
        Ok(features
            .iter_rows()
            .map(|x| {
                inverse
                    .iter_rows()
                    .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect())
    }
}

impl PairScorer for LatentOracle {
    fn score_all(&self, images: &Matrix, texts: &Matrix) -> Result<Matrix> {
        let zi = Self::latents(&self.image_inverse, images)?;
        let zt = Self::latents(&self.text_inverse, texts)?;
        let mut out = Matrix::zeros(zi.len(), zt.len());
        for (i, a) in zi.iter().enumerate() {
            for (j, b) in zt.iter().enumerate() {
                let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                out.set(i, j, -d);
            }
        }
        Ok(out)
    }
}

/// Ranks every test text for every test image and vice versa.
pub fn evaluate_retrieval<S: PairScorer + ?Sized>(
    scorer: &S,
    split: &Split,
) -> Result<RetrievalMetrics> {
    if split.images.is_empty() || split.texts.is_empty() {
        return Err(Error::Usage(format!("split '{}' is empty", split.name)));
    }
    let scores = scorer.score_all(&split.images.features, &split.texts.features)?;
    metrics_from_scores(&scores, &split.images.groups, &split.texts.groups)
}

/// Metrics from a precomputed image × text score matrix. A query hits at K
/// when any key of its group ranks within the top K; ties rank the smaller
/// index first.
pub fn metrics_from_scores(
    scores: &Matrix,
    image_groups: &[u64],
    text_groups: &[u64],
) -> Result<RetrievalMetrics> {
    if scores.shape() != (image_groups.len(), text_groups.len()) {
        return Err(Error::shape(
            "score matrix",
            format!("{:?}", scores.shape()),
            "images x texts",
            format!("{}x{}", image_groups.len(), text_groups.len()),
        ));
    }
    if image_groups.is_empty() || text_groups.is_empty() {
        return Err(Error::Usage("retrieval over an empty split".into()));
    }
    scores.check_finite("retrieval scores")?;

    let mut text_hits = [0usize; 3];
    let mut key_scores = vec![0.0; text_groups.len()];
    for (i, &g) in image_groups.iter().enumerate() {
        key_scores.copy_from_slice(scores.row(i));
        tally(&key_scores, |j| text_groups[j] == g, &mut text_hits);
    }
    let mut image_hits = [0usize; 3];
    let mut key_scores = vec![0.0; image_groups.len()];
    for (j, &g) in text_groups.iter().enumerate() {
        for (i, s) in key_scores.iter_mut().enumerate() {
            *s = scores.get(i, j);
        }
        tally(&key_scores, |i| image_groups[i] == g, &mut image_hits);
    }
    let pct = |hits: usize, n: usize| 100.0 * hits as f64 / n as f64;
    let (ni, nt) = (image_groups.len(), text_groups.len());
    let m = RetrievalMetrics {
        text_r1: pct(text_hits[0], ni),
        text_r5: pct(text_hits[1], ni),
        text_r10: pct(text_hits[2], ni),
        image_r1: pct(image_hits[0], nt),
        image_r5: pct(image_hits[1], nt),
        image_r10: pct(image_hits[2], nt),
    };
    m.check_invariants()?;
    Ok(m)
}

/// Position of the best-ranked relevant key, counted in `hits` for each K
/// it falls within. Queries with no relevant key never hit.
fn tally(scores: &[f64], relevant: impl Fn(usize) -> bool, hits: &mut [usize; 3]) {
    let Some(best) = (0..scores.len())
        .filter(|&j| relevant(j))
        .min_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)))
    else {
        return;
    };
    let s = scores[best];
    let rank = scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < best))
        .count();
    for (h, &k) in hits.iter_mut().zip(&RECALL_KS) {
        if rank < k {
            *h += 1;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean squashed scores for one scorer over a probe split: the positive
/// pairs and the three highest-scoring negatives of each image query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityPoint {
    pub positive: f64,
    pub negatives: [f64; 3],
}

pub fn separability_point<S: PairScorer + ?Sized>(
    scorer: &S,
    probe: &Split,
) -> Result<SeparabilityPoint> {
    if probe.images.is_empty() {
        return Err(Error::Usage(format!(
            "probe split '{}' has no images",
            probe.name
        )));
    }
    let scores = scorer.score_all(&probe.images.features, &probe.texts.features)?;
    scores.check_finite("probe scores")?;
    let mut pos_sum = 0.0;
    let mut neg_sum = [0.0; 3];
    for (i, &g) in probe.images.groups.iter().enumerate() {
        let (mut pos, mut neg): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
        for (j, &tg) in probe.texts.groups.iter().enumerate() {
            let v = sigmoid(scores.get(i, j));
            if tg == g {
                pos.push(v);
            } else {
                neg.push(v);
            }
        }
        if pos.is_empty() || neg.len() < 3 {
            return Err(Error::Usage(format!(
                "probe image {i} needs a caption and three negatives, has {} and {}",
                pos.len(),
                neg.len()
            )));
        }
        pos_sum += pos.iter().sum::<f64>() / pos.len() as f64;
        neg.sort_by(|a, b| b.total_cmp(a));
        for (acc, v) in neg_sum.iter_mut().zip(&neg) {
            *acc += v;
        }
    }
    let n = probe.images.len() as f64;
    Ok(SeparabilityPoint {
        positive: pos_sum / n,
        negatives: neg_sum.map(|v| v / n),
    })
}

/// One point per checkpoint, in the order given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityTrace {
    pub labels: Vec<String>,
    pub positive: Vec<f64>,
    pub negative_1: Vec<f64>,
    pub negative_2: Vec<f64>,
    pub negative_3: Vec<f64>,
}

impl SeparabilityTrace {
    pub fn push(&mut self, label: impl Into<String>, p: SeparabilityPoint) {
        self.labels.push(label.into());
        self.positive.push(p.positive);
        self.negative_1.push(p.negatives[0]);
        self.negative_2.push(p.negatives[1]);
        self.negative_3.push(p.negatives[2]);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Tab-separated columns with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("checkpoint\tpositive\tnegative_1\tnegative_2\tnegative_3\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                self.labels[i],
                self.positive[i],
                self.negative_1[i],
                self.negative_2[i],
                self.negative_3[i]
            ));
        }
        out
    }
}

pub fn separability_trace_of<S: PairScorer>(
    scorers: &[(String, S)],
    probe: &Split,
) -> Result<SeparabilityTrace> {
    if scorers.is_empty() {
        return Err(Error::Usage(
            "separability trace needs at least one checkpoint".into(),
        ));
    }
    let mut trace = SeparabilityTrace::default();
    for (label, s) in scorers {
        trace.push(label.clone(), separability_point(s, probe)?);
    }
    Ok(trace)
}

/// Loads each checkpoint directory in turn and traces it on `probe`.
pub fn separability_trace<P: AsRef<Path>>(
    checkpoints: &[P],
    probe: &Split,
) -> Result<SeparabilityTrace> {
    if checkpoints.is_empty() {
        return Err(Error::Usage(
            "separability trace needs at least one checkpoint".into(),
        ));
    }
    let mut trace = SeparabilityTrace::default();
    for dir in checkpoints {
        let params = load_checkpoint(dir.as_ref())?;
        trace.push(
            dir.as_ref().display().to_string(),
            separability_point(&params, probe)?,
        );
    }
    Ok(trace)
}
