//! Teacher and student matching scorers.
//!
//! A scorer maps an (image, text) feature pair to one matching logit with a
//! tanh MLP over the concatenated features. The first layer is evaluated in
//! split form (image block + text block), so scoring a grid of pairs costs
//! one projection per row instead of one per pair.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureRecord, Modality, ModalityTable};
use crate::error::{Error, Result};
use crate::kv::{format_list, parse_list, KvDoc};
use crate::tensor::{self, Activation, DenseLayer, GradTape, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "teacher" => Some(Role::Teacher),
            "student" => Some(Role::Student),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub role: Role,
    pub image_dim: usize,
    pub text_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

pub const TEACHER_HIDDEN: [usize; 4] = [256, 256, 256, 256];
pub const STUDENT_HIDDEN: [usize; 2] = [128, 128];

impl ScorerConfig {
    pub fn teacher(image_dim: usize, text_dim: usize) -> Self {
        ScorerConfig {
            role: Role::Teacher,
            image_dim,
            text_dim,
            hidden: TEACHER_HIDDEN.to_vec(),
            activation: Activation::Tanh,
            seed: 0,
        }
    }

    pub fn student(image_dim: usize, text_dim: usize) -> Self {
        ScorerConfig {
            role: Role::Student,
            hidden: STUDENT_HIDDEN.to_vec(),
            ..ScorerConfig::teacher(image_dim, text_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Config(format!(
                "{} needs at least one hidden layer",
                self.role
            )));
        }
        if self.image_dim == 0 || self.text_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "{} dims must be positive (image {}, text {}, hidden {:?})",
                self.role, self.image_dim, self.text_dim, self.hidden
            )));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.image_dim + self.text_dim];
        widths.extend(&self.hidden);
        widths.push(1);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Parameters of a scorer. Layer widths chain and the last layer emits one
/// logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub config: ScorerConfig,
    pub layers: Vec<DenseLayer>,
}

/// Uniform `±1/√fan_in` weights, zero biases.
pub fn init_scorer(config: &ScorerConfig) -> Result<ScorerParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layers = config
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            DenseLayer {
                weights: Matrix::new(fan_in, fan_out, data).expect("sized above"),
                bias: Matrix::zeros(1, fan_out),
            }
        })
        .collect();
    Ok(ScorerParams {
        config: config.clone(),
        layers,
    })
}

impl ScorerParams {
    pub fn role(&self) -> Role {
        self.config.role
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Checks the structural invariants; used after loading from disk.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let dims = self.config.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "config implies {} layers, found {}",
                dims.len(),
                self.layers.len()
            )));
        }
        for (i, ((fan_in, fan_out), l)) in dims.iter().zip(&self.layers).enumerate() {
            if l.weights.shape() != (*fan_in, *fan_out) || l.bias.shape() != (1, *fan_out) {
                return Err(Error::shape(
                    "config layer",
                    format!("{i}: {fan_in}x{fan_out}"),
                    "stored layer",
                    format!("{:?} + bias {:?}", l.weights.shape(), l.bias.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Logits for `pairs` of (image row, text row). With a tape, every
    /// primitive is recorded for [`GradTape::backward`].
    pub fn forward(
        &self,
        images: &Matrix,
        texts: &Matrix,
        pairs: &[(usize, usize)],
        tape: Option<&mut GradTape>,
    ) -> Result<Vec<f64>> {
        self.check_inputs(images, texts)?;
        let act = self.config.activation;
        let last = self.layers.len() - 1;
        let out = match tape {
            Some(tape) => {
                let mut h = tape.pair_dense(
                    &self.layers,
                    0,
                    images.clone(),
                    texts.clone(),
                    pairs.to_vec(),
                )?;
                for l in 1..=last {
                    h = tape.activation(act, h);
                    h = tape.dense(&self.layers, l, h)?;
                }
                h
            }
            None => {
                let (ip, tp) = tensor::project_pair_inputs(&self.layers[0], images, texts)?;
                self.finish(tensor::combine_pair_projections(
                    &ip,
                    &tp,
                    &self.layers[0].bias,
                    pairs,
                )?)?
            }
        };
        Ok(out.into_vec())
    }

    fn check_inputs(&self, images: &Matrix, texts: &Matrix) -> Result<()> {
        if images.cols() != self.config.image_dim {
            return Err(Error::shape(
                "image features",
                images.cols(),
                "scorer image_dim",
                self.config.image_dim,
            ));
        }
        if texts.cols() != self.config.text_dim {
            return Err(Error::shape(
                "text features",
                texts.cols(),
                "scorer text_dim",
                self.config.text_dim,
            ));
        }
        Ok(())
    }

    /// Layers after the pair layer, without recording.
    fn finish(&self, mut h: Matrix) -> Result<Matrix> {
        for layer in &self.layers[1..] {
            tanh_family(self.config.activation, &mut h);
            h = tensor::dense_forward(&h, &layer.weights, &layer.bias)?;
        }
        Ok(h)
    }

    /// Scores every (image, text) combination; row `i` holds image `i`.
    pub fn score_matrix(&self, images: &Matrix, texts: &Matrix) -> Result<Matrix> {
        self.check_inputs(images, texts)?;
        let (ip, tp) = tensor::project_pair_inputs(&self.layers[0], images, texts)?;
        let (n_img, n_txt) = (images.rows(), texts.rows());
        let mut out = Vec::with_capacity(n_img * n_txt);
        // Blocks of whole rows keep memory flat for large splits.
        let rows_per_block = (SCORE_BLOCK_PAIRS / n_txt.max(1)).max(1);
        let mut start = 0;
        while start < n_img {
            let end = (start + rows_per_block).min(n_img);
            let pairs: Vec<(usize, usize)> = (start..end)
                .flat_map(|i| (0..n_txt).map(move |j| (i, j)))
                .collect();
            let h = tensor::combine_pair_projections(&ip, &tp, &self.layers[0].bias, &pairs)?;
            out.extend(self.finish(h)?.into_vec());
            start = end;
        }
        Matrix::new(n_img, n_txt, out)
    }

    /// Scores arbitrary pairs in blocks.
    pub fn score_pairs(
        &self,
        images: &Matrix,
        texts: &Matrix,
        pairs: &[(usize, usize)],
    ) -> Result<Vec<f64>> {
        self.check_inputs(images, texts)?;
        let (ip, tp) = tensor::project_pair_inputs(&self.layers[0], images, texts)?;
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(SCORE_BLOCK_PAIRS) {
            let h = tensor::combine_pair_projections(&ip, &tp, &self.layers[0].bias, chunk)?;
            out.extend(self.finish(h)?.into_vec());
        }
        Ok(out)
    }
}

const SCORE_BLOCK_PAIRS: usize = 8192;

fn tanh_family(act: Activation, h: &mut Matrix) {
    act.apply_in_place(h.as_mut_slice());
}

/// Matching logit `s(image, text)` for one pair of `1×d` feature rows.
pub fn score_pair(params: &ScorerParams, image_feat: &Matrix, text_feat: &Matrix) -> Result<f64> {
    if image_feat.rows() != 1 || text_feat.rows() != 1 {
        return Err(Error::shape(
            "image feature",
            format!("{:?}", image_feat.shape()),
            "text feature",
            format!("{:?}", text_feat.shape()),
        ));
    }
    Ok(params.score_pairs(image_feat, text_feat, &[(0, 0)])?[0])
}

/// One logit per key, `out[i] = s(query, keys[i])`. The query and keys must
/// be of opposite modalities; either may be the image.
pub fn score_candidates(
    params: &ScorerParams,
    query: &FeatureRecord,
    keys: &[FeatureRecord],
) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::Usage(
            "score_candidates needs at least one key".into(),
        ));
    }
    let key_modality = keys[0].modality;
    if key_modality == query.modality {
        return Err(Error::Usage(format!(
            "query and keys are both {}",
            query.modality
        )));
    }
    let table = ModalityTable::from_records(key_modality, keys)?;
    let pairs: Vec<(usize, usize)>;
    let scores = match query.modality {
        Modality::Image => {
            pairs = (0..keys.len()).map(|j| (0, j)).collect();
            params.score_pairs(&query.vector, &table.features, &pairs)?
        }
        Modality::Text => {
            pairs = (0..keys.len()).map(|i| (i, 0)).collect();
            params.score_pairs(&table.features, &query.vector, &pairs)?
        }
    };
    Ok(scores)
}

const CHECKPOINT_FORMAT: &str = "dcd-scorer-v1";

/// Writes `manifest.txt` plus one raw little-endian `f64` blob per layer
/// (weights row-major, then bias) into `dir`.
pub fn save_checkpoint(params: &ScorerParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = &params.config;
    let mut doc = KvDoc::new();
    doc.set("format", CHECKPOINT_FORMAT);
    doc.set("role", c.role);
    doc.set("activation", c.activation);
    doc.set("image_dim", c.image_dim);
    doc.set("text_dim", c.text_dim);
    doc.set("hidden", format_list(&c.hidden));
    doc.set("seed", c.seed);
    doc.set("layers", params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let file = format!("layer{i}.f64");
        doc.set(
            &format!("layer{i}_shape"),
            format!("{}x{}", layer.fan_in(), layer.fan_out()),
        );
        doc.set(&format!("layer{i}_file"), &file);
        write_layer(&dir.join(file), layer)?;
    }
    doc.write(&dir.join("manifest.txt"))
}

pub(crate) fn write_layer(path: &Path, layer: &DenseLayer) -> Result<()> {
    let values = layer.weights.as_slice().iter().chain(layer.bias.as_slice());
    let bytes: Vec<u8> = values.flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_layer(path: &Path, fan_in: usize, fan_out: usize) -> Result<DenseLayer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = (fan_in * fan_out + fan_out) * 8;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            bytes.len().min(expected) as u64,
            format!(
                "layer {fan_in}x{fan_out} needs {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(bytes.len() / 8);
    for (i, chunk) in bytes.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::format(
                path,
                8 * i as u64,
                format!("non-finite parameter {v}"),
            ));
        }
        values.push(v);
    }
    let bias = values.split_off(fan_in * fan_out);
    Ok(DenseLayer {
        weights: Matrix::new(fan_in, fan_out, values)?,
        bias: Matrix::new(1, fan_out, bias)?,
    })
}

pub fn load_checkpoint(dir: &Path) -> Result<ScorerParams> {
    let manifest = dir.join("manifest.txt");
    let doc = KvDoc::read(&manifest)?;
    let bad = |msg: String| Error::format(&manifest, 0, msg);
    if doc.require("format")? != CHECKPOINT_FORMAT {
        return Err(bad(format!(
            "unsupported checkpoint format {:?}",
            doc.get("format")
        )));
    }
    let role = Role::parse(doc.require("role")?)
        .ok_or_else(|| bad(format!("bad role {:?}", doc.get("role"))))?;
    let activation = Activation::parse(doc.require("activation")?)
        .ok_or_else(|| bad(format!("bad activation {:?}", doc.get("activation"))))?;
    let hidden =
        parse_list(doc.require("hidden")?).map_err(|e| bad(format!("bad hidden list: {e}")))?;
    let config = ScorerConfig {
        role,
        image_dim: doc.parse_value("image_dim")?,
        text_dim: doc.parse_value("text_dim")?,
        hidden,
        activation,
        seed: doc.parse_value("seed")?,
    };
    config.validate().map_err(|e| bad(e.to_string()))?;
    let dims = config.layer_dims();
    let n: usize = doc.parse_value("layers")?;
    if n != dims.len() {
        return Err(bad(format!(
            "manifest lists {n} layers but hidden widths imply {}",
            dims.len()
        )));
    }
    let mut layers = Vec::with_capacity(n);
    for (i, (fan_in, fan_out)) in dims.into_iter().enumerate() {
        let shape = doc.require(&format!("layer{i}_shape"))?;
        if shape != format!("{fan_in}x{fan_out}") {
            return Err(bad(format!(
                "layer{i}_shape={shape} but config implies {fan_in}x{fan_out}"
            )));
        }
        let file = doc.require(&format!("layer{i}_file"))?;
        layers.push(read_layer(&dir.join(file), fan_in, fan_out)?);
    }
    let params = ScorerParams { config, layers };
    params.validate()?;
    Ok(params)
}
