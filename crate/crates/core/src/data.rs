//! Cross-modal feature datasets: synthetic generation, the on-disk format,
//! and seeded mini-batching.
//!
//! A dataset directory holds `manifest.txt` plus, for every split and
//! modality, a feature blob (`<split>.<modality>.f64`) and an identity blob
//! (`<split>.<modality>.ids`). Both blobs start with an 8-byte magic and two
//! little-endian `u64` counts (rows, cols), followed by row-major
//! little-endian payload: `f64` features, or `(id, group_id)` `u64` pairs.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::seed::derive_seed;
use crate::tensor::Matrix;

pub const FEATURE_MAGIC: [u8; 8] = *b"DCDFEAT1";
pub const ID_MAGIC: [u8; 8] = *b"DCDIDS01";
const HEADER_LEN: u64 = 24;
const FORMAT_TAG: &str = "dcd-features-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One modality's feature vector with its identity. Captions of one image
/// share the image's `group_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: u64,
    pub group_id: u64,
    pub modality: Modality,
    pub vector: Matrix,
}

/// All records of one modality within a split, stored as one matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityTable {
    pub modality: Modality,
    pub ids: Vec<u64>,
    pub groups: Vec<u64>,
    pub features: Matrix,
}

impl ModalityTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn record(&self, i: usize) -> FeatureRecord {
        FeatureRecord {
            id: self.ids[i],
            group_id: self.groups[i],
            modality: self.modality,
            vector: Matrix::row_vector(self.features.row(i).to_vec()),
        }
    }

    pub fn from_records(modality: Modality, records: &[FeatureRecord]) -> Result<Self> {
        let dim = records.first().map_or(0, |r| r.vector.cols());
        let mut data = Vec::with_capacity(records.len() * dim);
        for r in records {
            if r.modality != modality {
                return Err(Error::Usage(format!(
                    "record {} is {}, expected {modality}",
                    r.id, r.modality
                )));
            }
            if r.vector.shape() != (1, dim) {
                return Err(Error::shape(
                    "first record",
                    format!("1x{dim}"),
                    "record",
                    format!("{:?}", r.vector.shape()),
                ));
            }
            data.extend_from_slice(r.vector.as_slice());
        }
        Ok(ModalityTable {
            modality,
            ids: records.iter().map(|r| r.id).collect(),
            groups: records.iter().map(|r| r.group_id).collect(),
            features: Matrix::new(records.len(), dim, data)?,
        })
    }

    /// Reorders records; used to check that metrics ignore split order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        ModalityTable {
            modality: self.modality,
            ids: order.iter().map(|&i| self.ids[i]).collect(),
            groups: order.iter().map(|&i| self.groups[i]).collect(),
            features: self.features.select_rows(order),
        }
    }
}

/// Index of one matched (image, text) pair inside a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairRef {
    pub image: usize,
    pub text: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: String,
    pub images: ModalityTable,
    pub texts: ModalityTable,
}

impl Split {
    pub fn new(
        name: impl Into<String>,
        images: ModalityTable,
        texts: ModalityTable,
    ) -> Result<Self> {
        let split = Split {
            name: name.into(),
            images,
            texts,
        };
        split.matched_pairs()?;
        Ok(split)
    }

    /// One pair per caption, linking it to the image with the same group id.
    pub fn matched_pairs(&self) -> Result<Vec<PairRef>> {
        let mut image_of_group = HashMap::with_capacity(self.images.len());
        for (i, &g) in self.images.groups.iter().enumerate() {
            image_of_group.entry(g).or_insert(i);
        }
        self.texts
            .groups
            .iter()
            .enumerate()
            .map(|(t, g)| match image_of_group.get(g) {
                Some(&image) => Ok(PairRef { image, text: t }),
                None => Err(Error::Usage(format!(
                    "split {}: text {} has group {g} with no image",
                    self.name, self.texts.ids[t]
                ))),
            })
            .collect()
    }

    pub fn pair_count(&self) -> usize {
        self.texts.len()
    }
}

/// Shape and generation parameters of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub captions_per_image: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub seed: u64,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            captions_per_image: 5,
            image_dim: 64,
            text_dim: 64,
            latent_dim: 16,
            noise_sigma: 0.25,
            train_images: 2000,
            val_images: 200,
            test_images: 200,
            seed: 0,
        }
    }
}

impl DatasetManifest {
    pub fn n_images(&self) -> usize {
        self.train_images + self.val_images + self.test_images
    }

    fn split_images(&self, split: &str) -> usize {
        match split {
            "train" => self.train_images,
            "val" => self.val_images,
            _ => self.test_images,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.captions_per_image == 0 {
            return bad("captions_per_image must be at least 1".into());
        }
        if self.image_dim == 0 || self.text_dim == 0 {
            return bad(format!(
                "feature dims must be positive (image {}, text {})",
                self.image_dim, self.text_dim
            ));
        }
        if self.train_images == 0 || self.val_images == 0 || self.test_images == 0 {
            return bad(format!(
                "every split needs at least one image (train {}, val {}, test {})",
                self.train_images, self.val_images, self.test_images
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            ));
        }
        Ok(())
    }

    fn validate_for_generation(&self) -> Result<()> {
        self.validate()?;
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("format", FORMAT_TAG);
        doc.set("n_images", self.n_images());
        doc.set("captions_per_image", self.captions_per_image);
        doc.set("image_dim", self.image_dim);
        doc.set("text_dim", self.text_dim);
        doc.set("latent_dim", self.latent_dim);
        doc.set("noise_sigma", self.noise_sigma);
        doc.set("train_images", self.train_images);
        doc.set("val_images", self.val_images);
        doc.set("test_images", self.test_images);
        doc.set("seed", self.seed);
        doc
    }

    pub fn from_kv(doc: &KvDoc, path: &Path) -> Result<Self> {
        if let Some(tag) = doc.get("format") {
            if tag != FORMAT_TAG {
                return Err(Error::format(
                    path,
                    0,
                    format!("unsupported format {tag:?}"),
                ));
            }
        }
        let manifest = DatasetManifest {
            captions_per_image: doc.parse_value("captions_per_image")?,
            image_dim: doc.parse_value("image_dim")?,
            text_dim: doc.parse_value("text_dim")?,
            latent_dim: doc.parse_opt("latent_dim")?.unwrap_or(0),
            noise_sigma: doc.parse_opt("noise_sigma")?.unwrap_or(0.0),
            train_images: doc.parse_value("train_images")?,
            val_images: doc.parse_value("val_images")?,
            test_images: doc.parse_value("test_images")?,
            seed: doc.parse_opt("seed")?.unwrap_or(0),
        };
        if let Some(n) = doc.parse_opt::<usize>("n_images")? {
            if n != manifest.n_images() {
                return Err(Error::format(
                    path,
                    0,
                    format!(
                        "n_images={n} but split sizes sum to {}",
                        manifest.n_images()
                    ),
                ));
            }
        }
        manifest
            .validate()
            .map_err(|e| Error::format(path, 0, e.to_string()))?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Usage(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }

    fn splits(&self) -> [&Split; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Fixed random projections from the latent space into each modality.
#[derive(Debug, Clone)]
pub struct Projections {
    /// `image_dim × latent_dim`
    pub image: Matrix,
    /// `text_dim × latent_dim`
    pub text: Matrix,
}

pub fn synthetic_projections(manifest: &DatasetManifest) -> Projections {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(manifest.seed, 0));
    let scale = 1.0 / (manifest.latent_dim as f64).sqrt();
    let mut draw = |rows: usize| {
        let data = (0..rows * manifest.latent_dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                scale * v
            })
            .collect::<Vec<f64>>();
        Matrix::new(rows, manifest.latent_dim, data).expect("sized above")
    };
    let image = draw(manifest.image_dim);
    let text = draw(manifest.text_dim);
    Projections { image, text }
}

fn project(proj: &Matrix, latent: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..proj.rows())
        .map(|r| {
            let clean: f64 = proj.row(r).iter().zip(latent).map(|(a, z)| a * z).sum();
            let noise: f64 = StandardNormal.sample(rng);
            clean + sigma * noise
        })
        .collect()
}

/// Builds a synthetic dataset in memory: each image draws a standard normal
/// latent, the image vector is `A·z + ε` and each caption is `B·z + ε'`.
/// Splits take disjoint ranges of group ids.
pub fn synthesize(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate_for_generation()?;
    let proj = synthetic_projections(manifest);
    let sigma = manifest.noise_sigma;
    let cpi = manifest.captions_per_image;
    let mut first_group = 0u64;
    let mut splits = Vec::with_capacity(3);
    for (s, name) in SPLIT_NAMES.iter().enumerate() {
        let n = manifest.split_images(name);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(manifest.seed, 1 + s as u64));
        let mut image_data = Vec::with_capacity(n * manifest.image_dim);
        let mut text_data = Vec::with_capacity(n * cpi * manifest.text_dim);
        let mut image_ids = Vec::with_capacity(n);
        let mut text_ids = Vec::with_capacity(n * cpi);
        let mut text_groups = Vec::with_capacity(n * cpi);
        for i in 0..n {
            let group = first_group + i as u64;
            let latent: Vec<f64> = (0..manifest.latent_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            image_data.extend(project(&proj.image, &latent, sigma, &mut rng));
            image_ids.push(group);
            for c in 0..cpi {
                text_data.extend(project(&proj.text, &latent, sigma, &mut rng));
                text_ids.push(group * cpi as u64 + c as u64);
                text_groups.push(group);
            }
        }
        first_group += n as u64;
        let images = ModalityTable {
            modality: Modality::Image,
            groups: image_ids.clone(),
            ids: image_ids,
            features: Matrix::new(n, manifest.image_dim, image_data)?,
        };
        let texts = ModalityTable {
            modality: Modality::Text,
            ids: text_ids,
            groups: text_groups,
            features: Matrix::new(n * cpi, manifest.text_dim, text_data)?,
        };
        splits.push(Split::new(*name, images, texts)?);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        manifest: manifest.clone(),
        train,
        val,
        test,
    })
}

/// Generates a synthetic dataset and writes it to `dir`. The manifest is
/// validated before anything touches the filesystem, and files are staged
/// in a sibling directory so a failure leaves no partial dataset.
pub fn generate_synthetic(manifest: &DatasetManifest, dir: &Path) -> Result<Dataset> {
    let dataset = synthesize(manifest)?;
    write_dataset(&dataset, dir)?;
    Ok(dataset)
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let staging = staging_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let written = (|| {
        dataset
            .manifest
            .to_kv()
            .write(&staging.join("manifest.txt"))?;
        for split in dataset.splits() {
            for table in [&split.images, &split.texts] {
                let stem = format!("{}.{}", split.name, table.modality);
                write_feature_blob(&staging.join(format!("{stem}.f64")), &table.features)?;
                let ids: Vec<(u64, u64)> = table
                    .ids
                    .iter()
                    .copied()
                    .zip(table.groups.iter().copied())
                    .collect();
                write_id_blob(&staging.join(format!("{stem}.ids")), &ids)?;
            }
        }
        Ok(())
    })();
    if let Err(e) = written {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

fn staging_path(dir: &Path) -> PathBuf {
    let mut name = dir
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

fn write_header(buf: &mut Vec<u8>, magic: &[u8; 8], rows: usize, cols: usize) {
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(rows as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
}

pub fn write_feature_blob(path: &Path, features: &Matrix) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + 8 * features.as_slice().len());
    write_header(&mut buf, &FEATURE_MAGIC, features.rows(), features.cols());
    for v in features.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_id_blob(path: &Path, ids: &[(u64, u64)]) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + 16 * ids.len());
    write_header(&mut buf, &ID_MAGIC, ids.len(), 2);
    for (id, group) in ids {
        buf.extend_from_slice(&id.to_le_bytes());
        buf.extend_from_slice(&group.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_header(path: &Path, bytes: &[u8], magic: &[u8; 8]) -> Result<(usize, usize)> {
    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated header ({} of 24 bytes)", bytes.len()),
        ));
    }
    if &bytes[..8] != magic {
        return Err(Error::format(
            path,
            0,
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..8])),
        ));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let payload = (bytes.len() as u64) - HEADER_LEN;
    let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(8));
    if expected != Some(payload) {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("header declares {rows}x{cols} values but payload holds {payload} bytes"),
        ));
    }
    Ok((rows as usize, cols as usize))
}

pub fn read_feature_blob(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (rows, cols) = read_header(path, &bytes, &FEATURE_MAGIC)?;
    let mut data = Vec::with_capacity(rows * cols);
    for (i, chunk) in bytes[HEADER_LEN as usize..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::format(
                path,
                HEADER_LEN + 8 * i as u64,
                format!("non-finite value {v}"),
            ));
        }
        data.push(v);
    }
    Matrix::new(rows, cols, data)
}

pub fn read_id_blob(path: &Path) -> Result<Vec<(u64, u64)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, cols) = read_header(path, &bytes, &ID_MAGIC)?;
    if cols != 2 {
        return Err(Error::format(
            path,
            16,
            format!("id blob must have 2 columns, found {cols}"),
        ));
    }
    Ok(bytes[HEADER_LEN as usize..]
        .chunks_exact(16)
        .map(|c| {
            (
                u64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                u64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
            )
        })
        .collect())
}

fn load_table(
    dir: &Path,
    split: &str,
    modality: Modality,
    rows: usize,
    dim: usize,
) -> Result<ModalityTable> {
    let stem = format!("{split}.{modality}");
    let feat_path = dir.join(format!("{stem}.f64"));
    let features = read_feature_blob(&feat_path)?;
    if features.cols() != dim {
        return Err(Error::format(
            &feat_path,
            16,
            format!(
                "manifest {modality}_dim={dim} but blob has {} columns",
                features.cols()
            ),
        ));
    }
    if features.rows() != rows {
        return Err(Error::format(
            &feat_path,
            8,
            format!(
                "manifest implies {rows} {modality} rows in {split} but blob has {}",
                features.rows()
            ),
        ));
    }
    let id_path = dir.join(format!("{stem}.ids"));
    let ids = read_id_blob(&id_path)?;
    if ids.len() != rows {
        return Err(Error::format(
            &id_path,
            8,
            format!("expected {rows} ids, found {}", ids.len()),
        ));
    }
    Ok(ModalityTable {
        modality,
        ids: ids.iter().map(|p| p.0).collect(),
        groups: ids.iter().map(|p| p.1).collect(),
        features,
    })
}

/// Reads a dataset directory written by [`write_dataset`] (or produced
/// externally in the same format).
pub fn load_features(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.txt");
    let manifest = DatasetManifest::from_kv(&KvDoc::read(&manifest_path)?, &manifest_path)?;
    let mut splits = Vec::with_capacity(3);
    for name in SPLIT_NAMES {
        let n = manifest.split_images(name);
        let images = load_table(dir, name, Modality::Image, n, manifest.image_dim)?;
        let texts = load_table(
            dir,
            name,
            Modality::Text,
            n * manifest.captions_per_image,
            manifest.text_dim,
        )?;
        let split = Split::new(name, images, texts)
            .map_err(|e| Error::format(dir.join(format!("{name}.text.ids")), 0, e.to_string()))?;
        splits.push(split);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        manifest,
        train,
        val,
        test,
    })
}

/// A mini-batch of matched pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub pairs: Vec<PairRef>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Seeded shuffle of the split's matched pairs, cut into batches of
/// `batch_size`. The trailing short batch is dropped.
pub fn batch_iterator(
    split: &Split,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    let mut pairs = split.matched_pairs()?;
    if batch_size == 0 || batch_size > pairs.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be between 1 and the {} pairs in split {}",
            pairs.len(),
            split.name
        )));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x00ba_7c40_0000_0000 ^ epoch as u64));
    pairs.shuffle(&mut rng);
    Ok(pairs
        .chunks_exact(batch_size)
        .map(|c| Batch { pairs: c.to_vec() })
        .collect())
}
