//! Synthetic multi-modality dataset with a ground-truth shared/unique
//! information split.
//!
//! Every sample is built from one shared latent vector plus one unique latent
//! vector per modality. Class information is routed through the shared latent
//! with fraction `shared_fraction` (ρ) and through the unique latents with
//! fraction 1−ρ, so the amount of task information that only one modality
//! carries is a generator knob rather than an unknown property of the data.
//! Each modality observes its latents through a fixed seeded linear map with
//! orthonormal columns (an isometric embedding into D observed dimensions —
//! orthonormal *rows* are impossible when the latent count is below D) plus
//! Gaussian observation noise.

use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::tensor::Tensor;

/// Generator parameters. One entry per modality in `unique_dims` and
/// `observed_dims`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Dimension of the latent shared by all modalities.
    pub shared_dim: usize,
    /// Per-modality dimensions of the modality-unique latent.
    pub unique_dims: Vec<usize>,
    /// Per-modality observed feature dimensions.
    pub observed_dims: Vec<usize>,
    /// Distance scale between class means in latent space.
    pub separation: f64,
    /// ρ: fraction of class-discriminative energy routed through the shared
    /// latent; 1−ρ goes through the unique latents.
    pub shared_fraction: f64,
    /// Standard deviation of observation noise added after mixing.
    pub noise_scale: f64,
    pub seed: u64,
}

impl GenConfig {
    /// Two modalities, 10 classes, 2000 train samples, an even shared/unique
    /// split — the configuration the experiment defaults build on.
    pub fn default_two_modality() -> GenConfig {
        GenConfig {
            num_classes: 10,
            samples_per_class: 200,
            shared_dim: 4,
            unique_dims: vec![4, 4],
            observed_dims: vec![32, 32],
            separation: 3.0,
            shared_fraction: 0.5,
            noise_scale: 0.5,
            seed: 7,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.observed_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes < 2 {
            problems.push(format!("num_classes = {} must be >= 2", self.num_classes));
        }
        if self.samples_per_class == 0 {
            problems.push("samples_per_class must be positive".to_string());
        }
        if self.observed_dims.is_empty() {
            problems.push("observed_dims must name at least one modality".to_string());
        }
        if self.unique_dims.len() != self.observed_dims.len() {
            problems.push(format!(
                "unique_dims has {} entries but observed_dims has {}",
                self.unique_dims.len(),
                self.observed_dims.len()
            ));
        }
        for (m, (&du, &d)) in self
            .unique_dims
            .iter()
            .zip(&self.observed_dims)
            .enumerate()
        {
            if self.shared_dim + du > d {
                problems.push(format!(
                    "modality {m}: shared_dim {} + unique_dims {du} exceeds observed_dims {d}",
                    self.shared_dim
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            problems.push(format!(
                "shared_fraction = {} must be in [0, 1]",
                self.shared_fraction
            ));
        }
        if !(self.separation >= 0.0) {
            problems.push(format!("separation = {} must be >= 0", self.separation));
        }
        if !(self.noise_scale >= 0.0) {
            problems.push(format!("noise_scale = {} must be >= 0", self.noise_scale));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Augmentation parameters: additive Gaussian jitter and coordinate dropout
/// with inverse-keep-probability rescaling.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugConfig {
    /// γ: standard deviation of the additive jitter.
    pub jitter: f64,
    /// p: probability of zeroing each coordinate.
    pub dropout: f64,
    /// RNG stream tag the training loop uses to derive the augmentation rng.
    pub seed_stream: u64,
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.jitter >= 0.0) {
            problems.push(format!("jitter = {} must be >= 0", self.jitter));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout = {} must be in [0, 1)", self.dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Row-aligned multi-modality samples with labels and a labeled/unlabeled
/// mask.
#[derive(Debug, Clone)]
pub struct MultiModalDataset {
    pub modalities: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub labeled_mask: Vec<bool>,
    pub split: Split,
}

impl MultiModalDataset {
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Gathers one mini-batch by row indices, preserving row alignment across
    /// modalities, labels, and mask.
    pub fn batch(&self, rows: &[usize]) -> Result<(Vec<Tensor>, Vec<usize>, Vec<bool>)> {
        let mats = self
            .modalities
            .iter()
            .map(|m| m.gather_rows(rows))
            .collect::<Result<Vec<_>>>()?;
        let mut labels = Vec::with_capacity(rows.len());
        let mut mask = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.labels.len() {
                return Err(Error::contract(format!(
                    "row {r} out of range for {} samples",
                    self.labels.len()
                )));
            }
            labels.push(self.labels[r]);
            mask.push(self.labeled_mask[r]);
        }
        Ok((mats, labels, mask))
    }

    fn check_consistent(&self) -> Result<()> {
        let n = self.labels.len();
        for (m, t) in self.modalities.iter().enumerate() {
            if t.rows() != n {
                return Err(Error::contract(format!(
                    "modality {m} has {} rows for {n} labels",
                    t.rows()
                )));
            }
        }
        if self.labeled_mask.len() != n {
            return Err(Error::contract(format!(
                "labeled_mask has {} entries for {n} samples",
                self.labeled_mask.len()
            )));
        }
        Ok(())
    }
}

/// Gram-Schmidt on a seeded Gaussian matrix: returns `rows × cols` with
/// orthonormal columns (requires cols ≤ rows).
fn orthonormal_columns<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    assert!(cols <= rows, "cannot fit {cols} orthonormal columns in R^{rows}");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // essentially never: redraw a degenerate direction
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        basis.push(v);
    }
    let mut t = Tensor::zeros(rows, cols);
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            t.set(i, j, x);
        }
    }
    t
}

struct LatentModel {
    /// Per-class shared-latent means, C × shared_dim.
    shared_means: Vec<Vec<f64>>,
    /// Per-modality per-class unique-latent means.
    unique_means: Vec<Vec<Vec<f64>>>,
    /// Per-modality mixing matrix with orthonormal columns.
    mixing: Vec<Tensor>,
}

fn build_latent_model(cfg: &GenConfig) -> LatentModel {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let normal = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect()
    };
    let shared_means = (0..cfg.num_classes)
        .map(|_| normal(&mut rng, cfg.shared_dim))
        .collect();
    let unique_means = cfg
        .unique_dims
        .iter()
        .map(|&du| {
            (0..cfg.num_classes)
                .map(|_| normal(&mut rng, du))
                .collect()
        })
        .collect();
    let mixing = cfg
        .unique_dims
        .iter()
        .zip(&cfg.observed_dims)
        .map(|(&du, &d)| orthonormal_columns(d, cfg.shared_dim + du, &mut rng))
        .collect();
    LatentModel {
        shared_means,
        unique_means,
        mixing,
    }
}

fn sample_split(cfg: &GenConfig, model: &LatentModel, split: Split) -> MultiModalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let n = cfg.num_classes * cfg.samples_per_class;
    let mut mats: Vec<Tensor> = cfg
        .observed_dims
        .iter()
        .map(|&d| Tensor::zeros(n, d))
        .collect();
    let mut labels = Vec::with_capacity(n);
    let shared_gain = cfg.shared_fraction * cfg.separation;
    let unique_gain = (1.0 - cfg.shared_fraction) * cfg.separation;

    let draw = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(rand_distr::StandardNormal) };
    for row in 0..n {
        let y = row / cfg.samples_per_class;
        labels.push(y);
        let shared: Vec<f64> = model.shared_means[y]
            .iter()
            .map(|&mu| shared_gain * mu + draw(&mut rng))
            .collect();
        for (m, mat) in mats.iter_mut().enumerate() {
            let unique: Vec<f64> = model.unique_means[m][y]
                .iter()
                .map(|&nu| unique_gain * nu + draw(&mut rng))
                .collect();
            let latent: Vec<f64> = shared.iter().chain(&unique).copied().collect();
            let mix = &model.mixing[m];
            let d = cfg.observed_dims[m];
            for i in 0..d {
                let mut acc = 0.0;
                for (j, &l) in latent.iter().enumerate() {
                    acc += mix.get(i, j) * l;
                }
                acc += cfg.noise_scale * draw(&mut rng);
                mat.set(row, i, acc);
            }
        }
    }
    MultiModalDataset {
        modalities: mats,
        labels,
        labeled_mask: vec![true; n],
        split,
    }
}

/// Generates balanced, fully labeled train and test splits from disjoint RNG
/// streams of the same latent model. Deterministic per config.
pub fn gen_dataset(cfg: &GenConfig) -> Result<(MultiModalDataset, MultiModalDataset)> {
    cfg.validate()?;
    let model = build_latent_model(cfg);
    let train = sample_split(cfg, &model, Split::Train);
    let test = sample_split(cfg, &model, Split::Test);
    Ok((train, test))
}

/// Produces augmented copies `x̃ = (x + γ·η) ⊙ mask / (1−p)`; the input
/// batch is untouched.
pub fn augment<R: Rng>(batch: &[Tensor], aug: &AugConfig, rng: &mut R) -> Result<Vec<Tensor>> {
    aug.validate()?;
    if batch.is_empty() {
        return Err(Error::contract("augment on an empty batch".to_string()));
    }
    let keep = 1.0 - aug.dropout;
    let mut out = Vec::with_capacity(batch.len());
    for x in batch {
        let mut data = Vec::with_capacity(x.len());
        for &v in x.data() {
            let mut t = v;
            if aug.jitter > 0.0 {
                let eta: f64 = rng.sample(rand_distr::StandardNormal);
                t += aug.jitter * eta;
            }
            if aug.dropout > 0.0 {
                if rng.random::<f64>() < aug.dropout {
                    t = 0.0;
                } else {
                    t /= keep;
                }
            }
            data.push(t);
        }
        out.push(Tensor::new(x.rows(), x.cols(), data)?);
    }
    Ok(out)
}

/// Returns a copy of the dataset where only a class-stratified `fraction` of
/// rows keep their labels. When the fraction cannot cover every class the
/// selection falls back to an unstratified uniform draw with a warning.
pub fn subset_labels(
    dataset: &MultiModalDataset,
    fraction: f64,
    seed: u64,
) -> Result<MultiModalDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(vec![format!(
            "label fraction = {fraction} must be in (0, 1]"
        )]));
    }
    dataset.check_consistent()?;
    let n = dataset.num_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; n];

    let target_total = ((fraction * n as f64).round() as usize).max(1);
    if target_total < dataset.labels.iter().copied().max().map_or(1, |c| c + 1) {
        log::warn!(
            "label fraction {fraction} cannot cover every class ({target_total} labels); \
             falling back to unstratified selection"
        );
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut rng);
        for &r in rows.iter().take(target_total) {
            mask[r] = true;
        }
    } else {
        let num_classes = dataset.labels.iter().copied().max().unwrap_or(0) + 1;
        for c in 0..num_classes {
            let mut rows: Vec<usize> = (0..n).filter(|&r| dataset.labels[r] == c).collect();
            if rows.is_empty() {
                continue;
            }
            let k = ((fraction * rows.len() as f64).round() as usize)
                .clamp(1, rows.len());
            rows.shuffle(&mut rng);
            for &r in rows.iter().take(k) {
                mask[r] = true;
            }
        }
    }
    Ok(MultiModalDataset {
        modalities: dataset.modalities.clone(),
        labels: dataset.labels.clone(),
        labeled_mask: mask,
        split: dataset.split,
    })
}

/// Writes one `modality_{m}.csv` per modality (header `f0..f{D-1}`) plus
/// `labels.csv` with columns `label,labeled_mask`.
pub fn export_csv(dataset: &MultiModalDataset, dir: &Path) -> Result<()> {
    dataset.check_consistent()?;
    std::fs::create_dir_all(dir)?;
    for (m, t) in dataset.modalities.iter().enumerate() {
        let mut file = std::fs::File::create(dir.join(format!("modality_{m}.csv")))?;
        let header: Vec<String> = (0..t.cols()).map(|j| format!("f{j}")).collect();
        writeln!(file, "{}", header.join(","))?;
        for i in 0..t.rows() {
            let row: Vec<String> = t.row_slice(i).iter().map(|v| format!("{v}")).collect();
            writeln!(file, "{}", row.join(","))?;
        }
    }
    let mut file = std::fs::File::create(dir.join("labels.csv"))?;
    writeln!(file, "label,labeled_mask")?;
    for (y, &lab) in dataset.labels.iter().zip(&dataset.labeled_mask) {
        writeln!(file, "{y},{}", if lab { 1 } else { 0 })?;
    }
    Ok(())
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Reads a dataset written by [`export_csv`], probing `modality_0.csv`,
/// `modality_1.csv`, ... until a file is missing.
pub fn import_csv(dir: &Path, split: Split) -> Result<MultiModalDataset> {
    let mut modalities = Vec::new();
    for m in 0.. {
        let path = dir.join(format!("modality_{m}.csv"));
        if !path.exists() {
            break;
        }
        let file = BufReader::new(std::fs::File::open(&path)?);
        let mut lines = file.lines();
        let header = lines
            .next()
            .ok_or_else(|| format_err(&path, "empty file"))??;
        let cols = header.split(',').count();
        let mut data = Vec::new();
        let mut rows = 0;
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut count = 0;
            for field in line.split(',') {
                let v: f64 = field
                    .parse()
                    .map_err(|e| format_err(&path, format!("bad float {field:?}: {e}")))?;
                data.push(v);
                count += 1;
            }
            if count != cols {
                return Err(format_err(
                    &path,
                    format!("row {rows} has {count} fields, header has {cols}"),
                ));
            }
            rows += 1;
        }
        modalities.push(Tensor::new(rows, cols, data)?);
    }
    if modalities.is_empty() {
        return Err(format_err(
            &dir.join("modality_0.csv"),
            "no modality files found",
        ));
    }

    let labels_path = dir.join("labels.csv");
    let file = BufReader::new(std::fs::File::open(&labels_path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| format_err(&labels_path, "empty file"))??;
    if header.trim() != "label,labeled_mask" {
        return Err(format_err(
            &labels_path,
            format!("unexpected header {header:?}"),
        ));
    }
    let mut labels = Vec::new();
    let mut labeled_mask = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (y, m) = line
            .split_once(',')
            .ok_or_else(|| format_err(&labels_path, format!("bad row {line:?}")))?;
        labels.push(
            y.parse::<usize>()
                .map_err(|e| format_err(&labels_path, format!("bad label {y:?}: {e}")))?,
        );
        labeled_mask.push(match m.trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(format_err(
                    &labels_path,
                    format!("bad labeled_mask {other:?}"),
                ))
            }
        });
    }
    let ds = MultiModalDataset {
        modalities,
        labels,
        labeled_mask,
        split,
    };
    ds.check_consistent()?;
    Ok(ds)
}
