//! Training objectives.
//!
//! The pre-training stage aligns per-modality encoders with two correlation
//! losses: an intra-modal term that pushes each feature batch toward its
//! augmented view with decorrelated dimensions, and a cross-modal term that
//! splits the feature vector into a shared block (driven to identity
//! correlation across modalities) and a unique block (driven to zero, so each
//! modality keeps information the others lack). SimCLR and Barlow Twins serve
//! as single-modality baselines, and fine-tuning minimizes a masked
//! cross-entropy.
//!
//! All losses are built on the reverse-mode [`Graph`], so one `backward` call
//! yields exact gradients for every encoder parameter that fed the features.
//!
//! Note: correlations use cosine normalization without batch mean-centering.
//! The classic Barlow Twins recipe standardizes each feature dimension first;
//! here the un-centered form is used for every correlation-based loss so that
//! the intra-modal and cross-modal terms share a single definition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::graph::{Graph, NodeId};
use crate::ndcore::tensor::Tensor;

/// Which pair of feature batches a correlation matrix compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrKind {
    /// One modality against its augmented view.
    Intra { modality: usize },
    /// Two distinct modalities, un-augmented.
    Cross { m: usize, n: usize },
}

/// A K×K cosine-normalized correlation matrix living on a [`Graph`], so the
/// losses computed from it stay differentiable w.r.t. the feature batches.
#[derive(Debug, Clone, Copy)]
pub struct CorrelationMatrix {
    node: NodeId,
    dim: usize,
    kind: CorrKind,
}

impl CorrelationMatrix {
    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> CorrKind {
        self.kind
    }

    /// Current entries as a plain tensor.
    pub fn values(&self, graph: &Graph) -> Tensor {
        graph.value_tensor(self.node)
    }

    /// Wraps an existing K×K node (or hand-written values registered as a
    /// leaf) as a correlation matrix. Entries must already satisfy the
    /// Cauchy–Schwarz bound.
    pub fn from_node(graph: &Graph, node: NodeId, kind: CorrKind) -> Result<Self> {
        let (rows, cols) = graph.shape(node);
        if rows != cols {
            return Err(Error::dim(
                "correlation-matrix",
                format!("expected square matrix, got {rows}x{cols}"),
            ));
        }
        check_entry_range(graph.value(node))?;
        Ok(CorrelationMatrix {
            node,
            dim: rows,
            kind,
        })
    }
}

fn check_entry_range(values: &[f64]) -> Result<()> {
    const BOUND: f64 = 1.0 + 1e-9;
    for (i, &v) in values.iter().enumerate() {
        if !(-BOUND..=BOUND).contains(&v) {
            return Err(Error::contract(format!(
                "correlation entry {i} = {v} outside [-1, 1]"
            )));
        }
    }
    Ok(())
}

/// Hyperparameters shared by all training objectives.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossHyperParams {
    /// Off-diagonal weight of the intra-modal loss, one per modality.
    pub lambda_m: Vec<f64>,
    /// Off-diagonal weight inside the shared cross-modal block.
    pub lambda_sha: f64,
    /// Off-diagonal weight inside the unique cross-modal block.
    pub lambda_uni: f64,
    /// Leading feature dimensions treated as shared across modalities;
    /// the remaining K - k_sha dimensions are the unique block.
    pub k_sha: usize,
    /// SimCLR temperature.
    pub tau: f64,
    /// Barlow Twins off-diagonal weight.
    pub lambda_bt: f64,
}

impl LossHyperParams {
    /// Common-practice defaults for this loss family.
    pub fn defaults(num_modalities: usize, feature_dim: usize) -> Self {
        LossHyperParams {
            lambda_m: vec![5e-3; num_modalities],
            lambda_sha: 5e-3,
            lambda_uni: 5e-3,
            k_sha: (feature_dim / 2).max(1),
            tau: 0.5,
            lambda_bt: 5e-3,
        }
    }

    /// Checks every invariant against the modality count and feature
    /// dimension in use; collects all violations.
    pub fn validate(&self, num_modalities: usize, feature_dim: usize) -> Result<()> {
        let mut problems = Vec::new();
        if self.lambda_m.len() != num_modalities {
            problems.push(format!(
                "lambda_m has {} entries for {} modalities",
                self.lambda_m.len(),
                num_modalities
            ));
        }
        for (m, &l) in self.lambda_m.iter().enumerate() {
            if !(l > 0.0) {
                problems.push(format!("lambda_m[{m}] = {l} must be > 0"));
            }
        }
        if !(self.lambda_sha > 0.0) {
            problems.push(format!("lambda_sha = {} must be > 0", self.lambda_sha));
        }
        if !(self.lambda_uni > 0.0) {
            problems.push(format!("lambda_uni = {} must be > 0", self.lambda_uni));
        }
        if !(self.tau > 0.0) {
            problems.push(format!("tau = {} must be > 0", self.tau));
        }
        if !(self.lambda_bt > 0.0) {
            problems.push(format!("lambda_bt = {} must be > 0", self.lambda_bt));
        }
        if self.k_sha == 0 || self.k_sha >= feature_dim {
            problems.push(format!(
                "k_sha = {} must satisfy 0 < k_sha < {feature_dim}",
                self.k_sha
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// One modality's feature batch and its augmented view, both B×K nodes.
#[derive(Debug, Clone, Copy)]
pub struct ModalityViews {
    pub z: NodeId,
    pub z_tilde: NodeId,
}

/// Cosine-normalized correlation between two feature batches:
/// `C_ij = Σ_b a_bi b_bj / (‖a_·i‖ ‖b_·j‖)` with epsilon-guarded norms.
fn correlation(graph: &mut Graph, a: NodeId, b: NodeId, kind: CorrKind) -> Result<CorrelationMatrix> {
    let (batch, k) = graph.shape(a);
    if graph.shape(b) != (batch, k) {
        let (bb, bk) = graph.shape(b);
        return Err(Error::dim(
            "correlation",
            format!("feature batches disagree: {batch}x{k} vs {bb}x{bk}"),
        ));
    }
    if batch < 2 {
        return Err(Error::contract(format!(
            "correlation needs a batch of at least 2, got {batch}"
        )));
    }
    let at = graph.transpose(a)?;
    let gram = graph.matmul(at, b)?; // K×K, entry ij = Σ_b a_bi b_bj
    let norms_a = graph.batch_column_norm(a)?; // 1×K
    let norms_b = graph.batch_column_norm(b)?; // 1×K
    let norms_a_col = graph.transpose(norms_a)?; // K×1
    let denom = graph.matmul(norms_a_col, norms_b)?; // K×K outer product
    let c = graph.div_eps(gram, denom)?;
    CorrelationMatrix::from_node(graph, c, kind)
}

/// Correlation of one modality's batch with its augmented view.
pub fn intra_corr(
    graph: &mut Graph,
    z: NodeId,
    z_tilde: NodeId,
    modality: usize,
) -> Result<CorrelationMatrix> {
    correlation(graph, z, z_tilde, CorrKind::Intra { modality })
}

/// Correlation between two modalities' un-augmented batches.
pub fn cross_corr(
    graph: &mut Graph,
    z_m: NodeId,
    z_n: NodeId,
    m: usize,
    n: usize,
) -> Result<CorrelationMatrix> {
    correlation(graph, z_m, z_n, CorrKind::Cross { m, n })
}

/// `Σ_i (t_ii − C_ii)² + λ · Σ_{i≠j} C_ij²` over a square block, where the
/// diagonal target `t_ii` is 1 (identity) or 0 (suppression).
fn block_loss(
    graph: &mut Graph,
    block: NodeId,
    diag_target_one: bool,
    lambda: f64,
) -> Result<NodeId> {
    let (k, _) = graph.shape(block);
    let eye = graph.constant(&Tensor::identity(k));
    let diag = graph.mul(block, eye)?;
    let diag_term = if diag_target_one {
        let resid = graph.sub(eye, diag)?;
        let sq = graph.square(resid)?;
        graph.sum(sq)?
    } else {
        let sq = graph.square(diag)?;
        graph.sum(sq)?
    };
    let mut off_mask = Tensor::filled(k, k, 1.0);
    for i in 0..k {
        off_mask.set(i, i, 0.0);
    }
    let off_mask = graph.constant(&off_mask);
    let off = graph.mul(block, off_mask)?;
    let off_sq = graph.square(off)?;
    let off_sum = graph.sum(off_sq)?;
    let off_term = graph.scalar_mul(off_sum, lambda)?;
    graph.add(diag_term, off_term)
}

/// Intra-modal objective: diagonal alignment toward 1 plus weighted
/// off-diagonal decorrelation.
pub fn intra_loss(graph: &mut Graph, c: &CorrelationMatrix, lambda_m: f64) -> Result<NodeId> {
    if !matches!(c.kind, CorrKind::Intra { .. }) {
        return Err(Error::contract(
            "intra_loss expects an intra-modal correlation matrix".to_string(),
        ));
    }
    block_loss(graph, c.node, true, lambda_m)
}

/// Cross-modal objective over the two diagonal blocks of the correlation
/// matrix: the leading shared block is pushed toward identity (modalities
/// agree on shared dimensions) and the trailing unique block's diagonal is
/// pushed to zero (each modality keeps its own information). Entries
/// straddling the two blocks carry no penalty.
pub fn cross_loss(
    graph: &mut Graph,
    c: &CorrelationMatrix,
    hp: &LossHyperParams,
) -> Result<NodeId> {
    if !matches!(c.kind, CorrKind::Cross { .. }) {
        return Err(Error::contract(
            "cross_loss expects a cross-modal correlation matrix".to_string(),
        ));
    }
    let k = c.dim;
    if hp.k_sha == 0 || hp.k_sha >= k {
        return Err(Error::contract(format!(
            "k_sha = {} out of range for K = {k}",
            hp.k_sha
        )));
    }
    let k_uni = k - hp.k_sha;
    let sha = graph.slice_block(c.node, 0, 0, hp.k_sha, hp.k_sha)?;
    let uni = graph.slice_block(c.node, hp.k_sha, hp.k_sha, k_uni, k_uni)?;
    let l_sha = block_loss(graph, sha, true, hp.lambda_sha)?;
    let l_uni = block_loss(graph, uni, false, hp.lambda_uni)?;
    graph.add(l_sha, l_uni)
}

/// Full pre-training objective: intra-modal terms summed over modalities plus
/// cross-modal terms summed over ordered modality pairs. A single modality
/// degenerates to intra-only with a logged warning.
pub fn pretrain_loss(
    graph: &mut Graph,
    views: &[ModalityViews],
    hp: &LossHyperParams,
) -> Result<NodeId> {
    if views.is_empty() {
        return Err(Error::contract("pretrain_loss needs at least one modality".to_string()));
    }
    let shape = graph.shape(views[0].z);
    for (m, v) in views.iter().enumerate() {
        if graph.shape(v.z) != shape || graph.shape(v.z_tilde) != shape {
            return Err(Error::dim(
                "pretrain-loss",
                format!(
                    "modality {m} features {:?}/{:?} disagree with {:?}",
                    graph.shape(v.z),
                    graph.shape(v.z_tilde),
                    shape
                ),
            ));
        }
    }
    if hp.lambda_m.len() != views.len() {
        return Err(Error::contract(format!(
            "lambda_m has {} entries for {} modalities",
            hp.lambda_m.len(),
            views.len()
        )));
    }
    if views.len() == 1 {
        log::warn!("pre-training with a single modality: cross-modal term is empty");
    }

    let mut total: Option<NodeId> = None;
    for (m, v) in views.iter().enumerate() {
        let c = intra_corr(graph, v.z, v.z_tilde, m)?;
        let l = intra_loss(graph, &c, hp.lambda_m[m])?;
        total = Some(match total {
            Some(t) => graph.add(t, l)?,
            None => l,
        });
    }
    for m in 0..views.len() {
        for n in 0..views.len() {
            if m == n {
                continue;
            }
            let c = cross_corr(graph, views[m].z, views[n].z, m, n)?;
            let l = cross_loss(graph, &c, hp)?;
            total = Some(match total {
                Some(t) => graph.add(t, l)?,
                None => l,
            });
        }
    }
    Ok(total.expect("at least one modality"))
}

/// NT-Xent contrastive loss over the 2B pooled embeddings of a batch and its
/// augmented view. Each embedding is an anchor whose positive is its
/// augmented twin; the denominator runs over the 2B−1 non-self embeddings
/// with cosine similarity at temperature `tau`. Returns the mean over
/// anchors.
pub fn simclr_loss(graph: &mut Graph, z: NodeId, z_tilde: NodeId, tau: f64) -> Result<NodeId> {
    let (batch, k) = graph.shape(z);
    if graph.shape(z_tilde) != (batch, k) {
        let (bb, bk) = graph.shape(z_tilde);
        return Err(Error::dim(
            "simclr-loss",
            format!("views disagree: {batch}x{k} vs {bb}x{bk}"),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::contract(format!("temperature {tau} must be > 0")));
    }
    for (name, id) in [("z", z), ("z_tilde", z_tilde)] {
        let v = graph.value(id);
        for b in 0..batch {
            let norm2: f64 = v[b * k..(b + 1) * k].iter().map(|x| x * x).sum();
            if norm2 == 0.0 {
                log::warn!("simclr: zero embedding row {b} in {name}; cosine guarded to 0");
            }
        }
    }

    let n2 = 2 * batch;
    // Pool rows: U = [z; z_tilde] as a 2B×K matrix.
    let zt = graph.transpose(z)?;
    let ztt = graph.transpose(z_tilde)?;
    let pooled_t = graph.concat_cols(&[zt, ztt])?; // K×2B
    let pooled = graph.transpose(pooled_t)?; // 2B×K

    let norms = graph.batch_column_norm(pooled_t)?; // 1×2B row norms of pooled
    let norms_col = graph.transpose(norms)?;
    let denom = graph.matmul(norms_col, norms)?; // 2B×2B outer product
    let gram = graph.matmul(pooled, pooled_t)?; // 2B×2B
    let cos = graph.div_eps(gram, denom)?;
    let scaled = graph.scalar_mul(cos, 1.0 / tau)?;

    // Excluding self-similarity from the denominator: a -1e9 shift makes the
    // diagonal's exp underflow to exactly zero.
    let mut diag_shift = Tensor::zeros(n2, n2);
    for i in 0..n2 {
        diag_shift.set(i, i, -1e9);
    }
    let shift = graph.constant(&diag_shift);
    let masked = graph.add(scaled, shift)?;
    let lse = graph.log_sum_exp(masked)?; // 2B×1
    let lse_sum = graph.sum(lse)?;

    // Positive pairs: (i, i+B) and (i+B, i).
    let mut pos = Tensor::zeros(n2, n2);
    for i in 0..batch {
        pos.set(i, batch + i, 1.0);
        pos.set(batch + i, i, 1.0);
    }
    let pos_mask = graph.constant(&pos);
    let pos_vals = graph.mul(masked, pos_mask)?;
    let pos_sum = graph.sum(pos_vals)?;

    let diff = graph.sub(lse_sum, pos_sum)?;
    graph.scalar_mul(diff, 1.0 / n2 as f64)
}

/// Barlow Twins objective: the intra-modal correlation of a batch with its
/// augmented view, with diagonal alignment and off-diagonal redundancy
/// reduction. Identical functional form to [`intra_loss`].
pub fn barlow_twins_loss(
    graph: &mut Graph,
    z: NodeId,
    z_tilde: NodeId,
    lambda_bt: f64,
) -> Result<NodeId> {
    let c = intra_corr(graph, z, z_tilde, 0)?;
    intra_loss(graph, &c, lambda_bt)
}

/// Mean negative log-likelihood of the correct class over labeled rows.
/// `log_probs` must already be log-softmax outputs (each row exponentiates to
/// a distribution); rows with `labeled_mask[b] == false` are ignored.
pub fn cross_entropy(
    graph: &mut Graph,
    log_probs: NodeId,
    labels: &[usize],
    labeled_mask: &[bool],
) -> Result<NodeId> {
    let (batch, classes) = graph.shape(log_probs);
    if labels.len() != batch || labeled_mask.len() != batch {
        return Err(Error::dim(
            "cross-entropy",
            format!(
                "batch {batch} vs {} labels, {} mask entries",
                labels.len(),
                labeled_mask.len()
            ),
        ));
    }
    let labeled = labeled_mask.iter().filter(|&&m| m).count();
    if labeled == 0 {
        return Err(Error::contract(
            "cross-entropy over a batch with no labeled rows".to_string(),
        ));
    }
    let mut weights = Tensor::zeros(batch, classes);
    for b in 0..batch {
        if !labeled_mask[b] {
            continue;
        }
        if labels[b] >= classes {
            return Err(Error::contract(format!(
                "label {} out of range for {classes} classes",
                labels[b]
            )));
        }
        weights.set(b, labels[b], -1.0 / labeled as f64);
    }
    let w = graph.constant(&weights);
    let picked = graph.mul(log_probs, w)?;
    graph.sum(picked)
}
