//! Complex AWGN feature channel with optional Rayleigh fading.
//!
//! Features are power-normalized to unit average per-dimension power before
//! transmission, so `snr_db` fixes the noise variance directly:
//! `σ² = 10^(−snr_db/10)`. The receiver applies zero-forcing equalization
//! with perfect channel knowledge and projects back to the real line, which
//! turns the whole channel into an additive corruption of the normalized
//! features. During training the noise realization and the normalization
//! scale are constants of the round, so gradients pass through the channel as
//! `scale · identity`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::ndcore::graph::{Graph, NodeId};
use crate::ndcore::tensor::Tensor;

/// Signal-to-noise ratio; `Noiseless` is the +∞ dB sentinel, written as the
/// string `"noiseless"` in configs because JSON has no infinity literal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Db(f64),
    Noiseless,
}

impl Snr {
    /// Noise variance per complex dimension under unit signal power.
    pub fn sigma2(self) -> f64 {
        match self {
            Snr::Db(db) => 10f64.powf(-db / 10.0),
            Snr::Noiseless => 0.0,
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Snr::Db(db) if !db.is_finite() => Err(Error::Validation(vec![format!(
                "snr_db = {db} must be finite (use \"noiseless\" for the infinite-SNR sentinel)"
            )])),
            _ => Ok(()),
        }
    }
}

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Snr::Db(db) => serializer.serialize_f64(*db),
            Snr::Noiseless => serializer.serialize_str("noiseless"),
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct SnrVisitor;
        impl<'de> Visitor<'de> for SnrVisitor {
            type Value = Snr;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number of dB or the string \"noiseless\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Snr, E> {
                Ok(Snr::Db(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Snr, E> {
                Ok(Snr::Db(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Snr, E> {
                Ok(Snr::Db(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Snr, E> {
                if v == "noiseless" {
                    Ok(Snr::Noiseless)
                } else {
                    Err(E::custom(format!(
                        "unknown SNR sentinel {v:?}; expected \"noiseless\" or a number"
                    )))
                }
            }
        }
        deserializer.deserialize_any(SnrVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fading {
    /// The configured coefficient is used for every round.
    Fixed,
    /// A fresh h ~ CN(0, 1) is drawn per transmission.
    RayleighPerRound,
}

/// Channel parameters for all modalities.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// Fixed per-modality coefficients as `[re, im]` pairs.
    pub coefficients: Vec<[f64; 2]>,
    pub snr_db: Snr,
    pub fading: Fading,
}

impl ChannelConfig {
    /// Pure AWGN: h = 1 for every modality.
    pub fn awgn(num_modalities: usize, snr_db: Snr) -> ChannelConfig {
        ChannelConfig {
            coefficients: vec![[1.0, 0.0]; num_modalities],
            snr_db,
            fading: Fading::Fixed,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.coefficients.len()
    }

    pub fn coefficient(&self, modality: usize) -> Complex64 {
        let [re, im] = self.coefficients[modality];
        Complex64::new(re, im)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.coefficients.is_empty() {
            problems.push("at least one modality coefficient required".to_string());
        }
        if let Err(Error::Validation(mut p)) = self.snr_db.validate() {
            problems.append(&mut p);
        }
        for (m, &[re, im]) in self.coefficients.iter().enumerate() {
            if !re.is_finite() || !im.is_finite() {
                problems.push(format!("coefficient[{m}] = [{re}, {im}] must be finite"));
            } else if self.fading == Fading::Fixed && re == 0.0 && im == 0.0 {
                problems.push(format!(
                    "coefficient[{m}] is zero; a fixed channel must have |h| > 0"
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// One modality's channel realization for one batch.
#[derive(Debug, Clone)]
pub struct ChannelOutput {
    /// Real part of the received complex features, B×K.
    pub received_re: Tensor,
    /// Imaginary part, B×K.
    pub received_im: Tensor,
    /// Realized coefficient (equals the configured one under fixed fading).
    pub h: Complex64,
    /// Noise variance per complex dimension actually applied.
    pub sigma2: f64,
    /// Scale that power-normalized the input (1 when skipped).
    pub norm_scale: f64,
    /// True when the batch was all-zero and normalization was skipped.
    pub normalization_skipped: bool,
}

/// Sends a real feature batch through the channel: power-normalize, scale by
/// the (possibly faded) coefficient, add circular complex Gaussian noise with
/// per-real-component variance σ²/2. Noiseless transmissions draw nothing
/// from `rng`, so a noiseless run is bit-identical to one with the channel
/// disabled.
pub fn transmit<R: Rng>(
    z: &Tensor,
    cfg: &ChannelConfig,
    modality: usize,
    rng: &mut R,
) -> Result<ChannelOutput> {
    if modality >= cfg.coefficients.len() {
        return Err(Error::contract(format!(
            "modality {modality} out of range for {} configured coefficients",
            cfg.coefficients.len()
        )));
    }
    let mean_power = z.mean_square();
    let (norm_scale, normalization_skipped) = if mean_power == 0.0 {
        log::warn!("transmit: all-zero feature batch; power normalization skipped");
        (1.0, true)
    } else {
        (1.0 / mean_power.sqrt(), false)
    };

    let h = match cfg.fading {
        Fading::Fixed => cfg.coefficient(modality),
        Fading::RayleighPerRound => {
            let scale = (0.5f64).sqrt();
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(scale * re, scale * im)
        }
    };

    let sigma2 = cfg.snr_db.sigma2();
    let sd = (sigma2 / 2.0).sqrt();
    let (rows, cols) = z.shape();
    let mut re = Vec::with_capacity(z.len());
    let mut im = Vec::with_capacity(z.len());
    for &v in z.data() {
        let zn = norm_scale * v;
        let (n_re, n_im) = if sigma2 > 0.0 {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            (sd * a, sd * b)
        } else {
            (0.0, 0.0)
        };
        re.push(h.re * zn + n_re);
        im.push(h.im * zn + n_im);
    }
    Ok(ChannelOutput {
        received_re: Tensor::new(rows, cols, re)?,
        received_im: Tensor::new(rows, cols, im)?,
        h,
        sigma2,
        norm_scale,
        normalization_skipped,
    })
}

/// Zero-forcing equalization with real projection:
/// `Re(conj(h) · ẑ) / |h|² = z_norm + Re(conj(h) · n) / |h|²`.
pub fn equalize(out: &ChannelOutput) -> Result<Tensor> {
    let h2 = out.h.norm_sqr();
    if h2 == 0.0 {
        return Err(Error::ChannelOutage);
    }
    let (rows, cols) = out.received_re.shape();
    let data = out
        .received_re
        .data()
        .iter()
        .zip(out.received_im.data())
        .map(|(&re, &im)| (out.h.re * re + out.h.im * im) / h2)
        .collect();
    Tensor::new(rows, cols, data)
}

/// Splices the equalized channel into a computation graph: the returned node
/// evaluates to `equalized` and back-propagates `norm_scale · identity` into
/// `z_node`, treating the noise realization and the normalization scale as
/// constants of the round.
pub fn equalize_on_graph(
    graph: &mut Graph,
    z_node: NodeId,
    out: &ChannelOutput,
) -> Result<NodeId> {
    let equalized = equalize(out)?;
    let (rows, cols) = graph.shape(z_node);
    if equalized.shape() != (rows, cols) {
        return Err(Error::dim(
            "equalize-on-graph",
            format!(
                "channel output {:?} does not match feature node {rows}x{cols}",
                equalized.shape()
            ),
        ));
    }
    let scaled = graph.scalar_mul(z_node, out.norm_scale)?;
    // Residual = equalized − scale·z, exactly zero for a noiseless identity
    // channel, so the node's forward value reproduces `equalized` and its
    // backward pass sees only the scale.
    let mut residual = equalized;
    for (r, &s) in residual.data_mut().iter_mut().zip(graph.value(scaled)) {
        *r -= s;
    }
    let shift = graph.constant(&residual);
    graph.add(scaled, shift)
}

/// Column-wise concatenation of per-modality feature batches, in order.
pub fn concat_features(features: &[&Tensor]) -> Result<Tensor> {
    if features.is_empty() {
        return Err(Error::dim("concat-features", "no inputs".to_string()));
    }
    let rows = features[0].rows();
    let mut total_cols = 0;
    for f in features {
        if f.rows() != rows {
            return Err(Error::dim(
                "concat-features",
                format!("row counts disagree: {rows} vs {}", f.rows()),
            ));
        }
        total_cols += f.cols();
    }
    let mut data = vec![0.0; rows * total_cols];
    let mut offset = 0;
    for f in features {
        let c = f.cols();
        for i in 0..rows {
            data[i * total_cols + offset..i * total_cols + offset + c]
                .copy_from_slice(f.row_slice(i));
        }
        offset += c;
    }
    Tensor::new(rows, total_cols, data)
}
