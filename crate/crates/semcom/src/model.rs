//! Per-device encoders, the server-side decoder, and their optimizer.
//!
//! Both model kinds are small dense MLPs: encoders map a modality's D
//! observed features to a K-dimensional semantic vector (relu hidden layers,
//! linear output so features can go negative for transmission), and the
//! decoder maps the concatenation of all received feature vectors to
//! log-probabilities over classes. Parameters live outside any computation
//! graph; every forward pass registers them as tracked leaves and returns the
//! bindings so the caller can route gradients into [`SgdOptimizer::step_model`].

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::graph::{Graph, NodeId};
use crate::ndcore::tensor::Tensor;

/// One dense layer; `weight` is (fan_in, fan_out) so the forward pass is
/// `x @ weight + bias` with `bias` a broadcast row.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A multilayer perceptron with relu hidden activations.
#[derive(Debug, Clone)]
pub struct Mlp {
    name: String,
    dims: Vec<usize>,
    pub layers: Vec<Layer>,
    seed: u64,
}

/// Output of one forward pass: the result node plus the graph bindings of
/// every parameter, in a fixed order (layer 0 weight, layer 0 bias, ...).
#[derive(Debug, Clone)]
pub struct MlpPass {
    pub output: NodeId,
    pub params: Vec<(String, NodeId)>,
}

impl Mlp {
    /// Initializes weights with fan-in-scaled uniform draws
    /// (limit √(6/fan_in), giving std √(2/fan_in)) and zero biases.
    /// Deterministic per `(dims, seed)`.
    pub fn init(name: impl Into<String>, dims: &[usize], seed: u64) -> Result<Mlp> {
        if dims.len() < 2 {
            return Err(Error::Validation(vec![format!(
                "layer dims need at least input and output sizes, got {dims:?}"
            )]));
        }
        if dims.contains(&0) {
            return Err(Error::Validation(vec![format!(
                "layer dims must be positive, got {dims:?}"
            )]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                Layer {
                    weight: Tensor::rand_uniform(fan_in, fan_out, limit, &mut rng).with_grad(),
                    bias: Tensor::zeros(1, fan_out).with_grad(),
                }
            })
            .collect();
        Ok(Mlp {
            name: name.into(),
            dims: dims.to_vec(),
            layers,
            seed,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("dims validated non-empty")
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn param_name(&self, layer: usize, which: &str) -> String {
        format!("{}.l{layer}.{which}", self.name)
    }

    /// Registers every parameter on `graph` once, returning the bindings in
    /// layer order. Running several forward passes over the same bindings
    /// accumulates all their gradients on one node per parameter, so a
    /// shared-weight multi-view loss needs exactly one optimizer step.
    pub fn register_params(&self, graph: &mut Graph) -> Vec<(String, NodeId)> {
        let mut params = Vec::with_capacity(2 * self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            params.push((self.param_name(i, "weight"), graph.leaf(&layer.weight)));
            params.push((self.param_name(i, "bias"), graph.leaf(&layer.bias)));
        }
        params
    }

    /// Forward pass over previously registered parameter bindings.
    /// `log_prob_head` appends a row-wise log-softmax after the final linear
    /// layer.
    pub fn forward_with(
        &self,
        graph: &mut Graph,
        x: NodeId,
        params: &[(String, NodeId)],
        log_prob_head: bool,
    ) -> Result<NodeId> {
        let (_, width) = graph.shape(x);
        if width != self.input_dim() {
            return Err(Error::dim(
                "mlp-forward",
                format!(
                    "{} expects input width {}, got {width}",
                    self.name,
                    self.input_dim()
                ),
            ));
        }
        if params.len() != 2 * self.layers.len() {
            return Err(Error::contract(format!(
                "{} has {} parameter tensors, got {} bindings",
                self.name,
                2 * self.layers.len(),
                params.len()
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            let w = params[2 * i].1;
            let b = params[2 * i + 1].1;
            let lin = graph.matmul(h, w)?;
            h = graph.add(lin, b)?;
            if i < last {
                h = graph.relu(h)?;
            }
        }
        if log_prob_head {
            h = graph.softmax_log_prob(h)?;
        }
        Ok(h)
    }

    /// Registers all parameters on `graph` and runs the forward pass.
    /// `log_prob_head` appends a row-wise log-softmax after the final linear
    /// layer.
    pub fn forward(&self, graph: &mut Graph, x: NodeId, log_prob_head: bool) -> Result<MlpPass> {
        let params = self.register_params(graph);
        let output = self.forward_with(graph, x, &params, log_prob_head)?;
        Ok(MlpPass { output, params })
    }

    /// Flat parameter count.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

/// Per-modality semantic encoder f(x) -> z with linear output.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub net: Mlp,
}

/// Server-side decoder g(z_concat) -> class log-probabilities.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub net: Mlp,
}

/// Builds an encoder with the given layer dims `[D, h..., K]`.
pub fn init_encoder(name: impl Into<String>, dims: &[usize], seed: u64) -> Result<Encoder> {
    Ok(Encoder {
        net: Mlp::init(name, dims, seed)?,
    })
}

/// Builds the decoder with layer dims `[M*K, h..., C]`.
pub fn init_decoder(name: impl Into<String>, dims: &[usize], seed: u64) -> Result<Decoder> {
    Ok(Decoder {
        net: Mlp::init(name, dims, seed)?,
    })
}

impl Encoder {
    /// Encodes a batch `x: B×D` to features `z: B×K` on the graph.
    pub fn encode(&self, graph: &mut Graph, x: NodeId) -> Result<MlpPass> {
        self.net.forward(graph, x, false)
    }

    pub fn feature_dim(&self) -> usize {
        self.net.output_dim()
    }
}

impl Decoder {
    /// Decodes concatenated received features `B×(M·K)` to log-probs `B×C`.
    /// Every output row exponentiates to a probability vector.
    pub fn decode(&self, graph: &mut Graph, z_concat: NodeId) -> Result<MlpPass> {
        self.net.forward(graph, z_concat, true)
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_dim()
    }
}

/// Optimizer settings; the learning rate follows a cosine decay over
/// `total_epochs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_epochs: usize,
    /// Mixed into model-initialization seeds by the training pipeline.
    pub seed: u64,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0) {
            problems.push(format!("lr = {} must be > 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum = {} must be in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            problems.push(format!("weight_decay = {} must be >= 0", self.weight_decay));
        }
        if self.total_epochs == 0 {
            problems.push("total_epochs must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// SGD with momentum, weight decay, and cosine learning-rate decay. Velocity
/// buffers are keyed by parameter name and persist across steps.
#[derive(Debug)]
pub struct SgdOptimizer {
    cfg: OptimConfig,
    velocity: HashMap<String, Vec<f64>>,
}

impl SgdOptimizer {
    pub fn new(cfg: OptimConfig) -> Result<SgdOptimizer> {
        cfg.validate()?;
        Ok(SgdOptimizer {
            cfg,
            velocity: HashMap::new(),
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    /// Cosine-decayed learning rate: `lr₀ · ½(1 + cos(π·epoch/total))`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let t = epoch as f64 / self.cfg.total_epochs as f64;
        self.cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Applies one update to every parameter of `model` using the gradients
    /// accumulated on `graph` for the bindings in `pass`:
    /// `v ← momentum·v + grad + wd·param; param ← param − lr(epoch)·v`.
    pub fn step_model(
        &mut self,
        graph: &Graph,
        pass: &MlpPass,
        model: &mut Mlp,
        epoch: usize,
    ) -> Result<()> {
        if pass.params.len() != 2 * model.layers.len() {
            return Err(Error::contract(format!(
                "binding count {} does not match model {} with {} layers",
                pass.params.len(),
                model.name,
                model.layers.len()
            )));
        }
        let lr = self.lr_at(epoch);
        for (i, layer) in model.layers.iter_mut().enumerate() {
            for (slot, param) in [&mut layer.weight, &mut layer.bias].into_iter().enumerate() {
                let (name, node) = &pass.params[2 * i + slot];
                let grad = graph
                    .grad(*node)
                    .ok_or_else(|| Error::contract(format!("no gradient for {name}")))?;
                let v = self
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; param.len()]);
                if v.len() != param.len() || grad.len() != param.len() {
                    return Err(Error::dim(
                        "sgd-step",
                        format!("buffer sizes disagree for {name}"),
                    ));
                }
                let data = param.data_mut();
                for j in 0..data.len() {
                    v[j] = self.cfg.momentum * v[j] + grad[j] + self.cfg.weight_decay * data[j];
                    data[j] -= lr * v[j];
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpMeta {
    pub name: String,
    pub dims: Vec<usize>,
}

/// JSON header written before the raw little-endian f64 parameter block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoders: Vec<MlpMeta>,
    pub decoder: MlpMeta,
    /// Tensor names in the order their data appears in the binary block.
    pub tensor_order: Vec<String>,
    pub seed: u64,
    pub stage: String,
}

fn push_tensors(meta_order: &mut Vec<String>, data: &mut Vec<u8>, mlp: &Mlp) {
    for (i, layer) in mlp.layers.iter().enumerate() {
        for (which, t) in [("weight", &layer.weight), ("bias", &layer.bias)] {
            meta_order.push(mlp.param_name(i, which));
            for &v in t.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

/// Saves all model parameters: one JSON header line, then the concatenated
/// parameter tensors as raw little-endian f64. Loading reproduces every bit.
pub fn save_checkpoint(
    path: &Path,
    encoders: &[Encoder],
    decoder: &Decoder,
    seed: u64,
    stage: &str,
) -> Result<()> {
    let mut tensor_order = Vec::new();
    let mut blob = Vec::new();
    for enc in encoders {
        push_tensors(&mut tensor_order, &mut blob, &enc.net);
    }
    push_tensors(&mut tensor_order, &mut blob, &decoder.net);
    let meta = CheckpointMeta {
        encoders: encoders
            .iter()
            .map(|e| MlpMeta {
                name: e.net.name.clone(),
                dims: e.net.dims.clone(),
            })
            .collect(),
        decoder: MlpMeta {
            name: decoder.net.name.clone(),
            dims: decoder.net.dims.clone(),
        },
        tensor_order,
        seed,
        stage: stage.to_string(),
    };
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer(&mut file, &meta)?;
    file.write_all(b"\n")?;
    file.write_all(&blob)?;
    Ok(())
}

fn read_mlp(meta: &MlpMeta, seed: u64, blob: &[u8], offset: &mut usize, path: &Path) -> Result<Mlp> {
    let mut mlp = Mlp::init(meta.name.clone(), &meta.dims, seed)?;
    for layer in mlp.layers.iter_mut() {
        for t in [&mut layer.weight, &mut layer.bias] {
            let n = t.len();
            let end = *offset + 8 * n;
            if end > blob.len() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    detail: "parameter block shorter than header promises".to_string(),
                });
            }
            for (j, chunk) in blob[*offset..end].chunks_exact(8).enumerate() {
                t.data_mut()[j] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
            *offset = end;
        }
    }
    Ok(mlp)
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(Vec<Encoder>, Decoder, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            detail: "missing header line".to_string(),
        })?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[..newline])?;
    let blob = &bytes[newline + 1..];

    let mut offset = 0;
    let mut encoders = Vec::with_capacity(meta.encoders.len());
    for enc_meta in &meta.encoders {
        encoders.push(Encoder {
            net: read_mlp(enc_meta, meta.seed, blob, &mut offset, path)?,
        });
    }
    let decoder = Decoder {
        net: read_mlp(&meta.decoder, meta.seed, blob, &mut offset, path)?,
    };
    if offset != blob.len() {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!(
                "parameter block has {} trailing bytes",
                blob.len() - offset
            ),
        });
    }
    Ok((encoders, decoder, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Mlp::init("enc", &[8, 4], 42).unwrap();
        let b = Mlp::init("enc", &[8, 4], 42).unwrap();
        assert_eq!(a.layers[0].weight.data(), b.layers[0].weight.data());
        let c = Mlp::init("enc", &[8, 4], 43).unwrap();
        assert_ne!(a.layers[0].weight.data(), c.layers[0].weight.data());
    }

    #[test]
    fn init_biases_are_zero() {
        let m = Mlp::init("enc", &[8, 16, 4], 1).unwrap();
        for layer in &m.layers {
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_weight_std_matches_fan_in_scaling() {
        let m = Mlp::init("enc", &[128, 64], 7).unwrap();
        let w = m.layers[0].weight.data();
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = (2.0 / 128.0f64).sqrt();
        let ratio = var.sqrt() / expected;
        assert!((0.9..1.1).contains(&ratio), "std ratio {ratio}");
    }

    #[test]
    fn init_rejects_degenerate_dims() {
        assert!(matches!(
            Mlp::init("enc", &[8], 0),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            Mlp::init("enc", &[8, 0, 4], 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn single_linear_layer_with_identity_weight_passes_input_through() {
        let mut enc = init_encoder("enc", &[3, 3], 0).unwrap();
        enc.net.layers[0].weight = Tensor::identity(3).with_grad();
        let x = Tensor::new(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let pass = enc.encode(&mut g, xi).unwrap();
        assert_eq!(g.value(pass.output), x.data());
    }

    #[test]
    fn encoder_rows_are_independent() {
        let enc = init_encoder("enc", &[4, 8, 3], 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = Tensor::randn(6, 4, &mut rng);

        let mut g = Graph::new();
        let xi = g.leaf(&batch);
        let full = enc.encode(&mut g, xi).unwrap();
        let full_out = g.value_tensor(full.output);

        let single = batch.gather_rows(&[3]).unwrap();
        let mut g2 = Graph::new();
        let xi2 = g2.leaf(&single);
        let one = enc.encode(&mut g2, xi2).unwrap();
        let one_out = g2.value_tensor(one.output);

        for j in 0..3 {
            assert_eq!(full_out.get(3, j).to_bits(), one_out.get(0, j).to_bits());
        }
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let enc = init_encoder("enc", &[4, 3], 0).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(2, 5));
        assert!(matches!(
            enc.encode(&mut g, x),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn decoder_rows_exponentiate_to_one() {
        let dec = init_decoder("dec", &[6, 8, 4], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Tensor::randn(5, 6, &mut rng);
        let mut g = Graph::new();
        let zi = g.leaf(&z);
        let pass = dec.decode(&mut g, zi).unwrap();
        let out = g.value_tensor(pass.output);
        for i in 0..5 {
            let total: f64 = (0..4).map(|j| out.get(i, j).exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "row {i} sums to {total}");
        }
    }

    #[test]
    fn zeroed_decoder_is_uniform() {
        let mut dec = init_decoder("dec", &[4, 5], 0).unwrap();
        dec.net.layers[0].weight = Tensor::zeros(4, 5).with_grad();
        let mut g = Graph::new();
        let z = g.leaf(&Tensor::filled(2, 4, 0.7));
        let pass = dec.decode(&mut g, z).unwrap();
        let expected = -(5.0f64).ln();
        for &v in g.value(pass.output) {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn log_probs_invariant_to_logit_shift() {
        // Shifting all logits by a constant must not change log-probs; feed
        // the shift through the bias of a final linear layer.
        let dec = init_decoder("dec", &[3, 4], 8).unwrap();
        let mut shifted = dec.clone();
        for v in shifted.net.layers[0].bias.data_mut() {
            *v += 5.0;
        }
        let z = Tensor::new(1, 3, vec![0.3, -0.9, 1.4]).unwrap();

        let mut g1 = Graph::new();
        let zi = g1.leaf(&z);
        let p1 = dec.decode(&mut g1, zi).unwrap();
        let mut g2 = Graph::new();
        let zi = g2.leaf(&z);
        let p2 = shifted.decode(&mut g2, zi).unwrap();

        for (a, b) in g1.value(p1.output).iter().zip(g2.value(p2.output)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn plain_config(lr: f64, momentum: f64, weight_decay: f64) -> OptimConfig {
        OptimConfig {
            lr,
            momentum,
            weight_decay,
            total_epochs: 100,
            seed: 0,
        }
    }

    /// One optimizer step against a loss of sum(x @ W + b).
    fn run_step(opt: &mut SgdOptimizer, model: &mut Mlp, epoch: usize) {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::filled(1, model.input_dim(), 1.0));
        let pass = model.forward(&mut g, x, false).unwrap();
        let loss = g.sum(pass.output).unwrap();
        g.backward(loss).unwrap();
        opt.step_model(&g, &pass, model, epoch).unwrap();
    }

    #[test]
    fn vanilla_sgd_moves_against_gradient() {
        // d(sum(x W))/dW = x^T * ones = all-ones for x = ones(1, n).
        let mut model = Mlp::init("m", &[2, 2], 0).unwrap();
        let before = model.layers[0].weight.data().to_vec();
        let mut opt = SgdOptimizer::new(plain_config(0.1, 0.0, 0.0)).unwrap();
        run_step(&mut opt, &mut model, 0);
        for (b, a) in before.iter().zip(model.layers[0].weight.data()) {
            assert!((b - a - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let opt = SgdOptimizer::new(plain_config(0.05, 0.9, 0.0)).unwrap();
        assert!((opt.lr_at(0) - 0.05).abs() < 1e-15);
        assert!(opt.lr_at(100).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_over_steps() {
        // Constant unit gradient, lr fixed at epoch 0, momentum 0.9:
        // updates lr*g then lr*1.9*g, total lr*2.9*g.
        let mut model = Mlp::init("m", &[2, 2], 0).unwrap();
        let before = model.layers[0].weight.data().to_vec();
        let cfg = OptimConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            total_epochs: 100,
            seed: 0,
        };
        let mut opt = SgdOptimizer::new(cfg).unwrap();
        run_step(&mut opt, &mut model, 0);
        run_step(&mut opt, &mut model, 0);
        for (b, a) in before.iter().zip(model.layers[0].weight.data()) {
            assert!((b - a - 0.1 * 2.9).abs() < 1e-12, "moved {}", b - a);
        }
    }

    #[test]
    fn weight_decay_shrinks_norm_without_gradient() {
        // Loss independent of the second layer's weight... simplest: zero
        // gradient via a loss that ignores the model is impossible here, so
        // check the decay term directly: grad 0 happens for bias of a layer
        // whose output is scaled by zero downstream. Instead verify
        // monotonic shrink by applying decay with the analytic update.
        let mut model = Mlp::init("m", &[2, 2], 1).unwrap();
        let mut opt = SgdOptimizer::new(plain_config(0.1, 0.0, 0.5)).unwrap();
        let norm = |m: &Mlp| {
            m.layers[0]
                .weight
                .data()
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
        };
        // Cancel the data gradient by feeding zeros: d(sum(0*W + b))/dW = 0.
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(1, 2));
        let pass = model.forward(&mut g, x, false).unwrap();
        let loss = g.sum(pass.output).unwrap();
        g.backward(loss).unwrap();
        let n0 = norm(&model);
        opt.step_model(&g, &pass, &mut model, 0).unwrap();
        let n1 = norm(&model);
        assert!(n1 < n0, "norm should shrink: {n0} -> {n1}");
        assert!((n1 - n0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_identity() {
        let cfg = OptimConfig {
            lr: 1e-300, // lr must be > 0; epoch at the schedule's zero instead
            momentum: 0.0,
            weight_decay: 0.0,
            total_epochs: 10,
            seed: 0,
        };
        let mut model = Mlp::init("m", &[2, 2], 2).unwrap();
        let before = model.layers[0].weight.data().to_vec();
        let mut opt = SgdOptimizer::new(cfg).unwrap();
        run_step(&mut opt, &mut model, 10); // cosine hits exactly zero here
        assert_eq!(before, model.layers[0].weight.data());
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut model = Mlp::init("m", &[2, 2], 3).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(1, 2));
        let pass = model.forward(&mut g, x, false).unwrap();
        // No backward pass: gradients absent.
        let mut opt = SgdOptimizer::new(plain_config(0.1, 0.0, 0.0)).unwrap();
        let err = opt.step_model(&g, &pass, &mut model, 0).unwrap_err();
        assert!(err.to_string().contains("m.l0.weight"), "{err}");
    }

    #[test]
    fn optim_config_validation() {
        let bad = OptimConfig {
            lr: 0.0,
            momentum: 1.0,
            weight_decay: -0.1,
            total_epochs: 0,
            seed: 0,
        };
        match bad.validate() {
            Err(Error::Validation(problems)) => assert_eq!(problems.len(), 4),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut encoders = vec![
            init_encoder("encoder0", &[8, 16, 4], 10).unwrap(),
            init_encoder("encoder1", &[8, 16, 4], 11).unwrap(),
        ];
        // Perturb away from init so the loader cannot cheat.
        encoders[0].net.layers[0].weight.data_mut()[3] = 0.123_456_789;
        let decoder = init_decoder("decoder", &[8, 16, 3], 12).unwrap();
        save_checkpoint(&path, &encoders, &decoder, 99, "pretrain").unwrap();

        let (loaded_enc, loaded_dec, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.stage, "pretrain");
        assert_eq!(meta.seed, 99);
        assert_eq!(loaded_enc.len(), 2);
        for (orig, loaded) in encoders.iter().zip(&loaded_enc) {
            for (lo, ll) in orig.net.layers.iter().zip(&loaded.net.layers) {
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&lo.weight), bits(&ll.weight));
                assert_eq!(bits(&lo.bias), bits(&ll.bias));
            }
        }
        assert_eq!(
            decoder.net.layers[1].weight.data(),
            loaded_dec.net.layers[1].weight.data()
        );
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let encoders = vec![init_encoder("encoder0", &[4, 3], 0).unwrap()];
        let decoder = init_decoder("decoder", &[3, 2], 1).unwrap();
        save_checkpoint(&path, &encoders, &decoder, 5, "finetune").unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Format { .. })
        ));
    }
}
