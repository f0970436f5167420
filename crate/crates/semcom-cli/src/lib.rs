//! Experiment orchestration: sweep expansion, parallel grid execution, and
//! result emission as deterministic CSV and standalone SVG charts.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};

use semcom::channel::Snr;
use semcom::datagen::GenConfig;
use semcom::error::{Error, Result};
use semcom::infotheory::{self, DiscreteJoint, MiQuery};
use semcom::losses::{self, LossHyperParams, ModalityViews};
use semcom::ndcore::{grad_check, Graph, NodeId, Tensor};
use semcom::pipeline::{run_experiment, MetricRecord, Method, RunConfig};

pub mod stages;
pub mod svg;

/// A sweep over run configurations: the base config with per-cell overrides.
/// Cells are the cartesian product method × SNR × label fraction × seed,
/// expanded in exactly that nesting order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub base: RunConfig,
    pub methods: Vec<Method>,
    pub snr_dbs: Vec<Snr>,
    pub label_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl ExperimentGrid {
    /// The accuracy-versus-rounds comparison: all four methods, two SNR
    /// levels, five seeds, fully labeled.
    pub fn accuracy_trend_grid() -> ExperimentGrid {
        ExperimentGrid {
            base: RunConfig::default_two_modality(Method::Proposed, 0),
            methods: Method::ALL.to_vec(),
            snr_dbs: vec![Snr::Db(10.0), Snr::Db(20.0)],
            label_fractions: vec![1.0],
            seeds: (0..5).collect(),
        }
    }

    /// The label-scarcity comparison: pre-training versus supervised-only
    /// when half the training labels are withheld.
    pub fn label_scarcity_grid() -> ExperimentGrid {
        ExperimentGrid {
            methods: vec![Method::Proposed, Method::Supervised],
            label_fractions: vec![0.5],
            ..ExperimentGrid::accuracy_trend_grid()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.methods.is_empty() {
            problems.push("methods sweep is empty".to_string());
        }
        if self.snr_dbs.is_empty() {
            problems.push("snr_dbs sweep is empty".to_string());
        }
        if self.label_fractions.is_empty() {
            problems.push("label_fractions sweep is empty".to_string());
        }
        if self.seeds.is_empty() {
            problems.push("seeds sweep is empty".to_string());
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        for cfg in self.expand() {
            cfg.validate()?;
        }
        Ok(())
    }

    /// All cell configs, in deterministic sweep order.
    pub fn expand(&self) -> Vec<RunConfig> {
        let mut cells = Vec::new();
        for &method in &self.methods {
            for &snr in &self.snr_dbs {
                for &lf in &self.label_fractions {
                    for &seed in &self.seeds {
                        let mut cfg = self.base.clone();
                        cfg.method = method;
                        if method == Method::Supervised {
                            cfg.epochs_pretrain = 0;
                        }
                        cfg.channel.snr_db = snr;
                        cfg.label_fraction = lf;
                        cfg.seed = seed;
                        cells.push(cfg);
                    }
                }
            }
        }
        cells
    }
}

/// Runs every grid cell (optionally across `threads` workers) and returns the
/// merged record stream sorted by (method, seed, round). The merge order is
/// the deterministic expansion order regardless of thread scheduling.
pub fn run_grid(grid: &ExperimentGrid, threads: usize) -> Result<Vec<MetricRecord>> {
    grid.validate()?;
    let cells = grid.expand();
    let workers = threads.max(1).min(cells.len());

    let mut outputs: Vec<Option<Result<Vec<MetricRecord>>>> = Vec::new();
    outputs.resize_with(cells.len(), || None);
    if workers <= 1 {
        for (slot, cfg) in outputs.iter_mut().zip(&cells) {
            *slot = Some(run_experiment(cfg).map(|out| out.records));
        }
    } else {
        let next = AtomicUsize::new(0);
        let shared = Mutex::new(&mut outputs);
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= cells.len() {
                        break;
                    }
                    let result = run_experiment(&cells[i]).map(|out| out.records);
                    shared.lock().expect("result store poisoned")[i] = Some(result);
                });
            }
        });
    }

    let mut records = Vec::new();
    for slot in outputs {
        records.extend(slot.expect("every cell ran")?);
    }
    sort_records(&mut records);
    Ok(records)
}

/// Canonical record order for emission: method name, then seed, then round.
/// The sort is stable, so snapshots within one run keep their insertion
/// order (pre-training rows, all at round 0, stay chronological).
pub fn sort_records(records: &mut [MetricRecord]) {
    records.sort_by(|a, b| {
        a.method
            .as_str()
            .cmp(b.method.as_str())
            .then(a.seed.cmp(&b.seed))
            .then(a.round.cmp(&b.round))
    });
}

/// Nine significant digits, always parseable as f64, byte-stable.
pub fn fmt_float(v: f64) -> String {
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    format!("{:.8e}", v)
}

fn fmt_snr(snr: Snr) -> String {
    match snr {
        Snr::Db(v) => fmt_float(v),
        Snr::Noiseless => "inf".to_string(),
    }
}

pub const CSV_HEADER: &str = "round,stage,method,seed,snr_db,label_fraction,train_loss,test_accuracy,uplink_scalars,downlink_scalars";

/// Renders the record stream as CSV text (header + one line per record).
pub fn render_csv(records: &[MetricRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::contract("no records to write".to_string()));
    }
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.round,
            r.stage.as_str(),
            r.method.as_str(),
            r.seed,
            fmt_snr(r.snr_db),
            fmt_float(r.label_fraction),
            fmt_float(r.train_loss),
            fmt_float(r.test_accuracy),
            r.uplink_scalars,
            r.downlink_scalars,
        ));
    }
    Ok(out)
}

/// Writes the CSV to disk; identical record streams produce byte-identical
/// files.
pub fn emit_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    let text = render_csv(records)?;
    fs::write(path, text)?;
    Ok(())
}

/// Artifacts a grid run leaves on disk.
#[derive(Debug, Clone)]
pub struct GridArtifacts {
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub config: PathBuf,
    pub records: Vec<MetricRecord>,
}

/// Runs the grid and writes metrics.csv, curves.svg, and a config snapshot
/// (replaying the snapshot reproduces the results byte for byte).
pub fn run_grid_to_dir(
    grid: &ExperimentGrid,
    out_dir: &Path,
    threads: usize,
) -> Result<GridArtifacts> {
    fs::create_dir_all(out_dir)?;
    // Snapshot the config before running so an interrupted grid can still be
    // diagnosed and replayed from the output directory.
    let config = out_dir.join("config.json");
    let mut snapshot = serde_json::to_string_pretty(grid)?;
    snapshot.push('\n');
    fs::write(&config, snapshot)?;
    let records = run_grid(grid, threads)?;
    let csv = out_dir.join("metrics.csv");
    emit_csv(&records, &csv)?;
    let svg_path = out_dir.join("curves.svg");
    svg::emit_svg(&records, &svg::SvgStyle::default(), &svg_path)?;
    Ok(GridArtifacts {
        csv,
        svg: svg_path,
        config,
        records,
    })
}

/// Parses a config file as a grid, falling back to a single run config
/// (wrapped into a one-cell grid) so both shapes are accepted.
pub fn load_grid(path: &Path) -> Result<ExperimentGrid> {
    let text = fs::read_to_string(path)?;
    let grid_err = match serde_json::from_str::<ExperimentGrid>(&text) {
        Ok(grid) => return Ok(grid),
        Err(e) => e,
    };
    match serde_json::from_str::<RunConfig>(&text) {
        Ok(cfg) => Ok(ExperimentGrid {
            methods: vec![cfg.method],
            snr_dbs: vec![cfg.channel.snr_db],
            label_fractions: vec![cfg.label_fraction],
            seeds: vec![cfg.seed],
            base: cfg,
        }),
        Err(cfg_err) => Err(Error::Validation(vec![
            format!("config is not an experiment grid: {grid_err}"),
            format!("config is not a run config either: {cfg_err}"),
        ])),
    }
}

/// Parses a config file as a run config, accepting a grid by taking its base
/// (with singleton sweeps applied when unambiguous).
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    if let Ok(cfg) = serde_json::from_str::<RunConfig>(&text) {
        return Ok(cfg);
    }
    let grid = load_grid(path)?;
    let cells = grid.expand();
    if cells.len() == 1 {
        return Ok(cells.into_iter().next().expect("one cell"));
    }
    Err(Error::Validation(vec![format!(
        "config expands to {} runs; this command needs exactly one",
        cells.len()
    )]))
}

/// Parses a config file for data generation, accepting a bare generator
/// config, a run config, or a grid.
pub fn load_gen_config(path: &Path) -> Result<GenConfig> {
    let text = fs::read_to_string(path)?;
    if let Ok(gen) = serde_json::from_str::<GenConfig>(&text) {
        return Ok(gen);
    }
    load_grid(path).map(|grid| grid.base.gen)
}

/// One loss's finite-difference verdict.
#[derive(Debug, Clone)]
pub struct LossGradReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Runs a central finite-difference check of every training loss at B=8,
/// K=4 random inputs with tolerance 1e-4, reporting per-loss worst errors.
pub fn loss_grad_reports() -> Result<Vec<LossGradReport>> {
    const B: usize = 8;
    const K: usize = 4;
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    let randn = |rows: usize, cols: usize, seed: u64| {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(rows, cols, &mut rng)
    };
    let hp = LossHyperParams::defaults(2, K);

    type LossFn<'a> = Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId> + 'a>;
    let z_tilde = randn(B, K, 1);
    let z_other = randn(B, K, 2);
    let z1_tilde = randn(B, K, 3);
    let z2 = randn(B, K, 4);
    let z2_tilde = randn(B, K, 5);
    let labels = [0usize, 1, 2, 3, 0, 1, 2, 3];
    let mask = [true, true, false, true, true, false, true, true];

    let hp_intra = hp.clone();
    let hp_cross = hp.clone();
    let hp_pre = hp.clone();
    let cases: Vec<(&'static str, Tensor, LossFn)> = vec![
        (
            "intra_loss",
            randn(B, K, 10),
            Box::new(move |g, x| {
                let zt = g.constant(&z_tilde);
                let c = losses::intra_corr(g, x, zt, 0)?;
                losses::intra_loss(g, &c, hp_intra.lambda_m[0])
            }),
        ),
        (
            "cross_loss",
            randn(B, K, 11),
            Box::new(move |g, x| {
                let zn = g.constant(&z_other);
                let c = losses::cross_corr(g, x, zn, 0, 1)?;
                losses::cross_loss(g, &c, &hp_cross)
            }),
        ),
        (
            "pretrain_loss",
            randn(B, K, 12),
            Box::new(move |g, x| {
                let views = vec![
                    ModalityViews {
                        z: x,
                        z_tilde: g.constant(&z1_tilde),
                    },
                    ModalityViews {
                        z: g.constant(&z2),
                        z_tilde: g.constant(&z2_tilde),
                    },
                ];
                losses::pretrain_loss(g, &views, &hp_pre)
            }),
        ),
        (
            "simclr_loss",
            randn(B, K, 13),
            Box::new(move |g, x| {
                let zt = g.constant(&randn(B, K, 14));
                losses::simclr_loss(g, x, zt, 0.5)
            }),
        ),
        (
            "barlow_twins_loss",
            randn(B, K, 15),
            Box::new(move |g, x| {
                let zt = g.constant(&randn(B, K, 16));
                losses::barlow_twins_loss(g, x, zt, 5e-3)
            }),
        ),
        (
            "cross_entropy",
            randn(B, K, 17),
            Box::new(move |g, x| {
                let lp = g.softmax_log_prob(x)?;
                losses::cross_entropy(g, lp, &labels, &mask)
            }),
        ),
    ];

    cases
        .into_iter()
        .map(|(name, point, f)| {
            let report = grad_check(f, &point, STEP, TOL)?;
            Ok(LossGradReport {
                name,
                max_rel_err: report.max_rel_err,
                pass: report.pass,
            })
        })
        .collect()
}

/// Outcome of the information-identity suite.
#[derive(Debug, Clone, Copy)]
pub struct MiSuiteReport {
    pub trials: u64,
    pub max_residual: f64,
    pub xor_interaction: f64,
    pub min_mi: f64,
}

/// Verifies the two information decomposition identities on `trials` random
/// joints (alphabet sizes 2–4) plus the XOR joint, returning the worst
/// residual, the XOR interaction information (exactly −1 bit when correct),
/// and the smallest plain MI seen (must be ≥ 0 up to rounding).
pub fn mi_identity_suite(trials: u64) -> Result<MiSuiteReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut max_residual: f64 = 0.0;
    let mut min_mi = f64::INFINITY;
    for _ in 0..trials {
        let a1 = rng.random_range(2..=4);
        let a2 = rng.random_range(2..=4);
        let ay = rng.random_range(2..=4);
        let joint = DiscreteJoint::random(a1, a2, ay, &mut rng);
        let report = infotheory::verify_decomposition(&joint);
        max_residual = max_residual.max(report.max_residual());
        for q in [
            MiQuery::MutualZ1Y,
            MiQuery::MutualZ2Y,
            MiQuery::CondZ1YGivenZ2,
            MiQuery::CondZ2YGivenZ1,
            MiQuery::JointZY,
        ] {
            min_mi = min_mi.min(infotheory::mi_query(&joint, q));
        }
    }
    // Y = Z¹ xor Z² with independent uniform inputs: the canonical
    // negative-interaction joint.
    let mut xor_probs = vec![0.0; 8];
    for z1 in 0..2usize {
        for z2 in 0..2usize {
            let y = z1 ^ z2;
            xor_probs[(z1 * 2 + z2) * 2 + y] = 0.25;
        }
    }
    let xor = DiscreteJoint::new(2, 2, 2, xor_probs)?;
    let xor_report = infotheory::verify_decomposition(&xor);
    max_residual = max_residual.max(xor_report.max_residual());
    let xor_interaction = infotheory::mi_query(&xor, MiQuery::Interaction);
    Ok(MiSuiteReport {
        trials,
        max_residual,
        xor_interaction,
        min_mi,
    })
}
