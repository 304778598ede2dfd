//! Reproduction harness: configuration, reports, and the statistical runs
//! behind each acceptance check.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{self, Write};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::bounds::{critical_points, rate_bundle, simulate_gw, BoundsError, BranchingSpec, RateBundle};
use crate::catalog::{BoxRegion, ContourSystem, ShapeCatalog};
use crate::clan::{clan_stats, presence_probability, sample_window, ClanError};
use crate::forward::{couple, generate_marks, initial_cylinders, sample_epochs, ForwardError};
use crate::geometry::{Axis, Contour, Plaquette};
use crate::oracle::{measure_system, ExactMeasure, OracleError};
use crate::rng::stream;
use crate::stats;

pub const DEFAULT_SEED: u64 = 1729;

/// Chains used by the forward-sampler comparison; epochs are split evenly.
const FORWARD_CHAINS: usize = 100;
/// Blocks per window side in the Poisson study.
const BLOCKS_PER_SIDE: i32 = 16;
/// Expected count below which configuration cells are pooled.
const POOL_BELOW: f64 = 10.0;
/// Minimum number of tail exceedances for a point to enter a fit.
const FIT_MIN_COUNT: f64 = 20.0;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),
    #[error("only {observed} contours of size {size} observed (need {required}); enlarge the window")]
    TooFewContours { observed: usize, size: usize, required: usize },
    #[error("not enough resolved points to fit a rate in `{0}`")]
    EmptyFit(String),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Clan(#[from] ClanError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Reversibility,
    PerfectOracle,
    ForwardOracle,
    Convergence,
    VolumeEffect,
    Clustering,
    Clt,
    Poisson,
    ClanTails,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::Reversibility,
        Experiment::PerfectOracle,
        Experiment::ForwardOracle,
        Experiment::Convergence,
        Experiment::VolumeEffect,
        Experiment::Clustering,
        Experiment::Clt,
        Experiment::Poisson,
        Experiment::ClanTails,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Experiment::Reversibility => "r1",
            Experiment::PerfectOracle => "perfect-oracle",
            Experiment::ForwardOracle => "forward-oracle",
            Experiment::Convergence => "r2",
            Experiment::VolumeEffect => "r3",
            Experiment::Clustering => "r4",
            Experiment::Clt => "r5",
            Experiment::Poisson => "r6",
            Experiment::ClanTails => "clan-tails",
        }
    }

    pub fn from_id(id: &str) -> Result<Experiment, ExperimentError> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.id() == id)
            .ok_or_else(|| ExperimentError::UnknownExperiment(id.to_string()))
    }

    pub fn run(self, cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
        match self {
            Experiment::Reversibility => run_reversibility(cfg),
            Experiment::PerfectOracle => run_perfect_oracle(cfg),
            Experiment::ForwardOracle => run_forward_oracle(cfg),
            Experiment::Convergence => run_convergence(cfg),
            Experiment::VolumeEffect => run_volume_effect(cfg),
            Experiment::Clustering => run_clustering(cfg),
            Experiment::Clt => run_clt(cfg),
            Experiment::Poisson => run_poisson(cfg),
            Experiment::ClanTails => run_clan_tails(cfg),
        }
    }
}

/// Every knob of an experiment. Unused fields are carried along so that a
/// report always records the complete configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub d: u32,
    pub n_max: usize,
    pub betas: Vec<f64>,
    /// Box sides (or strip half-widths for the finite-volume study).
    pub boxes: Vec<i32>,
    pub replicas: usize,
    /// Secondary sample size (Galton–Watson runs, presence replicas).
    pub aux_replicas: usize,
    pub t_end: f64,
    pub burn_in: f64,
    pub spacing: f64,
    /// Covariance truncation radius for the CLT study.
    pub radius: i32,
    /// Contour size counted in the Poisson study.
    pub contour_size: usize,
    /// Target number of blocks per β in the Poisson study.
    pub blocks: usize,
    /// β at which the Poisson acceptance checks apply.
    pub focus_beta: f64,
    pub sigma: f64,
    pub ks_max: f64,
    pub tv_max: f64,
    pub rel_tol: f64,
    pub dispersion_tol: f64,
    pub correlation_max: f64,
    pub rate_slack: f64,
    pub min_contours: usize,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn defaults(kind: Experiment) -> ExperimentConfig {
        let base = ExperimentConfig {
            seed: DEFAULT_SEED,
            d: 2,
            n_max: 8,
            betas: vec![1.5],
            boxes: vec![4],
            replicas: 1000,
            aux_replicas: 0,
            t_end: 0.0,
            burn_in: 20.0,
            spacing: 5.0,
            radius: 4,
            contour_size: 4,
            blocks: 10_000,
            focus_beta: 2.5,
            sigma: 3.0,
            ks_max: 0.05,
            tv_max: 0.01,
            rel_tol: 1e-12,
            dispersion_tol: 0.1,
            correlation_max: 0.05,
            rate_slack: 0.1,
            min_contours: 1000,
            out: None,
        };
        match kind {
            Experiment::Reversibility => ExperimentConfig { boxes: vec![3], replicas: 0, ..base },
            Experiment::PerfectOracle => ExperimentConfig { replicas: 100_000, ..base },
            Experiment::ForwardOracle => ExperimentConfig { replicas: 100_000, ..base },
            Experiment::Convergence => ExperimentConfig {
                betas: vec![2.0],
                boxes: vec![6],
                aux_replicas: 100_000,
                t_end: 25.0,
                rate_slack: 0.05,
                ..base
            },
            Experiment::VolumeEffect => ExperimentConfig { boxes: vec![1, 2, 3, 4, 5, 6], replicas: 0, ..base },
            Experiment::Clustering => ExperimentConfig { boxes: vec![24], replicas: 4000, ..base },
            Experiment::Clt => ExperimentConfig { boxes: vec![32], ..base },
            Experiment::Poisson => ExperimentConfig {
                betas: vec![2.0, 2.5, 3.0],
                boxes: vec![],
                replicas: 0,
                aux_replicas: 100_000,
                ..base
            },
            Experiment::ClanTails => ExperimentConfig {
                betas: vec![2.0, 2.5, 3.0],
                replicas: 10_000,
                aux_replicas: 100_000,
                focus_beta: 2.0,
                ..base
            },
        }
    }

    /// Apply a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ExperimentError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ExperimentError::Config {
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|msg| ExperimentError::Config { line: i + 1, msg })?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for `{key}`"))
        }
        fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, String> {
            v.split(',').filter(|s| !s.trim().is_empty()).map(|s| one(key, s.trim())).collect()
        }
        match key {
            "seed" => self.seed = one(key, value)?,
            "d" => self.d = one(key, value)?,
            "n_max" => self.n_max = one(key, value)?,
            "betas" | "beta" => self.betas = list(key, value)?,
            "boxes" | "box" => self.boxes = list(key, value)?,
            "replicas" => self.replicas = one(key, value)?,
            "aux_replicas" => self.aux_replicas = one(key, value)?,
            "t_end" => self.t_end = one(key, value)?,
            "burn_in" => self.burn_in = one(key, value)?,
            "spacing" => self.spacing = one(key, value)?,
            "radius" => self.radius = one(key, value)?,
            "contour_size" => self.contour_size = one(key, value)?,
            "blocks" => self.blocks = one(key, value)?,
            "focus_beta" => self.focus_beta = one(key, value)?,
            "sigma" => self.sigma = one(key, value)?,
            "ks_max" => self.ks_max = one(key, value)?,
            "tv_max" => self.tv_max = one(key, value)?,
            "rel_tol" => self.rel_tol = one(key, value)?,
            "dispersion_tol" => self.dispersion_tol = one(key, value)?,
            "correlation_max" => self.correlation_max = one(key, value)?,
            "rate_slack" => self.rate_slack = one(key, value)?,
            "min_contours" => self.min_contours = one(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn beta(&self) -> f64 {
        self.betas[0]
    }

    fn side(&self) -> i32 {
        self.boxes[0]
    }
}

/// Scaling of the Poisson study: contours of size `j` are counted in
/// blocks of area ≈ e^{βj} so that each block holds about one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoissonRescaling {
    pub beta: f64,
    pub j: usize,
    /// e^{βj}.
    pub factor: f64,
    /// Block side in lattice cells, the rounded √factor.
    pub block: i32,
}

impl PoissonRescaling {
    pub fn new(beta: f64, j: usize) -> PoissonRescaling {
        let factor = (beta * j as f64).exp();
        PoissonRescaling {
            beta,
            j,
            factor,
            block: (factor.sqrt().round() as i32).max(1),
        }
    }

    /// The lattice window V(a) for V = [0, blocks]², a = block side.
    pub fn window(&self, blocks: i32) -> BoxRegion {
        BoxRegion::square(self.block * blocks)
    }

    /// Rescaled position x/a.
    pub fn rescale(&self, x: i32, y: i32) -> (f64, f64) {
        (x as f64 / self.block as f64, y as f64 / self.block as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub relation: &'static str,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Check {
        Check {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
            relation: "<=",
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Check {
        Check {
            name: name.into(),
            passed: value >= threshold,
            value,
            threshold,
            relation: ">=",
        }
    }
}

/// One record of a result table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub table: String,
    pub values: BTreeMap<String, f64>,
}

impl Row {
    fn new<const N: usize>(table: &str, values: [(&str, f64); N]) -> Row {
        Row {
            table: table.to_string(),
            values: values.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub experiment: String,
    pub config: ExperimentConfig,
    /// Constants taken from the bounds module.
    pub constants: BTreeMap<String, f64>,
    pub rows: Vec<Row>,
    pub checks: Vec<Check>,
}

impl Report {
    fn new(kind: Experiment, cfg: &ExperimentConfig) -> Report {
        Report {
            experiment: kind.id().to_string(),
            config: cfg.clone(),
            constants: BTreeMap::new(),
            rows: Vec::new(),
            checks: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn constants_from(&mut self, prefix: &str, b: &RateBundle) {
        for (k, v) in [
            ("M2", b.m2),
            ("M3", b.m3),
            ("M0", b.m0_sup),
            ("time_exponent", b.time_exponent),
            ("a_bar", b.a_bar),
            ("b_bar", b.b_bar),
        ] {
            self.constants.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Header record, one record per row, one per check.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let head = json!({
            "type": "report",
            "experiment": self.experiment,
            "config": self.config,
            "constants": self.constants,
            "passed": self.passed(),
        });
        writeln!(w, "{head}")?;
        for r in &self.rows {
            let mut m = serde_json::Map::new();
            m.insert("type".into(), Value::from("row"));
            m.insert("table".into(), Value::from(r.table.clone()));
            for (k, v) in &r.values {
                m.insert(k.clone(), json!(v));
            }
            writeln!(w, "{}", Value::Object(m))?;
        }
        for c in &self.checks {
            let mut v = serde_json::to_value(c)?;
            v["type"] = Value::from("check");
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    /// Check summary as CSV.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "experiment,check,passed,value,relation,threshold")?;
        for c in &self.checks {
            writeln!(
                w,
                "{},{},{},{:e},{},{:e}",
                self.experiment, c.name, c.passed, c.value, c.relation, c.threshold
            )?;
        }
        Ok(())
    }
}

fn bundle(cfg: &ExperimentConfig, beta: f64) -> Result<RateBundle, ExperimentError> {
    let spec = BranchingSpec::new(beta, cfg.d, cfg.n_max)?;
    Ok(rate_bundle(&spec, cfg.aux_replicas, cfg.seed)?)
}

/// Constants without the Monte Carlo part of the bundle.
fn analytic_bundle(cfg: &ExperimentConfig, beta: f64) -> Result<RateBundle, ExperimentError> {
    let spec = BranchingSpec::new(beta, cfg.d, cfg.n_max)?;
    Ok(rate_bundle(&spec, 0, cfg.seed)?)
}

/// Fitted exponential decay rate −slope of ln y against x.
fn decay_rate(name: &str, xs: &[f64], ys: &[f64]) -> Result<f64, ExperimentError> {
    if xs.len() < 2 {
        return Err(ExperimentError::EmptyFit(name.to_string()));
    }
    let logs: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    Ok(-stats::linear_fit(xs, &logs).0)
}

fn square_id(system: &ContourSystem, x: i32, y: i32) -> u32 {
    system.id_of(&Contour::unit_square(x, y)).expect("square inside the region")
}

/// Relative detailed-balance residual on a tiny box.
pub fn run_reversibility(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    let mut rep = Report::new(Experiment::Reversibility, cfg);
    let shapes = ShapeCatalog::build(cfg.n_max);
    let m = measure_system(ContourSystem::new(&shapes, BoxRegion::square(cfg.side()), cfg.beta()))?;
    let mut worst: f64 = 0.0;
    let mut pairs = 0usize;
    for (c, &p) in m.configurations.iter().zip(&m.probabilities) {
        for g in 0..m.system.len() as u32 {
            if c.iter().any(|&h| m.system.conflict(g, h)) {
                continue;
            }
            let mut up = c.clone();
            up.insert(up.partition_point(|&h| h < g), g);
            let q = m.probability(&up);
            worst = worst.max((p * m.system.weights[g as usize] - q).abs() / q);
            pairs += 1;
        }
    }
    rep.rows.push(Row::new(
        "balance",
        [
            ("configurations", m.len() as f64),
            ("addable_pairs", pairs as f64),
            ("max_relative_residual", worst),
        ],
    ));
    rep.checks.push(Check::at_most("detailed_balance", worst, cfg.rel_tol));
    rep.checks.push(Check::at_least("addable_pairs", pairs as f64, 1.0));
    Ok(rep)
}

fn histogram(samples: impl IntoIterator<Item = Vec<u32>>) -> HashMap<Vec<u32>, u64> {
    let mut h = HashMap::new();
    for s in samples {
        *h.entry(s).or_insert(0) += 1;
    }
    h
}

/// Exact draws on a small box against the enumerated measure (TV distance).
pub fn run_perfect_oracle(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    let mut rep = Report::new(Experiment::PerfectOracle, cfg);
    let (beta, region) = (cfg.beta(), BoxRegion::square(cfg.side()));
    let shapes = ShapeCatalog::build(cfg.n_max);
    let m = measure_system(ContourSystem::new(&shapes, region, beta))?;
    let draws: Result<Vec<Vec<u32>>, ClanError> = (0..cfg.replicas)
        .into_par_iter()
        .map(|i| {
            let c = sample_window(&shapes, region, beta, &mut stream(cfg.seed, "perfect", i as u64))?;
            Ok(c.ids(&m.system).expect("window contours lie in the system"))
        })
        .collect();
    let h = histogram(draws?);
    let tv = m.tv_distance(&h);
    rep.rows.push(Row::new(
        "perfect",
        [
            ("configurations", m.len() as f64),
            ("distinct_observed", h.len() as f64),
            ("tv", tv),
        ],
    ));
    let (bins, worst) = pooled_z_scores(&m, &h, cfg.replicas);
    rep.rows.push(Row::new("perfect", [("bins", bins as f64), ("max_abs_z", worst)]));
    rep.checks.push(Check::at_most("tv_distance", tv, cfg.tv_max));
    Ok(rep)
}

/// Cells of expected count below [`POOL_BELOW`] are merged into one bin;
/// returns the number of bins and the largest |z|.
fn pooled_z_scores(m: &ExactMeasure, h: &HashMap<Vec<u32>, u64>, n: usize) -> (usize, f64) {
    let n = n as f64;
    let mut bins: Vec<(f64, u64)> = Vec::new();
    let mut pool = (0.0, 0u64);
    for (c, &p) in m.configurations.iter().zip(&m.probabilities) {
        let k = h.get(c).copied().unwrap_or(0);
        if n * p < POOL_BELOW {
            pool.0 += p;
            pool.1 += k;
        } else {
            bins.push((p, k));
        }
    }
    let outside: u64 = h.iter().filter(|(c, _)| m.index_of(c).is_none()).map(|e| e.1).sum();
    pool.1 += outside;
    if pool.0 > 0.0 || pool.1 > 0 {
        bins.push(pool);
    }
    let worst = bins
        .iter()
        .map(|&(p, k)| {
            let se = (p * (1.0 - p) / n).sqrt();
            let d = (k as f64 / n - p).abs();
            if se > 0.0 {
                d / se
            } else if d > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    (bins.len(), worst)
}

/// Long-run forward states against the enumerated measure, cell by cell.
pub fn run_forward_oracle(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    let mut rep = Report::new(Experiment::ForwardOracle, cfg);
    let shapes = ShapeCatalog::build(cfg.n_max);
    let m = measure_system(ContourSystem::new(&shapes, BoxRegion::square(cfg.side()), cfg.beta()))?;
    let chains = FORWARD_CHAINS.min(cfg.replicas.max(1));
    let per = cfg.replicas / chains;
    let states: Vec<Vec<Vec<u32>>> = (0..chains)
        .into_par_iter()
        .map(|i| sample_epochs(&m.system, cfg.burn_in, cfg.spacing, per, &mut stream(cfg.seed, "forward", i as u64)))
        .collect();
    let n = chains * per;
    let h = histogram(states.into_iter().flatten());
    let (bins, worst) = pooled_z_scores(&m, &h, n);
    let tv = m.tv_distance(&h);
    rep.rows.push(Row::new(
        "forward",
        [
            ("epochs", n as f64),
            ("chains", chains as f64),
            ("bins", bins as f64),
            ("max_abs_z", worst),
            ("tv", tv),
        ],
    ));
    rep.checks.push(Check::at_most("cell_z_scores", worst, cfg.sigma));
    Ok(rep)
}

/// Greedy maximal family of pairwise compatible unit squares.
fn full_start(system: &ContourSystem) -> Vec<u32> {
    let mut chosen: Vec<u32> = Vec::new();
    for id in 0..system.len() as u32 {
        if system.sizes[id as usize] == 4 && chosen.iter().all(|&c| !system.conflict(c, id)) {
            chosen.push(id);
        }
    }
    chosen
}

/// Coupled forward runs from a full and an empty start.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    let mut rep = Report::new(Experiment::Convergence, cfg);
    let beta = cfg.beta();
    let b = bundle(cfg, beta)?;
    rep.constants_from("", &b);
    let system = ContourSystem::new(&ShapeCatalog::build(cfg.n_max), BoxRegion::square(cfg.side()), beta);
    let full = full_start(&system);
    let step = 0.25;
    let grid: Vec<f64> = (0..=(cfg.t_end / step) as usize).map(|k| k as f64 * step).collect();
    let runs: Result<Vec<(Vec<usize>, Option<f64>, usize)>, ForwardError> = (0..cfg.replicas)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, "r2", i as u64);
            let init = initial_cylinders(&full, &mut rng);
            let marks = generate_marks(&system, cfg.t_end, &mut rng);
            let c = couple(&system, &init, &[], &marks)?;
            let after = c.coalescence.map_or(0, |t0| c.discrepancy.iter().filter(|e| e.0 >= t0 && e.1 != 0).count());
            Ok((grid.iter().map(|&t| c.discrepancy_at(t)).collect(), c.coalescence, after))
        })
        .collect();
    let runs = runs?;
    let n = runs.len() as f64;
    let mean: Vec<f64> = (0..grid.len()).map(|k| runs.iter().map(|r| r.0[k] as f64).sum::<f64>() / n).collect();
    for (t, d) in grid.iter().zip(&mean) {
        rep.rows.push(Row::new("discrepancy", [("t", *t), ("mean", *d)]));
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (&t, &d) in grid.iter().zip(&mean) {
        if t >= 0.5 && d * n >= FIT_MIN_COUNT {
            xs.push(t);
            ys.push(d);
        }
    }
    let rate = decay_rate("discrepancy", &xs, &ys)?;
    let initial_mismatch = runs.iter().map(|r| (r.0[0] as f64 - full.len() as f64).abs()).fold(0.0, f64::max);
    let uncoalesced = runs.iter().filter(|r| r.1.is_none()).count();
    let after: usize = runs.iter().map(|r| r.2).sum();
    let times: Vec<f64> = runs.iter().filter_map(|r| r.1).collect();
    rep.rows.push(Row::new(
        "summary",
        [
            ("full_start_size", full.len() as f64),
            ("fit_points", xs.len() as f64),
            ("fitted_rate", rate),
            ("mean_coalescence", stats::mean(&times)),
        ],
    ));
    rep.checks.push(Check::at_least("discrepancy_rate", rate, b.m0_sup - cfg.rate_slack));
    rep.checks.push(Check::at_most("initial_discrepancy_mismatch", initial_mismatch, 0.0));
    rep.checks.push(Check::at_most("discrepancy_after_coalescence", after as f64, 0.0));
    rep.checks.push(Check::at_most("uncoalesced_replicas", uncoalesced as f64, 0.0));
    Ok(rep)
}

fn volume_bound(m2: f64, m3: f64, region: &BoxRegion, gamma: &Contour) -> f64 {
    gamma
        .plaquettes()
        .iter()
        .map(|&x| m2 * (-m3 * region.distance_to_complement(x) as f64).exp())
        .sum()
}

/// Exact finite-volume gaps for the presence of a centred unit square.
pub fn run_volume_effect(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    let mut rep = Report::new(Experiment::VolumeEffect, cfg);
    let beta = cfg.beta();
    let b = analytic_bundle(cfg, beta)?;
    rep.constants_from("", &b);
    let shapes = ShapeCatalog::build(cfg.n_max);
    let presence = |region: BoxRegion, gamma: &Contour| -> Result<f64, ExperimentError> {
        let m = measure_system(ContourSystem::new(&shapes, region, beta))?;
        Ok(m.marginal(m.system.id_of(gamma).expect("contour inside the region")))
    };
    let mut violations = 0usize;
    let mut worst_ratio: f64 = 0.0;

    // height-one strips of half-width r around cell c, nested in a longer reference strip
    let mut widths = cfg.boxes.clone();
    widths.sort_unstable();
    let c = widths.last().copied().unwrap_or(1) + 3;
    widths.push(c);
    let strip = |r: i32| BoxRegion::new(c - r, 0, c + r + 1, 1);
    let gamma = Contour::unit_square(c, 0);
    let mu: Vec<f64> = widths.iter().map(|&r| presence(strip(r), &gamma)).collect::<Result<_, _>>()?;
    let reference = *mu.last().unwrap();
    for i in 0..widths.len() {
        for j in i + 1..widths.len() {
            let gap = (mu[i] - mu[j]).abs();
            let bound = volume_bound(b.m2, b.m3, &strip(widths[i]), &gamma);
            violations += (gap > bound) as usize;
            worst_ratio = worst_ratio.max(gap / bound);
        }
    }
    let floor = 1e3 * f64::EPSILON * reference;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (&r, &m) in widths.iter().zip(&mu).take(widths.len() - 1) {
        let gap = (m - reference).abs();
        rep.rows.push(Row::new(
            "strip",
            [
                ("half_width", r as f64),
                ("presence", m),
                ("gap", gap),
                ("bound", volume_bound(b.m2, b.m3, &strip(r), &gamma)),
            ],
        ));
        if gap > floor {
            xs.push(r as f64);
            ys.push(gap);
        }
    }
    let monotone = ys.windows(2).filter(|w| w[1] >= w[0]).count();
    let rate = decay_rate("strip gap", &xs, &ys)?;

    // square boxes of odd side around a common cell
    let sides = [1, 3, 5];
    let boxed = |s: i32| BoxRegion::new(2 - (s - 1) / 2, 2 - (s - 1) / 2, 2 + (s + 1) / 2, 2 + (s + 1) / 2);
    let g2 = Contour::unit_square(2, 2);
    let mu2: Vec<f64> = sides.iter().map(|&s| presence(boxed(s), &g2)).collect::<Result<_, _>>()?;
    for i in 0..sides.len() {
        for j in i + 1..sides.len() {
            let gap = (mu2[i] - mu2[j]).abs();
            let bound = volume_bound(b.m2, b.m3, &boxed(sides[i]), &g2);
            violations += (gap > bound) as usize;
            worst_ratio = worst_ratio.max(gap / bound);
            rep.rows.push(Row::new(
                "box",
                [
                    ("inner_side", sides[i] as f64),
                    ("outer_side", sides[j] as f64),
                    ("gap", gap),
                    ("bound", bound),
                ],
            ));
        }
    }
    rep.rows.push(Row::new(
        "summary",
        [
            ("fit_points", xs.len() as f64),
            ("fitted_rate", rate),
            ("worst_gap_over_bound", worst_ratio),
        ],
    ));
    rep.checks.push(Check::at_most("gap_bound_violations", violations as f64, 0.0));
    rep.checks.push(Check::at_least("resolved_sizes", xs.len() as f64, 3.0));
    rep.checks.push(Check::at_most("non_monotone_steps", monotone as f64, 0.0));
    rep.checks.push(Check::at_least("spatial_rate", rate, b.m3 - cfg.rate_slack));
    Ok(rep)
}

fn covariance_bound(m2: f64, m3: f64, f: &Contour, g: &Contour) -> f64 {
    let mut s = 0.0;
    for &x in f.plaquettes() {
        for &y in g.plaquettes() {
            let r = x.distance(y) as f64;
            s += r * (-m3 * r).exp();
        }
    }
    2.0 * m2 * m2 * s
}

/// Square-presence covariances: exact along a strip, empirical at
/// distance 10 from perfect samples.
pub fn run_clustering(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    let mut rep = Report::new(Experiment::Clustering, cfg);
    let beta = cfg.beta();
    let b = analytic_bundle(cfg, beta)?;
    rep.constants_from("", &b);
    let shapes = ShapeCatalog::build(cfg.n_max);
    let mut violations = 0usize;

    let (len, a) = (19, 3);
    let m = measure_system(ContourSystem::new(&shapes, BoxRegion::new(0, 0, len, 1), beta))?;
    let ia = square_id(&m.system, a, 0);
    let pa = m.marginal(ia);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for k in 1..len - a {
        let ib = square_id(&m.system, a + k, 0);
        let pb = m.marginal(ib);
        let joint = m.expectation(|c| (c.binary_search(&ia).is_ok() && c.binary_search(&ib).is_ok()) as u8 as f64);
        let cov = joint - pa * pb;
        let bound = covariance_bound(b.m2, b.m3, &Contour::unit_square(a, 0), &Contour::unit_square(a + k, 0));
        violations += (cov.abs() > bound) as usize;
        rep.rows.push(Row::new(
            "strip",
            [("distance", k as f64), ("covariance", cov), ("bound", bound)],
        ));
        if k >= 2 && cov.abs() > 1e3 * f64::EPSILON * pa {
            xs.push(k as f64);
            ys.push(cov.abs());
        }
    }
    let rate = decay_rate("strip covariance", &xs, &ys)?;

    // translation-averaged covariance from exact draws on a large box
    let side = cfg.side();
    let shift = 10;
    let region = BoxRegion::square(side);
    let draws: Result<Vec<HashSet<(i32, i32)>>, ClanError> = (0..cfg.replicas)
        .into_par_iter()
        .map(|i| {
            let c = sample_window(&shapes, region, beta, &mut stream(cfg.seed, "r4", i as u64))?;
            Ok(c.contours()
                .iter()
                .filter(|g| g.size() == 4)
                .map(|g| {
                    let (x0, y0, _, _) = g.vertex_bounds();
                    (x0, y0)
                })
                .collect())
        })
        .collect();
    let draws = draws?;
    let (mut fa, mut fb, mut fab, mut npairs) = (0.0, 0.0, 0.0, 0.0);
    let (mut f0, mut ncells) = (0.0, 0.0);
    for s in &draws {
        for x in 0..side {
            for y in 0..side {
                let here = s.contains(&(x, y)) as u8 as f64;
                f0 += here;
                ncells += 1.0;
                if x + shift < side {
                    let there = s.contains(&(x + shift, y)) as u8 as f64;
                    fa += here;
                    fb += there;
                    fab += here * there;
                    npairs += 1.0;
                }
            }
        }
    }
    let cov10 = fab / npairs - (fa / npairs) * (fb / npairs);
    let bound10 = covariance_bound(b.m2, b.m3, &Contour::unit_square(0, 0), &Contour::unit_square(shift, 0));
    let p0 = f0 / ncells;
    let var0 = p0 * (1.0 - p0);
    let bound0 = covariance_bound(b.m2, b.m3, &Contour::unit_square(0, 0), &Contour::unit_square(0, 0));
    rep.rows.push(Row::new(
        "sampled",
        [
            ("distance", shift as f64),
            ("covariance", cov10),
            ("bound", bound10),
            ("variance", var0),
            ("variance_bound", bound0),
        ],
    ));
    rep.rows.push(Row::new("summary", [("fit_points", xs.len() as f64), ("fitted_rate", rate)]));
    rep.checks.push(Check::at_most("covariance_bound_violations", violations as f64, 0.0));
    rep.checks.push(Check::at_most("distance_10_covariance", cov10.abs(), bound10));
    rep.checks.push(Check::at_most("distance_0_variance", var0, bound0));
    rep.checks.push(Check::at_least("spatial_rate", rate, b.m3 - cfg.rate_slack));
    Ok(rep)
}

/// Standardized sums of plaquette-coverage indicators over a box.
pub fn run_clt(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    let mut rep = Report::new(Experiment::Clt, cfg);
    let beta = cfg.beta();
    let shapes = ShapeCatalog::build(cfg.n_max);
    let region = BoxRegion::square(cfg.side());
    let sites = region.plaquettes();
    let index: HashMap<Plaquette, usize> = sites.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let radii = [cfg.radius, 2 * cfg.radius];
    let near = |p: Plaquette, q: Plaquette, r: i32| (p.x - q.x).abs() <= r && (p.y - q.y).abs() <= r;
    // |{y : |y − x|∞ ≤ R}| within the box, per site
    let neighbourhood: Vec<Vec<f64>> = radii
        .iter()
        .map(|&r| {
            sites
                .iter()
                .map(|&p| {
                    let mut n = 0.0;
                    for dx in -r..=r {
                        for dy in -r..=r {
                            for axis in Axis::ALL {
                                n += index.contains_key(&Plaquette::new(p.x + dx, p.y + dy, axis)) as u8 as f64;
                            }
                        }
                    }
                    n
                })
                .collect()
        })
        .collect();
    let covered: Result<Vec<Vec<usize>>, ClanError> = (0..cfg.replicas)
        .into_par_iter()
        .map(|i| {
            let c = sample_window(&shapes, region, beta, &mut stream(cfg.seed, "r5", i as u64))?;
            let mut v: Vec<usize> = c.contours().iter().flat_map(|g| g.plaquettes().iter().map(|p| index[p])).collect();
            v.sort_unstable();
            Ok(v)
        })
        .collect();
    let covered = covered?;
    let n = covered.len() as f64;
    let ns = sites.len() as f64;
    let m = covered.iter().map(|c| c.len() as f64).sum::<f64>() / (n * ns);
    let mut d_hat = [0.0; 2];
    for (k, &r) in radii.iter().enumerate() {
        let (mut pairs, mut q) = (0.0, 0.0);
        for c in &covered {
            for &i in c {
                q += neighbourhood[k][i];
                pairs += c.iter().filter(|&&j| near(sites[i], sites[j], r)).count() as f64;
            }
        }
        let mean_n = neighbourhood[k].iter().sum::<f64>() / ns;
        d_hat[k] = (pairs - 2.0 * m * q) / (n * ns) + m * m * mean_n;
    }
    let z: Vec<f64> = covered
        .iter()
        .map(|c| (c.len() as f64 - ns * m) / (ns * d_hat[0]).sqrt())
        .collect();
    let ks = stats::ks_standard_normal(&z);
    let empty = covered.iter().filter(|c| c.is_empty()).count() as f64 / n;
    let change = (d_hat[1] / d_hat[0] - 1.0).abs();
    rep.rows.push(Row::new(
        "clt",
        [
            ("sites", ns),
            ("mean_coverage", m),
            ("d_hat", d_hat[0]),
            ("d_hat_doubled", d_hat[1]),
            ("ks", ks),
            ("empty_fraction", empty),
            ("sample_variance_ratio", stats::variance(&z)),
        ],
    ));
    rep.checks.push(Check::at_most("ks_normal", ks, cfg.ks_max));
    rep.checks.push(Check::at_least("d_hat_positive", d_hat[0], f64::MIN_POSITIVE));
    rep.checks.push(Check::at_most("d_hat_truncation_change", change, 0.05));
    Ok(rep)
}

/// Block counts and nearest-neighbour spacings of size-j contours after
/// rescaling by e^{βj}, plus the intensity trend across β.
pub fn run_poisson(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    let mut rep = Report::new(Experiment::Poisson, cfg);
    let shapes = ShapeCatalog::build(cfg.n_max);
    let probe = Contour::unit_square(0, 0);
    let mut trend = Vec::new();
    for (bi, &beta) in cfg.betas.iter().enumerate() {
        let sc = PoissonRescaling::new(beta, cfg.contour_size);
        let region = sc.window(BLOCKS_PER_SIDE);
        let per_window = (BLOCKS_PER_SIDE * BLOCKS_PER_SIDE) as usize;
        let windows = cfg.blocks.div_ceil(per_window);
        let draws: Result<Vec<Vec<(i32, i32)>>, ClanError> = (0..windows)
            .into_par_iter()
            .map(|w| {
                let mut rng = stream(cfg.seed, "r6", (bi * 1_000_000 + w) as u64);
                let c = sample_window(&shapes, region, beta, &mut rng)?;
                Ok(c.contours()
                    .iter()
                    .filter(|g| g.size() == cfg.contour_size)
                    .map(|g| {
                        let (x0, y0, _, _) = g.vertex_bounds();
                        (x0, y0)
                    })
                    .collect())
            })
            .collect();
        let draws = draws?;
        let observed: usize = draws.iter().map(Vec::len).sum();
        if beta == cfg.focus_beta && observed < cfg.min_contours {
            return Err(ExperimentError::TooFewContours {
                observed,
                size: cfg.contour_size,
                required: cfg.min_contours,
            });
        }
        let mut counts = Vec::with_capacity(windows * per_window);
        let (mut left, mut right) = (Vec::new(), Vec::new());
        let mut nn = Vec::new();
        for pts in &draws {
            let nb = BLOCKS_PER_SIDE as usize;
            let mut grid = vec![0.0; nb * nb];
            for &(x, y) in pts {
                grid[(y / sc.block) as usize * nb + (x / sc.block) as usize] += 1.0;
            }
            for row in grid.chunks(nb) {
                for pair in row.chunks(2) {
                    left.push(pair[0]);
                    right.push(pair[1]);
                }
            }
            counts.extend(grid);
            nn.extend(nearest_neighbour_areas(pts, &sc, BLOCKS_PER_SIDE as f64));
        }
        let mean = stats::mean(&counts);
        let var = stats::variance(&counts);
        let ratio = var / mean;
        let rho = stats::correlation(&left, &right);
        let dof = counts.len() as f64 - 1.0;
        let chi2 = var * dof / mean;
        let p_disp = stats::chi_square_sf(chi2, dof);
        // spacing areas scaled to unit intensity
        let nn: Vec<f64> = nn.iter().map(|a| a * mean).collect();
        let ks_nn = stats::ks_exponential(&nn);
        let (presence, se) = presence_probability(&shapes, beta, &probe, cfg.aux_replicas, cfg.seed)?;
        let deviation = (sc.factor * presence - 1.0).abs();
        trend.push(deviation);
        rep.rows.push(Row::new(
            "poisson",
            [
                ("beta", beta),
                ("block_side", sc.block as f64),
                ("blocks", counts.len() as f64),
                ("observed", observed as f64),
                ("mean_per_block", mean),
                ("variance_over_mean", ratio),
                ("dispersion_p_value", p_disp),
                ("pair_correlation", rho),
                ("nn_points", nn.len() as f64),
                ("nn_ks", ks_nn),
                ("scaled_intensity", sc.factor * presence),
                ("scaled_intensity_se", sc.factor * se),
                ("intensity_deviation", deviation),
            ],
        ));
        if beta == cfg.focus_beta {
            rep.checks.push(Check::at_least("variance_over_mean_low", ratio, 1.0 - cfg.dispersion_tol));
            rep.checks.push(Check::at_most("variance_over_mean_high", ratio, 1.0 + cfg.dispersion_tol));
            rep.checks.push(Check::at_most("block_correlation", rho.abs(), cfg.correlation_max));
            rep.checks.push(Check::at_least("observed_contours", observed as f64, cfg.min_contours as f64));
        }
    }
    let reversals = trend.windows(2).filter(|w| w[1] >= w[0]).count();
    rep.checks.push(Check::at_most("intensity_trend_reversals", reversals as f64, 0.0));
    Ok(rep)
}

/// π·(nearest-neighbour distance)² in rescaled units, for points farther
/// from the window edge than from their nearest neighbour.
fn nearest_neighbour_areas(pts: &[(i32, i32)], sc: &PoissonRescaling, side: f64) -> Vec<f64> {
    let q: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| sc.rescale(x, y)).collect();
    let mut out = Vec::new();
    for (i, &(x, y)) in q.iter().enumerate() {
        let d2 = q
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &(u, v))| (u - x) * (u - x) + (v - y) * (v - y))
            .fold(f64::INFINITY, f64::min);
        let edge = x.min(y).min(side - x).min(side - y);
        if d2.is_finite() && d2.sqrt() < edge {
            out.push(std::f64::consts::PI * d2);
        }
    }
    out
}

fn tail_at(xs: &[f64], t: f64) -> f64 {
    xs.iter().filter(|&&x| x > t).count() as f64 / xs.len() as f64
}

/// Clan tails (cumulative size, width, time length) against the analytic
/// envelopes, and Galton–Watson domination of the cumulative size.
pub fn run_clan_tails(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    let mut rep = Report::new(Experiment::ClanTails, cfg);
    let shapes = ShapeCatalog::build(cfg.n_max);
    let query = Plaquette::new(0, 0, Axis::X);
    let mut curves: Vec<[Vec<f64>; 3]> = Vec::new();
    for &beta in &cfg.betas {
        let tag = format!("[beta={beta}]");
        let spec = BranchingSpec::new(beta, cfg.d, cfg.n_max)?;
        let cp = critical_points(&spec)?;
        let (m2, m3) = (cp.a_bar, cp.b_bar.ln());
        let b = analytic_bundle(cfg, beta)?;
        rep.constants_from(&tag, &b);
        let envelope = |k: f64| m2 * (-m3 * k).exp();

        let zs: Result<Vec<u64>, BoundsError> = (0..cfg.aux_replicas)
            .into_par_iter()
            .map(|i| simulate_gw(&spec, &mut stream(cfg.seed, "gw", i as u64)))
            .collect();
        let zs: Vec<f64> = zs?.into_iter().map(|z| z as f64).collect();
        let z_max = zs.iter().copied().fold(0.0, f64::max) as u64;
        let mut gw_violations = 0;
        for k in 0..=z_max {
            let p = tail_at(&zs, k as f64);
            gw_violations += (p > envelope(k as f64)) as usize;
            rep.rows.push(Row::new("gw_tail", [("beta", beta), ("k", k as f64), ("tail", p), ("envelope", envelope(k as f64))]));
        }
        rep.checks.push(Check::at_most(format!("gw_tail_envelope{tag}"), gw_violations as f64, 0.0));

        // unconditioned clans for the domination test
        let free = clan_stats(&shapes, beta, query, cfg.replicas, cfg.seed, false)?;
        let sizes: Vec<f64> = free.stats.iter().map(|s| s.cumulative as f64).collect();
        let top = sizes.iter().copied().fold(z_max as f64, f64::max) as u64;
        let (na, nz) = (sizes.len() as f64, zs.len() as f64);
        let mut dominance = 0;
        for k in 0..=top {
            let fa = 1.0 - tail_at(&sizes, k as f64);
            let fz = 1.0 - tail_at(&zs, k as f64);
            let band = cfg.sigma * (fa * (1.0 - fa) / na + fz * (1.0 - fz) / nz).sqrt();
            dominance += (fa < fz - band) as usize;
        }
        rep.checks.push(Check::at_most(format!("gw_domination{tag}"), dominance as f64, 0.0));

        // tails of clans conditioned on the query being covered at time 0
        let cond = clan_stats(&shapes, beta, query, cfg.replicas, cfg.seed, true)?;
        let w = cond.weight;
        let time: Vec<f64> = cond.stats.iter().map(|s| s.time_length).collect();
        let width: Vec<f64> = cond.stats.iter().map(|s| s.width as f64).collect();
        let cumulative: Vec<f64> = cond.stats.iter().map(|s| s.cumulative as f64).collect();
        let n = time.len() as f64;
        let (mut xs, mut ys, mut time_curve) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0.. {
            let t = 0.25 * k as f64;
            let p = tail_at(&time, t);
            if p * n < FIT_MIN_COUNT {
                break;
            }
            time_curve.push(w * p);
            rep.rows.push(Row::new("time_tail", [("beta", beta), ("t", t), ("tail", w * p)]));
            if t >= 0.5 {
                xs.push(t);
                ys.push(w * p);
            }
        }
        let rate = decay_rate(&format!("time tail {tag}"), &xs, &ys)?;
        rep.rows.push(Row::new("time_fit", [("beta", beta), ("rate", rate), ("target", b.time_exponent)]));
        rep.checks.push(Check::at_least(format!("time_rate{tag}"), rate, b.time_exponent - cfg.rate_slack));

        let mut envelope_violations = [0usize; 2];
        let mut width_curve = Vec::new();
        let mut size_curve = Vec::new();
        for (which, xs, curve) in [(0, &width, &mut width_curve), (1, &cumulative, &mut size_curve)] {
            let top = xs.iter().copied().fold(0.0, f64::max) as u64;
            for k in 0..=top {
                let p = w * tail_at(xs, k as f64);
                envelope_violations[which] += (p > envelope(k as f64)) as usize;
                curve.push(p);
                let table = if which == 0 { "width_tail" } else { "cumulative_tail" };
                rep.rows.push(Row::new(table, [("beta", beta), ("k", k as f64), ("tail", p), ("envelope", envelope(k as f64))]));
            }
        }
        rep.checks.push(Check::at_most(format!("width_envelope{tag}"), envelope_violations[0] as f64, 0.0));
        rep.checks.push(Check::at_most(format!("cumulative_envelope{tag}"), envelope_violations[1] as f64, 0.0));
        rep.rows.push(Row::new(
            "clans",
            [
                ("beta", beta),
                ("occupation_probability", w),
                ("conditioned_replicas", n),
                ("capped", (free.capped + cond.capped) as f64),
            ],
        ));
        curves.push([time_curve, width_curve, size_curve]);
    }
    if curves.len() > 1 {
        let mut reversals = 0;
        for pair in curves.windows(2) {
            for c in 0..3 {
                reversals += pair[0][c].iter().zip(&pair[1][c]).filter(|(a, b)| b > a).count();
            }
        }
        rep.checks.push(Check::at_most("tails_ordered_in_beta", reversals as f64, 0.0));
    }
    Ok(rep)
}
