use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use contour_core::bounds::{rate_bundle, BranchingSpec};
use contour_core::catalog::{beta_m, build_catalog, lambda_beta, BoxRegion, ContourSystem, ShapeCatalog};
use contour_core::clan::{clan_of_points, clan_stats_of, sample_window, FreeProcessCache, CUMULATIVE_CAP};
use contour_core::experiments::{Experiment, ExperimentConfig, Report};
use contour_core::forward::{evolve, generate_marks};
use contour_core::geometry::{Axis, Plaquette};
use contour_core::oracle::measure_system;
use contour_core::rng::stream;

#[derive(Parser)]
#[command(name = "contour", version, about = "Exact sampling of excluding lattice contours")]
struct Cli {
    /// Root seed; every replica stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key = value experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write JSON-lines here (and the CSV summary next to it) instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Model {
    #[arg(long, default_value_t = 1.5)]
    beta: f64,
    #[arg(long = "box", default_value_t = 4)]
    side: i32,
    #[arg(long, default_value_t = 8)]
    nmax: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    Config,
    Stats,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleCheck {
    Balance,
    Perfect,
    Forward,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Comma-separated β grid.
    #[arg(long, value_delimiter = ',')]
    beta: Option<Vec<f64>>,
    /// Comma-separated box sizes.
    #[arg(long = "box", value_delimiter = ',')]
    boxes: Option<Vec<i32>>,
    /// Largest contour size in the catalog.
    #[arg(long)]
    nmax: Option<usize>,
    /// Monte Carlo replicas.
    #[arg(long)]
    replicas: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// λ_β, β_M bracket and the branching constants.
    Bounds {
        #[arg(long, default_value_t = 2.0)]
        beta: f64,
        #[arg(long, default_value_t = 2)]
        d: u32,
        #[arg(long, default_value_t = 8)]
        nmax: usize,
        /// Galton–Watson runs for the simulated M₂.
        #[arg(long, default_value_t = 10_000)]
        replicas: usize,
    },
    /// Weighted contour catalog as JSON-lines.
    Enumerate {
        #[arg(long, default_value_t = 1.5)]
        beta: f64,
        #[arg(long, default_value_t = 8)]
        nmax: usize,
        /// Contours inside [0, L]² instead of those through the origin edge.
        #[arg(long = "box")]
        side: Option<i32>,
    },
    /// Exact finite-volume measure, or a comparison against it.
    Oracle {
        #[command(flatten)]
        model: Model,
        #[arg(long)]
        check: Option<OracleCheck>,
        #[arg(long)]
        replicas: Option<usize>,
    },
    /// Forward mark-by-mark runs from the empty configuration.
    SampleForward {
        #[command(flatten)]
        model: Model,
        #[arg(long, default_value_t = 10.0)]
        t_end: f64,
        #[arg(long, default_value_t = 1)]
        replicas: usize,
    },
    /// Exact window draws via the clan of ancestors.
    SamplePerfect {
        #[command(flatten)]
        model: Model,
        #[arg(long, default_value_t = 1)]
        replicas: usize,
        #[arg(long, value_enum, default_value_t = Emit::Config)]
        emit: Emit,
    },
    /// Clan tail study over a β grid.
    ClusterStats(Overrides),
    /// Detailed-balance residual of the exact measure
    R1(Overrides),
    /// Coupling discrepancy decay against the mixing rate
    R2(Overrides),
    /// Finite-volume effect on a local expectation
    R3(Overrides),
    /// Decay of covariances with distance
    R4(Overrides),
    /// Normal fluctuations of a local sum
    R5(Overrides),
    /// Poisson limit of rescaled large contours
    R6(Overrides),
}

fn open_out(out: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn experiment_config(cli: &Cli, kind: Experiment, o: &Overrides) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::defaults(kind);
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.apply_text(&text).map_err(|e| e.to_string())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = &o.beta {
        cfg.betas = b.clone();
    }
    if let Some(b) = &o.boxes {
        cfg.boxes = b.clone();
    }
    if let Some(n) = o.nmax {
        cfg.n_max = n;
    }
    if let Some(r) = o.replicas {
        cfg.replicas = r;
    }
    if let Some(p) = &cli.out {
        cfg.out = Some(p.clone());
    }
    Ok(cfg)
}

fn emit_report(rep: &Report) -> Result<bool, String> {
    let io_err = |e: io::Error| e.to_string();
    match &rep.config.out {
        Some(p) => {
            rep.write_jsonl(BufWriter::new(File::create(p).map_err(io_err)?)).map_err(io_err)?;
            let csv = p.with_extension("csv");
            rep.write_csv(BufWriter::new(File::create(csv).map_err(io_err)?)).map_err(io_err)?;
        }
        None => {
            rep.write_jsonl(io::stdout().lock()).map_err(io_err)?;
            rep.write_csv(io::stderr().lock()).map_err(io_err)?;
        }
    }
    Ok(rep.passed())
}

fn run_experiment(cli: &Cli, kind: Experiment, o: &Overrides) -> Result<bool, String> {
    let cfg = experiment_config(cli, kind, o)?;
    let rep = kind.run(&cfg).map_err(|e| e.to_string())?;
    emit_report(&rep)
}

fn run(cli: &Cli) -> Result<bool, String> {
    let seed = cli.seed.unwrap_or(contour_core::experiments::DEFAULT_SEED);
    let s = |e: &dyn std::fmt::Display| e.to_string();
    match &cli.command {
        Command::Bounds { beta, d, nmax, replicas } => {
            let spec = BranchingSpec::new(*beta, *d, *nmax).map_err(|e| s(&e))?;
            let lam = lambda_beta(*beta, *nmax).map_err(|e| s(&e))?;
            let bracket = beta_m(*d, *nmax).map_err(|e| s(&e))?;
            let b = rate_bundle(&spec, *replicas, seed).map_err(|e| s(&e))?;
            let rec = json!({
                "beta": beta, "d": d, "n_max": nmax,
                "lambda": lam.value, "tail": lam.tail_bound,
                "beta_M_lo": bracket.lower, "beta_M_hi": bracket.upper,
                "a_bar": b.a_bar, "b_bar": b.b_bar,
                "M2": b.m2, "M2_simulated": b.m2_simulated, "M2_std_error": b.m2_std_error,
                "M3": b.m3, "time_exponent": b.time_exponent, "M0": b.m0_sup,
            });
            let mut w = open_out(cli.out.as_deref()).map_err(|e| s(&e))?;
            writeln!(w, "{rec}").map_err(|e| s(&e))?;
            Ok(true)
        }
        Command::Enumerate { beta, nmax, side } => {
            let cat = build_catalog(*beta, *nmax, side.map(BoxRegion::square)).map_err(|e| s(&e))?;
            cat.write_jsonl(open_out(cli.out.as_deref()).map_err(|e| s(&e))?).map_err(|e| s(&e))?;
            Ok(true)
        }
        Command::Oracle { model, check, replicas } => {
            let kind = match check {
                None => {
                    let sys = ContourSystem::new(&ShapeCatalog::build(model.nmax), BoxRegion::square(model.side), model.beta);
                    let m = measure_system(sys).map_err(|e| s(&e))?;
                    let mut w = open_out(cli.out.as_deref()).map_err(|e| s(&e))?;
                    let contours: Vec<_> = m.system.contours.iter().collect();
                    let rec = json!({ "measure": m, "contours": contours });
                    writeln!(w, "{rec}").map_err(|e| s(&e))?;
                    return Ok(true);
                }
                Some(OracleCheck::Balance) => Experiment::Reversibility,
                Some(OracleCheck::Perfect) => Experiment::PerfectOracle,
                Some(OracleCheck::Forward) => Experiment::ForwardOracle,
            };
            let o = Overrides {
                beta: Some(vec![model.beta]),
                boxes: Some(vec![model.side]),
                nmax: Some(model.nmax),
                replicas: *replicas,
            };
            run_experiment(cli, kind, &o)
        }
        Command::SampleForward { model, t_end, replicas } => {
            let sys = ContourSystem::new(&ShapeCatalog::build(model.nmax), BoxRegion::square(model.side), model.beta);
            let mut w = open_out(cli.out.as_deref()).map_err(|e| s(&e))?;
            for i in 0..*replicas {
                let mut rng = stream(seed, "sample-forward", i as u64);
                let marks = generate_marks(&sys, *t_end, &mut rng);
                let traj = evolve(&sys, &[], &marks).map_err(|e| s(&e))?;
                for e in &traj.events {
                    let rec = json!({ "replica": i, "type": "event", "event": e, "contour": sys.contours[e.contour as usize] });
                    writeln!(w, "{rec}").map_err(|e| s(&e))?;
                }
                let fin: Vec<_> = traj.final_state().iter().map(|&c| &sys.contours[c as usize]).collect();
                let rec = json!({ "replica": i, "type": "final", "t_end": t_end, "marks": marks.len(), "state": fin });
                writeln!(w, "{rec}").map_err(|e| s(&e))?;
            }
            Ok(true)
        }
        Command::SamplePerfect { model, replicas, emit } => {
            let shapes = ShapeCatalog::build(model.nmax);
            let region = BoxRegion::square(model.side);
            let mut w = open_out(cli.out.as_deref()).map_err(|e| s(&e))?;
            for i in 0..*replicas {
                let mut rng = stream(seed, "sample-perfect", i as u64);
                let rec = match emit {
                    Emit::Config => {
                        let c = sample_window(&shapes, region, model.beta, &mut rng).map_err(|e| s(&e))?;
                        json!({ "replica": i, "configuration": c.contours(), "area": c.area() })
                    }
                    Emit::Stats => {
                        // clan of the origin edge in infinite volume
                        let q = Plaquette::new(0, 0, Axis::X);
                        let mut cache = FreeProcessCache::new(&shapes, model.beta, rng);
                        let clan = clan_of_points(&mut cache, &[(q, 0.0)], CUMULATIVE_CAP).map_err(|e| s(&e))?;
                        json!({ "replica": i, "stats": clan_stats_of(&clan, &shapes, q) })
                    }
                };
                writeln!(w, "{rec}").map_err(|e| s(&e))?;
            }
            Ok(true)
        }
        Command::ClusterStats(o) => run_experiment(cli, Experiment::ClanTails, o),
        Command::R1(o) => run_experiment(cli, Experiment::Reversibility, o),
        Command::R2(o) => run_experiment(cli, Experiment::Convergence, o),
        Command::R3(o) => run_experiment(cli, Experiment::VolumeEffect, o),
        Command::R4(o) => run_experiment(cli, Experiment::Clustering, o),
        Command::R5(o) => run_experiment(cli, Experiment::Clt, o),
        Command::R6(o) => run_experiment(cli, Experiment::Poisson, o),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
