//! Acceptance gate: every criterion at its stated tolerance, one line each.
//! Runs without the libtest harness so the lines are always printed.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use contour_core::bounds::{critical_points, f_gen, BranchingSpec};
use contour_core::experiments::{
    run_clan_tails, run_clt, run_clustering, run_convergence, run_forward_oracle, run_perfect_oracle, run_poisson,
    run_reversibility, run_volume_effect, Experiment, ExperimentConfig, Report,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn from_checks(rep: &Report, names: &[&str]) -> Outcome {
    let picked: Vec<_> = if names.is_empty() {
        rep.checks.iter().collect()
    } else {
        names.iter().map(|n| rep.check(n).unwrap_or_else(|| panic!("missing check {n}"))).collect()
    };
    Outcome {
        passed: picked.iter().all(|c| c.passed),
        detail: picked
            .iter()
            .map(|c| format!("{}={:.4e}{}{:.4e}{}", c.name, c.value, c.relation, c.threshold, if c.passed { "" } else { "(x)" }))
            .collect::<Vec<_>>()
            .join(" "),
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let mut o = f();
    let el = t.elapsed();
    o.passed &= el <= limit;
    o.detail.push_str(&format!(" runtime={:.1}s<={}s", el.as_secs_f64(), limit.as_secs()));
    o
}

fn defaults(kind: Experiment) -> ExperimentConfig {
    ExperimentConfig::defaults(kind)
}

fn branching_constants() -> Outcome {
    let spec = BranchingSpec::new(2.0, 2, 8).unwrap();
    let f1 = f_gen(1.0, &spec).unwrap().value;
    let h = 1e-6;
    let fd = (f_gen(1.0 + h, &spec).unwrap().value - f_gen(1.0 - h, &spec).unwrap().value) / (2.0 * h);
    let target = (spec.d - 1) as f64 * spec.lambda;
    let rel = (fd - target).abs() / target;
    let cp = critical_points(&spec).unwrap();
    let closed = ((spec.beta - spec.truncated_beta_m) / (spec.d - 1) as f64).exp();
    let da = (cp.a_bar - closed).abs();
    Outcome {
        passed: (f1 - 1.0).abs() <= 1e-12 && rel <= 1e-4 && da <= 1e-3,
        detail: format!(
            "|f(1)-1|={:.2e}<=1e-12 f'(1)_rel={:.2e}<=1e-4 |a_bar-closed|={:.2e}<=1e-3",
            (f1 - 1.0).abs(),
            rel,
            da
        ),
    }
}

fn cli_runs() -> Vec<Vec<String>> {
    let cfg = std::env::temp_dir().join("contour-acceptance-r6.cfg");
    std::fs::write(&cfg, "blocks = 512\naux_replicas = 2000\nmin_contours = 100\n").unwrap();
    let c = cfg.to_string_lossy().to_string();
    [
        "bounds --beta 2 --replicas 2000",
        "enumerate --beta 1.5 --nmax 8",
        "enumerate --beta 1.5 --nmax 8 --box 3",
        "oracle --beta 1.5 --box 3",
        "oracle --beta 1.5 --box 4 --check perfect --replicas 2000",
        "oracle --beta 1.5 --box 4 --check forward --replicas 2000",
        "sample-forward --beta 1.5 --box 6 --t-end 20 --replicas 3",
        "sample-perfect --beta 1.5 --box 8 --replicas 20",
        "sample-perfect --beta 1.5 --replicas 50 --emit stats",
        "cluster-stats --beta 2 --replicas 2000",
        "r1",
        "r2 --replicas 200",
        "r3",
        "r4 --replicas 300",
        "r5 --replicas 200",
    ]
    .iter()
    .map(|s| s.split(' ').map(String::from).collect())
    .chain(std::iter::once(vec!["r6".into(), "--config".into(), c]))
    .map(|mut v: Vec<String>| {
        v.extend(["--seed".into(), "77".into()]);
        v
    })
    .collect()
}

fn determinism() -> Outcome {
    let bin = Path::new(env!("CARGO_BIN_EXE_contour"));
    let mut bad = Vec::new();
    let runs = cli_runs();
    for args in &runs {
        let a = Command::new(bin).args(args).output().unwrap();
        let b = Command::new(bin).args(args).output().unwrap();
        let errored = a.status.code() == Some(2) || a.stdout.is_empty();
        if errored || a.stdout != b.stdout || a.stderr != b.stderr || a.status != b.status {
            bad.push(args[0].clone());
        }
    }
    Outcome {
        passed: bad.is_empty(),
        detail: format!("invocations={} differing={:?}", runs.len(), bad),
    }
}

fn main() {
    let minute = Duration::from_secs(60);
    let tails = run_clan_tails(&ExperimentConfig { betas: vec![2.0], ..defaults(Experiment::ClanTails) }).unwrap();
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        (
            "oracle equivalence, perfect sampler",
            Box::new(|| timed(2 * minute, || from_checks(&run_perfect_oracle(&defaults(Experiment::PerfectOracle)).unwrap(), &[]))),
        ),
        (
            "oracle equivalence, forward sampler",
            Box::new(|| timed(5 * minute, || from_checks(&run_forward_oracle(&defaults(Experiment::ForwardOracle)).unwrap(), &[]))),
        ),
        (
            "reversibility",
            Box::new(|| from_checks(&run_reversibility(&defaults(Experiment::Reversibility)).unwrap(), &["detailed_balance"])),
        ),
        ("branching constants", Box::new(branching_constants)),
        ("GW tail bound", Box::new(|| from_checks(&tails, &["gw_tail_envelope[beta=2]"]))),
        ("clan domination", Box::new(|| from_checks(&tails, &["gw_domination[beta=2]"]))),
        ("time-length tail", Box::new(|| from_checks(&tails, &["time_rate[beta=2]"]))),
        ("width tail", Box::new(|| from_checks(&tails, &["width_envelope[beta=2]"]))),
        ("convergence", Box::new(|| from_checks(&run_convergence(&defaults(Experiment::Convergence)).unwrap(), &[]))),
        (
            "finite-volume effect and clustering",
            Box::new(|| {
                let a = from_checks(&run_volume_effect(&defaults(Experiment::VolumeEffect)).unwrap(), &[]);
                let b = from_checks(&run_clustering(&defaults(Experiment::Clustering)).unwrap(), &[]);
                Outcome {
                    passed: a.passed && b.passed,
                    detail: format!("r3: {} | r4: {}", a.detail, b.detail),
                }
            }),
        ),
        ("CLT", Box::new(|| from_checks(&run_clt(&defaults(Experiment::Clt)).unwrap(), &[]))),
        ("Poisson approximation", Box::new(|| from_checks(&run_poisson(&defaults(Experiment::Poisson)).unwrap(), &[]))),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let o = f();
        println!("criterion {:>2} {:<38} {} {}", i + 1, name, if o.passed { "PASS" } else { "FAIL" }, o.detail);
        if !o.passed {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
