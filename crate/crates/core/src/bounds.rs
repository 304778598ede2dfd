//! Branching-process constants and simulators: the offspring generating
//! function f, the critical points ā and b̄, the decay-rate bundle, and the
//! Galton–Watson and multitype processes that dominate clan growth.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use crate::catalog::{
    beta_m_with_counts, certified_beta_m, BetaMBracket, CatalogError, ShapeCatalog, ShapeId, SizeCounts,
    CRUDE_GROWTH,
};

/// Individuals allowed per replica before a run is abandoned.
pub const INDIVIDUAL_CAP: u64 = 1_000_000;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BoundsError {
    #[error("beta = {beta} is not above the certified threshold {beta_m}")]
    SubcriticalityViolated { beta: f64, beta_m: f64 },
    #[error("a = {a} is outside the certified radius {radius}")]
    RadiusExceeded { a: f64, radius: f64 },
    #[error("population exceeded {0} individuals")]
    CapExceeded(u64),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

/// Offspring law of the single-type process: a plaquette is hit by
/// Poisson(e^{−β|γ|}) copies of each contour γ through it, each copy
/// contributing (d−1)|γ| children.
#[derive(Debug, Clone)]
pub struct BranchingSpec {
    pub beta: f64,
    pub d: u32,
    pub n_max: usize,
    pub counts: SizeCounts,
    /// Truncated λ_β.
    pub lambda: f64,
    /// (d−1)·λ_β.
    pub mean_offspring: f64,
    /// Certified threshold used for gating.
    pub threshold: BetaMBracket,
    /// Root of the truncated equation at this cutoff.
    pub truncated_beta_m: f64,
    /// (size, a_n e^{−βn}) for every populated size.
    size_weights: Vec<(usize, f64)>,
    rate: f64,
}

impl BranchingSpec {
    pub fn new(beta: f64, d: u32, n_max: usize) -> Result<BranchingSpec, BoundsError> {
        if d != 2 {
            return Err(CatalogError::UnsupportedDimension(d).into());
        }
        if n_max < 4 {
            return Err(CatalogError::CutoffTooSmall(n_max).into());
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(CatalogError::InvalidBeta(beta).into());
        }
        let counts = SizeCounts::enumerate(n_max);
        let size_weights: Vec<(usize, f64)> =
            counts.iter().map(|(n, c)| (n, c as f64 * (-beta * n as f64).exp())).collect();
        let lambda = counts.lambda(beta);
        Ok(BranchingSpec {
            beta,
            d,
            n_max,
            lambda,
            mean_offspring: (d as f64 - 1.0) * lambda,
            threshold: certified_beta_m(),
            truncated_beta_m: beta_m_with_counts(d, &counts).lower,
            rate: size_weights.iter().map(|w| w.1).sum(),
            size_weights,
            counts,
        })
    }

    pub fn is_subcritical(&self) -> bool {
        self.beta > self.threshold.upper
    }

    pub fn require_subcritical(&self) -> Result<(), BoundsError> {
        if self.is_subcritical() {
            Ok(())
        } else {
            Err(BoundsError::SubcriticalityViolated {
                beta: self.beta,
                beta_m: self.threshold.upper,
            })
        }
    }

    fn dm1(&self) -> f64 {
        self.d as f64 - 1.0
    }

    /// Total rate Σ_{γ∋0} e^{−β|γ|} of contour hits at one plaquette.
    pub fn hit_rate(&self) -> f64 {
        self.rate
    }

    /// Radius inside which the crude count bounds the neglected terms of f.
    pub fn radius(&self) -> f64 {
        (self.beta.exp() / CRUDE_GROWTH).powf(1.0 / self.dm1())
    }

    /// Number of children from one hit-sampling round.
    pub fn sample_offspring<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let hits = Poisson::new(self.rate).unwrap().sample(rng) as u64;
        let mut y = 0;
        for _ in 0..hits {
            let mut u = rng.random::<f64>() * self.rate;
            let mut size = self.size_weights[self.size_weights.len() - 1].0;
            for &(n, w) in &self.size_weights {
                if u < w {
                    size = n;
                    break;
                }
                u -= w;
            }
            y += (self.d as u64 - 1) * size as u64;
        }
        y
    }
}

/// f for the catalog-truncated offspring law (exact for that law, any a ≥ 0).
pub fn f_truncated(a: f64, spec: &BranchingSpec) -> f64 {
    let k = spec.dm1();
    spec.size_weights
        .iter()
        .map(|&(n, w)| w * (a.powf(k * n as f64) - 1.0))
        .sum::<f64>()
        .exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FValue {
    pub value: f64,
    /// Bound on |f_true(a) − value| from the contours beyond the cutoff.
    pub truncation_bound: f64,
}

/// f(a) = E[a^Y] for the full offspring law, with a truncation bound.
pub fn f_gen(a: f64, spec: &BranchingSpec) -> Result<FValue, BoundsError> {
    let radius = spec.radius();
    if !(0.0..radius).contains(&a) {
        return Err(BoundsError::RadiusExceeded { a, radius });
    }
    let value = f_truncated(a, spec);
    let r = CRUDE_GROWTH * (-spec.beta).exp() * a.max(1.0).powf(spec.dm1());
    let tail = r.powi(spec.n_max as i32 + 1) / (1.0 - r);
    Ok(FValue {
        value,
        truncation_bound: value * tail.exp_m1().max(-(-tail).exp_m1()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CriticalPoints {
    /// Root of Σ |γ| e^{−β|γ|} ā^{(d−1)|γ|} = 1/(d−1), by bisection.
    pub a_bar: f64,
    /// e^{(β−β_M)/(d−1)} with β_M the truncated root at the same cutoff.
    pub a_bar_closed: f64,
    /// ā / f(ā).
    pub b_bar: f64,
}

pub fn critical_points(spec: &BranchingSpec) -> Result<CriticalPoints, BoundsError> {
    spec.require_subcritical()?;
    Ok(critical_points_unchecked(spec))
}

pub(crate) fn critical_points_unchecked(spec: &BranchingSpec) -> CriticalPoints {
    let k = spec.dm1();
    let g = |a: f64| {
        spec.size_weights.iter().map(|&(n, w)| n as f64 * w * a.powf(k * n as f64)).sum::<f64>() - 1.0 / k
    };
    let mut hi = 2.0;
    while g(hi) < 0.0 {
        hi *= 2.0;
    }
    let a_bar = crate::catalog::bisect_decreasing(1.0, hi, |a| -g(a));
    CriticalPoints {
        a_bar,
        a_bar_closed: ((spec.beta - spec.truncated_beta_m) / k).exp(),
        b_bar: a_bar / f_truncated(a_bar, spec),
    }
}

/// Total progeny of the single-type Galton–Watson process with Z₀ = 1.
pub fn simulate_gw<R: Rng + ?Sized>(spec: &BranchingSpec, rng: &mut R) -> Result<u64, BoundsError> {
    let mut pending: u64 = 1;
    let mut total: u64 = 0;
    while pending > 0 {
        pending -= 1;
        total += 1;
        if total > INDIVIDUAL_CAP {
            return Err(BoundsError::CapExceeded(INDIVIDUAL_CAP));
        }
        pending += spec.sample_offspring(rng);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateBundle {
    pub a_bar: f64,
    pub b_bar: f64,
    /// F(b̄) = ā, from the fixed point.
    pub m2: f64,
    /// Empirical E[b̄^Z] and its standard error.
    pub m2_simulated: f64,
    pub m2_std_error: f64,
    pub m3: f64,
    /// 1 − (d−1)λ_β.
    pub time_exponent: f64,
    /// Supremum (1 − m)/(2 − m) of the admissible M₀.
    pub m0_sup: f64,
    pub replicas: usize,
    pub capped: usize,
}

pub fn rate_bundle(spec: &BranchingSpec, replicas: usize, seed: u64) -> Result<RateBundle, BoundsError> {
    let cp = critical_points(spec)?;
    let zs: Vec<Option<u64>> = (0..replicas)
        .into_par_iter()
        .map(|i| simulate_gw(spec, &mut crate::rng::stream(seed, "m2", i as u64)).ok())
        .collect();
    let vals: Vec<f64> = zs.iter().flatten().map(|&z| cp.b_bar.powf(z as f64)).collect();
    let m = spec.mean_offspring;
    Ok(RateBundle {
        a_bar: cp.a_bar,
        b_bar: cp.b_bar,
        m2: cp.a_bar,
        m2_simulated: crate::stats::mean(&vals),
        m2_std_error: crate::stats::std_error(&vals),
        m3: cp.b_bar.ln(),
        time_exponent: 1.0 - m,
        m0_sup: (1.0 - m) / (2.0 - m),
        replicas,
        capped: replicas - vals.len(),
    })
}

/// Offspring means μ(γ, θ) of the multitype process, aggregated by shape:
/// a contour of shape s spawns Poisson(e^{−β|θ|}) copies of every
/// incompatible placement θ.
#[derive(Debug, Clone)]
pub struct OffspringTable {
    means: Vec<f64>,
    targets: Vec<Vec<(ShapeId, f64)>>,
}

impl OffspringTable {
    pub fn build(spec: &BranchingSpec, shapes: &ShapeCatalog) -> Result<OffspringTable, BoundsError> {
        spec.require_subcritical()?;
        Ok(OffspringTable::from_shapes(shapes, spec.beta))
    }

    pub fn from_shapes(shapes: &ShapeCatalog, beta: f64) -> OffspringTable {
        let mut means = Vec::with_capacity(shapes.len());
        let mut targets = Vec::with_capacity(shapes.len());
        for s in 0..shapes.len() as ShapeId {
            let mut agg: HashMap<ShapeId, f64> = HashMap::new();
            for q in shapes.conflicts(crate::catalog::Placement {
                shape: s,
                offset: Default::default(),
            }) {
                *agg.entry(q.shape).or_default() += (-beta * shapes.size_of(q) as f64).exp();
            }
            let mut v: Vec<(ShapeId, f64)> = agg.into_iter().collect();
            v.sort_unstable_by_key(|e| e.0);
            means.push(v.iter().map(|e| e.1).sum());
            targets.push(v);
        }
        OffspringTable { means, targets }
    }

    /// `types` shapes, none of which has offspring.
    pub fn childless(types: usize) -> OffspringTable {
        OffspringTable {
            means: vec![0.0; types],
            targets: vec![Vec::new(); types],
        }
    }

    pub fn mean(&self, s: ShapeId) -> f64 {
        self.means[s as usize]
    }

    fn push_children<R: Rng + ?Sized>(&self, s: ShapeId, rng: &mut R, out: &mut Vec<ShapeId>) {
        let mu = self.means[s as usize];
        if mu <= 0.0 {
            return;
        }
        let k = Poisson::new(mu).unwrap().sample(rng) as u64;
        let t = &self.targets[s as usize];
        for _ in 0..k {
            let mut u = rng.random::<f64>() * mu;
            let mut pick = t[t.len() - 1].0;
            for &(id, w) in t {
                if u < w {
                    pick = id;
                    break;
                }
                u -= w;
            }
            out.push(pick);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultitypeRun {
    /// Time the population died out, if before the horizon.
    pub extinction_time: Option<f64>,
    /// (time, population) after each death up to the horizon.
    pub path: Vec<(f64, u64)>,
    pub total: u64,
}

impl MultitypeRun {
    pub fn alive_at(&self, t: f64) -> bool {
        self.extinction_time.is_none_or(|e| e > t)
    }
}

struct Death(f64, ShapeId);

impl PartialEq for Death {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Death {}
impl PartialOrd for Death {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Death {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
    }
}

/// Continuous-time multitype branching from one contour of shape
/// `initial`: each individual lives Exp(1), then spawns its offspring.
pub fn simulate_multitype<R: Rng + ?Sized>(
    table: &OffspringTable,
    initial: ShapeId,
    horizon: f64,
    rng: &mut R,
) -> Result<MultitypeRun, BoundsError> {
    let mut heap = BinaryHeap::new();
    let life = |rng: &mut R| -> f64 { Exp1.sample(rng) };
    heap.push(Death(life(rng), initial));
    let mut total = 1u64;
    let mut path = vec![(0.0, 1u64)];
    let mut kids = Vec::new();
    while let Some(Death(t, s)) = heap.pop() {
        if t > horizon {
            return Ok(MultitypeRun {
                extinction_time: None,
                path,
                total,
            });
        }
        kids.clear();
        table.push_children(s, rng, &mut kids);
        total += kids.len() as u64;
        if total > INDIVIDUAL_CAP {
            return Err(BoundsError::CapExceeded(INDIVIDUAL_CAP));
        }
        for &k in &kids {
            heap.push(Death(t + life(rng), k));
        }
        path.push((t, heap.len() as u64));
        if heap.is_empty() {
            return Ok(MultitypeRun {
                extinction_time: Some(t),
                path,
                total,
            });
        }
    }
    unreachable!("heap emptied without recording extinction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(beta: f64) -> BranchingSpec {
        BranchingSpec::new(beta, 2, 8).unwrap()
    }

    #[test]
    fn f_at_fixed_points() {
        let s = spec(2.0);
        assert_eq!(f_gen(1.0, &s).unwrap().value, 1.0);
        let f0 = f_gen(0.0, &s).unwrap();
        assert!((f0.value - (-s.hit_rate()).exp()).abs() < 1e-15);
        assert!(f0.value > 0.0);
        let h = 1e-6;
        let d = (f_gen(1.0 + h, &s).unwrap().value - f_gen(1.0 - h, &s).unwrap().value) / (2.0 * h);
        assert!((d / s.mean_offspring - 1.0).abs() < 1e-4, "{d} vs {}", s.mean_offspring);
        assert!(matches!(f_gen(3.0, &s), Err(BoundsError::RadiusExceeded { .. })));
    }

    #[test]
    fn f_increasing_and_log_convex() {
        let s = spec(2.0);
        let cp = critical_points(&s).unwrap();
        let grid: Vec<f64> = (0..=200).map(|i| cp.a_bar * i as f64 / 200.0).collect();
        let lf: Vec<f64> = grid.iter().map(|&a| f_truncated(a, &s).ln()).collect();
        for i in 1..grid.len() {
            assert!(lf[i] > lf[i - 1]);
        }
        for i in 1..grid.len() - 1 {
            assert!(lf[i + 1] - 2.0 * lf[i] + lf[i - 1] >= -1e-12);
        }
    }

    #[test]
    fn critical_points_closed_form() {
        let s = spec(2.0);
        let cp = critical_points(&s).unwrap();
        assert!((cp.a_bar - cp.a_bar_closed).abs() < 1e-3, "{cp:?}");
        assert!(cp.b_bar > 1.0);
        assert!((cp.b_bar * f_truncated(cp.a_bar, &s) - cp.a_bar).abs() < 1e-12);
        // approaching the truncated threshold
        let near = BranchingSpec::new(s.truncated_beta_m + 1e-4, 2, 8).unwrap();
        let cn = critical_points_unchecked(&near);
        assert!(cn.a_bar > 1.0 && cn.a_bar < 1.001);
        assert!(cn.b_bar > 1.0 && cn.b_bar < 1.001);
        let hot = spec(1.2);
        assert!(matches!(critical_points(&hot), Err(BoundsError::SubcriticalityViolated { .. })));
    }

    #[test]
    fn bundle_values() {
        let s = BranchingSpec::new(2.0, 2, 10).unwrap();
        let b = rate_bundle(&s, 2_000, 3).unwrap();
        assert!((b.time_exponent - (1.0 - s.lambda)).abs() < 1e-15);
        let terms: [(f64, f64); 4] = [(4.0, 2.0), (6.0, 6.0), (8.0, 36.0), (10.0, 180.0)];
        let direct: f64 = terms.iter().map(|(n, a)| n * a * (-2.0 * n).exp()).sum();
        assert!((s.lambda - direct).abs() < 1e-15);
        assert!(b.m0_sup < (1.0 + 1e-12) * (1.0 - s.lambda) / (2.0 - s.lambda));
        assert!(b.m2 >= 1.0 && b.m2_simulated >= 1.0);
        assert!(b.m3 > 0.0 && b.time_exponent > 0.0 && b.m0_sup > 0.0);
        assert_eq!(b.capped, 0);
    }

    #[test]
    fn gw_supercritical_hits_cap() {
        let s = spec(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut capped = false;
        for _ in 0..20 {
            if simulate_gw(&s, &mut rng) == Err(BoundsError::CapExceeded(INDIVIDUAL_CAP)) {
                capped = true;
                break;
            }
        }
        assert!(capped);
    }

    #[test]
    fn childless_rig_is_pure_death() {
        let table = OffspringTable::childless(1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let runs: Vec<MultitypeRun> =
            (0..n).map(|_| simulate_multitype(&table, 0, 5.0, &mut rng).unwrap()).collect();
        for t in [0.5, 1.0, 2.0] {
            let p = runs.iter().filter(|r| r.alive_at(t)).count() as f64 / n as f64;
            let e = (-t as f64).exp();
            let sd = (e * (1.0 - e) / n as f64).sqrt();
            assert!((p - e).abs() < 4.0 * sd, "t={t}: {p} vs {e}");
        }
        assert!(runs.iter().all(|r| r.total == 1));
    }

    #[test]
    fn offspring_means_count_incompatible_placements() {
        let shapes = ShapeCatalog::build(4);
        let t = OffspringTable::from_shapes(&shapes, 2.0);
        // a unit square conflicts with itself and its eight neighbours
        assert!((t.mean(0) - 9.0 * (-8.0f64).exp()).abs() < 1e-15);
    }
}
