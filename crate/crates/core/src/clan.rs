//! Backward clan-of-ancestors construction on a lazily sampled stationary
//! free process, with kept/erased resolution and exact window sampling.

use std::collections::{HashMap, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use crate::catalog::{certified_beta_m, BoxRegion, Placement, ShapeCatalog};
use crate::forward::Configuration;
use crate::geometry::{Plaquette, Shift};

/// Default bound on the cumulative basis size of one clan.
pub const CUMULATIVE_CAP: u64 = 10_000_000;

/// Horizon step used when a boundary cylinder's birth must be revealed.
const REVEAL_STEP: f64 = 1.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ClanError {
    #[error("clan exceeded the cap: cumulative size {cumulative} at generation {depth}")]
    CapExceeded { cumulative: u64, depth: u32 },
    #[error("inconsistent clan: {0}")]
    Inconsistent(String),
    #[error("beta = {beta} is not above the certified threshold {beta_m}")]
    SubcriticalityViolated { beta: f64, beta_m: f64 },
}

/// A cylinder of the free process: the `index`-th cylinder of `placement`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct CylId {
    pub placement: Placement,
    pub index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct CylRec {
    /// `None` while the birth lies before the contour's horizon.
    birth: Option<f64>,
    death: f64,
}

#[derive(Debug, Clone, Default)]
struct ContourProcess {
    /// Births are known on `(−horizon, 0]`.
    horizon: f64,
    cyls: Vec<CylRec>,
}

/// The stationary free process on `(−∞, 0]`, sampled one contour at a time
/// and only as deep into the past as queries require. Cylinders already
/// exposed are never resampled; deeper extension only appends.
pub struct FreeProcessCache<'a> {
    shapes: &'a ShapeCatalog,
    beta: f64,
    weights: Vec<f64>,
    procs: HashMap<Placement, ContourProcess>,
    zero_region: Option<BoxRegion>,
    restrict: Option<BoxRegion>,
    rng: ChaCha8Rng,
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean).unwrap().sample(rng) as u64
    }
}

fn exp1<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Exp1.sample(rng)
}

impl<'a> FreeProcessCache<'a> {
    pub fn new(shapes: &'a ShapeCatalog, beta: f64, rng: ChaCha8Rng) -> FreeProcessCache<'a> {
        let weights = shapes.shapes().iter().map(|s| (-beta * s.size as f64).exp()).collect();
        FreeProcessCache {
            shapes,
            beta,
            weights,
            procs: HashMap::new(),
            zero_region: None,
            restrict: None,
            rng,
        }
    }

    /// Ignore every contour not contained in `region`.
    pub fn restricted_to(mut self, region: BoxRegion) -> Self {
        self.restrict = Some(region);
        self
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn shapes(&self) -> &'a ShapeCatalog {
        self.shapes
    }

    pub fn weight(&self, p: Placement) -> f64 {
        self.weights[p.shape as usize]
    }

    /// Contours sampled so far.
    pub fn touched(&self) -> usize {
        self.procs.len()
    }

    pub fn horizon(&self, p: Placement) -> Option<f64> {
        self.procs.get(&p).map(|c| c.horizon)
    }

    fn allowed(&self, p: Placement) -> bool {
        self.restrict.is_none_or(|r| self.shapes.in_region(p, &r))
    }

    fn touch(&mut self, p: Placement) -> &mut ContourProcess {
        if !self.procs.contains_key(&p) {
            let mut proc = ContourProcess::default();
            if !self.zero_region.is_some_and(|r| self.shapes.in_region(p, &r)) {
                let n = poisson(self.weights[p.shape as usize], &mut self.rng);
                for _ in 0..n {
                    proc.cyls.push(CylRec {
                        birth: None,
                        death: exp1(&mut self.rng),
                    });
                }
            }
            self.procs.insert(p, proc);
        }
        self.procs.get_mut(&p).unwrap()
    }

    /// Deepen the horizon of `p` by `dt`.
    pub fn extend(&mut self, p: Placement, dt: f64) {
        assert!(dt > 0.0);
        let w = self.weights[p.shape as usize];
        self.touch(p);
        let proc = self.procs.get_mut(&p).unwrap();
        let rng = &mut self.rng;
        let t0 = proc.horizon;
        let t1 = t0 + dt;
        // boundary cylinders: their age at −t0 is Exp(1)
        for c in proc.cyls.iter_mut().filter(|c| c.birth.is_none()) {
            let age = exp1(rng);
            if age < dt {
                c.birth = Some(-t0 - age);
            }
        }
        // births in the slab that die before −t0
        for _ in 0..poisson(w * dt, rng) {
            let b = -t1 + rng.random::<f64>() * dt;
            let d = b + exp1(rng);
            if d <= -t0 {
                proc.cyls.push(CylRec {
                    birth: Some(b),
                    death: d,
                });
            }
        }
        // cylinders alive at −t1 that die inside the slab
        let q = -(-dt).exp_m1();
        for _ in 0..poisson(w * q, rng) {
            let r = -(-rng.random::<f64>() * q).ln_1p();
            proc.cyls.push(CylRec {
                birth: None,
                death: -t1 + r,
            });
        }
        proc.horizon = t1;
    }

    /// Deepen every contour sampled so far by `dt`.
    pub fn extend_horizon(&mut self, dt: f64) {
        let mut keys: Vec<Placement> = self.procs.keys().copied().collect();
        keys.sort_unstable();
        for k in keys {
            self.extend(k, dt);
        }
    }

    fn ensure_depth(&mut self, p: Placement, depth: f64) {
        let h = self.touch(p).horizon;
        if h < depth {
            self.extend(p, depth - h);
        }
    }

    fn record(&self, id: CylId) -> CylRec {
        self.procs[&id.placement].cyls[id.index as usize]
    }

    /// (birth, death) if the birth is already known.
    pub fn cylinder(&self, id: CylId) -> (Option<f64>, f64) {
        let r = self.record(id);
        (r.birth, r.death)
    }

    /// Birth of `id`, extending its contour's horizon until it is known.
    pub fn reveal_birth(&mut self, id: CylId) -> f64 {
        loop {
            if let Some(b) = self.record(id).birth {
                return b;
            }
            self.extend(id.placement, REVEAL_STEP);
        }
    }

    /// Cylinders of `p` alive at time `t ≤ 0`, born at or before `t`.
    pub fn alive_at(&mut self, p: Placement, t: f64) -> Vec<CylId> {
        self.ensure_depth(p, -t);
        let proc = &self.procs[&p];
        proc.cyls
            .iter()
            .enumerate()
            .filter(|(_, c)| c.death > t && c.birth.is_none_or(|b| b <= t))
            .map(|(i, _)| CylId {
                placement: p,
                index: i as u32,
            })
            .collect()
    }

    /// Cylinders whose basis contains `x` and which are alive at `t`.
    pub fn point_ancestors(&mut self, x: Plaquette, t: f64) -> Vec<CylId> {
        let through: Vec<Placement> = self.shapes.through(x).filter(|&p| self.allowed(p)).collect();
        through.into_iter().flat_map(|p| self.alive_at(p, t)).collect()
    }

    /// Cylinders with basis incompatible with `id`'s, born before it and
    /// alive at its birth.
    pub fn cylinder_ancestors(&mut self, id: CylId) -> Vec<CylId> {
        let b = self.reveal_birth(id);
        let conflicts: Vec<Placement> =
            self.shapes.conflicts(id.placement).filter(|&q| self.allowed(q)).collect();
        let mut out = Vec::new();
        for q in conflicts {
            self.ensure_depth(q, -b);
            let cyls = &self.procs[&q].cyls;
            for (i, c) in cyls.iter().enumerate() {
                let cid = CylId {
                    placement: q,
                    index: i as u32,
                };
                if cid != id && c.death > b && c.birth.is_none_or(|bb| bb < b) {
                    out.push(cid);
                }
            }
        }
        out
    }

    /// Sample the time-zero slice of every contour inside `region` in one
    /// pass. Must be called before any other query.
    pub fn sample_zero_slice(&mut self, region: BoxRegion) {
        assert!(self.procs.is_empty(), "zero slice must be sampled first");
        self.zero_region = Some(region);
        for shape in 0..self.shapes.len() as u32 {
            let Some(((x0, x1), (y0, y1))) = self.shapes.offset_ranges(shape, &region) else {
                continue;
            };
            let (nx, ny) = ((x1 - x0 + 1) as i64, (y1 - y0 + 1) as i64);
            let n = poisson((nx * ny) as f64 * self.weights[shape as usize], &mut self.rng);
            for _ in 0..n {
                let offset = Shift::new(x0 + self.rng.random_range(0..nx) as i32, y0 + self.rng.random_range(0..ny) as i32);
                let death = exp1(&mut self.rng);
                self.touch(Placement { shape, offset }).cyls.push(CylRec { birth: None, death });
            }
        }
    }

    /// Condition on `x` being covered at time 0: the cylinders alive at 0
    /// through `x` are drawn given that there is at least one. Returns the
    /// unconditional probability of that event. The contours through `x`
    /// must not have been sampled yet.
    pub fn condition_occupied(&mut self, x: Plaquette) -> f64 {
        let through: Vec<Placement> = self.shapes.through(x).filter(|&p| self.allowed(p)).collect();
        self.condition_on(through)
    }

    /// Condition on `p` having at least one cylinder alive at time 0.
    pub fn condition_alive(&mut self, p: Placement) -> f64 {
        self.condition_on(vec![p])
    }

    fn condition_on(&mut self, placements: Vec<Placement>) -> f64 {
        assert!(placements.iter().all(|p| !self.procs.contains_key(p)), "already sampled");
        let ws: Vec<f64> = placements.iter().map(|&p| self.weight(p)).collect();
        let total: f64 = ws.iter().sum();
        // zero-truncated Poisson by inversion
        let p0 = (-total).exp();
        let u = self.rng.random::<f64>() * -(-total).exp_m1();
        let (mut k, mut pk, mut acc) = (1u64, p0 * total, 0.0);
        while acc + pk < u && k < 1000 {
            acc += pk;
            k += 1;
            pk *= total / k as f64;
        }
        let mut counts = vec![0u64; placements.len()];
        for _ in 0..k {
            let mut v = self.rng.random::<f64>() * total;
            let mut pick = placements.len() - 1;
            for (i, &w) in ws.iter().enumerate() {
                if v < w {
                    pick = i;
                    break;
                }
                v -= w;
            }
            counts[pick] += 1;
        }
        for (p, n) in placements.into_iter().zip(counts) {
            let mut proc = ContourProcess::default();
            for _ in 0..n {
                proc.cyls.push(CylRec {
                    birth: None,
                    death: exp1(&mut self.rng),
                });
            }
            self.procs.insert(p, proc);
        }
        -(-total).exp_m1()
    }

    /// Every sampled cylinder alive at time 0, in canonical order.
    pub fn alive_at_zero(&self) -> Vec<CylId> {
        let mut keys: Vec<&Placement> = self.procs.keys().collect();
        keys.sort_unstable();
        let mut out = Vec::new();
        for &k in keys {
            for (i, c) in self.procs[&k].cyls.iter().enumerate() {
                if c.death > 0.0 && c.birth.is_none_or(|b| b <= 0.0) {
                    out.push(CylId {
                        placement: k,
                        index: i as u32,
                    });
                }
            }
        }
        out
    }

    /// Births recorded for `p` in `(lo, hi]`, in sampling order.
    pub fn births_in(&self, p: Placement, lo: f64, hi: f64) -> Vec<f64> {
        self.procs
            .get(&p)
            .map(|c| c.cyls.iter().filter_map(|c| c.birth).filter(|&b| b > lo && b <= hi).collect())
            .unwrap_or_default()
    }

    /// Snapshot of the raw records of `p`, for immutability audits.
    pub fn snapshot(&self, p: Placement) -> Vec<(Option<f64>, f64)> {
        self.procs
            .get(&p)
            .map(|c| c.cyls.iter().map(|r| (r.birth, r.death)).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Query {
    Point(Plaquette, f64),
    Cylinder(CylId),
}

pub fn first_gen_ancestors(query: Query, cache: &mut FreeProcessCache<'_>) -> Vec<CylId> {
    match query {
        Query::Point(x, t) => cache.point_ancestors(x, t),
        Query::Cylinder(id) => cache.cylinder_ancestors(id),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClanNode {
    pub id: CylId,
    pub size: usize,
    pub birth: f64,
    pub death: f64,
    pub generation: u32,
    /// Node indices of the first-generation ancestors.
    pub ancestors: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Clan {
    pub nodes: Vec<ClanNode>,
    pub roots: Vec<u32>,
}

impl Clan {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, id: CylId) -> Option<u32> {
        self.nodes.iter().position(|n| n.id == id).map(|i| i as u32)
    }
}

struct ClanBuilder {
    clan: Clan,
    index: HashMap<CylId, u32>,
    queue: VecDeque<u32>,
    cumulative: u64,
    cap: u64,
}

impl ClanBuilder {
    fn add(&mut self, id: CylId, generation: u32, cache: &FreeProcessCache<'_>) -> Result<u32, ClanError> {
        if let Some(&i) = self.index.get(&id) {
            return Ok(i);
        }
        let size = cache.shapes().size_of(id.placement);
        self.cumulative += size as u64;
        if self.cumulative > self.cap {
            return Err(ClanError::CapExceeded {
                cumulative: self.cumulative,
                depth: generation,
            });
        }
        let (birth, death) = cache.cylinder(id);
        let i = self.clan.nodes.len() as u32;
        self.clan.nodes.push(ClanNode {
            id,
            size,
            birth: birth.unwrap_or(f64::NAN),
            death,
            generation,
            ancestors: Vec::new(),
        });
        self.index.insert(id, i);
        self.queue.push_back(i);
        Ok(i)
    }
}

/// Breadth-first closure of the ancestor relation from `roots`.
pub fn build_clan(cache: &mut FreeProcessCache<'_>, roots: &[CylId], cap: u64) -> Result<Clan, ClanError> {
    let mut b = ClanBuilder {
        clan: Clan::default(),
        index: HashMap::new(),
        queue: VecDeque::new(),
        cumulative: 0,
        cap,
    };
    for &r in roots {
        let i = b.add(r, 0, cache)?;
        if !b.clan.roots.contains(&i) {
            b.clan.roots.push(i);
        }
    }
    while let Some(i) = b.queue.pop_front() {
        let id = b.clan.nodes[i as usize].id;
        let generation = b.clan.nodes[i as usize].generation;
        let anc = cache.cylinder_ancestors(id);
        b.clan.nodes[i as usize].birth = cache.cylinder(id).0.expect("birth revealed");
        let mut links = Vec::with_capacity(anc.len());
        for a in anc {
            links.push(b.add(a, generation + 1, cache)?);
        }
        b.clan.nodes[i as usize].ancestors = links;
    }
    Ok(b.clan)
}

/// Clan of the space-time points `targets`.
pub fn clan_of_points(
    cache: &mut FreeProcessCache<'_>,
    targets: &[(Plaquette, f64)],
    cap: u64,
) -> Result<Clan, ClanError> {
    let mut roots = Vec::new();
    let mut seen = HashSet::new();
    for &(x, t) in targets {
        for c in cache.point_ancestors(x, t) {
            if seen.insert(c) {
                roots.push(c);
            }
        }
    }
    build_clan(cache, &roots, cap)
}

/// Kept (`true`) or erased labels. Computed by a chronological sweep and
/// by the iterative rule (ancestor-free nodes kept, nodes with a kept
/// ancestor erased, repeat); the two must agree.
pub fn resolve(clan: &Clan) -> Result<Vec<bool>, ClanError> {
    let n = clan.nodes.len();
    for (i, node) in clan.nodes.iter().enumerate() {
        for &a in &node.ancestors {
            let Some(anc) = clan.nodes.get(a as usize) else {
                return Err(ClanError::Inconsistent(format!("node {i} links to missing node {a}")));
            };
            if !(anc.birth < node.birth && node.birth < anc.death) {
                return Err(ClanError::Inconsistent(format!(
                    "ancestor {a} is not alive at the birth of node {i}"
                )));
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| clan.nodes[a].birth.total_cmp(&clan.nodes[b].birth));
    let mut sweep = vec![false; n];
    for &i in &order {
        sweep[i] = !clan.nodes[i].ancestors.iter().any(|&a| sweep[a as usize]);
    }
    let mut label: Vec<Option<bool>> = vec![None; n];
    loop {
        let mut changed = false;
        for i in 0..n {
            if label[i].is_some() {
                continue;
            }
            let anc = &clan.nodes[i].ancestors;
            if anc.iter().any(|&a| label[a as usize] == Some(true)) {
                label[i] = Some(false);
                changed = true;
            } else if anc.iter().all(|&a| label[a as usize] == Some(false)) {
                label[i] = Some(true);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let iterative: Option<Vec<bool>> = label.into_iter().collect();
    match iterative {
        None => Err(ClanError::Inconsistent("ancestor relation has a cycle".into())),
        Some(it) if it != sweep => Err(ClanError::Inconsistent("sweep and iterative labels differ".into())),
        Some(it) => Ok(it),
    }
}

fn gate(beta: f64) -> Result<(), ClanError> {
    let b = certified_beta_m().upper;
    if beta > b {
        Ok(())
    } else {
        Err(ClanError::SubcriticalityViolated { beta, beta_m: b })
    }
}

/// Exact draw from the finite-volume measure on `region` (all catalog
/// contours inside it).
pub fn sample_window<R: Rng + ?Sized>(
    shapes: &ShapeCatalog,
    region: BoxRegion,
    beta: f64,
    rng: &mut R,
) -> Result<Configuration, ClanError> {
    gate(beta)?;
    sample_window_capped(shapes, region, beta, rng, CUMULATIVE_CAP)
}

/// [`sample_window`] without the threshold check; only the cap guards it.
pub fn sample_window_capped<R: Rng + ?Sized>(
    shapes: &ShapeCatalog,
    region: BoxRegion,
    beta: f64,
    rng: &mut R,
    cap: u64,
) -> Result<Configuration, ClanError> {
    let mut cache = FreeProcessCache::new(shapes, beta, ChaCha8Rng::from_seed(rng.random())).restricted_to(region);
    cache.sample_zero_slice(region);
    let roots = cache.alive_at_zero();
    let clan = build_clan(&mut cache, &roots, cap)?;
    let kept = resolve(&clan)?;
    let present = clan
        .roots
        .iter()
        .filter(|&&i| kept[i as usize])
        .map(|&i| shapes.materialize(clan.nodes[i as usize].id.placement))
        .collect();
    Configuration::new(present).map_err(|(a, b)| ClanError::Inconsistent(format!("kept {a:?} and {b:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClanStats {
    /// Σ |γ| over distinct bases.
    pub cumulative: u64,
    /// Number of distinct plaquettes covered by the bases.
    pub projection: usize,
    /// Largest L∞ offset of a covered plaquette's endpoints from the query
    /// plaquette's base vertex.
    pub width: i32,
    /// Depth of the oldest birth.
    pub time_length: f64,
    pub cylinders: usize,
    pub generations: u32,
}

pub fn clan_stats_of(clan: &Clan, shapes: &ShapeCatalog, query: Plaquette) -> ClanStats {
    let bases: HashSet<Placement> = clan.nodes.iter().map(|n| n.id.placement).collect();
    let cumulative = bases.iter().map(|&p| shapes.size_of(p) as u64).sum();
    let mut proj: HashSet<Plaquette> = HashSet::new();
    for &p in &bases {
        proj.extend(shapes.materialize(p).plaquettes().iter().copied());
    }
    let width = proj
        .iter()
        .flat_map(|p| p.endpoints())
        .map(|(x, y)| (x - query.x).abs().max((y - query.y).abs()))
        .max()
        .unwrap_or(0);
    ClanStats {
        cumulative,
        projection: proj.len(),
        width,
        time_length: clan.nodes.iter().map(|n| -n.birth).fold(0.0, f64::max),
        cylinders: clan.len(),
        generations: clan.nodes.iter().map(|n| n.generation + 1).max().unwrap_or(0),
    }
}

/// Clan statistics of `(query, 0)` over independent replicas.
#[derive(Debug, Clone, Serialize)]
pub struct ClanSample {
    /// Probability of the conditioning event (1 when unconditioned).
    pub weight: f64,
    pub stats: Vec<ClanStats>,
    /// Replicas abandoned at the cap.
    pub capped: usize,
}

/// `conditioned`: condition on the query plaquette being covered at time 0
/// and report the probability of that event as `weight`.
pub fn clan_stats(
    shapes: &ShapeCatalog,
    beta: f64,
    query: Plaquette,
    replicas: usize,
    seed: u64,
    conditioned: bool,
) -> Result<ClanSample, ClanError> {
    gate(beta)?;
    let runs: Vec<(f64, Result<ClanStats, ClanError>)> = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let mut cache = FreeProcessCache::new(shapes, beta, crate::rng::stream(seed, "clan", i as u64));
            let w = if conditioned { cache.condition_occupied(query) } else { 1.0 };
            let r = clan_of_points(&mut cache, &[(query, 0.0)], CUMULATIVE_CAP).map(|c| clan_stats_of(&c, shapes, query));
            (w, r)
        })
        .collect();
    let weight = runs.first().map_or(1.0, |r| r.0);
    let mut stats = Vec::with_capacity(replicas);
    let mut capped = 0;
    for (_, r) in runs {
        match r {
            Ok(s) => stats.push(s),
            Err(ClanError::CapExceeded { .. }) => capped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(ClanSample { weight, stats, capped })
}

/// Infinite-volume probability that `contour` is present at time 0, with
/// its standard error. Each replica conditions on a cylinder of `contour`
/// alive at 0 and resolves its clan.
pub fn presence_probability(
    shapes: &ShapeCatalog,
    beta: f64,
    contour: &crate::geometry::Contour,
    replicas: usize,
    seed: u64,
) -> Result<(f64, f64), ClanError> {
    gate(beta)?;
    let p = shapes
        .placement_of(contour)
        .ok_or_else(|| ClanError::Inconsistent("contour is not in the catalog".into()))?;
    let runs: Vec<Result<(f64, bool), ClanError>> = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let mut cache = FreeProcessCache::new(shapes, beta, crate::rng::stream(seed, "presence", i as u64));
            let w = cache.condition_alive(p);
            let roots = cache.alive_at(p, 0.0);
            let clan = build_clan(&mut cache, &roots, CUMULATIVE_CAP)?;
            let kept = resolve(&clan)?;
            Ok((w, clan.roots.iter().any(|&r| kept[r as usize])))
        })
        .collect();
    let mut hits = Vec::with_capacity(replicas);
    let mut w = 0.0;
    for r in runs {
        let (wi, k) = r?;
        w = wi;
        hits.push(k as u8 as f64);
    }
    Ok((w * crate::stats::mean(&hits), w * crate::stats::std_error(&hits)))
}
