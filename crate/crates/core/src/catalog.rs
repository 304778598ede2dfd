//! Weighted contour catalogs: the truncated λ_β sum with a certified tail,
//! the temperature thresholds, and translation-class tables used by the
//! samplers.

use std::collections::{HashMap, HashSet};
use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{enumerate_through, Axis, Contour, Plaquette, Shift};

/// Growth constant of the crude count a_n ≤ 3ⁿ: after the anchor, every
/// step of an Euler circuit has at most three continuations.
pub const CRUDE_GROWTH: f64 = 3.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CatalogError {
    #[error("size cutoff {0} is below the smallest contour (4)")]
    CutoffTooSmall(usize),
    #[error("beta = {0} must be positive and finite")]
    InvalidBeta(f64),
    #[error("tail of lambda diverges under the crude count at beta = {0} (need beta > ln 3)")]
    TailDivergent(f64),
    #[error("no catalog contour intersects the region")]
    EmptyRegion,
    #[error("enumeration is only available in d = 2 (got d = {0})")]
    UnsupportedDimension(u32),
}

/// Inclusive box of lattice vertices `[x0, x1] × [y0, y1]`. A plaquette is
/// inside when both endpoints are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxRegion {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl BoxRegion {
    pub fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        BoxRegion { x0, y0, x1, y1 }
    }

    /// `side × side` cells with the lower-left corner at the origin.
    pub fn square(side: i32) -> Self {
        BoxRegion::new(0, 0, side, side)
    }

    /// The degenerate box covering exactly one plaquette.
    pub fn single(p: Plaquette) -> Self {
        let [a, b] = p.endpoints();
        BoxRegion::new(a.0, a.1, b.0, b.1)
    }

    pub fn contains_vertex(&self, (x, y): (i32, i32)) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn contains_plaquette(&self, p: Plaquette) -> bool {
        p.endpoints().iter().all(|&v| self.contains_vertex(v))
    }

    pub fn contains_contour(&self, c: &Contour) -> bool {
        let (a, b, x, y) = c.vertex_bounds();
        a >= self.x0 && b >= self.y0 && x <= self.x1 && y <= self.y1
    }

    pub fn intersects_contour(&self, c: &Contour) -> bool {
        c.plaquettes().iter().any(|&p| self.contains_plaquette(p))
    }

    pub fn width(&self) -> i32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i32 {
        self.y1 - self.y0
    }

    /// All plaquettes inside, in canonical order.
    pub fn plaquettes(&self) -> Vec<Plaquette> {
        let mut out = Vec::new();
        for x in self.x0..=self.x1 {
            for y in self.y0..=self.y1 {
                for axis in Axis::ALL {
                    let p = Plaquette::new(x, y, axis);
                    if self.contains_plaquette(p) {
                        out.push(p);
                    }
                }
            }
        }
        out
    }

    /// L1 distance (on base vertices) from `p` to the nearest plaquette
    /// outside the box.
    pub fn distance_to_complement(&self, p: Plaquette) -> u32 {
        if !self.contains_plaquette(p) {
            return 0;
        }
        let cands = [p.x - self.x0 + 1, self.x1 - p.x, p.y - self.y0 + 1, self.y1 - p.y];
        cands.into_iter().min().unwrap().max(0) as u32
    }
}

/// Contours through a fixed plaquette, `counts[n]` of size `n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SizeCounts {
    pub n_max: usize,
    pub counts: Vec<u64>,
}

impl SizeCounts {
    pub fn enumerate(n_max: usize) -> SizeCounts {
        SizeCounts {
            n_max,
            counts: crate::geometry::size_counts(n_max),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(n, &c)| (n, c))
    }

    /// Σ_{γ∋0, |γ|≤n_max} |γ| e^{−β|γ|}.
    pub fn lambda(&self, beta: f64) -> f64 {
        self.iter().map(|(n, c)| n as f64 * c as f64 * (-beta * n as f64).exp()).sum()
    }

    /// Σ_{γ∋0} e^{−β|γ|}, the total birth rate of contours through a plaquette.
    pub fn total_rate(&self, beta: f64) -> f64 {
        self.iter().map(|(n, c)| c as f64 * (-beta * n as f64).exp()).sum()
    }
}

/// Upper bound on Σ_{n>n_max} n·3ⁿ·e^{−βn}. Infinite when 3e^{−β} ≥ 1.
pub fn lambda_tail_bound(beta: f64, n_max: usize) -> f64 {
    let q = CRUDE_GROWTH * (-beta).exp();
    if q >= 1.0 {
        return f64::INFINITY;
    }
    let n = (n_max + 1) as f64;
    q.powf(n) * (n - (n - 1.0) * q) / ((1.0 - q) * (1.0 - q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaEstimate {
    pub beta: f64,
    pub n_max: usize,
    pub value: f64,
    /// `f64::INFINITY` when the crude count cannot certify the tail.
    pub tail_bound: f64,
}

impl LambdaEstimate {
    pub fn certified(&self) -> bool {
        self.tail_bound.is_finite()
    }

    pub fn upper(&self) -> f64 {
        self.value + self.tail_bound
    }

    /// Reject estimates whose tail is not certified.
    pub fn certify(self) -> Result<LambdaEstimate, CatalogError> {
        if self.certified() {
            Ok(self)
        } else {
            Err(CatalogError::TailDivergent(self.beta))
        }
    }
}

fn check_beta(beta: f64) -> Result<(), CatalogError> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(CatalogError::InvalidBeta(beta))
    }
}

/// Truncated λ_β with its tail bound. The value is returned even when the
/// tail is uncertified; check [`LambdaEstimate::certified`].
pub fn lambda_beta(beta: f64, n_max: usize) -> Result<LambdaEstimate, CatalogError> {
    check_beta(beta)?;
    Ok(lambda_with_counts(&SizeCounts::enumerate(n_max), beta))
}

pub fn lambda_with_counts(counts: &SizeCounts, beta: f64) -> LambdaEstimate {
    LambdaEstimate {
        beta,
        n_max: counts.n_max,
        value: counts.lambda(beta),
        tail_bound: lambda_tail_bound(beta, counts.n_max),
    }
}

/// Bracket for the threshold where (d−1)λ_β crosses 1. `lower` solves the
/// truncated equation; `upper` solves it with the certified tail added, so
/// the true threshold lies in `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetaMBracket {
    pub d: u32,
    pub n_max: usize,
    pub lower: f64,
    pub upper: f64,
}

/// Analytic bound on the Peierls threshold from the crude count.
pub fn beta_p_bound() -> f64 {
    CRUDE_GROWTH.ln()
}

/// Root of a decreasing function on `[lo, hi]` (sign change required).
pub(crate) fn bisect_decreasing(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    debug_assert!(f(lo) >= 0.0 && f(hi) <= 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    0.5 * (lo + hi)
}

pub fn beta_m(d: u32, n_max: usize) -> Result<BetaMBracket, CatalogError> {
    if d != 2 {
        return Err(CatalogError::UnsupportedDimension(d));
    }
    if n_max < 4 {
        return Err(CatalogError::CutoffTooSmall(n_max));
    }
    Ok(beta_m_with_counts(d, &SizeCounts::enumerate(n_max)))
}

pub fn beta_m_with_counts(d: u32, counts: &SizeCounts) -> BetaMBracket {
    let target = 1.0 / (d as f64 - 1.0);
    let lower = bisect_decreasing(1e-6, 60.0, |b| counts.lambda(b) - target);
    let upper = bisect_decreasing(beta_p_bound() + 1e-12, 60.0, |b| {
        counts.lambda(b) + lambda_tail_bound(b, counts.n_max) - target
    });
    BetaMBracket {
        d,
        n_max: counts.n_max,
        lower,
        upper,
    }
}

/// Cutoff used to certify the subcriticality threshold.
pub const CERT_CUTOFF: usize = 14;

/// β_M bracket at [`CERT_CUTOFF`], computed once per process.
pub fn certified_beta_m() -> BetaMBracket {
    static CACHE: std::sync::OnceLock<BetaMBracket> = std::sync::OnceLock::new();
    *CACHE.get_or_init(|| beta_m_with_counts(2, &SizeCounts::enumerate(CERT_CUTOFF)))
}

/// Closed-form reference thresholds from the literature, for display.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceBounds {
    pub d: u32,
    /// 64 log d / d (analyticity regime).
    pub beta_lm: f64,
    /// 6 log d / d.
    pub beta_m: f64,
    /// log d / (2d).
    pub beta_p: f64,
}

pub fn reference_bounds(d: u32) -> ReferenceBounds {
    let df = d as f64;
    let r = df.ln() / df;
    ReferenceBounds {
        d,
        beta_lm: 64.0 * r,
        beta_m: 6.0 * r,
        beta_p: r / 2.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Plaquette(Plaquette),
    Region(BoxRegion),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedContour {
    pub contour: Contour,
    pub weight: f64,
}

/// Contours of size ≤ `n_max` through an anchor plaquette (or inside a
/// region), each with weight e^{−β|γ|}.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCatalog {
    pub beta: f64,
    pub n_max: usize,
    pub anchor: Anchor,
    pub entries: Vec<WeightedContour>,
    /// `counts[n]` = number of entries of size n.
    pub counts: Vec<u64>,
    /// Bound on the λ_β mass beyond `n_max` (infinite when uncertifiable).
    pub tail_bound: f64,
}

pub fn build_catalog(
    beta: f64,
    n_max: usize,
    region: Option<BoxRegion>,
) -> Result<WeightedCatalog, CatalogError> {
    check_beta(beta)?;
    if n_max < 4 {
        return Err(CatalogError::CutoffTooSmall(n_max));
    }
    let (anchor, contours) = match region {
        None => {
            let p = Plaquette::new(0, 0, Axis::X);
            (Anchor::Plaquette(p), enumerate_through(p, n_max))
        }
        Some(r) => {
            let shapes = ShapeCatalog::build(n_max);
            (Anchor::Region(r), shapes.contours_in(&r))
        }
    };
    let mut counts = vec![0u64; n_max + 1];
    let entries = contours
        .into_iter()
        .map(|c| {
            counts[c.size()] += 1;
            let weight = (-beta * c.size() as f64).exp();
            WeightedContour { contour: c, weight }
        })
        .collect();
    Ok(WeightedCatalog {
        beta,
        n_max,
        anchor,
        entries,
        counts,
        tail_bound: lambda_tail_bound(beta, n_max),
    })
}

#[derive(Serialize)]
struct CatalogHeader<'a> {
    beta: f64,
    n_max: usize,
    tail_bound: Option<f64>,
    anchor: &'a Anchor,
    entries: usize,
}

#[derive(Serialize)]
struct CatalogRecord<'a> {
    plaquettes: &'a Contour,
    size: usize,
    weight: f64,
}

impl WeightedCatalog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose smallest plaquette is `p`. Over all plaquettes these
    /// sets partition the catalog.
    pub fn owned_by(&self, p: Plaquette) -> impl Iterator<Item = &WeightedContour> + '_ {
        self.entries.iter().filter(move |e| e.contour.min_plaquette() == p)
    }

    /// Total birth rate of the entries intersecting `region`, and one entry
    /// drawn proportionally to its weight.
    pub fn total_rate_and_sample<R: Rng + ?Sized>(
        &self,
        region: &BoxRegion,
        rng: &mut R,
    ) -> Result<(f64, &Contour), CatalogError> {
        let hits: Vec<&WeightedContour> =
            self.entries.iter().filter(|e| region.intersects_contour(&e.contour)).collect();
        let rate: f64 = hits.iter().map(|e| e.weight).sum();
        if hits.is_empty() || rate <= 0.0 {
            return Err(CatalogError::EmptyRegion);
        }
        let mut u = rng.random::<f64>() * rate;
        for e in &hits {
            if u < e.weight {
                return Ok((rate, &e.contour));
            }
            u -= e.weight;
        }
        Ok((rate, &hits[hits.len() - 1].contour))
    }

    /// JSON-lines export: a header record, then one record per contour.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header = CatalogHeader {
            beta: self.beta,
            n_max: self.n_max,
            tail_bound: self.tail_bound.is_finite().then_some(self.tail_bound),
            anchor: &self.anchor,
            entries: self.entries.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for e in &self.entries {
            let rec = CatalogRecord {
                plaquettes: &e.contour,
                size: e.contour.size(),
                weight: e.weight,
            };
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

pub type ShapeId = u32;

/// A concrete contour: translation class `shape` moved by `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Placement {
    pub shape: ShapeId,
    pub offset: Shift,
}

impl Placement {
    pub fn shifted(self, s: Shift) -> Placement {
        Placement {
            shape: self.shape,
            offset: self.offset + s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Shape {
    /// Representative with its smallest plaquette at the origin.
    pub contour: Contour,
    pub size: usize,
    /// Inclusive vertex bounds of the representative.
    pub bounds: (i32, i32, i32, i32),
}

/// Translation classes of contours up to `n_max`, with precomputed
/// incompatibility offsets. Independent of β.
#[derive(Debug, Clone)]
pub struct ShapeCatalog {
    pub n_max: usize,
    shapes: Vec<Shape>,
    index: HashMap<Contour, ShapeId>,
    through: [Vec<Placement>; 2],
    conflicts: Vec<Vec<Placement>>,
}

impl ShapeCatalog {
    pub fn build(n_max: usize) -> ShapeCatalog {
        let mut shapes = Vec::new();
        let mut index = HashMap::new();
        let mut through: [Vec<Placement>; 2] = [Vec::new(), Vec::new()];
        for axis in Axis::ALL {
            for c in enumerate_through(Plaquette::new(0, 0, axis), n_max) {
                let (norm, offset) = c.normalized();
                let id = *index.entry(norm.clone()).or_insert_with(|| {
                    shapes.push(Shape {
                        size: norm.size(),
                        bounds: norm.vertex_bounds(),
                        contour: norm,
                    });
                    (shapes.len() - 1) as ShapeId
                });
                through[axis.index()].push(Placement { shape: id, offset });
            }
        }
        let mut cat = ShapeCatalog {
            n_max,
            shapes,
            index,
            through,
            conflicts: Vec::new(),
        };
        cat.conflicts = (0..cat.shapes.len())
            .map(|s| {
                let mut hood: HashSet<Plaquette> = HashSet::new();
                for &p in cat.shapes[s].contour.plaquettes() {
                    hood.insert(p);
                    hood.extend(p.neighbors());
                }
                let mut set: HashSet<Placement> = HashSet::new();
                for q in hood {
                    set.extend(cat.through(q));
                }
                let mut v: Vec<Placement> = set.into_iter().collect();
                v.sort_unstable();
                v
            })
            .collect();
        cat
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn shape(&self, id: ShapeId) -> &Shape {
        &self.shapes[id as usize]
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn size_of(&self, p: Placement) -> usize {
        self.shapes[p.shape as usize].size
    }

    pub fn materialize(&self, p: Placement) -> Contour {
        self.shapes[p.shape as usize].contour.translate(p.offset)
    }

    pub fn placement_of(&self, c: &Contour) -> Option<Placement> {
        let (norm, offset) = c.normalized();
        self.index.get(&norm).map(|&shape| Placement { shape, offset })
    }

    /// Placements of all catalog contours containing `p`.
    pub fn through(&self, p: Plaquette) -> impl Iterator<Item = Placement> + '_ {
        let s = Shift::new(p.x, p.y);
        self.through[p.axis.index()].iter().map(move |pl| pl.shifted(s))
    }

    /// Placements incompatible with `p` (including `p` itself).
    pub fn conflicts(&self, p: Placement) -> impl Iterator<Item = Placement> + '_ {
        self.conflicts[p.shape as usize].iter().map(move |q| q.shifted(p.offset))
    }

    pub fn conflict_count(&self, shape: ShapeId) -> usize {
        self.conflicts[shape as usize].len()
    }

    pub fn in_region(&self, p: Placement, r: &BoxRegion) -> bool {
        let (a, b, x, y) = self.shapes[p.shape as usize].bounds;
        let o = p.offset;
        a + o.dx >= r.x0 && b + o.dy >= r.y0 && x + o.dx <= r.x1 && y + o.dy <= r.y1
    }

    /// Offsets placing `shape` inside `r`, as inclusive ranges.
    pub fn offset_ranges(&self, shape: ShapeId, r: &BoxRegion) -> Option<((i32, i32), (i32, i32))> {
        let (a, b, x, y) = self.shapes[shape as usize].bounds;
        let dx = (r.x0 - a, r.x1 - x);
        let dy = (r.y0 - b, r.y1 - y);
        (dx.0 <= dx.1 && dy.0 <= dy.1).then_some((dx, dy))
    }

    pub fn placements_in(&self, r: &BoxRegion) -> Vec<Placement> {
        let mut out = Vec::new();
        for shape in 0..self.shapes.len() as ShapeId {
            if let Some(((x0, x1), (y0, y1))) = self.offset_ranges(shape, r) {
                for dx in x0..=x1 {
                    for dy in y0..=y1 {
                        out.push(Placement {
                            shape,
                            offset: Shift::new(dx, dy),
                        });
                    }
                }
            }
        }
        out
    }

    /// Every catalog contour inside `r`, sorted by `(size, plaquettes)`.
    pub fn contours_in(&self, r: &BoxRegion) -> Vec<Contour> {
        let mut v: Vec<Contour> = self.placements_in(r).into_iter().map(|p| self.materialize(p)).collect();
        v.sort_unstable_by(|a, b| a.size().cmp(&b.size()).then_with(|| a.cmp(b)));
        v
    }
}

/// The finite set of catalog contours inside a box, indexed in canonical
/// order, with weights and conflict lists (each list contains the contour
/// itself).
#[derive(Debug, Clone)]
pub struct ContourSystem {
    pub region: BoxRegion,
    pub beta: f64,
    pub n_max: usize,
    pub contours: Vec<Contour>,
    pub sizes: Vec<usize>,
    pub weights: Vec<f64>,
    pub conflicts: Vec<Vec<u32>>,
    index: HashMap<Contour, u32>,
}

impl ContourSystem {
    pub fn new(shapes: &ShapeCatalog, region: BoxRegion, beta: f64) -> ContourSystem {
        let contours = shapes.contours_in(&region);
        let index: HashMap<Contour, u32> =
            contours.iter().enumerate().map(|(i, c)| (c.clone(), i as u32)).collect();
        let conflicts = contours
            .iter()
            .map(|c| {
                let pl = shapes.placement_of(c).expect("catalog contour");
                let mut v: Vec<u32> = shapes
                    .conflicts(pl)
                    .filter(|&q| shapes.in_region(q, &region))
                    .map(|q| index[&shapes.materialize(q)])
                    .collect();
                v.sort_unstable();
                v
            })
            .collect();
        let sizes: Vec<usize> = contours.iter().map(Contour::size).collect();
        let weights = sizes.iter().map(|&n| (-beta * n as f64).exp()).collect();
        ContourSystem {
            region,
            beta,
            n_max: shapes.n_max,
            contours,
            sizes,
            weights,
            conflicts,
            index,
        }
    }

    /// A system over an explicit contour list; conflicts are checked
    /// pairwise. `region` is the vertex bounding box of the list.
    pub fn from_contours(mut contours: Vec<Contour>, beta: f64) -> ContourSystem {
        contours.sort_unstable_by(|a, b| a.size().cmp(&b.size()).then_with(|| a.cmp(b)));
        contours.dedup();
        let region = contours.iter().fold(BoxRegion::new(i32::MAX, i32::MAX, i32::MIN, i32::MIN), |r, c| {
            let (a, b, x, y) = c.vertex_bounds();
            BoxRegion::new(r.x0.min(a), r.y0.min(b), r.x1.max(x), r.y1.max(y))
        });
        let conflicts = contours
            .iter()
            .map(|a| {
                (0..contours.len() as u32)
                    .filter(|&j| crate::geometry::incompatible(a, &contours[j as usize]))
                    .collect()
            })
            .collect();
        let sizes: Vec<usize> = contours.iter().map(Contour::size).collect();
        ContourSystem {
            region,
            beta,
            n_max: sizes.iter().copied().max().unwrap_or(0),
            index: contours.iter().enumerate().map(|(i, c)| (c.clone(), i as u32)).collect(),
            weights: sizes.iter().map(|&n| (-beta * n as f64).exp()).collect(),
            sizes,
            conflicts,
            contours,
        }
    }

    pub fn square_box(side: i32, beta: f64, n_max: usize) -> ContourSystem {
        ContourSystem::new(&ShapeCatalog::build(n_max), BoxRegion::square(side), beta)
    }

    pub fn len(&self) -> usize {
        self.contours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contours.is_empty()
    }

    pub fn id_of(&self, c: &Contour) -> Option<u32> {
        self.index.get(c).copied()
    }

    pub fn conflict(&self, a: u32, b: u32) -> bool {
        self.conflicts[a as usize].binary_search(&b).is_ok()
    }

    pub fn total_rate(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::incompatible;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smallest_catalog() {
        let c = build_catalog(2.0, 4, None).unwrap();
        assert_eq!(c.len(), 2);
        for e in &c.entries {
            assert_eq!(e.weight, (-8.0f64).exp());
        }
        assert_eq!(build_catalog(2.0, 3, None), Err(CatalogError::CutoffTooSmall(3)));
        let cold = build_catalog(700.0, 6, None).unwrap();
        assert!(cold.entries.iter().all(|e| e.weight < 1e-300));
    }

    #[test]
    fn lambda_terms() {
        let l = lambda_beta(2.0, 4).unwrap();
        assert!((l.value - 8.0 * (-8.0f64).exp()).abs() < 1e-18);
        assert!((l.value - 2.684e-3).abs() < 1e-6);
        let l6 = lambda_beta(2.0, 6).unwrap();
        assert!((l6.value - l.value - 6.0 * 6.0 * (-12.0f64).exp()).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for b in [1.5, 2.0, 2.5, 3.0] {
            let v = lambda_beta(b, 10).unwrap().value;
            assert!(v < prev);
            prev = v;
        }
        let hot = lambda_beta(1.0, 10).unwrap();
        assert!(!hot.certified());
        assert_eq!(hot.certify(), Err(CatalogError::TailDivergent(1.0)));
    }

    #[test]
    fn tail_bound_matches_series() {
        for (beta, n) in [(2.0, 12usize), (1.5, 8), (3.0, 4)] {
            let q = 3.0 * f64::exp(-beta);
            let series: f64 = (n + 1..4000).map(|k| k as f64 * q.powi(k as i32)).sum();
            let b = lambda_tail_bound(beta, n);
            assert!((b - series).abs() <= 1e-12 * series, "{b} vs {series}");
        }
        assert!(lambda_tail_bound(3f64.ln(), 10).is_infinite());
    }

    #[test]
    fn tail_dominates_neglected_terms() {
        let big = SizeCounts::enumerate(14);
        for beta in [1.3, 2.0] {
            for n in [8usize, 10, 12] {
                let small = SizeCounts::enumerate(n);
                let neglected = big.lambda(beta) - small.lambda(beta);
                assert!(neglected <= lambda_tail_bound(beta, n));
                assert!(neglected >= 0.0);
            }
        }
    }

    #[test]
    fn beta_m_bracket() {
        let b8 = beta_m(2, 8).unwrap();
        let b10 = beta_m(2, 10).unwrap();
        assert!(b8.lower < b8.upper);
        assert!(b10.lower >= b8.lower);
        assert!(b10.upper <= b8.upper);
        assert!(b10.upper >= b10.lower);
        let c = SizeCounts::enumerate(10);
        assert!((c.lambda(b10.lower) - 1.0).abs() < 1e-5);
        let up = c.lambda(b10.upper) + lambda_tail_bound(b10.upper, 10);
        assert!((up - 1.0).abs() < 1e-5);
        assert!(c.lambda(b10.lower - 0.01) > 1.0 && c.lambda(b10.lower + 0.01) < 1.0);
        assert!(b10.upper > beta_p_bound());
        assert_eq!(beta_m(3, 8), Err(CatalogError::UnsupportedDimension(3)));
    }

    #[test]
    fn beta_m_regression() {
        // Frozen from the bisection itself; guards against silent changes
        // in the enumeration or the tail formula.
        let b = beta_m(2, 12).unwrap();
        assert!((b.lower - 0.908_032_127).abs() < 1e-6, "{}", b.lower);
        assert!((b.upper - 1.414_153_829).abs() < 1e-6, "{}", b.upper);
    }

    #[test]
    fn reference_numbers() {
        let r = reference_bounds(2);
        assert!((r.beta_lm - 22.18).abs() < 0.01);
        assert!((r.beta_m - 2.079).abs() < 0.001);
        assert!((r.beta_p - 0.1733).abs() < 0.0001);
        for d in 2..20 {
            let r = reference_bounds(d);
            assert!(r.beta_lm > r.beta_m && r.beta_m > r.beta_p);
            let unit = (d as f64).ln() / d as f64;
            assert!((r.beta_m / unit - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_single_edge() {
        let cat = build_catalog(1.0, 4, None).unwrap();
        let region = BoxRegion::single(Plaquette::new(0, 0, Axis::X));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (rate, _) = cat.total_rate_and_sample(&region, &mut rng).unwrap();
        assert!((rate - 2.0 * (-4.0f64).exp()).abs() < 1e-15);
        let far = BoxRegion::single(Plaquette::new(10, 10, Axis::X));
        assert_eq!(cat.total_rate_and_sample(&far, &mut rng).unwrap_err(), CatalogError::EmptyRegion);
    }

    #[test]
    fn sampling_frequencies_chi_square() {
        let cat = build_catalog(1.2, 8, None).unwrap();
        let region = BoxRegion::single(Plaquette::new(0, 0, Axis::X));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts: HashMap<Contour, u64> = HashMap::new();
        let draws = 100_000;
        let mut rate = 0.0;
        for _ in 0..draws {
            let (r, c) = cat.total_rate_and_sample(&region, &mut rng).unwrap();
            rate = r;
            *counts.entry(c.clone()).or_default() += 1;
        }
        // pool the sizes so each cell has a healthy expectation
        let mut obs = [0f64; 9];
        let mut exp = [0f64; 9];
        for e in &cat.entries {
            let n = e.contour.size();
            obs[n] += *counts.get(&e.contour).unwrap_or(&0) as f64;
            exp[n] += draws as f64 * e.weight / rate;
        }
        let chi2: f64 = [4, 6, 8].iter().map(|&n| (obs[n] - exp[n]).powi(2) / exp[n]).sum();
        let p = crate::stats::chi_square_sf(chi2, 2.0);
        assert!(p > 0.01, "chi2 = {chi2}, p = {p}");
    }

    #[test]
    fn owned_sets_partition_region_catalog() {
        let r = BoxRegion::square(3);
        let cat = build_catalog(2.0, 8, Some(r)).unwrap();
        let mut total = 0;
        for p in r.plaquettes() {
            total += cat.owned_by(p).count();
        }
        assert_eq!(total, cat.len());
    }

    #[test]
    fn shape_tables_agree_with_direct_checks() {
        let shapes = ShapeCatalog::build(8);
        let r = BoxRegion::square(4);
        let sys = ContourSystem::new(&shapes, r, 1.5);
        // brute-force membership: all contours through plaquettes of the box
        let mut direct: HashSet<Contour> = HashSet::new();
        for p in r.plaquettes() {
            for c in enumerate_through(p, 8) {
                if r.contains_contour(&c) {
                    direct.insert(c);
                }
            }
        }
        assert_eq!(direct.len(), sys.len());
        for (i, a) in sys.contours.iter().enumerate() {
            assert!(direct.contains(a));
            for (j, b) in sys.contours.iter().enumerate() {
                assert_eq!(sys.conflict(i as u32, j as u32), incompatible(a, b), "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn region_catalog_counts() {
        // 4x4 cells: 16 squares, 24 dominoes, 9 + 16 + 36 + 18 size-8 shapes
        let cat = build_catalog(1.5, 8, Some(BoxRegion::square(4))).unwrap();
        assert_eq!(cat.counts[4], 16);
        assert_eq!(cat.counts[6], 24);
        assert_eq!(cat.counts[8], 9 + 16 + 36 + 18);
    }

    #[test]
    fn complement_distance() {
        let r = BoxRegion::square(4);
        assert_eq!(r.distance_to_complement(Plaquette::new(0, 0, Axis::X)), 1);
        assert_eq!(r.distance_to_complement(Plaquette::new(1, 2, Axis::X)), 2);
        assert_eq!(r.distance_to_complement(Plaquette::new(9, 2, Axis::X)), 0);
        // brute force against the definition
        let outside: Vec<Plaquette> = BoxRegion::new(-3, -3, 7, 7)
            .plaquettes()
            .into_iter()
            .filter(|p| !r.contains_plaquette(*p))
            .collect();
        for p in r.plaquettes() {
            let d = outside.iter().map(|q| p.distance(*q)).min().unwrap();
            assert_eq!(r.distance_to_complement(p), d, "{p}");
        }
    }
}
