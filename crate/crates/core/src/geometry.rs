//! Square-lattice plaquettes (unit edges of Z²), contours and their
//! compatibility relation.
//!
//! A plaquette is encoded by its lexicographically smaller endpoint and the
//! axis it points along. A contour is a finite, connected edge set in which
//! every touched vertex has degree 2 or 4.

use std::collections::{HashSet, VecDeque};
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    X = 0,
    Y = 1,
}

impl Axis {
    pub const ALL: [Axis; 2] = [Axis::X, Axis::Y];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Option<Axis> {
        match i {
            0 => Some(Axis::X),
            1 => Some(Axis::Y),
            _ => None,
        }
    }
}

/// A lattice vertex.
pub type Vertex = (i32, i32);

/// Unit edge of Z² from `(x, y)` to `(x + 1, y)` (axis X) or `(x, y + 1)`
/// (axis Y). Ordering is lexicographic in `(x, y, axis)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Plaquette {
    pub x: i32,
    pub y: i32,
    pub axis: Axis,
}

impl Plaquette {
    pub const fn new(x: i32, y: i32, axis: Axis) -> Self {
        Plaquette { x, y, axis }
    }

    /// The edge joining two lattice-adjacent vertices, in canonical form.
    pub fn between(a: Vertex, b: Vertex) -> Option<Plaquette> {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        match (hi.0 - lo.0, hi.1 - lo.1) {
            (1, 0) => Some(Plaquette::new(lo.0, lo.1, Axis::X)),
            (0, 1) => Some(Plaquette::new(lo.0, lo.1, Axis::Y)),
            _ => None,
        }
    }

    pub fn base(self) -> Vertex {
        (self.x, self.y)
    }

    pub fn endpoints(self) -> [Vertex; 2] {
        match self.axis {
            Axis::X => [(self.x, self.y), (self.x + 1, self.y)],
            Axis::Y => [(self.x, self.y), (self.x, self.y + 1)],
        }
    }

    pub fn other_end(self, v: Vertex) -> Vertex {
        let [a, b] = self.endpoints();
        if v == a {
            b
        } else {
            a
        }
    }

    pub fn shifted(self, s: Shift) -> Plaquette {
        Plaquette::new(self.x + s.dx, self.y + s.dy, self.axis)
    }

    /// The six plaquettes sharing an endpoint with `self`.
    pub fn neighbors(self) -> [Plaquette; 6] {
        let mut out = [self; 6];
        let mut k = 0;
        for v in self.endpoints() {
            for e in incident_edges(v) {
                if e != self {
                    out[k] = e;
                    k += 1;
                }
            }
        }
        debug_assert_eq!(k, 6);
        out
    }

    /// L1 distance between base vertices.
    pub fn distance(self, other: Plaquette) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

impl fmt::Display for Plaquette {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.x, self.y, self.axis as u8)
    }
}

impl Serialize for Plaquette {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        (self.x, self.y, self.axis as u8).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Plaquette {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let (x, y, a) = <(i32, i32, u8)>::deserialize(d)?;
        let axis = Axis::from_index(a).ok_or_else(|| D::Error::custom("axis must be 0 or 1"))?;
        Ok(Plaquette::new(x, y, axis))
    }
}

/// The four lattice edges meeting at `v`.
pub fn incident_edges(v: Vertex) -> [Plaquette; 4] {
    let (x, y) = v;
    [
        Plaquette::new(x, y, Axis::X),
        Plaquette::new(x - 1, y, Axis::X),
        Plaquette::new(x, y, Axis::Y),
        Plaquette::new(x, y - 1, Axis::Y),
    ]
}

/// Distinct plaquettes sharing a (d−2)-face, which in d = 2 is an endpoint.
pub fn adjacent(p: Plaquette, q: Plaquette) -> bool {
    if p == q {
        return false;
    }
    let [a, b] = p.endpoints();
    let [c, d] = q.endpoints();
    a == c || a == d || b == c || b == d
}

/// Lattice translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Shift {
    pub dx: i32,
    pub dy: i32,
}

impl Shift {
    pub const ZERO: Shift = Shift { dx: 0, dy: 0 };

    pub const fn new(dx: i32, dy: i32) -> Self {
        Shift { dx, dy }
    }

    pub fn inverse(self) -> Shift {
        Shift::new(-self.dx, -self.dy)
    }
}

impl std::ops::Add for Shift {
    type Output = Shift;
    fn add(self, o: Shift) -> Shift {
        Shift::new(self.dx + o.dx, self.dy + o.dy)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("plaquette set is not closed (vertex {0:?} has odd degree)")]
    NotClosed(Vertex),
    #[error("plaquette set is not connected")]
    NotConnected,
    #[error("empty plaquette set")]
    Empty,
}

/// Connected closed family of plaquettes, stored sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Contour {
    plaquettes: Vec<Plaquette>,
}

impl Contour {
    pub fn new(plaquettes: impl IntoIterator<Item = Plaquette>) -> Result<Contour, GeometryError> {
        let mut v: Vec<Plaquette> = plaquettes.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        check_contour(&v)?;
        Ok(Contour { plaquettes: v })
    }

    /// Callers guarantee `sorted` is sorted, deduplicated and a valid contour.
    pub(crate) fn from_sorted_unchecked(sorted: Vec<Plaquette>) -> Contour {
        debug_assert!(sorted.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(check_contour(&sorted).is_ok());
        Contour { plaquettes: sorted }
    }

    /// Boundary of the unit cell with lower-left corner `(x, y)`.
    pub fn unit_square(x: i32, y: i32) -> Contour {
        Contour::rectangle(x, y, 1, 1)
    }

    /// Boundary of the `w × h` rectangle with lower-left corner `(x, y)`.
    pub fn rectangle(x: i32, y: i32, w: i32, h: i32) -> Contour {
        assert!(w > 0 && h > 0);
        let mut v = Vec::with_capacity(2 * (w + h) as usize);
        for i in 0..w {
            v.push(Plaquette::new(x + i, y, Axis::X));
            v.push(Plaquette::new(x + i, y + h, Axis::X));
        }
        for j in 0..h {
            v.push(Plaquette::new(x, y + j, Axis::Y));
            v.push(Plaquette::new(x + w, y + j, Axis::Y));
        }
        v.sort_unstable();
        Contour::from_sorted_unchecked(v)
    }

    pub fn plaquettes(&self) -> &[Plaquette] {
        &self.plaquettes
    }

    pub fn size(&self) -> usize {
        self.plaquettes.len()
    }

    pub fn contains(&self, p: Plaquette) -> bool {
        self.plaquettes.binary_search(&p).is_ok()
    }

    pub fn min_plaquette(&self) -> Plaquette {
        self.plaquettes[0]
    }

    pub fn translate(&self, s: Shift) -> Contour {
        // Translation preserves the lexicographic order.
        Contour {
            plaquettes: self.plaquettes.iter().map(|p| p.shifted(s)).collect(),
        }
    }

    /// Translate so that the smallest plaquette sits at the origin. Returns
    /// the normalized contour and the shift that maps it back onto `self`.
    pub fn normalized(&self) -> (Contour, Shift) {
        let m = self.min_plaquette();
        let s = Shift::new(m.x, m.y);
        (self.translate(s.inverse()), s)
    }

    /// Inclusive vertex bounding box `(xmin, ymin, xmax, ymax)`.
    pub fn vertex_bounds(&self) -> (i32, i32, i32, i32) {
        let mut b = (i32::MAX, i32::MAX, i32::MIN, i32::MIN);
        for p in &self.plaquettes {
            for (x, y) in p.endpoints() {
                b.0 = b.0.min(x);
                b.1 = b.1.min(y);
                b.2 = b.2.max(x);
                b.3 = b.3.max(y);
            }
        }
        b
    }
}

impl Serialize for Contour {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.plaquettes.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Contour {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<Plaquette>::deserialize(d)?;
        Contour::new(v).map_err(D::Error::custom)
    }
}

pub fn translate(gamma: &Contour, s: Shift) -> Contour {
    gamma.translate(s)
}

/// True iff the contours share a plaquette or contain adjacent plaquettes.
pub fn incompatible(gamma: &Contour, theta: &Contour) -> bool {
    let (small, large) = if gamma.size() <= theta.size() {
        (gamma, theta)
    } else {
        (theta, gamma)
    };
    small
        .plaquettes
        .iter()
        .any(|&p| large.contains(p) || p.neighbors().iter().any(|&q| large.contains(q)))
}

fn check_contour(sorted: &[Plaquette]) -> Result<(), GeometryError> {
    if sorted.is_empty() {
        return Err(GeometryError::Empty);
    }
    let mut degree: std::collections::HashMap<Vertex, u8> = std::collections::HashMap::new();
    for p in sorted {
        for v in p.endpoints() {
            *degree.entry(v).or_default() += 1;
        }
    }
    if let Some(v) = degree.iter().filter(|(_, &d)| d % 2 == 1).map(|(&v, _)| v).min() {
        return Err(GeometryError::NotClosed(v));
    }
    let set: HashSet<Plaquette> = sorted.iter().copied().collect();
    let mut seen = HashSet::with_capacity(sorted.len());
    let mut queue = VecDeque::from([sorted[0]]);
    seen.insert(sorted[0]);
    while let Some(p) = queue.pop_front() {
        for q in p.neighbors() {
            if set.contains(&q) && seen.insert(q) {
                queue.push_back(q);
            }
        }
    }
    if seen.len() != sorted.len() {
        return Err(GeometryError::NotConnected);
    }
    Ok(())
}

/// Closed (every vertex of degree 2 or 4) and connected.
pub fn is_contour(set: &[Plaquette]) -> bool {
    let mut v = set.to_vec();
    v.sort_unstable();
    v.dedup();
    check_contour(&v).is_ok()
}

/// All contours containing `p` with at most `n_max` plaquettes, sorted by
/// `(size, plaquettes)`.
///
/// Every such contour has an Euler circuit that starts by traversing `p`
/// away from its base vertex, so a depth-first search over edge-simple
/// closed trails finds each one; trails sharing an edge set are merged.
pub fn enumerate_through(p: Plaquette, n_max: usize) -> Vec<Contour> {
    if n_max < 4 {
        return Vec::new();
    }
    let start = p.base();
    let mut trail = vec![p];
    let mut found: HashSet<Vec<Plaquette>> = HashSet::new();
    trail_search(start, p.other_end(start), n_max, &mut trail, &mut found);
    let mut out: Vec<Contour> = found.into_iter().map(Contour::from_sorted_unchecked).collect();
    out.sort_unstable_by(|a, b| a.size().cmp(&b.size()).then_with(|| a.cmp(b)));
    out
}

fn trail_search(
    start: Vertex,
    at: Vertex,
    n_max: usize,
    trail: &mut Vec<Plaquette>,
    found: &mut HashSet<Vec<Plaquette>>,
) {
    if at == start {
        let mut key = trail.clone();
        key.sort_unstable();
        found.insert(key);
    }
    let remaining = n_max - trail.len();
    for e in incident_edges(at) {
        if trail.contains(&e) {
            continue;
        }
        let next = e.other_end(at);
        let back = (next.0.abs_diff(start.0) + next.1.abs_diff(start.1)) as usize;
        if back + 1 > remaining {
            continue;
        }
        trail.push(e);
        trail_search(start, next, n_max, trail, found);
        trail.pop();
    }
}

/// Number of contours through a fixed plaquette, indexed by size (`counts[n]`).
pub fn size_counts(n_max: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_max + 1];
    for c in enumerate_through(Plaquette::new(0, 0, Axis::X), n_max) {
        counts[c.size()] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(x: i32, y: i32, a: u8) -> Plaquette {
        Plaquette::new(x, y, Axis::from_index(a).unwrap())
    }

    #[test]
    fn adjacency_cases() {
        assert!(adjacent(e(0, 0, 0), e(1, 0, 0)));
        assert!(!adjacent(e(0, 0, 0), e(0, 0, 0)));
        assert!(!adjacent(e(0, 0, 0), e(2, 0, 0)));
        assert!(adjacent(e(0, 0, 0), e(1, 0, 1)));
        assert!(adjacent(e(0, 0, 1), e(-1, 1, 0)));
        assert!(!adjacent(e(0, 0, 1), e(1, 1, 1)));
    }

    #[test]
    fn neighbors_are_exactly_the_adjacent_edges() {
        for p in [e(0, 0, 0), e(3, -2, 1)] {
            let n = p.neighbors();
            let uniq: HashSet<_> = n.iter().collect();
            assert_eq!(uniq.len(), 6);
            for q in n {
                assert!(adjacent(p, q));
            }
            // every adjacent edge lies within distance 2 of the base vertex
            let mut count = 0;
            for x in -3..=3 {
                for y in -3..=3 {
                    for a in 0..2 {
                        let q = e(p.x + x, p.y + y, a);
                        if adjacent(p, q) {
                            count += 1;
                            assert!(n.contains(&q));
                        }
                    }
                }
            }
            assert_eq!(count, 6);
        }
    }

    #[test]
    fn canonical_encoding() {
        assert_eq!(Plaquette::between((1, 0), (0, 0)), Some(e(0, 0, 0)));
        assert_eq!(Plaquette::between((0, 1), (0, 0)), Some(e(0, 0, 1)));
        assert_eq!(Plaquette::between((0, 0), (1, 1)), None);
    }

    #[test]
    fn incompatibility_cases() {
        let a = Contour::unit_square(0, 0);
        assert!(incompatible(&a, &a));
        assert!(!incompatible(&a, &Contour::unit_square(5, 5)));
        // the two squares sharing edge ((0,0),X)
        let below = Contour::unit_square(0, -1);
        assert!(incompatible(&a, &below));
        // corner contact is an adjacency too
        assert!(incompatible(&a, &Contour::unit_square(1, 1)));
        // one empty column in between
        assert!(!incompatible(&a, &Contour::unit_square(2, 0)));
    }

    #[test]
    fn contour_predicate() {
        let sq = Contour::unit_square(0, 0);
        assert!(is_contour(sq.plaquettes()));
        assert!(!is_contour(&sq.plaquettes()[..3]));
        let mut two: Vec<_> = sq.plaquettes().to_vec();
        two.extend(Contour::unit_square(3, 0).plaquettes());
        assert!(!is_contour(&two));
        assert!(!is_contour(&[]));
        // two squares touching at a corner form a single contour
        let mut eight: Vec<_> = sq.plaquettes().to_vec();
        eight.extend(Contour::unit_square(1, 1).plaquettes());
        assert!(is_contour(&eight));
        assert_eq!(
            Contour::new(sq.plaquettes()[..3].to_vec()),
            Err(GeometryError::NotClosed((1, 0)))
        );
    }

    #[test]
    fn enumeration_small_cutoffs() {
        let p = e(0, 0, 0);
        assert!(enumerate_through(p, 3).is_empty());
        let four = enumerate_through(p, 4);
        assert_eq!(four, vec![Contour::unit_square(0, -1), Contour::unit_square(0, 0)]);
        // a 1x2 rectangle contains the edge in 6 placements
        assert_eq!(enumerate_through(p, 6).len(), 2 + 6);
        assert_eq!(enumerate_through(p, 7).len(), 8);
    }

    #[test]
    fn enumeration_sorted_and_valid() {
        let list = enumerate_through(e(2, -1, 1), 10);
        assert!(list.windows(2).all(|w| (w[0].size(), &w[0]) < (w[1].size(), &w[1])));
        for c in &list {
            assert!(c.contains(e(2, -1, 1)));
            assert!(is_contour(c.plaquettes()));
            assert_eq!(c.size() % 2, 0);
        }
    }

    #[test]
    fn translation_roundtrip() {
        let sq = Contour::unit_square(0, 0);
        assert_eq!(sq.translate(Shift::ZERO), sq);
        let s = Shift::new(3, 1);
        assert_eq!(translate(&translate(&sq, s), s.inverse()), sq);
        let (n, back) = Contour::rectangle(4, 7, 2, 1).normalized();
        assert_eq!(n.min_plaquette(), e(0, 0, 0));
        assert_eq!(n.translate(back), Contour::rectangle(4, 7, 2, 1));
    }

    #[test]
    fn json_format() {
        let sq = Contour::unit_square(0, 0);
        let s = serde_json::to_string(&sq).unwrap();
        assert_eq!(s, "[[0,0,0],[0,0,1],[0,1,0],[1,0,1]]");
        let back: Contour = serde_json::from_str(&s).unwrap();
        assert_eq!(back, sq);
        assert!(serde_json::from_str::<Contour>("[[0,0,0],[0,0,1]]").is_err());
        assert!(serde_json::from_str::<Contour>("[[0,0,2]]").is_err());
    }
}
