//! Finite-volume loss-network dynamics driven by marked Poisson births.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use serde::{Deserialize, Serialize};

use crate::catalog::ContourSystem;
use crate::geometry::{incompatible, Contour};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ForwardError {
    #[error("initial configuration contains incompatible contours {0} and {1}")]
    IncompatibleInitial(u32, u32),
    #[error("contour {0} is not part of the system")]
    UnknownContour(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub basis: Contour,
    pub birth: f64,
    pub lifetime: f64,
}

impl Cylinder {
    pub fn death(&self) -> f64 {
        self.birth + self.lifetime
    }

    pub fn alive_at(&self, t: f64) -> bool {
        self.birth <= t && t < self.death()
    }
}

/// A set of pairwise compatible contours.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Configuration {
    contours: Vec<Contour>,
}

impl Configuration {
    pub fn empty() -> Configuration {
        Configuration::default()
    }

    /// Sorts and validates; fails on the first incompatible pair.
    pub fn new(mut contours: Vec<Contour>) -> Result<Configuration, (Contour, Contour)> {
        contours.sort();
        for i in 0..contours.len() {
            for j in i + 1..contours.len() {
                if incompatible(&contours[i], &contours[j]) {
                    return Err((contours[i].clone(), contours[j].clone()));
                }
            }
        }
        Ok(Configuration { contours })
    }

    pub fn from_ids(system: &ContourSystem, ids: &[u32]) -> Configuration {
        let mut contours: Vec<Contour> = ids.iter().map(|&i| system.contours[i as usize].clone()).collect();
        contours.sort();
        Configuration { contours }
    }

    pub fn contours(&self) -> &[Contour] {
        &self.contours
    }

    pub fn len(&self) -> usize {
        self.contours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contours.is_empty()
    }

    pub fn contains(&self, c: &Contour) -> bool {
        self.contours.binary_search(c).is_ok()
    }

    /// Sorted system ids, or `None` if some contour is outside the system.
    pub fn ids(&self, system: &ContourSystem) -> Option<Vec<u32>> {
        let mut v: Option<Vec<u32>> = self.contours.iter().map(|c| system.id_of(c)).collect();
        if let Some(v) = v.as_mut() {
            v.sort_unstable();
        }
        v
    }

    pub fn area(&self) -> usize {
        self.contours.iter().map(Contour::size).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mark {
    pub time: f64,
    pub contour: u32,
    pub lifetime: f64,
}

/// Birth marks on `[0, t_end]`, ordered by `(time, contour)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkStream {
    pub t_end: f64,
    pub marks: Vec<Mark>,
}

impl MarkStream {
    pub fn new(t_end: f64, mut marks: Vec<Mark>) -> MarkStream {
        marks.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.contour.cmp(&b.contour)));
        MarkStream { t_end, marks }
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }
}

/// Independent Poisson streams of rate e^{−β|γ|} for every contour of the
/// system, with Exp(1) lifetimes.
pub fn generate_marks<R: Rng + ?Sized>(system: &ContourSystem, t_end: f64, rng: &mut R) -> MarkStream {
    let mut marks = Vec::new();
    for (i, &w) in system.weights.iter().enumerate() {
        let mean = w * t_end;
        if mean <= 0.0 {
            continue;
        }
        let n = Poisson::new(mean).unwrap().sample(rng) as usize;
        for _ in 0..n {
            marks.push(Mark {
                time: rng.random::<f64>() * t_end,
                contour: i as u32,
                lifetime: Exp1.sample(rng),
            });
        }
    }
    MarkStream::new(t_end, marks)
}

/// Initial cylinders: every contour of `ids` present at time 0 with a fresh
/// Exp(1) lifetime.
pub fn initial_cylinders<R: Rng + ?Sized>(ids: &[u32], rng: &mut R) -> Vec<(u32, f64)> {
    ids.iter().map(|&i| (i, Exp1.sample(rng))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Kept,
    Erased,
    Death,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub contour: u32,
    pub kind: EventKind,
    /// Mark index for births and kept deaths; `None` for initial cylinders.
    pub mark: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub initial: Vec<u32>,
    pub t_end: f64,
    pub events: Vec<Event>,
}

impl Trajectory {
    /// Present contours at each of the (ascending) `times`.
    pub fn states_at(&self, times: &[f64]) -> Vec<Vec<u32>> {
        let mut state: BTreeSet<u32> = self.initial.iter().copied().collect();
        let mut out = Vec::with_capacity(times.len());
        let mut k = 0;
        for &t in times {
            while k < self.events.len() && self.events[k].time <= t {
                let e = &self.events[k];
                match e.kind {
                    EventKind::Kept => {
                        state.insert(e.contour);
                    }
                    EventKind::Death => {
                        state.remove(&e.contour);
                    }
                    EventKind::Erased => {}
                }
                k += 1;
            }
            out.push(state.iter().copied().collect());
        }
        out
    }

    pub fn final_state(&self) -> Vec<u32> {
        self.states_at(&[self.t_end]).pop().unwrap()
    }
}

#[derive(Clone, Copy)]
struct Pending {
    death: f64,
    contour: u32,
    mark: Option<usize>,
}

impl PartialEq for Pending {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Pending {
    fn cmp(&self, o: &Self) -> Ordering {
        o.death.total_cmp(&self.death).then(o.contour.cmp(&self.contour))
    }
}

fn check_initial(system: &ContourSystem, initial: &[(u32, f64)]) -> Result<(), ForwardError> {
    for (k, &(a, _)) in initial.iter().enumerate() {
        if a as usize >= system.len() {
            return Err(ForwardError::UnknownContour(a));
        }
        for &(b, _) in &initial[..k] {
            if system.conflict(a, b) {
                return Err(ForwardError::IncompatibleInitial(b.min(a), b.max(a)));
            }
        }
    }
    Ok(())
}

/// Processes the marks in order: a birth is kept iff no alive kept
/// cylinder is incompatible with it. Deaths at or before a mark's time are
/// applied first.
pub fn evolve(
    system: &ContourSystem,
    initial: &[(u32, f64)],
    marks: &MarkStream,
) -> Result<Trajectory, ForwardError> {
    check_initial(system, initial)?;
    let mut blocked = vec![0u32; system.len()];
    let mut heap = BinaryHeap::new();
    let mut events = Vec::new();
    let add = |c: u32, blocked: &mut Vec<u32>| {
        for &j in &system.conflicts[c as usize] {
            blocked[j as usize] += 1;
        }
    };
    let remove = |c: u32, blocked: &mut Vec<u32>| {
        for &j in &system.conflicts[c as usize] {
            blocked[j as usize] -= 1;
        }
    };
    for &(c, life) in initial {
        add(c, &mut blocked);
        heap.push(Pending {
            death: life,
            contour: c,
            mark: None,
        });
    }
    for (k, m) in marks.marks.iter().enumerate() {
        while heap.peek().is_some_and(|p| p.death <= m.time) {
            let p = heap.pop().unwrap();
            remove(p.contour, &mut blocked);
            events.push(Event {
                time: p.death,
                contour: p.contour,
                kind: EventKind::Death,
                mark: p.mark,
            });
        }
        let kind = if blocked[m.contour as usize] == 0 {
            add(m.contour, &mut blocked);
            heap.push(Pending {
                death: m.time + m.lifetime,
                contour: m.contour,
                mark: Some(k),
            });
            EventKind::Kept
        } else {
            EventKind::Erased
        };
        events.push(Event {
            time: m.time,
            contour: m.contour,
            kind,
            mark: Some(k),
        });
    }
    while let Some(p) = heap.pop() {
        if p.death > marks.t_end {
            break;
        }
        events.push(Event {
            time: p.death,
            contour: p.contour,
            kind: EventKind::Death,
            mark: p.mark,
        });
    }
    Ok(Trajectory {
        initial: initial.iter().map(|e| e.0).collect(),
        t_end: marks.t_end,
        events,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coupling {
    /// (time, number of contours present in exactly one run), starting at 0.
    pub discrepancy: Vec<(f64, usize)>,
    /// First time both runs hold the same cylinders; they agree from then on.
    pub coalescence: Option<f64>,
}

impl Coupling {
    pub fn discrepancy_at(&self, t: f64) -> usize {
        let i = self.discrepancy.partition_point(|e| e.0 <= t);
        self.discrepancy[i.max(1) - 1].1
    }
}

/// Runs two initial configurations against the same marks.
pub fn couple(
    system: &ContourSystem,
    first: &[(u32, f64)],
    second: &[(u32, f64)],
    marks: &MarkStream,
) -> Result<Coupling, ForwardError> {
    let runs = [evolve(system, first, marks)?, evolve(system, second, marks)?];
    // A cylinder is identified by its contour and death time in either run.
    let mut cyls: [BTreeSet<(u32, u64)>; 2] = [
        first.iter().map(|&(c, l)| (c, l.to_bits())).collect(),
        second.iter().map(|&(c, l)| (c, l.to_bits())).collect(),
    ];
    let mut present = [vec![false; system.len()], vec![false; system.len()]];
    for (r, init) in [first, second].iter().enumerate() {
        for &(c, _) in init.iter() {
            present[r][c as usize] = true;
        }
    }
    let mut diff = (0..system.len()).filter(|&i| present[0][i] != present[1][i]).count();
    let mut discrepancy = vec![(0.0, diff)];
    let mut coalescence = (cyls[0] == cyls[1]).then_some(0.0);
    let mut merged: Vec<(usize, &Event)> =
        runs.iter().enumerate().flat_map(|(r, t)| t.events.iter().map(move |e| (r, e))).collect();
    merged.sort_by(|x, y| {
        x.1.time
            .total_cmp(&y.1.time)
            .then((x.1.kind != EventKind::Death).cmp(&(y.1.kind != EventKind::Death)))
            .then(x.0.cmp(&y.0))
    });
    for (k, &(r, e)) in merged.iter().enumerate() {
        let c = e.contour as usize;
        let before = present[0][c] != present[1][c];
        match e.kind {
            EventKind::Kept => {
                let m = &marks.marks[e.mark.unwrap()];
                present[r][c] = true;
                cyls[r].insert((e.contour, (m.time + m.lifetime).to_bits()));
            }
            EventKind::Death => {
                present[r][c] = false;
                cyls[r].remove(&(e.contour, e.time.to_bits()));
            }
            EventKind::Erased => continue,
        }
        let after = present[0][c] != present[1][c];
        diff = diff + after as usize - before as usize;
        // both runs see the same mark at the same instant
        if merged.get(k + 1).is_some_and(|n| n.1.time == e.time) {
            continue;
        }
        discrepancy.push((e.time, diff));
        if coalescence.is_none() && cyls[0] == cyls[1] {
            coalescence = Some(e.time);
        }
    }
    Ok(Coupling {
        discrepancy,
        coalescence,
    })
}

/// Long-run samples: run from empty and read the state every `spacing`
/// time units after `burn_in`.
pub fn sample_epochs<R: Rng + ?Sized>(
    system: &ContourSystem,
    burn_in: f64,
    spacing: f64,
    epochs: usize,
    rng: &mut R,
) -> Vec<Vec<u32>> {
    let t_end = burn_in + spacing * epochs as f64;
    let marks = generate_marks(system, t_end, rng);
    let traj = evolve(system, &[], &marks).expect("empty start is compatible");
    let times: Vec<f64> = (1..=epochs).map(|k| burn_in + spacing * k as f64).collect();
    traj.states_at(&times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{BoxRegion, ShapeCatalog};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn system(side: i32, beta: f64) -> ContourSystem {
        ContourSystem::new(&ShapeCatalog::build(8), BoxRegion::square(side), beta)
    }

    fn mark(time: f64, contour: u32, lifetime: f64) -> Mark {
        Mark {
            time,
            contour,
            lifetime,
        }
    }

    #[test]
    fn single_mark_lives_its_lifetime() {
        let sys = system(1, 2.0);
        assert_eq!(sys.len(), 1);
        let marks = MarkStream::new(5.0, vec![mark(1.0, 0, 2.0)]);
        let tr = evolve(&sys, &[], &marks).unwrap();
        let st = tr.states_at(&[0.5, 1.0, 2.9, 3.0, 4.0]);
        assert_eq!(st, vec![vec![], vec![0], vec![0], vec![], vec![]]);
    }

    #[test]
    fn incompatible_second_birth_is_erased() {
        let sys = system(2, 2.0);
        let a = sys.id_of(&Contour::unit_square(0, 0)).unwrap();
        let b = sys.id_of(&Contour::unit_square(1, 0)).unwrap();
        assert!(sys.conflict(a, b));
        let marks = MarkStream::new(5.0, vec![mark(1.0, a, 2.0), mark(1.5, b, 2.0)]);
        let tr = evolve(&sys, &[], &marks).unwrap();
        assert_eq!(tr.events[1].kind, EventKind::Erased);
        // after the first dies the second mark is long gone
        assert_eq!(tr.states_at(&[2.0, 3.2]), vec![vec![a], vec![]]);
        // a death exactly at the next mark's time is processed first
        let marks = MarkStream::new(5.0, vec![mark(1.0, a, 1.0), mark(2.0, b, 1.0)]);
        let tr = evolve(&sys, &[], &marks).unwrap();
        assert_eq!(tr.events.iter().filter(|e| e.kind == EventKind::Kept).count(), 2);
        assert_eq!(
            evolve(&sys, &[(a, 1.0), (b, 1.0)], &marks),
            Err(ForwardError::IncompatibleInitial(a.min(b), a.max(b)))
        );
    }

    #[test]
    fn states_stay_compatible() {
        let sys = system(4, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let marks = generate_marks(&sys, 50.0, &mut rng);
        let tr = evolve(&sys, &[], &marks).unwrap();
        let times: Vec<f64> = (0..500).map(|k| k as f64 * 0.1).collect();
        for s in tr.states_at(&times) {
            for (i, &a) in s.iter().enumerate() {
                for &b in &s[i + 1..] {
                    assert!(!sys.conflict(a, b));
                }
            }
        }
        assert_eq!(evolve(&sys, &[], &marks).unwrap(), tr);
    }

    #[test]
    fn coupling_identical_starts() {
        let sys = system(4, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let marks = generate_marks(&sys, 20.0, &mut rng);
        let init = vec![(sys.id_of(&Contour::unit_square(0, 0)).unwrap(), 0.7)];
        let c = couple(&sys, &init, &init, &marks).unwrap();
        assert!(c.discrepancy.iter().all(|d| d.1 == 0));
        assert_eq!(c.coalescence, Some(0.0));
    }

    #[test]
    fn empty_system_has_no_marks() {
        let sys = ContourSystem::new(&ShapeCatalog::build(8), BoxRegion::new(0, 0, 0, 3), 1.0);
        assert!(sys.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_marks(&sys, 10.0, &mut rng).is_empty());
    }
}
