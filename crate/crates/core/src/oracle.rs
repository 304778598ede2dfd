//! Exact finite-volume measure by exhaustive enumeration of compatible
//! contour families.

use std::collections::HashMap;

use serde::Serialize;

use crate::catalog::{BoxRegion, ContourSystem, ShapeCatalog};

/// Search nodes allowed before enumeration gives up.
pub const NODE_LIMIT: u64 = 1 << 25;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("enumeration exceeded {0} search nodes")]
    TooLarge(u64),
}

/// All pairwise-compatible subsets of the system, each as sorted ids.
pub fn enumerate_x(system: &ContourSystem) -> Result<Vec<Vec<u32>>, OracleError> {
    let k = system.len();
    let words = k.div_ceil(64).max(1);
    let masks: Vec<Vec<u64>> = system
        .conflicts
        .iter()
        .map(|c| {
            let mut m = vec![0u64; words];
            for &j in c {
                m[j as usize / 64] |= 1 << (j % 64);
            }
            m
        })
        .collect();
    let mut out = Vec::new();
    let mut current = Vec::new();
    let mut nodes = 0u64;
    // one blocked-set buffer per depth
    let mut stack = vec![vec![0u64; words]];
    // count first so an oversized volume fails without storing anything
    search(0, &mut stack, &masks, &mut current, None, &mut nodes)?;
    nodes = 0;
    search(0, &mut stack, &masks, &mut current, Some(&mut out), &mut nodes)?;
    Ok(out)
}

fn search(
    from: usize,
    stack: &mut Vec<Vec<u64>>,
    masks: &[Vec<u64>],
    current: &mut Vec<u32>,
    mut out: Option<&mut Vec<Vec<u32>>>,
    nodes: &mut u64,
) -> Result<(), OracleError> {
    *nodes += 1;
    if *nodes > NODE_LIMIT {
        return Err(OracleError::TooLarge(NODE_LIMIT));
    }
    if let Some(o) = out.as_deref_mut() {
        o.push(current.clone());
    }
    let depth = current.len();
    if stack.len() <= depth + 1 {
        stack.push(vec![0u64; stack[0].len()]);
    }
    for j in from..masks.len() {
        if stack[depth][j / 64] >> (j % 64) & 1 == 1 {
            continue;
        }
        let (lo, hi) = stack.split_at_mut(depth + 1);
        for ((n, a), b) in hi[0].iter_mut().zip(&lo[depth]).zip(&masks[j]) {
            *n = a | b;
        }
        current.push(j as u32);
        search(j + 1, stack, masks, current, out.as_deref_mut(), nodes)?;
        current.pop();
    }
    Ok(())
}

/// μ^Λ(η) ∝ exp(−β Σ_{γ∈η} |γ|) over the compatible families of Λ.
#[derive(Debug, Clone, Serialize)]
pub struct ExactMeasure {
    pub region: BoxRegion,
    pub beta: f64,
    pub n_max: usize,
    #[serde(skip)]
    pub system: ContourSystem,
    pub configurations: Vec<Vec<u32>>,
    pub probabilities: Vec<f64>,
    pub partition_function: f64,
    #[serde(skip)]
    lookup: HashMap<Vec<u32>, usize>,
}

pub fn measure(region: BoxRegion, beta: f64, n_max: usize) -> Result<ExactMeasure, OracleError> {
    measure_system(ContourSystem::new(&ShapeCatalog::build(n_max), region, beta))
}

pub fn measure_system(system: ContourSystem) -> Result<ExactMeasure, OracleError> {
    let configurations = enumerate_x(&system)?;
    let weights: Vec<f64> = configurations
        .iter()
        .map(|c| {
            let area: usize = c.iter().map(|&i| system.sizes[i as usize]).sum();
            (-system.beta * area as f64).exp()
        })
        .collect();
    let z: f64 = weights.iter().sum();
    let lookup = configurations.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
    Ok(ExactMeasure {
        region: system.region,
        beta: system.beta,
        n_max: system.n_max,
        probabilities: weights.iter().map(|w| w / z).collect(),
        partition_function: z,
        configurations,
        system,
        lookup,
    })
}

impl ExactMeasure {
    pub fn len(&self) -> usize {
        self.configurations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configurations.is_empty()
    }

    /// Probability of a configuration given as sorted ids (0 if not allowed).
    pub fn probability(&self, ids: &[u32]) -> f64 {
        self.lookup.get(ids).map_or(0.0, |&i| self.probabilities[i])
    }

    pub fn index_of(&self, ids: &[u32]) -> Option<usize> {
        self.lookup.get(ids).copied()
    }

    pub fn expectation(&self, f: impl Fn(&[u32]) -> f64) -> f64 {
        self.configurations.iter().zip(&self.probabilities).map(|(c, p)| p * f(c)).sum()
    }

    pub fn marginal(&self, contour: u32) -> f64 {
        self.expectation(|c| c.binary_search(&contour).is_ok() as u64 as f64)
    }

    /// Largest |μ(η)·e^{−β|γ|} − μ(η∪{γ})| over admissible additions.
    pub fn detailed_balance_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (c, &p) in self.configurations.iter().zip(&self.probabilities) {
            for g in 0..self.system.len() as u32 {
                if c.iter().any(|&h| self.system.conflict(g, h)) {
                    continue;
                }
                let mut up = c.clone();
                let pos = up.partition_point(|&h| h < g);
                up.insert(pos, g);
                let q = self.probability(&up);
                worst = worst.max((p * self.system.weights[g as usize] - q).abs());
            }
        }
        worst
    }

    /// Total variation distance to an empirical histogram of configurations.
    pub fn tv_distance(&self, counts: &HashMap<Vec<u32>, u64>) -> f64 {
        let n: u64 = counts.values().sum();
        let mut tv = 0.0;
        for (c, &p) in self.configurations.iter().zip(&self.probabilities) {
            let q = *counts.get(c).unwrap_or(&0) as f64 / n as f64;
            tv += (p - q).abs();
        }
        let outside: u64 = counts.iter().filter(|(c, _)| !self.lookup.contains_key(*c)).map(|e| e.1).sum();
        0.5 * (tv + outside as f64 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Contour;

    #[test]
    fn one_square() {
        let m = measure(BoxRegion::square(1), 2.0, 8).unwrap();
        assert_eq!(m.configurations, vec![vec![], vec![0]]);
        assert!((m.partition_function - (1.0 + (-8.0f64).exp())).abs() < 1e-15);
        let e = m.expectation(|c| c.is_empty() as u8 as f64);
        assert!((e - 1.0 / (1.0 + (-8.0f64).exp())).abs() < 1e-15);
        assert!((m.expectation(|_| 1.0) - 1.0).abs() < 1e-15);
        let cold = measure(BoxRegion::square(1), 200.0, 8).unwrap();
        assert!((cold.probability(&[]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_incompatible_squares() {
        // 2x1 cells: two squares sharing an edge plus the domino around both
        let m = measure(BoxRegion::new(0, 0, 2, 1), 1.5, 8).unwrap();
        assert_eq!(m.system.len(), 3);
        assert_eq!(m.len(), 4);
        let sq = |x| m.system.id_of(&Contour::unit_square(x, 0)).unwrap();
        assert_eq!(m.probability(&[sq(0).min(sq(1)), sq(0).max(sq(1))]), 0.0);
        // only squares, by restricting to size 4
        let m4 = measure(BoxRegion::new(0, 0, 2, 1), 1.5, 4).unwrap();
        assert_eq!(m4.len(), 3);
        let z = 1.0 + 2.0 * (-6.0f64).exp();
        assert!((m4.partition_function - z).abs() < 1e-14);
    }

    #[test]
    fn far_apart_squares_factorize() {
        let a = Contour::unit_square(0, 0);
        let b = Contour::unit_square(5, 0);
        let m = measure_system(ContourSystem::from_contours(vec![a.clone(), b.clone()], 1.0)).unwrap();
        assert_eq!(m.len(), 4);
        let (ia, ib) = (m.system.id_of(&a).unwrap(), m.system.id_of(&b).unwrap());
        let both = m.expectation(|c| (c.contains(&ia) && c.contains(&ib)) as u8 as f64);
        assert!(both > 0.0);
        assert!((both - m.marginal(ia) * m.marginal(ib)).abs() < 1e-15);
        // a middle square couples them
        let mid = Contour::unit_square(1, 0);
        let m3 = measure_system(ContourSystem::from_contours(vec![a.clone(), mid, Contour::unit_square(2, 0)], 1.0))
            .unwrap();
        assert_eq!(m3.len(), 5);
    }

    #[test]
    fn detailed_balance_holds() {
        let m = measure(BoxRegion::square(3), 1.0, 8).unwrap();
        assert!(m.detailed_balance_residual() < 1e-15);
        let s: f64 = m.probabilities.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn guard_trips() {
        let sys = ContourSystem::new(&ShapeCatalog::build(8), BoxRegion::square(9), 0.5);
        assert_eq!(enumerate_x(&sys).unwrap_err(), OracleError::TooLarge(NODE_LIMIT));
    }
}
