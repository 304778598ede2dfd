//! Exact sampling and verification for Gibbs measures on mutually excluding
//! lattice contours: forward loss-network dynamics, backward clan-of-ancestors
//! perfect sampling, branching bounds and an experiment harness.

pub mod bounds;
pub mod catalog;
pub mod clan;
pub mod experiments;
pub mod forward;
pub mod geometry;
pub mod oracle;
pub mod rng;
pub mod stats;

pub use bounds::{BranchingSpec, RateBundle};
pub use catalog::{BoxRegion, ContourSystem, Placement, ShapeCatalog, WeightedCatalog};
pub use clan::{Clan, ClanStats, FreeProcessCache};
pub use experiments::{Check, Experiment, ExperimentConfig, Report};
pub use forward::{Configuration, Coupling, MarkStream, Trajectory};
pub use geometry::{Axis, Contour, Plaquette, Shift};
pub use oracle::ExactMeasure;
