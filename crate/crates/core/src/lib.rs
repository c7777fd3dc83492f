//! Synthetic audit harness for monocular polyp-size classification.
//!
//! The crate generates cohorts whose camera distance is coupled to lesion size
//! through examination behavior, trains small single-modality probes on them,
//! and measures how much of the probes' performance survives controlled
//! interventions: oracle metric scale at frame, clip and population
//! granularity, simulated metric-depth estimation, mask substitution, and
//! photometric correction.
//!
//! Modules, bottom-up:
//!
//! * [`geometry`]: pinhole projection and oracle scale factors.
//! * [`synthgen`]: cohort sampling, frame rendering, mask degradation, dataset I/O.
//! * [`probes`]: feature extraction, MLP / CNN / threshold probes and their training.
//! * [`interventions`]: scale regimes, mask sources, photometric correction, ablation.
//! * [`evaluation`]: patient-level folds, metrics, shortcut partition, mutual information.
//! * [`audit`]: run configuration, the audit grid, and report files.

pub mod audit;
pub mod bbox;
pub mod evaluation;
pub mod geometry;
pub mod grid;
pub mod interventions;
pub mod probes;
pub mod rng;
pub mod stats;
pub mod synthgen;
