//! Deception under intermittent observation on tabular MDPs.
//!
//! A renewal-process supervisor takes bounded-gap snapshots of an agent. The
//! agent tracks how likely it is to be watched right now, turns that into a
//! per-step evidence signal ψ, and learns a KL-to-reference soft policy whose
//! temperature scales with the observation probability, under a dual
//! constraint on discounted exposure.

pub mod acting;
pub mod baselines;
pub mod config;
pub mod environments;
pub mod error;
pub mod harness;
pub mod evidence;
pub mod learner;
pub mod mdp;
pub mod monitoring;
pub mod occupancy;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
pub use evidence::{EvidenceRecord, ExposureLedger, StateRatioTable};
pub use learner::{CriticTable, DualState, LearnerConfig, TrainedAgent};
pub use mdp::{EpisodeTrace, OccupancyProfile, Step, TabularMdp};
pub use monitoring::{AgeBelief, AgeFilter, GapLaw, HazardModel, MonitorState, TokenChannel};
pub use policy::{AugmentedPolicy, Conditioning, TabularPolicy};
