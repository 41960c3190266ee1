//! Spectral M-estimation for discrete hidden Markov models.
//!
//! The crate estimates observable-operator parameters `(b1, {B_x}, b_inf)`
//! from triplets of consecutive observations. Two estimators are provided:
//!
//! * [`spectral::fit_hsu`], the classical truncated-SVD spectral estimator;
//! * [`mest::fit`], a generalized-method-of-moments M-estimator that factors
//!   each operator as `B_x = R_x S_x^T`, weights the moment conditions with an
//!   estimated block-diagonal precision matrix and optionally adds an L1
//!   penalty on `R`, solved by alternating minimization.
//!
//! [`hmm`] holds ground-truth models and exact oracles, [`moments`] the
//! empirical statistics and weighting, and [`inference`] probability queries
//! against fitted parameters.

pub mod error;
pub mod hmm;
pub mod inference;
pub mod linalg;
pub mod mest;
pub mod moments;
pub mod spectral;

pub use error::{Error, Result};
pub use hmm::{HmmModel, SymbolSequence, Triplet, TripletDataset, TripletMode};
pub use inference::{joint_prob, next_symbol_dist, similarity_transform, PredictState};
pub use mest::{FactorPair, FitConfig, FitTrace};
pub use moments::{MomentVector, ObservableStats, WeightMatrix};
pub use spectral::ParamTriplet;
