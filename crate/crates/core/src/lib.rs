//! Debiasing click-through-rate models trained on data produced by their own
//! recommendations.
//!
//! A prediction network and an auxiliary bias network share a base
//! representation. The prediction head is trained on a blend of cross-entropy
//! and the squared covariance between the true bias feature and the bias
//! network's estimate of it; the bias network is trained separately on MSE.
//! Pushing that covariance to zero makes the base representation
//! uninformative about the feedback-loop bias.

pub mod annmodel;
pub mod error;
pub mod experiment;
pub mod feedbacksim;
pub mod losses;
pub mod metrics;
pub mod nncore;
pub mod seed;

pub use annmodel::{AnnParams, Architecture, TrainConfig, Variant};
pub use error::{Error, Result};
pub use feedbacksim::{run_feedback_loop, Dataset, FeedbackLoopOutput, FeedbackSimConfig};
