//! Saliency-guided natural-language explanations for graph node classifiers.
//!
//! A [`tag::ExplanationInstance`] bundles a text-attributed graph, per-token
//! saliency and the classifier's prediction. The [`verbalizer`] turns it into
//! the saliency paragraph a language model reads, [`measures`] scores a
//! candidate explanation, [`iteration`] improves a generator by expert
//! iteration and [`evaluation`] reports corpus-level metrics.

pub mod backend;
pub mod evaluation;
pub mod finetune;
pub mod iteration;
pub mod measures;
pub mod prompts;
pub mod scalar;
pub mod selection;
pub mod synthetic;
pub mod tag;
pub mod verbalizer;

pub use evaluation::{EvalRecord, MetricReport};
pub use iteration::{ExplanationCandidate, IterationConfig, IterationState};
pub use measures::{Objective, ScoreTriple, ScoringContext, TauDistribution};
pub use scalar::Scalar;
pub use selection::SelectionStrategy;
pub use tag::{ExplanationInstance, NodeId};

pub type ScoreTripleF64 = ScoreTriple<f64>;
pub type ScoreTripleF32 = ScoreTriple<f32>;
pub type TauDistributionF64 = TauDistribution<f64>;
pub type TauDistributionF32 = TauDistribution<f32>;
pub type ScoringContextF64 = ScoringContext<f64>;
pub type CandidateF64 = ExplanationCandidate<f64>;
pub type IterationStateF64 = IterationState<f64>;
pub type MetricReportF64 = MetricReport<f64>;
