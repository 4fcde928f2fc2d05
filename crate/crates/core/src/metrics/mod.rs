//! Plausibility, faithfulness, prediction and analysis metrics.

mod analysis;
mod faithfulness;
mod plausibility;
mod prediction;

pub use analysis::{
    analysis_suite, normalized_entropy, pearson, special_top_k_fraction, zero_special, AnalysisReport, AnalyzedPair,
};
pub use faithfulness::{
    comprehensiveness, importance_order, sufficiency, FaithfulnessConfig, FaithfulnessReport, FaithfulnessRow,
    MIN_OUTPUT,
};
pub use plausibility::{
    auprc, classification_metrics, normalize, plausibility, ranking_metrics, top_k, tune_threshold, Averaging,
    ClassificationMetrics, ExplainedPair, Normalization, PairRow, PlausibilityConfig, PlausibilityReport,
    RankingMetrics,
};
pub use prediction::{average_precision, micro_f1, prediction_metrics, tune_code_threshold, PredictionReport};
