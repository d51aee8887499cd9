//! Evaluation: token error rate, speaker similarity, mode-shrinkage
//! statistics, distribution distances, speed and report generation.

mod metrics;
mod panel;
mod report;
mod requests;

pub use metrics::{
    coefficient_of_variation, edit_distance, log_energy, pitch_proxy, sim, wasserstein_1d, wer,
};
pub use panel::{
    build_panel, conditional_cv, repeat_requests, rtf_ratio, Aspect, Features, Group, Panel, PanelFeatures,
    PanelShape, RtfReport,
};
pub use report::{
    eval_requests, evaluate, pitch_histograms, quality_rows, speed_requests, write_evaluation, EvalConfig,
    EvalContext, Evaluation, MetricsReport, Reference, SampleRow,
};
pub use requests::continuation_request;
