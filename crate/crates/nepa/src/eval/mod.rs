//! Scoring system output against reviewer annotations, and the
//! rare-letters demonstration of prompt selection.

pub mod demo;
pub mod metrics;
pub mod plot;
pub mod report;
pub mod sentences;
pub mod smooth;

pub use demo::{run_demo, DemoConfig, DemoTrace};
pub use metrics::{BinCounts, QuoteCounts};
pub use report::{
    evaluate, load_ground_truth, parse_ground_truth, EvalReport, GroundTruthComment, SystemConcernRecord,
    SystemLetter, SystemOutput,
};
pub use sentences::{split_sentences, SentenceSpan};
