//! Public-comment analysis for environmental reviews.
//!
//! Letters are summarized, mined for concerns backed by verbatim quotes,
//! binned against reviewer guidance and summarized per bin. Each stage is
//! an auditable subroutine with a self-critique loop, so every line of a
//! bin summary traces back to the letters and calls it came from.

pub mod corpus;
pub mod eval;
pub mod fixtures;
pub mod pipeline;
pub mod quote;
pub mod report;
pub mod scripted;
pub mod stages;

pub use corpus::{BinDef, Guidance, InputError, Letter};
pub use pipeline::{ExecOptions, Pipeline, PipelineError, RunConfig, RunInput};
pub use quote::{verify_quote, MatchConfig, QuoteSpan};
pub use report::BatchReport;
pub use stages::Stage;

pub type EvalReport = eval::EvalReport<f64>;
pub type EvalReportF32 = eval::EvalReport<f32>;
