//! QA candidate generation and rule-based filtering.
//!
//! [`sample_pages`] picks pages across a report, [`generate_qa`] asks a model
//! for QA records over them, and [`filter_pipeline`] keeps only records that
//! need several pages, whose program reproduces the stated answer and whose
//! answer is numeric.

mod filter;
mod generate;
mod program;
mod sampling;

pub use filter::{filter_pipeline, FilterOutcome, FilterReason, FilterRun, FilterStats};
pub use generate::{
    generate_corpus, generate_qa, parse_generation_reply, render_generation_prompt, GenerationBatch, RawQA,
    GENERATION_PROMPT,
};
pub use program::{eval_program, parse_program, round_half_away, BinOp, Expr, Func, Program, ProgramError, Statement};
pub use sampling::{sample_pages, PageSamplingPlan};

/// Pages drawn per report for generation.
pub const DEFAULT_SAMPLE_PAGES: usize = 40;
/// Records requested per generation call.
pub const DEFAULT_MAX_PAIRS: usize = 10;
