//! Reference-less machine-translation quality estimation (QE) harness.
//!
//! The crate covers the whole experimental loop for scoring translations with
//! instruction-following language models on a 0–100 direct-assessment (DA)
//! scale:
//!
//! * [`corpus`]: DA-annotated TSV corpora, splits and score-range bins.
//! * [`prompts`]: GEMBA / TE / AG prompt templates and in-context exemplar
//!   selection from score bins.
//! * [`gateway`]: chat-completions client with bounded concurrency, retries
//!   and a deterministic mock backend.
//! * [`extraction`]: pulling a DA score out of free-form model output, with
//!   exclusion accounting.
//! * [`metrics`]: Pearson, Spearman, Kendall tau-b and the paired t-test.
//! * [`fertility`]: subword-tokenizer fertility diagnostics.
//! * [`sft`]: instruction-tuning dataset export.
//! * [`pipeline`]: run manifests, the end-to-end runner and result tables.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iterators otherwise.

pub mod corpus;
pub mod extraction;
pub mod fertility;
pub mod gateway;
pub mod io;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod prompts;
pub mod sft;

pub use corpus::{ColumnMap, Corpus, LangPair, ScoreBin, Segment, Split};
pub use extraction::{extract_score, ExclusionLedger, ExclusionReason, ExtractionResult, Outcome};
pub use gateway::{InferenceConfig, ModelOutput, PromptRef, TransportStatus};
pub use metrics::{CorrelationReport, PairedSample, Significance};
pub use prompts::{PromptTemplate, RenderedPrompt, TemplateId, TemplateSet};
