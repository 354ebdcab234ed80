//! Retrieval metrics, attention-spread and caption-window relevance
//! analyses, and report files.

mod analysis;
mod report;
mod retrieval;

pub use analysis::{
    attention_spread, entropy, mass_beyond, relevance_distribution, window_offsets, AttentionSpread, RelevanceGrid,
    RELEVANCE_WINDOWS,
};
pub use report::{emit_report, Report, ReportFormat, ATTENTION_HEADER, RELEVANCE_HEADER, RETRIEVAL_HEADER};
pub use retrieval::{
    evaluate_retrieval, rank_of, recall_at_k, similarity_for_pairs, Direction, RecallAtK, RetrievalReport,
    SimilarityMatrix,
};
