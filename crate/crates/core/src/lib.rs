//! Case-based extractive question answering.
//!
//! A question is answered by retrieving stored cases whose masked questions
//! are most similar, then choosing the span of the target passage whose
//! contextualized embedding best matches the retrieved gold answers.

pub mod casebase;
pub mod corpus;
pub mod diversity;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod reuse;
pub mod spanner;
pub mod synthetic;
pub mod textproc;
pub mod trainer;

pub use casebase::{CaseEntry, Casebase, RetrievalConfig, RetrievedCase};
pub use corpus::{AnswerSpan, Case, Dataset, Passage, Question, Token};
pub use encoder::{Embedding, EncoderBackend, ImportedEmbeddings, ToyEncoderParams};
pub use error::{Error, Result};
pub use metrics::{evaluate, EvalOptions, EvalResult};
pub use reuse::{predict, Prediction, PredictionRecord, ReuseConfig, Similarity};
pub use spanner::{generate_candidates, CandidateSpan};
pub use textproc::{EntityRecognizer, Gazetteer, MaskedQuestion, RuleRecognizer, WhKeyword};
pub use trainer::{finite_difference_check, train, LossReport, TrainConfig, TrainOutcome};
