//! Story generation from photographs and a handful of keywords, with a
//! human steering loop and evaluation metrics.
//!
//! The pipeline runs recognition ([`recognition`]) to build an editable
//! context corpus, assembles a prompt ([`prompthub`]), generates a story
//! ([`generation`]) and lets the user steer the result ([`steering`]).
//! [`metrics`] scores stories by keystroke savings and semantic similarity.

pub mod domain;
pub mod engine;
pub mod error;
pub mod generation;
mod http;
pub mod metrics;
pub mod prompthub;
pub mod recognition;
pub mod steering;
pub mod text;

pub use domain::{
    AcceptanceLevel, Caption, ContextCorpus, DetectedObject, EditAction, EditRecord, EditTarget, EditValue,
    ImageAsset, KeywordList, LanguageStyle, Origin, Segment, Session, SessionStore, StoryMode, StoryVersion,
    StyleId,
};
pub use engine::{Engine, GenerateMode};
pub use error::{Error, Result};
pub use generation::{LlmBackend, LlmBackendConfig, MockLlm, RemoteLlm};
pub use metrics::{EmbeddingTable, MetricsReport};
pub use prompthub::{GenerationParams, PromptBundle, PromptMode, Templates};
pub use recognition::{
    BackendKind, CaptionBackend, DecisiveRiskFlag, DetectionBackend, MockRecognition, RecognitionBackendConfig,
    RemoteRecognition,
};
pub use steering::Edit;
