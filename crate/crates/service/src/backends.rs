use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;
use imagetalk_core::recognition::{CaptionBackend, DetectionBackend};
use imagetalk_core::{
    Engine, LlmBackend, LlmBackendConfig, MockLlm, MockRecognition, RecognitionBackendConfig, RemoteLlm,
    RemoteRecognition, Templates,
};

/// Backend selection shared by `serve` and `generate`.
#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// Captioning service base URL, or `mock`.
    #[arg(long, default_value = "mock")]
    pub caption_backend: String,

    /// Object detection service base URL, or `mock`.
    #[arg(long, default_value = "mock")]
    pub detect_backend: String,

    /// Completion service base URL, or `mock`.
    #[arg(long, default_value = "mock")]
    pub llm_backend: String,

    /// Environment variable holding the completion service's bearer token.
    #[arg(long, default_value = "IMAGETALK_LLM_API_KEY")]
    pub llm_api_key_env: String,

    /// JSON fixtures (content hash -> caption/objects) for mock recognition.
    #[arg(long)]
    pub recognition_fixtures: Option<PathBuf>,

    /// Prompt template file overriding the built-in templates.
    #[arg(long)]
    pub templates: Option<PathBuf>,

    /// Per-request backend timeout in milliseconds.
    #[arg(long, default_value_t = 30_000)]
    pub timeout_ms: u64,

    /// Retries for the completion backend.
    #[arg(long, default_value_t = 2)]
    pub llm_retries: u32,

    /// Objects below this detection confidence are dropped.
    #[arg(long, default_value_t = 0.5)]
    pub confidence_floor: f64,

    #[arg(long, default_value_t = 10)]
    pub max_objects: usize,
}

impl Default for BackendArgs {
    fn default() -> Self {
        BackendArgs {
            caption_backend: "mock".into(),
            detect_backend: "mock".into(),
            llm_backend: "mock".into(),
            llm_api_key_env: "IMAGETALK_LLM_API_KEY".into(),
            recognition_fixtures: None,
            templates: None,
            timeout_ms: 30_000,
            llm_retries: 2,
            confidence_floor: 0.5,
            max_objects: 10,
        }
    }
}

fn is_mock(choice: &str) -> bool {
    choice.eq_ignore_ascii_case("mock")
}

impl BackendArgs {
    pub fn llm_config(&self) -> LlmBackendConfig {
        if is_mock(&self.llm_backend) {
            LlmBackendConfig {
                timeout_ms: self.timeout_ms,
                retries: self.llm_retries,
                ..Default::default()
            }
        } else {
            LlmBackendConfig {
                timeout_ms: self.timeout_ms,
                retries: self.llm_retries,
                ..LlmBackendConfig::remote(&self.llm_backend, &self.llm_api_key_env)
            }
        }
    }

    fn recognition_config(&self, choice: &str) -> RecognitionBackendConfig {
        let base = if is_mock(choice) {
            RecognitionBackendConfig::default()
        } else {
            RecognitionBackendConfig::remote(choice)
        };
        RecognitionBackendConfig {
            timeout_ms: self.timeout_ms,
            max_objects: self.max_objects,
            confidence_floor: self.confidence_floor,
            ..base
        }
    }

    pub fn build_engine(&self) -> imagetalk_core::Result<Engine> {
        let mock = Arc::new(match &self.recognition_fixtures {
            Some(path) => MockRecognition::from_file(path)?,
            None => MockRecognition::default(),
        });
        let caption_cfg = self.recognition_config(&self.caption_backend);
        let detect_cfg = self.recognition_config(&self.detect_backend);
        caption_cfg.validate()?;
        detect_cfg.validate()?;

        let captioner: Arc<dyn CaptionBackend> = if is_mock(&self.caption_backend) {
            mock.clone()
        } else {
            Arc::new(RemoteRecognition::new(&caption_cfg)?)
        };
        let detector: Arc<dyn DetectionBackend> = if is_mock(&self.detect_backend) {
            mock
        } else {
            Arc::new(RemoteRecognition::new(&detect_cfg)?)
        };
        let llm_cfg = self.llm_config();
        llm_cfg.validate()?;
        let llm: Arc<dyn LlmBackend> = if is_mock(&self.llm_backend) {
            Arc::new(MockLlm)
        } else {
            Arc::new(RemoteLlm::new(&llm_cfg)?)
        };
        let templates = match &self.templates {
            Some(path) => Templates::from_file(path)?,
            None => Templates::default(),
        };
        Ok(Engine {
            captioner,
            detector,
            llm,
            templates,
            recognition: detect_cfg,
        })
    }
}
