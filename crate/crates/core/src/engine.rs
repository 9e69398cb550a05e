use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{ImageAsset, Session, StoryMode, StoryVersion};
use crate::error::{Error, Result};
use crate::generation::{generate_story, LlmBackend, MockLlm};
use crate::prompthub::{assemble_prompt, GenerationParams, PromptMode, Templates};
use crate::recognition::{recognize_images, CaptionBackend, DetectionBackend, MockRecognition, RecognitionBackendConfig};
use crate::steering::{self, install_corpus};

/// One-shot generation modes. Steered versions come from
/// [`Engine::regenerate`] and [`steering::amend_segment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerateMode {
    Kts,
    Auto,
}

impl std::str::FromStr for GenerateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kts" => Ok(GenerateMode::Kts),
            "auto" | "imagetalk" => Ok(GenerateMode::Auto),
            other => Err(Error::invalid("mode", format!("{other:?} is not kts or auto"))),
        }
    }
}

/// Backends, templates and configuration shared by the service and CLI.
#[derive(Clone)]
pub struct Engine {
    pub captioner: Arc<dyn CaptionBackend>,
    pub detector: Arc<dyn DetectionBackend>,
    pub llm: Arc<dyn LlmBackend>,
    pub templates: Templates,
    pub recognition: RecognitionBackendConfig,
}

impl Engine {
    /// Mock recognition with the given fixtures and the mock LLM.
    pub fn mock(fixtures: MockRecognition) -> Self {
        let recognizer = Arc::new(fixtures);
        Engine {
            captioner: recognizer.clone(),
            detector: recognizer,
            llm: Arc::new(MockLlm),
            templates: Templates::default(),
            recognition: RecognitionBackendConfig::default(),
        }
    }

    /// Recognizes every image of the session and installs the new corpus.
    /// The session is unchanged if any backend call fails.
    pub async fn recognize<F>(&self, session: &mut Session, load: F) -> Result<()>
    where
        F: Fn(&ImageAsset) -> Result<Vec<u8>>,
    {
        if session.images.is_empty() {
            return Err(Error::Precondition("session has no images to recognize".into()));
        }
        let corpus = recognize_images(
            &session.images,
            self.captioner.as_ref(),
            self.detector.as_ref(),
            &self.recognition,
            load,
        )
        .await?;
        install_corpus(session, corpus, &self.recognition)
    }

    pub async fn generate<'s>(
        &self,
        session: &'s mut Session,
        mode: GenerateMode,
        params: &GenerationParams,
    ) -> Result<&'s StoryVersion> {
        let (prompt, story_mode) = match mode {
            GenerateMode::Kts => (
                assemble_prompt(
                    &self.templates,
                    None,
                    &session.keywords,
                    &session.style,
                    PromptMode::Kts,
                    params,
                )?,
                StoryMode::Kts,
            ),
            GenerateMode::Auto => (
                steering::current_prompt(session, &self.templates, params)?,
                StoryMode::ImagetalkAuto,
            ),
        };
        generate_story(self.llm.as_ref(), &prompt, session, story_mode, None).await
    }

    pub async fn regenerate<'s>(&self, session: &'s mut Session, params: &GenerationParams) -> Result<&'s StoryVersion> {
        steering::regenerate(session, self.llm.as_ref(), &self.templates, params).await
    }

    pub fn refresh_flags(&self, session: &mut Session) {
        steering::refresh_flags(session, &self.recognition);
    }
}
