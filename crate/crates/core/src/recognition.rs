//! Context extraction from images.
//!
//! Captioning and object detection are opaque backends behind
//! [`CaptionBackend`] and [`DetectionBackend`]. Their raw output is
//! distilled into a [`ContextCorpus`] by [`build_context_corpus`], and
//! [`flag_decisive_risks`] marks corpus items likely to derail the story.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::domain::{Caption, ContextCorpus, DetectedObject, ImageAsset, KeywordList};
use crate::error::{Error, Result};
use crate::http;
use crate::text::tokenize;

/// Words ignored when matching corpus items against keywords.
pub const STOP_WORDS: [&str; 6] = ["the", "a", "of", "in", "on", "and"];

/// Items below `confidence_floor + LOW_CONFIDENCE_MARGIN` are flagged.
pub const LOW_CONFIDENCE_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionBackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    pub timeout_ms: u64,
    pub max_objects: usize,
    pub confidence_floor: f64,
}

impl Default for RecognitionBackendConfig {
    fn default() -> Self {
        RecognitionBackendConfig {
            kind: BackendKind::Mock,
            endpoint_url: None,
            timeout_ms: 10_000,
            max_objects: 10,
            confidence_floor: 0.5,
        }
    }
}

impl RecognitionBackendConfig {
    pub fn remote(endpoint_url: impl Into<String>) -> Self {
        RecognitionBackendConfig {
            kind: BackendKind::Remote,
            endpoint_url: Some(endpoint_url.into()),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.endpoint_url) {
            (BackendKind::Remote, None) => {
                return Err(Error::Config("remote recognition backend needs endpoint_url".into()))
            }
            (BackendKind::Mock, Some(_)) => {
                return Err(Error::Config("mock recognition backend takes no endpoint_url".into()))
            }
            _ => {}
        }
        if self.timeout_ms == 0 {
            return Err(Error::Config("timeout_ms must be positive".into()));
        }
        if self.max_objects == 0 {
            return Err(Error::Config("max_objects must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_floor) {
            return Err(Error::Config("confidence_floor must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One detection as it travels over the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub label: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[async_trait]
pub trait CaptionBackend: Send + Sync {
    async fn caption(&self, image: &ImageAsset, payload: &[u8]) -> Result<String>;
}

#[async_trait]
pub trait DetectionBackend: Send + Sync {
    async fn detect(&self, image: &ImageAsset, payload: &[u8], max_objects: usize) -> Result<Vec<RawDetection>>;
}

pub async fn caption_image(backend: &dyn CaptionBackend, image: &ImageAsset, payload: &[u8]) -> Result<Caption> {
    let text = backend.caption(image, payload).await?;
    if text.trim().is_empty() {
        return Err(Error::MalformedResponse("empty caption".into()));
    }
    Ok(Caption::machine(image.id.clone(), text))
}

/// Runs detection and returns at most `max_objects` objects, highest confidence first.
pub async fn detect_objects(
    backend: &dyn DetectionBackend,
    image: &ImageAsset,
    payload: &[u8],
    config: &RecognitionBackendConfig,
) -> Result<Vec<DetectedObject>> {
    let raw = backend.detect(image, payload, config.max_objects).await?;
    let mut objects = raw
        .into_iter()
        .map(|d| {
            let obj = DetectedObject::machine(image.id.clone(), d.label, d.score, d.bbox);
            obj.validate()
                .map_err(|e| Error::MalformedResponse(e.to_string()))
                .map(|_| obj)
        })
        .collect::<Result<Vec<_>>>()?;
    objects.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.label.cmp(&b.label))
    });
    objects.truncate(config.max_objects);
    Ok(objects)
}

/// Builds the corpus for `images`.
///
/// Deleted items are dropped, objects under the confidence floor are
/// excluded and duplicate `(image_id, label)` pairs collapse onto the most
/// confident detection. Captions follow image order; objects are sorted by
/// descending confidence, then label, then image order.
pub fn build_context_corpus(
    images: &[ImageAsset],
    captions: Vec<Caption>,
    objects: Vec<DetectedObject>,
    config: &RecognitionBackendConfig,
) -> ContextCorpus {
    let image_rank: HashMap<&str, usize> = images.iter().enumerate().map(|(i, img)| (img.id.as_str(), i)).collect();
    let rank = |id: &str| image_rank.get(id).copied().unwrap_or(usize::MAX);

    let mut captions: Vec<Caption> = captions.into_iter().filter(|c| !c.deleted).collect();
    captions.sort_by_key(|c| rank(&c.image_id));

    let mut merged: Vec<DetectedObject> = Vec::new();
    for obj in objects {
        if obj.deleted || obj.confidence < config.confidence_floor {
            continue;
        }
        match merged
            .iter_mut()
            .find(|m| m.image_id == obj.image_id && m.label == obj.label)
        {
            Some(existing) if obj.confidence > existing.confidence => *existing = obj,
            Some(_) => {}
            None => merged.push(obj),
        }
    }
    merged.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.label.cmp(&b.label))
            .then_with(|| rank(&a.image_id).cmp(&rank(&b.image_id)))
    });

    ContextCorpus {
        captions,
        objects: merged,
        flags: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusItemKind {
    Caption,
    Object,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorpusItemRef {
    pub kind: CorpusItemKind,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskReason {
    LowConfidence,
    DuplicateLabel,
    UnreferencedByKeywords,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisiveRiskFlag {
    pub target: CorpusItemRef,
    pub reason: RiskReason,
    pub detail: String,
}

fn content_words(text: &str) -> BTreeSet<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !STOP_WORDS.contains(&t.as_str()))
        .collect()
}

/// Advisory flags for corpus items that may push the story off course.
/// The corpus itself is never touched.
pub fn flag_decisive_risks(
    corpus: &ContextCorpus,
    keywords: &KeywordList,
    config: &RecognitionBackendConfig,
) -> Vec<DecisiveRiskFlag> {
    let keyword_words: BTreeSet<String> = keywords.iter().flat_map(|k| content_words(k)).collect();
    let unreferenced = |text: &str| content_words(text).is_disjoint(&keyword_words);
    let mut flags = Vec::new();

    for (index, caption) in corpus.captions.iter().enumerate() {
        if caption.deleted {
            continue;
        }
        if unreferenced(&caption.text) {
            flags.push(DecisiveRiskFlag {
                target: CorpusItemRef {
                    kind: CorpusItemKind::Caption,
                    index,
                },
                reason: RiskReason::UnreferencedByKeywords,
                detail: format!("caption \"{}\" shares no word with the keywords", caption.text),
            });
        }
    }

    let threshold = config.confidence_floor + LOW_CONFIDENCE_MARGIN;
    for (index, obj) in corpus.objects.iter().enumerate() {
        if obj.deleted {
            continue;
        }
        let target = CorpusItemRef {
            kind: CorpusItemKind::Object,
            index,
        };
        if obj.confidence < threshold {
            flags.push(DecisiveRiskFlag {
                target,
                reason: RiskReason::LowConfidence,
                detail: format!("\"{}\" detected with confidence {:.2} (< {:.2})", obj.label, obj.confidence, threshold),
            });
        }
        if unreferenced(&obj.label) {
            flags.push(DecisiveRiskFlag {
                target,
                reason: RiskReason::UnreferencedByKeywords,
                detail: format!("object \"{}\" shares no word with the keywords", obj.label),
            });
        }
        let shared_with = corpus
            .live_objects()
            .filter(|o| o.label == obj.label && o.image_id != obj.image_id)
            .map(|o| o.image_id.as_str())
            .collect::<BTreeSet<_>>();
        if !shared_with.is_empty() {
            flags.push(DecisiveRiskFlag {
                target,
                reason: RiskReason::DuplicateLabel,
                detail: format!(
                    "\"{}\" also detected in {}",
                    obj.label,
                    shared_with.into_iter().collect::<Vec<_>>().join(", ")
                ),
            });
        }
    }
    flags
}

/// Captions and detects every image in order and builds the corpus.
/// `load` supplies each image's payload.
pub async fn recognize_images<F>(
    images: &[ImageAsset],
    captioner: &dyn CaptionBackend,
    detector: &dyn DetectionBackend,
    config: &RecognitionBackendConfig,
    load: F,
) -> Result<ContextCorpus>
where
    F: Fn(&ImageAsset) -> Result<Vec<u8>>,
{
    let mut captions = Vec::with_capacity(images.len());
    let mut objects = Vec::new();
    for image in images {
        let payload = load(image)?;
        captions.push(caption_image(captioner, image, &payload).await?);
        objects.extend(detect_objects(detector, image, &payload, config).await?);
    }
    Ok(build_context_corpus(images, captions, objects, config))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default)]
    pub objects: Vec<RawDetection>,
}

/// Fixture-driven recognition keyed by content hash.
#[derive(Debug, Clone, Default)]
pub struct MockRecognition {
    fixtures: HashMap<String, FixtureEntry>,
}

impl MockRecognition {
    pub fn new(fixtures: HashMap<String, FixtureEntry>) -> Self {
        MockRecognition { fixtures }
    }

    /// Reads a JSON object mapping content hash to `{caption, objects}`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("recognition fixtures {}: {e}", path.display())))?;
        let fixtures = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("recognition fixtures {}: {e}", path.display())))?;
        Ok(MockRecognition { fixtures })
    }

    pub fn insert(&mut self, content_hash: impl Into<String>, entry: FixtureEntry) {
        self.fixtures.insert(content_hash.into(), entry);
    }

    pub fn synthetic_caption(content_hash: &str) -> String {
        let prefix: String = content_hash.chars().take(8).collect();
        format!("an image of {prefix}")
    }
}

#[async_trait]
impl CaptionBackend for MockRecognition {
    async fn caption(&self, image: &ImageAsset, _payload: &[u8]) -> Result<String> {
        Ok(self
            .fixtures
            .get(&image.content_hash)
            .and_then(|f| f.caption.clone())
            .unwrap_or_else(|| Self::synthetic_caption(&image.content_hash)))
    }
}

#[async_trait]
impl DetectionBackend for MockRecognition {
    async fn detect(&self, image: &ImageAsset, _payload: &[u8], _max_objects: usize) -> Result<Vec<RawDetection>> {
        Ok(self
            .fixtures
            .get(&image.content_hash)
            .map(|f| f.objects.clone())
            .unwrap_or_default())
    }
}

/// HTTP recognition service: `POST {endpoint}/caption` and `POST {endpoint}/detect`.
#[derive(Debug, Clone)]
pub struct RemoteRecognition {
    client: reqwest::Client,
    endpoint: String,
    timeout_ms: u64,
}

#[derive(Serialize)]
struct CaptionRequest<'a> {
    image: String,
    format: &'a str,
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: String,
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    image: String,
    format: &'a str,
    max_objects: usize,
}

#[derive(Deserialize)]
struct DetectResponse {
    objects: Vec<RawDetection>,
}

impl RemoteRecognition {
    pub fn new(config: &RecognitionBackendConfig) -> Result<Self> {
        config.validate()?;
        let endpoint = config
            .endpoint_url
            .clone()
            .ok_or_else(|| Error::Config("remote recognition backend needs endpoint_url".into()))?;
        Ok(RemoteRecognition {
            client: http::client(),
            endpoint,
            timeout_ms: config.timeout_ms,
        })
    }
}

#[async_trait]
impl CaptionBackend for RemoteRecognition {
    async fn caption(&self, image: &ImageAsset, payload: &[u8]) -> Result<String> {
        let body = CaptionRequest {
            image: base64::engine::general_purpose::STANDARD.encode(payload),
            format: image.format(),
        };
        let url = http::join_url(&self.endpoint, "caption");
        let resp: CaptionResponse = http::post_json(&self.client, &url, &body, self.timeout_ms, None).await?;
        Ok(resp.caption)
    }
}

#[async_trait]
impl DetectionBackend for RemoteRecognition {
    async fn detect(&self, image: &ImageAsset, payload: &[u8], max_objects: usize) -> Result<Vec<RawDetection>> {
        let body = DetectRequest {
            image: base64::engine::general_purpose::STANDARD.encode(payload),
            format: image.format(),
            max_objects,
        };
        let url = http::join_url(&self.endpoint, "detect");
        let resp: DetectResponse = http::post_json(&self.client, &url, &body, self.timeout_ms, None).await?;
        Ok(resp.objects)
    }
}
