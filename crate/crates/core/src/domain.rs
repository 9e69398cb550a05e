//! Session data model and its on-disk store.
//!
//! A [`Session`] is one storytelling episode. Everything a user can steer
//! (captions, objects, keywords, style) lives in the session together with
//! the immutable story versions generated from it and an append-only log of
//! edits. Sessions persist as one JSON document each; image payloads sit
//! beside the documents, addressed by content hash.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::recognition::DecisiveRiskFlag;

pub const SCHEMA_VERSION: u32 = 1;

/// Hex-encoded SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAsset {
    pub id: String,
    pub source_name: String,
    /// File name of the stored payload, `<content_hash>.<ext>`.
    pub bytes_ref: String,
    pub content_hash: String,
}

impl ImageAsset {
    pub fn new(id: impl Into<String>, source_name: impl Into<String>, ext: &str, payload: &[u8]) -> Self {
        let hash = content_hash(payload);
        ImageAsset {
            id: id.into(),
            source_name: source_name.into(),
            bytes_ref: format!("{hash}.{ext}"),
            content_hash: hash,
        }
    }

    /// Extension part of `bytes_ref`, used as the wire `format`.
    pub fn format(&self) -> &str {
        self.bytes_ref
            .rsplit_once('.')
            .map(|(_, ext)| ext)
            .unwrap_or("bin")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Machine,
    UserEdited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub image_id: String,
    pub text: String,
    pub origin: Origin,
    pub deleted: bool,
}

impl Caption {
    pub fn machine(image_id: impl Into<String>, text: impl Into<String>) -> Self {
        Caption {
            image_id: image_id.into(),
            text: text.into(),
            origin: Origin::Machine,
            deleted: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.deleted && self.text.trim().is_empty() {
            return Err(Error::invalid("caption.text", "must be non-empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    pub image_id: String,
    pub label: String,
    pub confidence: f64,
    /// `[x, y, width, height]` in normalized image coordinates.
    pub bbox: [f64; 4],
    pub origin: Origin,
    pub deleted: bool,
}

impl DetectedObject {
    pub fn machine(image_id: impl Into<String>, label: impl Into<String>, confidence: f64, bbox: [f64; 4]) -> Self {
        DetectedObject {
            image_id: image_id.into(),
            label: label.into(),
            confidence,
            bbox,
            origin: Origin::Machine,
            deleted: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.label.trim().is_empty() {
            return Err(Error::invalid("object.label", "must be non-empty"));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::invalid(
                "object.confidence",
                format!("{} outside [0, 1]", self.confidence),
            ));
        }
        if self.bbox.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("object.bbox", "coordinates must lie in [0, 1]"));
        }
        if self.bbox[2] <= 0.0 || self.bbox[3] <= 0.0 {
            return Err(Error::invalid("object.bbox", "width and height must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextCorpus {
    pub captions: Vec<Caption>,
    pub objects: Vec<DetectedObject>,
    #[serde(default)]
    pub flags: Vec<DecisiveRiskFlag>,
}

impl ContextCorpus {
    pub fn is_empty(&self) -> bool {
        self.captions.is_empty() && self.objects.is_empty()
    }

    pub fn live_captions(&self) -> impl Iterator<Item = &Caption> {
        self.captions.iter().filter(|c| !c.deleted)
    }

    pub fn live_objects(&self) -> impl Iterator<Item = &DetectedObject> {
        self.objects.iter().filter(|o| !o.deleted)
    }
}

/// Ordered keywords as the user entered them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct KeywordList(Vec<String>);

impl KeywordList {
    pub fn new<I, S>(keywords: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let keywords: Vec<String> = keywords.into_iter().map(Into::into).collect();
        for kw in &keywords {
            validate_keyword(kw)?;
        }
        Ok(KeywordList(keywords))
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.0.iter()
    }

    pub(crate) fn insert(&mut self, index: usize, keyword: String) -> Result<()> {
        validate_keyword(&keyword)?;
        self.0.insert(index, keyword);
        Ok(())
    }

    pub(crate) fn remove(&mut self, index: usize) -> String {
        self.0.remove(index)
    }

    pub(crate) fn replace(&mut self, index: usize, keyword: String) -> Result<String> {
        validate_keyword(&keyword)?;
        Ok(std::mem::replace(&mut self.0[index], keyword))
    }
}

fn validate_keyword(kw: &str) -> Result<()> {
    if kw.trim().is_empty() {
        return Err(Error::invalid("keyword", "must not be empty or whitespace-only"));
    }
    Ok(())
}

impl TryFrom<Vec<String>> for KeywordList {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        KeywordList::new(v)
    }
}

impl From<KeywordList> for Vec<String> {
    fn from(k: KeywordList) -> Self {
        k.0
    }
}

impl<'a> IntoIterator for &'a KeywordList {
    type Item = &'a String;
    type IntoIter = std::slice::Iter<'a, String>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleId {
    #[default]
    Plain,
    Colloquial,
    Vivid,
    Formal,
    Custom,
}

impl StyleId {
    pub const ALL: [StyleId; 5] = [
        StyleId::Plain,
        StyleId::Colloquial,
        StyleId::Vivid,
        StyleId::Formal,
        StyleId::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StyleId::Plain => "plain",
            StyleId::Colloquial => "colloquial",
            StyleId::Vivid => "vivid",
            StyleId::Formal => "formal",
            StyleId::Custom => "custom",
        }
    }
}

/// How much liberty the generator may take with the user's facts, lowest first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceLevel {
    #[default]
    Authentic,
    Augmented,
    Articulated,
    Creative,
}

impl AcceptanceLevel {
    pub const ALL: [AcceptanceLevel; 4] = [
        AcceptanceLevel::Authentic,
        AcceptanceLevel::Augmented,
        AcceptanceLevel::Articulated,
        AcceptanceLevel::Creative,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AcceptanceLevel::Authentic => "authentic",
            AcceptanceLevel::Augmented => "augmented",
            AcceptanceLevel::Articulated => "articulated",
            AcceptanceLevel::Creative => "creative",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageStyle {
    pub style_id: StyleId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom_directive: Option<String>,
    pub acceptance_level: AcceptanceLevel,
}

impl LanguageStyle {
    pub fn new(style_id: StyleId, acceptance_level: AcceptanceLevel) -> Self {
        LanguageStyle {
            style_id,
            custom_directive: None,
            acceptance_level,
        }
    }

    pub fn custom(directive: impl Into<String>, acceptance_level: AcceptanceLevel) -> Self {
        LanguageStyle {
            style_id: StyleId::Custom,
            custom_directive: Some(directive.into()),
            acceptance_level,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let has_directive = self
            .custom_directive
            .as_deref()
            .is_some_and(|d| !d.trim().is_empty());
        match (self.style_id, has_directive) {
            (StyleId::Custom, false) => Err(Error::invalid(
                "style.custom_directive",
                "required when style_id is custom",
            )),
            (StyleId::Custom, true) => Ok(()),
            (_, _) if self.custom_directive.is_some() => Err(Error::invalid(
                "style.custom_directive",
                "only allowed when style_id is custom",
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoryMode {
    Kts,
    ImagetalkAuto,
    ImagetalkSteered,
}

impl StoryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StoryMode::Kts => "kts",
            StoryMode::ImagetalkAuto => "imagetalk_auto",
            StoryMode::ImagetalkSteered => "imagetalk_steered",
        }
    }
}

impl std::fmt::Display for StoryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    pub text: String,
    pub trailing_separator: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryVersion {
    pub version: u64,
    pub text: String,
    pub segments: Vec<Segment>,
    pub mode: StoryMode,
    pub prompt_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_version: Option<u64>,
    pub created_at: DateTime<Utc>,
}

impl StoryVersion {
    /// Concatenation of every segment and its separator.
    pub fn joined_segments(&self) -> String {
        self.segments
            .iter()
            .flat_map(|s| [s.text.as_str(), s.trailing_separator.as_str()])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.joined_segments() != self.text {
            return Err(Error::invalid(
                "story.segments",
                format!("segments of version {} do not reconstruct its text", self.version),
            ));
        }
        if let Some(i) = self.segments.iter().enumerate().position(|(i, s)| s.index != i) {
            return Err(Error::invalid(
                "story.segments",
                format!("segment indices not contiguous at position {i}"),
            ));
        }
        if let Some(parent) = self.parent_version {
            if parent >= self.version {
                return Err(Error::invalid(
                    "story.parent_version",
                    format!("parent {parent} not below version {}", self.version),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditTarget {
    Caption,
    Object,
    Keyword,
    Style,
    Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditAction {
    Add,
    Remove,
    Modify,
}

/// Value carried in an edit record's `before`/`after` slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditValue {
    Text(String),
    Caption(Caption),
    Object(DetectedObject),
    Style(LanguageStyle),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub seq: u64,
    pub target: EditTarget,
    pub action: EditAction,
    /// Position of the caption, object, keyword or segment acted on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    /// Story version for segment edits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub before: Option<EditValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after: Option<EditValue>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub images: Vec<ImageAsset>,
    pub corpus: ContextCorpus,
    pub keywords: KeywordList,
    pub style: LanguageStyle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_story: Option<String>,
    pub stories: Vec<StoryVersion>,
    pub edits: Vec<EditRecord>,
}

impl Default for Session {
    fn default() -> Self {
        Session::new()
    }
}

impl Session {
    /// Empty session with a fresh random id.
    pub fn new() -> Self {
        Session::with_id(uuid::Uuid::new_v4().simple().to_string())
    }

    pub fn with_id(id: impl Into<String>) -> Self {
        Session {
            id: id.into(),
            images: Vec::new(),
            corpus: ContextCorpus::default(),
            keywords: KeywordList::default(),
            style: LanguageStyle::default(),
            reference_story: None,
            stories: Vec::new(),
            edits: Vec::new(),
        }
    }

    /// Registers an image payload and returns its asset. Ids are assigned
    /// sequentially (`img-1`, `img-2`, ...).
    pub fn add_image(&mut self, source_name: impl Into<String>, ext: &str, payload: &[u8]) -> ImageAsset {
        let asset = ImageAsset::new(format!("img-{}", self.images.len() + 1), source_name, ext, payload);
        self.images.push(asset.clone());
        asset
    }

    pub fn image(&self, id: &str) -> Option<&ImageAsset> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn latest_story(&self) -> Option<&StoryVersion> {
        self.stories.last()
    }

    pub fn latest_version(&self) -> u64 {
        self.stories.last().map_or(0, |s| s.version)
    }

    pub fn next_version(&self) -> u64 {
        self.latest_version() + 1
    }

    pub fn story(&self, version: u64) -> Option<&StoryVersion> {
        self.stories.iter().find(|s| s.version == version)
    }

    /// Most recent story generated in `mode`.
    pub fn latest_in_mode(&self, mode: StoryMode) -> Option<&StoryVersion> {
        self.stories.iter().rev().find(|s| s.mode == mode)
    }

    pub fn append_story_version(&mut self, story: StoryVersion) -> Result<()> {
        let expected = self.next_version();
        if story.version != expected {
            return Err(Error::VersionConflict {
                expected,
                got: story.version,
            });
        }
        story.validate()?;
        self.stories.push(story);
        Ok(())
    }

    pub fn next_seq(&self) -> u64 {
        self.edits.last().map_or(1, |e| e.seq + 1)
    }

    pub(crate) fn push_edit(
        &mut self,
        target: EditTarget,
        action: EditAction,
        index: Option<usize>,
        version: Option<u64>,
        before: Option<EditValue>,
        after: Option<EditValue>,
    ) -> &EditRecord {
        let record = EditRecord {
            seq: self.next_seq(),
            target,
            action,
            index,
            version,
            before,
            after,
            timestamp: Utc::now(),
        };
        self.edits.push(record);
        self.edits.last().expect("just pushed")
    }

    /// Checks every invariant of the session and the types it contains.
    pub fn validate(&self) -> Result<()> {
        validate_id(&self.id)?;
        for (i, image) in self.images.iter().enumerate() {
            if self.images[..i].iter().any(|o| o.id == image.id) {
                return Err(Error::Schema(format!("duplicate image id {}", image.id)));
            }
        }
        let known = |id: &str| self.images.iter().any(|i| i.id == id);
        for c in &self.corpus.captions {
            c.validate()?;
            if !known(&c.image_id) {
                return Err(Error::Schema(format!("caption references unknown image {}", c.image_id)));
            }
        }
        for o in &self.corpus.objects {
            o.validate()?;
            if !known(&o.image_id) {
                return Err(Error::Schema(format!("object references unknown image {}", o.image_id)));
            }
        }
        self.style.validate()?;
        let mut last = 0;
        for story in &self.stories {
            if story.version <= last {
                return Err(Error::Schema(format!(
                    "story versions not strictly increasing at {}",
                    story.version
                )));
            }
            story.validate()?;
            last = story.version;
        }
        for (i, e) in self.edits.iter().enumerate() {
            if e.seq != i as u64 + 1 {
                return Err(Error::Schema(format!("edit log seq gap at position {i}")));
            }
        }
        Ok(())
    }
}

fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(Error::invalid("id", format!("{id:?} is not a valid session id")))
    }
}

#[derive(Serialize)]
struct DocumentOut<'a> {
    schema_version: u32,
    #[serde(flatten)]
    session: &'a Session,
}

#[derive(Deserialize)]
struct DocumentIn {
    schema_version: u32,
    #[serde(flatten)]
    session: Session,
}

pub fn session_to_document(session: &Session) -> Result<String> {
    serde_json::to_string_pretty(&DocumentOut {
        schema_version: SCHEMA_VERSION,
        session,
    })
    .map_err(|e| Error::Schema(e.to_string()))
}

pub fn session_from_document(text: &str) -> Result<Session> {
    let doc: DocumentIn = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "unsupported schema_version {}",
            doc.schema_version
        )));
    }
    doc.session.validate()?;
    Ok(doc.session)
}

pub fn save_session_file(path: &Path, session: &Session) -> Result<()> {
    session.validate()?;
    let doc = session_to_document(session)?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, doc).and_then(|_| fs::rename(&tmp, path)).map_err(|source| Error::StoreUnavailable {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_session_file(path: &Path) -> Result<Session> {
    let text = fs::read_to_string(path).map_err(|source| match source.kind() {
        ErrorKind::NotFound => Error::SessionNotFound(path.display().to_string()),
        _ => Error::StoreUnavailable {
            path: path.to_path_buf(),
            source,
        },
    })?;
    session_from_document(&text)
}

/// Directory of `<session_id>.json` documents plus `<content_hash>.<ext>` payloads.
#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| Error::StoreUnavailable {
            path: root.clone(),
            source,
        })?;
        Ok(SessionStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn session_path(&self, id: &str) -> Result<PathBuf> {
        validate_id(id)?;
        Ok(self.root.join(format!("{id}.json")))
    }

    pub fn save(&self, session: &Session) -> Result<String> {
        save_session_file(&self.session_path(&session.id)?, session)?;
        Ok(session.id.clone())
    }

    pub fn load(&self, id: &str) -> Result<Session> {
        let path = self.session_path(id).map_err(|_| Error::SessionNotFound(id.to_string()))?;
        load_session_file(&path).map_err(|e| match e {
            Error::SessionNotFound(_) => Error::SessionNotFound(id.to_string()),
            other => other,
        })
    }

    /// Ids of every session document in the store, sorted.
    pub fn list(&self) -> Result<Vec<String>> {
        let entries = fs::read_dir(&self.root).map_err(|source| Error::StoreUnavailable {
            path: self.root.clone(),
            source,
        })?;
        let mut ids = Vec::new();
        for entry in entries {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn put_image(&self, asset: &ImageAsset, payload: &[u8]) -> Result<()> {
        if content_hash(payload) != asset.content_hash {
            return Err(Error::invalid("image", "payload does not match content_hash"));
        }
        let path = self.root.join(&asset.bytes_ref);
        fs::write(&path, payload).map_err(|source| Error::StoreUnavailable { path, source })
    }

    pub fn read_image(&self, asset: &ImageAsset) -> Result<Vec<u8>> {
        read_image_in(&self.root, asset)
    }
}

/// Reads the payload of `asset` from `dir`, checking it against the recorded hash.
pub fn read_image_in(dir: &Path, asset: &ImageAsset) -> Result<Vec<u8>> {
    if asset.bytes_ref.contains(['/', '\\']) {
        return Err(Error::UnreadableImage {
            id: asset.id.clone(),
            reason: "bytes_ref must be a bare file name".into(),
        });
    }
    let bytes = fs::read(dir.join(&asset.bytes_ref)).map_err(|e| Error::UnreadableImage {
        id: asset.id.clone(),
        reason: e.to_string(),
    })?;
    if content_hash(&bytes) != asset.content_hash {
        return Err(Error::UnreadableImage {
            id: asset.id.clone(),
            reason: "payload hash mismatch".into(),
        });
    }
    Ok(bytes)
}
