//! Prompt assembly.
//!
//! A [`PromptBundle`] is built from the keywords, the language style and,
//! in image mode, the live part of the context corpus. Wording comes from a
//! [`Templates`] file so prompt revisions are tracked by hash rather than
//! by code changes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{AcceptanceLevel, ContextCorpus, KeywordList, LanguageStyle, StyleId};
use crate::error::{Error, Result};

const DEFAULT_TEMPLATES: &str = include_str!("../templates/default.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Keywords only; image context never reaches the prompt.
    Kts,
    Imagetalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_length: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: 0.7,
            max_length: 300,
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::invalid("params.temperature", "must be a finite number >= 0"));
        }
        if self.max_length == 0 {
            return Err(Error::invalid("params.max_length", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StyleTemplates {
    pub plain: String,
    pub colloquial: String,
    pub vivid: String,
    pub formal: String,
    pub custom: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceTemplates {
    pub authentic: String,
    pub augmented: String,
    pub articulated: String,
    pub creative: String,
}

/// Named prompt blocks loaded from a TOML template file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Templates {
    pub template_version: u32,
    pub system_directive: String,
    pub context_header: String,
    pub captions_header: String,
    pub objects_header: String,
    pub context_caption: String,
    pub context_object: String,
    pub context_empty: String,
    pub keyword_header: String,
    pub keyword_item: String,
    pub style_header: String,
    pub style: StyleTemplates,
    pub acceptance: AcceptanceTemplates,
}

impl Default for Templates {
    fn default() -> Self {
        Templates::parse(DEFAULT_TEMPLATES).expect("embedded templates are valid")
    }
}

impl Templates {
    pub fn parse(text: &str) -> Result<Self> {
        let t: Templates = toml::from_str(text).map_err(|e| Error::Template(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Template(format!("{}: {e}", path.display())))?;
        Templates::parse(&text)
    }

    fn validate(&self) -> Result<()> {
        let required = [
            ("system_directive", &self.system_directive),
            ("keyword_header", &self.keyword_header),
            ("style_header", &self.style_header),
        ];
        for (name, block) in required {
            if block.trim().is_empty() {
                return Err(Error::Template(format!("block `{name}` is empty")));
            }
        }
        if !self.keyword_item.contains("{keyword}") {
            return Err(Error::Template("`keyword_item` must contain {keyword}".into()));
        }
        let levels: Vec<&str> = AcceptanceLevel::ALL.iter().map(|l| self.acceptance_for(*l)).collect();
        for (i, d) in levels.iter().enumerate() {
            if d.trim().is_empty() {
                return Err(Error::Template(format!(
                    "block `acceptance.{}` is empty",
                    AcceptanceLevel::ALL[i].as_str()
                )));
            }
            if levels[..i].contains(d) {
                return Err(Error::Template("acceptance directives must be distinct".into()));
            }
        }
        Ok(())
    }

    pub fn acceptance_for(&self, level: AcceptanceLevel) -> &str {
        match level {
            AcceptanceLevel::Authentic => &self.acceptance.authentic,
            AcceptanceLevel::Augmented => &self.acceptance.augmented,
            AcceptanceLevel::Articulated => &self.acceptance.articulated,
            AcceptanceLevel::Creative => &self.acceptance.creative,
        }
    }

    fn style_for(&self, style: &LanguageStyle) -> String {
        match style.style_id {
            StyleId::Plain => self.style.plain.clone(),
            StyleId::Colloquial => self.style.colloquial.clone(),
            StyleId::Vivid => self.style.vivid.clone(),
            StyleId::Formal => self.style.formal.clone(),
            StyleId::Custom => fill(
                &self.style.custom,
                &[("directive", style.custom_directive.as_deref().unwrap_or(""))],
            ),
        }
    }
}

/// Single-pass `{key}` substitution; substituted values are never rescanned.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let key = &after[..close];
            values
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| (*v, close))
        });
        match hit {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// The acceptance-level instruction from the built-in templates.
pub fn render_acceptance_directive(level: AcceptanceLevel) -> String {
    Templates::default().acceptance_for(level).to_string()
}

/// Structured copy of what went into the prompt. The mock LLM reads this
/// instead of parsing rendered text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInputs {
    pub keywords: Vec<String>,
    pub captions: Vec<String>,
    pub objects: Vec<String>,
    pub style: LanguageStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub mode: PromptMode,
    pub system_directive: String,
    pub context_block: String,
    pub keyword_block: String,
    pub style_block: String,
    pub params: GenerationParams,
    pub assembled_text: String,
    pub hash: String,
    pub inputs: PromptInputs,
}

/// Digest over the assembled prompt and its generation parameters.
pub fn prompt_hash(assembled_text: &str, params: &GenerationParams) -> String {
    let mut h = Sha256::new();
    h.update(assembled_text.as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_vec(params).expect("params serialize"));
    hex::encode(h.finalize())
}

pub fn assemble_prompt(
    templates: &Templates,
    corpus: Option<&ContextCorpus>,
    keywords: &KeywordList,
    style: &LanguageStyle,
    mode: PromptMode,
    params: &GenerationParams,
) -> Result<PromptBundle> {
    if keywords.is_empty() {
        return Err(Error::Precondition("at least one keyword is required".into()));
    }
    style.validate()?;
    params.validate()?;

    let (captions, objects): (Vec<String>, Vec<String>) = match (mode, corpus) {
        (PromptMode::Kts, _) => (Vec::new(), Vec::new()),
        (PromptMode::Imagetalk, None) => {
            return Err(Error::Precondition("image mode requires a context corpus".into()))
        }
        (PromptMode::Imagetalk, Some(c)) => (
            c.live_captions().map(|c| c.text.clone()).collect(),
            c.live_objects().map(|o| o.label.clone()).collect(),
        ),
    };

    let context_block = match mode {
        PromptMode::Kts => String::new(),
        PromptMode::Imagetalk => {
            let mut lines = vec![templates.context_header.clone()];
            if !captions.is_empty() {
                lines.push(templates.captions_header.clone());
                lines.extend(captions.iter().map(|c| fill(&templates.context_caption, &[("caption", c)])));
            }
            if !objects.is_empty() {
                lines.push(templates.objects_header.clone());
                lines.extend(objects.iter().map(|o| fill(&templates.context_object, &[("label", o)])));
            }
            if captions.is_empty() && objects.is_empty() {
                lines.push(templates.context_empty.clone());
            }
            lines.join("\n")
        }
    };

    let keyword_block = std::iter::once(templates.keyword_header.clone())
        .chain(keywords.iter().map(|k| fill(&templates.keyword_item, &[("keyword", k)])))
        .collect::<Vec<_>>()
        .join("\n");

    let style_block = fill(
        &templates.style_header,
        &[
            ("style", &templates.style_for(style)),
            ("acceptance", templates.acceptance_for(style.acceptance_level)),
        ],
    );

    let system_directive = templates.system_directive.clone();
    let assembled_text = [&system_directive, &context_block, &keyword_block, &style_block]
        .into_iter()
        .filter(|b| !b.is_empty())
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join("\n\n");
    let hash = prompt_hash(&assembled_text, params);

    Ok(PromptBundle {
        mode,
        system_directive,
        context_block,
        keyword_block,
        style_block,
        params: params.clone(),
        assembled_text,
        hash,
        inputs: PromptInputs {
            keywords: keywords.as_slice().to_vec(),
            captions,
            objects,
            style: style.clone(),
        },
    })
}
