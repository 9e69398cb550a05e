//! Human steering: direct edits of inputs and extracted context,
//! regeneration from the edited state, and single-segment amendment.
//!
//! Every change goes through the session's edit log. Corpus deletions are
//! soft, so the log can be replayed from an empty session to reproduce the
//! current captions, objects, keywords and style.

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::domain::{
    Caption, ContextCorpus, DetectedObject, EditAction, EditRecord, EditTarget, EditValue, KeywordList,
    LanguageStyle, Origin, Segment, Session, StoryMode, StoryVersion,
};
use crate::error::{Error, Result};
use crate::generation::{generate_story, LlmBackend};
use crate::prompthub::{assemble_prompt, GenerationParams, PromptBundle, PromptMode, Templates};
use crate::recognition::{flag_decisive_risks, RecognitionBackendConfig};

/// A user's requested change, before it is numbered and logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub target: EditTarget,
    pub action: EditAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<EditValue>,
}

impl Edit {
    pub fn add(target: EditTarget, value: EditValue) -> Self {
        Edit {
            target,
            action: EditAction::Add,
            index: None,
            value: Some(value),
        }
    }

    pub fn remove(target: EditTarget, index: usize) -> Self {
        Edit {
            target,
            action: EditAction::Remove,
            index: Some(index),
            value: None,
        }
    }

    pub fn modify(target: EditTarget, index: Option<usize>, value: EditValue) -> Self {
        Edit {
            target,
            action: EditAction::Modify,
            index,
            value: Some(value),
        }
    }
}

fn need_index(edit: &Edit, len: usize, what: &str) -> Result<usize> {
    match edit.index {
        Some(i) if i < len => Ok(i),
        Some(i) => Err(Error::UnknownTarget(format!("{what} {i}"))),
        None => Err(Error::invalid("index", format!("required to {:?} a {what}", edit.action))),
    }
}

fn need_value(edit: &Edit) -> Result<&EditValue> {
    edit.value
        .as_ref()
        .ok_or_else(|| Error::invalid("value", format!("required for {:?}", edit.action)))
}

fn need_image(session: &Session, image_id: &str) -> Result<()> {
    match session.image(image_id) {
        Some(_) => Ok(()),
        None => Err(Error::invalid("image_id", format!("unknown image {image_id}"))),
    }
}

fn check_unique_object(objects: &[DetectedObject], skip: Option<usize>, candidate: &DetectedObject) -> Result<()> {
    if candidate.deleted {
        return Ok(());
    }
    let clash = objects.iter().enumerate().any(|(i, o)| {
        Some(i) != skip && !o.deleted && o.image_id == candidate.image_id && o.label == candidate.label
    });
    if clash {
        return Err(Error::invalid(
            "object.label",
            format!("{} already present on {}", candidate.label, candidate.image_id),
        ));
    }
    Ok(())
}

/// Applies `edit` to the session and logs it. Nothing changes on error.
pub fn apply_edit<'s>(session: &'s mut Session, edit: &Edit) -> Result<&'s EditRecord> {
    match edit.target {
        EditTarget::Caption => edit_caption(session, edit),
        EditTarget::Object => edit_object(session, edit),
        EditTarget::Keyword => edit_keyword(session, edit),
        EditTarget::Style => edit_style(session, edit),
        EditTarget::Segment => Err(Error::invalid("target", "segments are changed with amend_segment")),
    }
}

fn edit_caption<'s>(session: &'s mut Session, edit: &Edit) -> Result<&'s EditRecord> {
    let len = session.corpus.captions.len();
    let (index, before, after) = match edit.action {
        EditAction::Add => {
            let mut c = match need_value(edit)? {
                EditValue::Caption(c) => c.clone(),
                other => return Err(Error::invalid("value", format!("expected a caption, got {other:?}"))),
            };
            c.origin = Origin::UserEdited;
            c.deleted = false;
            (len, None, c)
        }
        EditAction::Remove => {
            let i = need_index(edit, len, "caption")?;
            let old = session.corpus.captions[i].clone();
            if old.deleted {
                return Err(Error::UnknownTarget(format!("caption {i} is already deleted")));
            }
            let mut c = old.clone();
            c.deleted = true;
            c.origin = Origin::UserEdited;
            (i, Some(old), c)
        }
        EditAction::Modify => {
            let i = need_index(edit, len, "caption")?;
            let old = session.corpus.captions[i].clone();
            let mut c = match need_value(edit)? {
                EditValue::Caption(c) => c.clone(),
                EditValue::Text(t) => Caption {
                    text: t.clone(),
                    ..old.clone()
                },
                other => return Err(Error::invalid("value", format!("expected a caption, got {other:?}"))),
            };
            c.origin = Origin::UserEdited;
            (i, Some(old), c)
        }
    };
    need_image(session, &after.image_id)?;
    after.validate()?;
    if index == len {
        session.corpus.captions.push(after.clone());
    } else {
        session.corpus.captions[index] = after.clone();
    }
    Ok(session.push_edit(
        EditTarget::Caption,
        edit.action,
        Some(index),
        None,
        before.map(EditValue::Caption),
        Some(EditValue::Caption(after)),
    ))
}

fn edit_object<'s>(session: &'s mut Session, edit: &Edit) -> Result<&'s EditRecord> {
    let len = session.corpus.objects.len();
    let (index, before, after) = match edit.action {
        EditAction::Add => {
            let mut o = match need_value(edit)? {
                EditValue::Object(o) => o.clone(),
                other => return Err(Error::invalid("value", format!("expected an object, got {other:?}"))),
            };
            o.origin = Origin::UserEdited;
            o.deleted = false;
            (len, None, o)
        }
        EditAction::Remove => {
            let i = need_index(edit, len, "object")?;
            let old = session.corpus.objects[i].clone();
            if old.deleted {
                return Err(Error::UnknownTarget(format!("object {i} is already deleted")));
            }
            let mut o = old.clone();
            o.deleted = true;
            o.origin = Origin::UserEdited;
            (i, Some(old), o)
        }
        EditAction::Modify => {
            let i = need_index(edit, len, "object")?;
            let old = session.corpus.objects[i].clone();
            let mut o = match need_value(edit)? {
                EditValue::Object(o) => o.clone(),
                EditValue::Text(label) => DetectedObject {
                    label: label.clone(),
                    ..old.clone()
                },
                other => return Err(Error::invalid("value", format!("expected an object, got {other:?}"))),
            };
            o.origin = Origin::UserEdited;
            (i, Some(old), o)
        }
    };
    need_image(session, &after.image_id)?;
    after.validate()?;
    check_unique_object(&session.corpus.objects, Some(index), &after)?;
    if index == len {
        session.corpus.objects.push(after.clone());
    } else {
        session.corpus.objects[index] = after.clone();
    }
    Ok(session.push_edit(
        EditTarget::Object,
        edit.action,
        Some(index),
        None,
        before.map(EditValue::Object),
        Some(EditValue::Object(after)),
    ))
}

fn keyword_text(edit: &Edit) -> Result<String> {
    match need_value(edit)? {
        EditValue::Text(t) => Ok(t.clone()),
        other => Err(Error::invalid("value", format!("expected keyword text, got {other:?}"))),
    }
}

fn edit_keyword<'s>(session: &'s mut Session, edit: &Edit) -> Result<&'s EditRecord> {
    let len = session.keywords.len();
    let (index, before, after) = match edit.action {
        EditAction::Add => {
            let text = keyword_text(edit)?;
            let i = edit.index.unwrap_or(len);
            if i > len {
                return Err(Error::UnknownTarget(format!("keyword position {i}")));
            }
            session.keywords.insert(i, text.clone())?;
            (i, None, Some(text))
        }
        EditAction::Remove => {
            let i = need_index(edit, len, "keyword")?;
            (i, Some(session.keywords.remove(i)), None)
        }
        EditAction::Modify => {
            let i = need_index(edit, len, "keyword")?;
            let text = keyword_text(edit)?;
            let old = session.keywords.replace(i, text.clone())?;
            (i, Some(old), Some(text))
        }
    };
    Ok(session.push_edit(
        EditTarget::Keyword,
        edit.action,
        Some(index),
        None,
        before.map(EditValue::Text),
        after.map(EditValue::Text),
    ))
}

fn edit_style<'s>(session: &'s mut Session, edit: &Edit) -> Result<&'s EditRecord> {
    if edit.action != EditAction::Modify {
        return Err(Error::invalid("action", "style can only be modified"));
    }
    let style = match need_value(edit)? {
        EditValue::Style(s) => s.clone(),
        other => return Err(Error::invalid("value", format!("expected a style, got {other:?}"))),
    };
    style.validate()?;
    let before = std::mem::replace(&mut session.style, style.clone());
    Ok(session.push_edit(
        EditTarget::Style,
        EditAction::Modify,
        None,
        None,
        Some(EditValue::Style(before)),
        Some(EditValue::Style(style)),
    ))
}

/// Replaces the keyword list, logging one removal per old keyword and one
/// addition per new keyword. Returns the number of records appended.
pub fn set_keywords(session: &mut Session, keywords: &KeywordList) -> Result<usize> {
    if &session.keywords == keywords {
        return Ok(0);
    }
    let mut count = 0;
    for i in (0..session.keywords.len()).rev() {
        apply_edit(session, &Edit::remove(EditTarget::Keyword, i))?;
        count += 1;
    }
    for kw in keywords {
        apply_edit(session, &Edit::add(EditTarget::Keyword, EditValue::Text(kw.clone())))?;
        count += 1;
    }
    Ok(count)
}

pub fn set_style(session: &mut Session, style: &LanguageStyle) -> Result<bool> {
    if &session.style == style {
        return Ok(false);
    }
    apply_edit(session, &Edit::modify(EditTarget::Style, None, EditValue::Style(style.clone())))?;
    Ok(true)
}

/// Installs a freshly recognized corpus. Live items from an earlier
/// recognition are soft-deleted first; new items are logged as machine
/// additions. Flags are recomputed.
pub fn install_corpus(session: &mut Session, corpus: ContextCorpus, config: &RecognitionBackendConfig) -> Result<()> {
    for c in &corpus.captions {
        need_image(session, &c.image_id)?;
        c.validate()?;
    }
    for o in &corpus.objects {
        need_image(session, &o.image_id)?;
        o.validate()?;
    }
    for i in 0..session.corpus.captions.len() {
        if !session.corpus.captions[i].deleted {
            let before = session.corpus.captions[i].clone();
            session.corpus.captions[i].deleted = true;
            let after = session.corpus.captions[i].clone();
            session.push_edit(
                EditTarget::Caption,
                EditAction::Remove,
                Some(i),
                None,
                Some(EditValue::Caption(before)),
                Some(EditValue::Caption(after)),
            );
        }
    }
    for i in 0..session.corpus.objects.len() {
        if !session.corpus.objects[i].deleted {
            let before = session.corpus.objects[i].clone();
            session.corpus.objects[i].deleted = true;
            let after = session.corpus.objects[i].clone();
            session.push_edit(
                EditTarget::Object,
                EditAction::Remove,
                Some(i),
                None,
                Some(EditValue::Object(before)),
                Some(EditValue::Object(after)),
            );
        }
    }
    for c in corpus.captions {
        let i = session.corpus.captions.len();
        session.corpus.captions.push(c.clone());
        session.push_edit(EditTarget::Caption, EditAction::Add, Some(i), None, None, Some(EditValue::Caption(c)));
    }
    for o in corpus.objects {
        let i = session.corpus.objects.len();
        session.corpus.objects.push(o.clone());
        session.push_edit(EditTarget::Object, EditAction::Add, Some(i), None, None, Some(EditValue::Object(o)));
    }
    refresh_flags(session, config);
    Ok(())
}

/// Recomputes the advisory flags for the current corpus and keywords.
pub fn refresh_flags(session: &mut Session, config: &RecognitionBackendConfig) {
    session.corpus.flags = flag_decisive_risks(&session.corpus, &session.keywords, config);
}

/// Prompt for the session's current state in image mode.
pub fn current_prompt(session: &Session, templates: &Templates, params: &GenerationParams) -> Result<PromptBundle> {
    if session.images.is_empty() {
        return Err(Error::Precondition("image mode requires at least one image".into()));
    }
    assemble_prompt(
        templates,
        Some(&session.corpus),
        &session.keywords,
        &session.style,
        PromptMode::Imagetalk,
        params,
    )
}

/// Generates a new steered version from the current, post-edit state.
/// The previous story is never part of the prompt.
pub async fn regenerate<'s>(
    session: &'s mut Session,
    backend: &dyn LlmBackend,
    templates: &Templates,
    params: &GenerationParams,
) -> Result<&'s StoryVersion> {
    let prompt = current_prompt(session, templates, params)?;
    let parent = session.latest_story().map(|s| s.version);
    generate_story(backend, &prompt, session, StoryMode::ImagetalkSteered, parent).await
}

/// Replaces one segment of `version` and stores the result as a new
/// version. No generation happens; all other segments are copied verbatim.
pub fn amend_segment<'s>(session: &'s mut Session, version: u64, index: usize, new_text: &str) -> Result<&'s StoryVersion> {
    let parent = session.story(version).ok_or(Error::VersionNotFound(version))?;
    if index >= parent.segments.len() {
        return Err(Error::BadIndex {
            index,
            len: parent.segments.len(),
        });
    }
    let old_text = parent.segments[index].text.clone();
    let segments: Vec<Segment> = parent
        .segments
        .iter()
        .map(|s| {
            if s.index == index {
                Segment {
                    text: new_text.to_string(),
                    ..s.clone()
                }
            } else {
                s.clone()
            }
        })
        .collect();
    let text: String = segments
        .iter()
        .flat_map(|s| [s.text.as_str(), s.trailing_separator.as_str()])
        .collect();
    if text.trim().is_empty() {
        return Err(Error::invalid("text", "amendment would leave the story empty"));
    }
    let story = StoryVersion {
        version: session.next_version(),
        text,
        segments,
        mode: StoryMode::ImagetalkSteered,
        prompt_hash: parent.prompt_hash.clone(),
        parent_version: Some(version),
        created_at: Utc::now(),
    };
    session.append_story_version(story)?;
    session.push_edit(
        EditTarget::Segment,
        EditAction::Modify,
        Some(index),
        Some(version),
        Some(EditValue::Text(old_text)),
        Some(EditValue::Text(new_text.to_string())),
    );
    Ok(session.latest_story().expect("just appended"))
}

/// Steerable state rebuilt from the edit log alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayedState {
    pub captions: Vec<Caption>,
    pub objects: Vec<DetectedObject>,
    pub keywords: KeywordList,
    pub style: LanguageStyle,
}

impl ReplayedState {
    pub fn of(session: &Session) -> Self {
        ReplayedState {
            captions: session.corpus.captions.clone(),
            objects: session.corpus.objects.clone(),
            keywords: session.keywords.clone(),
            style: session.style.clone(),
        }
    }
}

fn bad_record(r: &EditRecord, why: &str) -> Error {
    Error::Schema(format!("edit {}: {why}", r.seq))
}

fn place<T>(items: &mut Vec<T>, r: &EditRecord, value: T) -> Result<()> {
    let i = r.index.ok_or_else(|| bad_record(r, "missing index"))?;
    match (r.action, i.cmp(&items.len())) {
        (EditAction::Add, std::cmp::Ordering::Equal) => items.push(value),
        (_, std::cmp::Ordering::Less) => items[i] = value,
        _ => return Err(bad_record(r, "index out of range")),
    }
    Ok(())
}

/// Replays `edits` over an empty session.
pub fn replay_edits(edits: &[EditRecord]) -> Result<ReplayedState> {
    let mut state = ReplayedState::default();
    for r in edits {
        match (r.target, &r.after) {
            (EditTarget::Caption, Some(EditValue::Caption(c))) => place(&mut state.captions, r, c.clone())?,
            (EditTarget::Object, Some(EditValue::Object(o))) => place(&mut state.objects, r, o.clone())?,
            (EditTarget::Keyword, after) => {
                let i = r.index.ok_or_else(|| bad_record(r, "missing index"))?;
                match (r.action, after) {
                    (EditAction::Add, Some(EditValue::Text(t))) if i <= state.keywords.len() => {
                        state.keywords.insert(i, t.clone())?
                    }
                    (EditAction::Remove, _) if i < state.keywords.len() => {
                        state.keywords.remove(i);
                    }
                    (EditAction::Modify, Some(EditValue::Text(t))) if i < state.keywords.len() => {
                        state.keywords.replace(i, t.clone())?;
                    }
                    _ => return Err(bad_record(r, "keyword record does not apply")),
                }
            }
            (EditTarget::Style, Some(EditValue::Style(s))) => state.style = s.clone(),
            (EditTarget::Segment, _) => {}
            _ => return Err(bad_record(r, "after-value does not match target")),
        }
    }
    Ok(state)
}
