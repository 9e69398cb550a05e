//! `generate` and `eval` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use imagetalk_core::domain::{load_session_file, read_image_in, save_session_file};
use imagetalk_core::metrics::{benchmark_report, load_embeddings, render_summary_table};
use imagetalk_core::{GenerateMode, GenerationParams, MetricsReport, Session};

use crate::backends::BackendArgs;

/// Generates one story for the session file and writes the session back.
/// Returns the story text.
pub async fn generate(path: &Path, mode: GenerateMode, backends: &BackendArgs) -> anyhow::Result<String> {
    let mut session = load_session_file(path).with_context(|| format!("loading session {}", path.display()))?;
    let engine = backends.build_engine()?;
    if mode == GenerateMode::Auto {
        if session.images.is_empty() {
            bail!("auto mode needs at least one image in the session");
        }
        if session.corpus.live_captions().next().is_none() && session.corpus.live_objects().next().is_none() {
            let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
            engine
                .recognize(&mut session, |img| read_image_in(&dir, img))
                .await?;
        }
    }
    let text = engine
        .generate(&mut session, mode, &GenerationParams::default())
        .await?
        .text
        .clone();
    save_session_file(path, &session).with_context(|| format!("writing session {}", path.display()))?;
    Ok(text)
}

/// Session documents (`*.json`) in `dir`, sorted by file name.
pub fn load_dataset(dir: &Path) -> anyhow::Result<Vec<Session>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading dataset directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("dataset {} contains no session files", dir.display());
    }
    paths
        .iter()
        .map(|p| load_session_file(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

pub fn evaluate(dataset: &Path, embeddings: &Path) -> anyhow::Result<MetricsReport> {
    let sessions = load_dataset(dataset)?;
    let table = load_embeddings(embeddings)?;
    for token in table.duplicate_tokens() {
        tracing::warn!(%token, "duplicate embedding token, last entry kept");
    }
    Ok(benchmark_report(&sessions, Some(&table))?)
}

pub fn write_csv(report: &MetricsReport, path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in &report.per_item {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the evaluation, writes the JSON report (and optional CSV) and
/// returns the summary table.
pub fn eval(dataset: &Path, embeddings: &Path, out: &Path, csv: Option<&Path>) -> anyhow::Result<String> {
    let report = evaluate(dataset, embeddings)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
    if let Some(csv) = csv {
        write_csv(&report, csv)?;
    }
    let mut table = render_summary_table(&report);
    for w in &report.warnings {
        table.push_str(&format!("warning: {w}\n"));
    }
    Ok(table)
}
