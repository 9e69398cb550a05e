//! Evaluation metrics: keystroke savings, keyword ratio, averaged-embedding
//! semantic similarity, and per-mode benchmark aggregates.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{KeywordList, Session, StoryMode};
use crate::error::{Error, Result};
use crate::text::{is_punctuation, tokenize};

/// Keystrokes needed to type `text` by hand: every character except
/// punctuation. Spaces and newlines count one each.
pub fn count_story_keystrokes(text: &str) -> usize {
    text.chars().filter(|c| !is_punctuation(*c)).count()
}

/// Characters typed for the keywords, plus one space after each keyword
/// (the last one included).
pub fn count_keyword_keystrokes(keywords: &KeywordList) -> usize {
    keywords.iter().map(|k| k.chars().count() + 1).sum()
}

/// `(N_story - N_keyword) / N_story * 100`.
pub fn keystroke_savings(story_text: &str, keywords: &KeywordList) -> Result<f64> {
    let story = count_story_keystrokes(story_text);
    if story == 0 {
        return Err(Error::UndefinedMetric("story has no keystrokes".into()));
    }
    let typed = count_keyword_keystrokes(keywords);
    Ok((story as f64 - typed as f64) / story as f64 * 100.0)
}

/// Keyword keystrokes as a percentage of the reference story's keystrokes.
pub fn keyword_ratio(keywords: &KeywordList, reference_story: &str) -> Result<f64> {
    let reference = count_story_keystrokes(reference_story);
    if reference == 0 {
        return Err(Error::UndefinedMetric("reference story is empty".into()));
    }
    Ok(count_keyword_keystrokes(keywords) as f64 / reference as f64 * 100.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CasePolicy {
    /// Query tokens are lowercased; table keys are used as written.
    #[default]
    LowercaseLookup,
}

/// Word vectors read from a word2vec text file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dimension: usize,
    entries: HashMap<String, Vec<f32>>,
    case_policy: CasePolicy,
    duplicate_tokens: Vec<String>,
}

impl EmbeddingTable {
    pub fn from_entries<I>(dimension: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f32>)>,
    {
        let mut table = EmbeddingTable {
            dimension,
            entries: HashMap::new(),
            case_policy: CasePolicy::LowercaseLookup,
            duplicate_tokens: Vec::new(),
        };
        for (token, v) in entries {
            if v.len() != dimension {
                return Err(Error::Embedding {
                    path: PathBuf::new(),
                    reason: format!("vector for {token:?} has {} components, expected {dimension}", v.len()),
                });
            }
            table.insert(token, v);
        }
        Ok(table)
    }

    fn insert(&mut self, token: String, v: Vec<f32>) {
        if self.entries.insert(token.clone(), v).is_some() {
            tracing::warn!(token = %token, "duplicate embedding token, keeping the last vector");
            self.duplicate_tokens.push(token);
        }
    }

    /// Parses word2vec text format: a `<vocab_size> <dimension>` header,
    /// then one line per token followed by `dimension` floats.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |reason: String| Error::Embedding {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err("file is empty".into()))?;
        let mut fields = header.split_whitespace();
        let (vocab, dimension) = match (fields.next(), fields.next(), fields.next()) {
            (Some(v), Some(d), None) => match (v.parse::<usize>(), d.parse::<usize>()) {
                (Ok(v), Ok(d)) if d > 0 => (v, d),
                _ => return Err(err(format!("bad header {header:?}"))),
            },
            _ => return Err(err(format!("bad header {header:?}"))),
        };

        let mut table = EmbeddingTable {
            dimension,
            entries: HashMap::with_capacity(vocab),
            case_policy: CasePolicy::LowercaseLookup,
            duplicate_tokens: Vec::new(),
        };
        let mut rows = 0usize;
        for (lineno, line) in lines {
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("line is not blank");
            let vector = parts
                .map(|p| {
                    p.parse::<f32>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| err(format!("line {}: non-numeric component {p:?}", lineno + 1)))
                })
                .collect::<Result<Vec<f32>>>()?;
            if vector.len() != dimension {
                return Err(err(format!(
                    "line {}: {} components, expected {dimension}",
                    lineno + 1,
                    vector.len()
                )));
            }
            table.insert(token.to_string(), vector);
            rows += 1;
        }
        if rows != vocab {
            return Err(err(format!("header declares {vocab} entries but body has {rows}")));
        }
        Ok(table)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn case_policy(&self) -> CasePolicy {
        self.case_policy
    }

    /// Tokens that appeared more than once in the source file.
    pub fn duplicate_tokens(&self) -> &[String] {
        &self.duplicate_tokens
    }

    pub fn get(&self, word: &str) -> Option<&[f32]> {
        match self.case_policy {
            CasePolicy::LowercaseLookup => self.entries.get(&word.to_lowercase()).map(Vec::as_slice),
        }
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Embedding {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    EmbeddingTable::parse(&text, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocVector {
    pub vector: Vec<f64>,
    pub in_vocabulary: usize,
    pub out_of_vocabulary: usize,
}

/// Mean of the in-vocabulary word vectors of `text`.
pub fn doc_vector(text: &str, table: &EmbeddingTable) -> Result<DocVector> {
    let mut sum = vec![0.0f64; table.dimension()];
    let mut hits = 0usize;
    let mut misses = 0usize;
    for token in tokenize(text) {
        match table.get(&token) {
            Some(v) => {
                for (acc, x) in sum.iter_mut().zip(v) {
                    *acc += f64::from(*x);
                }
                hits += 1;
            }
            None => misses += 1,
        }
    }
    if hits == 0 {
        return Err(Error::NoVector);
    }
    let n = hits as f64;
    sum.iter_mut().for_each(|x| *x /= n);
    Ok(DocVector {
        vector: sum,
        in_vocabulary: hits,
        out_of_vocabulary: misses,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedMetric("zero-norm document vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub cosine: f64,
    pub oov_a: usize,
    pub oov_b: usize,
}

pub fn similarity_with_diagnostics(text_a: &str, text_b: &str, table: &EmbeddingTable) -> Result<Similarity> {
    let a = doc_vector(text_a, table)?;
    let b = doc_vector(text_b, table)?;
    Ok(Similarity {
        cosine: cosine(&a.vector, &b.vector)?,
        oov_a: a.out_of_vocabulary,
        oov_b: b.out_of_vocabulary,
    })
}

/// Cosine between the averaged word vectors of the two texts.
pub fn semantic_similarity(text_a: &str, text_b: &str, table: &EmbeddingTable) -> Result<f64> {
    similarity_with_diagnostics(text_a, text_b, table).map(|s| s.cosine)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub session_id: String,
    pub mode: StoryMode,
    pub story_version: u64,
    pub keystroke_savings: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_similarity: Option<f64>,
    pub keyword_ratio: f64,
    /// Story tokens missing from the embedding table.
    #[serde(default)]
    pub oov_story: usize,
    #[serde(default)]
    pub oov_reference: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub standard_deviation: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean, sample standard deviation (zero for a single value) and box-plot
/// statistics. `None` for empty input.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(Summary {
        n,
        mean,
        standard_deviation: sd,
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[n - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAggregate {
    pub mode: StoryMode,
    pub keystroke_savings: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_similarity: Option<Summary>,
    pub keyword_ratio: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_item: Vec<ItemMetrics>,
    pub aggregate: Vec<ModeAggregate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn mode(&self, mode: StoryMode) -> Option<&ModeAggregate> {
        self.aggregate.iter().find(|a| a.mode == mode)
    }
}

/// Aggregates per-item rows by mode, in mode order.
pub fn aggregate_rows(rows: &[ItemMetrics]) -> (Vec<ModeAggregate>, Vec<String>) {
    let modes: BTreeSet<StoryMode> = rows.iter().map(|r| r.mode).collect();
    let mut warnings = Vec::new();
    let aggregate = modes
        .into_iter()
        .map(|mode| {
            let rows: Vec<&ItemMetrics> = rows.iter().filter(|r| r.mode == mode).collect();
            if rows.len() == 1 {
                warnings.push(format!(
                    "mode {mode}: single sample, standard deviation reported as 0"
                ));
            }
            let ks: Vec<f64> = rows.iter().map(|r| r.keystroke_savings).collect();
            let ratio: Vec<f64> = rows.iter().map(|r| r.keyword_ratio).collect();
            let sims: Option<Vec<f64>> = rows.iter().map(|r| r.semantic_similarity).collect();
            ModeAggregate {
                mode,
                keystroke_savings: summarize(&ks).expect("non-empty"),
                semantic_similarity: sims.as_deref().and_then(summarize),
                keyword_ratio: summarize(&ratio).expect("non-empty"),
            }
        })
        .collect();
    (aggregate, warnings)
}

/// Per-item metrics for every session and every mode present anywhere in
/// the dataset, using each session's latest story in that mode.
pub fn benchmark_report(sessions: &[Session], table: Option<&EmbeddingTable>) -> Result<MetricsReport> {
    if sessions.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    let modes: BTreeSet<StoryMode> = sessions.iter().flat_map(|s| s.stories.iter().map(|v| v.mode)).collect();
    if modes.is_empty() {
        return Err(Error::Dataset("no session has a generated story".into()));
    }
    let mut rows = Vec::with_capacity(sessions.len() * modes.len());
    for session in sessions {
        let reference = session
            .reference_story
            .as_deref()
            .filter(|r| !r.trim().is_empty())
            .ok_or_else(|| Error::Dataset(format!("session {} has no reference story", session.id)))?;
        let ratio = keyword_ratio(&session.keywords, reference)?;
        for &mode in &modes {
            let story = session.latest_in_mode(mode).ok_or_else(|| Error::MissingMode {
                session: session.id.clone(),
                mode: mode.to_string(),
            })?;
            let ks = keystroke_savings(&story.text, &session.keywords)?;
            let sim = table
                .map(|t| similarity_with_diagnostics(&story.text, reference, t))
                .transpose()
                .map_err(|e| Error::Dataset(format!("session {} mode {mode}: {e}", session.id)))?;
            rows.push(ItemMetrics {
                session_id: session.id.clone(),
                mode,
                story_version: story.version,
                keystroke_savings: ks,
                semantic_similarity: sim.map(|s| s.cosine),
                keyword_ratio: ratio,
                oov_story: sim.map_or(0, |s| s.oov_a),
                oov_reference: sim.map_or(0, |s| s.oov_b),
            });
        }
    }
    let (aggregate, warnings) = aggregate_rows(&rows);
    Ok(MetricsReport {
        per_item: rows,
        aggregate,
        warnings,
    })
}

/// Plain-text summary: keystroke savings per mode, similarity per mode,
/// then the keyword ratio.
pub fn render_summary_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<40} {:>9} {:>9} {:>4}", "metric", "mean", "sd", "n");
    let mut row = |label: String, s: &Summary, scale: f64| {
        let _ = writeln!(
            out,
            "{:<40} {:>9.2} {:>9.2} {:>4}",
            label,
            s.mean * scale,
            s.standard_deviation * scale,
            s.n
        );
    };
    for agg in &report.aggregate {
        row(format!("keystroke savings % ({})", agg.mode), &agg.keystroke_savings, 1.0);
    }
    for agg in &report.aggregate {
        if let Some(sim) = &agg.semantic_similarity {
            row(format!("semantic similarity % ({})", agg.mode), sim, 100.0);
        }
    }
    if let Some(first) = report.aggregate.first() {
        row("keywords / reference story %".to_string(), &first.keyword_ratio, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kw(words: &[&str]) -> KeywordList {
        KeywordList::new(words.iter().copied()).unwrap()
    }

    fn fixture() -> EmbeddingTable {
        EmbeddingTable::parse("2 3\na 1 0 0\nb 0 1 0", Path::new("fixture")).unwrap()
    }

    #[test]
    fn story_keystrokes() {
        assert_eq!(count_story_keystrokes("Hi, there!"), 8);
        assert_eq!(count_story_keystrokes(""), 0);
        assert_eq!(count_story_keystrokes("a b"), 3);
        assert_eq!(count_story_keystrokes("a\nb"), 3);
    }

    #[test]
    fn keyword_keystrokes() {
        assert_eq!(count_keyword_keystrokes(&kw(&["park", "dog"])), 9);
        assert_eq!(count_keyword_keystrokes(&KeywordList::default()), 0);
        assert_eq!(count_keyword_keystrokes(&kw(&["dinner with friends"])), 20);
    }

    #[test]
    fn savings() {
        let story = "I walked my dog in the park today";
        assert_eq!(count_story_keystrokes(story), 33);
        let ks = keystroke_savings(story, &kw(&["park", "dog"])).unwrap();
        assert!((ks - 72.7).abs() < 0.1);
        assert_eq!(keystroke_savings("abcd", &kw(&["abc"])).unwrap(), 0.0);
        assert_eq!(keystroke_savings("abcd", &KeywordList::default()).unwrap(), 100.0);
        assert!(matches!(keystroke_savings("?!", &kw(&["a"])), Err(Error::UndefinedMetric(_))));
        assert!(keystroke_savings("ab", &kw(&["abcdef"])).unwrap() < 0.0);
    }

    #[test]
    fn ratio() {
        let reference = "x".repeat(90);
        assert!((keyword_ratio(&kw(&["park", "dog"]), &reference).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(keyword_ratio(&KeywordList::default(), &reference).unwrap(), 0.0);
        assert!(keyword_ratio(&kw(&["whole story"]), "whole story").unwrap() > 100.0);
        assert!(keyword_ratio(&kw(&["a"]), "").is_err());
    }

    #[test]
    fn loader() {
        let t = fixture();
        assert_eq!(t.dimension(), 3);
        assert_eq!(t.len(), 2);
        let p = Path::new("f");
        assert!(EmbeddingTable::parse("3 3\na 1 0 0\nb 0 1 0", p).is_err());
        assert!(EmbeddingTable::parse("", p).is_err());
        assert!(EmbeddingTable::parse("1 2\na 1 x", p).is_err());
        assert!(EmbeddingTable::parse("1 2\na 1", p).is_err());
        assert!(EmbeddingTable::parse("1 2\na 1 NaN", p).is_err());
        assert!(EmbeddingTable::parse("x 2\n", p).is_err());
        let dup = EmbeddingTable::parse("2 2\na 1 0\na 0 1\n", p).unwrap();
        assert_eq!(dup.len(), 1);
        assert_eq!(dup.get("a").unwrap(), &[0.0, 1.0]);
        assert_eq!(dup.duplicate_tokens(), ["a"]);
    }

    #[test]
    fn doc_vectors() {
        let t = fixture();
        assert_eq!(doc_vector("a", &t).unwrap().vector, [1.0, 0.0, 0.0]);
        assert_eq!(doc_vector("A b.", &t).unwrap().vector, [0.5, 0.5, 0.0]);
        let d = doc_vector("a zzz", &t).unwrap();
        assert_eq!((d.in_vocabulary, d.out_of_vocabulary), (1, 1));
        assert!(matches!(doc_vector("zzz qqq", &t), Err(Error::NoVector)));
    }

    #[test]
    fn similarity() {
        let t = fixture();
        assert!((semantic_similarity("a b", "a b", &t).unwrap() - 1.0).abs() < 1e-9);
        assert!(semantic_similarity("a", "b", &t).unwrap().abs() < 1e-9);
        assert!((semantic_similarity("a", "a b", &t).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);
        assert!(matches!(semantic_similarity("zzz", "a", &t), Err(Error::NoVector)));
        let z = EmbeddingTable::parse("1 2\nz 0 0", Path::new("z")).unwrap();
        assert!(matches!(semantic_similarity("z", "z", &z), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn summaries() {
        let s = summarize(&[60.0, 80.0]).unwrap();
        assert!((s.mean - 70.0).abs() < 1e-12);
        assert!((s.standard_deviation - 14.142135623730951).abs() < 1e-9);
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (60.0, 65.0, 70.0, 75.0, 80.0));
        let one = summarize(&[5.0]).unwrap();
        assert_eq!(one.standard_deviation, 0.0);
        assert_eq!((one.q1, one.median, one.q3), (5.0, 5.0, 5.0));
        assert!(summarize(&[]).is_none());
    }
}
