//! JSONL dataset loading.
//!
//! One JSON object per line; the expected fields depend on the task family:
//!
//! * single-sentence classification: `{"text": ..., "label": 0}`
//! * pair classification: `{"text_a": ..., "text_b": ..., "label": 1}`
//! * token tagging: `{"tokens": [...], "tags": [...]}` (parallel arrays)
//! * multi-label classification: `{"text": ..., "labels": [0, 2]}`
//!
//! Unlabeled files use the same schemas with the label fields optional;
//! present labels are ignored. Unknown fields are rejected so schema drift
//! fails loudly. Parse and validation errors carry 1-based line numbers.

use std::path::Path;

use serde::Deserialize;

use crate::data::vocab::{TokenizedText, Vocabulary};
use crate::data::{Example, Label, TaskFamily, TaskKind};
use crate::error::{Result, TfsError};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SingleRecord {
    text: String,
    #[serde(default)]
    label: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    text_a: String,
    text_b: String,
    #[serde(default)]
    label: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaggingRecord {
    tokens: Vec<String>,
    #[serde(default)]
    tags: Option<Vec<usize>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MultiRecord {
    text: String,
    #[serde(default)]
    labels: Option<Vec<usize>>,
}

/// Loads a labeled JSONL dataset, tokenizing and truncating each record.
pub fn load_dataset(
    path: &Path,
    task: &TaskKind,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<(Example, Label)>> {
    task.validate()?;
    check_budget(task, max_len)?;
    let body = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (line_no, line) in numbered_lines(&body) {
        let (example, label) = parse_record(line, line_no, out.len(), task, vocab, max_len, true)?;
        let label = label.ok_or_else(|| TfsError::Parse {
            line: line_no,
            message: "labeled dataset record is missing its label".into(),
        })?;
        label.validate(task).map_err(|e| at_line(e, line_no))?;
        out.push((example, label));
    }
    if out.is_empty() {
        return Err(TfsError::Data(format!("dataset {} is empty", path.display())));
    }
    Ok(out)
}

/// Loads an unlabeled JSONL pool. Label fields may be present or absent and
/// are ignored either way.
pub fn load_unlabeled(
    path: &Path,
    task: &TaskKind,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Example>> {
    task.validate()?;
    check_budget(task, max_len)?;
    let body = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (line_no, line) in numbered_lines(&body) {
        let (example, _) = parse_record(line, line_no, out.len(), task, vocab, max_len, false)?;
        out.push(example);
    }
    if out.is_empty() {
        return Err(TfsError::Data(format!(
            "unlabeled pool {} is empty",
            path.display()
        )));
    }
    Ok(out)
}

fn numbered_lines(body: &str) -> impl Iterator<Item = (usize, &str)> {
    body.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn at_line(err: TfsError, line: usize) -> TfsError {
    match err {
        TfsError::Data(message) => TfsError::Parse { line, message },
        other => other,
    }
}

fn check_budget(task: &TaskKind, max_len: usize) -> Result<()> {
    if max_len <= task.specials_per_sequence() {
        return Err(TfsError::Config(format!(
            "max_len {max_len} leaves no room for text after {} special tokens",
            task.specials_per_sequence()
        )));
    }
    Ok(())
}

fn parse_record(
    line: &str,
    line_no: usize,
    id: usize,
    task: &TaskKind,
    vocab: &Vocabulary,
    max_len: usize,
    _labeled: bool,
) -> Result<(Example, Option<Label>)> {
    let parse_err = |e: serde_json::Error| TfsError::Parse {
        line: line_no,
        message: e.to_string(),
    };
    match task.family {
        TaskFamily::SingleSentenceClassification => {
            let rec: SingleRecord = serde_json::from_str(line).map_err(parse_err)?;
            let mut t = vocab.tokenize(&rec.text);
            truncate_single(&mut t, max_len - 2);
            let example = Example {
                id,
                segment_a: t.ids,
                segment_b: None,
                word_boundaries: Vec::new(),
            };
            Ok((example, rec.label.map(Label::Class)))
        }
        TaskFamily::PairClassification => {
            let rec: PairRecord = serde_json::from_str(line).map_err(parse_err)?;
            let mut a = vocab.tokenize(&rec.text_a);
            let mut b = vocab.tokenize(&rec.text_b);
            truncate_pair(&mut a, &mut b, max_len - 3);
            let example = Example {
                id,
                segment_a: a.ids,
                segment_b: Some(b.ids),
                word_boundaries: Vec::new(),
            };
            Ok((example, rec.label.map(Label::Class)))
        }
        TaskFamily::TokenTagging => {
            let rec: TaggingRecord = serde_json::from_str(line).map_err(parse_err)?;
            if rec.tokens.is_empty() {
                return Err(TfsError::Parse {
                    line: line_no,
                    message: "tagging record has no tokens".into(),
                });
            }
            if let Some(tags) = &rec.tags {
                if tags.len() != rec.tokens.len() {
                    return Err(TfsError::Parse {
                        line: line_no,
                        message: format!(
                            "{} tokens but {} tags",
                            rec.tokens.len(),
                            tags.len()
                        ),
                    });
                }
            }
            let (example, kept_words) = tokenize_tagging(&rec.tokens, id, vocab, max_len - 2);
            let label = rec.tags.map(|mut tags| {
                tags.truncate(kept_words);
                Label::Tags(tags)
            });
            Ok((example, label))
        }
        TaskFamily::MultiLabelClassification => {
            let rec: MultiRecord = serde_json::from_str(line).map_err(parse_err)?;
            let mut t = vocab.tokenize(&rec.text);
            truncate_single(&mut t, max_len - 2);
            let example = Example {
                id,
                segment_a: t.ids,
                segment_b: None,
                word_boundaries: Vec::new(),
            };
            let label = rec.labels.map(|mut set| {
                set.sort_unstable();
                set.dedup();
                Label::Multi(set)
            });
            Ok((example, label))
        }
    }
}

fn truncate_single(t: &mut TokenizedText, budget: usize) {
    t.ids.truncate(budget);
    t.word_boundaries.truncate(budget);
}

/// Pair truncation removes trailing pieces from the currently longer segment
/// one at a time; ties trim the second segment, keeping more of the first.
fn truncate_pair(a: &mut TokenizedText, b: &mut TokenizedText, budget: usize) {
    while a.ids.len() + b.ids.len() > budget {
        if a.ids.len() > b.ids.len() {
            a.ids.pop();
            a.word_boundaries.pop();
        } else {
            b.ids.pop();
            b.word_boundaries.pop();
        }
    }
}

/// Tagging inputs keep whole words: words are appended until the next one
/// would overflow the piece budget. A first word too long on its own is cut
/// at the piece level so the example is never empty.
fn tokenize_tagging(
    words: &[String],
    id: usize,
    vocab: &Vocabulary,
    budget: usize,
) -> (Example, usize) {
    let mut ids = Vec::new();
    let mut boundaries = Vec::new();
    let mut kept_words = 0;
    for word in words {
        let t = vocab.tokenize(word);
        debug_assert!(!t.ids.is_empty(), "a word tokenizes to at least [UNK]");
        if ids.len() + t.ids.len() > budget {
            if kept_words == 0 {
                ids.extend(&t.ids[..budget]);
                boundaries.extend(&t.word_boundaries[..budget]);
                kept_words = 1;
            }
            break;
        }
        ids.extend(t.ids);
        boundaries.extend(t.word_boundaries);
        kept_words += 1;
    }
    let example = Example {
        id,
        segment_a: ids,
        segment_b: None,
        word_boundaries: boundaries,
    };
    (example, kept_words)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["alpha", "beta", "gamma", "delta", "##s"]).unwrap()
    }

    fn write_lines(dir: &tempfile::TempDir, name: &str, lines: &[&str]) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    #[test]
    fn loads_single_sentence_records() {
        let dir = tempfile::tempdir().unwrap();
        let task = TaskKind::new(
            TaskFamily::SingleSentenceClassification,
            2,
            crate::data::MetricKind::Accuracy,
        )
        .unwrap();
        let path = write_lines(
            &dir,
            "train.jsonl",
            &[
                r#"{"text": "alpha beta", "label": 0}"#,
                r#"{"text": "gammas", "label": 1}"#,
            ],
        );
        let v = vocab();
        let data = load_dataset(&path, &task, &v, 16).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data[0].0.segment_a, vec![v.id("alpha").unwrap(), v.id("beta").unwrap()]);
        assert_eq!(data[1].0.segment_a, vec![v.id("gamma").unwrap(), v.id("##s").unwrap()]);
        assert_eq!(data[1].1, Label::Class(1));
        assert_eq!(data[1].0.id, 1);
    }

    #[test]
    fn unknown_fields_and_bad_labels_are_line_numbered_errors() {
        let dir = tempfile::tempdir().unwrap();
        let task = TaskKind::new(
            TaskFamily::SingleSentenceClassification,
            2,
            crate::data::MetricKind::Accuracy,
        )
        .unwrap();
        let path = write_lines(
            &dir,
            "bad.jsonl",
            &[
                r#"{"text": "alpha", "label": 0}"#,
                r#"{"text": "alpha", "label": 0, "extra": 1}"#,
            ],
        );
        match load_dataset(&path, &task, &vocab(), 16) {
            Err(TfsError::Parse { line: 2, .. }) => {}
            other => panic!("expected parse error on line 2, got {other:?}"),
        }

        let path = write_lines(&dir, "range.jsonl", &[r#"{"text": "alpha", "label": 5}"#]);
        match load_dataset(&path, &task, &vocab(), 16) {
            Err(TfsError::Parse { line: 1, .. }) => {}
            other => panic!("expected label range error on line 1, got {other:?}"),
        }

        let path = write_lines(&dir, "unlabeled.jsonl", &[r#"{"text": "alpha"}"#]);
        match load_dataset(&path, &task, &vocab(), 16) {
            Err(TfsError::Parse { line: 1, .. }) => {}
            other => panic!("expected missing-label error, got {other:?}"),
        }
        // The same file is fine as an unlabeled pool.
        assert_eq!(load_unlabeled(&path, &task, &vocab(), 16).unwrap().len(), 1);
    }

    #[test]
    fn pair_truncation_trims_longer_segment_first() {
        let dir = tempfile::tempdir().unwrap();
        let task =
            TaskKind::new(TaskFamily::PairClassification, 2, crate::data::MetricKind::Accuracy)
                .unwrap();
        let path = write_lines(
            &dir,
            "pairs.jsonl",
            &[r#"{"text_a": "alpha alpha alpha alpha", "text_b": "beta beta", "label": 1}"#],
        );
        // Budget is max_len - 3 = 5: a shrinks 4 -> 3, then the tie trims b.
        let data = load_dataset(&path, &task, &vocab(), 8).unwrap();
        let (ex, _) = &data[0];
        assert_eq!(ex.segment_a.len(), 3);
        assert_eq!(ex.segment_b.as_ref().unwrap().len(), 2);
        assert_eq!(ex.encoded_len(), 8);
    }

    #[test]
    fn tagging_keeps_whole_words_and_aligns_tags() {
        let dir = tempfile::tempdir().unwrap();
        let task =
            TaskKind::new(TaskFamily::TokenTagging, 3, crate::data::MetricKind::SpanF1).unwrap();
        let path = write_lines(
            &dir,
            "tags.jsonl",
            &[r#"{"tokens": ["gammas", "alpha", "gammas"], "tags": [1, 0, 2]}"#],
        );
        // Budget 4 pieces: "gammas" (2) + "alpha" (1) fit; the next "gammas"
        // needs 2 more and is dropped along with its tag.
        let data = load_dataset(&path, &task, &vocab(), 6).unwrap();
        let (ex, label) = &data[0];
        assert_eq!(ex.segment_a.len(), 3);
        assert_eq!(ex.word_boundaries, vec![true, false, true]);
        assert_eq!(*label, Label::Tags(vec![1, 0]));

        let path = write_lines(
            &dir,
            "mismatch.jsonl",
            &[r#"{"tokens": ["alpha"], "tags": [0, 1]}"#],
        );
        assert!(matches!(
            load_dataset(&path, &task, &vocab(), 6),
            Err(TfsError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn multi_label_sets_are_sorted_and_deduplicated() {
        let dir = tempfile::tempdir().unwrap();
        let task = TaskKind::new(
            TaskFamily::MultiLabelClassification,
            4,
            crate::data::MetricKind::MicroF1,
        )
        .unwrap();
        let path = write_lines(
            &dir,
            "multi.jsonl",
            &[
                r#"{"text": "alpha", "labels": [2, 0, 2]}"#,
                r#"{"text": "beta", "labels": []}"#,
            ],
        );
        let data = load_dataset(&path, &task, &vocab(), 16).unwrap();
        assert_eq!(data[0].1, Label::Multi(vec![0, 2]));
        assert_eq!(data[1].1, Label::Multi(vec![]));
    }

    #[test]
    fn empty_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let task = TaskKind::new(
            TaskFamily::SingleSentenceClassification,
            2,
            crate::data::MetricKind::Accuracy,
        )
        .unwrap();
        let path = write_lines(&dir, "empty.jsonl", &[""]);
        assert!(matches!(
            load_dataset(&path, &task, &vocab(), 16),
            Err(TfsError::Data(_))
        ));
    }
}
