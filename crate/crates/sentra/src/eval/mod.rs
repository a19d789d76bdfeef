//! Dataset ingestion, split planning and metric computation.

pub mod metrics;
pub mod splits;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SentraError};
use crate::tokenizer::Tokenizer;

/// One corpus document. `label`: 0 = human, 1 = LLM; absent on unlabeled
/// pre-training data. `generator` tags the producing process when known.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
}

/// Strict JSONL loader: every line must parse, carry the required fields,
/// and ids must be unique.
pub fn load_dataset(path: &Path) -> Result<Vec<Document>> {
    let data = std::fs::read_to_string(path).map_err(|e| {
        SentraError::Data(format!("cannot read dataset {}: {e}", path.display()))
    })?;
    let mut docs = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (lineno, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(line);
        let doc: Document = serde_path_to_error::deserialize(de).map_err(|e| {
            SentraError::Data(format!(
                "{}:{}: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        if let Some(l) = doc.label {
            if l > 1 {
                return Err(SentraError::Data(format!(
                    "{}:{}: label must be 0 or 1, got {l}",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        if doc.id.is_empty() || doc.domain.is_empty() {
            return Err(SentraError::Data(format!(
                "{}:{}: id and domain must be non-empty",
                path.display(),
                lineno + 1
            )));
        }
        if !seen.insert(doc.id.clone()) {
            return Err(SentraError::Data(format!(
                "{}:{}: duplicate document id {}",
                path.display(),
                lineno + 1,
                doc.id
            )));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn save_dataset(docs: &[Document], path: &Path) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Every document must carry a label.
pub fn assert_labeled(docs: &[Document]) -> Result<()> {
    for d in docs {
        if d.label.is_none() {
            return Err(SentraError::Data(format!(
                "document {} has no label in a labeled dataset",
                d.id
            )));
        }
    }
    Ok(())
}

/// First `limit` tokens of the document; `None` marks an empty tokenization
/// (the caller records a skip). Applied identically for every detector.
pub fn truncate_tokens(
    text: &str,
    tokenizer: &Tokenizer,
    limit: usize,
) -> Result<Option<Vec<u32>>> {
    if limit == 0 {
        return Err(SentraError::contract("truncation limit must be >= 1"));
    }
    let mut ids = tokenizer.encode(text);
    if ids.is_empty() {
        return Ok(None);
    }
    ids.truncate(limit);
    Ok(Some(ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenizerMode;

    fn write(path: &Path, s: &str) {
        std::fs::write(path, s).unwrap();
    }

    #[test]
    fn loads_a_valid_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write(&p, r#"{"id":"a","text":"hi","label":1,"domain":"news"}"#);
        let docs = load_dataset(&p).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].label, Some(1));
        assert_eq!(docs[0].domain, "news");
    }

    #[test]
    fn duplicate_ids_are_rejected_with_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write(
            &p,
            "{\"id\":\"a\",\"text\":\"x\",\"label\":0,\"domain\":\"d\"}\n{\"id\":\"a\",\"text\":\"y\",\"label\":1,\"domain\":\"d\"}",
        );
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("duplicate document id a"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write(
            &p,
            "{\"id\":\"a\",\"text\":\"x\",\"label\":0,\"domain\":\"d\"}\n{\"id\":\"b\",\"text\":\"x\",\"label\":0,\"domain\":\"d\"}\n{\"id\":\"c\",\"text\":\"x\",\"label\":0,\"domain\":\"d\"}\nnot json",
        );
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().contains(":4:"), "{err}");
    }

    #[test]
    fn missing_field_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write(&p, r#"{"id":"a","label":0,"domain":"d"}"#);
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("text"), "{err}");
    }

    #[test]
    fn truncation_is_prefix_exact() {
        let docs = vec!["abcdefgh".to_string()];
        let tok = Tokenizer::train(&docs, TokenizerMode::Char, 0).unwrap();
        let long: String = "abcdefgh".chars().cycle().take(700).collect();
        let ids = truncate_tokens(&long, &tok, 512).unwrap().unwrap();
        assert_eq!(ids.len(), 512);
        assert_eq!(ids, tok.encode(&long)[..512].to_vec());

        let short = truncate_tokens("abc", &tok, 512).unwrap().unwrap();
        assert_eq!(short.len(), 3);

        let desk = truncate_tokens(&long, &tok, 128).unwrap().unwrap();
        assert_eq!(desk.len(), 128);
    }

    #[test]
    fn empty_tokenization_is_a_skip() {
        let docs = vec!["abc".to_string()];
        let tok = Tokenizer::train(&docs, TokenizerMode::Char, 0).unwrap();
        assert!(truncate_tokens("", &tok, 16).unwrap().is_none());
    }
}
