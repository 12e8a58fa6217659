//! Chat-format fine-tuning files: one JSON object per line holding a
//! `messages` array of `{role, content}` pairs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_EPOCHS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub messages: Vec<Message>,
}

impl Record {
    pub fn exchange(prompt: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            messages: vec![
                Message {
                    role: Role::User,
                    content: prompt.into(),
                },
                Message {
                    role: Role::Assistant,
                    content: answer.into(),
                },
            ],
        }
    }

    fn check(&self) -> Result<(), String> {
        if self.messages.is_empty() {
            return Err("messages is empty".into());
        }
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err("no user message".into());
        }
        if self.messages.last().map(|m| m.role) != Some(Role::Assistant) {
            return Err("last message is not from the assistant".into());
        }
        if let Some(i) = self.messages.iter().position(|m| m.content.trim().is_empty()) {
            return Err(format!("message {i} has empty content"));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("dataset has no records")]
    Empty,
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

/// Parses and checks every line; line numbers are 1-based.
pub fn parse(text: &str) -> Result<Vec<Record>, ValidationError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |reason: String| ValidationError::Line { line: i + 1, reason };
        if line.trim().is_empty() {
            return Err(err("blank line".into()));
        }
        let record: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        record.check().map_err(err)?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(ValidationError::Empty);
    }
    Ok(records)
}

pub fn read_file(path: &Path) -> Result<Vec<Record>, ValidationError> {
    let text = fs::read_to_string(path).map_err(|e| ValidationError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse(&text)
}

/// Number of valid records in the file.
pub fn validate_file(path: &Path) -> Result<usize, ValidationError> {
    read_file(path).map(|r| r.len())
}

pub fn render(records: &[Record]) -> Result<String, ValidationError> {
    let mut out = String::new();
    for (i, record) in records.iter().enumerate() {
        record
            .check()
            .map_err(|reason| ValidationError::Line { line: i + 1, reason })?;
        out.push_str(&serde_json::to_string(record).expect("records serialize"));
        out.push('\n');
    }
    if records.is_empty() {
        return Err(ValidationError::Empty);
    }
    Ok(out)
}

pub fn write_file(path: &Path, records: &[Record]) -> Result<(), ValidationError> {
    let text = render(records)?;
    fs::write(path, text).map_err(|e| ValidationError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_lines_parse() {
        let text = r#"{"messages":[{"role":"user","content":"q"},{"role":"assistant","content":"a"}]}
{"messages":[{"role":"system","content":"s"},{"role":"user","content":"q"},{"role":"assistant","content":"a"}]}
"#;
        assert_eq!(parse(text).unwrap().len(), 2);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "{\"messages\":[{\"role\":\"user\",\"content\":\"q\"},{\"role\":\"assistant\",\"content\":\"a\"}]}\n{\"messages\":[{\"role\":\"user\",\"content\":\"q\"}]}\n";
        assert!(matches!(parse(text), Err(ValidationError::Line { line: 2, .. })));
        assert!(matches!(parse("not json\n"), Err(ValidationError::Line { line: 1, .. })));
        assert!(matches!(
            parse("{\"messages\":[{\"role\":\"bot\",\"content\":\"a\"}]}"),
            Err(ValidationError::Line { line: 1, .. })
        ));
        assert_eq!(parse(""), Err(ValidationError::Empty));
    }

    #[test]
    fn render_round_trips() {
        let recs = vec![Record::exchange("p", "e")];
        assert_eq!(parse(&render(&recs).unwrap()).unwrap(), recs);
    }
}
