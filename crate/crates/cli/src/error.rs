use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde_json::json;

/// Exit status of each error kind. Every kind gets its own code so scripts can
/// branch without parsing stderr.
const EXIT_CODES: [(&str, u8); 15] = [
    ("internal", 1),
    ("usage", 2),
    ("invalid_argument", 3),
    ("infeasible", 4),
    ("io", 5),
    ("bad_magic", 6),
    ("unsupported_version", 7),
    ("truncated", 8),
    ("malformed", 9),
    ("csv", 10),
    ("non_finite", 11),
    ("shape_mismatch", 12),
    ("index_out_of_range", 13),
    ("degenerate", 14),
    ("serialization", 15),
];

#[derive(Debug)]
pub struct CliError {
    kind: &'static str,
    message: String,
    flag: Option<String>,
    file: Option<PathBuf>,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            flag: None,
            file: None,
        }
    }

    pub fn invalid(flag: &str, message: impl Into<String>) -> Self {
        Self::new("invalid_argument", message).with_flag(flag)
    }

    pub fn usage(err: &clap::Error) -> Self {
        use clap::error::{ContextKind, ContextValue};
        let flag = match err.get(ContextKind::InvalidArg) {
            Some(ContextValue::String(s)) => s.split_whitespace().next().map(str::to_owned),
            Some(ContextValue::Strings(v)) => v.first().and_then(|s| s.split_whitespace().next()).map(str::to_owned),
            _ => None,
        };
        let rendered = err.render().to_string();
        let message = rendered
            .lines()
            .next()
            .unwrap_or_default()
            .trim_start_matches("error: ")
            .to_owned();
        Self {
            flag,
            ..Self::new("usage", message)
        }
    }

    pub fn with_flag(mut self, flag: &str) -> Self {
        self.flag = Some(flag.to_owned());
        self
    }

    pub fn with_file(mut self, file: &Path) -> Self {
        self.file = Some(file.to_owned());
        self
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(code_of(self.kind))
    }

    /// One-line JSON object for stderr.
    pub fn to_json(&self) -> String {
        json!({
            "error": {
                "kind": self.kind,
                "code": code_of(self.kind),
                "message": self.message,
                "flag": self.flag,
                "file": self.file.as_ref().map(|p| p.display().to_string()),
            }
        })
        .to_string()
    }
}

fn code_of(kind: &str) -> u8 {
    EXIT_CODES.iter().find(|(k, _)| *k == kind).map_or(1, |&(_, c)| c)
}

impl From<kvbudget::Error> for CliError {
    fn from(err: kvbudget::Error) -> Self {
        let file = match &err {
            kvbudget::Error::Io { path, .. } => Some(path.clone()),
            _ => None,
        };
        Self {
            file,
            ..Self::new(err.kind(), err.to_string())
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        Self::new("serialization", err.to_string())
    }
}

/// Attach the offending flag (and file) to a failing result.
pub trait Context<T> {
    fn flag(self, flag: &str) -> CliResult<T>;
    fn file(self, flag: &str, path: &Path) -> CliResult<T>;
}

impl<T, E: Into<CliError>> Context<T> for Result<T, E> {
    fn flag(self, flag: &str) -> CliResult<T> {
        self.map_err(|e| e.into().with_flag(flag))
    }

    fn file(self, flag: &str, path: &Path) -> CliResult<T> {
        self.map_err(|e| e.into().with_flag(flag).with_file(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let mut codes: Vec<u8> = EXIT_CODES.iter().map(|&(_, c)| c).collect();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), EXIT_CODES.len());
        assert!(!codes.contains(&0));
    }

    #[test]
    fn every_core_kind_has_a_code() {
        let samples = [
            kvbudget::Error::InvalidArgument(String::new()),
            kvbudget::Error::Infeasible(String::new()),
            kvbudget::Error::UnsupportedVersion(2),
            kvbudget::Error::Truncated { expected: 1, actual: 0 },
            kvbudget::Error::Malformed(String::new()),
            kvbudget::Error::Csv(String::new()),
            kvbudget::Error::NonFinite { index: 0 },
            kvbudget::Error::ShapeMismatch(String::new()),
            kvbudget::Error::Degenerate(String::new()),
            kvbudget::Error::BadMagic {
                expected: *b"DKVT",
                found: [0; 4],
            },
            kvbudget::Error::IndexOutOfRange {
                what: "layer",
                index: 1,
                bound: 1,
            },
        ];
        for e in samples {
            assert!(EXIT_CODES.iter().any(|(k, _)| *k == e.kind()), "{}", e.kind());
        }
    }
}
