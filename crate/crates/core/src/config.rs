//! The `key = value` engine configuration file.
//!
//! Recognised keys (all optional; omitted keys keep their defaults):
//!
//! ```text
//! # normalization budgets
//! L_pay  = 256
//! L_len  = 64
//! L_time = 64
//! W_seg  = 16
//! # retrieval
//! k      = 5
//! alpha  = 1.0
//! ```
//!
//! `#` starts a comment (full-line or trailing), blank lines are skipped,
//! and keys are case-sensitive. Unknown or repeated keys are errors.

use std::fs;
use std::path::Path;

use crate::error::ConfigError;
use crate::norm::NormConfig;
use crate::retrieval::RetrievalConfig;

/// Settings a config file can carry.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FileConfig {
    pub norm: NormConfig,
    pub retrieval: RetrievalConfig,
}

/// Parses config text. Values overlay the defaults; the merged result is
/// validated as a whole.
pub fn parse_config(text: &str) -> Result<FileConfig, ConfigError> {
    let mut cfg = FileConfig::default();
    let mut seen: Vec<&str> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
            line: line_no,
            message: format!("expected key = value, got {line:?}"),
        })?;
        let key = key.trim();
        let value = value.trim();

        if seen.contains(&key) {
            return Err(ConfigError::Parse {
                line: line_no,
                message: format!("key {key:?} appears more than once"),
            });
        }

        let bad_num = |what: &str| ConfigError::Parse {
            line: line_no,
            message: format!("{key} = {value:?} is not {what}"),
        };
        match key {
            "L_pay" => cfg.norm.l_pay = value.parse().map_err(|_| bad_num("an integer"))?,
            "L_len" => cfg.norm.l_len = value.parse().map_err(|_| bad_num("an integer"))?,
            "L_time" => cfg.norm.l_time = value.parse().map_err(|_| bad_num("an integer"))?,
            "W_seg" => cfg.norm.w_seg = value.parse().map_err(|_| bad_num("an integer"))?,
            "k" => cfg.retrieval.k = value.parse().map_err(|_| bad_num("an integer"))?,
            "alpha" => cfg.retrieval.alpha = value.parse().map_err(|_| bad_num("a number"))?,
            other => {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("unknown key {other:?}"),
                })
            }
        }
        seen.push(key);
    }

    cfg.norm.validate()?;
    cfg.retrieval.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<FileConfig, ConfigError> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}
