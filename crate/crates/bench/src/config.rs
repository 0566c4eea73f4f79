//! `key=value` config files, turned into long command-line flags.
//!
//! ```text
//! # comment
//! mode = generalization
//! steps=2000
//! filter-known = true
//! ```
//!
//! Keys may use `_` or `-`. `true` becomes a bare flag, `false` drops it.

use kbq_core::{KbqError, Result};

pub fn parse_config(text: &str) -> Result<Vec<String>> {
    let mut args = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: &str| KbqError::Parse {
            line: i + 1,
            message: message.into(),
        };
        let (k, v) = line.split_once('=').ok_or_else(|| err("expected key=value"))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') || key.starts_with('-') {
            return Err(err("invalid key"));
        }
        let value = v.trim();
        match value {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            _ => args.push(format!("--{key}={value}")),
        }
    }
    Ok(args)
}
