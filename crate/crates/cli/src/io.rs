use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use qaroute_core::ingest::validate;
use qaroute_core::sample::UnifiedSample;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Non-blank lines with 1-based line numbers.
pub fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    lines(path)?
        .into_iter()
        .map(|(n, l)| {
            serde_json::from_str(&l)
                .with_context(|| format!("{}:{n}: malformed record", path.display()))
        })
        .collect()
}

/// Samples that pass schema validation; the first bad line aborts.
pub fn read_samples(path: &Path) -> Result<Vec<UnifiedSample>> {
    let mut out = Vec::new();
    for (n, line) in lines(path)? {
        match validate(&line) {
            Ok(s) => out.push(s),
            Err(errs) => {
                let detail: Vec<String> = errs
                    .iter()
                    .map(|e| format!("{}: {}", e.path, e.message))
                    .collect();
                bail!(
                    "{}:{n}: invalid sample: {}",
                    path.display(),
                    detail.join("; ")
                );
            }
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
        .with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
