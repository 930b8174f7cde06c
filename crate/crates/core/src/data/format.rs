//! Line-delimited JSON: one header object, then one record object per line.
//! Vectors are `f32`, printed with the shortest decimal that reads back to
//! the same bits.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, EmbeddingRecord, LABEL_NAMES};
use crate::error::{DimeError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    d_text: usize,
    d_visual: usize,
    label_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    default_prompt_embedding: Option<Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    target: String,
    label: i64,
    e_text: Vec<f32>,
    e_visual: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    e_prompt: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<BTreeMap<String, String>>,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DimeError::io(path, e))?;
    parse_dataset(&text, path)
}

pub(crate) fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| DimeError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hline, htext) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file, expected a header line".into()))?;
    let header: Header =
        serde_json::from_str(htext).map_err(|e| parse_err(hline, format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(parse_err(
            hline,
            format!("unsupported dataset version {} (expected {FORMAT_VERSION})", header.version),
        ));
    }
    if header.label_names != LABEL_NAMES {
        return Err(parse_err(
            hline,
            format!("label_names must be {LABEL_NAMES:?}, got {:?}", header.label_names),
        ));
    }
    let mut ds = Dataset::new(header.d_text, header.d_visual, header.default_prompt_embedding);
    ds.validate().map_err(|e| parse_err(hline, e.to_string()))?;

    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordLine =
            serde_json::from_str(line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let label = usize::try_from(raw.label)
            .ok()
            .and_then(super::Stance::from_index)
            .ok_or_else(|| {
                parse_err(
                    lineno,
                    format!("record {}: label {} is not one of 0, 1, 2", raw.id, raw.label),
                )
            })?;
        let rec = EmbeddingRecord {
            id: raw.id,
            target: raw.target,
            label,
            e_text: raw.e_text,
            e_visual: raw.e_visual,
            e_prompt: raw.e_prompt,
            meta: raw.meta,
        };
        ds.validate_record(&rec)
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        ds.records.push(rec);
    }
    Ok(ds)
}

pub(crate) fn render_dataset(ds: &Dataset) -> Result<String> {
    let header = Header {
        version: FORMAT_VERSION,
        d_text: ds.d_text,
        d_visual: ds.d_visual,
        label_names: LABEL_NAMES.iter().map(|s| s.to_string()).collect(),
        default_prompt_embedding: ds.default_prompt_embedding.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in &ds.records {
        let line = RecordLine {
            id: r.id.clone(),
            target: r.target.clone(),
            label: r.label.index() as i64,
            e_text: r.e_text.clone(),
            e_visual: r.e_visual.clone(),
            e_prompt: r.e_prompt.clone(),
            meta: r.meta.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let text = render_dataset(ds)?;
    write_atomic(path.as_ref(), text.as_bytes())
}

/// Writes through a sibling temporary file and renames it into place, so a
/// failed write never leaves a partial file at `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| DimeError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| DimeError::io(path, e))?;
    tmp.flush().map_err(|e| DimeError::io(path, e))?;
    tmp.persist(path).map_err(|e| DimeError::io(path, e.error))?;
    Ok(())
}
