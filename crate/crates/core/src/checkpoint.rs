//! Checkpoint file: parameters plus AdamW moments.
//!
//! ```text
//! magic      8 bytes   "MFUSECKP"
//! version    u32 LE
//! length     u64 LE    byte length of the manifest
//! manifest   JSON      config echo, entries (name, shape, byte offset), optimizer counters
//! payload    f64 LE    parameters, then first moments, then second moments
//! ```
//!
//! Each of the three payload sections uses the entry offsets of the manifest,
//! relative to the start of the section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::MultiFuser;
use crate::params::{ParamEntry, ParamStore};
use crate::train::AdamState;

pub const MAGIC: &[u8; 8] = b"MFUSECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    entries: Vec<ManifestEntry>,
    /// Bytes per payload section.
    section_bytes: u64,
    optimizer_step: u64,
    optimizer_epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn encode(model: &MultiFuser, state: &AdamState) -> Result<Vec<u8>> {
    state.check(model.store())?;
    let mut entries = Vec::with_capacity(model.store().len());
    let mut offset = 0u64;
    for e in model.store().entries() {
        entries.push(ManifestEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            offset,
        });
        offset += 8 * e.numel() as u64;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        entries,
        section_bytes: offset,
        optimizer_step: state.step,
        optimizer_epoch: state.epoch,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Contract(format!("manifest: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + 3 * offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let params = model.store().entries().iter().map(|e| e.value.as_slice());
    let sections = params.chain(state.m.iter().map(Vec::as_slice)).chain(state.v.iter().map(Vec::as_slice));
    for values in sections {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, field: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::load(field, format!("need {n} bytes, {} left", bytes.len())));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn floats(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

/// Parses a checkpoint; nothing is returned unless every field checks out.
pub fn decode(mut bytes: &[u8]) -> Result<(MultiFuser, AdamState)> {
    if take(&mut bytes, 8, "magic")? != MAGIC {
        return Err(Error::load("magic", "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "format_version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::load(
            "format_version",
            format!("unsupported version {version} (expected {FORMAT_VERSION})"),
        ));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8, "manifest_length")?.try_into().unwrap());
    let manifest: Manifest = serde_json::from_slice(take(&mut bytes, len as usize, "manifest")?)
        .map_err(|e| Error::load("manifest", e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::load("format_version", "manifest and header disagree"));
    }
    manifest
        .config
        .validate()
        .map_err(|e| Error::load("config", e.to_string()))?;

    // The layout the config implies; values are replaced below.
    let template = MultiFuser::new(manifest.config.clone()).map_err(|e| Error::load("config", e.to_string()))?;
    let expected = template.store().entries();
    if expected.len() != manifest.entries.len() {
        return Err(Error::load(
            "entries",
            format!("{} entries, config implies {}", manifest.entries.len(), expected.len()),
        ));
    }
    let mut offset = 0u64;
    for (i, (want, got)) in expected.iter().zip(&manifest.entries).enumerate() {
        if want.name != got.name {
            return Err(Error::load(format!("entries[{i}].name"), format!("`{}`, expected `{}`", got.name, want.name)));
        }
        if want.shape != got.shape {
            return Err(Error::load(
                format!("entries[{i}].shape"),
                format!("{:?} for `{}`, config implies {:?}", got.shape, got.name, want.shape),
            ));
        }
        if got.offset != offset {
            return Err(Error::load(format!("entries[{i}].offset"), format!("{} (expected {offset})", got.offset)));
        }
        offset += 8 * want.numel() as u64;
    }
    if manifest.section_bytes != offset {
        return Err(Error::load("section_bytes", format!("{} (expected {offset})", manifest.section_bytes)));
    }
    let section = offset as usize;
    let expected_payload = 3 * section;
    if bytes.len() != expected_payload {
        return Err(Error::load(
            "payload",
            format!("{} bytes, expected {expected_payload}", bytes.len()),
        ));
    }
    let split = |k: usize| -> Vec<Vec<f64>> {
        let base = &bytes[k * section..(k + 1) * section];
        expected
            .iter()
            .zip(&manifest.entries)
            .map(|(e, m)| floats(&base[m.offset as usize..m.offset as usize + 8 * e.numel()]))
            .collect()
    };
    let values = split(0);
    let entries: Vec<ParamEntry> = expected
        .iter()
        .zip(values)
        .map(|(e, v)| ParamEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            value: v.into(),
        })
        .collect();
    let model = MultiFuser::from_store(manifest.config, ParamStore::from_entries(entries))?;
    let state = AdamState {
        step: manifest.optimizer_step,
        epoch: manifest.optimizer_epoch,
        m: split(1),
        v: split(2),
    };
    Ok((model, state))
}

pub fn save_checkpoint(path: &Path, model: &MultiFuser, state: &AdamState) -> Result<()> {
    fs::write(path, encode(model, state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(MultiFuser, AdamState)> {
    decode(&fs::read(path)?)
}
