//! On-disk corpus: `manifest.json` plus one binary record per utterance.
//!
//! Record layout (`utterances/NNNNNN.bin`, all integers and floats little-endian):
//!
//! | offset            | size      | field                                    |
//! |-------------------|-----------|------------------------------------------|
//! | 0                 | 8         | magic `RPLUTT01`                         |
//! | 8                 | 4         | class id, `u32`                          |
//! | 12                | 4         | frame count `T`, `u32`                   |
//! | 16                | 4         | frame dimension `F`, `u32`               |
//! | 20                | 8·T·F     | frames, `f64`, row-major (frame by frame)|
//! | 20 + 8·T·F        | 4·T       | phone label per frame, `u32`, 1-based    |

use std::fs;
use std::io::Write;
use std::path::Path;

use relprox_core::synth::{ClassInfo, Corpus, Split, SyntheticCorpusSpec, SyntheticUtterance};
use relprox_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};

pub const RECORD_MAGIC: &[u8; 8] = b"RPLUTT01";
pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "relprox-corpus/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub spec: SyntheticCorpusSpec,
    pub classes: Vec<ClassInfo>,
    pub utterances: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub class_id: usize,
    pub split: Split,
    pub frames: usize,
}

pub fn encode_record(u: &SyntheticUtterance) -> Vec<u8> {
    let (t, f) = (u.frames.rows(), u.frames.cols());
    let mut out = Vec::with_capacity(20 + 8 * t * f + 4 * t);
    out.extend_from_slice(RECORD_MAGIC);
    for v in [u.class_id, t, f] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for x in u.frames.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for &p in &u.frame_phone_labels {
        out.extend_from_slice(&(p as u32 + 1).to_le_bytes());
    }
    out
}

/// Decodes a record; `split` comes from the manifest.
pub fn decode_record(bytes: &[u8], split: Split, path: &Path) -> Result<SyntheticUtterance> {
    let bad = |m: &str| CliError::format(path, m.to_string());
    if bytes.len() < 20 || &bytes[..8] != RECORD_MAGIC {
        return Err(bad("not an utterance record"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (class_id, t, f) = (u32_at(8), u32_at(12), u32_at(16));
    let body = 8 * t * f;
    if bytes.len() != 20 + body + 4 * t {
        return Err(bad("record length does not match its header"));
    }
    let data =
        bytes[20..20 + body].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut labels = Vec::with_capacity(t);
    for k in 0..t {
        let p = u32_at(20 + body + 4 * k);
        if p == 0 {
            return Err(bad("phone labels are 1-based"));
        }
        labels.push(p - 1);
    }
    let frames = Matrix::from_vec(t, f, data).map_err(|e| bad(&e.to_string()))?;
    Ok(SyntheticUtterance { frames, frame_phone_labels: labels, class_id, split })
}

fn manifest_of(corpus: &Corpus) -> Manifest {
    Manifest {
        format: FORMAT.into(),
        spec: corpus.spec.clone(),
        classes: corpus.classes.clone(),
        utterances: corpus
            .utterances
            .iter()
            .enumerate()
            .map(|(i, u)| ManifestEntry {
                file: format!("utterances/{i:06}.bin"),
                class_id: u.class_id,
                split: u.split,
                frames: u.frames.rows(),
            })
            .collect(),
    }
}

/// Writes `corpus` under `dir`. An existing manifest is an error unless `force`.
pub fn write_corpus(dir: &Path, corpus: &Corpus, force: bool) -> Result<()> {
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() && !force {
        return Err(CliError::Config(format!("{} already holds a corpus; pass --force to overwrite", dir.display())));
    }
    let records = dir.join("utterances");
    if force && records.exists() {
        fs::remove_dir_all(&records).at(&records)?;
    }
    fs::create_dir_all(&records).at(&records)?;
    let manifest = manifest_of(corpus);
    for (entry, u) in manifest.utterances.iter().zip(&corpus.utterances) {
        let path = dir.join(&entry.file);
        fs::write(&path, encode_record(u)).at(&path)?;
    }
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    let mut file = fs::File::create(&manifest_path).at(&manifest_path)?;
    file.write_all(json.as_bytes()).at(&manifest_path)?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).at(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CliError::format(&manifest_path, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(CliError::format(&manifest_path, format!("unsupported format {:?}", manifest.format)));
    }
    manifest.spec.validate()?;
    for (i, c) in manifest.classes.iter().enumerate() {
        if c.id != i || c.phones.iter().any(|&p| p >= manifest.spec.phone_inventory_size) {
            return Err(CliError::format(&manifest_path, format!("class entry {i} is inconsistent")));
        }
    }
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for entry in &manifest.utterances {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).at(&path)?;
        let u = decode_record(&bytes, entry.split, &path)?;
        let consistent = u.class_id == entry.class_id
            && u.frames.rows() == entry.frames
            && u.frames.cols() == manifest.spec.frame_dim
            && manifest.classes.get(u.class_id).is_some_and(|c| c.split == entry.split)
            && u.frame_phone_labels.iter().all(|&p| p < manifest.spec.phone_inventory_size);
        if !consistent {
            return Err(CliError::format(&path, "record disagrees with the manifest"));
        }
        utterances.push(u);
    }
    Ok(Corpus { spec: manifest.spec, classes: manifest.classes, utterances })
}
