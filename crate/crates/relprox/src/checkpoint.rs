//! Checkpoint file: `RPLCKPT1`, a `u64` little-endian header length, a JSON
//! header, then every array as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use relprox_core::synth::Corpus;
use relprox_core::train::{Model, Moments, RngState, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"RPLCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Position in the payload, counted in `f64` values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub epoch: u32,
    pub step: u64,
    pub rng: RngState,
    pub config: TrainConfig,
    /// Model parameters, then first and second optimizer moments (flat).
    pub arrays: Vec<ArrayEntry>,
}

pub fn encode(state: &TrainState, config: &TrainConfig) -> Vec<u8> {
    let tensors = state.model.tensors();
    let mut arrays = Vec::with_capacity(tensors.len() + 2);
    let mut offset = 0;
    for (name, shape, data) in &tensors {
        arrays.push(ArrayEntry { name: name.clone(), shape: *shape, offset });
        offset += data.len();
    }
    let n = state.moments.first.len();
    for name in ["moments.first", "moments.second"] {
        arrays.push(ArrayEntry { name: name.into(), shape: [n, 1], offset });
        offset += n;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        epoch: state.epoch,
        step: state.step,
        rng: RngState::capture(&state.rng),
        config: config.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let payload = tensors.iter().flat_map(|t| t.2.iter()).chain(&state.moments.first).chain(&state.moments.second);
    for x in payload {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Rebuilds the training state. `corpus` supplies the text-encoder lexicon.
pub fn decode(bytes: &[u8], corpus: &Corpus, path: &Path) -> Result<(TrainState, TrainConfig)> {
    let bad = |m: String| CliError::format(path, m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end =
        16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    let payload: Vec<f64> = bytes[header_end..]
        .chunks(8)
        .map(|c| c.try_into().map(f64::from_le_bytes).map_err(|_| bad("payload is not a whole number of f64".into())))
        .collect::<Result<_>>()?;

    let config = header.config;
    let mut model = Model::init(corpus, &config)?;
    let expected: Vec<(String, [usize; 2])> = model.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    let n_params = model.num_params();
    if header.arrays.len() != expected.len() + 2 {
        return Err(bad(format!("expected {} arrays, found {}", expected.len() + 2, header.arrays.len())));
    }
    let mut offset = 0;
    let mut slices = Vec::with_capacity(header.arrays.len());
    let names = expected
        .iter()
        .map(|(n, s)| (n.as_str(), *s))
        .chain([("moments.first", [n_params, 1]), ("moments.second", [n_params, 1])]);
    for (entry, (name, shape)) in header.arrays.iter().zip(names) {
        if entry.name != name || entry.shape != shape || entry.offset != offset {
            return Err(bad(format!(
                "array {:?} {:?} does not match the model's {:?} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
        let len = shape[0] * shape[1];
        let data = payload.get(offset..offset + len).ok_or_else(|| bad(format!("payload too short for {name}")))?;
        slices.push(data);
        offset += len;
    }
    if offset != payload.len() {
        return Err(bad("payload has trailing data".into()));
    }
    for (dst, src) in model.tensors_mut().into_iter().zip(&slices) {
        dst.copy_from_slice(src);
    }
    let moments = Moments { first: slices[expected.len()].to_vec(), second: slices[expected.len() + 1].to_vec() };
    let state = TrainState { model, moments, step: header.step, epoch: header.epoch, rng: header.rng.restore() };
    Ok((state, config))
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save(path: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(state, config)).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

pub fn load(path: &Path, corpus: &Corpus) -> Result<(TrainState, TrainConfig)> {
    let bytes = fs::read(path).at(path)?;
    decode(&bytes, corpus, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use relprox_core::synth::{generate_corpus, SyntheticCorpusSpec};

    fn setup() -> (Corpus, TrainConfig) {
        let spec = SyntheticCorpusSpec { num_classes: 8, dev_classes: 2, test_classes: 2, ..Default::default() };
        let cfg = TrainConfig { epochs: 1, classes_per_batch: 3, eval_dev: false, ..Default::default() };
        (generate_corpus(&spec).unwrap(), cfg)
    }

    #[test]
    fn round_trip_is_exact() {
        let (corpus, cfg) = setup();
        let mut state = TrainState::init(&corpus, &cfg).unwrap();
        state.train_epoch(&corpus, &cfg).unwrap();
        let bytes = encode(&state, &cfg);
        let (back, cfg2) = decode(&bytes, &corpus, Path::new("x")).unwrap();
        assert_eq!(back, state);
        assert_eq!(cfg2, cfg);
        assert_eq!(encode(&back, &cfg2), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (corpus, cfg) = setup();
        let state = TrainState::init(&corpus, &cfg).unwrap();
        let bytes = encode(&state, &cfg);
        let p = Path::new("x");
        assert!(decode(&bytes[..bytes.len() - 3], &corpus, p).is_err());
        assert!(decode(&bytes[..bytes.len() - 8], &corpus, p).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong, &corpus, p).is_err());
    }
}
