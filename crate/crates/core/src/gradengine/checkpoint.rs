//! Checkpoint container: `MMCDCKPT1\n`, a one-line JSON manifest, then the
//! raw little-endian `f32` arrays in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::GradError;

pub const CHECKPOINT_MAGIC: &[u8] = b"MMCDCKPT1\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArraySpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, GradError> {
        use rand::SeedableRng;
        let bad = || GradError::Checkpoint("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    epoch: u32,
    rng: RngState,
    adam_t: BTreeMap<String, u64>,
    arrays: Vec<ArraySpec>,
}

/// In-memory checkpoint. `meta` carries model-specific layout information.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub epoch: u32,
    pub rng: RngState,
    pub adam_t: BTreeMap<String, u64>,
    pub arrays: Vec<(ArraySpec, Vec<f32>)>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&(ArraySpec, Vec<f32>)> {
        self.arrays.iter().find(|(spec, _)| spec.name == name)
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), GradError> {
    for (spec, data) in &ckpt.arrays {
        if spec.len() != data.len() {
            return Err(GradError::Checkpoint(format!(
                "array {} declares {} values but holds {}",
                spec.name,
                spec.len(),
                data.len()
            )));
        }
    }
    let manifest = Manifest {
        meta: ckpt.meta.clone(),
        epoch: ckpt.epoch,
        rng: ckpt.rng.clone(),
        adam_t: ckpt.adam_t.clone(),
        arrays: ckpt.arrays.iter().map(|(s, _)| s.clone()).collect(),
    };
    let line = serde_json::to_string(&manifest).map_err(|e| GradError::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(line.as_bytes());
    out.push(b'\n');
    for (_, data) in &ckpt.arrays {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path.as_ref())?.write_all(&out)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, GradError> {
    let mut reader = BufReader::new(fs::File::open(path.as_ref())?);
    let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
    reader
        .read_exact(&mut magic)
        .map_err(|_| GradError::Checkpoint("missing magic".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(GradError::Checkpoint("bad magic".into()));
    }
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.pop() != Some(b'\n') {
        return Err(GradError::Checkpoint("unterminated manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&line).map_err(|e| GradError::Checkpoint(e.to_string()))?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let total: usize = manifest.arrays.iter().map(ArraySpec::len).sum();
    if payload.len() != total * 4 {
        return Err(GradError::Checkpoint(format!(
            "payload holds {} bytes, manifest declares {}",
            payload.len(),
            total * 4
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let arrays = manifest
        .arrays
        .into_iter()
        .map(|spec| {
            let data: Vec<f32> = floats.by_ref().take(spec.len()).collect();
            (spec, data)
        })
        .collect();
    Ok(Checkpoint {
        meta: manifest.meta,
        epoch: manifest.epoch,
        rng: manifest.rng,
        adam_t: manifest.adam_t,
        arrays,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..17 {
            rng.gen::<u32>();
        }
        let state = RngState::capture(&rng);
        let mut resumed = state.restore().unwrap();
        let a: Vec<u64> = (0..5).map(|_| rng.gen()).collect();
        let b: Vec<u64> = (0..5).map(|_| resumed.gen()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let ckpt = Checkpoint {
            meta: serde_json::json!({"hidden": 4}),
            epoch: 3,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(1)),
            adam_t: BTreeMap::from([("main".to_string(), 30)]),
            arrays: vec![
                (ArraySpec { name: "a".into(), shape: vec![2, 2] }, vec![1.0, 2.0, 3.0, 4.0]),
                (ArraySpec { name: "b".into(), shape: vec![1] }, vec![-0.5]),
            ],
        };
        write_checkpoint(&ckpt, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(CHECKPOINT_MAGIC));
        assert_eq!(read_checkpoint(&p).unwrap(), ckpt);

        fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(GradError::Checkpoint(_))));
    }
}
