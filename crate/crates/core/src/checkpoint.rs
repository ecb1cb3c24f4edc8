//! Versioned binary checkpoints.
//!
//! A checkpoint is a self-describing container: magic bytes, a format
//! version, a JSON metadata header, then every parameter partition as
//! (name, frozen flag, entries of name + shape + little-endian f64 data).
//! Values round-trip bit-exactly. Loading validates structure eagerly, so a
//! truncated or corrupt file fails with a structured error instead of
//! producing a half-filled store.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SPCHCKPT";
const FORMAT_VERSION: u32 = 1;
/// Upper bound on any length field, to reject absurd values from corrupt
/// files before attempting allocation.
const MAX_LEN: u64 = 1 << 32;

/// Human-readable context stored alongside the parameters.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    /// What produced this checkpoint (e.g. "asr-pretrain", "joint").
    pub label: String,
    /// Hash of the experiment configuration that produced it.
    pub config_hash: String,
    /// Best epoch reached when the snapshot was taken.
    pub epoch: Option<usize>,
    /// Seed the producing run used.
    pub seed: Option<u64>,
}

/// An in-memory checkpoint: metadata plus every partition's entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// (partition name, frozen flag, entries of (entry name, value)).
    pub partitions: Vec<(String, bool, Vec<(String, ArrayD<f64>)>)>,
}

impl Checkpoint {
    /// Captures the full state of a parameter store.
    pub fn capture(store: &ParamStore, meta: CheckpointMeta) -> Self {
        let mut partitions: Vec<(String, bool, Vec<(String, ArrayD<f64>)>)> = Vec::new();
        for (part, name, frozen, value) in store.iter() {
            match partitions.last_mut() {
                Some((p, _, entries)) if p == part => {
                    entries.push((name.to_string(), value.clone()));
                }
                _ => {
                    partitions.push((
                        part.to_string(),
                        frozen,
                        vec![(name.to_string(), value.clone())],
                    ));
                }
            }
        }
        Checkpoint { meta, partitions }
    }

    /// Writes the checkpoint values and freeze flags into a store whose
    /// partitions and entries were already defined (by constructing the same
    /// models). Shape or name mismatches are structured errors.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        for (part, frozen, entries) in &self.partitions {
            for (name, value) in entries {
                let id = store.id(part, name).ok_or_else(|| {
                    Error::contract(format!("checkpoint entry {part}/{name} not defined in store"))
                })?;
                let slot = store.value_mut(id);
                if slot.shape() != value.shape() {
                    return Err(Error::contract(format!(
                        "checkpoint entry {part}/{name} has shape {:?}, store expects {:?}",
                        value.shape(),
                        slot.shape()
                    )));
                }
                slot.assign(value);
            }
            store.set_frozen(part, *frozen)?;
        }
        Ok(())
    }

    /// Returns a warning when the stored configuration hash differs from the
    /// one the caller is running with; `None` when they agree.
    pub fn config_mismatch_warning(&self, expected_hash: &str) -> Option<String> {
        if self.meta.config_hash == expected_hash {
            None
        } else {
            Some(format!(
                "checkpoint was produced by config {} but the current config hashes to {}",
                self.meta.config_hash, expected_hash
            ))
        }
    }
}

fn write_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

/// Serializes a checkpoint to its binary form.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&ckpt.meta)
        .map_err(|e| Error::format(format!("metadata serialization failed: {e}")))?;
    write_bytes(&mut out, &meta);
    out.extend_from_slice(&(ckpt.partitions.len() as u64).to_le_bytes());
    for (part, frozen, entries) in &ckpt.partitions {
        write_bytes(&mut out, part.as_bytes());
        out.push(u8::from(*frozen));
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, value) in entries {
            write_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(value.ndim() as u64).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("checkpoint file is truncated"))?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if v > MAX_LEN {
            return Err(Error::format("checkpoint file is corrupt: implausible length"));
        }
        Ok(v)
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::format("checkpoint file is corrupt: invalid UTF-8 name"))
    }
}

/// Parses a checkpoint from its binary form, validating magic, version, and
/// structural completeness.
pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic bytes)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::format(format!("checkpoint metadata is corrupt: {e}")))?;
    let part_count = r.u64()? as usize;
    let mut partitions = Vec::with_capacity(part_count);
    for _ in 0..part_count {
        let part = r.string()?;
        let frozen = match r.take(1)?[0] {
            0 => false,
            1 => true,
            _ => return Err(Error::format("checkpoint file is corrupt: bad freeze flag")),
        };
        let entry_count = r.u64()? as usize;
        let mut entries = Vec::with_capacity(entry_count);
        for _ in 0..entry_count {
            let name = r.string()?;
            let ndim = r.u64()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            if count as u64 > MAX_LEN {
                return Err(Error::format("checkpoint file is corrupt: implausible shape"));
            }
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            let value = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::format(format!("checkpoint file is corrupt: {e}")))?;
            entries.push((name, value));
        }
        partitions.push((part, frozen, entries));
    }
    if r.pos != buf.len() {
        return Err(Error::format("checkpoint file is corrupt: trailing bytes"));
    }
    Ok(Checkpoint { meta, partitions })
}

fn file_error(path: &Path, verb: &str, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::missing(format!("checkpoint {} does not exist", path.display()))
    } else {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot {verb} {}: {e}", path.display()),
        ))
    }
}

/// Captures `store` and writes it to `path`.
pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: CheckpointMeta) -> Result<()> {
    let bytes = encode(&Checkpoint::capture(store, meta))?;
    let mut file = std::fs::File::create(path)
        .map_err(|e| file_error(path, "create", e))?;
    file.write_all(&bytes)
        .map_err(|e| file_error(path, "write", e))?;
    Ok(())
}

/// Reads and parses the checkpoint at `path`.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| file_error(path, "open", e))?
        .read_to_end(&mut bytes)
        .map_err(|e| file_error(path, "read", e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::uniform_init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store(seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        store.define("asr.enc", "w", uniform_init(&mut rng, &[3, 4], 1.0));
        store.define("asr.enc", "b", uniform_init(&mut rng, &[4], 1.0));
        store.define("tts.va.dur", "w", uniform_init(&mut rng, &[2, 2], 1.0));
        store.define("speaker.enc", "gamma", uniform_init(&mut rng, &[5], 1.0));
        store.set_frozen("speaker.enc", true).unwrap();
        store
    }

    fn sample_meta() -> CheckpointMeta {
        CheckpointMeta {
            label: "asr-pretrain".into(),
            config_hash: "abc123".into(),
            epoch: Some(17),
            seed: Some(42),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let store = sample_store(1);
        let ckpt = Checkpoint::capture(&store, sample_meta());
        let decoded = decode(&encode(&ckpt).unwrap()).unwrap();
        assert_eq!(decoded.meta, ckpt.meta);
        assert_eq!(decoded.partitions.len(), ckpt.partitions.len());
        for ((p1, f1, e1), (p2, f2, e2)) in ckpt.partitions.iter().zip(&decoded.partitions) {
            assert_eq!((p1, f1), (p2, f2));
            for ((n1, v1), (n2, v2)) in e1.iter().zip(e2) {
                assert_eq!(n1, n2);
                assert_eq!(v1.shape(), v2.shape());
                for (a, b) in v1.iter().zip(v2.iter()) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn round_trip_preserves_non_finite_and_denormal_values() {
        let mut store = ParamStore::new();
        let weird = ArrayD::from_shape_vec(
            IxDyn(&[5]),
            vec![f64::MIN_POSITIVE / 2.0, -0.0, 1e308, f64::EPSILON, std::f64::consts::PI],
        )
        .unwrap();
        store.define("p", "w", weird.clone());
        let ckpt = Checkpoint::capture(&store, CheckpointMeta::default());
        let decoded = decode(&encode(&ckpt).unwrap()).unwrap();
        for (a, b) in weird.iter().zip(decoded.partitions[0].2[0].1.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn file_round_trip_restores_values_and_freeze_flags() {
        let dir = std::env::temp_dir().join(format!("ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let store = sample_store(2);
        save_checkpoint(&path, &store, sample_meta()).unwrap();

        // A freshly defined store with different values and flags.
        let mut other = sample_store(3);
        other.set_frozen("speaker.enc", false).unwrap();
        load_checkpoint(&path).unwrap().restore_into(&mut other).unwrap();

        for ((p1, n1, f1, v1), (_, _, f2, v2)) in store.iter().zip(other.iter()) {
            assert_eq!(f1, f2, "{p1} freeze flag");
            for (a, b) in v1.iter().zip(v2.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{p1}/{n1}");
            }
        }
        assert!(other.is_frozen("speaker.enc").unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_files_are_rejected_at_every_length() {
        let store = sample_store(4);
        let bytes = encode(&Checkpoint::capture(&store, sample_meta())).unwrap();
        // Every strict prefix must fail: data loss anywhere is detected.
        for cut in 0..bytes.len() {
            assert!(
                decode(&bytes[..cut]).is_err(),
                "truncation to {cut} of {} bytes was accepted",
                bytes.len()
            );
        }
        assert!(decode(&bytes).is_ok());
    }

    #[test]
    fn bad_magic_and_unsupported_version_are_rejected() {
        let store = sample_store(5);
        let mut bytes = encode(&Checkpoint::capture(&store, sample_meta())).unwrap();
        let mut scrambled = bytes.clone();
        scrambled[0] ^= 0xff;
        let err = decode(&scrambled).unwrap_err().to_string();
        assert!(err.contains("magic"), "unexpected error: {err}");

        // Bump the version field.
        bytes[8] = 99;
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "unexpected error: {err}");
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let store = sample_store(6);
        let mut bytes = encode(&Checkpoint::capture(&store, sample_meta())).unwrap();
        bytes.extend_from_slice(&[0u8; 3]);
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn config_hash_mismatch_surfaces_a_warning() {
        let ckpt = Checkpoint::capture(&sample_store(7), sample_meta());
        assert!(ckpt.config_mismatch_warning("abc123").is_none());
        let warning = ckpt.config_mismatch_warning("def456").unwrap();
        assert!(warning.contains("abc123") && warning.contains("def456"));
    }

    #[test]
    fn restore_rejects_unknown_entries_and_shape_drift() {
        let ckpt = Checkpoint::capture(&sample_store(8), sample_meta());

        let mut missing = ParamStore::new();
        missing.define("asr.enc", "w", zeros(&[3, 4]));
        assert!(ckpt.restore_into(&mut missing).is_err());

        let mut reshaped = sample_store(9);
        let id = reshaped.id("asr.enc", "w").unwrap();
        *reshaped.value_mut(id) = zeros(&[4, 3]);
        assert!(ckpt.restore_into(&mut reshaped).is_err());
    }

    fn zeros(shape: &[usize]) -> ArrayD<f64> {
        ArrayD::zeros(IxDyn(shape))
    }
}
