//! Model persistence: a single `.scae` container holding a plain-text JSON
//! metadata header (config, provenance, fitted classifiers) followed by a
//! binary little-endian `f64` parameter section in canonical order.
//!
//! Layout:
//!
//! ```text
//! bytes 0..4    magic "SCAE"
//! bytes 4..8    format version, u32 LE
//! bytes 8..16   metadata length in bytes, u64 LE
//! ...           metadata JSON (inspectable with any text tool)
//! ...           param_count × 8 bytes, f64 LE, canonical parameter order
//! ```
//!
//! Loading verifies magic, version, metadata integrity, and exact parameter
//! length; a truncated or padded file never yields a partial model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifiers::ClassifierSet;
use crate::error::{Error, Result};
use crate::model::{ScaeConfig, ScaeModel};
use crate::scalar::Real;

const MAGIC: &[u8; 4] = b"SCAE";
pub const FORMAT_VERSION: u32 = 1;

/// Provenance carried in the metadata header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    /// Epochs completed when the snapshot was taken.
    pub epoch: usize,
    /// Training regime name ("plain", "at", ...).
    pub regime: String,
    /// Run seed the training used.
    pub seed: u64,
}

/// Everything a load returns.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Real> {
    pub model: ScaeModel<F>,
    pub classifiers: ClassifierSet<F>,
    pub info: CheckpointInfo,
    pub config_hash: String,
}

/// The JSON header as written to disk.
#[derive(Serialize, Deserialize)]
struct Header<F: Real> {
    config: ScaeConfig,
    config_hash: String,
    info: CheckpointInfo,
    param_count: usize,
    classifiers: ClassifierSet<F>,
}

/// Hex SHA-256 of the config's canonical JSON form; stored in the header so
/// tooling can group checkpoints trained with identical architectures.
pub fn config_hash(config: &ScaeConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::malformed("checkpoint", detail.into())
}

/// Write a model, its fitted classifiers, and provenance to `path`.
pub fn save_checkpoint<F: Real + Serialize>(
    model: &ScaeModel<F>,
    classifiers: &ClassifierSet<F>,
    info: &CheckpointInfo,
    path: &Path,
) -> Result<()> {
    let flat = model.params.to_flat_f64();
    let header = Header {
        config: model.config.clone(),
        config_hash: config_hash(&model.config),
        info: info.clone(),
        param_count: flat.len(),
        classifiers: classifiers.clone(),
    };
    let meta = serde_json::to_vec(&header).map_err(|e| corrupt(format!("header encode: {e}")))?;

    let file = File::create(path).map_err(Error::Io)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(Error::Io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(Error::Io)?;
    w.write_all(&(meta.len() as u64).to_le_bytes()).map_err(Error::Io)?;
    w.write_all(&meta).map_err(Error::Io)?;
    for v in &flat {
        w.write_all(&v.to_le_bytes()).map_err(Error::Io)?;
    }
    w.flush().map_err(Error::Io)
}

/// Load a checkpoint, rebuilding the model from the stored config and
/// parameter blob. Fails loudly on any structural damage.
pub fn load_checkpoint<F: Real + Serialize + for<'de> Deserialize<'de>>(
    path: &Path,
) -> Result<Checkpoint<F>> {
    let file = File::open(path).map_err(Error::Io)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}; not a checkpoint file")));
    }
    let mut version_bytes = [0u8; 4];
    read_exact(&mut r, &mut version_bytes, "format version")?;
    let version = u32::from_le_bytes(version_bytes);
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut len_bytes = [0u8; 8];
    read_exact(&mut r, &mut len_bytes, "metadata length")?;
    let meta_len = u64::from_le_bytes(len_bytes) as usize;
    let mut meta = vec![0u8; meta_len];
    read_exact(&mut r, &mut meta, "metadata")?;
    let header: Header<F> =
        serde_json::from_slice(&meta).map_err(|e| corrupt(format!("metadata decode: {e}")))?;

    let expected_hash = config_hash(&header.config);
    if header.config_hash != expected_hash {
        return Err(corrupt(format!(
            "config hash {} does not match stored config (expected {expected_hash})",
            header.config_hash
        )));
    }

    let mut flat = vec![0.0f64; header.param_count];
    let mut buf = [0u8; 8];
    for (i, v) in flat.iter_mut().enumerate() {
        read_exact(&mut r, &mut buf, "parameter blob").map_err(|_| {
            corrupt(format!(
                "parameter blob truncated at value {i} of {}",
                header.param_count
            ))
        })?;
        *v = f64::from_le_bytes(buf);
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(corrupt("trailing bytes after parameter blob")),
        Err(e) => return Err(Error::Io(e)),
    }

    // Rebuild through init so the stored config is re-validated, then
    // overwrite the fresh parameters with the stored ones.
    let mut model = ScaeModel::<F>::init(header.config, 0)?;
    if model.param_count() != header.param_count {
        return Err(corrupt(format!(
            "config implies {} parameters but blob holds {}",
            model.param_count(),
            header.param_count
        )));
    }
    model.params.load_flat_f64(&flat);

    validate_classifiers(&header.classifiers, model.config.num_object_capsules)?;

    Ok(Checkpoint {
        model,
        classifiers: header.classifiers,
        info: header.info,
        config_hash: header.config_hash,
    })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| corrupt(format!("file truncated while reading {what}")))
}

/// Light structural checks on deserialized classifiers so a damaged header
/// cannot smuggle in inconsistent heads.
fn validate_classifiers<F: Real>(set: &ClassifierSet<F>, k: usize) -> Result<()> {
    for (name, clf) in [("prior_kmeans", &set.prior_kmeans), ("posterior_kmeans", &set.posterior_kmeans)]
    {
        if let Some(c) = clf {
            let shape = c.centers.shape();
            if shape.len() != 2 || shape[1] != k {
                return Err(corrupt(format!(
                    "{name} centers shaped {shape:?} but the model has {k} object capsules"
                )));
            }
            if c.permutation.len() != shape[0] {
                return Err(corrupt(format!(
                    "{name} has {} centers but {} permutation entries",
                    shape[0],
                    c.permutation.len()
                )));
            }
        }
    }
    if let Some(l) = &set.linear {
        let ws = l.weights.shape();
        if ws.len() != 2 || ws[0] != k {
            return Err(corrupt(format!(
                "linear head weights shaped {ws:?} but the model has {k} object capsules"
            )));
        }
        if l.bias.shape() != [ws[1]] {
            return Err(corrupt(format!(
                "linear head bias shaped {:?} does not match {} classes",
                l.bias.shape(),
                ws[1]
            )));
        }
    }
    Ok(())
}
