//! Versioned binary checkpoints (`.xfrc`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"XFRC" | u32 version | u64 header_len | header JSON | f32 parameter blobs
//! ```
//!
//! The header carries the architecture descriptor, the declared precision, the name and
//! shape of every parameter in blob order, and training metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{parameter_names, Architecture, FaceModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"XFRC";
pub const VERSION: u32 = 1;
pub const PRECISION: &str = "f32-le";
pub const EXTENSION: &str = "xfrc";

/// Mean losses of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub identity: f64,
    pub reconstruction: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMetadata {
    pub epoch: usize,
    pub seed: u64,
    pub loss_history: Vec<EpochLosses>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    architecture: Architecture,
    precision: String,
    parameters: Vec<ParamEntry>,
    metadata: TrainingMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FaceModel<f32>,
    pub metadata: TrainingMetadata,
}

pub fn to_bytes(model: &FaceModel<f32>, metadata: &TrainingMetadata) -> Result<Vec<u8>> {
    let params = model.params();
    let header = Header {
        architecture: model.arch.clone(),
        precision: PRECISION.into(),
        parameters: parameter_names(&model.arch)
            .into_iter()
            .zip(&params)
            .map(|(name, t)| ParamEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let blob_len: usize = params.iter().map(|t| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(16 + json.len() + blob_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Parses a checkpoint. With `expected`, the stored descriptor must equal it.
pub fn from_bytes(mut bytes: &[u8], expected: Option<&Architecture>) -> Result<Checkpoint> {
    if take(&mut bytes, 4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            supported: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().unwrap());
    let header_len = usize::try_from(header_len).map_err(|_| Error::Format("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(&mut bytes, header_len, "header")?)
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.precision != PRECISION {
        return Err(Error::Format(format!("unsupported precision {:?}", header.precision)));
    }
    if let Some(exp) = expected {
        if *exp != header.architecture {
            return Err(Error::Descriptor(describe_mismatch(exp, &header.architecture)));
        }
    }
    let mut model = FaceModel::<f32>::zeros(header.architecture.clone())?;
    let names = parameter_names(&header.architecture);
    if header.parameters.len() != names.len() {
        return Err(Error::Descriptor(format!(
            "{} parameters listed, architecture has {}",
            header.parameters.len(),
            names.len()
        )));
    }
    for ((entry, name), param) in header.parameters.iter().zip(&names).zip(model.params_mut()) {
        if entry.name != *name || entry.shape != param.shape() {
            return Err(Error::Descriptor(format!(
                "parameter {} {:?} does not match architecture ({name} {:?})",
                entry.name,
                entry.shape,
                param.shape()
            )));
        }
        let raw = take(&mut bytes, param.numel() * 4, &entry.name)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *param = Tensor::new(entry.shape.clone(), data)?;
    }
    if !bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
    }
    Ok(Checkpoint {
        model,
        metadata: header.metadata,
    })
}

fn describe_mismatch(expected: &Architecture, found: &Architecture) -> String {
    if expected.num_identities != found.num_identities {
        format!(
            "expected {} identities, checkpoint has {}",
            expected.num_identities, found.num_identities
        )
    } else {
        format!("expected {expected:?}, checkpoint has {found:?}")
    }
}

pub fn save(path: impl AsRef<Path>, model: &FaceModel<f32>, metadata: &TrainingMetadata) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, metadata)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, None)
}

pub fn load_expecting(path: impl AsRef<Path>, expected: &Architecture) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, Some(expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FaceModel<f32> {
        let mut arch = Architecture::new(1, 3);
        arch.resolution = 32;
        arch.encoder_widths = vec![4, 8, 8];
        FaceModel::new(arch, 9).unwrap()
    }

    fn meta() -> TrainingMetadata {
        TrainingMetadata {
            epoch: 2,
            seed: 9,
            loss_history: vec![EpochLosses {
                epoch: 1,
                identity: 0.1 + 0.2,
                reconstruction: 1e-300,
                total: 3.5,
            }],
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let m = small();
        let bytes = to_bytes(&m, &meta()).unwrap();
        let ck = from_bytes(&bytes, Some(&m.arch)).unwrap();
        for (a, b) in m.params().iter().zip(ck.model.params()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(ck.metadata, meta());
        assert_eq!(to_bytes(&ck.model, &ck.metadata).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = small();
        let bytes = to_bytes(&m, &meta()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(matches!(from_bytes(&bad, None), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(from_bytes(&bad, None), Err(Error::Version { found: 7, .. })));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1], None), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra, None), Err(Error::Format(_))));
    }

    #[test]
    fn identity_count_mismatch_is_a_descriptor_error() {
        let m = small();
        let bytes = to_bytes(&m, &meta()).unwrap();
        let mut other = m.arch.clone();
        other.num_identities = 4;
        let err = from_bytes(&bytes, Some(&other)).unwrap_err();
        assert!(matches!(err, Error::Descriptor(ref s) if s.contains("identities")), "{err}");
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.xfrc");
        let m = small();
        save(&path, &m, &meta()).unwrap();
        assert_eq!(load(&path).unwrap().model, m);
        assert!(matches!(load(dir.path().join("missing.xfrc")), Err(Error::Io { .. })));
    }
}
