//! Binary artifact container with optional detached signatures.
//!
//! Layout: `b"JNO1"`, `u16` version, `u32` header length, UTF-8 JSON header,
//! then the tensor blocks as little-endian `f64`. The header carries a
//! SHA-256 over the whole file computed with the hash field blanked, so
//! corruption is caught even when no key is supplied. A signature, when
//! present, lives in `<file>.sig` and covers the exact file bytes.

use std::fs;
use std::path::{Path, PathBuf};

use ed25519_dalek::{Signature, Signer, Verifier};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Tensor;

pub use ed25519_dalek::{SigningKey, VerifyingKey};

pub const MAGIC: &[u8; 4] = b"JNO1";
pub const VERSION: u16 = 1;
const HASH_PLACEHOLDER: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("signature does not verify")]
    SignatureInvalid,
    #[error("signature file {0} is missing")]
    SignatureMissing(PathBuf),
    #[error("unsupported container version {0}")]
    VersionUnsupported(u16),
    #[error("corrupt payload at byte {offset}: {reason}")]
    CorruptPayload { offset: usize, reason: String },
    #[error("content hash does not match payload")]
    HashMismatch,
    #[error("bad key material: {0}")]
    BadKey(String),
}

pub type Result<T> = std::result::Result<T, PersistError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    CoreState,
    Domain,
    Model,
}

/// Named tensors plus a free-form metadata record.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub kind: ArtifactKind,
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Artifact {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: ArtifactKind,
    version: u16,
    manifest: Vec<ManifestEntry>,
    meta: serde_json::Value,
    content_hash: String,
}

/// Header information without the tensor data.
#[derive(Clone, Debug)]
pub struct Summary {
    pub kind: ArtifactKind,
    pub version: u16,
    pub manifest: Vec<ManifestEntry>,
    pub meta: serde_json::Value,
}

fn corrupt(offset: usize, reason: impl Into<String>) -> PersistError {
    PersistError::CorruptPayload {
        offset,
        reason: reason.into(),
    }
}

fn assemble(header: &Header, blocks: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(10 + json.len() + blocks.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(blocks);
    out
}

/// Deterministic byte encoding of an artifact.
pub fn to_bytes(a: &Artifact) -> Vec<u8> {
    let mut blocks = Vec::new();
    let mut manifest = Vec::new();
    for (name, t) in &a.tensors {
        let offset = blocks.len();
        for v in t.data() {
            blocks.extend_from_slice(&v.to_le_bytes());
        }
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            bytes: blocks.len() - offset,
        });
    }
    let mut header = Header {
        kind: a.kind,
        version: VERSION,
        manifest,
        meta: a.meta.clone(),
        content_hash: HASH_PLACEHOLDER.to_string(),
    };
    let hash = hex::encode(Sha256::digest(assemble(&header, &blocks)));
    header.content_hash = hash;
    assemble(&header, &blocks)
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 10 {
        return Err(corrupt(bytes.len(), "truncated preamble"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(PersistError::VersionUnsupported(version));
    }
    let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let end = 10 + hlen;
    if bytes.len() < end {
        return Err(corrupt(bytes.len(), "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[10..end])
        .map_err(|e| corrupt(10 + e.column().saturating_sub(1), format!("header: {e}")))?;
    if header.version != version {
        return Err(corrupt(4, "header version disagrees with preamble"));
    }
    Ok((header, end))
}

/// Parse and check the embedded content hash.
pub fn from_bytes(bytes: &[u8]) -> Result<Artifact> {
    let (header, start) = parse_header(bytes)?;
    let blocks = &bytes[start..];
    let mut blank = header.clone();
    blank.content_hash = HASH_PLACEHOLDER.to_string();
    let expect = hex::encode(Sha256::digest(assemble(&blank, blocks)));
    if expect != header.content_hash {
        return Err(first_difference(bytes, &blank, blocks));
    }
    let mut tensors = Vec::new();
    for m in &header.manifest {
        let n: usize = m.shape.iter().product();
        if m.bytes != n * 8 || m.offset + m.bytes > blocks.len() {
            return Err(corrupt(start + m.offset, format!("block {} out of range", m.name)));
        }
        let data: Vec<f64> = blocks[m.offset..m.offset + m.bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((m.name.clone(), Tensor::from_parts(m.shape.clone(), data)));
    }
    Ok(Artifact {
        kind: header.kind,
        tensors,
        meta: header.meta,
    })
}

/// A hash failure reports the payload region; the exact byte cannot be
/// recovered from a digest, so the start of the tensor blocks is used
/// unless the re-encoded header itself differs.
fn first_difference(bytes: &[u8], blank: &Header, blocks: &[u8]) -> PersistError {
    let rebuilt = assemble(blank, blocks);
    let header_end = bytes.len() - blocks.len();
    let offset = bytes[..header_end]
        .iter()
        .zip(&rebuilt)
        .position(|(a, b)| a != b)
        .filter(|&i| !in_hash_field(bytes, i))
        .unwrap_or(header_end);
    corrupt(offset, "content hash mismatch")
}

fn in_hash_field(bytes: &[u8], i: usize) -> bool {
    let key = b"\"content_hash\":\"";
    bytes
        .windows(key.len())
        .position(|w| w == key)
        .map(|p| i >= p + key.len() && i < p + key.len() + 64)
        .unwrap_or(false)
}

pub fn summary(bytes: &[u8]) -> Result<Summary> {
    let (h, _) = parse_header(bytes)?;
    Ok(Summary {
        kind: h.kind,
        version: h.version,
        manifest: h.manifest,
        meta: h.meta,
    })
}

pub fn signature_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sig");
    PathBuf::from(s)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Write the artifact, plus `<path>.sig` when a key is given.
pub fn save(a: &Artifact, path: &Path, key: Option<&SigningKey>) -> Result<()> {
    let bytes = to_bytes(a);
    write(path, &bytes)?;
    if let Some(k) = key {
        let sig = k.sign(&bytes);
        write(&signature_path(path), &sig.to_bytes())?;
    }
    Ok(())
}

/// With a key the signature is checked before anything is parsed.
pub fn load(path: &Path, key: Option<&VerifyingKey>) -> Result<Artifact> {
    let bytes = read(path)?;
    if let Some(k) = key {
        verify_bytes(&bytes, path, k)?;
    }
    from_bytes(&bytes)
}

fn verify_bytes(bytes: &[u8], path: &Path, key: &VerifyingKey) -> Result<()> {
    let sp = signature_path(path);
    if !sp.exists() {
        return Err(PersistError::SignatureMissing(sp));
    }
    let raw = read(&sp)?;
    let arr: [u8; 64] = raw
        .as_slice()
        .try_into()
        .map_err(|_| PersistError::SignatureInvalid)?;
    key.verify(bytes, &Signature::from_bytes(&arr))
        .map_err(|_| PersistError::SignatureInvalid)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignatureStatus {
    Unsigned,
    Valid,
    Invalid,
}

/// Signature status of a file on disk. Without a key, a present signature
/// is reported valid only if the payload also passes its content hash.
pub fn signature_status(path: &Path, key: Option<&VerifyingKey>) -> Result<SignatureStatus> {
    let sp = signature_path(path);
    if !sp.exists() {
        return Ok(SignatureStatus::Unsigned);
    }
    let bytes = read(path)?;
    let ok = match key {
        Some(k) => verify_bytes(&bytes, path, k).is_ok(),
        None => from_bytes(&bytes).is_ok(),
    };
    Ok(if ok {
        SignatureStatus::Valid
    } else {
        SignatureStatus::Invalid
    })
}

/// Keys are stored as 32 raw bytes or 64 hex characters.
fn key_bytes(path: &Path) -> Result<[u8; 32]> {
    let raw = read(path)?;
    let text = String::from_utf8_lossy(&raw);
    let trimmed = text.trim();
    if trimmed.len() == 64 {
        if let Ok(v) = hex::decode(trimmed) {
            return v
                .try_into()
                .map_err(|_| PersistError::BadKey(path.display().to_string()));
        }
    }
    raw.as_slice()
        .try_into()
        .map_err(|_| PersistError::BadKey(path.display().to_string()))
}

pub fn read_signing_key(path: &Path) -> Result<SigningKey> {
    Ok(SigningKey::from_bytes(&key_bytes(path)?))
}

pub fn read_verifying_key(path: &Path) -> Result<VerifyingKey> {
    VerifyingKey::from_bytes(&key_bytes(path)?)
        .map_err(|e| PersistError::BadKey(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Artifact {
        Artifact {
            kind: ArtifactKind::Model,
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()),
                ("b".into(), Tensor::scalar(0.1)),
            ],
            meta: serde_json::json!({"name": "m"}),
        }
    }

    fn key() -> SigningKey {
        SigningKey::from_bytes(&[7u8; 32])
    }

    #[test]
    fn round_trip_is_bitwise() {
        let a = sample();
        let b = from_bytes(&to_bytes(&a)).unwrap();
        assert_eq!(a.kind, b.kind);
        for ((n1, t1), (n2, t2)) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(n1, n2);
            assert!(t1.bitwise_eq(t2));
        }
        assert_eq!(to_bytes(&a), to_bytes(&b));
    }

    #[test]
    fn preamble_layout() {
        let bytes = to_bytes(&sample());
        assert_eq!(&bytes[..4], b"JNO1");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    }

    #[test]
    fn flipped_byte_is_detected_with_and_without_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jno");
        let sk = key();
        save(&sample(), &p, Some(&sk)).unwrap();
        assert!(load(&p, Some(&sk.verifying_key())).is_ok());
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load(&p, Some(&sk.verifying_key())), Err(PersistError::SignatureInvalid)));
        assert!(matches!(load(&p, None), Err(PersistError::CorruptPayload { .. })));
        assert_eq!(signature_status(&p, Some(&sk.verifying_key())).unwrap(), SignatureStatus::Invalid);
    }

    #[test]
    fn unsigned_files_load_without_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jno");
        save(&sample(), &p, None).unwrap();
        assert!(load(&p, None).is_ok());
        assert_eq!(signature_status(&p, None).unwrap(), SignatureStatus::Unsigned);
        assert!(matches!(
            load(&p, Some(&key().verifying_key())),
            Err(PersistError::SignatureMissing(_))
        ));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = to_bytes(&sample());
        bytes[4] = 9;
        assert!(matches!(from_bytes(&bytes), Err(PersistError::VersionUnsupported(9))));
    }
}
