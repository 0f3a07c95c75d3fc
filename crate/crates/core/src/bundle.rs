//! Single-file map bundle with CRC-checked sections.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SLMB" | u32 version | u32 section count
//! repeated: [u8; 4] tag | u64 payload length | u32 crc32(payload) | payload
//! ```
//!
//! Tags: `PARM` parameters and id counters, `GRPH` graph, `CORP` corpus,
//! `TREE` index, `EMBD` embedding model (optional), `HIST` update reports.
//! Payloads are bincode. Saving writes a sibling temp file and renames it
//! over the target, so a crash never leaves a half-written bundle behind.

use std::fs::{self, File, OpenOptions};
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, EngineParams};

pub const MAGIC: [u8; 4] = *b"SLMB";
pub const VERSION: u32 = 1;

const PARM: [u8; 4] = *b"PARM";
const GRPH: [u8; 4] = *b"GRPH";
const CORP: [u8; 4] = *b"CORP";
const TREE: [u8; 4] = *b"TREE";
const EMBD: [u8; 4] = *b"EMBD";
const HIST: [u8; 4] = *b"HIST";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("not a map bundle (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported bundle version {0}")]
    UnsupportedVersion(u32),
    #[error("bundle truncated at offset {0}")]
    Truncated(u64),
    #[error("checksum mismatch in section {0}")]
    Checksum(String),
    #[error("missing section {0}")]
    MissingSection(String),
    #[error("duplicate section {0}")]
    DuplicateSection(String),
    #[error("cannot decode section {section}: {message}")]
    Decode { section: String, message: String },
    #[error("bundle fails consistency audit: {0}")]
    Audit(String),
    #[error("bundle is locked by another process ({0})")]
    Locked(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct Header {
    params: EngineParams,
    next_image: u64,
    next_video: u32,
}

fn tag_name(tag: [u8; 4]) -> String {
    String::from_utf8_lossy(&tag).into_owned()
}

fn encode<T: Serialize>(value: &T) -> Vec<u8> {
    bincode::serialize(value).expect("in-memory serialization cannot fail")
}

fn decode<T: DeserializeOwned>(tag: [u8; 4], bytes: &[u8]) -> Result<T, BundleError> {
    bincode::deserialize(bytes).map_err(|e| BundleError::Decode {
        section: tag_name(tag),
        message: e.to_string(),
    })
}

pub fn to_bytes(engine: &Engine) -> Vec<u8> {
    let header = Header {
        params: engine.params,
        next_image: engine.next_image,
        next_video: engine.next_video,
    };
    let mut sections = vec![
        (PARM, encode(&header)),
        (GRPH, encode(&engine.map.graph)),
        (CORP, encode(&engine.map.corpus)),
        (TREE, encode(&engine.tree)),
        (HIST, encode(&engine.history)),
    ];
    if let Some(model) = &engine.embedding {
        sections.push((EMBD, encode(model)));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.write_u32::<LittleEndian>(VERSION).expect("vec write");
    out.write_u32::<LittleEndian>(sections.len() as u32).expect("vec write");
    for (tag, payload) in sections {
        out.extend_from_slice(&tag);
        out.write_u64::<LittleEndian>(payload.len() as u64).expect("vec write");
        out.write_u32::<LittleEndian>(crc32fast::hash(&payload))
            .expect("vec write");
        out.extend_from_slice(&payload);
    }
    out
}

/// Parses, verifies every checksum, rebuilds lookup tables and audits.
pub fn from_bytes(bytes: &[u8]) -> Result<Engine, BundleError> {
    let mut cur = Cursor::new(bytes);
    let truncated = |c: &Cursor<&[u8]>| BundleError::Truncated(c.position());
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| truncated(&cur))?;
    if magic != MAGIC {
        return Err(BundleError::BadMagic(magic));
    }
    let version = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur))?;
    if version != VERSION {
        return Err(BundleError::UnsupportedVersion(version));
    }
    let count = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur))?;
    let mut sections: Vec<([u8; 4], &[u8])> = Vec::new();
    for _ in 0..count {
        let mut tag = [0u8; 4];
        cur.read_exact(&mut tag).map_err(|_| truncated(&cur))?;
        let len = cur.read_u64::<LittleEndian>().map_err(|_| truncated(&cur))?;
        let crc = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur))?;
        let start = cur.position();
        let end = start.checked_add(len).filter(|&e| e <= bytes.len() as u64);
        let Some(end) = end else {
            return Err(BundleError::Truncated(bytes.len() as u64));
        };
        let payload = &bytes[start as usize..end as usize];
        if crc32fast::hash(payload) != crc {
            return Err(BundleError::Checksum(tag_name(tag)));
        }
        if sections.iter().any(|(t, _)| *t == tag) {
            return Err(BundleError::DuplicateSection(tag_name(tag)));
        }
        sections.push((tag, payload));
        cur.set_position(end);
    }
    if cur.position() != bytes.len() as u64 {
        return Err(BundleError::Decode {
            section: "trailer".into(),
            message: format!("{} trailing bytes", bytes.len() as u64 - cur.position()),
        });
    }
    let find = |tag: [u8; 4]| sections.iter().find(|(t, _)| *t == tag).map(|(_, p)| *p);
    let required = |tag: [u8; 4]| find(tag).ok_or_else(|| BundleError::MissingSection(tag_name(tag)));

    let header: Header = decode(PARM, required(PARM)?)?;
    let mut engine = Engine {
        params: header.params,
        map: crate::mapgraph::PlaceMap {
            graph: decode(GRPH, required(GRPH)?)?,
            corpus: decode(CORP, required(CORP)?)?,
        },
        tree: decode(TREE, required(TREE)?)?,
        embedding: find(EMBD).map(|p| decode(EMBD, p)).transpose()?,
        next_image: header.next_image,
        next_video: header.next_video,
        history: decode(HIST, required(HIST)?)?,
    };
    engine
        .params
        .validate()
        .map_err(|e| BundleError::Audit(e.to_string()))?;
    engine.map.reindex();
    engine.tree.reindex();
    engine.audit().map_err(|e| BundleError::Audit(e.to_string()))?;
    Ok(engine)
}

/// Atomic save: temp file in the target directory, fsync, rename.
pub fn save(engine: &Engine, path: &Path) -> Result<(), BundleError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&to_bytes(engine))?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| BundleError::Io(e.error))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Engine, BundleError> {
    from_bytes(&fs::read(path)?)
}

/// Advisory `<bundle>.lock` held for the duration of an ingest.
#[derive(Debug)]
pub struct BundleLock {
    path: PathBuf,
    _file: File,
}

impl BundleLock {
    pub fn acquire(bundle: &Path) -> Result<Self, BundleError> {
        let mut name = bundle.as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                writeln!(file, "{}", std::process::id())?;
                Ok(Self { path, _file: file })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(BundleError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for BundleLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
