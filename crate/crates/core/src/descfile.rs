//! Binary descriptor files shared with external extractors.
//!
//! All integers and floats are little-endian.
//!
//! Single-image record (`SLDC`):
//!
//! | offset | type        | field                       |
//! |--------|-------------|-----------------------------|
//! | 0      | `[u8; 4]`   | magic `"SLDC"`              |
//! | 4      | `u32`       | version, `1`                |
//! | 8      | `u32`       | `d`, vector dimension       |
//! | 12     | `u32`       | `count`, vectors            |
//! | 16     | `f32 * count * d` | row-major vectors     |
//!
//! Container (`SLDX`), one entry per frame of a traversal:
//!
//! | offset | type        | field                                  |
//! |--------|-------------|----------------------------------------|
//! | 0      | `[u8; 4]`   | magic `"SLDX"`                         |
//! | 4      | `u32`       | version, `1`                           |
//! | 8      | `u32`       | kind: `0` local features, `1` global   |
//! | 12     | `u32`       | `d`                                    |
//! | 16     | `u32`       | `image_count`                          |
//! | 20     | `u64 * image_count` | absolute offset of each record |
//! | ...    | records     | one `SLDC` record per image            |
//!
//! Global-descriptor containers hold exactly one vector per image.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::embedding::{EmbedError, GlobalDescriptor, LocalFeatureSet};

pub const RECORD_MAGIC: [u8; 4] = *b"SLDC";
pub const CONTAINER_MAGIC: [u8; 4] = *b"SLDX";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?} at offset {offset}")]
    BadMagic { offset: u64, found: [u8; 4] },
    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { offset: u64, version: u32 },
    #[error("truncated input at offset {offset}")]
    Truncated { offset: u64 },
    #[error("malformed file at offset {offset}: {message}")]
    Malformed { offset: u64, message: String },
    #[error("descriptor error: {0}")]
    Embed(#[from] EmbedError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptorKind {
    LocalFeatures = 0,
    Global = 1,
}

impl DescriptorKind {
    fn from_u32(v: u32, offset: u64) -> Result<Self, FormatError> {
        match v {
            0 => Ok(Self::LocalFeatures),
            1 => Ok(Self::Global),
            other => Err(FormatError::Malformed {
                offset,
                message: format!("unknown descriptor kind {other}"),
            }),
        }
    }
}

/// Decoded container: `images[i]` holds the vectors of frame `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorContainer {
    pub kind: DescriptorKind,
    pub dim: usize,
    pub images: Vec<Vec<Vec<f32>>>,
}

impl DescriptorContainer {
    pub fn from_globals(descriptors: &[GlobalDescriptor]) -> Self {
        let dim = descriptors.first().map_or(0, |d| d.dim());
        Self {
            kind: DescriptorKind::Global,
            dim,
            images: descriptors
                .iter()
                .map(|d| vec![d.as_slice().iter().map(|&x| x as f32).collect()])
                .collect(),
        }
    }

    pub fn from_local(sets: &[LocalFeatureSet]) -> Self {
        let dim = sets.first().map_or(0, |s| s.dim());
        Self {
            kind: DescriptorKind::LocalFeatures,
            dim,
            images: sets
                .iter()
                .map(|s| {
                    s.features()
                        .iter()
                        .map(|f| f.iter().map(|&x| x as f32).collect())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Re-normalizes each frame's single vector into a descriptor.
    pub fn to_globals(&self) -> Result<Vec<GlobalDescriptor>, FormatError> {
        if self.kind != DescriptorKind::Global {
            return Err(FormatError::Malformed {
                offset: 8,
                message: "container holds local features, not global descriptors".into(),
            });
        }
        self.images
            .iter()
            .map(|img| Ok(GlobalDescriptor::new(img[0].iter().map(|&x| x as f64).collect())?))
            .collect()
    }

    pub fn to_local(&self) -> Result<Vec<LocalFeatureSet>, FormatError> {
        if self.kind != DescriptorKind::LocalFeatures {
            return Err(FormatError::Malformed {
                offset: 8,
                message: "container holds global descriptors, not local features".into(),
            });
        }
        self.images
            .iter()
            .map(|img| {
                Ok(LocalFeatureSet::new(
                    img.iter().map(|f| f.iter().map(|&x| x as f64).collect()).collect(),
                )?)
            })
            .collect()
    }
}

pub fn encode_record(dim: usize, vectors: &[Vec<f32>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * dim * vectors.len());
    out.extend_from_slice(&RECORD_MAGIC);
    out.write_u32::<LittleEndian>(VERSION).expect("vec write");
    out.write_u32::<LittleEndian>(dim as u32).expect("vec write");
    out.write_u32::<LittleEndian>(vectors.len() as u32).expect("vec write");
    for v in vectors {
        debug_assert_eq!(v.len(), dim);
        for &x in v {
            out.write_f32::<LittleEndian>(x).expect("vec write");
        }
    }
    out
}

fn read_magic(cur: &mut Cursor<&[u8]>, expect: [u8; 4]) -> Result<(), FormatError> {
    let offset = cur.position();
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| FormatError::Truncated { offset })?;
    if magic != expect {
        return Err(FormatError::BadMagic { offset, found: magic });
    }
    Ok(())
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32, FormatError> {
    let offset = cur.position();
    cur.read_u32::<LittleEndian>()
        .map_err(|_| FormatError::Truncated { offset })
}

fn read_version(cur: &mut Cursor<&[u8]>) -> Result<(), FormatError> {
    let offset = cur.position();
    let version = read_u32(cur)?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion { offset, version });
    }
    Ok(())
}

/// Decodes one `SLDC` record starting at `start`; returns `(d, vectors)`.
pub fn decode_record_at(bytes: &[u8], start: u64) -> Result<(usize, Vec<Vec<f32>>), FormatError> {
    let mut cur = Cursor::new(bytes);
    cur.set_position(start);
    read_magic(&mut cur, RECORD_MAGIC)?;
    read_version(&mut cur)?;
    let dim = read_u32(&mut cur)? as usize;
    let count = read_u32(&mut cur)? as usize;
    let payload = (dim as u64) * (count as u64) * 4;
    if cur.position() + payload > bytes.len() as u64 {
        return Err(FormatError::Truncated {
            offset: bytes.len() as u64,
        });
    }
    let mut vectors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            let offset = cur.position();
            let x = cur
                .read_f32::<LittleEndian>()
                .map_err(|_| FormatError::Truncated { offset })?;
            if !x.is_finite() {
                return Err(FormatError::Malformed {
                    offset,
                    message: "non-finite value".into(),
                });
            }
            v.push(x);
        }
        vectors.push(v);
    }
    Ok((dim, vectors))
}

pub fn encode_container(c: &DescriptorContainer) -> Vec<u8> {
    let header = 20 + 8 * c.images.len();
    let records: Vec<Vec<u8>> = c.images.iter().map(|img| encode_record(c.dim, img)).collect();
    let mut out = Vec::with_capacity(header + records.iter().map(Vec::len).sum::<usize>());
    out.extend_from_slice(&CONTAINER_MAGIC);
    out.write_u32::<LittleEndian>(VERSION).expect("vec write");
    out.write_u32::<LittleEndian>(c.kind as u32).expect("vec write");
    out.write_u32::<LittleEndian>(c.dim as u32).expect("vec write");
    out.write_u32::<LittleEndian>(c.images.len() as u32).expect("vec write");
    let mut offset = header as u64;
    for r in &records {
        out.write_u64::<LittleEndian>(offset).expect("vec write");
        offset += r.len() as u64;
    }
    for r in records {
        out.extend_from_slice(&r);
    }
    out
}

/// Decodes and validates a container: header, offsets, per-record
/// dimension, and one vector per image for global containers.
pub fn decode_container(bytes: &[u8]) -> Result<DescriptorContainer, FormatError> {
    let mut cur = Cursor::new(bytes);
    read_magic(&mut cur, CONTAINER_MAGIC)?;
    read_version(&mut cur)?;
    let kind_offset = cur.position();
    let kind = DescriptorKind::from_u32(read_u32(&mut cur)?, kind_offset)?;
    let dim = read_u32(&mut cur)? as usize;
    let count = read_u32(&mut cur)? as usize;
    let mut offsets = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let offset = cur.position();
        offsets.push(
            cur.read_u64::<LittleEndian>()
                .map_err(|_| FormatError::Truncated { offset })?,
        );
    }
    let mut images = Vec::with_capacity(count);
    for (i, &off) in offsets.iter().enumerate() {
        if off >= bytes.len() as u64 {
            return Err(FormatError::Truncated { offset: off });
        }
        let (d, vectors) = decode_record_at(bytes, off)?;
        if d != dim {
            return Err(FormatError::Malformed {
                offset: off + 8,
                message: format!("image {i} has dimension {d}, container {dim}"),
            });
        }
        if vectors.is_empty() {
            return Err(FormatError::Malformed {
                offset: off + 12,
                message: format!("image {i} has no vectors"),
            });
        }
        if kind == DescriptorKind::Global && vectors.len() != 1 {
            return Err(FormatError::Malformed {
                offset: off + 12,
                message: format!("global image {i} has {} vectors", vectors.len()),
            });
        }
        images.push(vectors);
    }
    Ok(DescriptorContainer { kind, dim, images })
}

/// Reads a container, or a lone `SLDC` record as a one-image local-feature
/// container.
pub fn read_file(path: &Path) -> Result<DescriptorContainer, FormatError> {
    let bytes = fs::read(path)?;
    decode_any(&bytes)
}

pub fn decode_any(bytes: &[u8]) -> Result<DescriptorContainer, FormatError> {
    if bytes.starts_with(&RECORD_MAGIC) {
        let (dim, vectors) = decode_record_at(bytes, 0)?;
        if vectors.is_empty() {
            return Err(FormatError::Malformed {
                offset: 12,
                message: "record has no vectors".into(),
            });
        }
        return Ok(DescriptorContainer {
            kind: DescriptorKind::LocalFeatures,
            dim,
            images: vec![vectors],
        });
    }
    decode_container(bytes)
}

pub fn write_file(path: &Path, c: &DescriptorContainer) -> Result<(), FormatError> {
    fs::write(path, encode_container(c))?;
    Ok(())
}
