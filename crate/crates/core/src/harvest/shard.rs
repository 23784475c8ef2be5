//! Shard file layout:
//!
//! ```text
//! b"FFKVSHRD" | u32 LE version | u32 LE header length | JSON header
//!   | rows × d_coder LE f32 | 32-byte SHA-256 of everything before it
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coders::FeatureCoderHandle;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const SHARD_ROWS: usize = 4096;
const MAGIC: &[u8; 8] = b"FFKVSHRD";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub coder: FeatureCoderHandle,
    pub d_coder: usize,
    pub row_start: usize,
    pub row_end: usize,
}

pub fn write_shard(path: &Path, header: &ShardHeader, block: &Matrix) -> Result<()> {
    if block.rows() != header.row_end - header.row_start || block.cols() != header.d_coder {
        return Err(Error::shape("shard block does not match its header"));
    }
    let head = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(16 + head.len() + block.data().len() * 4 + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(head.len() as u32).to_le_bytes());
    buf.extend_from_slice(&head);
    for v in block.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<(ShardHeader, Matrix)> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let buf = std::fs::read(path)?;
    if buf.len() < 16 + 32 || &buf[..8] != MAGIC {
        return Err(corrupt("missing shard magic"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    let head = body.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: ShardHeader = serde_json::from_slice(head)?;
    let data_bytes = &body[16 + hlen..];
    let rows = header.row_end.saturating_sub(header.row_start);
    if data_bytes.len() != rows * header.d_coder * 4 {
        return Err(corrupt("data block has the wrong length"));
    }
    let data: Vec<f32> = data_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite activation"));
    }
    let block = Matrix::from_vec(rows, header.d_coder, data)?;
    Ok((header, block))
}
