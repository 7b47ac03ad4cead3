//! Binary checkpoint file: magic + version header, config echo, epoch
//! counter, named f64 tensor records, trailing CRC32. Little-endian
//! throughout; round trips are bit-exact.

use std::fs;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"AMK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected {MAGIC:?}")]
    BadMagic { path: String, found: Vec<u8> },
    #[error("{path}: version {found} unsupported (expected {VERSION})")]
    VersionMismatch { path: String, found: u32 },
    #[error("{path}: file is corrupt: {reason}")]
    Corrupt { path: String, reason: String },
}

/// One named tensor record.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Everything a checkpoint stores, in record order.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub epoch: u32,
    pub config_echo: String,
    pub tensors: Vec<TensorRecord>,
}

impl CheckpointData {
    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn push(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.tensors.push(TensorRecord { name: name.to_string(), dims, data });
    }
}

// CRC32 (IEEE 802.3), table-driven.
fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xedb8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    table
}

pub fn crc32(data: &[u8]) -> u32 {
    let table = crc32_table();
    let mut c = 0xffff_ffffu32;
    for &b in data {
        c = table[((c ^ b as u32) & 0xff) as usize] ^ (c >> 8);
    }
    c ^ 0xffff_ffff
}

pub fn save(path: &Path, data: &CheckpointData) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&data.epoch.to_le_bytes());
    let config = data.config_echo.as_bytes();
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config);
    buf.extend_from_slice(&(data.tensors.len() as u32).to_le_bytes());
    for t in &data.tensors {
        let name = t.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = crc32(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    fs::write(path, &buf).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt {
                path: self.path.to_string(),
                reason: format!("truncated while reading {what}"),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load(path: &Path) -> Result<CheckpointData, CheckpointError> {
    let pathstr = path.display().to_string();
    let buf = fs::read(path).map_err(|e| CheckpointError::Io { path: pathstr.clone(), source: e })?;
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            path: pathstr,
            found: buf[..buf.len().min(4)].to_vec(),
        });
    }
    if buf.len() < 8 {
        return Err(CheckpointError::Corrupt { path: pathstr, reason: "truncated header".into() });
    }
    // Verify the trailing checksum before trusting any record.
    if buf.len() < 12 {
        return Err(CheckpointError::Corrupt { path: pathstr, reason: "missing checksum".into() });
    }
    let body = &buf[..buf.len() - 4];
    let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32(body);
    if stored != computed {
        return Err(CheckpointError::Corrupt {
            path: pathstr,
            reason: format!("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"),
        });
    }
    let mut r = Reader { buf: body, pos: 4, path: &pathstr };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { path: pathstr, found: version });
    }
    let epoch = r.u32("epoch")?;
    let config_len = r.u32("config length")? as usize;
    let config_echo = String::from_utf8(r.take(config_len, "config echo")?.to_vec())
        .map_err(|_| CheckpointError::Corrupt {
            path: pathstr.clone(),
            reason: "config echo is not UTF-8".into(),
        })?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec()).map_err(|_| {
            CheckpointError::Corrupt {
                path: pathstr.clone(),
                reason: format!("tensor {i} name is not UTF-8"),
            }
        })?;
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(TensorRecord { name, dims, data });
    }
    let trailing = body.len() - r.pos;
    if trailing != 0 {
        return Err(CheckpointError::Corrupt {
            path: pathstr,
            reason: format!("{trailing} trailing bytes after last record"),
        });
    }
    Ok(CheckpointData { epoch, config_echo, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CheckpointData {
        let mut data = CheckpointData {
            epoch: 7,
            config_echo: "epochs = 30\nbatch_size = 32\n".into(),
            tensors: Vec::new(),
        };
        data.push("g.enc1.kernel", vec![2, 1, 4, 4], (0..32).map(|i| i as f64 * 0.125).collect());
        data.push("adam.g.step", vec![1], vec![42.0]);
        data
    }

    #[test]
    fn crc32_known_answer() {
        assert_eq!(crc32(b"123456789"), 0xcbf4_3926);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let data = sample();
        save(&path, &data).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, data);
        // Saving the loaded data reproduces the file bytes.
        let bytes = fs::read(&path).unwrap();
        save(&path, &back).unwrap();
        assert_eq!(bytes, fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_file_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&path, &sample()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Corrupt { .. })));
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&path, &sample()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        match load(&path) {
            Err(CheckpointError::Corrupt { reason, .. }) => {
                assert!(reason.contains("checksum"), "reason: {reason}")
            }
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_and_version_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic { .. })));

        // Valid container with a bumped version: rebuild checksum.
        save(&path, &sample()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let body_len = bytes.len() - 4;
        let new_crc = crc32(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&new_crc.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::VersionMismatch { found: 2, .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load(Path::new("/nonexistent/ck.bin")),
            Err(CheckpointError::Io { .. })
        ));
    }
}
