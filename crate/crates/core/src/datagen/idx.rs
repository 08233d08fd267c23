//! IDX binary format: big-endian magic and dimensions, unsigned-byte
//! payload. Magic 0x00000803 for image tensors, 0x00000801 for label
//! vectors.

use std::io::{Read, Write};
use std::path::Path;

use super::DataError;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw images as flat `rows * cols` byte vectors.
#[derive(Debug, Clone)]
pub struct IdxImages {
    pub pixels: Vec<Vec<u8>>,
    pub rows: usize,
    pub cols: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Result<u32, DataError> {
        if self.offset + 4 > self.bytes.len() {
            return Err(self.err("truncated header"));
        }
        let v = u32::from_be_bytes(
            self.bytes[self.offset..self.offset + 4].try_into().expect("4 bytes"),
        );
        self.offset += 4;
        Ok(v)
    }

    fn err(&self, detail: &str) -> DataError {
        DataError::IdxFormat {
            path: self.path.display().to_string(),
            offset: self.offset as u64,
            detail: detail.into(),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    Ok(bytes)
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages, DataError> {
    let bytes = read_file(path)?;
    let mut cur = Cursor { bytes: &bytes, offset: 0, path };
    let magic = cur.u32()?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::IdxFormat {
            path: path.display().to_string(),
            offset: 0,
            detail: format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let count = cur.u32()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(DataError::IdxFormat {
            path: path.display().to_string(),
            offset: bytes.len().min(expected) as u64,
            detail: format!("payload is {} bytes, expected {}", bytes.len() - 16, count * rows * cols),
        });
    }
    let pixels = bytes[16..]
        .chunks_exact(rows * cols)
        .map(|chunk| chunk.to_vec())
        .collect();
    Ok(IdxImages { pixels, rows, cols })
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = read_file(path)?;
    let mut cur = Cursor { bytes: &bytes, offset: 0, path };
    let magic = cur.u32()?;
    if magic != LABEL_MAGIC {
        return Err(DataError::IdxFormat {
            path: path.display().to_string(),
            offset: 0,
            detail: format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let count = cur.u32()? as usize;
    if bytes.len() != 8 + count {
        return Err(DataError::IdxFormat {
            path: path.display().to_string(),
            offset: bytes.len().min(8 + count) as u64,
            detail: format!("payload is {} bytes, expected {count}", bytes.len() - 8),
        });
    }
    Ok(bytes[8..].to_vec())
}

pub fn write_idx_images(path: &Path, images: &IdxImages) -> Result<(), DataError> {
    let io = |source: std::io::Error| DataError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&IMAGE_MAGIC.to_be_bytes()).map_err(io)?;
    f.write_all(&(images.pixels.len() as u32).to_be_bytes()).map_err(io)?;
    f.write_all(&(images.rows as u32).to_be_bytes()).map_err(io)?;
    f.write_all(&(images.cols as u32).to_be_bytes()).map_err(io)?;
    for img in &images.pixels {
        f.write_all(img).map_err(io)?;
    }
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let io = |source: std::io::Error| DataError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&LABEL_MAGIC.to_be_bytes()).map_err(io)?;
    f.write_all(&(labels.len() as u32).to_be_bytes()).map_err(io)?;
    f.write_all(labels).map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.idx3-ubyte");
        let images = IdxImages {
            pixels: vec![vec![0, 1, 2, 3, 4, 5], vec![250, 251, 252, 253, 254, 255]],
            rows: 2,
            cols: 3,
        };
        write_idx_images(&path, &images).unwrap();
        let back = read_idx_images(&path).unwrap();
        assert_eq!(back.rows, 2);
        assert_eq!(back.cols, 3);
        assert_eq!(back.pixels, images.pixels);
    }

    #[test]
    fn label_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.idx1-ubyte");
        let labels: Vec<u8> = (0..10).collect();
        write_idx_labels(&path, &labels).unwrap();
        assert_eq!(read_idx_labels(&path).unwrap(), labels);
    }

    #[test]
    fn wrong_magic_is_reported_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx");
        std::fs::write(&path, 0x9999u32.to_be_bytes()).unwrap();
        match read_idx_images(&path) {
            Err(DataError::IdxFormat { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.idx");
        let mut bytes = Vec::new();
        bytes.extend(IMAGE_MAGIC.to_be_bytes());
        bytes.extend(2u32.to_be_bytes());
        bytes.extend(2u32.to_be_bytes());
        bytes.extend(2u32.to_be_bytes());
        bytes.extend([7u8; 3]); // needs 8
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_idx_images(&path), Err(DataError::IdxFormat { .. })));
    }
}
