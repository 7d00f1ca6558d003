//! FMAT binary matrices: `b"FMAT"`, `u32` rows, `u32` cols (little endian),
//! then `rows * cols` little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use crate::autograd::Mat;
use crate::error::{CcrError, Result};

use super::VideoFeatures;

pub const MAGIC: &[u8; 4] = b"FMAT";
const HEADER_LEN: usize = 12;

/// Serializes a matrix. Values are narrowed to `f32`.
pub fn encode_fmat(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_fmat(bytes: &[u8]) -> Result<Mat> {
    if bytes.len() < HEADER_LEN {
        return Err(CcrError::Format(format!(
            "{} bytes is shorter than the FMAT header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(CcrError::Format("missing FMAT magic".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| CcrError::Format(format!("header {rows}x{cols} overflows")))?;
    if payload.len() != expected {
        return Err(CcrError::Truncated(format!(
            "header declares {rows}x{cols} ({expected} bytes) but payload has {} bytes",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Mat::from_vec(rows, cols, data)
}

pub fn read_fmat(path: &Path) -> Result<Mat> {
    let bytes = fs::read(path).map_err(|e| CcrError::io(path, e))?;
    decode_fmat(&bytes)
}

pub fn write_fmat(path: &Path, m: &Mat) -> Result<()> {
    fs::write(path, encode_fmat(m)).map_err(|e| CcrError::io(path, e))
}

/// Loads per-frame features. The video id is the file stem; the duration
/// defaults to one second per frame until a manifest supplies the real one.
pub fn load_features(path: &Path) -> Result<VideoFeatures> {
    let frames = read_fmat(path)?;
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let duration_s = frames.rows() as f64;
    VideoFeatures::new(video_id, frames, duration_s)
}

pub fn write_features(path: &Path, v: &VideoFeatures) -> Result<()> {
    write_fmat(path, &v.frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file_with(rows: u32, cols: u32, values: &[f32]) -> Vec<u8> {
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&rows.to_le_bytes());
        b.extend_from_slice(&cols.to_le_bytes());
        for v in values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn header_forces_shape() {
        let values: Vec<f32> = (0..8).map(|i| i as f32 * 0.5).collect();
        let m = decode_fmat(&file_with(4, 2, &values)).unwrap();
        assert_eq!(m.shape(), (4, 2));
        assert_eq!(m.get(3, 1), 3.5);
    }

    #[test]
    fn exact_byte_layout() {
        let m = Mat::from_vec(1, 2, vec![1.0, -2.0]).unwrap();
        let bytes = encode_fmat(&m);
        assert_eq!(bytes, file_with(1, 2, &[1.0, -2.0]));
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(decode_fmat(b"FMA"), Err(CcrError::Format(_))));
        let mut bad_magic = file_with(2, 2, &[1.0; 4]);
        bad_magic[0] = b'X';
        assert!(matches!(decode_fmat(&bad_magic), Err(CcrError::Format(_))));
        assert!(matches!(
            decode_fmat(&file_with(4, 2, &[1.0; 7])),
            Err(CcrError::Truncated(_))
        ));
        assert!(matches!(
            decode_fmat(&file_with(1, 1, &[1.0; 2])),
            Err(CcrError::Truncated(_))
        ));
    }

    #[test]
    fn load_rejects_degenerate_and_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.fmat");
        std::fs::write(&empty, file_with(0, 2, &[])).unwrap();
        assert!(matches!(load_features(&empty), Err(CcrError::Data(_))));

        let nan = dir.path().join("nan.fmat");
        std::fs::write(&nan, file_with(2, 1, &[1.0, f32::NAN])).unwrap();
        assert!(matches!(load_features(&nan), Err(CcrError::Data(_))));

        let inf = dir.path().join("inf.fmat");
        std::fs::write(&inf, file_with(2, 1, &[f32::INFINITY, 1.0])).unwrap();
        assert!(matches!(load_features(&inf), Err(CcrError::Data(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_features(Path::new("/nonexistent/x.fmat")).unwrap_err();
        assert!(matches!(err, CcrError::Io { .. }));
    }
}
