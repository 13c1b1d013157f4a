//! MVOL / FVOL file formats.
//!
//! Both share a four-line ASCII header followed by a raw payload:
//!
//! ```text
//! MVOL 1
//! nx ny nz
//! sx sy sz
//! BINARY
//! <nx*ny*nz bytes, each 0 or 1, x fastest>
//! ```
//!
//! FVOL uses the magic `FVOL 1` and stores little-endian `f32` values.

use std::fs;
use std::path::Path;

use super::{check_dims, check_spacing, voxel_count, Dims, MaskVolume, ScalarField, Spacing};
use crate::error::{Error, Result};

const MASK_MAGIC: &str = "MVOL 1";
const FIELD_MAGIC: &str = "FVOL 1";

fn header(magic: &str, dims: Dims, spacing: Spacing) -> String {
    format!(
        "{magic}\n{} {} {}\n{} {} {}\nBINARY\n",
        dims[0], dims[1], dims[2], spacing[0], spacing[1], spacing[2]
    )
}

/// Splits off the next `\n`-terminated line, returning `(line, rest)`.
fn next_line(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("truncated header".into()))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::MalformedHeader("header is not ASCII".into()))?;
    Ok((line.trim_end_matches('\r'), &bytes[end + 1..]))
}

fn parse_triple<T: std::str::FromStr>(line: &str, what: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::MalformedHeader(format!(
            "{what} line must hold 3 values, got {line:?}"
        )));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::MalformedHeader(format!("bad {what} value {p:?}")))?,
        );
    }
    match <[T; 3]>::try_from(out) {
        Ok(v) => Ok(v),
        Err(_) => unreachable!(),
    }
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(Dims, Spacing, &'a [u8])> {
    let (line, rest) = next_line(bytes)?;
    if line != magic {
        return Err(Error::MalformedHeader(format!(
            "expected magic {magic:?}, found {line:?}"
        )));
    }
    let (line, rest) = next_line(rest)?;
    let dims: Dims = parse_triple(line, "dimension")?;
    check_dims(dims).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let (line, rest) = next_line(rest)?;
    let spacing: Spacing = parse_triple(line, "spacing")?;
    check_spacing(spacing).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let (line, rest) = next_line(rest)?;
    if line != "BINARY" {
        return Err(Error::MalformedHeader(format!(
            "expected BINARY marker, found {line:?}"
        )));
    }
    Ok((dims, spacing, rest))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, spacing, payload) = parse_header(&bytes, MASK_MAGIC)?;
    let expected = voxel_count(dims);
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    MaskVolume::new(dims, spacing, payload.to_vec())
}

pub fn save_mask(mask: &MaskVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = header(MASK_MAGIC, mask.dims(), mask.spacing()).into_bytes();
    out.extend_from_slice(mask.data());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_field(path: impl AsRef<Path>) -> Result<ScalarField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, spacing, payload) = parse_header(&bytes, FIELD_MAGIC)?;
    let expected = voxel_count(dims);
    if payload.len() != expected * 4 {
        return Err(Error::SizeMismatch {
            expected,
            found: payload.len() / 4,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ScalarField::new(dims, spacing, data)
}

/// Writes a field; values are narrowed to `f32`.
pub fn save_field(field: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = header(FIELD_MAGIC, field.dims(), field.spacing()).into_bytes();
    out.reserve(field.data().len() * 4);
    for &v in field.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mvol");
        let m = MaskVolume::new([2, 2, 1], [1.0, 1.0, 2.0], vec![1, 0, 0, 1]).unwrap();
        save_mask(&m, &path).unwrap();
        let back = load_mask(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.count(), 2);
    }

    #[test]
    fn empty_mask_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.mvol");
        let m = MaskVolume::zeros([3, 2, 2], [1.0, 1.0, 2.0]).unwrap();
        save_mask(&m, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let head = b"MVOL 1\n3 2 2\n1 1 2\nBINARY\n";
        assert_eq!(&bytes[..head.len()], head);
        assert_eq!(bytes.len(), head.len() + 12);
        assert!(bytes[head.len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn short_payload_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.mvol");
        fs::write(&path, b"MVOL 1\n2 2 1\n1 1 1\nBINARY\n\x01\x00\x00").unwrap();
        assert!(matches!(
            load_mask(&path),
            Err(Error::SizeMismatch { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn header_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.mvol");
        fs::write(&path, b"MVOL 2\n2 2 1\n1 1 1\nBINARY\n\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_mask(&path), Err(Error::MalformedHeader(_))));
        fs::write(&path, b"MVOL 1\n2 2\n1 1 1\nBINARY\n\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_mask(&path), Err(Error::MalformedHeader(_))));
        fs::write(&path, b"MVOL 1\n2 2 1\n1 1 1\nBINARY\n\x01\x00\x07\x00").unwrap();
        assert!(matches!(
            load_mask(&path),
            Err(Error::NonBinaryVoxel { index: 2, value: 7 })
        ));
    }

    #[test]
    fn unwritable_path_is_io_failure() {
        let m = MaskVolume::zeros([1, 1, 1], [1.0; 3]).unwrap();
        let err = save_mask(&m, "/nonexistent-dir/for/sure/m.mvol").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn field_round_trip_narrows_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.fvol");
        let f = ScalarField::new([2, 1, 1], [1.0, 1.0, 2.0], vec![0.25, -1.5]).unwrap();
        save_field(&f, &path).unwrap();
        assert_eq!(load_field(&path).unwrap(), f);
        assert!(load_mask(&path).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn mask_round_trip(
            dims in (1usize..9, 1usize..9, 1usize..6),
            sx in 0.1f64..4.0,
            sz in 0.1f64..4.0,
            seed in any::<u64>(),
        ) {
            let dims = [dims.0, dims.1, dims.2];
            let mut state = seed | 1;
            let data = (0..voxel_count(dims)).map(|_| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                (state & 1) as u8
            }).collect();
            let m = MaskVolume::new(dims, [sx, 1.0, sz], data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.mvol");
            save_mask(&m, &path).unwrap();
            prop_assert_eq!(load_mask(&path).unwrap(), m);
        }
    }
}
