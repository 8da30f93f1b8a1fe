//! The IDX container used by MNIST and its relatives.
//!
//! Header: two zero bytes, an element-type byte, a rank byte, then one
//! big-endian `u32` per dimension. Only unsigned-byte payloads (`0x08`) are
//! supported.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const UBYTE: u8 = 0x08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    let err = |offset: usize, reason: String| Error::Idx {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    if bytes.len() < 4 {
        return Err(err(bytes.len(), "file ends inside the magic number".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != UBYTE {
        return Err(err(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(err(3, "rank 0".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for d in 0..rank {
        let at = 4 + 4 * d;
        let b = bytes
            .get(at..at + 4)
            .ok_or_else(|| err(bytes.len(), format!("file ends inside dimension {d}")))?;
        dims.push(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize);
    }
    let start = 4 + 4 * rank;
    let n: usize = dims.iter().product();
    let end = start + n;
    if bytes.len() < end {
        return Err(err(
            bytes.len(),
            format!("payload truncated: expected {n} bytes from offset {start}"),
        ));
    }
    if bytes.len() > end {
        return Err(err(end, format!("{} trailing bytes", bytes.len() - end)));
    }
    Ok(IdxArray {
        dims,
        data: bytes[start..end].to_vec(),
    })
}

pub fn read(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingDataset(path.display().to_string()),
        _ => e.into(),
    })?;
    parse(&bytes, path)
}

pub fn encode(array: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, UBYTE, array.dims.len() as u8];
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

pub fn write(path: &Path, array: &IdxArray) -> Result<()> {
    fs::write(path, encode(array))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    // Two 2×2 images written out byte by byte.
    const FIXTURE: [u8; 24] = [
        0x00, 0x00, 0x08, 0x03, // magic
        0x00, 0x00, 0x00, 0x02, // n
        0x00, 0x00, 0x00, 0x02, // rows
        0x00, 0x00, 0x00, 0x02, // cols
        0x00, 0x7f, 0x80, 0xff, // image 0
        0x01, 0x02, 0x03, 0x04, // image 1
    ];

    #[test]
    fn fixture_decodes_exactly() {
        let a = parse(&FIXTURE, Path::new("fixture")).unwrap();
        assert_eq!(a.dims, vec![2, 2, 2]);
        assert_eq!(a.data, vec![0, 127, 128, 255, 1, 2, 3, 4]);
    }

    #[test]
    fn truncated_payload_names_the_offset() {
        match parse(&FIXTURE[..23], Path::new("fixture")) {
            Err(Error::Idx { offset, .. }) => assert_eq!(offset, 23),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_header_and_bad_magic() {
        assert!(matches!(
            parse(&FIXTURE[..10], Path::new("f")),
            Err(Error::Idx { offset: 10, .. })
        ));
        let mut bad = FIXTURE;
        bad[0] = 1;
        assert!(matches!(parse(&bad, Path::new("f")), Err(Error::Idx { offset: 0, .. })));
        let mut float = FIXTURE;
        float[2] = 0x0d;
        assert!(matches!(
            parse(&float, Path::new("f")),
            Err(Error::Idx { offset: 2, .. })
        ));
    }

    #[test]
    fn encode_round_trips() {
        let a = parse(&FIXTURE, Path::new("fixture")).unwrap();
        assert_eq!(encode(&a), FIXTURE.to_vec());
    }

    #[test]
    fn missing_file_is_a_dataset_error() {
        assert!(matches!(
            read(Path::new("/nonexistent/x-idx3-ubyte")),
            Err(Error::MissingDataset(_))
        ));
    }
}
