//! Minimal NPY v1.0 reader/writer for 2-D little-endian f64 C-order arrays.
//!
//! This covers exactly the `poses_bounds.npy` layout (N x 17 float64) and
//! errors on everything else rather than guessing.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

pub fn write_f64_2d(path: &Path, arr: &Array2<f64>) -> Result<()> {
    let (rows, cols) = arr.dim();
    let dict = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': ({rows}, {cols}), }}");
    // Total header (magic + version + len field + dict + padding) must be a
    // multiple of 64, terminated by a newline.
    let prefix_len = 6 + 2 + 2;
    let unpadded = prefix_len + dict.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    let mut buf = Vec::new();
    buf.extend_from_slice(NPY_MAGIC);
    buf.extend_from_slice(&[1, 0]);
    buf.extend_from_slice(&((dict.len() + padding + 1) as u16).to_le_bytes());
    buf.extend_from_slice(dict.as_bytes());
    buf.extend(std::iter::repeat_n(b' ', padding));
    buf.push(b'\n');
    for v in arr.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_f64_2d(path: &Path) -> Result<Array2<f64>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: String| Error::archive(path, reason);
    if buf.len() < 10 || &buf[..6] != NPY_MAGIC {
        return Err(fail("not an NPY file".into()));
    }
    if buf[6] != 1 {
        return Err(fail(format!("NPY major version {} unsupported", buf[6])));
    }
    let header_len = u16::from_le_bytes([buf[8], buf[9]]) as usize;
    let data_start = 10 + header_len;
    if buf.len() < data_start {
        return Err(fail("truncated NPY header".into()));
    }
    let header = std::str::from_utf8(&buf[10..data_start])
        .map_err(|_| fail("NPY header is not UTF-8".into()))?;
    if !header.contains("'descr': '<f8'") {
        return Err(fail("only little-endian f64 arrays are supported".into()));
    }
    if !header.contains("'fortran_order': False") {
        return Err(fail("only C-order arrays are supported".into()));
    }
    let shape = parse_shape(header).ok_or_else(|| fail("cannot parse NPY shape".into()))?;
    let (rows, cols) = shape;
    let n = rows * cols;
    let bytes = &buf[data_start..];
    if bytes.len() < n * 8 {
        return Err(fail(format!("payload too short for shape ({rows}, {cols})")));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in bytes[..n * 8].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| fail(format!("shape error: {e}")))
}

fn parse_shape(header: &str) -> Option<(usize, usize)> {
    let start = header.find("'shape': (")? + "'shape': (".len();
    let end = header[start..].find(')')? + start;
    let mut parts = header[start..end].split(',').filter_map(|s| {
        let s = s.trim();
        if s.is_empty() { None } else { s.parse::<usize>().ok() }
    });
    let rows = parts.next()?;
    let cols = parts.next()?;
    if parts.next().is_some() {
        return None; // only 2-D supported
    }
    Some((rows, cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses_bounds.npy");
        let arr = Array2::from_shape_fn((3, 17), |(i, j)| i as f64 * 100.0 + j as f64 * 0.5);
        write_f64_2d(&path, &arr).unwrap();
        let back = read_f64_2d(&path).unwrap();
        assert_eq!(back, arr);
        // Header block is 64-byte aligned per the NPY spec.
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
    }

    #[test]
    fn rejects_wrong_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.npy");
        write_f64_2d(&path, &array![[1.0, 2.0]]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let pos = bytes.windows(4).position(|w| w == b"<f8'").unwrap();
        bytes[pos + 1] = b'f';
        bytes[pos + 2] = b'4';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_f64_2d(&path).is_err());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.npy");
        std::fs::write(&path, b"hello world").unwrap();
        assert!(read_f64_2d(&path).is_err());
    }
}
