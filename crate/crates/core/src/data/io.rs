//! Binary dataset files: `EFATDS1\n`, an ASCII `n d num_classes\n` header,
//! `n*d` little-endian f64 features (row-major), then `n` little-endian u16
//! labels.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"EFATDS1\n";

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    if ds.num_classes() > u16::MAX as usize + 1 {
        return Err(Error::Format("too many classes for u16 labels".into()));
    }
    w.write_all(DATASET_MAGIC)?;
    writeln!(w, "{} {} {}", ds.len(), ds.dim(), ds.num_classes())?;
    for v in ds.features().data() {
        w.write_all(&v.to_le_bytes())?;
    }
    for &y in ds.labels() {
        w.write_all(&(y as u16).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn truncated(e: std::io::Error, what: &str) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format(format!("truncated dataset file ({what})"))
    } else {
        Error::Io(e)
    }
}

pub fn read_dataset<R: Read>(r: R) -> Result<Dataset> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| truncated(e, "magic"))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not an EFATDS1 dataset".into()));
    }
    let mut header = Vec::new();
    r.by_ref().take(128).read_until(b'\n', &mut header)?;
    if header.last() != Some(&b'\n') {
        return Err(Error::Format("missing or overlong header line".into()));
    }
    let header = std::str::from_utf8(&header)
        .map_err(|_| Error::Format("header is not ASCII".into()))?;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format(format!("bad header {:?}", header.trim_end())))?;
    let [n, d, c] = fields[..] else {
        return Err(Error::Format(format!("header needs 3 fields, got {:?}", header.trim_end())));
    };
    if d == 0 || c == 0 {
        return Err(Error::Format("dimension and class count must be positive".into()));
    }
    let total = n
        .checked_mul(d)
        .ok_or_else(|| Error::Format("header sizes overflow".into()))?;

    let mut data = Vec::with_capacity(total.min(1 << 24));
    let mut buf = [0u8; 8];
    for _ in 0..total {
        r.read_exact(&mut buf).map_err(|e| truncated(e, "features"))?;
        data.push(f64::from_le_bytes(buf));
    }
    let mut labels = Vec::with_capacity(n.min(1 << 24));
    let mut lb = [0u8; 2];
    for _ in 0..n {
        r.read_exact(&mut lb).map_err(|e| truncated(e, "labels"))?;
        labels.push(u16::from_le_bytes(lb) as usize);
    }
    let features = Tensor::new(vec![n, d], data).map_err(|e| Error::Format(e.to_string()))?;
    Dataset::new(features, labels, c).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(ds, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;

    #[test]
    fn round_trip_bitwise() {
        let ds = make_blobs(3, 4, 5, 0.3, 1).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert!(buf.starts_with(b"EFATDS1\n15 4 3\n"));
        assert_eq!(read_dataset(&buf[..]).unwrap(), ds);
    }

    #[test]
    fn empty_round_trips() {
        let ds = Dataset::empty(7, 3);
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(&buf[..]).unwrap(), ds);
    }

    #[test]
    fn truncation_and_bad_magic() {
        let ds = make_blobs(2, 2, 3, 0.3, 1).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        for cut in [0, 5, 10, buf.len() - 1] {
            assert!(matches!(read_dataset(&buf[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = buf.clone();
        bad[3] = b'X';
        assert!(matches!(read_dataset(&bad[..]), Err(Error::Format(_))));
    }

    #[test]
    fn out_of_range_label_is_format_error() {
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(b"1 1 2\n");
        buf.extend_from_slice(&0.5f64.to_le_bytes());
        buf.extend_from_slice(&5u16.to_le_bytes());
        assert!(matches!(read_dataset(&buf[..]), Err(Error::Format(_))));
    }
}
