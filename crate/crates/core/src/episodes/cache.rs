//! Binary dataset container.
//!
//! Layout, all integers little-endian: magic `CSND`, `u32` version, `u32`
//! rank, `u64` extents of the sample shape, `u64` class count, then per class
//! `u64` id, `u8` split tag, `u64` sample count and the samples as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ClassRecord, Dataset, Split};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"CSND";
pub const DATASET_VERSION: u32 = 1;

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(ds.sample_shape().len() as u32).to_le_bytes())?;
    for &e in ds.sample_shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    w.write_all(&(ds.classes().len() as u64).to_le_bytes())?;
    for c in ds.classes() {
        w.write_all(&(c.id as u64).to_le_bytes())?;
        w.write_all(&[c.split.tag()])?;
        w.write_all(&(c.len() as u64).to_le_bytes())?;
        for v in c.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!("{} is not a dataset cache", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("dataset cache version {version}, expected {DATASET_VERSION}")));
    }
    let rank = read_u32(&mut r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("implausible sample rank {rank}")));
    }
    let shape = (0..rank).map(|_| read_u64(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let sample_len: usize = shape.iter().product();
    let n = read_u64(&mut r)? as usize;
    let mut classes = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let id = read_u64(&mut r)? as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let split = Split::from_tag(tag[0]).ok_or_else(|| Error::Format(format!("bad split tag {}", tag[0])))?;
        let count = read_u64(&mut r)? as usize;
        let mut bytes = vec![0u8; count * sample_len * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        classes.push(ClassRecord::new(id, split, sample_len, data)?);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after dataset".into()));
    }
    Dataset::new(shape, classes)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{synth_family, SynthFamilyConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = synth_family(&SynthFamilyConfig {
            dim: 3,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        let bits = |d: &Dataset| -> Vec<u32> { d.classes().iter().flat_map(|c| c.data().iter().map(|v| v.to_bits())).collect() };
        assert_eq!(bits(&back), bits(&ds));
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"NOPE1234").unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format(_))));

        let ds = synth_family(&SynthFamilyConfig { dim: 2, ..Default::default() }).unwrap();
        write_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_dataset(&path).is_err());
    }
}
