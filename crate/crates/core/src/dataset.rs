//! Binary dataset container and CSV export.
//!
//! Layout: fixed header (magic, version, D, L, N, split counts, a
//! length-prefixed UTF-8 generation-config blob), then row-major
//! little-endian `f32` inputs, then one byte per label.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MUSADSET";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Batched training tensors: stacked Re/Im inputs (`D x 2L`) and binary
/// label matrix (`D x N`), split train/validation/test by row ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f32>,
    pub labels: Array2<u8>,
    pub split: SplitCounts,
    /// Generation config as text, embedded for provenance.
    pub config_blob: String,
}

impl Dataset {
    pub fn size(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn input_width(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn n_devices(&self) -> usize {
        self.labels.ncols()
    }

    pub fn train_inputs(&self) -> ArrayView2<'_, f32> {
        self.inputs.slice(ndarray::s![..self.split.train, ..])
    }

    pub fn train_labels(&self) -> ArrayView2<'_, u8> {
        self.labels.slice(ndarray::s![..self.split.train, ..])
    }

    pub fn val_inputs(&self) -> ArrayView2<'_, f32> {
        let lo = self.split.train;
        self.inputs.slice(ndarray::s![lo..lo + self.split.val, ..])
    }

    pub fn val_labels(&self) -> ArrayView2<'_, u8> {
        let lo = self.split.train;
        self.labels.slice(ndarray::s![lo..lo + self.split.val, ..])
    }

    pub fn test_inputs(&self) -> ArrayView2<'_, f32> {
        let lo = self.split.train + self.split.val;
        self.inputs.slice(ndarray::s![lo.., ..])
    }

    pub fn test_labels(&self) -> ArrayView2<'_, u8> {
        let lo = self.split.train + self.split.val;
        self.labels.slice(ndarray::s![lo.., ..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let d = self.size() as u64;
        let l2 = self.input_width() as u32;
        if l2 % 2 != 0 {
            return Err(Error::Shape("input width must be 2L".into()));
        }
        let n = self.n_devices() as u32;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&d.to_le_bytes())?;
        w.write_all(&(l2 / 2).to_le_bytes())?;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(&(self.split.train as u64).to_le_bytes())?;
        w.write_all(&(self.split.val as u64).to_le_bytes())?;
        w.write_all(&(self.split.test as u64).to_le_bytes())?;
        let blob = self.config_blob.as_bytes();
        w.write_all(&(blob.len() as u64).to_le_bytes())?;
        w.write_all(blob)?;
        for row in self.inputs.axis_iter(Axis(0)) {
            for &v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for row in self.labels.axis_iter(Axis(0)) {
            for &v in row {
                w.write_all(&[v])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let origin = path.display().to_string();
        let fmt = |msg: &str| Error::Format { path: origin.clone(), msg: msg.to_string() };
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let d = read_u64(&mut r)? as usize;
        let l = read_u32(&mut r)? as usize;
        let n = read_u32(&mut r)? as usize;
        let train = read_u64(&mut r)? as usize;
        let val = read_u64(&mut r)? as usize;
        let test = read_u64(&mut r)? as usize;
        if train + val + test != d {
            return Err(fmt("split counts do not sum to D"));
        }
        let blob_len = read_u64(&mut r)? as usize;
        let mut blob = vec![0u8; blob_len];
        r.read_exact(&mut blob)?;
        let config_blob =
            String::from_utf8(blob).map_err(|_| fmt("config blob is not UTF-8"))?;
        let mut inputs = Array2::<f32>::zeros((d, 2 * l));
        let mut buf4 = [0u8; 4];
        for i in 0..d {
            for j in 0..2 * l {
                r.read_exact(&mut buf4)?;
                inputs[[i, j]] = f32::from_le_bytes(buf4);
            }
        }
        let mut labels = Array2::<u8>::zeros((d, n));
        let mut buf1 = [0u8; 1];
        for i in 0..d {
            for j in 0..n {
                r.read_exact(&mut buf1)?;
                labels[[i, j]] = buf1[0];
            }
        }
        Ok(Dataset { inputs, labels, split: SplitCounts { train, val, test }, config_blob })
    }

    /// Human-readable export: one row per snapshot with split tag, inputs
    /// and labels.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let l2 = self.input_width();
        let n = self.n_devices();
        let mut header = vec!["row".to_string(), "split".to_string()];
        header.extend((0..l2 / 2).map(|i| format!("re_{i}")));
        header.extend((0..l2 / 2).map(|i| format!("im_{i}")));
        header.extend((0..n).map(|i| format!("label_{i}")));
        writeln!(w, "{}", header.join(","))?;
        for d in 0..self.size() {
            let split = if d < self.split.train {
                "train"
            } else if d < self.split.train + self.split.val {
                "val"
            } else {
                "test"
            };
            let mut fields = vec![d.to_string(), split.to_string()];
            fields.extend((0..l2).map(|j| format!("{}", self.inputs[[d, j]])));
            fields.extend((0..n).map(|j| self.labels[[d, j]].to_string()));
            writeln!(w, "{}", fields.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        let inputs = Array2::from_shape_fn((12, 4), |(i, j)| (i * 4 + j) as f32 * 0.5 - 3.0);
        let labels = Array2::from_shape_fn((12, 3), |(i, j)| u8::from((i + j) % 2 == 0));
        Dataset {
            inputs,
            labels,
            split: SplitCounts { train: 9, val: 2, test: 1 },
            config_blob: "seed = 7".to_string(),
        }
    }

    #[test]
    fn binary_round_trip_is_byte_identical() {
        let ds = sample();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.mds");
        let p2 = dir.path().join("b.mds");
        ds.save(&p1).unwrap();
        let back = Dataset::load(&p1).unwrap();
        assert_eq!(ds, back);
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn split_views_cover_all_rows() {
        let ds = sample();
        assert_eq!(ds.train_inputs().nrows(), 9);
        assert_eq!(ds.val_inputs().nrows(), 2);
        assert_eq!(ds.test_inputs().nrows(), 1);
        assert_eq!(ds.test_labels()[[0, 0]], ds.labels[[11, 0]]);
    }

    #[test]
    fn csv_export_row_count() {
        let ds = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.csv");
        ds.export_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert!(text.lines().next().unwrap().starts_with("row,split,re_0"));
    }
}
