//! Binary containers and JSON interchange.
//!
//! All containers are little-endian and start with a four-byte magic and a
//! u32 version (currently 1).
//!
//! * `EDMD`: count u32, n u32, hurst f64 (NaN when unknown), flags u32
//!   (bit 0: squared), then `count·n·n` f32 row-major.
//! * `TRAJ`: count u32, n u32, dim u32, hurst f64, step_scale f64, then
//!   `count·n·dim` f32.
//! * `MASK`: count u32, n u32, then each row bit-packed MSB first and padded
//!   to a byte boundary.
//! * `PCAE`: input dimension u32, components u32, then the mean and the
//!   basis rows as f32.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::edm::{DistanceMatrix, Mask};
use crate::error::{Error, Result};
use crate::fbm::Trajectory;

pub const VERSION: u32 = 1;

/// Write through a temporary sibling file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::Io(e)
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != magic {
            return Err(Error::Format(format!("not a {what} file")));
        }
        let mut r = Self { bytes, at: 4, what };
        let v = r.u32()?;
        if v != VERSION {
            return Err(Error::Format(format!("unsupported {what} version {v}")));
        }
        Ok(r)
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let s = self
            .at
            .checked_add(len)
            .and_then(|end| self.bytes.get(self.at..end))
            .ok_or_else(|| Error::Format(format!("truncated {} file", self.what)))?;
        self.at += len;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("{} size overflows", self.what)))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after {} data",
                self.bytes.len() - self.at,
                self.what
            )));
        }
        Ok(())
    }
}

fn header(magic: &[u8; 4]) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// A batch of equally sized matrices as stored in an `EDMD` container.
#[derive(Debug, Clone, PartialEq)]
pub struct EdmBatch {
    pub n: usize,
    pub hurst: Option<f64>,
    pub squared: bool,
    pub matrices: Vec<DMatrix<f64>>,
}

impl EdmBatch {
    pub fn from_distance_matrices(ms: &[DistanceMatrix], hurst: Option<f64>) -> Result<Self> {
        let n = ms.first().map_or(0, |m| m.n());
        let squared = ms.first().is_none_or(|m| m.is_squared());
        if ms.iter().any(|m| m.n() != n || m.is_squared() != squared) {
            return Err(Error::invalid("matrices in a batch must share size and squaring"));
        }
        Ok(Self {
            n,
            hurst,
            squared,
            matrices: ms.iter().map(|m| m.matrix().clone()).collect(),
        })
    }

    /// Checked conversion of every matrix.
    pub fn distance_matrices(&self) -> Result<Vec<DistanceMatrix>> {
        self.matrices
            .iter()
            .map(|m| DistanceMatrix::new(m.clone(), self.squared))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = header(b"EDMD");
        put_u32(&mut out, self.matrices.len())?;
        put_u32(&mut out, self.n)?;
        out.extend_from_slice(&self.hurst.unwrap_or(f64::NAN).to_le_bytes());
        put_u32(&mut out, self.squared as usize)?;
        for m in &self.matrices {
            if m.nrows() != self.n || m.ncols() != self.n {
                return Err(Error::shape(
                    format!("{0}x{0}", self.n),
                    format!("{}x{}", m.nrows(), m.ncols()),
                ));
            }
            put_f32s(&mut out, (0..self.n * self.n).map(|k| m[(k / self.n, k % self.n)]));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, b"EDMD", "EDMD")?;
        let count = r.u32()? as usize;
        let n = r.u32()? as usize;
        let hurst = r.f64()?;
        let flags = r.u32()?;
        let mut matrices = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let v = r.f32s(n * n)?;
            matrices.push(DMatrix::from_row_slice(n, n, &v));
        }
        r.finish()?;
        Ok(Self {
            n,
            hurst: (!hurst.is_nan()).then_some(hurst),
            squared: flags & 1 == 1,
            matrices,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Trajectories as stored in a `TRAJ` container.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub n: usize,
    pub dim: usize,
    pub hurst: f64,
    pub step_scale: f64,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryBatch {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = header(b"TRAJ");
        put_u32(&mut out, self.trajectories.len())?;
        put_u32(&mut out, self.n)?;
        put_u32(&mut out, self.dim)?;
        out.extend_from_slice(&self.hurst.to_le_bytes());
        out.extend_from_slice(&self.step_scale.to_le_bytes());
        for t in &self.trajectories {
            if t.len() != self.n || t.dim() != self.dim {
                return Err(Error::shape(
                    format!("{} points in {} dimensions", self.n, self.dim),
                    format!("{} points in {} dimensions", t.len(), t.dim()),
                ));
            }
            put_f32s(&mut out, t.coords().iter().copied());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, b"TRAJ", "TRAJ")?;
        let count = r.u32()? as usize;
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let hurst = r.f64()?;
        let step_scale = r.f64()?;
        let mut trajectories = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            trajectories.push(Trajectory::new(dim, r.f32s(n * dim)?)?);
        }
        r.finish()?;
        Ok(Self {
            n,
            dim,
            hurst,
            step_scale,
            trajectories,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn masks_to_bytes(masks: &[Mask]) -> Result<Vec<u8>> {
    let n = masks.first().map_or(0, |m| m.n());
    let mut out = header(b"MASK");
    put_u32(&mut out, masks.len())?;
    put_u32(&mut out, n)?;
    let row_bytes = n.div_ceil(8);
    for m in masks {
        if m.n() != n {
            return Err(Error::shape(n, m.n()));
        }
        for i in 0..n {
            let mut row = vec![0u8; row_bytes];
            for j in 0..n {
                if m.is_known(i, j) {
                    row[j / 8] |= 0x80 >> (j % 8);
                }
            }
            out.extend_from_slice(&row);
        }
    }
    Ok(out)
}

pub fn masks_from_bytes(bytes: &[u8]) -> Result<Vec<Mask>> {
    let mut r = Reader::new(bytes, b"MASK", "MASK")?;
    let count = r.u32()? as usize;
    let n = r.u32()? as usize;
    let row_bytes = n.div_ceil(8);
    let mut masks = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut bits = Vec::with_capacity(n * n);
        for _ in 0..n {
            let row = r.take(row_bytes)?;
            bits.extend((0..n).map(|j| row[j / 8] & (0x80 >> (j % 8)) != 0));
        }
        masks.push(Mask::from_bits(n, bits)?);
    }
    r.finish()?;
    Ok(masks)
}

pub fn write_masks(path: impl AsRef<Path>, masks: &[Mask]) -> Result<()> {
    write_atomic(path.as_ref(), &masks_to_bytes(masks)?)
}

pub fn read_masks(path: impl AsRef<Path>) -> Result<Vec<Mask>> {
    masks_from_bytes(&fs::read(path)?)
}

/// Stored PCA embedding: mean and orthonormal basis rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaeFile {
    pub mean: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
}

impl PcaeFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let d = self.mean.len();
        let mut out = header(b"PCAE");
        put_u32(&mut out, d)?;
        put_u32(&mut out, self.basis.len())?;
        put_f32s(&mut out, self.mean.iter().copied());
        for row in &self.basis {
            if row.len() != d {
                return Err(Error::shape(d, row.len()));
            }
            put_f32s(&mut out, row.iter().copied());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, b"PCAE", "PCAE")?;
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let mean = r.f32s(d)?;
        let basis = (0..k).map(|_| r.f32s(d)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self { mean, basis })
    }
}

/// Single-matrix JSON interchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<Vec<u8>>>,
}

impl MatrixJson {
    pub fn from_parts(m: Option<&DistanceMatrix>, mask: Option<&Mask>) -> Self {
        Self {
            matrix: m.map(|m| (0..m.n()).map(|i| (0..m.n()).map(|j| m.get(i, j)).collect()).collect()),
            mask: mask.map(|b| {
                (0..b.n())
                    .map(|i| (0..b.n()).map(|j| b.is_known(i, j) as u8).collect())
                    .collect()
            }),
        }
    }

    pub fn distance_matrix(&self) -> Result<Option<DistanceMatrix>> {
        self.matrix.as_deref().map(DistanceMatrix::from_rows).transpose()
    }

    pub fn to_mask(&self) -> Result<Option<Mask>> {
        let Some(rows) = &self.mask else { return Ok(None) };
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("mask rows must form a square matrix"));
        }
        let bits = rows.iter().flatten().map(|&v| v != 0).collect();
        Mask::from_bits(n, bits).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edm::{edm_from_trajectory, random_mask};
    use crate::fbm::{generate_fbm, FbmParams};

    #[test]
    fn edmd_round_trip() {
        let p = FbmParams::new(0.5, 9).unwrap();
        let trajs = generate_fbm(&p, 3, 4).unwrap();
        let ms: Vec<_> = trajs.iter().map(edm_from_trajectory).collect();
        let batch = EdmBatch::from_distance_matrices(&ms, Some(0.5)).unwrap();
        let back = EdmBatch::from_bytes(&batch.to_bytes().unwrap()).unwrap();
        assert_eq!(back.n, 9);
        assert_eq!(back.hurst, Some(0.5));
        assert!(back.squared);
        for (a, b) in back.matrices.iter().zip(&batch.matrices) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        // f32 rounding keeps symmetry, so the strict conversion succeeds
        assert_eq!(back.distance_matrices().unwrap().len(), 3);
    }

    #[test]
    fn edmd_header_layout() {
        let batch = EdmBatch {
            n: 2,
            hurst: None,
            squared: false,
            matrices: vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.5, 1.5, 0.0])],
        };
        let b = batch.to_bytes().unwrap();
        assert_eq!(&b[..4], b"EDMD");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
        assert!(f64::from_le_bytes(b[16..24].try_into().unwrap()).is_nan());
        assert_eq!(u32::from_le_bytes(b[24..28].try_into().unwrap()), 0);
        assert_eq!(f32::from_le_bytes(b[32..36].try_into().unwrap()), 1.5);
        assert_eq!(b.len(), 28 + 16);
        let back = EdmBatch::from_bytes(&b).unwrap();
        assert_eq!(back.hurst, None);
        assert!(!back.squared);
    }

    #[test]
    fn truncated_containers_fail() {
        let batch = EdmBatch {
            n: 2,
            hurst: Some(0.3),
            squared: true,
            matrices: vec![DMatrix::zeros(2, 2); 2],
        };
        let b = batch.to_bytes().unwrap();
        for cut in 0..b.len() {
            assert!(EdmBatch::from_bytes(&b[..cut]).is_err());
        }
        let mut long = b.clone();
        long.push(0);
        assert!(EdmBatch::from_bytes(&long).is_err());
    }

    #[test]
    fn traj_round_trip() {
        let p = FbmParams::new(0.3, 7).unwrap();
        let trajs = generate_fbm(&p, 2, 1).unwrap();
        let batch = TrajectoryBatch {
            n: 7,
            dim: 3,
            hurst: 0.3,
            step_scale: p.step_scale,
            trajectories: trajs,
        };
        let back = TrajectoryBatch::from_bytes(&batch.to_bytes().unwrap()).unwrap();
        assert_eq!(back.hurst, 0.3);
        assert_eq!(back.trajectories.len(), 2);
        assert_eq!(
            back.trajectories[1].point(6)[2],
            batch.trajectories[1].point(6)[2] as f32 as f64
        );
    }

    #[test]
    fn mask_packing() {
        let masks: Vec<_> = (0..3).map(|k| random_mask(11, 0.4, k).unwrap()).collect();
        let b = masks_to_bytes(&masks).unwrap();
        // two bytes per row of 11
        assert_eq!(b.len(), 16 + 3 * 11 * 2);
        assert_eq!(masks_from_bytes(&b).unwrap(), masks);

        let one = Mask::from_fn(3, |i, j| (i, j) == (0, 1));
        let b = masks_to_bytes(&[one]).unwrap();
        assert_eq!(&b[16..], &[0b0100_0000, 0b1000_0000, 0]);
    }

    #[test]
    fn pcae_round_trip() {
        let f = PcaeFile {
            mean: vec![1.0, 2.0, 3.0],
            basis: vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.5, 0.25]],
        };
        assert_eq!(PcaeFile::from_bytes(&f.to_bytes().unwrap()).unwrap(), f);
    }

    #[test]
    fn json_interchange() {
        let text = r#"{"matrix": [[0, 1, 4], [1, 0, 1], [4, 1, 0]], "mask": [[0,1,0],[1,0,1],[0,1,0]]}"#;
        let j: MatrixJson = serde_json::from_str(text).unwrap();
        let m = j.distance_matrix().unwrap().unwrap();
        assert_eq!(m.get(0, 2), 4.0);
        let b = j.to_mask().unwrap().unwrap();
        assert!(b.is_known(1, 2) && !b.is_known(0, 2));
        let again = MatrixJson::from_parts(Some(&m), Some(&b));
        assert_eq!(again, j);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
