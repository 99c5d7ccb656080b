//! `SVT1` sparse tensor files: magic, `u32` Nx Ny Nz C count, then per voxel
//! `u32` i j k followed by C `f64` features. All little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::voxgrid::{Coord, GridGeometry, SparseVoxelTensor};

const MAGIC: &[u8; 4] = b"SVT1";

pub fn tensor_to_bytes(t: &SparseVoxelTensor) -> Vec<u8> {
    let c = t.channels();
    let mut out = Vec::with_capacity(24 + t.len() * (12 + 8 * c));
    out.extend_from_slice(MAGIC);
    for v in t.geometry().extents.iter().copied().chain([c, t.len()]) {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (coord, f) in t.iter() {
        for v in [coord.i, coord.j, coord.k] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for x in f {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Parses an `SVT1` buffer. The geometry has unit voxels at the origin.
pub fn read_tensor_bytes(bytes: &[u8]) -> Result<SparseVoxelTensor> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("missing SVT1 magic".into()));
    }
    let extents = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let channels = r.u32()? as usize;
    let count = r.u32()? as usize;
    let record = 12 + 8 * channels;
    if bytes.len() - r.pos != count * record {
        return Err(Error::Format(format!(
            "expected {} bytes of voxel records, found {}",
            count * record,
            bytes.len() - r.pos
        )));
    }
    let geometry = GridGeometry::from_extents(extents).map_err(|e| Error::Format(e.to_string()))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let c = Coord::new(r.u32()?, r.u32()?, r.u32()?);
        let f = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        entries.push((c, f));
    }
    let t = SparseVoxelTensor::from_entries(geometry, channels, entries)?;
    if t.len() != count {
        return Err(Error::Format("duplicate voxel coordinates".into()));
    }
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &SparseVoxelTensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, tensor_to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<SparseVoxelTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("truncated tensor file".into()))?;
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
