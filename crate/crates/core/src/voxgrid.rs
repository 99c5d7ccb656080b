//! Sparse voxel tensors over a bounded integer grid and the dense BEV map type.
//!
//! A [`SparseVoxelTensor`] keeps its active coordinates sorted lexicographically
//! by `(i, j, k)`, with features stored contiguously in the same order. A hash
//! index keyed by the packed coordinate gives O(1) neighbor lookups for the
//! convolution rulebooks. Because of the ordering, every BEV column `(i, j)`
//! occupies one contiguous run of entries.

use std::collections::HashMap;
use std::ops::Range;

use crate::error::{Error, Result};

/// Largest extent along any axis; coordinates are packed into 21 bits each.
pub const MAX_EXTENT: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coord {
    pub i: u32,
    pub j: u32,
    pub k: u32,
}

impl Coord {
    pub const fn new(i: u32, j: u32, k: u32) -> Self {
        Coord { i, j, k }
    }

    #[inline]
    pub(crate) fn pack(self) -> u64 {
        ((self.i as u64) << 42) | ((self.j as u64) << 21) | self.k as u64
    }

    pub fn as_array(self) -> [usize; 3] {
        [self.i as usize, self.j as usize, self.k as usize]
    }
}

impl From<(u32, u32, u32)> for Coord {
    fn from((i, j, k): (u32, u32, u32)) -> Self {
        Coord { i, j, k }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    /// World position (meters) of the minimum corner of cell (0, 0, 0).
    pub origin: [f64; 3],
    /// Meters per cell along x, y, z.
    pub voxel_size: [f64; 3],
    /// Cell counts (Nx, Ny, Nz).
    pub extents: [usize; 3],
}

impl GridGeometry {
    pub fn new(origin: [f64; 3], voxel_size: [f64; 3], extents: [usize; 3]) -> Result<Self> {
        let g = GridGeometry {
            origin,
            voxel_size,
            extents,
        };
        g.validate()?;
        Ok(g)
    }

    /// Unit voxels at the origin. Used for synthetic tensors and loaded tensor files.
    pub fn from_extents(extents: [usize; 3]) -> Result<Self> {
        Self::new([0.0; 3], [1.0; 3], extents)
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            let s = self.voxel_size[axis];
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidGeometry(format!(
                    "voxel_size[{axis}] = {s} must be finite and strictly positive"
                )));
            }
            if !self.origin[axis].is_finite() {
                return Err(Error::InvalidGeometry(format!("origin[{axis}] is not finite")));
            }
            let n = self.extents[axis];
            if n == 0 || n > MAX_EXTENT {
                return Err(Error::InvalidGeometry(format!(
                    "extents[{axis}] = {n} must be in 1..={MAX_EXTENT}"
                )));
            }
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        self.extents[0]
    }
    pub fn ny(&self) -> usize {
        self.extents[1]
    }
    pub fn nz(&self) -> usize {
        self.extents[2]
    }

    pub fn cell_count(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn contains(&self, c: Coord) -> bool {
        (c.i as usize) < self.extents[0]
            && (c.j as usize) < self.extents[1]
            && (c.k as usize) < self.extents[2]
    }

    /// World-space center of a cell.
    pub fn voxel_center(&self, c: Coord) -> [f64; 3] {
        let idx = c.as_array();
        std::array::from_fn(|a| self.origin[a] + (idx[a] as f64 + 0.5) * self.voxel_size[a])
    }

    /// Geometry after a strided downsampling: extents become `ceil(n / s)`.
    pub fn downsampled(&self, stride: [usize; 3]) -> Result<Self> {
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::Shape(format!("stride {stride:?} has a zero component")));
        }
        Self::new(
            self.origin,
            std::array::from_fn(|a| self.voxel_size[a] * stride[a] as f64),
            std::array::from_fn(|a| self.extents[a].div_ceil(stride[a])),
        )
    }

    fn check(&self, c: Coord) -> Result<()> {
        if self.contains(c) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                coord: c.as_array(),
                extents: self.extents,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct SparseVoxelTensor {
    geometry: GridGeometry,
    channels: usize,
    coords: Vec<Coord>,
    features: Vec<f64>,
    index: HashMap<u64, usize>,
}

impl PartialEq for SparseVoxelTensor {
    fn eq(&self, other: &Self) -> bool {
        self.geometry == other.geometry
            && self.channels == other.channels
            && self.coords == other.coords
            && self.features == other.features
    }
}

impl SparseVoxelTensor {
    pub fn new(geometry: GridGeometry, channels: usize) -> Result<Self> {
        geometry.validate()?;
        if channels == 0 {
            return Err(Error::Shape("channel count must be positive".into()));
        }
        Ok(SparseVoxelTensor {
            geometry,
            channels,
            coords: Vec::new(),
            features: Vec::new(),
            index: HashMap::new(),
        })
    }

    /// Builds a tensor from unordered `(coord, feature)` parts. Duplicate
    /// coordinates keep the last occurrence.
    pub fn from_entries<I>(geometry: GridGeometry, channels: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Coord, Vec<f64>)>,
    {
        let mut t = Self::new(geometry, channels)?;
        let mut parts: Vec<(Coord, Vec<f64>)> = Vec::new();
        for (c, f) in entries {
            geometry.check(c)?;
            if f.len() != channels {
                return Err(Error::Shape(format!(
                    "feature length {} != channels {channels}",
                    f.len()
                )));
            }
            parts.push((c, f));
        }
        // stable sort keeps insertion order among duplicates; keep the last one
        parts.sort_by_key(|(c, _)| *c);
        let mut deduped: Vec<(Coord, Vec<f64>)> = Vec::with_capacity(parts.len());
        for p in parts {
            match deduped.last_mut() {
                Some(last) if last.0 == p.0 => *last = p,
                _ => deduped.push(p),
            }
        }
        t.coords.reserve(deduped.len());
        t.features.reserve(deduped.len() * channels);
        for (c, f) in deduped {
            t.coords.push(c);
            t.features.extend_from_slice(&f);
        }
        t.rebuild_index();
        Ok(t)
    }

    /// Builds a tensor from coordinates already sorted and unique, with a flat
    /// feature buffer aligned to them.
    pub(crate) fn from_sorted_parts(
        geometry: GridGeometry,
        channels: usize,
        coords: Vec<Coord>,
        features: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(coords.len() * channels, features.len());
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        let mut t = SparseVoxelTensor {
            geometry,
            channels,
            coords,
            features,
            index: HashMap::new(),
        };
        t.rebuild_index();
        t
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .coords
            .iter()
            .enumerate()
            .map(|(n, c)| (c.pack(), n))
            .collect();
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Writes a feature vector, overwriting any existing entry.
    pub fn set_voxel(&mut self, coord: Coord, feat: &[f64]) -> Result<()> {
        self.geometry.check(coord)?;
        if feat.len() != self.channels {
            return Err(Error::Shape(format!(
                "feature length {} != channels {}",
                feat.len(),
                self.channels
            )));
        }
        let c = self.channels;
        if let Some(&n) = self.index.get(&coord.pack()) {
            self.features[n * c..(n + 1) * c].copy_from_slice(feat);
            return Ok(());
        }
        let pos = self.coords.partition_point(|x| *x < coord);
        self.coords.insert(pos, coord);
        let tail = self.features.split_off(pos * c);
        self.features.extend_from_slice(feat);
        self.features.extend(tail);
        if pos + 1 == self.coords.len() {
            self.index.insert(coord.pack(), pos);
        } else {
            for n in pos..self.coords.len() {
                self.index.insert(self.coords[n].pack(), n);
            }
        }
        Ok(())
    }

    pub fn get(&self, coord: Coord) -> Option<&[f64]> {
        self.index_of(coord).map(|n| self.feature(n))
    }

    /// Position of `coord` in the sorted entry order.
    #[inline]
    pub fn index_of(&self, coord: Coord) -> Option<usize> {
        if !self.geometry.contains(coord) {
            return None;
        }
        self.index.get(&coord.pack()).copied()
    }

    #[inline]
    pub fn feature(&self, n: usize) -> &[f64] {
        &self.features[n * self.channels..(n + 1) * self.channels]
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    /// Flat feature buffer, entry-major, aligned with [`coords`](Self::coords).
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn iter(&self) -> impl Iterator<Item = (Coord, &[f64])> + '_ {
        self.coords
            .iter()
            .copied()
            .zip(self.features.chunks_exact(self.channels))
    }

    /// Same active set and geometry with a different feature buffer.
    pub fn with_features(&self, channels: usize, features: Vec<f64>) -> Result<Self> {
        if channels == 0 || features.len() != self.coords.len() * channels {
            return Err(Error::Shape(format!(
                "{} features for {} entries x {channels} channels",
                features.len(),
                self.coords.len()
            )));
        }
        Ok(SparseVoxelTensor {
            geometry: self.geometry,
            channels,
            coords: self.coords.clone(),
            features,
            index: self.index.clone(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        SparseVoxelTensor {
            features: vec![0.0; self.features.len()],
            ..self.clone()
        }
    }

    /// True if both tensors have the same geometry and active coordinate set.
    pub fn same_support(&self, other: &Self) -> bool {
        self.geometry.extents == other.geometry.extents && self.coords == other.coords
    }

    /// Entries of column `(i, j)` as `(k, feature)` pairs, ascending in `k`.
    pub fn column(&self, i: usize, j: usize) -> Result<Vec<(usize, &[f64])>> {
        let e = self.geometry.extents;
        if i >= e[0] || j >= e[1] {
            return Err(Error::OutOfBounds {
                coord: [i, j, 0],
                extents: e,
            });
        }
        let lo = Coord::new(i as u32, j as u32, 0);
        let start = self.coords.partition_point(|c| *c < lo);
        let end = start
            + self.coords[start..]
                .iter()
                .take_while(|c| c.i as usize == i && c.j as usize == j)
                .count();
        Ok((start..end)
            .map(|n| (self.coords[n].k as usize, self.feature(n)))
            .collect())
    }

    /// Contiguous entry ranges of every occupied column, in `(i, j)` order.
    pub fn column_runs(&self) -> Vec<ColumnRun> {
        let mut runs = Vec::new();
        let mut start = 0;
        while start < self.coords.len() {
            let c0 = self.coords[start];
            let mut end = start + 1;
            while end < self.coords.len() && self.coords[end].i == c0.i && self.coords[end].j == c0.j {
                end += 1;
            }
            runs.push(ColumnRun {
                i: c0.i as usize,
                j: c0.j as usize,
                entries: start..end,
            });
            start = end;
        }
        runs
    }

    pub fn densify(&self) -> DenseVolume {
        let e = self.geometry.extents;
        let mut v = DenseVolume::zeros(e, self.channels);
        for (c, f) in self.iter() {
            v.cell_mut(c.i as usize, c.j as usize, c.k as usize)
                .copy_from_slice(f);
        }
        v
    }

    /// Inverse of [`densify`](Self::densify) for nonzero cells: every cell with
    /// at least one nonzero channel becomes an entry.
    pub fn sparsify(geometry: GridGeometry, dense: &DenseVolume) -> Result<Self> {
        if dense.extents != geometry.extents {
            return Err(Error::Shape(format!(
                "dense extents {:?} != geometry extents {:?}",
                dense.extents, geometry.extents
            )));
        }
        let [nx, ny, nz] = dense.extents;
        let ch = dense.channels;
        let mut coords = Vec::new();
        let mut features = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let f = dense.cell(i, j, k);
                    if f.iter().any(|&x| x != 0.0) {
                        coords.push(Coord::new(i as u32, j as u32, k as u32));
                        features.extend_from_slice(f);
                    }
                }
            }
        }
        Self::new(geometry, ch)?;
        Ok(Self::from_sorted_parts(geometry, ch, coords, features))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnRun {
    pub i: usize,
    pub j: usize,
    pub entries: Range<usize>,
}

/// Dense Nx x Ny x Nz x C array, laid out `((i * Ny + j) * Nz + k) * C + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVolume {
    pub extents: [usize; 3],
    pub channels: usize,
    pub values: Vec<f64>,
}

impl DenseVolume {
    pub fn zeros(extents: [usize; 3], channels: usize) -> Self {
        DenseVolume {
            extents,
            channels,
            values: vec![0.0; extents.iter().product::<usize>() * channels],
        }
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        ((i * self.extents[1] + j) * self.extents[2] + k) * self.channels
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let o = self.offset(i, j, k);
        &self.values[o..o + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, i: usize, j: usize, k: usize) -> &mut [f64] {
        let o = self.offset(i, j, k);
        &mut self.values[o..o + self.channels]
    }
}

/// Dense 2D feature map over the (X, Y) grid, laid out `(i * height + j) * C + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBevMap {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

impl DenseBevMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        DenseBevMap {
            width,
            height,
            channels,
            values: vec![0.0; width * height * channels],
        }
    }

    pub fn from_values(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{channels} map",
                values.len()
            )));
        }
        Ok(DenseBevMap {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn extents(&self) -> [usize; 2] {
        [self.width, self.height]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.height + j) * self.channels;
        &self.values[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = (i * self.height + j) * self.channels;
        &mut self.values[o..o + self.channels]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(DenseBevMap { values, ..*self })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        self.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if !self.same_shape(other) {
            return f64::INFINITY;
        }
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
