use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};

const BLOB_MAGIC: &[u8; 4] = b"CKB1";

/// Convolution parameters: weights laid out `[tap][in][out]` with taps in
/// row-major order over the spatial shape, plus one bias per output channel.
///
/// 3D kernels have a spatial shape `[kx, ky, kz]`; 2D kernels `[kx, ky]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    spatial: Vec<usize>,
    in_channels: usize,
    out_channels: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvKernel {
    pub fn zeros(spatial: &[usize], in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::check_shape(spatial, in_channels, out_channels)?;
        let taps: usize = spatial.iter().product();
        Ok(ConvKernel {
            spatial: spatial.to_vec(),
            in_channels,
            out_channels,
            weights: vec![0.0; taps * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        })
    }

    pub fn from_parts(
        spatial: &[usize],
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let mut k = Self::zeros(spatial, in_channels, out_channels)?;
        if weights.len() != k.weights.len() || bias.len() != out_channels {
            return Err(Error::Shape(format!(
                "kernel {spatial:?} {in_channels}->{out_channels} needs {} weights and {out_channels} biases, got {} and {}",
                k.weights.len(),
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Shape("kernel parameters must be finite".into()));
        }
        k.weights = weights;
        k.bias = bias;
        Ok(k)
    }

    /// Weights and biases drawn uniformly from `±sqrt(1 / fan_in)`.
    pub fn init_uniform<R: Rng + ?Sized>(
        spatial: &[usize],
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut k = Self::zeros(spatial, in_channels, out_channels)?;
        let bound = (1.0 / k.fan_in() as f64).sqrt();
        for w in k.weights.iter_mut().chain(k.bias.iter_mut()) {
            *w = rng.gen_range(-bound..bound);
        }
        Ok(k)
    }

    /// Odd cubic kernel whose center tap is the identity matrix.
    pub fn identity3d(size: usize, channels: usize) -> Result<Self> {
        let mut k = Self::zeros(&[size, size, size], channels, channels)?;
        let center = k.taps() / 2;
        for c in 0..channels {
            k.weights[(center * channels + c) * channels + c] = 1.0;
        }
        Ok(k)
    }

    fn check_shape(spatial: &[usize], cin: usize, cout: usize) -> Result<()> {
        if !(spatial.len() == 2 || spatial.len() == 3) {
            return Err(Error::Shape(format!(
                "kernel spatial shape {spatial:?} must be 2D or 3D"
            )));
        }
        if spatial.iter().any(|&s| s == 0) || cin == 0 || cout == 0 {
            return Err(Error::Shape(format!(
                "kernel {spatial:?} {cin}->{cout} has a zero dimension"
            )));
        }
        Ok(())
    }

    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
    pub fn taps(&self) -> usize {
        self.spatial.iter().product()
    }
    pub fn fan_in(&self) -> usize {
        self.taps() * self.in_channels
    }
    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }
    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// The `in x out` block for one tap.
    #[inline]
    pub fn tap(&self, tap: usize) -> &[f64] {
        let n = self.in_channels * self.out_channels;
        &self.weights[tap * n..(tap + 1) * n]
    }

    pub fn zeros_like(&self) -> Self {
        ConvKernel {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.spatial == other.spatial
            && self.in_channels == other.in_channels
            && self.out_channels == other.out_channels
    }

    /// Element-wise `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape("axpy on kernels of different shape".into()));
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += alpha * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub(crate) fn require_in_channels(&self, channels: usize, op: &str) -> Result<()> {
        if self.in_channels != channels {
            return Err(Error::Shape(format!(
                "{op}: kernel expects {} input channels, tensor has {channels}",
                self.in_channels
            )));
        }
        Ok(())
    }

    /// Writes `CKB1 | u32 ndims | u32 dims.. | u32 in | u32 out | f64 weights.. | f64 bias..`,
    /// all little-endian.
    pub fn write_blob<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(BLOB_MAGIC)?;
        w.write_all(&(self.spatial.len() as u32).to_le_bytes())?;
        for &d in &self.spatial {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.in_channels as u32).to_le_bytes())?;
        w.write_all(&(self.out_channels as u32).to_le_bytes())?;
        for v in self.weights.iter().chain(&self.bias) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_blob(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_blob<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != BLOB_MAGIC {
            return Err(Error::Format(format!("bad kernel blob magic {magic:?}")));
        }
        let ndims = read_u32(r)? as usize;
        if !(ndims == 2 || ndims == 3) {
            return Err(Error::Format(format!("kernel blob has {ndims} spatial dims")));
        }
        let mut spatial = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            spatial.push(read_u32(r)? as usize);
        }
        let cin = read_u32(r)? as usize;
        let cout = read_u32(r)? as usize;
        Self::check_shape(&spatial, cin, cout).map_err(|e| Error::Format(e.to_string()))?;
        let n = spatial.iter().product::<usize>() * cin * cout;
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(read_f64(r)?);
        }
        let mut bias = Vec::with_capacity(cout);
        for _ in 0..cout {
            bias.push(read_f64(r)?);
        }
        Self::from_parts(&spatial, cin, cout, weights, bias).map_err(|e| Error::Format(e.to_string()))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated kernel blob: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_bounded_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let k1 = ConvKernel::init_uniform(&[3, 3, 3], 4, 8, &mut a).unwrap();
        let k2 = ConvKernel::init_uniform(&[3, 3, 3], 4, 8, &mut b).unwrap();
        assert_eq!(k1, k2);
        let bound = (1.0f64 / 108.0).sqrt();
        assert!(k1.weights().iter().all(|w| w.abs() < bound));
        assert_eq!(k1.weights().len(), 27 * 4 * 8);
    }

    #[test]
    fn blob_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = ConvKernel::init_uniform(&[1, 1, 5], 3, 2, &mut rng).unwrap();
        let blob = k.to_blob();
        assert_eq!(&blob[..4], b"CKB1");
        let back = ConvKernel::read_blob(&mut blob.as_slice()).unwrap();
        assert_eq!(back, k);
        assert!(ConvKernel::read_blob(&mut &blob[..blob.len() - 1]).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ConvKernel::zeros(&[3], 1, 1).is_err());
        assert!(ConvKernel::zeros(&[3, 0, 3], 1, 1).is_err());
        assert!(ConvKernel::from_parts(&[1, 1], 1, 1, vec![1.0, 2.0], vec![0.0]).is_err());
        assert!(ConvKernel::from_parts(&[1, 1], 1, 1, vec![f64::NAN], vec![0.0]).is_err());
    }
}
