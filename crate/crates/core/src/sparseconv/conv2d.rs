//! Dense 2D cross-correlation over BEV maps and the BEV residual block.

use rayon::prelude::*;

use super::kernel::ConvKernel;
use super::tape::{relu_taped, GradTape, ReluRecord};
use crate::error::{Error, Result};
use crate::voxgrid::DenseBevMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// `k / 2` zeros on each side (odd kernels only).
    Same,
    Explicit(usize),
}

#[derive(Debug, Clone, Copy)]
struct Geometry2d {
    k: [usize; 2],
    pad: [usize; 2],
    stride: usize,
    input: [usize; 2],
    output: [usize; 2],
}

fn plan(m: &DenseBevMap, k: &ConvKernel, stride: usize, padding: Padding) -> Result<Geometry2d> {
    if k.spatial().len() != 2 {
        return Err(Error::Shape(format!("conv2d: kernel must be 2D, got {:?}", k.spatial())));
    }
    k.require_in_channels(m.channels(), "conv2d")?;
    if stride == 0 {
        return Err(Error::Shape("conv2d: stride must be >= 1".into()));
    }
    let ks = [k.spatial()[0], k.spatial()[1]];
    let pad = match padding {
        Padding::Same => {
            if ks.iter().any(|s| s % 2 == 0) {
                return Err(Error::Shape(format!("conv2d: `same` padding needs an odd kernel, got {ks:?}")));
            }
            [ks[0] / 2, ks[1] / 2]
        }
        Padding::Explicit(p) => [p, p],
    };
    let input = m.extents();
    let mut output = [0; 2];
    for a in 0..2 {
        let span = input[a] + 2 * pad[a];
        if span < ks[a] {
            return Err(Error::Shape(format!(
                "conv2d: padded extent {span} smaller than kernel {}",
                ks[a]
            )));
        }
        output[a] = (span - ks[a]) / stride + 1;
    }
    Ok(Geometry2d {
        k: ks,
        pad,
        stride,
        input,
        output,
    })
}

impl Geometry2d {
    /// Input pixel read by output `(oi, oj)` at kernel offset `(a, b)`, if inside the map.
    #[inline]
    fn source(&self, oi: usize, oj: usize, a: usize, b: usize) -> Option<(usize, usize)> {
        let si = (oi * self.stride + a).checked_sub(self.pad[0])?;
        let sj = (oj * self.stride + b).checked_sub(self.pad[1])?;
        (si < self.input[0] && sj < self.input[1]).then_some((si, sj))
    }
}

pub fn conv2d(m: &DenseBevMap, k: &ConvKernel, stride: usize, padding: Padding) -> Result<DenseBevMap> {
    let g = plan(m, k, stride, padding)?;
    Ok(forward(m, k, &g))
}

fn forward(m: &DenseBevMap, k: &ConvKernel, g: &Geometry2d) -> DenseBevMap {
    let cout = k.out_channels();
    let [ow, oh] = g.output;
    let mut out = DenseBevMap::zeros(ow, oh, cout);
    out.values_mut()
        .par_chunks_mut(oh * cout)
        .enumerate()
        .for_each(|(oi, row)| {
            for oj in 0..oh {
                let y = &mut row[oj * cout..(oj + 1) * cout];
                y.copy_from_slice(k.bias());
                for a in 0..g.k[0] {
                    for b in 0..g.k[1] {
                        let Some((si, sj)) = g.source(oi, oj, a, b) else { continue };
                        let x = m.pixel(si, sj);
                        let w = k.tap(a * g.k[1] + b);
                        for (ci, &xv) in x.iter().enumerate() {
                            for (yo, &wv) in y.iter_mut().zip(&w[ci * cout..(ci + 1) * cout]) {
                                *yo += xv * wv;
                            }
                        }
                    }
                }
            }
        });
    out
}

#[derive(Debug)]
pub struct Conv2dRecord {
    input: DenseBevMap,
    kernel: ConvKernel,
    geometry: Geometry2d,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub kernel: ConvKernel,
    pub input: DenseBevMap,
}

pub fn conv2d_taped(
    m: &DenseBevMap,
    k: &ConvKernel,
    stride: usize,
    padding: Padding,
) -> Result<(DenseBevMap, GradTape<Conv2dRecord>)> {
    let g = plan(m, k, stride, padding)?;
    let out = forward(m, k, &g);
    let rec = Conv2dRecord {
        input: m.clone(),
        kernel: k.clone(),
        geometry: g,
    };
    Ok((out, GradTape::record("conv2d", rec)))
}

impl GradTape<Conv2dRecord> {
    pub fn backward(&mut self, upstream: &DenseBevMap) -> Result<Conv2dGrads> {
        {
            let rec = self.peek()?;
            let [ow, oh] = rec.geometry.output;
            if upstream.extents() != [ow, oh] || upstream.channels() != rec.kernel.out_channels() {
                return Err(Error::Shape("conv2d backward: upstream does not match the forward output".into()));
            }
        }
        let Conv2dRecord { input, kernel: k, geometry: g } = self.take()?;
        let cin = k.in_channels();
        let cout = k.out_channels();
        let mut gk = k.zeros_like();
        let mut gx = DenseBevMap::zeros(input.width(), input.height(), cin);
        let block = cin * cout;
        for oi in 0..g.output[0] {
            for oj in 0..g.output[1] {
                let gy = upstream.pixel(oi, oj);
                for (b, &gv) in gk.bias_mut().iter_mut().zip(gy) {
                    *b += gv;
                }
                for a in 0..g.k[0] {
                    for b in 0..g.k[1] {
                        let Some((si, sj)) = g.source(oi, oj, a, b) else { continue };
                        let tap = a * g.k[1] + b;
                        let x = input.pixel(si, sj);
                        let w = k.tap(tap);
                        let gw = &mut gk.weights_mut()[tap * block..(tap + 1) * block];
                        let gxs = gx.pixel_mut(si, sj);
                        for ci in 0..cin {
                            let row = ci * cout;
                            let mut acc = 0.0;
                            for co in 0..cout {
                                gw[row + co] += x[ci] * gy[co];
                                acc += w[row + co] * gy[co];
                            }
                            gxs[ci] += acc;
                        }
                    }
                }
            }
        }
        Ok(Conv2dGrads { kernel: gk, input: gx })
    }
}

fn check_residual(m: &DenseBevMap, k1: &ConvKernel, k2: &ConvKernel) -> Result<()> {
    let c = m.channels();
    for (name, k) in [("k1", k1), ("k2", k2)] {
        if k.spatial() != [3, 3] || k.in_channels() != c || k.out_channels() != c {
            return Err(Error::Shape(format!(
                "residual_block2d: {name} must be 3x3 and {c}->{c}, got {:?} {}->{}",
                k.spatial(),
                k.in_channels(),
                k.out_channels()
            )));
        }
    }
    Ok(())
}

/// `relu(conv(relu(conv(m, k1)), k2) + m)` with stride 1 and same padding.
pub fn residual_block2d(m: &DenseBevMap, k1: &ConvKernel, k2: &ConvKernel) -> Result<DenseBevMap> {
    check_residual(m, k1, k2)?;
    let h1 = conv2d(m, k1, 1, Padding::Same)?;
    let a1 = DenseBevMap::from_values(h1.width(), h1.height(), h1.channels(), super::tape::relu(h1.values()))?;
    let h2 = conv2d(&a1, k2, 1, Padding::Same)?;
    let s = h2.add(m)?;
    DenseBevMap::from_values(s.width(), s.height(), s.channels(), super::tape::relu(s.values()))
}

#[derive(Debug)]
pub struct ResidualRecord {
    conv1: GradTape<Conv2dRecord>,
    relu1: GradTape<ReluRecord>,
    conv2: GradTape<Conv2dRecord>,
    relu_out: GradTape<ReluRecord>,
    extents: [usize; 2],
    channels: usize,
}

#[derive(Debug, Clone)]
pub struct ResidualGrads {
    pub k1: ConvKernel,
    pub k2: ConvKernel,
    pub input: DenseBevMap,
}

pub fn residual_block2d_taped(
    m: &DenseBevMap,
    k1: &ConvKernel,
    k2: &ConvKernel,
) -> Result<(DenseBevMap, GradTape<ResidualRecord>)> {
    check_residual(m, k1, k2)?;
    let (w, h, c) = (m.width(), m.height(), m.channels());
    let (h1, conv1) = conv2d_taped(m, k1, 1, Padding::Same)?;
    let (a1, relu1) = relu_taped(h1.values());
    let a1 = DenseBevMap::from_values(w, h, c, a1)?;
    let (h2, conv2) = conv2d_taped(&a1, k2, 1, Padding::Same)?;
    let s = h2.add(m)?;
    let (out, relu_out) = relu_taped(s.values());
    let rec = ResidualRecord {
        conv1,
        relu1,
        conv2,
        relu_out,
        extents: [w, h],
        channels: c,
    };
    Ok((
        DenseBevMap::from_values(w, h, c, out)?,
        GradTape::record("residual_block2d", rec),
    ))
}

impl GradTape<ResidualRecord> {
    pub fn backward(&mut self, upstream: &DenseBevMap) -> Result<ResidualGrads> {
        {
            let rec = self.peek()?;
            if upstream.extents() != rec.extents || upstream.channels() != rec.channels {
                return Err(Error::Shape("residual_block2d backward: upstream shape mismatch".into()));
            }
        }
        let mut rec = self.take()?;
        let [w, h] = rec.extents;
        let c = rec.channels;
        let gs = DenseBevMap::from_values(w, h, c, rec.relu_out.backward(upstream.values())?)?;
        let g2 = rec.conv2.backward(&gs)?;
        let ga1 = DenseBevMap::from_values(w, h, c, rec.relu1.backward(g2.input.values())?)?;
        let g1 = rec.conv1.backward(&ga1)?;
        let input = g1.input.add(&gs)?;
        Ok(ResidualGrads {
            k1: g1.kernel,
            k2: g2.kernel,
            input,
        })
    }
}
