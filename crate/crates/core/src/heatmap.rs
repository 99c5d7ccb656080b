//! Grayscale images of per-voxel reduction weights.
//!
//! Pixel `(i, j)` is `round(255 * max_k w(i, j, k))`, clamped to `[0, 255]`;
//! vacant columns are black. Images are written as ASCII PGM (`P2`) with `i`
//! along the row and `j` down the image.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::SynthObject;
use crate::reduce::ReductionWeights;
use crate::voxgrid::GridGeometry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize) -> Self {
        Heatmap {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn from_weights(w: &ReductionWeights) -> Self {
        let [nx, ny, _] = w.extents();
        let mut h = Heatmap::new(nx, ny);
        let mut best = vec![f64::NEG_INFINITY; nx * ny];
        for (n, c) in w.coords().iter().enumerate() {
            let slot = &mut best[c.j as usize * nx + c.i as usize];
            for &v in w.entry(n) {
                *slot = slot.max(v);
            }
        }
        for (p, b) in h.pixels.iter_mut().zip(best) {
            if b.is_finite() {
                *p = (b * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        h
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, i: usize, j: usize) -> u8 {
        self.pixels[j * self.width + i]
    }

    /// Median of all pixel values (lower median for even counts).
    pub fn median(&self) -> f64 {
        let mut v = self.pixels.clone();
        v.sort_unstable();
        v.get(v.len().saturating_sub(1) / 2).map_or(0.0, |&p| p as f64)
    }

    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in self.pixels.chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse_pgm(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        if tokens.next() != Some("P2") {
            return Err(Error::Format("not an ASCII PGM (P2) image".into()));
        }
        let mut num = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::Format(format!("PGM: missing {what}")))?
                .parse()
                .map_err(|_| Error::Format(format!("PGM: bad {what}")))
        };
        let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
        if maxval != 255 {
            return Err(Error::Format(format!("PGM: maxval {maxval}, expected 255")));
        }
        let pixels = (0..width * height)
            .map(|_| {
                num("pixel").and_then(|p| u8::try_from(p).map_err(|_| Error::Format("PGM: pixel > 255".into())))
            })
            .collect::<Result<Vec<u8>>>()?;
        if tokens.next().is_some() {
            return Err(Error::Format("PGM: trailing data".into()));
        }
        Ok(Heatmap { width, height, pixels })
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_pgm(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FootprintCheck {
    pub object: usize,
    pub cells: usize,
    pub footprint_mean: f64,
    pub footprint_max: u8,
    pub image_median: f64,
}

impl FootprintCheck {
    pub fn hit(&self) -> bool {
        self.cells > 0 && self.footprint_mean > self.image_median
    }
}

/// Compares each object's footprint brightness with the image median.
/// `geometry` must be the grid the heatmap was computed on.
pub fn footprint_check(h: &Heatmap, objects: &[SynthObject], geometry: &GridGeometry) -> Result<Vec<FootprintCheck>> {
    if [h.width, h.height] != [geometry.nx(), geometry.ny()] {
        return Err(Error::Shape(format!(
            "heatmap is {}x{}, geometry is {}x{}",
            h.width,
            h.height,
            geometry.nx(),
            geometry.ny()
        )));
    }
    let median = h.median();
    Ok(objects
        .iter()
        .enumerate()
        .map(|(n, o)| {
            let cells = o.footprint_cells(geometry);
            let vals: Vec<u8> = cells.iter().map(|&(i, j)| h.pixel(i, j)).collect();
            let sum: f64 = vals.iter().map(|&v| v as f64).sum();
            FootprintCheck {
                object: n,
                cells: cells.len(),
                footprint_mean: if vals.is_empty() { 0.0 } else { sum / vals.len() as f64 },
                footprint_max: vals.iter().copied().max().unwrap_or(0),
                image_median: median,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(text: &str) -> ReductionWeights {
        ReductionWeights::from_text(text).unwrap()
    }

    #[test]
    fn uniform_half_is_gray() {
        let w = weights("# extents 2 2 1\n0 0 0 0.5\n0 1 0 0.5\n1 0 0 0.5\n1 1 0 0.5\n");
        let h = Heatmap::from_weights(&w);
        assert!(h.pixels().iter().all(|&p| p == 128));
    }

    #[test]
    fn single_white_pixel() {
        let w = weights("# extents 3 2 2\n2 1 1 1.0\n");
        let h = Heatmap::from_weights(&w);
        assert_eq!(h.pixel(2, 1), 255);
        assert_eq!(h.pixels().iter().filter(|&&p| p > 0).count(), 1);
    }

    #[test]
    fn pgm_round_trip() {
        let w = weights("# extents 3 2 2\n2 1 1 1.0\n0 0 0 0.25\n0 0 1 0.75\n");
        let h = Heatmap::from_weights(&w);
        assert_eq!(h.pixel(0, 0), 191);
        assert_eq!(Heatmap::parse_pgm(&h.to_pgm()).unwrap(), h);
        assert!(Heatmap::parse_pgm("P2\n2 1\n255\n1\n").is_err());
        assert!(Heatmap::parse_pgm("P5\n1 1\n255\n0\n").is_err());
    }
}
