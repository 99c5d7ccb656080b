use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::voxgrid::Coord;

/// Per-voxel reduction weights, aligned with the source tensor's entries.
///
/// Scalar kinds store one weight per voxel. Max pooling is channelwise and
/// stores a 0/1 mask per channel, so `per_entry` equals the channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionWeights {
    extents: [usize; 3],
    coords: Vec<Coord>,
    per_entry: usize,
    weights: Vec<f64>,
    logits: Option<Vec<f64>>,
}

impl ReductionWeights {
    pub(crate) fn new(
        extents: [usize; 3],
        coords: Vec<Coord>,
        per_entry: usize,
        weights: Vec<f64>,
        logits: Option<Vec<f64>>,
    ) -> Self {
        debug_assert_eq!(coords.len() * per_entry, weights.len());
        ReductionWeights {
            extents,
            coords,
            per_entry,
            weights,
            logits,
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }
    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }
    pub fn per_entry(&self) -> usize {
        self.per_entry
    }
    pub fn len(&self) -> usize {
        self.coords.len()
    }
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    /// Pre-normalization scores, present for the SDR kinds.
    pub fn logits(&self) -> Option<&[f64]> {
        self.logits.as_deref()
    }

    pub fn entry(&self, n: usize) -> &[f64] {
        &self.weights[n * self.per_entry..(n + 1) * self.per_entry]
    }

    pub fn get(&self, c: Coord) -> Option<&[f64]> {
        self.coords.binary_search(&c).ok().map(|n| self.entry(n))
    }

    /// Sum of weights per occupied column, per weight slot: `((i, j), sums)`.
    pub fn column_sums(&self) -> Vec<((usize, usize), Vec<f64>)> {
        let mut out: Vec<((usize, usize), Vec<f64>)> = Vec::new();
        for (n, c) in self.coords.iter().enumerate() {
            let key = (c.i as usize, c.j as usize);
            if out.last().map(|(k, _)| *k) != Some(key) {
                out.push((key, vec![0.0; self.per_entry]));
            }
            let sums = &mut out.last_mut().expect("pushed above").1;
            for (s, w) in sums.iter_mut().zip(self.entry(n)) {
                *s += w;
            }
        }
        out
    }

    /// Text form: a `# extents Nx Ny Nz` header, then one `i j k weight...` line per voxel.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let [nx, ny, nz] = self.extents;
        let _ = writeln!(s, "# extents {nx} {ny} {nz}");
        let _ = writeln!(s, "# i j k weight");
        for (n, c) in self.coords.iter().enumerate() {
            let _ = write!(s, "{} {} {}", c.i, c.j, c.k);
            for w in self.entry(n) {
                let _ = write!(s, " {w}");
            }
            s.push('\n');
        }
        s
    }

    /// Parses the text form. Without an extents header, extents are inferred
    /// from the largest coordinates. Logits are not part of the text form.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut extents: Option<[usize; 3]> = None;
        let mut rows: Vec<(Coord, Vec<f64>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let toks: Vec<&str> = rest.split_whitespace().collect();
                if toks.first() == Some(&"extents") {
                    let dims: Vec<usize> = toks[1..]
                        .iter()
                        .map(|t| t.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Format(format!("line {}: bad extents: {e}", lineno + 1)))?;
                    if dims.len() != 3 || dims.contains(&0) {
                        return Err(Error::Format(format!("line {}: extents need 3 positive values", lineno + 1)));
                    }
                    extents = Some([dims[0], dims[1], dims[2]]);
                }
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < 4 {
                return Err(Error::Format(format!(
                    "line {}: expected `i j k weight`, got `{line}`",
                    lineno + 1
                )));
            }
            let idx = |t: &str| {
                t.parse::<u32>()
                    .map_err(|e| Error::Format(format!("line {}: bad index `{t}`: {e}", lineno + 1)))
            };
            let c = Coord::new(idx(toks[0])?, idx(toks[1])?, idx(toks[2])?);
            let ws = toks[3..]
                .iter()
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Format(format!("line {}: bad weight `{t}`", lineno + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push((c, ws));
        }
        let per_entry = rows.first().map_or(1, |r| r.1.len());
        if rows.iter().any(|r| r.1.len() != per_entry) {
            return Err(Error::Format("inconsistent number of weights per line".into()));
        }
        rows.sort_by_key(|r| r.0);
        if rows.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Format("duplicate voxel coordinate".into()));
        }
        let extents = match extents {
            Some(e) => {
                if let Some((c, _)) = rows.iter().find(|(c, _)| {
                    c.i as usize >= e[0] || c.j as usize >= e[1] || c.k as usize >= e[2]
                }) {
                    return Err(Error::Format(format!("voxel {c:?} outside extents {e:?}")));
                }
                e
            }
            None => {
                let mut e = [1usize; 3];
                for (c, _) in &rows {
                    let a = c.as_array();
                    for d in 0..3 {
                        e[d] = e[d].max(a[d] + 1);
                    }
                }
                e
            }
        };
        let coords = rows.iter().map(|r| r.0).collect();
        let weights = rows.into_iter().flat_map(|r| r.1).collect();
        Ok(ReductionWeights::new(extents, coords, per_entry, weights, None))
    }
}
