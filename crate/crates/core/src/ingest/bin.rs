use std::path::Path;

use crate::error::{Error, Result};

const RECORD: usize = 16;

/// One LiDAR return. Stored at file precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Point { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x as f64, self.y as f64, self.z as f64]
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud { points }
    }
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Parses consecutive 16-byte records of little-endian `f32` `(x, y, z, intensity)`.
/// Records with a non-finite value are skipped; the count of skipped records is
/// returned alongside the cloud. Intensity is clamped to `[0, 1]`.
pub fn parse_bin(bytes: &[u8]) -> Result<(PointCloud, usize)> {
    if bytes.len() % RECORD != 0 {
        return Err(Error::Format(format!(
            "point file length {} is not a multiple of {RECORD}",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD);
    let mut rejected = 0;
    for rec in bytes.chunks_exact(RECORD) {
        let f = |n: usize| f32::from_le_bytes(rec[n * 4..n * 4 + 4].try_into().expect("4 bytes"));
        let p = Point::new(f(0), f(1), f(2), f(3));
        if p.is_finite() {
            points.push(Point {
                intensity: p.intensity.clamp(0.0, 1.0),
                ..p
            });
        } else {
            rejected += 1;
        }
    }
    if rejected > 0 {
        log::warn!("rejected {rejected} point records with non-finite values");
    }
    Ok((PointCloud { points }, rejected))
}

pub fn load_bin(path: impl AsRef<Path>) -> Result<(PointCloud, usize)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_bin(&bytes)
}

pub fn to_bin_bytes(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * RECORD);
    for p in &pc.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_bin(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bin_bytes(pc)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(x: f32, y: f32, z: f32, i: f32) -> Vec<u8> {
        [x, y, z, i].iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn two_records() {
        let mut b = record(1.0, 2.0, 3.0, 0.5);
        b.extend(record(-1.0, 0.0, 0.25, 0.0));
        let (pc, rej) = parse_bin(&b).unwrap();
        assert_eq!(pc.len(), 2);
        assert_eq!(rej, 0);
        assert_eq!(pc.points[1], Point::new(-1.0, 0.0, 0.25, 0.0));
    }

    #[test]
    fn truncated_is_format_error() {
        assert!(matches!(parse_bin(&[0u8; 17]), Err(Error::Format(_))));
    }

    #[test]
    fn nan_record_rejected() {
        let mut b = Vec::new();
        for n in 0..10 {
            let x = if n == 4 { f32::NAN } else { n as f32 };
            b.extend(record(x, 0.0, 0.0, 0.5));
        }
        let (pc, rej) = parse_bin(&b).unwrap();
        assert_eq!((pc.len(), rej), (9, 1));
        assert!(pc.points.iter().all(|p| p.x != 4.0));
    }

    #[test]
    fn intensity_clamped() {
        let (pc, _) = parse_bin(&record(0.0, 0.0, 0.0, 7.0)).unwrap();
        assert_eq!(pc.points[0].intensity, 1.0);
    }
}
