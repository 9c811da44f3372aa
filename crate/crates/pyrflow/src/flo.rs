//! Middlebury `.flo` flow files and the in-memory flow field type.
//!
//! Layout: little-endian f32 magic 202021.25, width i32, height i32, then
//! row-major interleaved (u, v) f32 pairs. Positive u points right, positive
//! v points down.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

pub const FLO_MAGIC: f32 = 202021.25;

/// Dense per-pixel displacement field, planar storage.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::Shape(format!(
                "flow {width}x{height} needs {} values per channel, got u={} v={}",
                width * height,
                u.len(),
                v.len()
            )));
        }
        Ok(FlowField {
            width,
            height,
            u,
            v,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        FlowField {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    /// From a 1×2×H×W tensor (channel 0 = u, channel 1 = v).
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if b != 1 || c != 2 {
            return Err(Error::Shape(format!(
                "expected 1x2xHxW flow tensor, got {:?}",
                t.shape()
            )));
        }
        Ok(FlowField {
            width: w,
            height: h,
            u: t.data()[0..h * w].to_vec(),
            v: t.data()[h * w..2 * h * w].to_vec(),
        })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let mut data = Vec::with_capacity(2 * self.u.len());
        data.extend_from_slice(&self.u);
        data.extend_from_slice(&self.v);
        Tensor::new(vec![1, 2, self.height, self.width], data).expect("consistent dims")
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().all(|x| x.is_finite()) && self.v.iter().all(|x| x.is_finite())
    }

    /// Per-pixel magnitudes.
    pub fn magnitudes(&self) -> Vec<f32> {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(u, v)| (u * u + v * v).sqrt())
            .collect()
    }

    fn first_non_finite(&self) -> Option<(usize, usize)> {
        for y in 0..self.height {
            for x in 0..self.width {
                let p = y * self.width + x;
                if !self.u[p].is_finite() || !self.v[p].is_finite() {
                    return Some((x, y));
                }
            }
        }
        None
    }
}

/// Writes a flow field in Middlebury format. Non-finite values are rejected.
pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    if let Some((x, y)) = flow.first_non_finite() {
        return Err(Error::NonFiniteFlow { x, y });
    }
    let n = flow.width * flow.height;
    let mut bytes = Vec::with_capacity(12 + 8 * n);
    bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    bytes.extend_from_slice(&(flow.width as i32).to_le_bytes());
    bytes.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for p in 0..n {
        bytes.extend_from_slice(&flow.u[p].to_le_bytes());
        bytes.extend_from_slice(&flow.v[p].to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a Middlebury flow file; exact inverse of [`write_flo`].
pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected: 12,
            found: bytes.len(),
        });
    }
    let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(Error::BadFloMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(Error::FloSizeMismatch {
            path: path.to_path_buf(),
            width,
            height,
            found: 0,
        });
    }
    let n = width as usize * height as usize;
    let payload = &bytes[12..];
    if payload.len() != 8 * n {
        return Err(Error::FloSizeMismatch {
            path: path.to_path_buf(),
            width,
            height,
            found: payload.len() / 4,
        });
    }
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for pair in payload.chunks_exact(8) {
        u.push(f32::from_le_bytes(pair[0..4].try_into().unwrap()));
        v.push(f32::from_le_bytes(pair[4..8].try_into().unwrap()));
    }
    FlowField::new(width as usize, height as usize, u, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_pixel_zero_flow_is_sixteen_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.flo");
        write_flo(&FlowField::zeros(1, 1), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(f32::from_le_bytes(bytes[0..4].try_into().unwrap()), FLO_MAGIC);
        assert_eq!(i32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(i32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(bytes[12..16].try_into().unwrap()), 0.0);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        let mut bytes = 0.0f32.to_le_bytes().to_vec();
        bytes.extend(1i32.to_le_bytes());
        bytes.extend(1i32.to_le_bytes());
        bytes.extend([0u8; 8]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_flo(&path).unwrap_err(),
            Error::BadFloMagic { .. }
        ));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.flo");
        let mut bytes = FLO_MAGIC.to_le_bytes().to_vec();
        bytes.extend(2i32.to_le_bytes());
        bytes.extend(2i32.to_le_bytes());
        bytes.extend([0u8; 8]); // needs 32
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_flo(&path).unwrap_err(),
            Error::FloSizeMismatch { .. }
        ));
    }

    #[test]
    fn non_finite_flow_is_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = FlowField::zeros(2, 2);
        f.v[3] = f32::NAN;
        assert!(matches!(
            write_flo(&f, &dir.path().join("nan.flo")).unwrap_err(),
            Error::NonFiniteFlow { x: 1, y: 1 }
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_bit_exact(
            w in 1usize..9,
            h in 1usize..9,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = w * h;
            let u: Vec<f32> = (0..n).map(|_| rng.random_range(-1e4f32..1e4)).collect();
            let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1e4f32..1e4)).collect();
            let f = FlowField::new(w, h, u, v).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.flo");
            write_flo(&f, &path).unwrap();
            let g = read_flo(&path).unwrap();
            prop_assert_eq!(f.width, g.width);
            prop_assert_eq!(f.height, g.height);
            for (a, b) in f.u.iter().zip(&g.u) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            for (a, b) in f.v.iter().zip(&g.v) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
