//! Density-map ground truth from head annotations.
//!
//! Each head contributes a Gaussian kernel truncated at ±4σ and discretely
//! renormalized to unit mass over its full (unclipped) window. Heads near the
//! border lose the part of their window that falls outside the image.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_SIGMA: f64 = 4.0;
/// Kernel support in units of σ.
pub const TRUNCATE: f64 = 4.0;

/// Head positions in pixel units, origin at the top-left corner.
#[derive(Clone, Debug, PartialEq)]
pub struct DotAnnotations {
    points: Vec<(f64, f64)>,
    height: usize,
    width: usize,
}

impl DotAnnotations {
    /// Validates that every `(x, y)` lies in `[0, W) x [0, H)`.
    pub fn new(points: Vec<(f64, f64)>, image_size: (usize, usize)) -> Result<Self> {
        let (height, width) = image_size;
        for (index, &(x, y)) in points.iter().enumerate() {
            let inside = x.is_finite()
                && y.is_finite()
                && x >= 0.0
                && y >= 0.0
                && x < width as f64
                && y < height as f64;
            if !inside {
                return Err(Error::PointOutOfBounds {
                    index,
                    x,
                    y,
                    width,
                    height,
                });
            }
        }
        Ok(Self {
            points,
            height,
            width,
        })
    }

    pub fn empty(image_size: (usize, usize)) -> Self {
        Self {
            points: Vec::new(),
            height: image_size.0,
            width: image_size.1,
        }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(H, W)`.
    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn read_json(path: &Path, image_size: (usize, usize)) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let points = file.points.into_iter().map(|[x, y]| (x, y)).collect();
        Self::new(points, image_size).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = AnnotationFile {
            points: self.points.iter().map(|&(x, y)| [x, y]).collect(),
        };
        let text = serde_json::to_string(&file).expect("annotation serialization");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// On-disk annotation schema: `{"points": [[x, y], ...]}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub points: Vec<[f64; 2]>,
}

/// Per-pixel head density; its sum is the crowd count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub values: Tensor,
    pub sigma: f64,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize, sigma: f64) -> Self {
        Self {
            values: Tensor::zeros(&[1, height, width]),
            sigma,
        }
    }

    pub fn from_tensor(values: Tensor, sigma: f64) -> Result<Self> {
        match values.shape() {
            [1, _, _] => Ok(Self { values, sigma }),
            s => Err(Error::shape(
                "DensityMap",
                format!("expected [1, H, W], got {s:?}"),
            )),
        }
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values.data()[y * self.width() + x]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.scaled(c),
            sigma: self.sigma,
        }
    }

    /// Nearest-neighbour upsampling that spreads each cell's mass evenly
    /// over its `factor x factor` block, so the count is unchanged.
    pub fn upsample_conserving(&self, factor: usize) -> Result<Self> {
        let up = crate::numerics::upsample_nearest(&self.values, factor)?;
        Ok(Self {
            values: up.scaled(1.0 / (factor * factor) as f64),
            sigma: self.sigma,
        })
    }

    /// Raw little-endian sidecar: `RAW_MAGIC`, `u32` height, `u32` width,
    /// then `H * W` `f64` values in row-major order.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.values.len());
        out.extend_from_slice(RAW_MAGIC);
        out.extend_from_slice(&(self.height() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        for v in self.values.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_raw_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_raw(path: &Path, sigma: f64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let malformed = |detail: &str| Error::Malformed {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != RAW_MAGIC {
            return Err(malformed("not a raw density map"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (h, w) = (dim(8), dim(12));
        if bytes.len() != 16 + 8 * h * w || h == 0 || w == 0 {
            return Err(malformed(&format!("size does not match a {h}x{w} map")));
        }
        let data = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_tensor(Tensor::new(vec![1, h, w], data)?, sigma)
    }
}

pub const RAW_MAGIC: &[u8; 8] = b"MFCCDMAP";

/// How the Gaussian bandwidth is chosen per head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelMode {
    Fixed(f64),
    /// `σ_i = beta * mean distance to the k nearest other heads`; heads with
    /// no neighbours use `fallback`.
    Adaptive { beta: f64, k: usize, fallback: f64 },
}

impl KernelMode {
    pub fn geometry_adaptive(fallback: f64) -> Self {
        KernelMode::Adaptive {
            beta: 0.3,
            k: 3,
            fallback,
        }
    }
}

const MIN_ADAPTIVE_SIGMA: f64 = 0.5;

pub fn generate_density_map(dots: &DotAnnotations, sigma: f64) -> Result<DensityMap> {
    generate_density_map_with(dots, KernelMode::Fixed(sigma))
}

pub fn generate_density_map_with(dots: &DotAnnotations, mode: KernelMode) -> Result<DensityMap> {
    let nominal = match mode {
        KernelMode::Fixed(s) => s,
        KernelMode::Adaptive { fallback, .. } => fallback,
    };
    if !(nominal > 0.0 && nominal.is_finite()) {
        return Err(Error::invalid(
            "generate_density_map",
            format!("sigma must be positive, got {nominal}"),
        ));
    }
    let (h, w) = dots.image_size();
    let sigmas: Vec<f64> = match mode {
        KernelMode::Fixed(s) => vec![s; dots.len()],
        KernelMode::Adaptive { beta, k, fallback } => adaptive_sigmas(dots.points(), beta, k, fallback),
    };
    let mut map = vec![0.0; h * w];
    for (&(x, y), &sigma) in dots.points().iter().zip(&sigmas) {
        splat(&mut map, h, w, x, y, sigma);
    }
    Ok(DensityMap {
        values: Tensor::from_parts(vec![1, h, w], map),
        sigma: nominal,
    })
}

/// 1-D truncated Gaussian weights for pixels `start..start + len` around
/// the continuous coordinate `c` (pixel `j` has its center at `j + 0.5`).
fn kernel_1d(c: f64, sigma: f64) -> (isize, Vec<f64>) {
    let radius = (TRUNCATE * sigma).ceil();
    let start = (c - 0.5 - radius).floor() as isize;
    let end = (c - 0.5 + radius).ceil() as isize;
    let weights = (start..=end)
        .map(|j| {
            let d = j as f64 + 0.5 - c;
            if d.abs() <= radius {
                (-(d * d) / (2.0 * sigma * sigma)).exp()
            } else {
                0.0
            }
        })
        .collect();
    (start, weights)
}

fn splat(map: &mut [f64], h: usize, w: usize, x: f64, y: f64, sigma: f64) {
    let (x0, gx) = kernel_1d(x, sigma);
    let (y0, gy) = kernel_1d(y, sigma);
    let norm = gx.iter().sum::<f64>() * gy.iter().sum::<f64>();
    for (dy, wy) in gy.iter().enumerate() {
        let iy = y0 + dy as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let row = &mut map[iy as usize * w..(iy as usize + 1) * w];
        for (dx, wx) in gx.iter().enumerate() {
            let ix = x0 + dx as isize;
            if ix < 0 || ix >= w as isize {
                continue;
            }
            row[ix as usize] += wy * wx / norm;
        }
    }
}

fn adaptive_sigmas(points: &[(f64, f64)], beta: f64, k: usize, fallback: f64) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, &(u, v))| ((u - x).powi(2) + (v - y).powi(2)).sqrt())
                .collect();
            if d.is_empty() || k == 0 {
                return fallback;
            }
            d.sort_by(f64::total_cmp);
            let take = k.min(d.len());
            let mean = d[..take].iter().sum::<f64>() / take as f64;
            (beta * mean).max(MIN_ADAPTIVE_SIGMA)
        })
        .collect()
}

/// Integral of the map.
pub fn count_from_map(map: &DensityMap) -> f64 {
    map.values.sum()
}

/// `factor x factor` block-sum pooling; the total is conserved.
pub fn downsample_density(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    let (h, w) = (map.height(), map.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(
            "downsample_density",
            format!("{h}x{w} map is not divisible by factor {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let src = map.values.data();
    let mut out = vec![0.0; oh * ow];
    for by in 0..oh {
        for bx in 0..ow {
            let mut acc = 0.0;
            for y in by * factor..(by + 1) * factor {
                for x in bx * factor..(bx + 1) * factor {
                    acc += src[y * w + x];
                }
            }
            out[by * ow + bx] = acc;
        }
    }
    Ok(DensityMap {
        values: Tensor::from_parts(vec![1, oh, ow], out),
        sigma: map.sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dots(points: Vec<(f64, f64)>, h: usize, w: usize) -> DotAnnotations {
        DotAnnotations::new(points, (h, w)).unwrap()
    }

    /// Direct summation over the rendered map, independent of the
    /// implementation's own reduction.
    fn oracle_sum(map: &DensityMap) -> f64 {
        let mut s = 0.0;
        for y in 0..map.height() {
            for x in 0..map.width() {
                s += map.get(y, x);
            }
        }
        s
    }

    #[test]
    fn raw_sidecar_round_trip_and_upsampling() {
        let m = generate_density_map(&dots(vec![(5.0, 6.0), (9.5, 2.25)], 12, 16), 1.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dmap");
        m.write_raw(&path).unwrap();
        let back = DensityMap::read_raw(&path, 1.5).unwrap();
        assert_eq!(back, m);
        std::fs::write(&path, b"MFCCDMAP\x01\0\0\0").unwrap();
        assert!(DensityMap::read_raw(&path, 1.5).is_err());

        let up = m.upsample_conserving(8).unwrap();
        assert_eq!((up.height(), up.width()), (96, 128));
        assert!((count_from_map(&up) - count_from_map(&m)).abs() < 1e-12);
    }

    #[test]
    fn empty_annotations_give_zero_map() {
        let m = generate_density_map(&DotAnnotations::empty((16, 20)), 4.0).unwrap();
        assert_eq!(m.values.shape(), &[1, 16, 20]);
        assert_eq!(count_from_map(&m), 0.0);
    }

    #[test]
    fn single_centered_dot_has_unit_mass() {
        for sigma in [0.5, 1.0, 2.5, 4.0, 6.0] {
            let m = generate_density_map(&dots(vec![(32.0, 32.0)], 64, 64), sigma).unwrap();
            assert!((oracle_sum(&m) - 1.0).abs() < 1e-6, "sigma {sigma}");
        }
    }

    #[test]
    fn seven_separated_dots() {
        let pts = vec![
            (20.0, 20.0),
            (60.0, 20.0),
            (100.0, 20.0),
            (20.5, 70.25),
            (60.0, 70.0),
            (100.7, 70.1),
            (60.0, 105.0),
        ];
        let m = generate_density_map(&dots(pts, 128, 128), 4.0).unwrap();
        assert!((oracle_sum(&m) - 7.0).abs() < 0.035);
    }

    #[test]
    fn twelve_dots_count() {
        let pts: Vec<(f64, f64)> = (0..12)
            .map(|i| (20.0 + 7.3 * i as f64, 30.0 + 3.1 * (i % 5) as f64))
            .collect();
        let m = generate_density_map(&dots(pts, 80, 128), 4.0).unwrap();
        assert!((count_from_map(&m) - 12.0).abs() < 12.0 * 0.005);
        assert!((count_from_map(&m.scaled(2.0)) - 2.0 * count_from_map(&m)).abs() < 1e-12);
    }

    #[test]
    fn values_are_non_negative() {
        let m = generate_density_map(&dots(vec![(0.2, 0.1), (5.0, 9.9)], 10, 10), 2.0).unwrap();
        assert!(m.values.data().iter().all(|&v| v >= 0.0));
        // border heads lose mass
        assert!(count_from_map(&m) < 2.0);
    }

    #[test]
    fn out_of_bounds_point_is_reported_by_index() {
        let err = DotAnnotations::new(vec![(1.0, 1.0), (10.0, 3.0)], (8, 10)).unwrap_err();
        match err {
            Error::PointOutOfBounds { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other}"),
        }
        assert!(DotAnnotations::new(vec![(-0.1, 1.0)], (8, 10)).is_err());
    }

    #[test]
    fn non_positive_sigma_rejected() {
        assert!(generate_density_map(&DotAnnotations::empty((4, 4)), 0.0).is_err());
    }

    #[test]
    fn downsample_examples() {
        let m = DensityMap::from_tensor(
            Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap(),
            4.0,
        )
        .unwrap();
        assert_eq!(downsample_density(&m, 1).unwrap(), m);
        assert_eq!(downsample_density(&m, 2).unwrap().values.data(), &[4.0]);
        assert!(downsample_density(&m, 3).is_err());
    }

    #[test]
    fn adaptive_mode_conserves_interior_mass() {
        let pts = vec![(30.0, 30.0), (34.0, 30.0), (30.0, 35.0), (36.0, 36.0)];
        let m = generate_density_map_with(&dots(pts, 64, 64), KernelMode::geometry_adaptive(4.0)).unwrap();
        assert!((count_from_map(&m) - 4.0).abs() < 4.0 * 0.005);
        let single = generate_density_map_with(
            &dots(vec![(32.0, 32.0)], 64, 64),
            KernelMode::geometry_adaptive(3.0),
        )
        .unwrap();
        let fixed = generate_density_map(&dots(vec![(32.0, 32.0)], 64, 64), 3.0).unwrap();
        assert_eq!(single.values, fixed.values);
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let d = dots(vec![(1.5, 2.25), (3.0, 0.0)], 8, 8);
        d.write_json(&path).unwrap();
        assert_eq!(DotAnnotations::read_json(&path, (8, 8)).unwrap(), d);
        std::fs::write(&path, "{\"points\": [[1.0]]}").unwrap();
        let err = DotAnnotations::read_json(&path, (8, 8)).unwrap_err();
        assert!(err.to_string().contains("a.json"));
    }

    proptest! {
        #[test]
        fn interior_heads_conserve_mass(
            pts in proptest::collection::vec((17.0f64..79.0, 17.0f64..63.0), 0..20),
            sigma in 0.6f64..4.0,
        ) {
            let n = pts.len() as f64;
            let m = generate_density_map(&dots(pts, 80, 96), sigma).unwrap();
            prop_assert!((oracle_sum(&m) - n).abs() <= 1e-9 * n.max(1.0));
        }

        #[test]
        fn integer_shift_translates_map(
            pts in proptest::collection::vec((10.0f64..20.0, 10.0f64..20.0), 1..6),
            dx in 0usize..6, dy in 0usize..6,
        ) {
            let a = generate_density_map(&dots(pts.clone(), 48, 48), 2.0).unwrap();
            let shifted: Vec<_> = pts.iter().map(|&(x, y)| (x + dx as f64, y + dy as f64)).collect();
            let b = generate_density_map(&dots(shifted, 48, 48), 2.0).unwrap();
            for y in 0..48 - dy {
                for x in 0..48 - dx {
                    prop_assert!((a.get(y, x) - b.get(y + dy, x + dx)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn downsample_preserves_dyadic_sums_exactly(
            vals in proptest::collection::vec(0u32..4096, 64 * 64),
        ) {
            // multiples of 2^-12 add without rounding, so the totals must match bit for bit
            let data: Vec<f64> = vals.iter().map(|&v| v as f64 / 4096.0).collect();
            let m = DensityMap::from_tensor(Tensor::new(vec![1, 64, 64], data).unwrap(), 4.0).unwrap();
            let d = downsample_density(&m, 8).unwrap();
            prop_assert_eq!(count_from_map(&d).to_bits(), count_from_map(&m).to_bits());
        }
    }
}
