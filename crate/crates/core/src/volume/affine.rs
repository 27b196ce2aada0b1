//! Axis-aligned PET-to-CT alignment and trilinear resampling.
//!
//! The alignment matrix carries the PET/CT voxel-size ratio on its diagonal
//! and the inter-scan offset (in CT voxels) in its translation column, so it
//! maps PET voxel indices to CT voxel indices. Resampling pulls every target
//! voxel through the inverse map.

use nalgebra::{Matrix4, Vector4};

use super::{Grid, Volume3D};
use crate::error::{invalid, Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    m: Matrix4<f64>,
}

impl AffineTransform {
    pub fn new(m: Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(invalid(format!("bottom row must be (0, 0, 0, 1), got {bottom:?}")));
        }
        if (0..3).any(|i| !(m[(i, i)] > 0.0)) {
            return Err(invalid("diagonal scale entries must be positive"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite transform entry"));
        }
        Ok(AffineTransform { m })
    }

    pub fn identity() -> Self {
        AffineTransform { m: Matrix4::identity() }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    pub fn scale(&self) -> [f64; 3] {
        [self.m[(0, 0)], self.m[(1, 1)], self.m[(2, 2)]]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.m[(0, 3)], self.m[(1, 3)], self.m[(2, 3)]]
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.m * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }

    /// Closed-form inverse for the pure scale + translation form,
    /// `diag(1/s)` and `-t/s`. `None` when the matrix has off-diagonal terms.
    pub fn analytic_inverse(&self) -> Option<Matrix4<f64>> {
        let off_diagonal = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).any(|(r, c)| r != c && self.m[(r, c)] != 0.0);
        if off_diagonal {
            return None;
        }
        let s = self.scale();
        let t = self.translation();
        let mut inv = Matrix4::identity();
        for a in 0..3 {
            inv[(a, a)] = 1.0 / s[a];
            inv[(a, 3)] = -t[a] / s[a];
        }
        Some(inv)
    }

    pub fn inverse(&self) -> Result<Matrix4<f64>> {
        match self.analytic_inverse() {
            Some(inv) => Ok(inv),
            None => self.m.try_inverse().ok_or(Error::SingularTransform),
        }
    }
}

/// Builds the alignment matrix: diagonal `s_pet / s_ct` per axis, translation
/// column `t` (expressed in CT voxels), bottom row `(0, 0, 0, 1)`.
pub fn build_alignment_transform(s_ct: [f64; 3], s_pet: [f64; 3], t: [f64; 3]) -> Result<AffineTransform> {
    if s_ct.iter().chain(&s_pet).any(|&s| !(s > 0.0)) {
        return Err(invalid(format!("spacings must be positive: ct {s_ct:?}, pet {s_pet:?}")));
    }
    let mut m = Matrix4::identity();
    for a in 0..3 {
        m[(a, a)] = s_pet[a] / s_ct[a];
        m[(a, 3)] = t[a];
    }
    AffineTransform::new(m)
}

/// Samples `src` onto the `target` grid. `a` maps source indices to target
/// indices; each target voxel is pulled from `a⁻¹ · index` by trilinear
/// interpolation. Positions outside the source extent take the source minimum.
pub fn resample_linear<T: Scalar>(src: &Volume3D<T>, a: &AffineTransform, target: &Grid) -> Result<Volume3D<T>> {
    target.validate()?;
    let inv = a.inverse()?;
    let inv = AffineTransform { m: inv };
    let dims = src.dims();
    let data = src.data();
    let pad = src.min();
    let [tx, ty, tz] = target.dims;
    let mut raster = Vec::with_capacity(target.len());
    for k in 0..tz {
        for j in 0..ty {
            for i in 0..tx {
                let p = inv.apply([i as f64, j as f64, k as f64]);
                let value = match corners(p, dims) {
                    None => pad,
                    Some(c) => {
                        let mut acc = 0.0f64;
                        for (dz, wz) in [(0, 1.0 - c.frac[2]), (1, c.frac[2])] {
                            for (dy, wy) in [(0, 1.0 - c.frac[1]), (1, c.frac[1])] {
                                for (dx, wx) in [(0, 1.0 - c.frac[0]), (1, c.frac[0])] {
                                    let w = wx * wy * wz;
                                    if w == 0.0 {
                                        continue;
                                    }
                                    let v = data[[c.base[2] + dz * c.step[2], c.base[1] + dy * c.step[1], c.base[0] + dx * c.step[0]]];
                                    acc += w * v.as_f64();
                                }
                            }
                        }
                        T::lit(acc)
                    }
                };
                raster.push(value);
            }
        }
    }
    Volume3D::from_raster(target, raster, src.modality())
}

struct Corners {
    base: [usize; 3],
    step: [usize; 3],
    frac: [f64; 3],
}

const EDGE_TOL: f64 = 1e-9;

fn corners(p: [f64; 3], dims: [usize; 3]) -> Option<Corners> {
    let mut base = [0usize; 3];
    let mut step = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let n = dims[a];
        let hi = (n - 1) as f64;
        if !(p[a] >= -EDGE_TOL && p[a] <= hi + EDGE_TOL) {
            return None;
        }
        let q = p[a].clamp(0.0, hi);
        if n == 1 {
            continue;
        }
        let b = (q.floor() as usize).min(n - 2);
        base[a] = b;
        step[a] = 1;
        frac[a] = (q - b as f64).clamp(0.0, 1.0);
    }
    Some(Corners { base, step, frac })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;

    #[test]
    fn alignment_diagonal_from_scanner_spacings() {
        let a = build_alignment_transform([0.97, 0.97, 4.0], [3.0, 3.0, 4.0], [0.0; 3]).unwrap();
        let s = a.scale();
        assert!((s[0] - 3.0928).abs() < 1e-4 && (s[1] - 3.0928).abs() < 1e-4);
        assert_eq!(s[2], 1.0);
    }

    #[test]
    fn equal_spacings() {
        let a = build_alignment_transform([2.0; 3], [2.0; 3], [0.0; 3]).unwrap();
        assert_eq!(a, AffineTransform::identity());
        let b = build_alignment_transform([2.0; 3], [2.0; 3], [5.0, -3.0, 2.0]).unwrap();
        assert_eq!(b.scale(), [1.0; 3]);
        assert_eq!(b.translation(), [5.0, -3.0, 2.0]);
    }

    #[test]
    fn rejects_non_positive_spacing() {
        assert!(build_alignment_transform([0.0, 1.0, 1.0], [1.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn analytic_inverse_composes_to_identity() {
        let a = build_alignment_transform([0.97, 0.8, 4.0], [3.0, 2.5, 5.0], [1.5, -7.25, 3.0]).unwrap();
        let prod = a.matrix() * a.analytic_inverse().unwrap();
        assert!((prod - Matrix4::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn singular_transform_is_reported() {
        let mut m = Matrix4::identity();
        m[(0, 1)] = 1.0;
        m[(1, 0)] = 1.0;
        let a = AffineTransform::new(m).unwrap();
        let grid = Grid::new([2, 2, 1], [1.0; 3], [0.0; 3]).unwrap();
        let src = Volume3D::<f32>::zeros(&grid, Modality::Ct).unwrap();
        assert!(matches!(resample_linear(&src, &a, &grid), Err(Error::SingularTransform)));
    }

    #[test]
    fn midpoint_and_padding() {
        let grid = Grid::new([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let src = Volume3D::from_raster(&grid, vec![1.0f32, 3.0], Modality::Suv).unwrap();
        // target index 1 pulls from source 0.5, target index 3 from 1.5 (outside)
        let a = build_alignment_transform([1.0; 3], [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let target = Grid::new([4, 1, 1], [0.5, 1.0, 1.0], [0.0; 3]).unwrap();
        let out = resample_linear(&src, &a, &target).unwrap();
        assert_eq!(out.raster().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 1.0]);
        assert_eq!(out.grid(), target);
    }
}
