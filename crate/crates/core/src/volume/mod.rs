//! Volumes on a voxel grid, intensity windowing and SUV conversion.
//!
//! Data is stored as an `Array3` indexed `[z, y, x]` so that the x axis is
//! fastest in memory, which is also the raster order of the MVOL format.

mod affine;
mod io;

pub use affine::{build_alignment_transform, resample_linear, AffineTransform};
pub use io::{load_volume, save_volume, sidecar_path, raster_path, Sidecar};

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "PET_ACTIVITY")]
    PetActivity,
    #[serde(rename = "SUV")]
    Suv,
    #[serde(rename = "MASK")]
    Mask,
    #[serde(rename = "PROB")]
    Prob,
    #[serde(rename = "NORMALIZED")]
    Normalized,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ct => "CT",
            Modality::PetActivity => "PET_ACTIVITY",
            Modality::Suv => "SUV",
            Modality::Mask => "MASK",
            Modality::Prob => "PROB",
            Modality::Normalized => "NORMALIZED",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "CT" => Modality::Ct,
            "PET_ACTIVITY" => Modality::PetActivity,
            "SUV" => Modality::Suv,
            "MASK" => Modality::Mask,
            "PROB" => Modality::Prob,
            "NORMALIZED" => Modality::Normalized,
            other => return Err(invalid(format!("unknown modality {other:?}"))),
        })
    }
}

/// Geometry of a voxel grid: dims as `(nx, ny, nz)`, spacing and offset in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub offset: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], offset: [f64; 3]) -> Result<Self> {
        let grid = Grid { dims, spacing, offset };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n == 0) {
            return Err(invalid(format!("dims must be >= 1 on every axis, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if self.offset.iter().any(|o| !o.is_finite()) {
            return Err(invalid("offset must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// World position (mm) of the voxel centre at index `(x, y, z)`.
    pub fn world(&self, idx: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.offset[a] + idx[a] * self.spacing[a])
    }

    /// Continuous voxel index of a world position.
    pub fn index_of(&self, world: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (world[a] - self.offset[a]) / self.spacing[a])
    }

    /// Same dims and geometry within 1e-6 mm.
    pub fn matches(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() < 1e-6
                    && (self.offset[a] - other.offset[a]).abs() < 1e-6
            })
    }

    pub fn ensure_matches(&self, other: &Grid) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

/// Intensity window `[lo, hi]` in the units of the volume it is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    /// Liver parenchyma window, HU.
    pub const CT_LIVER: Window = Window { lo: -160.0, hi: 240.0 };
    /// SUV range retained for PET.
    pub const SUV: Window = Window { lo: 0.0, hi: 20.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(invalid(format!("window requires lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Window { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Maps a value in window units to normalized units (without clipping).
    pub fn to_normalized(&self, v: f64) -> f64 {
        (v - self.lo) / self.width()
    }

    pub fn from_normalized(&self, v: f64) -> f64 {
        v * self.width() + self.lo
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D<T> {
    data: Array3<T>,
    spacing: [f64; 3],
    offset: [f64; 3],
    modality: Modality,
}

impl<T: Scalar> Volume3D<T> {
    /// `data` is indexed `[z, y, x]`.
    pub fn new(data: Array3<T>, spacing: [f64; 3], offset: [f64; 3], modality: Modality) -> Result<Self> {
        let (nz, ny, nx) = data.dim();
        Grid::new([nx, ny, nz], spacing, offset)?;
        let v = Volume3D { data, spacing, offset, modality };
        v.check_modality_range()?;
        Ok(v)
    }

    pub fn zeros(grid: &Grid, modality: Modality) -> Result<Self> {
        grid.validate()?;
        let [nx, ny, nz] = grid.dims;
        Ok(Volume3D {
            data: Array3::zeros((nz, ny, nx)),
            spacing: grid.spacing,
            offset: grid.offset,
            modality,
        })
    }

    /// Builds a volume from an x-fastest raster.
    pub fn from_raster(grid: &Grid, raster: Vec<T>, modality: Modality) -> Result<Self> {
        grid.validate()?;
        if raster.len() != grid.len() {
            return Err(Error::RasterSizeMismatch { expected: grid.len(), found: raster.len() });
        }
        let [nx, ny, nz] = grid.dims;
        let data = Array3::from_shape_vec((nz, ny, nx), raster).expect("length checked");
        Self::new(data, grid.spacing, grid.offset, modality)
    }

    fn check_modality_range(&self) -> Result<()> {
        match self.modality {
            Modality::Mask => {
                if let Some(v) = self.data.iter().find(|&&v| v != T::zero() && v != T::one()) {
                    return Err(invalid(format!("mask voxel {v} is not 0 or 1")));
                }
            }
            Modality::Normalized | Modality::Prob => {
                if let Some(v) = self.data.iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
                    return Err(Error::OutOfRange(v.as_f64()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn offset(&self) -> [f64; 3] {
        self.offset
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// `(nx, ny, nz)`.
    pub fn dims(&self) -> [usize; 3] {
        let (nz, ny, nx) = self.data.dim();
        [nx, ny, nz]
    }

    pub fn grid(&self) -> Grid {
        Grid { dims: self.dims(), spacing: self.spacing, offset: self.offset }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[[z, y, x]]
    }

    /// Values in x-fastest order.
    pub fn raster(&self) -> impl Iterator<Item = T> + '_ {
        self.data.iter().copied()
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Axial slice `z` as a `[y, x]` image.
    pub fn axial(&self, z: usize) -> ArrayView2<'_, T> {
        self.data.index_axis(Axis(0), z)
    }

    /// Stacks `[y, x]` slices back into a volume on `grid`.
    pub fn from_axial_slices(grid: &Grid, slices: &[Array2<T>], modality: Modality) -> Result<Self> {
        let [nx, ny, nz] = grid.dims;
        if slices.len() != nz {
            return Err(Error::ShapeMismatch(format!("{} slices for depth {nz}", slices.len())));
        }
        let mut data = Array3::zeros((nz, ny, nx));
        for (k, s) in slices.iter().enumerate() {
            if s.dim() != (ny, nx) {
                return Err(Error::ShapeMismatch(format!("slice {k} has shape {:?}, expected {:?}", s.dim(), (ny, nx))));
            }
            data.index_axis_mut(Axis(0), k).assign(s);
        }
        Self::new(data, grid.spacing, grid.offset, modality)
    }

    /// Same geometry, new data and modality.
    pub fn with_data(&self, data: Array3<T>, modality: Modality) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", data.dim(), self.data.dim())));
        }
        Self::new(data, self.spacing, self.offset, modality)
    }

    pub fn map(&self, f: impl Fn(T) -> T, modality: Modality) -> Result<Self> {
        self.with_data(self.data.mapv(f), modality)
    }

    /// Reinterprets the modality tag, re-checking its value invariants.
    pub fn relabel(self, modality: Modality) -> Result<Self> {
        Self::new(self.data, self.spacing, self.offset, modality)
    }

    pub fn cast<U: Scalar>(&self) -> Volume3D<U> {
        Volume3D {
            data: self.data.mapv(|v| U::lit(v.as_f64())),
            spacing: self.spacing,
            offset: self.offset,
            modality: self.modality,
        }
    }
}

/// Converts an activity concentration volume (kBq/ml) into SUV,
/// `r / (dose / weight)`, with the decay-corrected dose in kBq and the
/// body weight in g.
pub fn compute_suv<T: Scalar>(activity: &Volume3D<T>, injected_dose: f64, weight: f64) -> Result<Volume3D<T>> {
    if activity.modality() != Modality::PetActivity {
        return Err(invalid(format!("SUV needs a PET_ACTIVITY volume, got {}", activity.modality().as_str())));
    }
    if !(injected_dose > 0.0) || !(weight > 0.0) {
        return Err(invalid(format!("dose and weight must be positive, got {injected_dose} and {weight}")));
    }
    let factor = T::lit(weight / injected_dose);
    activity.map(|r| r * factor, Modality::Suv)
}

/// Clips to the window, then rescales linearly onto `[0, 1]`.
pub fn window_and_normalize<T: Scalar>(v: &Volume3D<T>, w: Window) -> Result<Volume3D<T>> {
    let w = Window::new(w.lo, w.hi)?;
    let (lo, hi) = (T::lit(w.lo), T::lit(w.hi));
    let width = hi - lo;
    v.map(
        |x| {
            let c = x.max(lo).min(hi);
            ((c - lo) / width).max(T::zero()).min(T::one())
        },
        Modality::Normalized,
    )
}

/// Inverse of the normalization step: `v * (hi - lo) + lo`, tagged `into`.
pub fn denormalize<T: Scalar>(v: &Volume3D<T>, w: Window, into: Modality) -> Result<Volume3D<T>> {
    let w = Window::new(w.lo, w.hi)?;
    if let Some(bad) = v.data().iter().find(|&&x| !(x >= T::zero() && x <= T::one())) {
        return Err(Error::OutOfRange(bad.as_f64()));
    }
    let (lo, width) = (T::lit(w.lo), T::lit(w.width()));
    v.map(|x| x * width + lo, into)
}
