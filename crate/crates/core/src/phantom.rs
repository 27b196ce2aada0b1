//! Deterministic synthetic CT/PET pairs with known lesions, and a stand-in
//! for an external detector's candidate output.
//!
//! The CT holds an air background, an elliptic body cylinder, a liver
//! ellipsoid and spherical hypodense lesions. The PET is sampled on its own
//! coarser, offset grid: air is 0 SUV, body and liver take constant uptake
//! levels and every lesion adds a truncated Gaussian blob on top.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataprep::{format_pair_record, rng_from_seed, PairRecord, RngState, SliceRange};
use crate::error::{invalid, Error, Result};
use crate::lesion::{connected_components, CandidateSet};
use crate::volume::{Grid, Modality, Volume3D};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub ct_dims: [usize; 3],
    pub ct_spacing: [f64; 3],
    pub ct_offset: [f64; 3],
    /// Derived to cover the CT extent when absent.
    pub pet_dims: Option<[usize; 3]>,
    pub pet_spacing: [f64; 3],
    pub pet_offset: [f64; 3],
    pub n_lesions: usize,
    pub lesion_radius_range: (f64, f64),
    pub lesion_suv_range: (f64, f64),
    pub background_suv_range: (f64, f64),
    pub air_hu: f64,
    pub body_hu: f64,
    pub liver_hu: f64,
    pub lesion_hu_delta: f64,
    pub ct_noise_hu: f64,
    pub pet_noise_suv: f64,
    /// Gaussian width of the lesion uptake relative to the lesion radius.
    pub blob_sigma_ratio: f64,
    /// Uptake is cut off beyond this many lesion radii.
    pub blob_truncation: f64,
    /// Extra clearance between lesion surfaces, in mm.
    pub lesion_gap_mm: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            ct_dims: [64, 64, 16],
            ct_spacing: [1.0, 1.0, 4.0],
            ct_offset: [0.0, 0.0, 0.0],
            pet_dims: None,
            pet_spacing: [3.0, 3.0, 4.0],
            pet_offset: [-1.5, -2.0, -2.0],
            n_lesions: 2,
            lesion_radius_range: (4.0, 7.0),
            lesion_suv_range: (4.0, 8.0),
            background_suv_range: (0.5, 1.5),
            air_hu: -1000.0,
            body_hu: 40.0,
            liver_hu: 60.0,
            lesion_hu_delta: -25.0,
            ct_noise_hu: 4.0,
            pet_noise_suv: 0.05,
            blob_sigma_ratio: 0.6,
            blob_truncation: 2.0,
            lesion_gap_mm: 10.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        Grid::new(self.ct_dims, self.ct_spacing, self.ct_offset)?;
        if self.pet_spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(invalid("PET spacing must be positive"));
        }
        let ordered = |(a, b): (f64, f64)| a <= b && a.is_finite() && b.is_finite();
        if !ordered(self.lesion_radius_range) || self.lesion_radius_range.0 <= 0.0 {
            return Err(invalid("lesion radius range must be positive and ordered"));
        }
        if !ordered(self.lesion_suv_range) || self.lesion_suv_range.0 <= 2.5 {
            return Err(invalid("lesion SUV range must be ordered with minimum above 2.5"));
        }
        if !ordered(self.background_suv_range) || self.background_suv_range.0 < 0.0 {
            return Err(invalid("background SUV range must be non-negative and ordered"));
        }
        if self.ct_noise_hu < 0.0 || self.pet_noise_suv < 0.0 {
            return Err(invalid("noise levels must be non-negative"));
        }
        if !(self.blob_sigma_ratio > 0.0 && self.blob_truncation >= 1.0) {
            return Err(invalid("blob width must be positive and truncation at least one radius"));
        }
        Ok(())
    }

    pub fn ct_grid(&self) -> Grid {
        Grid { dims: self.ct_dims, spacing: self.ct_spacing, offset: self.ct_offset }
    }

    /// The PET grid; by default just large enough to cover the CT extent.
    pub fn pet_grid(&self) -> Grid {
        let dims = self.pet_dims.unwrap_or_else(|| {
            [0, 1, 2].map(|a| {
                let ct_max = self.ct_offset[a] + (self.ct_dims[a] - 1) as f64 * self.ct_spacing[a];
                (((ct_max - self.pet_offset[a]) / self.pet_spacing[a]).ceil().max(0.0) as usize + 1).max(1)
            })
        });
        Grid { dims, spacing: self.pet_spacing, offset: self.pet_offset }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center_mm: [f64; 3],
    pub radius_mm: f64,
    pub peak_suv: f64,
}

/// Ellipsoid in world millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2)).sum()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }

    /// True when the ball of radius `r` around `p` lies inside.
    fn contains_ball(&self, p: [f64; 3], r: f64) -> bool {
        let shrunk = Ellipsoid { center: self.center, semi_axes: self.semi_axes.map(|s| s - r) };
        shrunk.semi_axes.iter().all(|&s| s > 0.0) && shrunk.contains(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair<T> {
    /// CT in HU.
    pub ct: Volume3D<T>,
    /// PET in SUV on its own grid.
    pub pet: Volume3D<T>,
    /// Lesion voxels on the CT grid.
    pub gt_lesions: Volume3D<T>,
    pub lesions: Vec<Lesion>,
    pub body: Ellipsoid,
    pub liver: Ellipsoid,
    pub background_suv: f64,
    pub liver_suv: f64,
}

impl<T: Scalar> PhantomPair<T> {
    /// Axial CT slices that intersect the liver.
    pub fn liver_slice_range(&self) -> Option<SliceRange> {
        let g = self.ct.grid();
        let zs: Vec<usize> = (0..g.dims[2])
            .filter(|&z| {
                let wz = g.world([0.0, 0.0, z as f64])[2];
                (wz - self.liver.center[2]).abs() <= self.liver.semi_axes[2]
            })
            .collect();
        Some(SliceRange { lo: *zs.first()?, hi: *zs.last()? })
    }

    /// Lesion components of the ground-truth mask.
    pub fn gt_components(&self) -> CandidateSet {
        connected_components(&self.gt_lesions)
    }
}

fn uniform(rng: &mut RngState, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

const PLACEMENT_TRIES: usize = 10_000;

/// Builds one phantom. Every random draw comes from `cfg.seed`.
pub fn generate_phantom_pair<T: Scalar>(cfg: &PhantomConfig) -> Result<PhantomPair<T>> {
    cfg.validate()?;
    let ct_grid = cfg.ct_grid();
    let pet_grid = cfg.pet_grid();
    pet_grid.validate()?;
    let mut rng = rng_from_seed(cfg.seed);

    let lo = ct_grid.world([0.0; 3]);
    let hi = ct_grid.world(ct_grid.dims.map(|n| (n - 1) as f64));
    let ext = [0, 1, 2].map(|a| hi[a] - lo[a]);
    let at = |fx: f64, fy: f64, fz: f64| [lo[0] + fx * ext[0], lo[1] + fy * ext[1], lo[2] + fz * ext[2]];
    let body = Ellipsoid { center: at(0.5, 0.5, 0.5), semi_axes: [0.46 * ext[0], 0.40 * ext[1], f64::INFINITY] };
    let liver = Ellipsoid {
        center: at(0.57, 0.47, 0.5),
        semi_axes: [0.28 * ext[0], 0.24 * ext[1], (0.38 * ext[2]).max(cfg.ct_spacing[2])],
    };

    let background_suv = uniform(&mut rng, cfg.background_suv_range);
    let liver_suv = uniform(&mut rng, cfg.background_suv_range);

    let mut lesions: Vec<Lesion> = Vec::with_capacity(cfg.n_lesions);
    for _ in 0..cfg.n_lesions {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let r = uniform(&mut rng, cfg.lesion_radius_range);
            let c = [0, 1, 2].map(|a| {
                let s = (liver.semi_axes[a] - r).max(0.0);
                liver.center[a] + if s > 0.0 { rng.gen_range(-s..s) } else { 0.0 }
            });
            let peak = uniform(&mut rng, cfg.lesion_suv_range);
            let clear = lesions
                .iter()
                .all(|l| dist2(l.center_mm, c).sqrt() > l.radius_mm + r + cfg.lesion_gap_mm);
            if liver.contains_ball(c, r) && clear {
                placed = Some(Lesion { center_mm: c, radius_mm: r, peak_suv: peak });
                break;
            }
        }
        lesions.push(placed.ok_or_else(|| {
            Error::InfeasibleGeometry(format!("could not fit {} separated lesions inside the liver", cfg.n_lesions))
        })?);
    }

    let ct_noise = (cfg.ct_noise_hu > 0.0).then(|| Normal::new(0.0, cfg.ct_noise_hu).expect("positive sigma"));
    let mut ct = Vec::with_capacity(ct_grid.len());
    let mut gt = Vec::with_capacity(ct_grid.len());
    for_each_voxel(&ct_grid, |p| {
        let in_lesion = lesions.iter().any(|l| dist2(l.center_mm, p) <= l.radius_mm * l.radius_mm);
        let mut hu = if in_lesion {
            cfg.liver_hu + cfg.lesion_hu_delta
        } else if liver.contains(p) {
            cfg.liver_hu
        } else if body.contains(p) {
            cfg.body_hu
        } else {
            cfg.air_hu
        };
        if let Some(n) = &ct_noise {
            hu += n.sample(&mut rng);
        }
        ct.push(T::lit(hu));
        gt.push(if in_lesion { T::one() } else { T::zero() });
    });

    let pet_noise = (cfg.pet_noise_suv > 0.0).then(|| Normal::new(0.0, cfg.pet_noise_suv).expect("positive sigma"));
    let mut pet = Vec::with_capacity(pet_grid.len());
    for_each_voxel(&pet_grid, |p| {
        let mut suv = if liver.contains(p) {
            liver_suv
        } else if body.contains(p) {
            background_suv
        } else {
            0.0
        };
        for l in &lesions {
            let d2 = dist2(l.center_mm, p);
            if d2 <= (cfg.blob_truncation * l.radius_mm).powi(2) {
                let sigma = cfg.blob_sigma_ratio * l.radius_mm;
                suv += (l.peak_suv - liver_suv) * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        if let Some(n) = &pet_noise {
            if suv > 0.0 {
                suv += n.sample(&mut rng);
            }
        }
        pet.push(T::lit(suv.max(0.0)));
    });

    let pair = PhantomPair {
        ct: Volume3D::from_raster(&ct_grid, ct, Modality::Ct)?,
        pet: Volume3D::from_raster(&pet_grid, pet, Modality::Suv)?,
        gt_lesions: Volume3D::from_raster(&ct_grid, gt, Modality::Mask)?,
        lesions,
        body,
        liver,
        background_suv,
        liver_suv,
    };
    let found = pair.gt_components().len();
    if found != cfg.n_lesions {
        return Err(Error::InfeasibleGeometry(format!(
            "{} lesions requested but the CT grid resolves {found}; increase the radius or resolution",
            cfg.n_lesions
        )));
    }
    Ok(pair)
}

fn for_each_voxel(grid: &Grid, mut f: impl FnMut([f64; 3])) {
    let [nx, ny, nz] = grid.dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                f(grid.world([x as f64, y as f64, z as f64]));
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfig {
    pub n_false: usize,
    /// In-plane radius of a planted false positive, in voxels.
    pub fp_radius_vox: usize,
    /// Number of axial slices a false positive spans.
    pub fp_depth_slices: usize,
    pub lesion_score_range: (f64, f64),
    pub fp_score_range: (f64, f64),
    /// Background probability values are drawn below this.
    pub background_prob_max: f64,
    pub seed: u64,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        CandidateConfig {
            n_false: 3,
            fp_radius_vox: 2,
            fp_depth_slices: 2,
            lesion_score_range: (0.991, 0.999),
            fp_score_range: (0.81, 0.94),
            background_prob_max: 0.5,
            seed: 0,
        }
    }
}

/// Binary dilation with the 26-neighbourhood, `iterations` times.
pub fn dilate<T: Scalar>(mask: &Volume3D<T>, iterations: usize) -> Result<Volume3D<T>> {
    let [nx, ny, nz] = mask.dims();
    let mut cur: Vec<bool> = mask.raster().map(|v| v > T::zero()).collect();
    for _ in 0..iterations {
        let mut next = cur.clone();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if !cur[(z * ny + y) * nx + x] {
                        continue;
                    }
                    for zz in z.saturating_sub(1)..(z + 2).min(nz) {
                        for yy in y.saturating_sub(1)..(y + 2).min(ny) {
                            for xx in x.saturating_sub(1)..(x + 2).min(nx) {
                                next[(zz * ny + yy) * nx + xx] = true;
                            }
                        }
                    }
                }
            }
        }
        cur = next;
    }
    let raster = cur.into_iter().map(|b| if b { T::one() } else { T::zero() }).collect();
    Volume3D::from_raster(&mask.grid(), raster, Modality::Mask)
}

/// Simulated detector output: one candidate per ground-truth lesion (the
/// lesion dilated by one voxel) scoring at least `lesion_score_range.0`,
/// plus `n_false` small blobs placed outside `avoid`, away from every other
/// candidate. Returns the scored candidates and a matching probability map.
pub fn generate_candidates<T: Scalar>(
    gt_lesions: &Volume3D<T>,
    avoid: &Volume3D<T>,
    cfg: &CandidateConfig,
) -> Result<(CandidateSet, Volume3D<T>)> {
    gt_lesions.grid().ensure_matches(&avoid.grid())?;
    let grid = gt_lesions.grid();
    let [nx, ny, nz] = grid.dims;
    let mut rng = rng_from_seed(cfg.seed);
    let mut prob: Vec<f64> = (0..grid.len()).map(|_| uniform(&mut rng, (0.0, cfg.background_prob_max))).collect();

    let gt = connected_components(gt_lesions);
    let mut components = Vec::new();
    let mut occupied: Vec<bool> = dilate(avoid, 1)?.raster().map(|v| v > T::zero()).collect();
    for c in &gt.components {
        let mut single = vec![T::zero(); grid.len()];
        for &i in &c.voxels {
            single[i] = T::one();
        }
        let grown = dilate(&Volume3D::from_raster(&grid, single, Modality::Mask)?, 1)?;
        let voxels: Vec<usize> = grown.raster().enumerate().filter(|(_, v)| *v > T::zero()).map(|(i, _)| i).collect();
        let score = uniform(&mut rng, cfg.lesion_score_range);
        components.push((voxels, score));
    }
    for (voxels, _) in &components {
        mark_with_margin(&mut occupied, voxels, grid.dims);
    }

    let r = cfg.fp_radius_vox as i64;
    let depth = cfg.fp_depth_slices.max(1);
    if nz < depth || nx <= 2 * r as usize || ny <= 2 * r as usize {
        return Err(Error::PlacementFailed("grid too small for the false-positive blob".into()));
    }
    for k in 0..cfg.n_false {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let cx = rng.gen_range(r..nx as i64 - r);
            let cy = rng.gen_range(r..ny as i64 - r);
            let z0 = rng.gen_range(0..=nz - depth);
            let mut voxels = Vec::new();
            for z in z0..z0 + depth {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx * dx + dy * dy <= r * r {
                            voxels.push((z * ny + (cy + dy) as usize) * nx + (cx + dx) as usize);
                        }
                    }
                }
            }
            if voxels.iter().all(|&i| !occupied[i]) {
                placed = Some(voxels);
                break;
            }
        }
        let mut voxels = placed.ok_or_else(|| {
            Error::PlacementFailed(format!("no room for false positive {} of {} outside the avoid mask", k + 1, cfg.n_false))
        })?;
        voxels.sort_unstable();
        mark_with_margin(&mut occupied, &voxels, grid.dims);
        let score = uniform(&mut rng, cfg.fp_score_range);
        components.push((voxels, score));
    }

    for (voxels, score) in &components {
        for &i in voxels {
            prob[i] = *score;
        }
    }
    let prob_map = Volume3D::from_raster(&grid, prob.into_iter().map(T::lit).collect(), Modality::Prob)?;
    let mut mask = vec![T::zero(); grid.len()];
    for (voxels, _) in &components {
        for &i in voxels {
            mask[i] = T::one();
        }
    }
    let cands = connected_components(&Volume3D::from_raster(&grid, mask, Modality::Mask)?).with_scores(&prob_map)?;
    Ok((cands, prob_map))
}

fn mark_with_margin(occupied: &mut [bool], voxels: &[usize], [nx, ny, nz]: [usize; 3]) {
    for &i in voxels {
        let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
        for zz in z.saturating_sub(1)..(z + 2).min(nz) {
            for yy in y.saturating_sub(1)..(y + 2).min(ny) {
                for xx in x.saturating_sub(1)..(x + 2).min(nx) {
                    occupied[(zz * ny + yy) * nx + xx] = true;
                }
            }
        }
    }
}

/// Manifest line for a saved phantom pair. PET is already in SUV, so dose
/// and weight are written as 1.
pub fn manifest_line(ct: &Path, pet: &Path, slice_range: Option<SliceRange>) -> String {
    format_pair_record(&PairRecord { ct: ct.into(), pet: pet.into(), dose: 1.0, weight: 1.0, slice_range })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_phantom_shape_and_lesions() {
        let p: PhantomPair<f64> = generate_phantom_pair(&PhantomConfig::default()).unwrap();
        assert_eq!(p.ct.dims(), [64, 64, 16]);
        assert_eq!(p.pet.spacing(), [3.0, 3.0, 4.0]);
        assert!(p.pet.offset().iter().all(|&o| o != 0.0));
        assert_eq!(p.gt_components().len(), 2);
        assert!(p.lesions.iter().all(|l| (4.0..8.0).contains(&l.peak_suv)));
        let r = p.liver_slice_range().unwrap();
        assert!(r.lo > 0 && r.hi < 15);
    }

    #[test]
    fn pet_grid_covers_ct() {
        let cfg = PhantomConfig::default();
        let (ct, pet) = (cfg.ct_grid(), cfg.pet_grid());
        for a in 0..3 {
            assert!(pet.offset[a] <= ct.offset[a]);
            let ct_max = ct.world(ct.dims.map(|n| (n - 1) as f64))[a];
            let pet_max = pet.world(pet.dims.map(|n| (n - 1) as f64))[a];
            assert!(pet_max >= ct_max, "axis {a}: {pet_max} < {ct_max}");
        }
    }

    #[test]
    fn impossible_layouts_are_rejected() {
        let crowded = PhantomConfig { n_lesions: 12, ..Default::default() };
        assert!(matches!(generate_phantom_pair::<f32>(&crowded), Err(Error::InfeasibleGeometry(_))));
        let benign = PhantomConfig { lesion_suv_range: (1.0, 2.0), ..Default::default() };
        assert!(generate_phantom_pair::<f32>(&benign).is_err());
    }

    #[test]
    fn candidates_fill_or_fail() {
        let grid = Grid::new([8, 8, 2], [1.0; 3], [0.0; 3]).unwrap();
        let empty = Volume3D::<f32>::zeros(&grid, Modality::Mask).unwrap();
        let full = empty.map(|_| 1.0, Modality::Mask).unwrap();
        let cfg = CandidateConfig { n_false: 1, ..Default::default() };
        assert!(matches!(generate_candidates(&empty, &full, &cfg), Err(Error::PlacementFailed(_))));
        let (c, prob) = generate_candidates(&empty, &empty, &cfg).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(prob.modality(), Modality::Prob);
    }
}
