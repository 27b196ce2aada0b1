//! Aligned, windowed CT/PET pairs and the training-time augmentations.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::volume::{
    build_alignment_transform, compute_suv, load_volume, resample_linear, window_and_normalize, Grid, Modality,
    Volume3D, Window,
};
use crate::Scalar;

/// Deterministic random source threaded through every randomized stage.
pub type RngState = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> RngState {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Inclusive axial index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRange {
    pub lo: usize,
    pub hi: usize,
}

impl SliceRange {
    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        if lo > hi {
            return Err(Error::EmptyRange(format!("slice range [{lo}, {hi}]")));
        }
        Ok(SliceRange { lo, hi })
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.lo..=self.hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanPair<T> {
    ct: Volume3D<T>,
    pet: Volume3D<T>,
    suv_window: Window,
    slice_range: Option<SliceRange>,
}

impl<T: Scalar> ScanPair<T> {
    /// Both volumes must be normalized and share one grid.
    pub fn new(ct: Volume3D<T>, pet: Volume3D<T>, suv_window: Window, slice_range: Option<SliceRange>) -> Result<Self> {
        if ct.modality() != Modality::Normalized || pet.modality() != Modality::Normalized {
            return Err(invalid("scan pair volumes must be NORMALIZED"));
        }
        ct.grid().ensure_matches(&pet.grid())?;
        if let Some(r) = slice_range {
            let nz = ct.dims()[2];
            if r.hi >= nz {
                return Err(Error::EmptyRange(format!("slice range [{}, {}] outside depth {nz}", r.lo, r.hi)));
            }
        }
        Ok(ScanPair { ct, pet, suv_window, slice_range })
    }

    pub fn ct(&self) -> &Volume3D<T> {
        &self.ct
    }

    pub fn pet(&self) -> &Volume3D<T> {
        &self.pet
    }

    pub fn suv_window(&self) -> Window {
        self.suv_window
    }

    pub fn slice_range(&self) -> Option<SliceRange> {
        self.slice_range
    }
}

/// Resamples a PET volume onto a CT grid using the spacing ratio and the
/// offset difference expressed in CT voxels.
pub fn align_to_grid<T: Scalar>(pet: &Volume3D<T>, ct_grid: &Grid) -> Result<Volume3D<T>> {
    let (s_ct, s_pet) = (ct_grid.spacing, pet.spacing());
    let t = [0, 1, 2].map(|a| (pet.offset()[a] - ct_grid.offset[a]) / s_ct[a]);
    let a = build_alignment_transform(s_ct, s_pet, t)?;
    resample_linear(pet, &a, ct_grid)
}

/// Converts PET to SUV when it is still in activity units, pulls it onto the
/// CT grid, then windows both volumes. `windows` is `(ct, pet)`.
pub fn prepare_pair<T: Scalar>(
    ct_raw: &Volume3D<T>,
    pet_raw: &Volume3D<T>,
    dose: f64,
    weight: f64,
    windows: (Window, Window),
    slice_range: Option<SliceRange>,
) -> Result<ScanPair<T>> {
    if ct_raw.modality() != Modality::Ct {
        return Err(invalid(format!("expected a CT volume, got {}", ct_raw.modality().as_str())));
    }
    let suv = match pet_raw.modality() {
        Modality::PetActivity => compute_suv(pet_raw, dose, weight)?,
        Modality::Suv => pet_raw.clone(),
        other => return Err(invalid(format!("expected PET_ACTIVITY or SUV, got {}", other.as_str()))),
    };
    let aligned = align_to_grid(&suv, &ct_raw.grid())?;
    let ct = window_and_normalize(ct_raw, windows.0)?;
    let pet = window_and_normalize(&aligned, windows.1)?;
    ScanPair::new(ct, pet, windows.1, slice_range)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair<T> {
    pub ct: Array2<T>,
    pub pet: Array2<T>,
}

/// One `[y, x]` slice pair per axial index in the pair's range (or all).
pub fn extract_slices<T: Scalar>(p: &ScanPair<T>) -> Result<Vec<SlicePair<T>>> {
    let nz = p.ct.dims()[2];
    let range = match p.slice_range {
        Some(r) => r,
        None => SliceRange::new(0, nz - 1)?,
    };
    if range.hi >= nz {
        return Err(Error::EmptyRange(format!("slice range [{}, {}] outside depth {nz}", range.lo, range.hi)));
    }
    Ok(range
        .indices()
        .map(|z| SlicePair { ct: p.ct.axial(z).to_owned(), pet: p.pet.axial(z).to_owned() })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    pub translate_range_px: (f64, f64),
    pub noise_bound: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { scale_range: (0.9, 1.1), translate_range_px: (-25.0, 25.0), noise_bound: 0.005, seed: 0 }
    }
}

impl AugmentConfig {
    /// Reference image side for which `translate_range_px` is specified.
    pub const REFERENCE_SIZE: usize = 512;

    /// The same augmentation with translations rescaled from
    /// [`Self::REFERENCE_SIZE`] to an image of side `size`.
    pub fn scaled_to(&self, size: usize) -> Self {
        let f = size as f64 / Self::REFERENCE_SIZE as f64;
        AugmentConfig { translate_range_px: (self.translate_range_px.0 * f, self.translate_range_px.1 * f), ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.scale_range;
        let (t0, t1) = self.translate_range_px;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(invalid(format!("scale range must be positive and ordered, got {:?}", self.scale_range)));
        }
        if !(t0 <= t1) {
            return Err(invalid("translation range must be ordered"));
        }
        if !(self.noise_bound >= 0.0) {
            return Err(invalid("noise bound must be non-negative"));
        }
        Ok(())
    }
}

/// One draw of the geometric augmentation: isotropic scale about the image
/// centre followed by a translation in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { scale: 1.0, tx: 0.0, ty: 0.0 };

    pub fn draw(cfg: &AugmentConfig, rng: &mut RngState) -> Self {
        let uniform = |rng: &mut RngState, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        let scale = uniform(rng, cfg.scale_range);
        let tx = uniform(rng, cfg.translate_range_px);
        let ty = uniform(rng, cfg.translate_range_px);
        AugmentParams { scale, tx, ty }
    }

    /// Warps a `[y, x]` image with bilinear sampling; outside samples take
    /// the image minimum.
    pub fn apply<T: Scalar>(&self, img: &Array2<T>) -> Array2<T> {
        if *self == Self::IDENTITY {
            return img.clone();
        }
        let (h, w) = img.dim();
        let pad = img.iter().copied().fold(T::infinity(), T::min);
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        Array2::from_shape_fn((h, w), |(y, x)| {
            let sy = (y as f64 - cy - self.ty) / self.scale + cy;
            let sx = (x as f64 - cx - self.tx) / self.scale + cx;
            bilinear(img, sy, sx).unwrap_or(pad)
        })
    }
}

fn bilinear<T: Scalar>(img: &Array2<T>, y: f64, x: f64) -> Option<T> {
    let (h, w) = img.dim();
    let tol = 1e-9;
    if !(y >= -tol && y <= (h - 1) as f64 + tol && x >= -tol && x <= (w - 1) as f64 + tol) {
        return None;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let v = |yy: usize, xx: usize| img[[yy, xx]].as_f64();
    let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
    let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
    Some(T::lit(top * (1.0 - fy) + bottom * fy))
}

/// Applies one randomly drawn scale/translation to both slices of a pair.
pub fn augment<T: Scalar>(sample: &SlicePair<T>, cfg: &AugmentConfig, rng: &mut RngState) -> Result<SlicePair<T>> {
    if sample.ct.dim() != sample.pet.dim() {
        return Err(Error::ShapeMismatch(format!("ct {:?} vs pet {:?}", sample.ct.dim(), sample.pet.dim())));
    }
    let params = AugmentParams::draw(cfg, rng);
    Ok(SlicePair { ct: params.apply(&sample.ct), pet: params.apply(&sample.pet) })
}

/// Zero-mean Gaussian perturbation with `sigma = bound / 3`, hard-clipped to
/// `±bound`. Only ever applied to the CT input.
pub fn add_input_noise<T: Scalar>(ct: &Array2<T>, cfg: &AugmentConfig, rng: &mut RngState) -> Array2<T> {
    let bound = cfg.noise_bound;
    if bound == 0.0 {
        return ct.clone();
    }
    let normal = Normal::new(0.0, bound / 3.0).expect("positive sigma");
    ct.mapv(|v| v + T::lit(normal.sample(rng).clamp(-bound, bound)))
}

/// Shuffles indices under `seed` and holds out `round(fraction * n)` items.
/// Both halves keep their original relative order.
pub fn split_train_val<I: Clone>(items: &[I], fraction: f64, seed: u64) -> Result<(Vec<I>, Vec<I>)> {
    if items.is_empty() {
        return Err(invalid("cannot split an empty set"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid(format!("validation fraction must lie in (0, 1), got {fraction}")));
    }
    let n = items.len();
    let n_val = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (item, held_out) in items.iter().zip(is_val) {
        if held_out { val.push(item.clone()) } else { train.push(item.clone()) }
    }
    Ok((train, val))
}

/// Per-scan variant: whole groups go to one side, so no scan contributes
/// slices to both halves. `round(fraction * groups)` groups are held out.
pub fn split_train_val_by_group<I: Clone>(items: &[I], groups: &[usize], fraction: f64, seed: u64) -> Result<(Vec<I>, Vec<I>)> {
    if items.len() != groups.len() {
        return Err(Error::ShapeMismatch("one group id per item required".into()));
    }
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let (_, val_ids) = split_train_val(&ids, fraction, seed)?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (item, g) in items.iter().zip(groups) {
        if val_ids.contains(g) { val.push(item.clone()) } else { train.push(item.clone()) }
    }
    Ok((train, val))
}

/// One scan in a pair manifest: `ct, pet, dose, weight, slice_lo, slice_hi`.
/// Empty slice fields mean "all slices"; relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub ct: PathBuf,
    pub pet: PathBuf,
    pub dose: f64,
    pub weight: f64,
    pub slice_range: Option<SliceRange>,
}

pub fn read_pair_manifest(path: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let root = path.parent().unwrap_or(Path::new(""));
    parse_pair_manifest(&text, root)
}

pub fn parse_pair_manifest(text: &str, root: &Path) -> Result<Vec<PairRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let bad = |reason: String| Error::MalformedManifest { line: i + 1, reason };
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", row.len())));
        }
        let num = |k: usize| row[k].parse::<f64>().map_err(|e| bad(format!("field {}: {e}", k + 1)));
        let idx = |k: usize| -> Result<Option<usize>> {
            if row[k].is_empty() {
                Ok(None)
            } else {
                row[k].parse::<usize>().map(Some).map_err(|e| bad(format!("field {}: {e}", k + 1)))
            }
        };
        let slice_range = match (idx(4)?, idx(5)?) {
            (Some(lo), Some(hi)) => Some(SliceRange::new(lo, hi)?),
            (None, None) => None,
            _ => return Err(bad("slice_lo and slice_hi must both be set or both empty".into())),
        };
        out.push(PairRecord {
            ct: root.join(&row[0]),
            pet: root.join(&row[1]),
            dose: num(2)?,
            weight: num(3)?,
            slice_range,
        });
    }
    Ok(out)
}

pub fn format_pair_record(r: &PairRecord) -> String {
    let (lo, hi) = match r.slice_range {
        Some(s) => (s.lo.to_string(), s.hi.to_string()),
        None => (String::new(), String::new()),
    };
    format!("{},{},{},{},{},{}", r.ct.display(), r.pet.display(), r.dose, r.weight, lo, hi)
}

/// Loads one manifest record. Already-normalized pairs pass straight
/// through; raw pairs go through [`prepare_pair`].
pub fn load_scan_pair<T: Scalar>(r: &PairRecord, windows: (Window, Window)) -> Result<ScanPair<T>> {
    let ct: Volume3D<T> = load_volume(&r.ct)?;
    let pet: Volume3D<T> = load_volume(&r.pet)?;
    if ct.modality() == Modality::Normalized && pet.modality() == Modality::Normalized {
        ScanPair::new(ct, pet, windows.1, r.slice_range)
    } else {
        prepare_pair(&ct, &pet, r.dose, r.weight, windows, r.slice_range)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;
    use ndarray::Array3;

    fn const_volume(grid: &Grid, v: f32, m: Modality) -> Volume3D<f32> {
        Volume3D::from_raster(grid, vec![v; grid.len()], m).unwrap()
    }

    fn pair(depth: usize, range: Option<SliceRange>) -> ScanPair<f32> {
        let grid = Grid::new([4, 4, depth], [1.0; 3], [0.0; 3]).unwrap();
        let ct = const_volume(&grid, 0.5, Modality::Normalized);
        ScanPair::new(ct.clone(), ct, Window::SUV, range).unwrap()
    }

    #[test]
    fn slice_extraction() {
        assert_eq!(extract_slices(&pair(8, Some(SliceRange::new(2, 5).unwrap()))).unwrap().len(), 4);
        assert_eq!(extract_slices(&pair(8, None)).unwrap().len(), 8);
        assert!(SliceRange::new(5, 2).is_err());
        let grid = Grid::new([4, 4, 8], [1.0; 3], [0.0; 3]).unwrap();
        let v = const_volume(&grid, 0.5, Modality::Normalized);
        assert!(ScanPair::new(v.clone(), v, Window::SUV, Some(SliceRange::new(2, 8).unwrap())).is_err());
    }

    #[test]
    fn aligned_pair_passes_through() {
        let grid = Grid::new([3, 2, 2], [2.0, 2.0, 4.0], [0.0; 3]).unwrap();
        let ct = Volume3D::from_raster(&grid, (0..12).map(|i| i as f32 * 30.0 - 100.0).collect(), Modality::Ct).unwrap();
        let pet = Volume3D::from_raster(&grid, (0..12).map(|i| i as f32).collect(), Modality::Suv).unwrap();
        let p = prepare_pair(&ct, &pet, 1.0, 1.0, (Window::CT_LIVER, Window::SUV), None).unwrap();
        let expected = window_and_normalize(&pet, Window::SUV).unwrap();
        assert_eq!(p.pet(), &expected);
        assert_eq!(p.ct(), &window_and_normalize(&ct, Window::CT_LIVER).unwrap());
    }

    #[test]
    fn activity_is_converted_to_suv() {
        let grid = Grid::new([2, 2, 1], [1.0; 3], [0.0; 3]).unwrap();
        let ct = const_volume(&grid, 40.0, Modality::Ct);
        let act = const_volume(&grid, 5.0, Modality::PetActivity);
        let p = prepare_pair(&ct, &act, 350_000.0, 70_000.0, (Window::CT_LIVER, Window::SUV), None).unwrap();
        assert!(p.pet().raster().all(|v| (v - 0.05).abs() < 1e-7));
    }

    #[test]
    fn identity_augmentation() {
        let img = Array2::from_shape_fn((6, 5), |(y, x)| (y * 5 + x) as f32);
        let cfg = AugmentConfig { scale_range: (1.0, 1.0), translate_range_px: (0.0, 0.0), ..Default::default() };
        let s = SlicePair { ct: img.clone(), pet: img.clone() };
        let out = augment(&s, &cfg, &mut rng_from_seed(3)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn augmentation_is_deterministic_and_paired() {
        let mut ct = Array2::<f32>::zeros((32, 32));
        let mut pet = Array2::<f32>::zeros((32, 32));
        ct[[12, 20]] = 1.0;
        pet[[12, 20]] = 1.0;
        let s = SlicePair { ct, pet };
        let cfg = AugmentConfig { translate_range_px: (-4.0, 4.0), ..Default::default() };
        let a = augment(&s, &cfg, &mut rng_from_seed(11)).unwrap();
        let b = augment(&s, &cfg, &mut rng_from_seed(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ct, a.pet);
    }

    #[test]
    fn drawn_parameters_stay_in_range() {
        let cfg = AugmentConfig::default();
        let mut rng = rng_from_seed(5);
        for _ in 0..10_000 {
            let p = AugmentParams::draw(&cfg, &mut rng);
            assert!((0.9..=1.1).contains(&p.scale));
            assert!((-25.0..=25.0).contains(&p.tx) && (-25.0..=25.0).contains(&p.ty));
        }
    }

    #[test]
    fn noise_bounds_and_mean() {
        let cfg = AugmentConfig::default();
        let zero = Array2::<f64>::zeros((1000, 1000));
        let noisy = add_input_noise(&zero, &cfg, &mut rng_from_seed(9));
        assert!(noisy.iter().all(|v| v.abs() <= 0.005));
        let n = noisy.len() as f64;
        let mean = noisy.sum() / n;
        let sigma = 0.005 / 3.0;
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");

        let off = AugmentConfig { noise_bound: 0.0, ..cfg };
        let img = Array2::from_elem((3, 3), 0.25f32);
        assert_eq!(add_input_noise(&img, &off, &mut rng_from_seed(1)), img);
    }

    #[test]
    fn splits() {
        let items: Vec<u32> = (0..10).collect();
        let (train, val) = split_train_val(&items, 0.2, 4).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        assert_eq!(split_train_val(&items, 0.2, 4).unwrap(), (train.clone(), val.clone()));
        let mut all: Vec<u32> = train.into_iter().chain(val).collect();
        all.sort();
        assert_eq!(all, items);
        assert!(split_train_val::<u32>(&[], 0.2, 0).is_err());

        let groups = [0, 0, 1, 1, 2, 2, 3, 3, 4, 4];
        let (t, v) = split_train_val_by_group(&items, &groups, 0.2, 1).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
        assert_eq!(groups[v[0] as usize], groups[v[1] as usize]);
    }

    #[test]
    fn manifest_parsing() {
        let text = "# ct,pet,dose,weight,lo,hi\nscan0_ct,scan0_pet,350000,70000,2,5\nscan1_ct, scan1_pet, 1, 2, , \n";
        let recs = parse_pair_manifest(text, Path::new("data")).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].ct, Path::new("data/scan0_ct"));
        assert_eq!(recs[0].slice_range, Some(SliceRange { lo: 2, hi: 5 }));
        assert_eq!(recs[1].slice_range, None);
        assert_eq!(recs[1].weight, 2.0);
        assert!(matches!(parse_pair_manifest("a,b,1\n", Path::new("")), Err(Error::MalformedManifest { line: 1, .. })));
        let line = format_pair_record(&recs[0]);
        assert_eq!(parse_pair_manifest(&line, Path::new("")).unwrap()[0], recs[0]);
    }

    #[test]
    fn scan_pair_rejects_mismatched_grids() {
        let g1 = Grid::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let g2 = Grid::new([2, 2, 2], [2.0; 3], [0.0; 3]).unwrap();
        let a = const_volume(&g1, 0.1, Modality::Normalized);
        let b = Volume3D::new(Array3::from_elem((2, 2, 2), 0.1f32), g2.spacing, g2.offset, Modality::Normalized).unwrap();
        assert!(matches!(ScanPair::new(a, b, Window::SUV, None), Err(Error::GridMismatch(_))));
    }
}
