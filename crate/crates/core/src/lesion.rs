//! Lesion candidates, false-positive reduction with a synthetic-PET mask,
//! and TPR/FPR/FROC scoring.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::eval::suv_region_masks;
use crate::volume::{Grid, Modality, Volume3D};
use crate::Scalar;

pub const DEFAULT_PROB_THRESHOLDS: [f64; 5] = [0.80, 0.85, 0.90, 0.95, 0.99];
pub const OPERATING_POINT: f64 = 0.95;

/// A connected set of voxels, stored as sorted raster indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub id: usize,
    pub voxels: Vec<usize>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub grid: Grid,
    pub components: Vec<Component>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Binary mask of all component voxels.
    pub fn to_mask<T: Scalar>(&self) -> Result<Volume3D<T>> {
        let mut raster = vec![T::zero(); self.grid.len()];
        for c in &self.components {
            for &i in &c.voxels {
                raster[i] = T::one();
            }
        }
        Volume3D::from_raster(&self.grid, raster, Modality::Mask)
    }

    /// Sets each component's score to the maximum of `prob` over its voxels.
    pub fn with_scores<T: Scalar>(mut self, prob: &Volume3D<T>) -> Result<Self> {
        self.grid.ensure_matches(&prob.grid())?;
        let raster: Vec<T> = prob.raster().collect();
        for c in &mut self.components {
            c.score = c.voxels.iter().map(|&i| raster[i].as_f64()).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        }
        Ok(self)
    }

    fn voxel_owner(&self) -> Vec<Option<usize>> {
        let mut owner = vec![None; self.grid.len()];
        for (k, c) in self.components.iter().enumerate() {
            for &i in &c.voxels {
                owner[i] = Some(k);
            }
        }
        owner
    }
}

/// 26-connected labeling of the nonzero voxels. Components are numbered
/// from 1 in raster order of their first voxel.
pub fn connected_components<T: Scalar>(mask: &Volume3D<T>) -> CandidateSet {
    let grid = mask.grid();
    let [nx, ny, nz] = grid.dims;
    let fg: Vec<bool> = mask.raster().map(|v| v != T::zero()).collect();
    let mut label = vec![0usize; fg.len()];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..fg.len() {
        if !fg[start] || label[start] != 0 {
            continue;
        }
        let id = components.len() + 1;
        label[start] = id;
        stack.push(start);
        let mut voxels = Vec::new();
        while let Some(i) = stack.pop() {
            voxels.push(i);
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 || zz >= nz as i64 {
                            continue;
                        }
                        let j = (zz as usize * ny + yy as usize) * nx + xx as usize;
                        if fg[j] && label[j] == 0 {
                            label[j] = id;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        voxels.sort_unstable();
        components.push(Component { id, voxels, score: None });
    }
    CandidateSet { grid, components }
}

/// `{syn_pet > th}` with `th` in SUV units.
pub fn suv_threshold_mask<T: Scalar>(syn_pet: &Volume3D<T>, th: f64) -> Result<Volume3D<T>> {
    Ok(suv_region_masks(syn_pet, th)?.0)
}

/// Keeps the candidates overlapping `suv_mask` in at least
/// `min_overlap_voxels` voxels.
pub fn reduce_false_positives<T: Scalar>(cands: &CandidateSet, suv_mask: &Volume3D<T>, min_overlap_voxels: usize) -> Result<CandidateSet> {
    cands.grid.ensure_matches(&suv_mask.grid())?;
    let m: Vec<T> = suv_mask.raster().collect();
    let components = cands
        .components
        .iter()
        .filter(|c| c.voxels.iter().filter(|&&i| m[i] > T::zero()).count() >= min_overlap_voxels)
        .cloned()
        .collect();
    Ok(CandidateSet { grid: cands.grid, components })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    /// `None` when the scan has no lesions.
    pub tpr: Option<f64>,
    /// False-positive candidate count for the scan.
    pub fpr: f64,
    pub lesion_hits: Vec<bool>,
    pub false_positive_ids: Vec<usize>,
}

impl DetectionScore {
    pub fn hits(&self) -> usize {
        self.lesion_hits.iter().filter(|&&h| h).count()
    }
}

/// A lesion is hit when any candidate shares a voxel with it; a candidate
/// sharing no voxel with any lesion is a false positive.
pub fn score_detection(cands: &CandidateSet, gt: &CandidateSet) -> Result<DetectionScore> {
    cands.grid.ensure_matches(&gt.grid)?;
    let gt_owner = gt.voxel_owner();
    let mut lesion_hits = vec![false; gt.len()];
    let mut false_positive_ids = Vec::new();
    for c in &cands.components {
        let touched: HashSet<usize> = c.voxels.iter().filter_map(|&i| gt_owner[i]).collect();
        if touched.is_empty() {
            false_positive_ids.push(c.id);
        }
        for k in touched {
            lesion_hits[k] = true;
        }
    }
    let hits = lesion_hits.iter().filter(|&&h| h).count();
    let tpr = (!gt.is_empty()).then(|| hits as f64 / gt.len() as f64);
    Ok(DetectionScore { tpr, fpr: false_positive_ids.len() as f64, lesion_hits, false_positive_ids })
}

/// Inputs for one scan of a FROC sweep.
pub struct FrocScan<'a, T> {
    pub prob_map: &'a Volume3D<T>,
    pub gt: &'a CandidateSet,
    pub syn_pet: &'a Volume3D<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub mean_fpr: f64,
    /// Lesion hits over all scans divided by all lesions; `None` without lesions.
    pub tpr: Option<f64>,
    pub candidates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocOptions {
    pub use_fpr_layer: bool,
    pub suv_threshold: f64,
    pub min_overlap_voxels: usize,
}

impl Default for FrocOptions {
    fn default() -> Self {
        FrocOptions { use_fpr_layer: false, suv_threshold: 2.5, min_overlap_voxels: 1 }
    }
}

/// One `(mean FPR, TPR)` point per probability threshold.
pub fn froc<T: Scalar>(scans: &[FrocScan<T>], th_grid: &[f64], opts: FrocOptions) -> Result<Vec<FrocPoint>> {
    if th_grid.is_empty() {
        return Err(invalid("threshold grid is empty"));
    }
    if th_grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) || th_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("thresholds must be strictly ascending inside (0, 1)"));
    }
    if scans.is_empty() {
        return Err(invalid("no scans to evaluate"));
    }
    let mut suv_masks = Vec::with_capacity(scans.len());
    for s in scans {
        s.prob_map.grid().ensure_matches(&s.gt.grid)?;
        suv_masks.push(if opts.use_fpr_layer { Some(suv_threshold_mask(s.syn_pet, opts.suv_threshold)?) } else { None });
    }
    let mut points = Vec::with_capacity(th_grid.len());
    for &th in th_grid {
        let (mut fp, mut hits, mut lesions, mut n_cands) = (0.0, 0usize, 0usize, 0usize);
        for (s, m) in scans.iter().zip(&suv_masks) {
            let t = T::lit(th);
            let bin = s.prob_map.map(|v| if v > t { T::one() } else { T::zero() }, Modality::Mask)?;
            let mut cands = connected_components(&bin);
            if let Some(m) = m {
                cands = reduce_false_positives(&cands, m, opts.min_overlap_voxels)?;
            }
            let score = score_detection(&cands, s.gt)?;
            fp += score.fpr;
            hits += score.hits();
            lesions += s.gt.len();
            n_cands += cands.len();
        }
        points.push(FrocPoint {
            threshold: th,
            mean_fpr: fp / scans.len() as f64,
            tpr: (lesions > 0).then(|| hits as f64 / lesions as f64),
            candidates: n_cands,
        });
    }
    Ok(points)
}

/// Rows `threshold,curve,mean_fpr,tpr` for the raw and reduced curves.
pub fn write_froc_csv(raw: &[FrocPoint], reduced: &[FrocPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| invalid(e.to_string()))?;
    w.write_record(["threshold", "curve", "mean_fpr", "tpr"]).map_err(|e| invalid(e.to_string()))?;
    for (name, pts) in [("detection", raw), ("detection+fpr_layer", reduced)] {
        for p in pts {
            let tpr = p.tpr.map_or("undefined".to_string(), |v| v.to_string());
            w.write_record([p.threshold.to_string(), name.to_string(), p.mean_fpr.to_string(), tpr])
                .map_err(|e| invalid(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// FROC plot (TPR against mean FPR) of the two curves as a standalone SVG.
pub fn render_froc_svg(raw: &[FrocPoint], reduced: &[FrocPoint]) -> String {
    let (w, h, m) = (480.0, 360.0, 50.0);
    let max_fpr = raw.iter().chain(reduced).map(|p| p.mean_fpr).fold(1.0f64, f64::max).ceil();
    let px = |fpr: f64| m + fpr / max_fpr * (w - 2.0 * m);
    let py = |tpr: f64| h - m - tpr * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">mean false positives per scan</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">TPR</text>"#, h / 2.0, h / 2.0);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{t:.2}</text>"#, m - 6.0, py(t) + 4.0);
        let f = max_fpr * t;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{f:.1}</text>"#, px(f), h - m + 16.0);
    }
    for (pts, color, label, row) in [(raw, "#d62728", "detection", 0.0), (reduced, "#1f77b4", "detection + FP reduction", 1.0)] {
        let coords: Vec<String> = pts
            .iter()
            .filter_map(|p| p.tpr.map(|t| format!("{:.2},{:.2}", px(p.mean_fpr), py(t))))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, coords.join(" "));
        for p in pts {
            if let Some(t) = p.tpr {
                let r = if (p.threshold - OPERATING_POINT).abs() < 1e-12 { 5 } else { 3 };
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{color}"/>"#, px(p.mean_fpr), py(t));
            }
        }
        let ly = m + 16.0 * row;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{label}</text>"#, w - m - 160.0);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> Volume3D<f64> {
        let grid = Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap();
        let mut r = vec![0.0; grid.len()];
        for &[x, y, z] in on {
            r[(z * dims[1] + y) * dims[0] + x] = 1.0;
        }
        Volume3D::from_raster(&grid, r, Modality::Mask).unwrap()
    }

    fn cube(origin: [usize; 3], side: usize) -> Vec<[usize; 3]> {
        let mut v = Vec::new();
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    v.push([origin[0] + x, origin[1] + y, origin[2] + z]);
                }
            }
        }
        v
    }

    #[test]
    fn component_examples() {
        let mut on = cube([0, 0, 0], 2);
        on.extend(cube([5, 5, 5], 2));
        let cc = connected_components(&mask([8, 8, 8], &on));
        assert_eq!(cc.len(), 2);
        assert_eq!(cc.components.iter().map(|c| (c.id, c.voxels.len())).collect::<Vec<_>>(), vec![(1, 8), (2, 8)]);
        assert!(connected_components(&mask([4, 4, 4], &[])).is_empty());
        assert_eq!(connected_components(&mask([4, 4, 4], &[[0, 0, 0], [1, 1, 1]])).len(), 1);
        assert_eq!(connected_components(&mask([4, 4, 4], &[[0, 0, 0], [2, 0, 0]])).len(), 2);
    }

    #[test]
    fn threshold_mask_examples() {
        let grid = Grid::new([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let syn = Volume3D::from_raster(&grid, vec![1.0, 3.0], Modality::Suv).unwrap();
        assert_eq!(suv_threshold_mask(&syn, 2.5).unwrap().raster().collect::<Vec<_>>(), vec![0.0, 1.0]);
        let low = Volume3D::from_raster(&grid, vec![1.0, 2.0], Modality::Suv).unwrap();
        assert_eq!(suv_threshold_mask(&low, 2.5).unwrap().raster().collect::<Vec<_>>(), vec![0.0, 0.0]);
    }

    #[test]
    fn reduction_examples() {
        let cands = connected_components(&mask([8, 1, 1], &[[0, 0, 0], [1, 0, 0], [5, 0, 0]]));
        let suv = mask([8, 1, 1], &[[1, 0, 0], [2, 0, 0]]);
        let kept = reduce_false_positives(&cands, &suv, 1).unwrap();
        assert_eq!(kept.components.iter().map(|c| c.id).collect::<Vec<_>>(), vec![1]);
        assert!(reduce_false_positives(&cands, &suv, 2).unwrap().is_empty());
        assert!(reduce_false_positives(&cands, &mask([8, 1, 1], &[]), 1).unwrap().is_empty());
    }

    #[test]
    fn scoring_examples() {
        let gt = connected_components(&mask([10, 1, 1], &[[0, 0, 0], [4, 0, 0]]));
        let cands = connected_components(&mask([10, 1, 1], &[[0, 0, 0], [7, 0, 0], [9, 0, 0]]));
        let s = score_detection(&cands, &gt).unwrap();
        assert_eq!((s.tpr, s.fpr), (Some(0.5), 2.0));
        let s = score_detection(&gt, &gt).unwrap();
        assert_eq!((s.tpr, s.fpr), (Some(1.0), 0.0));
        let none = connected_components(&mask([10, 1, 1], &[]));
        let s = score_detection(&cands, &none).unwrap();
        assert_eq!((s.tpr, s.fpr), (None, 3.0));
    }

    #[test]
    fn froc_rejects_bad_grids() {
        let m = mask([2, 1, 1], &[]);
        let gt = connected_components(&m);
        let scans = [FrocScan { prob_map: &m, gt: &gt, syn_pet: &m }];
        assert!(froc(&scans, &[], FrocOptions::default()).is_err());
        assert!(froc(&scans, &[0.9, 0.8], FrocOptions::default()).is_err());
        assert!(froc(&scans, &[1.0], FrocOptions::default()).is_err());
    }
}
