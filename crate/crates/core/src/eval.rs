//! Reconstruction metrics split by SUV region.
//!
//! Normalized inputs are mapped back to SUV through the SUV window before
//! any metric is computed, so the PSNR peak of 20 is the window maximum.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::dataprep::SliceRange;
use crate::error::{invalid, Error, Result};
use crate::volume::{Modality, Volume3D, Window};
use crate::Scalar;

pub const PSNR_PEAK: f64 = 20.0;
pub const HIGH_SUV_THRESHOLD: f64 = 2.5;

/// Voxel values in SUV units, in raster order.
fn suv_values<T: Scalar>(v: &Volume3D<T>) -> Result<Vec<f64>> {
    match v.modality() {
        Modality::Suv => Ok(v.data().iter().map(|x| x.as_f64()).collect()),
        Modality::Normalized => Ok(v.data().iter().map(|x| Window::SUV.from_normalized(x.as_f64())).collect()),
        m => Err(invalid(format!("metrics need SUV or NORMALIZED volumes, got {}", m.as_str()))),
    }
}

fn selected<T: Scalar>(syn: &Volume3D<T>, reference: &Volume3D<T>, mask: Option<&Volume3D<T>>) -> Result<Vec<(f64, f64)>> {
    syn.grid().ensure_matches(&reference.grid())?;
    let a = suv_values(syn)?;
    let b = suv_values(reference)?;
    let keep: Vec<bool> = match mask {
        None => vec![true; a.len()],
        Some(m) => {
            if m.modality() != Modality::Mask {
                return Err(invalid("mask volume must have MASK modality"));
            }
            m.grid().ensure_matches(&syn.grid())?;
            m.data().iter().map(|&v| v > T::zero()).collect()
        }
    };
    Ok(a.into_iter().zip(b).zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect())
}

/// Mean absolute error in SUV over the masked voxels; `None` when the mask
/// selects nothing.
pub fn mae<T: Scalar>(syn: &Volume3D<T>, reference: &Volume3D<T>, mask: Option<&Volume3D<T>>) -> Result<Option<f64>> {
    let pairs = selected(syn, reference, mask)?;
    Ok(mae_of(&pairs))
}

/// `10·log10(20² / MSE)` in SUV over the masked voxels. Returns
/// `Some(f64::INFINITY)` for a perfect match and `None` for an empty mask.
pub fn psnr<T: Scalar>(syn: &Volume3D<T>, reference: &Volume3D<T>, mask: Option<&Volume3D<T>>) -> Result<Option<f64>> {
    let pairs = selected(syn, reference, mask)?;
    Ok(mse_of(&pairs).map(psnr_from_mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()
    }
}

fn mae_of(pairs: &[(f64, f64)]) -> Option<f64> {
    (!pairs.is_empty()).then(|| pairs.iter().map(|(a, b)| (a - b).abs()).sum::<f64>() / pairs.len() as f64)
}

fn mse_of(pairs: &[(f64, f64)]) -> Option<f64> {
    (!pairs.is_empty()).then(|| pairs.iter().map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pairs.len() as f64)
}

/// `(high, low)` masks: high is `reference > threshold` (SUV units; the
/// threshold is converted for normalized input), low its complement.
pub fn suv_region_masks<T: Scalar>(reference: &Volume3D<T>, threshold: f64) -> Result<(Volume3D<T>, Volume3D<T>)> {
    let th = match reference.modality() {
        Modality::Suv => threshold,
        Modality::Normalized => Window::SUV.to_normalized(threshold),
        m => return Err(invalid(format!("region masks need SUV or NORMALIZED input, got {}", m.as_str()))),
    };
    let th = T::lit(th);
    let high = reference.map(|v| if v > th { T::one() } else { T::zero() }, Modality::Mask)?;
    let low = high.map(|v| T::one() - v, Modality::Mask)?;
    Ok((high, low))
}

/// Metrics for one scan. High-region metrics are `None` when the scan has no
/// high-SUV voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub scan: String,
    pub mae_high: Option<f64>,
    pub psnr_high: Option<f64>,
    pub mae_low: Option<f64>,
    pub psnr_low: Option<f64>,
    pub mae_avg: Option<f64>,
    pub psnr_avg: Option<f64>,
}

fn average(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => Some((a + b) / 2.0),
        (x, None) | (None, x) => x,
    }
}

impl ScanRecord {
    pub fn from_parts(scan: impl Into<String>, mae_high: Option<f64>, psnr_high: Option<f64>, mae_low: Option<f64>, psnr_low: Option<f64>) -> Self {
        ScanRecord {
            scan: scan.into(),
            mae_high,
            psnr_high,
            mae_low,
            psnr_low,
            mae_avg: average(mae_high, mae_low),
            psnr_avg: average(psnr_high, psnr_low),
        }
    }

    pub fn columns(&self) -> [Option<f64>; 6] {
        [self.mae_high, self.psnr_high, self.mae_low, self.psnr_low, self.mae_avg, self.psnr_avg]
    }
}

/// Evaluates one synthesized volume against its reference, optionally
/// restricted to an axial slice range.
pub fn evaluate_pair<T: Scalar>(
    scan: &str,
    syn: &Volume3D<T>,
    reference: &Volume3D<T>,
    slice_range: Option<SliceRange>,
    threshold: f64,
) -> Result<ScanRecord> {
    syn.grid().ensure_matches(&reference.grid())?;
    let (mut high, mut low) = suv_region_masks(reference, threshold)?;
    if let Some(r) = slice_range {
        let nz = reference.dims()[2];
        if r.hi >= nz {
            return Err(Error::EmptyRange(format!("slice range [{}, {}] outside depth {nz}", r.lo, r.hi)));
        }
        let mut keep = Array3::<T>::zeros(high.data().raw_dim());
        keep.slice_mut(s![r.lo..=r.hi, .., ..]).fill(T::one());
        high = high.with_data(high.data() * &keep, Modality::Mask)?;
        low = low.with_data(low.data() * &keep, Modality::Mask)?;
    }
    Ok(ScanRecord::from_parts(
        scan,
        mae(syn, reference, Some(&high))?,
        psnr(syn, reference, Some(&high))?,
        mae(syn, reference, Some(&low))?,
        psnr(syn, reference, Some(&low))?,
    ))
}

/// Mean and population standard deviation of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
    /// Records contributing to the statistics.
    pub n: usize,
    /// Records excluded because the metric was undefined.
    pub excluded: usize,
}

impl ColumnStats {
    /// `None` when every record is undefined. Infinite PSNR values make the
    /// mean infinite; the spread is then 0 if all values are infinite and
    /// infinite otherwise.
    pub fn of(values: &[Option<f64>]) -> Option<ColumnStats> {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let excluded = values.len() - defined.len();
        if defined.is_empty() {
            return None;
        }
        let n = defined.len();
        if defined.iter().any(|v| v.is_infinite()) {
            let all = defined.iter().all(|v| v.is_infinite());
            return Some(ColumnStats { mean: f64::INFINITY, std: if all { 0.0 } else { f64::INFINITY }, n, excluded });
        }
        let mean = defined.iter().sum::<f64>() / n as f64;
        let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Some(ColumnStats { mean, std: var.sqrt(), n, excluded })
    }
}

pub const COLUMNS: [&str; 6] = ["mae_high", "psnr_high", "mae_low", "psnr_low", "mae_avg", "psnr_avg"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub label: String,
    pub records: Vec<ScanRecord>,
    /// One entry per column of [`COLUMNS`].
    pub stats: Vec<Option<ColumnStats>>,
    /// Scans without any high-SUV voxel.
    pub missing_high: usize,
}

pub fn aggregate_report(label: &str, records: Vec<ScanRecord>) -> Result<ReconReport> {
    if records.is_empty() {
        return Err(invalid("cannot aggregate an empty set of records"));
    }
    let stats = (0..COLUMNS.len())
        .map(|c| ColumnStats::of(&records.iter().map(|r| r.columns()[c]).collect::<Vec<_>>()))
        .collect();
    let missing_high = records.iter().filter(|r| r.mae_high.is_none()).count();
    Ok(ReconReport { label: label.to_string(), records, stats, missing_high })
}

fn cell(v: Option<f64>) -> String {
    match v {
        None => "undefined".into(),
        Some(v) if v.is_infinite() => "inf".into(),
        Some(v) => format!("{v}"),
    }
}

impl ReconReport {
    /// Rows `label,scan,<columns>` followed by `mean` and `std` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| invalid(e.to_string()))?;
        let mut header = vec!["label".to_string(), "scan".to_string()];
        header.extend(COLUMNS.iter().map(|c| c.to_string()));
        w.write_record(&header).map_err(|e| invalid(e.to_string()))?;
        for r in &self.records {
            let mut row = vec![self.label.clone(), r.scan.clone()];
            row.extend(r.columns().iter().map(|&v| cell(v)));
            w.write_record(&row).map_err(|e| invalid(e.to_string()))?;
        }
        for (name, pick) in [("mean", 0usize), ("std", 1)] {
            let mut row = vec![self.label.clone(), name.to_string()];
            row.extend(self.stats.iter().map(|s| cell(s.map(|s| if pick == 0 { s.mean } else { s.std }))));
            w.write_record(&row).map_err(|e| invalid(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn pm(s: Option<ColumnStats>) -> String {
    match s {
        None => "undefined".into(),
        Some(s) if s.mean.is_infinite() => "inf".into(),
        Some(s) => format!("{:.2} ± {:.2}", s.mean, s.std),
    }
}

/// Text table with one row per method: high, low and average MAE/PSNR.
pub fn render_table(reports: &[ReconReport]) -> String {
    let header = ["Method", "High MAE", "High PSNR", "Low MAE", "Low PSNR", "Avg MAE", "Avg PSNR"];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| std::iter::once(r.label.clone()).chain(r.stats.iter().map(|&s| pm(s))).collect())
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<String>, out: &mut String| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "| {} |", padded.join(" | "));
    };
    line(header.iter().map(|s| s.to_string()).collect(), &mut out);
    line(widths.iter().map(|w| "-".repeat(*w)).collect(), &mut out);
    for r in rows {
        line(r, &mut out);
    }
    for r in reports.iter().filter(|r| r.missing_high > 0) {
        let _ = writeln!(out, "{}: {} scan(s) without high-SUV voxels excluded from high columns", r.label, r.missing_high);
    }
    out
}
