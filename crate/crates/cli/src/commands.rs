use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use petsynth::dataprep::{
    extract_slices, load_scan_pair, read_pair_manifest, split_train_val_by_group, AugmentConfig, PairRecord, ScanPair,
    SlicePair,
};
use petsynth::eval::{aggregate_report, evaluate_pair, render_table};
use petsynth::lesion::{
    connected_components, froc, reduce_false_positives, render_froc_svg, score_detection, suv_threshold_mask,
    write_froc_csv, FrocOptions, FrocScan, DEFAULT_PROB_THRESHOLDS,
};
use petsynth::nn::NetworkKind;
use petsynth::phantom::{generate_candidates, generate_phantom_pair, manifest_line, CandidateConfig, PhantomConfig};
use petsynth::train::{
    discriminator_accuracy, fit_cgan, fit_fcn, load_checkpoint, save_checkpoint, synthesize, write_loss_csv,
    ReconLoss, Stage, TrainConfig, TrainState,
};
use petsynth::dataprep::{align_to_grid, SliceRange};
use petsynth::volume::{denormalize, load_volume, save_volume};
use petsynth::{Modality, Volume3D, Window};
use serde::Serialize;

use crate::manifest::Run;
use crate::settings::{exists, key, Key, Settings};
use crate::CliError;

type V = Volume3D<f32>;

pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: &'static [Key],
    pub run: fn(&Settings) -> Result<(), CliError>,
}

const OUT: Key = key("out", None, "output directory");
const SEED: Key = key("seed", Some("0"), "random seed");
const SUV_TH: Key = key("suv-th", Some("2.5"), "high-SUV threshold in SUV units");
const PROB_TH: Key = key("prob-th", Some("0.95"), "detection probability threshold");
const MIN_OVERLAP: Key = key("min-overlap", Some("1"), "voxels a candidate must share with the SUV mask");
const PAIRS: Key = key("pairs", None, "pair manifest (ct, pet, dose, weight, slice_lo, slice_hi)");

const TRAIN_KEYS: [Key; 13] = [
    PAIRS,
    OUT,
    SEED,
    key("steps", Some("1000"), "optimizer steps"),
    key("lr", Some("1e-5"), "Adam learning rate"),
    key("batch-size", Some("4"), "slices per step"),
    key("width-scale", None, "channel multiplier such as 1/4 [default: 1, or the FCN's for train-cgan]"),
    key("input-size", None, "slice size N or HxW [default: taken from the data]"),
    SUV_TH,
    key("augment", Some("true"), "random scale/translation augmentation"),
    key("val-fraction", Some("0"), "fraction of scans held out for validation loss"),
    key("patience", None, "early-stopping patience in validation rounds"),
    key("eval-every", Some("50"), "steps between validation rounds"),
];

pub const COMMANDS: &[CommandSpec] = &[
    CommandSpec {
        name: "phantom",
        about: "Generate synthetic CT/PET pairs with lesions and planted detection candidates",
        keys: &[OUT, SEED, key("count", Some("2"), "number of scans"), key("false-positives", Some("3"), "planted false candidates per scan")],
        run: phantom,
    },
    CommandSpec {
        name: "prepare",
        about: "Align PET to CT, convert to SUV and window both into normalized pairs",
        keys: &[PAIRS, OUT],
        run: prepare,
    },
    CommandSpec {
        name: "train-fcn",
        about: "Train the fully convolutional CT-to-PET network",
        keys: &{
            let [a, b, c, d, e, f, g, h, i, j, k, l, m] = TRAIN_KEYS;
            [a, b, c, d, e, f, g, h, i, j, k, l, m, key("loss", Some("weighted"), "weighted, split_suv or l2"), key("fcn-kind", Some("fcn4s"), "fcn4s, fcn8s or fcn2s")]
        },
        run: train_fcn,
    },
    CommandSpec {
        name: "train-cgan",
        about: "Refine a trained FCN with the conditional GAN",
        keys: &{
            let [a, b, c, d, e, f, g, h, i, j, k, l, m] = TRAIN_KEYS;
            [
                a, b, c, d, e, f, g, h, i, j, k, l, m,
                key("fcn", None, "FCN checkpoint"),
                key("lambda", Some("20"), "reconstruction weight"),
                key("loss", Some("split_suv"), "weighted, split_suv or l2"),
                key("joint-finetune", Some("false"), "also update the FCN copy"),
            ]
        },
        run: train_cgan,
    },
    CommandSpec {
        name: "synthesize",
        about: "Predict PET volumes in SUV from the CT of each pair",
        keys: &[PAIRS, OUT, key("fcn", None, "FCN checkpoint"), key("cgan", None, "optional cGAN checkpoint")],
        run: synthesize_cmd,
    },
    CommandSpec {
        name: "evaluate",
        about: "Score synthesized PET against reference PET over high and low SUV regions",
        keys: &[
            OUT,
            key("list", None, "CSV with scan,syn,ref,slice_lo,slice_hi columns (as written by synthesize)"),
            key("syn", None, "single synthesized volume (instead of --list)"),
            key("ref", None, "single reference volume (instead of --list)"),
            key("slices", None, "inclusive axial range lo:hi for --syn/--ref"),
            key("label", Some("model"), "row label in the report"),
            SUV_TH,
        ],
        run: evaluate,
    },
    CommandSpec {
        name: "reduce-fp",
        about: "Drop detection candidates that do not overlap the thresholded synthetic PET",
        keys: &[
            OUT,
            key("candidates", None, "candidate mask or probability map"),
            key("syn", None, "synthesized PET (SUV or normalized)"),
            key("gt", None, "optional ground-truth lesion mask for scoring"),
            PROB_TH,
            SUV_TH,
            MIN_OVERLAP,
        ],
        run: reduce_fp,
    },
    CommandSpec {
        name: "froc",
        about: "FROC curves with and without false-positive reduction",
        keys: &[
            OUT,
            key("list", None, "CSV with scan,prob,gt,syn columns"),
            key("thresholds", None, "comma-separated probability thresholds [default: 0.80,0.85,0.90,0.95,0.99]"),
            SUV_TH,
            MIN_OVERLAP,
        ],
        run: froc_cmd,
    },
];

fn load(path: &Path, run: &mut Run) -> Result<V, CliError> {
    run.input(path)?;
    Ok(load_volume(path)?)
}

fn windows() -> (Window, Window) {
    (Window::CT_LIVER, Window::SUV)
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| petsynth::Error::Io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| petsynth::Error::Io(e.into()))?;
    }
    w.flush().map_err(petsynth::Error::from)?;
    Ok(())
}

fn read_csv<R: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<R>, CliError> {
    exists(path)?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| petsynth::Error::Io(e.into()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| {
                CliError::Core(petsynth::Error::MalformedManifest { line: i + 2, reason: e.to_string() })
            })
        })
        .collect()
}

fn resolve(list: &Path, p: &str) -> PathBuf {
    list.parent().unwrap_or(Path::new("")).join(p)
}

fn print_json<S: Serialize>(v: &S) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn phantom(s: &Settings) -> Result<(), CliError> {
    let seed: u64 = s.get("seed")?;
    let count: u64 = s.get("count")?;
    let n_false: usize = s.get("false-positives")?;
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let mut run = Run::start("phantom", s.path("out")?)?;
    let mut pairs = String::new();
    let mut detections = Vec::new();
    for k in 0..count {
        let scan = format!("scan{k}");
        let p = generate_phantom_pair::<f32>(&PhantomConfig { seed: seed.wrapping_add(k), ..Default::default() })?;
        let aligned = align_to_grid(&p.pet, &p.ct.grid())?;
        let high = suv_threshold_mask(&aligned, 2.5)?;
        let cfg = CandidateConfig { n_false, seed: seed.wrapping_add(k), ..Default::default() };
        let (_, prob) = generate_candidates(&p.gt_lesions, &high, &cfg)?;
        for (suffix, v) in [("ct", &p.ct), ("pet", &p.pet), ("pet_on_ct", &aligned), ("gt", &p.gt_lesions), ("prob", &prob)] {
            let stem = format!("{scan}_{suffix}");
            save_volume(v, run.volume(&stem))?;
        }
        pairs.push_str(&manifest_line(
            Path::new(&format!("{scan}_ct")),
            Path::new(&format!("{scan}_pet")),
            p.liver_slice_range(),
        ));
        pairs.push('\n');
        detections.push(DetectionRow {
            scan,
            prob: format!("scan{k}_prob"),
            gt: format!("scan{k}_gt"),
            syn: format!("scan{k}_pet_on_ct"),
        });
        println!("scan{k}: {} lesions, liver slices {:?}", p.lesions.len(), p.liver_slice_range().map(|r| (r.lo, r.hi)));
    }
    fs::write(run.output("pairs.csv"), pairs).map_err(petsynth::Error::from)?;
    write_csv(&run.output("detections.csv"), &detections)?;
    run.finish(s.echo(), Some(seed))?;
    Ok(())
}

fn prepare(s: &Settings) -> Result<(), CliError> {
    let list = s.path("pairs")?;
    let records = read_pair_manifest(&list)?;
    let mut run = Run::start("prepare", s.path("out")?)?;
    run.input(&list)?;
    let mut lines = String::new();
    for (i, r) in records.iter().enumerate() {
        run.input(&r.ct)?;
        run.input(&r.pet)?;
        let pair: ScanPair<f32> = load_scan_pair(r, windows())?;
        let (ct, pet) = (format!("scan{i}_ct"), format!("scan{i}_pet"));
        save_volume(pair.ct(), run.volume(&ct))?;
        save_volume(pair.pet(), run.volume(&pet))?;
        lines.push_str(&manifest_line(Path::new(&ct), Path::new(&pet), pair.slice_range()));
        lines.push('\n');
    }
    fs::write(run.output("pairs.csv"), lines).map_err(petsynth::Error::from)?;
    println!("prepared {} pairs", records.len());
    run.finish(s.echo(), None)?;
    Ok(())
}

/// Slices of every pair plus the index of the scan each came from.
fn load_slices(list: &Path, run: &mut Run) -> Result<(Vec<SlicePair<f32>>, Vec<usize>), CliError> {
    run.input(list)?;
    let records: Vec<PairRecord> = read_pair_manifest(list)?;
    if records.is_empty() {
        return Err(CliError::Core(petsynth::Error::EmptyRange(format!("{} lists no pairs", list.display()))));
    }
    let (mut slices, mut groups) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        run.input(&r.ct)?;
        run.input(&r.pet)?;
        let pair = load_scan_pair::<f32>(r, windows())?;
        let sl = extract_slices(&pair)?;
        groups.extend(std::iter::repeat(i).take(sl.len()));
        slices.extend(sl);
    }
    Ok((slices, groups))
}

fn apply_train_settings(s: &Settings, cfg: &mut TrainConfig, data: &[SlicePair<f32>]) -> Result<(), CliError> {
    cfg.seed = s.get("seed")?;
    cfg.max_steps = s.get("steps")?;
    cfg.learning_rate = s.get("lr")?;
    cfg.batch_size = s.get("batch-size")?;
    cfg.suv_threshold = s.get("suv-th")?;
    cfg.augment = s.get("augment")?;
    cfg.eval_every = s.get("eval-every")?;
    cfg.early_stopping_patience = s.opt("patience")?;
    if let Some(w) = s.opt::<Ratio<u32>>("width-scale")? {
        cfg.width_scale = w;
    }
    let data_size = data[0].ct.dim();
    cfg.input_size = s.size("input-size")?.unwrap_or(data_size);
    if cfg.input_size != data_size {
        return Err(CliError::Core(petsynth::Error::ShapeMismatch(format!(
            "slices are {}x{} but --input-size is {}x{}",
            data_size.0, data_size.1, cfg.input_size.0, cfg.input_size.1
        ))));
    }
    cfg.augment_config = AugmentConfig::default().scaled_to(cfg.input_size.0.min(cfg.input_size.1));
    cfg.validate()?;
    Ok(())
}

fn split(s: &Settings, data: Vec<SlicePair<f32>>, groups: &[usize]) -> Result<(Vec<SlicePair<f32>>, Option<Vec<SlicePair<f32>>>), CliError> {
    let fraction: f64 = s.get("val-fraction")?;
    if fraction == 0.0 {
        return Ok((data, None));
    }
    let (train, val) = split_train_val_by_group(&data, groups, fraction, s.get("seed")?)?;
    if train.is_empty() || val.is_empty() {
        return Err(CliError::Usage(format!("--val-fraction {fraction} leaves an empty split")));
    }
    Ok((train, Some(val)))
}

fn report_losses(state: &TrainState<f32>) {
    let mut last: BTreeMap<&str, f64> = BTreeMap::new();
    for r in &state.history {
        last.insert(&r.name, r.value);
    }
    let summary: Vec<String> = last.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
    println!("step {}: {}", state.step, summary.join(" "));
}

fn train_fcn(s: &Settings) -> Result<(), CliError> {
    let mut run = Run::start("train-fcn", s.path("out")?)?;
    let (data, groups) = load_slices(&s.path("pairs")?, &mut run)?;
    let mut cfg = TrainConfig::default();
    apply_train_settings(s, &mut cfg, &data)?;
    cfg.fcn_loss = s.get::<ReconLoss>("loss")?;
    cfg.fcn_kind = s.get::<NetworkKind>("fcn-kind")?;
    if !matches!(cfg.fcn_kind, NetworkKind::Fcn4s | NetworkKind::Fcn8s | NetworkKind::Fcn2s) {
        return Err(CliError::Usage(format!("--fcn-kind {} is not an FCN", cfg.fcn_kind.as_str())));
    }
    let (train, val) = split(s, data, &groups)?;
    let mut state = TrainState::new_fcn(&cfg)?;
    fit_fcn(&mut state, &train, val.as_deref())?;
    report_losses(&state);
    save_checkpoint(&state, run.output("fcn.ckpt"))?;
    write_loss_csv(&state.history, run.output("loss.csv"))?;
    run.finish(s.echo(), Some(cfg.seed))?;
    Ok(())
}

fn load_state(path: &Path, stage: Stage, run: &mut Run) -> Result<TrainState<f32>, CliError> {
    run.input(path)?;
    let st = load_checkpoint::<f32>(path)?;
    if st.stage != stage {
        return Err(CliError::Core(petsynth::Error::CorruptCheckpoint(format!(
            "{} holds a {:?}-stage state, expected {stage:?}",
            path.display(),
            st.stage
        ))));
    }
    Ok(st)
}

fn train_cgan(s: &Settings) -> Result<(), CliError> {
    let mut run = Run::start("train-cgan", s.path("out")?)?;
    let fcn = load_state(&s.path("fcn")?, Stage::Fcn, &mut run)?;
    let (data, groups) = load_slices(&s.path("pairs")?, &mut run)?;
    let mut cfg = fcn.config.clone();
    apply_train_settings(s, &mut cfg, &data)?;
    cfg.lambda = s.get("lambda")?;
    cfg.cgan_loss = s.get::<ReconLoss>("loss")?;
    cfg.joint_finetune = s.get("joint-finetune")?;
    cfg.validate()?;
    let (train, val) = split(s, data, &groups)?;
    let mut state = TrainState::new_cgan(&cfg, &fcn)?;
    fit_cgan(&mut state, &train, &fcn, val.as_deref())?;
    report_losses(&state);
    if let Some(v) = &val {
        let acc = discriminator_accuracy(v, &fcn, &state)?;
        println!("held-out discriminator accuracy {:.3} (paired {:.3})", acc.threshold, acc.paired);
    }
    save_checkpoint(&state, run.output("cgan.ckpt"))?;
    write_loss_csv(&state.history, run.output("loss.csv"))?;
    run.finish(s.echo(), Some(cfg.seed))?;
    Ok(())
}

#[derive(Debug, Serialize, serde::Deserialize)]
struct SynthRow {
    scan: String,
    syn: String,
    #[serde(rename = "ref")]
    reference: String,
    slice_lo: Option<usize>,
    slice_hi: Option<usize>,
}

#[derive(Debug, Serialize, serde::Deserialize)]
struct DetectionRow {
    scan: String,
    prob: String,
    gt: String,
    syn: String,
}

fn synthesize_cmd(s: &Settings) -> Result<(), CliError> {
    let mut run = Run::start("synthesize", s.path("out")?)?;
    let fcn = load_state(&s.path("fcn")?, Stage::Fcn, &mut run)?;
    let cgan = match s.opt_path("cgan")? {
        Some(p) => Some(load_state(&p, Stage::Cgan, &mut run)?),
        None => None,
    };
    let list = s.path("pairs")?;
    run.input(&list)?;
    let mut rows = Vec::new();
    for (i, r) in read_pair_manifest(&list)?.iter().enumerate() {
        run.input(&r.ct)?;
        run.input(&r.pet)?;
        let pair = load_scan_pair::<f32>(r, windows())?;
        let syn = synthesize(pair.ct(), &fcn, cgan.as_ref())?;
        let syn = denormalize(&syn, pair.suv_window(), Modality::Suv)?;
        let stem = format!("scan{i}_syn");
        save_volume(&syn, run.volume(&stem))?;
        // reference PET already on the CT grid, kept next to the prediction
        let ref_stem = format!("scan{i}_ref");
        save_volume(&denormalize(pair.pet(), pair.suv_window(), Modality::Suv)?, run.volume(&ref_stem))?;
        rows.push(SynthRow {
            scan: format!("scan{i}"),
            syn: stem,
            reference: ref_stem,
            slice_lo: pair.slice_range().map(|r| r.lo),
            slice_hi: pair.slice_range().map(|r| r.hi),
        });
    }
    write_csv(&run.output("synthesized.csv"), &rows)?;
    println!("synthesized {} volumes", rows.len());
    run.finish(s.echo(), None)?;
    Ok(())
}

fn slice_range(lo: Option<usize>, hi: Option<usize>) -> Result<Option<SliceRange>, CliError> {
    match (lo, hi) {
        (Some(lo), Some(hi)) => Ok(Some(SliceRange::new(lo, hi)?)),
        (None, None) => Ok(None),
        _ => Err(CliError::Usage("slice_lo and slice_hi must both be set or both empty".into())),
    }
}

fn evaluate(s: &Settings) -> Result<(), CliError> {
    let th: f64 = s.get("suv-th")?;
    let mut run = Run::start("evaluate", s.path("out")?)?;
    let mut jobs = Vec::new();
    match (s.opt_path("list")?, s.opt_path("syn")?, s.opt_path("ref")?) {
        (Some(list), None, None) => {
            run.input(&list)?;
            for row in read_csv::<SynthRow>(&list)? {
                let range = slice_range(row.slice_lo, row.slice_hi)?;
                jobs.push((row.scan, resolve(&list, &row.syn), resolve(&list, &row.reference), range));
            }
        }
        (None, Some(syn), Some(reference)) => {
            let range = match s.raw("slices").filter(|v| !v.is_empty()) {
                Some(v) => {
                    let (lo, hi) = v
                        .split_once(':')
                        .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
                        .ok_or_else(|| CliError::Usage(format!("--slices {v:?}: expected lo:hi")))?;
                    Some(SliceRange::new(lo, hi)?)
                }
                None => None,
            };
            let scan = syn.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            jobs.push((scan, syn, reference, range));
        }
        _ => return Err(CliError::Usage("give either --list or both --syn and --ref".into())),
    }
    let mut records = Vec::new();
    for (scan, syn, reference, range) in jobs {
        let syn = load(&syn, &mut run)?;
        let reference = load(&reference, &mut run)?;
        records.push(evaluate_pair(&scan, &syn, &reference, range, th)?);
    }
    let label = s.raw("label").unwrap_or("model").to_string();
    let report = aggregate_report(&label, records)?;
    report.write_csv(run.output("report.csv"))?;
    let table = render_table(std::slice::from_ref(&report));
    fs::write(run.output("report.md"), &table).map_err(petsynth::Error::from)?;
    print!("{table}");
    run.finish(s.echo(), None)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReductionSummary {
    candidates_before: usize,
    candidates_after: usize,
    removed_ids: Vec<usize>,
    before: Option<petsynth::lesion::DetectionScore>,
    after: Option<petsynth::lesion::DetectionScore>,
}

fn reduce_fp(s: &Settings) -> Result<(), CliError> {
    let prob_th: f64 = s.get("prob-th")?;
    let suv_th: f64 = s.get("suv-th")?;
    let min_overlap: usize = s.get("min-overlap")?;
    let mut run = Run::start("reduce-fp", s.path("out")?)?;
    let cand_map = load(&s.path("candidates")?, &mut run)?;
    let syn = load(&s.path("syn")?, &mut run)?;
    let binary = cand_map.map(|v| if f64::from(v) > prob_th { 1.0 } else { 0.0 }, Modality::Mask)?;
    let cands = connected_components(&binary).with_scores(&cand_map)?;
    let kept = reduce_false_positives(&cands, &suv_threshold_mask(&syn, suv_th)?, min_overlap)?;
    let removed_ids =
        cands.components.iter().filter(|c| !kept.components.iter().any(|k| k.id == c.id)).map(|c| c.id).collect();
    let (before, after) = match s.opt_path("gt")? {
        Some(p) => {
            let gt = connected_components(&load(&p, &mut run)?);
            (Some(score_detection(&cands, &gt)?), Some(score_detection(&kept, &gt)?))
        }
        None => (None, None),
    };
    save_volume(&kept.to_mask::<f32>()?, run.volume("reduced"))?;
    let summary = ReductionSummary { candidates_before: cands.len(), candidates_after: kept.len(), removed_ids, before, after };
    let json = serde_json::to_string_pretty(&summary).expect("serializable");
    fs::write(run.output("detection.json"), json + "\n").map_err(petsynth::Error::from)?;
    print_json(&summary);
    run.finish(s.echo(), None)?;
    Ok(())
}

fn froc_cmd(s: &Settings) -> Result<(), CliError> {
    let list = s.path("list")?;
    let thresholds = s.list_f64("thresholds")?.unwrap_or_else(|| DEFAULT_PROB_THRESHOLDS.to_vec());
    let base = FrocOptions { suv_threshold: s.get("suv-th")?, min_overlap_voxels: s.get("min-overlap")?, ..Default::default() };
    let mut run = Run::start("froc", s.path("out")?)?;
    run.input(&list)?;
    let mut volumes = Vec::new();
    for row in read_csv::<DetectionRow>(&list)? {
        let prob = load(&resolve(&list, &row.prob), &mut run)?;
        let gt = connected_components(&load(&resolve(&list, &row.gt), &mut run)?);
        let syn = load(&resolve(&list, &row.syn), &mut run)?;
        volumes.push((prob, gt, syn));
    }
    let scans: Vec<FrocScan<f32>> = volumes.iter().map(|(p, g, y)| FrocScan { prob_map: p, gt: g, syn_pet: y }).collect();
    let raw = froc(&scans, &thresholds, FrocOptions { use_fpr_layer: false, ..base })?;
    let reduced = froc(&scans, &thresholds, FrocOptions { use_fpr_layer: true, ..base })?;
    write_froc_csv(&raw, &reduced, run.output("froc.csv"))?;
    fs::write(run.output("froc.svg"), render_froc_svg(&raw, &reduced)).map_err(petsynth::Error::from)?;
    println!("threshold  fpr(raw)  fpr(reduced)  tpr");
    for (a, b) in raw.iter().zip(&reduced) {
        let tpr = a.tpr.map_or("undefined".to_string(), |t| format!("{t:.3}"));
        println!("{:<9}  {:<8.3}  {:<12.3}  {tpr}", a.threshold, a.mean_fpr, b.mean_fpr);
    }
    run.finish(s.echo(), None)?;
    Ok(())
}
