//! Windowing of cleaned records into (input, target) segments, percentile
//! quality control, patient-wise fold partitioning, and the on-disk array
//! store shared by segments and embeddings.
//!
//! Store layout: `<name>.manifest.json` describes the array (`shape`, lead
//! order, one provenance row per leading index) and `<name>.f32` holds the
//! values as little-endian 32-bit floats in row-major order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leads::{segment_leads, INPUT_LEADS, TARGET_LEADS};
use crate::wfdb::SignalRecord;

pub const WINDOW: usize = 256;
pub const HOP: usize = 64;
pub const STORE_FORMAT: &str = "leadrecon-store/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    /// Folds 1–8 train, 9 validation, 10 test.
    pub fn from_fold(fold: u8) -> Option<Partition> {
        match fold {
            1..=8 => Some(Partition::Train),
            9 => Some(Partition::Val),
            10 => Some(Partition::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

/// One window: inputs (I, II, V2) and targets (V1, V3–V6), row-major in mV.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub x: Vec<f32>,
    pub y: Vec<f32>,
    pub record_id: String,
    pub patient_id: String,
    pub start: usize,
    pub fold: u8,
    /// High-confidence diagnostic codes of the source record.
    pub labels: Vec<String>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.x.len() / INPUT_LEADS.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Row `lead` of the 8-lead stack (inputs then targets).
    pub fn lead(&self, lead: usize) -> &[f32] {
        let t = self.len();
        if lead < INPUT_LEADS.len() {
            &self.x[lead * t..(lead + 1) * t]
        } else {
            let k = lead - INPUT_LEADS.len();
            &self.y[k * t..(k + 1) * t]
        }
    }

    pub fn target(&self, k: usize) -> &[f32] {
        self.lead(INPUT_LEADS.len() + k)
    }
}

/// Offsets 0, hop, 2·hop, … of every full window.
pub fn segment_offsets(n_samples: usize, window: usize, hop: usize) -> Vec<usize> {
    if n_samples < window || hop == 0 {
        return Vec::new();
    }
    (0..=(n_samples - window) / hop).map(|k| k * hop).collect()
}

/// Non-overlapping tiling plus one right-aligned window covering the tail.
pub fn nonoverlap_offsets(n_samples: usize, window: usize) -> Vec<usize> {
    if n_samples < window || window == 0 {
        return Vec::new();
    }
    let mut offs: Vec<usize> = (0..n_samples / window).map(|k| k * window).collect();
    if n_samples % window != 0 {
        offs.push(n_samples - window);
    }
    offs
}

fn gather_leads(rec: &SignalRecord) -> Result<Vec<&[f64]>> {
    if (rec.fs - crate::dsp::TARGET_FS).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "record {} is at {} Hz; segmentation requires 100 Hz",
            rec.record_id, rec.fs
        )));
    }
    segment_leads()
        .map(|name| {
            rec.lead(name).ok_or_else(|| {
                Error::Precondition(format!("record {} has no lead {name}", rec.record_id))
            })
        })
        .collect()
}

fn cut(rec: &SignalRecord, rows: &[&[f64]], offsets: &[usize], window: usize) -> Vec<Segment> {
    let labels = rec.labels.high_confidence();
    let n_in = INPUT_LEADS.len();
    offsets
        .iter()
        .map(|&start| {
            let take = |r: &[&[f64]]| -> Vec<f32> {
                r.iter()
                    .flat_map(|row| row[start..start + window].iter().map(|&v| v as f32))
                    .collect()
            };
            Segment {
                x: take(&rows[..n_in]),
                y: take(&rows[n_in..]),
                record_id: rec.record_id.clone(),
                patient_id: rec.patient_id.clone(),
                start,
                fold: rec.fold.unwrap_or(0),
                labels: labels.clone(),
            }
        })
        .collect()
}

/// Overlapping windows for training and validation.
pub fn segment_record(rec: &SignalRecord, window: usize, hop: usize) -> Result<Vec<Segment>> {
    let rows = gather_leads(rec)?;
    Ok(cut(rec, &rows, &segment_offsets(rec.n_samples(), window, hop), window))
}

/// Non-overlapping windows for testing and record reassembly.
pub fn segment_record_nonoverlap(rec: &SignalRecord, window: usize) -> Result<Vec<Segment>> {
    let rows = gather_leads(rec)?;
    Ok(cut(rec, &rows, &nonoverlap_offsets(rec.n_samples(), window), window))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    /// Closed-interval membership.
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadBounds {
    pub lead: String,
    pub peak_to_peak: Interval,
    pub rms: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcBounds {
    pub lo_pct: f64,
    pub hi_pct: f64,
    pub n_segments: usize,
    pub leads: Vec<LeadBounds>,
}

impl QcBounds {
    /// Leads whose lower and upper bound coincide for some criterion.
    pub fn degenerate_leads(&self) -> Vec<&str> {
        self.leads
            .iter()
            .filter(|b| b.peak_to_peak.lo >= b.peak_to_peak.hi || b.rms.lo >= b.rms.hi)
            .map(|b| b.lead.as_str())
            .collect()
    }
}

fn peak_to_peak(x: &[f32]) -> f64 {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    hi - lo
}

fn rms(x: &[f32]) -> f64 {
    (x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Empirical percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-lead percentile bounds on peak-to-peak amplitude and RMS.
/// Fit on training segments only; frozen for everything else.
pub fn fit_qc_bounds(segments: &[Segment], lo_pct: f64, hi_pct: f64) -> Result<QcBounds> {
    if segments.is_empty() {
        return Err(Error::Precondition("cannot fit QC bounds on zero segments".into()));
    }
    if !(0.0..=100.0).contains(&lo_pct) || !(lo_pct..=100.0).contains(&hi_pct) {
        return Err(Error::Config(format!("invalid QC percentiles {lo_pct}, {hi_pct}")));
    }
    let leads = segment_leads()
        .enumerate()
        .map(|(l, name)| {
            let mut ptp: Vec<f64> = segments.iter().map(|s| peak_to_peak(s.lead(l))).collect();
            let mut r: Vec<f64> = segments.iter().map(|s| rms(s.lead(l))).collect();
            ptp.sort_by(f64::total_cmp);
            r.sort_by(f64::total_cmp);
            LeadBounds {
                lead: name.to_string(),
                peak_to_peak: Interval {
                    lo: percentile(&ptp, lo_pct),
                    hi: percentile(&ptp, hi_pct),
                },
                rms: Interval {
                    lo: percentile(&r, lo_pct),
                    hi: percentile(&r, hi_pct),
                },
            }
        })
        .collect();
    Ok(QcBounds {
        lo_pct,
        hi_pct,
        n_segments: segments.len(),
        leads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcCriterion {
    PeakToPeak,
    Rms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcRejection {
    pub lead: String,
    pub criterion: QcCriterion,
    pub value: f64,
    pub bounds: Interval,
}

#[derive(Debug, Clone, Default)]
pub struct QcOutcome {
    pub kept: Vec<Segment>,
    pub rejected: Vec<(Segment, Vec<QcRejection>)>,
}

/// Reasons a segment fails QC; empty when it passes.
pub fn qc_check(seg: &Segment, bounds: &QcBounds) -> Vec<QcRejection> {
    let mut out = Vec::new();
    for (l, b) in bounds.leads.iter().enumerate() {
        let row = seg.lead(l);
        let p = peak_to_peak(row);
        if !b.peak_to_peak.contains(p) {
            out.push(QcRejection {
                lead: b.lead.clone(),
                criterion: QcCriterion::PeakToPeak,
                value: p,
                bounds: b.peak_to_peak,
            });
        }
        let r = rms(row);
        if !b.rms.contains(r) {
            out.push(QcRejection {
                lead: b.lead.clone(),
                criterion: QcCriterion::Rms,
                value: r,
                bounds: b.rms,
            });
        }
    }
    out
}

pub fn apply_qc(segments: Vec<Segment>, bounds: &QcBounds) -> QcOutcome {
    let mut outcome = QcOutcome::default();
    for seg in segments {
        let reasons = qc_check(&seg, bounds);
        if reasons.is_empty() {
            outcome.kept.push(seg);
        } else {
            outcome.rejected.push((seg, reasons));
        }
    }
    outcome
}

/// Anything carrying a patient identity and a stratification fold.
pub trait FoldTagged {
    fn patient(&self) -> &str;
    fn fold_tag(&self) -> Option<u8>;
    fn id(&self) -> &str;
}

impl FoldTagged for SignalRecord {
    fn patient(&self) -> &str {
        &self.patient_id
    }
    fn fold_tag(&self) -> Option<u8> {
        self.fold
    }
    fn id(&self) -> &str {
        &self.record_id
    }
}

impl FoldTagged for Segment {
    fn patient(&self) -> &str {
        &self.patient_id
    }
    fn fold_tag(&self) -> Option<u8> {
        Some(self.fold)
    }
    fn id(&self) -> &str {
        &self.record_id
    }
}

#[derive(Debug, Clone)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Split<T> {
    pub fn get(&self, p: Partition) -> &[T] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }
}

/// Partition by fold and verify that no patient crosses partitions.
pub fn split_by_fold<T: FoldTagged>(items: Vec<T>) -> Result<Split<T>> {
    let mut seen: BTreeMap<String, Partition> = BTreeMap::new();
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for item in items {
        let fold = item
            .fold_tag()
            .ok_or_else(|| Error::Data(format!("{} has no fold", item.id())))?;
        let part = Partition::from_fold(fold)
            .ok_or_else(|| Error::Data(format!("{} has fold {fold} outside 1–10", item.id())))?;
        match seen.get(item.patient()) {
            Some(&prev) if prev != part => {
                return Err(Error::Leakage {
                    patient: item.patient().to_string(),
                    first: prev.as_str(),
                    second: part.as_str(),
                });
            }
            Some(_) => {}
            None => {
                seen.insert(item.patient().to_string(), part);
            }
        }
        match part {
            Partition::Train => split.train.push(item),
            Partition::Val => split.val.push(item),
            Partition::Test => split.test.push(item),
        }
    }
    Ok(split)
}

/// Patients of each partition, for auditing disjointness.
pub fn patient_sets<T: FoldTagged>(split: &Split<T>) -> [BTreeSet<String>; 3] {
    let set = |v: &[T]| v.iter().map(|t| t.patient().to_string()).collect();
    [set(&split.train), set(&split.val), set(&split.test)]
}

/// Provenance for one leading index of a store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    pub record_id: String,
    pub patient_id: String,
    pub start: usize,
    pub fold: u8,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lead_order: Vec<String>,
    pub rows: Vec<RowMeta>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A manifest plus its flat row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayStore {
    pub manifest: StoreManifest,
    pub data: Vec<f32>,
}

impl ArrayStore {
    pub fn new(shape: Vec<usize>, rows: Vec<RowMeta>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected || shape.first().copied().unwrap_or(0) != rows.len() {
            return Err(Error::Data(format!(
                "store shape {shape:?} does not match {} values / {} rows",
                data.len(),
                rows.len()
            )));
        }
        Ok(ArrayStore {
            manifest: StoreManifest {
                format: STORE_FORMAT.to_string(),
                dtype: "f32-le".to_string(),
                shape,
                lead_order: Vec::new(),
                rows,
                meta: serde_json::Value::Null,
            },
            data,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.manifest.rows.len()
    }

    pub fn row_len(&self) -> usize {
        self.manifest.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
        (
            dir.join(format!("{name}.manifest.json")),
            dir.join(format!("{name}.f32")),
        )
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (mpath, dpath) = Self::paths(dir, name);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&dpath, bytes).map_err(|e| Error::io(&dpath, e))
    }

    pub fn read(dir: &Path, name: &str) -> Result<Self> {
        let (mpath, dpath) = Self::paths(dir, name);
        if !mpath.exists() {
            return Err(Error::Dependency {
                path: mpath,
                msg: "store manifest not found".into(),
            });
        }
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: StoreManifest = serde_json::from_str(&text)?;
        if manifest.format != STORE_FORMAT {
            return Err(Error::Data(format!("unknown store format {:?}", manifest.format)));
        }
        let bytes = std::fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Data(format!("{} is not a whole number of f32", dpath.display())));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let store = ArrayStore {
            data,
            manifest: manifest.clone(),
        };
        let expected: usize = manifest.shape.iter().product();
        if store.data.len() != expected || manifest.shape.first().copied().unwrap_or(0) != manifest.rows.len() {
            return Err(Error::Data(format!(
                "store {name}: shape {:?} disagrees with data ({} values, {} rows)",
                manifest.shape,
                store.data.len(),
                manifest.rows.len()
            )));
        }
        Ok(store)
    }
}

pub fn row_meta(seg: &Segment) -> RowMeta {
    RowMeta {
        record_id: seg.record_id.clone(),
        patient_id: seg.patient_id.clone(),
        start: seg.start,
        fold: seg.fold,
        labels: seg.labels.clone(),
    }
}

/// Segments → store of shape [N × 8 × T], lead order inputs then targets.
pub fn segments_to_store(segments: &[Segment]) -> Result<ArrayStore> {
    let t = segments.first().map_or(WINDOW, Segment::len);
    let mut data = Vec::with_capacity(segments.len() * 8 * t);
    for s in segments {
        if s.len() != t || s.y.len() != TARGET_LEADS.len() * t {
            return Err(Error::Data(format!("segment {}@{} has inconsistent length", s.record_id, s.start)));
        }
        data.extend_from_slice(&s.x);
        data.extend_from_slice(&s.y);
    }
    let mut store = ArrayStore::new(
        vec![segments.len(), 8, t],
        segments.iter().map(row_meta).collect(),
        data,
    )?;
    store.manifest.lead_order = segment_leads().map(String::from).collect();
    Ok(store)
}

pub fn store_to_segments(store: &ArrayStore) -> Result<Vec<Segment>> {
    let shape = &store.manifest.shape;
    if shape.len() != 3 || shape[1] != 8 {
        return Err(Error::Data(format!("not a segment store: shape {shape:?}")));
    }
    let expected: Vec<String> = segment_leads().map(String::from).collect();
    if store.manifest.lead_order != expected {
        return Err(Error::Data(format!(
            "segment store lead order {:?} differs from {expected:?}",
            store.manifest.lead_order
        )));
    }
    let t = shape[2];
    let n_in = INPUT_LEADS.len() * t;
    Ok(store
        .manifest
        .rows
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let row = store.row(i);
            Segment {
                x: row[..n_in].to_vec(),
                y: row[n_in..].to_vec(),
                record_id: m.record_id.clone(),
                patient_id: m.patient_id.clone(),
                start: m.start,
                fold: m.fold,
                labels: m.labels.clone(),
            }
        })
        .collect())
}
