//! Stage functions shared by the command line and the acceptance run:
//! cleaning, fold split with QC, decoder sets, evaluation and affinity.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::EMBED_DIM;
use crate::dataset::{
    apply_qc, fit_qc_bounds, segment_record, segment_record_nonoverlap, split_by_fold, ArrayStore, QcBounds, RowMeta,
    Segment, HOP, WINDOW,
};
use crate::dsp::{clean_lead, CleaningReport, FilterSpec, TARGET_FS};
use crate::error::{Error, Result};
use crate::evaluation::{
    knn_affinity, lead_metrics, per_class_rmse, single_label, AffinityMatrix, ConfigReport, Level, Sample,
};
use crate::leads::{segment_leads, TARGET_LEADS};
use crate::reconstruction::{
    fit_target_stats, normalize_x, train_decoder, Decoder, DecoderLog, DecoderMeta, DecoderTrainConfig, LeadData,
    ReconstructionModel, VectorStats,
};
use crate::wfdb::{DiagnosticLabels, SignalRecord};

/// Clean every lead; the result holds the eight segment leads at 100 Hz.
pub fn clean_record(rec: &SignalRecord, spec: &FilterSpec) -> Result<(SignalRecord, CleaningReport)> {
    rec.validate()?;
    let mut samples = Vec::with_capacity(8);
    let mut report = None;
    for name in segment_leads() {
        let row = rec
            .lead(name)
            .ok_or_else(|| Error::Data(format!("record {} has no lead {name}", rec.record_id)))?;
        let (clean, r) = clean_lead(row, rec.fs, spec)?;
        samples.push(clean);
        report.get_or_insert(r);
    }
    Ok((
        SignalRecord {
            samples,
            fs: TARGET_FS,
            lead_names: segment_leads().map(String::from).collect(),
            record_id: rec.record_id.clone(),
            patient_id: rec.patient_id.clone(),
            labels: rec.labels.clone(),
            fold: rec.fold,
        },
        report.expect("eight leads"),
    ))
}

/// Records are processed in parallel; output order follows input order.
pub fn clean_records(records: &[SignalRecord], spec: &FilterSpec) -> Result<Vec<(SignalRecord, CleaningReport)>> {
    records.par_iter().map(|r| clean_record(r, spec)).collect()
}

/// Equal-length cleaned records → store `[R × 8 × n]`.
pub fn records_to_store(records: &[SignalRecord]) -> Result<ArrayStore> {
    let n = records.first().map_or(0, SignalRecord::n_samples);
    let mut data = Vec::with_capacity(records.len() * 8 * n);
    for r in records {
        if r.n_samples() != n || r.samples.len() != 8 {
            return Err(Error::Data(format!(
                "record {} has {} leads × {} samples; the record store needs 8 × {n}",
                r.record_id,
                r.samples.len(),
                r.n_samples()
            )));
        }
        for row in &r.samples {
            data.extend(row.iter().map(|&v| v as f32));
        }
    }
    let rows = records
        .iter()
        .map(|r| RowMeta {
            record_id: r.record_id.clone(),
            patient_id: r.patient_id.clone(),
            start: 0,
            fold: r.fold.unwrap_or(0),
            labels: r.labels.high_confidence(),
        })
        .collect();
    let mut store = ArrayStore::new(vec![records.len(), 8, n], rows, data)?;
    store.manifest.lead_order = segment_leads().map(String::from).collect();
    Ok(store)
}

/// Inverse of [`records_to_store`]; only high-confidence labels survive.
pub fn store_to_records(store: &ArrayStore) -> Result<Vec<SignalRecord>> {
    let shape = &store.manifest.shape;
    if shape.len() != 3 || shape[1] != 8 {
        return Err(Error::Data(format!("not a record store: shape {shape:?}")));
    }
    let n = shape[2];
    Ok(store
        .manifest
        .rows
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let row = store.row(i);
            let mut labels = DiagnosticLabels::default();
            for l in &m.labels {
                labels.likelihoods.insert(l.clone(), 100.0);
            }
            SignalRecord {
                samples: row.chunks(n).map(|c| c.iter().map(|&v| v as f64).collect()).collect(),
                fs: TARGET_FS,
                lead_names: store.manifest.lead_order.clone(),
                record_id: m.record_id.clone(),
                patient_id: m.patient_id.clone(),
                labels,
                fold: Some(m.fold),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub window: usize,
    pub hop: usize,
    pub qc_lo_pct: f64,
    pub qc_hi_pct: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            window: WINDOW,
            hop: HOP,
            qc_lo_pct: 0.1,
            qc_hi_pct: 99.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    /// train, val, test
    pub records: [usize; 3],
    pub patients: [usize; 3],
    pub segments_before_qc: [usize; 3],
    pub rejected: [usize; 3],
    pub test_records_kept: usize,
    pub degenerate_qc_leads: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<Segment>,
    pub val: Vec<Segment>,
    pub test: Vec<Segment>,
    /// Test records whose every non-overlapping window passed QC.
    pub test_records: Vec<SignalRecord>,
    pub qc: QcBounds,
    pub report: SplitReport,
}

/// Fold split, segmentation (overlapping for train/val, non-overlapping for
/// test) and QC with bounds fit on the training segments.
pub fn prepare_splits(records: Vec<SignalRecord>, cfg: &SplitConfig) -> Result<Prepared> {
    if cfg.window == 0 || cfg.hop == 0 {
        return Err(Error::Config("window and hop must be positive".into()));
    }
    let split = split_by_fold(records)?;
    let seg = |recs: &[SignalRecord], overlap: bool| -> Result<Vec<Segment>> {
        let parts: Vec<Vec<Segment>> = recs
            .par_iter()
            .map(|r| {
                if overlap {
                    segment_record(r, cfg.window, cfg.hop)
                } else {
                    segment_record_nonoverlap(r, cfg.window)
                }
            })
            .collect::<Result<_>>()?;
        Ok(parts.into_iter().flatten().collect())
    };
    let (train, val, test) = (seg(&split.train, true)?, seg(&split.val, true)?, seg(&split.test, false)?);
    if train.is_empty() {
        return Err(Error::Data("no training segments: folds 1–8 are empty or records are too short".into()));
    }
    let qc = fit_qc_bounds(&train, cfg.qc_lo_pct, cfg.qc_hi_pct)?;
    let before = [train.len(), val.len(), test.len()];
    let (tr, va, te) = (apply_qc(train, &qc), apply_qc(val, &qc), apply_qc(test, &qc));
    let bad: BTreeSet<&str> = te.rejected.iter().map(|(s, _)| s.record_id.as_str()).collect();
    let test_records: Vec<SignalRecord> = split
        .test
        .iter()
        .filter(|r| !bad.contains(r.record_id.as_str()))
        .cloned()
        .collect();
    let patients = |v: &[SignalRecord]| v.iter().map(|r| r.patient_id.as_str()).collect::<BTreeSet<_>>().len();
    let report = SplitReport {
        records: [split.train.len(), split.val.len(), split.test.len()],
        patients: [patients(&split.train), patients(&split.val), patients(&split.test)],
        segments_before_qc: before,
        rejected: [tr.rejected.len(), va.rejected.len(), te.rejected.len()],
        test_records_kept: test_records.len(),
        degenerate_qc_leads: qc.degenerate_leads().into_iter().map(String::from).collect(),
    };
    Ok(Prepared {
        train: tr.kept,
        val: va.kept,
        test: te.kept,
        test_records,
        qc,
        report,
    })
}

/// Five trained decoders of one configuration.
#[derive(Debug, Clone)]
pub struct DecoderSet {
    pub conditioned: bool,
    pub decoders: Vec<Decoder>,
    pub metas: Vec<DecoderMeta>,
    pub logs: Vec<DecoderLog>,
}

/// Train one decoder per target lead. Leads run in parallel on the current
/// rayon pool; each decoder uses seed `cfg.seed + lead index`, so the
/// conditioned and clean-only sets start from identical weights.
pub fn train_decoders(
    train: &[Segment],
    val: &[Segment],
    h_train: &[f32],
    h_val: &[f32],
    conditioned: bool,
    cfg: &DecoderTrainConfig,
) -> Result<DecoderSet> {
    if train.is_empty() {
        return Err(Error::Precondition("no training segments for the decoders".into()));
    }
    let h_stats = VectorStats::fit(h_train, EMBED_DIM)?;
    let target_stats = fit_target_stats(train)?;
    let hs = conditioned.then_some(&h_stats);
    let trained: Vec<(Decoder, DecoderLog)> = TARGET_LEADS
        .par_iter()
        .enumerate()
        .map(|(k, lead)| {
            let tr = LeadData::build(train, h_train, hs, k, &target_stats[k])?;
            let va = LeadData::build(val, h_val, hs, k, &target_stats[k])?;
            let lead_cfg = DecoderTrainConfig {
                seed: cfg.seed.wrapping_add(k as u64),
                ..cfg.clone()
            };
            train_decoder(lead, conditioned, &tr, &va, &lead_cfg)
        })
        .collect::<Result<_>>()?;
    let mut set = DecoderSet {
        conditioned,
        decoders: Vec::new(),
        metas: Vec::new(),
        logs: Vec::new(),
    };
    for (k, (d, log)) in trained.into_iter().enumerate() {
        set.metas.push(DecoderMeta {
            lead: TARGET_LEADS[k].to_string(),
            conditioned,
            target_stats: target_stats[k],
            h_stats: h_stats.clone(),
            best_epoch: log.best_epoch,
            best_val_loss: log.best_val_loss,
        });
        set.decoders.push(d);
        set.logs.push(log);
    }
    Ok(set)
}

fn to_f64_rows(flat: &[f32], t: usize) -> Vec<Vec<f64>> {
    flat.chunks(t).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Segment- and record-level metrics plus the per-class table for one model.
pub fn evaluate_model(
    name: &str,
    model: &ReconstructionModel,
    test: &[Segment],
    test_records: &[SignalRecord],
) -> Result<ConfigReport> {
    if test.is_empty() {
        return Err(Error::Data("no test segments to evaluate".into()));
    }
    let preds = model.predict_segments(test)?;
    let truths: Vec<Vec<Vec<f64>>> = test.iter().map(|s| to_f64_rows(&s.y, s.len())).collect();
    let samples: Vec<Sample> = preds
        .iter()
        .zip(&truths)
        .map(|(p, t)| Sample { pred: p, truth: t })
        .collect();
    let segment = lead_metrics(Level::Segment, &samples)?;
    let labels: Vec<Vec<String>> = test.iter().map(|s| s.labels.clone()).collect();
    let per_class = per_class_rmse(&samples, &labels)?;

    let recon: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = test_records
        .par_iter()
        .map(|r| {
            let pred = model.reconstruct_record(r)?;
            let truth = TARGET_LEADS
                .iter()
                .map(|l| r.lead(l).map(<[f64]>::to_vec).ok_or_else(|| Error::Data(format!("{} lacks {l}", r.record_id))))
                .collect::<Result<Vec<_>>>()?;
            Ok((pred, truth))
        })
        .collect::<Result<_>>()?;
    let rec_samples: Vec<Sample> = recon.iter().map(|(p, t)| Sample { pred: p, truth: t }).collect();
    let record = lead_metrics(Level::Record, &rec_samples)?;
    Ok(ConfigReport {
        configuration: name.to_string(),
        segment,
        record,
        per_class,
    })
}

/// k-NN class affinity of the embeddings and of the z-scored inputs, over
/// single-label segments. `h` is `N×128` in segment order.
pub fn affinity_pair(segments: &[Segment], h: &[f32], k: usize) -> Result<(AffinityMatrix, AffinityMatrix)> {
    if h.len() != segments.len() * EMBED_DIM {
        return Err(Error::Dimension {
            op: "affinity",
            lhs: vec![h.len()],
            rhs: vec![segments.len(), EMBED_DIM],
        });
    }
    let labels: Vec<Vec<String>> = segments.iter().map(|s| s.labels.clone()).collect();
    let (idx, classes) = single_label(&labels);
    let hv: Vec<f64> = idx
        .iter()
        .flat_map(|&i| h[i * EMBED_DIM..(i + 1) * EMBED_DIM].iter().map(|&v| v as f64))
        .collect();
    let xdim = segments.first().map_or(0, |s| s.x.len());
    let xv: Vec<f64> = idx
        .iter()
        .flat_map(|&i| {
            let s = &segments[i];
            normalize_x(&s.x, s.len()).x.into_iter().map(|v| v as f64)
        })
        .collect();
    Ok((
        knn_affinity(&hv, EMBED_DIM, &classes, k)?,
        knn_affinity(&xv, xdim, &classes, k)?,
    ))
}

/// Class counts among segments, for logs.
pub fn label_counts(segments: &[Segment]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for s in segments {
        for l in &s.labels {
            *m.entry(l.clone()).or_insert(0) += 1;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{builtin_classes, generate_corpus, CorpusConfig};

    fn small_corpus() -> Vec<SignalRecord> {
        let cfg = CorpusConfig {
            patients_per_class: 5,
            records_per_patient: 1,
            duration: 10.0,
            fs: 500.0,
            seed: 5,
        };
        generate_corpus(&builtin_classes()[..2], &cfg).unwrap()
    }

    #[test]
    fn record_store_round_trip() {
        let cleaned: Vec<SignalRecord> = clean_records(&small_corpus(), &FilterSpec::default())
            .unwrap()
            .into_iter()
            .map(|(r, _)| r)
            .collect();
        assert_eq!(cleaned[0].n_samples(), 1000);
        let back = store_to_records(&records_to_store(&cleaned).unwrap()).unwrap();
        assert_eq!(back.len(), cleaned.len());
        assert_eq!(back[0].labels.high_confidence(), cleaned[0].labels.high_confidence());
        for (a, b) in back[0].samples[3].iter().zip(&cleaned[0].samples[3]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn splits_are_patient_disjoint() {
        let cleaned: Vec<SignalRecord> = clean_records(&small_corpus(), &FilterSpec::default())
            .unwrap()
            .into_iter()
            .map(|(r, _)| r)
            .collect();
        let p = prepare_splits(cleaned, &SplitConfig::default()).unwrap();
        let pats = |v: &[Segment]| v.iter().map(|s| s.patient_id.clone()).collect::<BTreeSet<_>>();
        let (a, b) = (pats(&p.train), pats(&p.test));
        assert!(a.is_disjoint(&b));
        assert!(p.test.iter().all(|s| s.fold == 10));
        assert!(p.test.iter().all(|s| [0, 256, 512, 744].contains(&s.start)));
    }
}
