//! Reconstruction metrics, record- and class-level aggregation, configuration
//! deltas and the k-NN class-affinity analysis of embeddings.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leads::TARGET_LEADS;

fn check_pair(op: &'static str, pred: &[f64], y: &[f64]) -> Result<()> {
    if pred.len() != y.len() {
        return Err(Error::Dimension {
            op,
            lhs: vec![pred.len()],
            rhs: vec![y.len()],
        });
    }
    if y.len() < 2 {
        return Err(Error::Precondition(format!("{op} needs at least 2 samples, got {}", y.len())));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn rmse(pred: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("rmse", pred, y)?;
    Ok((pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64).sqrt())
}

/// `1 − SS_res/SS_tot`, with `SS_tot` about the mean of `y`.
pub fn r2(pred: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("r2", pred, y)?;
    let m = mean(y);
    let ss_tot: f64 = y.iter().map(|t| (t - m) * (t - m)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("r2 of a constant target".into()));
    }
    let ss_res: f64 = pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn pearson(pred: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("pearson", pred, y)?;
    let (mp, my) = (mean(pred), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(y) {
        let (a, b) = (p - mp, t - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("pearson of a constant sequence".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sem: f64,
    pub n: usize,
}

impl Summary {
    /// `None` for an empty set; `sem` is 0 for a single value.
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let m = mean(values);
        let sem = if n > 1 {
            let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Summary { mean: m, sem, n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Segment,
    Record,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Segment => "segment",
            Level::Record => "record",
        }
    }
}

/// Metrics of one lead, averaged over segments or records. Undefined values
/// (constant targets) are left out of `r2`/`pearson` and counted in `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadMetrics {
    pub lead: String,
    pub level: Level,
    pub n: usize,
    pub rmse: Option<Summary>,
    pub r2: Option<Summary>,
    pub pearson: Option<Summary>,
    pub undefined: usize,
}

/// One prediction/truth pair: five target leads each.
pub struct Sample<'a> {
    pub pred: &'a [Vec<f64>],
    pub truth: &'a [Vec<f64>],
}

/// Per-lead metrics over a set of samples (segments or whole records).
pub fn lead_metrics(level: Level, samples: &[Sample<'_>]) -> Result<Vec<LeadMetrics>> {
    TARGET_LEADS
        .iter()
        .enumerate()
        .map(|(k, lead)| {
            let (mut e, mut r, mut p) = (Vec::new(), Vec::new(), Vec::new());
            let mut undefined = 0;
            for s in samples {
                let (pred, y) = (&s.pred[k], &s.truth[k]);
                e.push(rmse(pred, y)?);
                match (r2(pred, y), pearson(pred, y)) {
                    (Ok(a), Ok(b)) => {
                        r.push(a);
                        p.push(b);
                    }
                    (Ok(a), Err(Error::UndefinedMetric(_))) => {
                        r.push(a);
                        undefined += 1;
                    }
                    (Err(Error::UndefinedMetric(_)), _) => undefined += 1,
                    (Err(err), _) | (_, Err(err)) => return Err(err),
                }
            }
            Ok(LeadMetrics {
                lead: lead.to_string(),
                level,
                n: samples.len(),
                rmse: Summary::of(&e),
                r2: Summary::of(&r),
                pearson: Summary::of(&p),
                undefined,
            })
        })
        .collect()
}

/// Mean segment RMSE per lead for every high-confidence class present.
/// Multi-label samples count toward each of their classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub n: usize,
    pub rmse: Vec<f64>,
}

pub fn per_class_rmse(samples: &[Sample<'_>], labels: &[Vec<String>]) -> Result<Vec<ClassRow>> {
    if samples.len() != labels.len() {
        return Err(Error::Dimension {
            op: "per_class_rmse",
            lhs: vec![samples.len()],
            rhs: vec![labels.len()],
        });
    }
    let mut acc: BTreeMap<&str, (usize, Vec<f64>)> = BTreeMap::new();
    for (s, ls) in samples.iter().zip(labels) {
        let errs: Vec<f64> = (0..TARGET_LEADS.len())
            .map(|k| rmse(&s.pred[k], &s.truth[k]))
            .collect::<Result<_>>()?;
        for l in ls {
            let e = acc.entry(l).or_insert_with(|| (0, vec![0.0; TARGET_LEADS.len()]));
            e.0 += 1;
            e.1.iter_mut().zip(&errs).for_each(|(a, b)| *a += b);
        }
    }
    Ok(acc
        .into_iter()
        .map(|(class, (n, sums))| ClassRow {
            class: class.to_string(),
            n,
            rmse: sums.into_iter().map(|s| s / n as f64).collect(),
        })
        .collect())
}

/// Relative improvement of `with_h` over `baseline`, in percent. For RMSE a
/// decrease is an improvement, for R² and Pearson an increase.
pub fn delta_pct(baseline: f64, with_h: f64, lower_is_better: bool) -> f64 {
    let d = if lower_is_better {
        baseline - with_h
    } else {
        with_h - baseline
    };
    100.0 * d / baseline
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub lead: String,
    pub level: Level,
    pub rmse_c: f64,
    pub rmse_ch: f64,
    pub rmse_delta_pct: f64,
    pub r2_c: Option<f64>,
    pub r2_ch: Option<f64>,
    pub pearson_c: Option<f64>,
    pub pearson_ch: Option<f64>,
}

pub fn compare(c: &[LeadMetrics], ch: &[LeadMetrics]) -> Result<Vec<Comparison>> {
    if c.len() != ch.len() {
        return Err(Error::Contract("configurations report different lead sets".into()));
    }
    c.iter()
        .zip(ch)
        .map(|(a, b)| {
            if a.lead != b.lead || a.level != b.level {
                return Err(Error::Contract(format!("cannot compare {} with {}", a.lead, b.lead)));
            }
            let (Some(ea), Some(eb)) = (a.rmse, b.rmse) else {
                return Err(Error::Precondition(format!("lead {} has no samples", a.lead)));
            };
            Ok(Comparison {
                lead: a.lead.clone(),
                level: a.level,
                rmse_c: ea.mean,
                rmse_ch: eb.mean,
                rmse_delta_pct: delta_pct(ea.mean, eb.mean, true),
                r2_c: a.r2.map(|s| s.mean),
                r2_ch: b.r2.map(|s| s.mean),
                pearson_c: a.pearson.map(|s| s.mean),
                pearson_ch: b.pearson.map(|s| s.mean),
            })
        })
        .collect()
}

/// `A[i][j]`: mean share of the k nearest neighbors of class-`i` samples that
/// belong to class `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    pub classes: Vec<String>,
    pub k: usize,
    pub matrix: Vec<Vec<f64>>,
}

impl AffinityMatrix {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["class".to_string()];
        header.extend(self.classes.iter().cloned());
        w.write_record(&header)?;
        for (c, row) in self.classes.iter().zip(&self.matrix) {
            let mut rec = vec![c.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Cosine k-NN class affinity. `vectors` is `N×dim`; self is excluded and
/// equal similarities are ordered by sample index.
pub fn knn_affinity(vectors: &[f64], dim: usize, labels: &[String], k: usize) -> Result<AffinityMatrix> {
    let n = labels.len();
    if dim == 0 || vectors.len() != n * dim {
        return Err(Error::Dimension {
            op: "knn_affinity",
            lhs: vec![vectors.len()],
            rhs: vec![n, dim],
        });
    }
    let classes: Vec<String> = labels.iter().cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if n == 0 {
        return Ok(AffinityMatrix {
            classes,
            k,
            matrix: Vec::new(),
        });
    }
    if k == 0 || n <= k {
        return Err(Error::Precondition(format!("k-NN affinity needs more than k={k} samples, got {n}")));
    }
    let class_of: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("class present"))
        .collect();
    let unit: Vec<f64> = vectors
        .chunks(dim)
        .flat_map(|v| {
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter().map(move |a| if norm > 0.0 { a / norm } else { 0.0 })
        })
        .collect();
    let counts: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let zi = &unit[i * dim..(i + 1) * dim];
            let mut sims: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (zi.iter().zip(&unit[j * dim..(j + 1) * dim]).map(|(a, b)| a * b).sum(), j))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut c = vec![0usize; classes.len()];
            for &(_, j) in &sims[..k] {
                c[class_of[j]] += 1;
            }
            c
        })
        .collect();
    let mut matrix = vec![vec![0.0; classes.len()]; classes.len()];
    let mut members = vec![0usize; classes.len()];
    for (i, c) in counts.iter().enumerate() {
        let ci = class_of[i];
        members[ci] += 1;
        for (j, &cnt) in c.iter().enumerate() {
            matrix[ci][j] += cnt as f64 / k as f64;
        }
    }
    for (row, &m) in matrix.iter_mut().zip(&members) {
        row.iter_mut().for_each(|v| *v /= m as f64);
    }
    Ok(AffinityMatrix { classes, k, matrix })
}

pub fn diagonal_consistency(a: &AffinityMatrix) -> f64 {
    if a.matrix.is_empty() {
        return 0.0;
    }
    a.matrix.iter().enumerate().map(|(i, r)| r[i]).sum::<f64>() / a.matrix.len() as f64
}

/// Indices of samples with exactly one label, and that label.
pub fn single_label(labels: &[Vec<String>]) -> (Vec<usize>, Vec<String>) {
    labels
        .iter()
        .enumerate()
        .filter(|(_, l)| l.len() == 1)
        .map(|(i, l)| (i, l[0].clone()))
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigReport {
    pub configuration: String,
    pub segment: Vec<LeadMetrics>,
    pub record: Vec<LeadMetrics>,
    pub per_class: Vec<ClassRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub configurations: Vec<ConfigReport>,
    pub comparison_segment: Vec<Comparison>,
    pub comparison_record: Vec<Comparison>,
}

fn fmt_opt(s: Option<Summary>, with_sem: bool) -> (String, String) {
    match s {
        Some(s) if with_sem => (format!("{:.6}", s.mean), format!("{:.6}", s.sem)),
        Some(s) => (format!("{:.6}", s.mean), String::new()),
        None => (String::new(), String::new()),
    }
}

impl EvaluationReport {
    /// `metrics.csv`: one row per configuration, level and lead.
    /// `comparison.csv`: C vs C-h with Δ%. `per_class.csv`: class RMSE table.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
        w.write_record([
            "configuration", "level", "lead", "n", "rmse", "rmse_sem", "r2", "r2_sem", "pearson", "pearson_sem",
        ])
        ?;
        for c in &self.configurations {
            for m in c.segment.iter().chain(&c.record) {
                let (e, es) = fmt_opt(m.rmse, true);
                let (r, rs) = fmt_opt(m.r2, true);
                let (p, ps) = fmt_opt(m.pearson, true);
                w.write_record([
                    c.configuration.as_str(),
                    m.level.as_str(),
                    &m.lead,
                    &m.n.to_string(),
                    &e,
                    &es,
                    &r,
                    &rs,
                    &p,
                    &ps,
                ])
                ?;
            }
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join("comparison.csv"))?;
        w.write_record([
            "level", "lead", "rmse_c", "rmse_ch", "rmse_delta_pct", "r2_c", "r2_ch", "pearson_c", "pearson_ch",
        ])
        ?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for c in self.comparison_segment.iter().chain(&self.comparison_record) {
            w.write_record([
                c.level.as_str().to_string(),
                c.lead.clone(),
                format!("{:.6}", c.rmse_c),
                format!("{:.6}", c.rmse_ch),
                format!("{:.2}", c.rmse_delta_pct),
                opt(c.r2_c),
                opt(c.r2_ch),
                opt(c.pearson_c),
                opt(c.pearson_ch),
            ])
            ?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join("per_class.csv"))?;
        let mut header = vec!["configuration".to_string(), "class".into(), "n".into()];
        header.extend(TARGET_LEADS.iter().map(|l| format!("rmse_{l}")));
        w.write_record(&header)?;
        for c in &self.configurations {
            for row in &c.per_class {
                let mut rec = vec![c.configuration.clone(), row.class.clone(), row.n.to_string()];
                rec.extend(row.rmse.iter().map(|v| format!("{v:.6}")));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))
    }
}
