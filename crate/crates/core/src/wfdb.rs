//! PhysioNet WFDB records (format 16) and PTB-XL metadata.
//!
//! Only the subset of the header grammar needed for PTB-XL and the PTB
//! Diagnostic database is accepted: single-segment records whose signals are
//! all stored in format 16 (little-endian signed 16-bit, sample-interleaved
//! within each file).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Partition;
use crate::error::{Error, Result};
use crate::leads::canonical_lead_name;

/// Likelihood at or above which a diagnostic statement counts as high-confidence.
pub const HIGH_CONFIDENCE: f64 = 80.0;

const DEFAULT_GAIN: f64 = 200.0;
const DEFAULT_FS: f64 = 250.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub file_name: String,
    pub format: u16,
    pub byte_offset: usize,
    /// ADC units per physical unit.
    pub adc_gain: f64,
    pub baseline: i32,
    pub units: String,
    pub adc_resolution: u32,
    pub adc_zero: i32,
    pub initial_value: i32,
    pub checksum: Option<i16>,
    pub lead_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WfdbHeader {
    pub record_name: String,
    pub n_signals: usize,
    pub fs: f64,
    pub n_samples: usize,
    pub signals: Vec<SignalSpec>,
    /// `#` comment lines, without the leading marker.
    pub comments: Vec<String>,
}

/// Diagnostic statements of one record with their likelihoods (0..=100).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticLabels {
    pub likelihoods: BTreeMap<String, f64>,
    /// Statement code to diagnostic class, for codes the statement table resolves.
    pub classes: BTreeMap<String, String>,
}

impl DiagnosticLabels {
    pub fn single(code: &str) -> Self {
        let mut likelihoods = BTreeMap::new();
        likelihoods.insert(code.to_string(), 100.0);
        let mut classes = BTreeMap::new();
        classes.insert(code.to_string(), code.to_string());
        DiagnosticLabels {
            likelihoods,
            classes,
        }
    }

    /// Codes with likelihood ≥ 80, sorted. A likelihood of 0 ("unknown") never qualifies.
    pub fn high_confidence(&self) -> Vec<String> {
        self.likelihoods
            .iter()
            .filter(|(_, &l)| l >= HIGH_CONFIDENCE)
            .map(|(c, _)| c.clone())
            .collect()
    }
}

/// A multi-lead ECG in millivolts. Rows follow `lead_names`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub samples: Vec<Vec<f64>>,
    pub fs: f64,
    pub lead_names: Vec<String>,
    pub record_id: String,
    pub patient_id: String,
    pub labels: DiagnosticLabels,
    pub fold: Option<u8>,
}

impl SignalRecord {
    pub fn n_samples(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn lead_index(&self, name: &str) -> Option<usize> {
        let canon = canonical_lead_name(name);
        self.lead_names
            .iter()
            .position(|l| canonical_lead_name(l) == canon)
    }

    pub fn lead(&self, name: &str) -> Option<&[f64]> {
        self.lead_index(name).map(|i| self.samples[i].as_slice())
    }

    pub fn validate(&self) -> Result<()> {
        if self.lead_names.len() != self.samples.len() {
            return Err(Error::Data(format!(
                "record {}: {} lead names for {} rows",
                self.record_id,
                self.lead_names.len(),
                self.samples.len()
            )));
        }
        let n = self.n_samples();
        for (row, name) in self.samples.iter().zip(&self.lead_names) {
            if row.len() != n {
                return Err(Error::Data(format!(
                    "record {}: lead {name} has {} samples, expected {n}",
                    self.record_id,
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "record {}: lead {name} contains non-finite samples",
                    self.record_id
                )));
            }
        }
        Ok(())
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse::<T>()
        .map_err(|_| parse_err(line, format!("invalid {what} {tok:?}")))
}

/// Parse the text of a `.hea` file.
pub fn parse_header(text: &str) -> Result<WfdbHeader> {
    let mut comments = Vec::new();
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(c) = trimmed.strip_prefix('#') {
            comments.push(c.trim().to_string());
            continue;
        }
        lines.push((i + 1, trimmed));
    }
    let Some(&(rec_line, record)) = lines.first() else {
        return Err(parse_err(1, "missing record line"));
    };

    let toks: Vec<&str> = record.split_whitespace().collect();
    if toks.len() < 2 {
        return Err(parse_err(rec_line, "record line needs a name and signal count"));
    }
    if toks[0].contains('/') {
        return Err(parse_err(rec_line, "multi-segment records are not supported"));
    }
    let record_name = toks[0].to_string();
    let n_signals: usize = parse_num(toks[1], rec_line, "signal count")?;
    if n_signals == 0 {
        return Err(parse_err(rec_line, "record declares 0 signals"));
    }
    let fs = match toks.get(2) {
        Some(tok) => {
            let end = tok.find(['/', '(']).unwrap_or(tok.len());
            parse_num::<f64>(&tok[..end], rec_line, "sampling frequency")?
        }
        None => DEFAULT_FS,
    };
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(parse_err(rec_line, format!("sampling frequency must be > 0, got {fs}")));
    }
    let n_samples: usize = match toks.get(3) {
        Some(tok) => parse_num(tok, rec_line, "sample count")?,
        None => return Err(parse_err(rec_line, "sample count is required")),
    };
    if n_samples == 0 {
        return Err(parse_err(rec_line, "record declares 0 samples"));
    }

    let sig_lines = &lines[1..];
    if sig_lines.len() < n_signals {
        return Err(parse_err(
            sig_lines.last().map_or(rec_line, |l| l.0),
            format!("expected {n_signals} signal lines, found {}", sig_lines.len()),
        ));
    }
    let signals = sig_lines[..n_signals]
        .iter()
        .map(|&(ln, text)| parse_signal_line(ln, text))
        .collect::<Result<Vec<_>>>()?;

    Ok(WfdbHeader {
        record_name,
        n_signals,
        fs,
        n_samples,
        signals,
        comments,
    })
}

fn parse_signal_line(line: usize, text: &str) -> Result<SignalSpec> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.len() < 2 {
        return Err(parse_err(line, "signal line needs a file name and format"));
    }
    let file_name = toks[0].to_string();

    // format[xspf][:skew][+offset]
    let fmt_tok = toks[1];
    let digits_end = fmt_tok
        .find(|c: char| !c.is_ascii_digit())
        .unwrap_or(fmt_tok.len());
    if digits_end == 0 {
        return Err(parse_err(line, format!("invalid format {fmt_tok:?}")));
    }
    let code = &fmt_tok[..digits_end];
    if code != "16" {
        return Err(Error::UnsupportedFormat(code.to_string()));
    }
    let mut byte_offset = 0usize;
    let mut rest = &fmt_tok[digits_end..];
    while !rest.is_empty() {
        let (marker, tail) = rest.split_at(1);
        let end = tail
            .find(|c: char| !c.is_ascii_digit())
            .unwrap_or(tail.len());
        let value: usize = parse_num(&tail[..end], line, "format modifier")?;
        match marker {
            "x" if value > 1 => {
                return Err(Error::UnsupportedFormat(format!("16x{value}")));
            }
            "x" | ":" => {}
            "+" => byte_offset = value,
            _ => return Err(parse_err(line, format!("invalid format {fmt_tok:?}"))),
        }
        rest = &tail[end..];
    }

    // gain[(baseline)][/units]
    let mut adc_gain = DEFAULT_GAIN;
    let mut explicit_baseline = None;
    let mut units = "mV".to_string();
    if let Some(tok) = toks.get(2) {
        let (gain_part, unit_part) = match tok.split_once('/') {
            Some((g, u)) => (g, Some(u)),
            None => (*tok, None),
        };
        let (gain_str, base_str) = match gain_part.split_once('(') {
            Some((g, b)) => {
                let b = b
                    .strip_suffix(')')
                    .ok_or_else(|| parse_err(line, format!("unterminated baseline in {tok:?}")))?;
                (g, Some(b))
            }
            None => (gain_part, None),
        };
        adc_gain = parse_num(gain_str, line, "ADC gain")?;
        if adc_gain == 0.0 {
            adc_gain = DEFAULT_GAIN;
        }
        if let Some(b) = base_str {
            explicit_baseline = Some(parse_num::<i32>(b, line, "baseline")?);
        }
        if let Some(u) = unit_part {
            units = u.to_string();
        }
    }
    if !(adc_gain > 0.0 && adc_gain.is_finite()) {
        return Err(parse_err(line, format!("ADC gain must be > 0, got {adc_gain}")));
    }
    let adc_resolution = match toks.get(3) {
        Some(t) => parse_num(t, line, "ADC resolution")?,
        None => 16,
    };
    let adc_zero = match toks.get(4) {
        Some(t) => parse_num(t, line, "ADC zero")?,
        None => 0,
    };
    let initial_value = match toks.get(5) {
        Some(t) => parse_num(t, line, "initial value")?,
        None => 0,
    };
    let checksum = match toks.get(6) {
        // Some writers emit the unsigned 16-bit value.
        Some(t) => Some(parse_num::<i32>(t, line, "checksum")? as i16),
        None => None,
    };
    let lead_name = if toks.len() > 8 {
        toks[8..].join(" ")
    } else {
        String::new()
    };

    Ok(SignalSpec {
        file_name,
        format: 16,
        byte_offset,
        adc_gain,
        baseline: explicit_baseline.unwrap_or(adc_zero),
        units,
        adc_resolution,
        adc_zero,
        initial_value,
        checksum,
        lead_name,
    })
}

/// Render a header in the form [`parse_header`] reads back.
pub fn write_header(header: &WfdbHeader) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} {} {}",
        header.record_name,
        header.n_signals,
        fmt_number(header.fs),
        header.n_samples
    );
    for s in &header.signals {
        let fmt = if s.byte_offset > 0 {
            format!("16+{}", s.byte_offset)
        } else {
            "16".to_string()
        };
        let _ = write!(
            out,
            "{} {} {}({})/{} {} {} {} {} 0",
            s.file_name,
            fmt,
            fmt_gain(s.adc_gain),
            s.baseline,
            s.units,
            s.adc_resolution,
            s.adc_zero,
            s.initial_value,
            s.checksum.unwrap_or(0),
        );
        if s.lead_name.is_empty() {
            out.push('\n');
        } else {
            let _ = writeln!(out, " {}", s.lead_name);
        }
    }
    for c in &header.comments {
        let _ = writeln!(out, "# {c}");
    }
    out
}

fn fmt_number(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn fmt_gain(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

/// Decode a format-16 sample block into raw ADC values, one row per signal.
pub fn decode_raw(n_signals: usize, n_samples: usize, bytes: &[u8]) -> Result<Vec<Vec<i16>>> {
    let expected = 2 * n_signals * n_samples;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let mut rows = vec![Vec::with_capacity(n_samples); n_signals];
    for (k, pair) in bytes.chunks_exact(2).enumerate() {
        rows[k % n_signals].push(i16::from_le_bytes([pair[0], pair[1]]));
    }
    Ok(rows)
}

/// Interleave raw rows back into a format-16 byte block.
pub fn encode_raw(rows: &[Vec<i16>]) -> Vec<u8> {
    let n = rows.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(2 * rows.len() * n);
    for t in 0..n {
        for row in rows {
            out.extend_from_slice(&row[t].to_le_bytes());
        }
    }
    out
}

/// Wrapping 16-bit sum of a signal's raw samples.
pub fn checksum(raw: &[i16]) -> i16 {
    raw.iter().fold(0i16, |acc, &v| acc.wrapping_add(v))
}

/// Decode the signals of a single-file record into physical units.
///
/// Physical value = (raw − baseline) / gain. With `verify_checksums` set, each
/// signal's 16-bit sum is compared against the header's checksum field.
pub fn read_signals(header: &WfdbHeader, bytes: &[u8], verify_checksums: bool) -> Result<SignalRecord> {
    let offset = header.signals.first().map_or(0, |s| s.byte_offset);
    let body = bytes.get(offset..).ok_or(Error::Truncated {
        expected: offset,
        found: bytes.len(),
    })?;
    let raw = decode_raw(header.n_signals, header.n_samples, body)?;
    if verify_checksums {
        verify(header, &raw)?;
    }
    let samples = raw
        .iter()
        .zip(&header.signals)
        .map(|(row, s)| {
            row.iter()
                .map(|&r| (f64::from(r) - f64::from(s.baseline)) / s.adc_gain)
                .collect()
        })
        .collect();
    Ok(SignalRecord {
        samples,
        fs: header.fs,
        lead_names: header
            .signals
            .iter()
            .map(|s| canonical_lead_name(&s.lead_name))
            .collect(),
        record_id: header.record_name.clone(),
        patient_id: String::new(),
        labels: DiagnosticLabels::default(),
        fold: None,
    })
}

fn verify(header: &WfdbHeader, raw: &[Vec<i16>]) -> Result<()> {
    for (i, (row, s)) in raw.iter().zip(&header.signals).enumerate() {
        if let Some(expected) = s.checksum {
            let computed = checksum(row);
            if computed != expected {
                return Err(Error::Checksum {
                    signal: i,
                    expected,
                    computed,
                });
            }
        }
    }
    Ok(())
}

/// Physical to raw: round(mV·gain + baseline), saturated to the i16 range.
pub fn digitize(values: &[f64], gain: f64, baseline: i32) -> Vec<i16> {
    values
        .iter()
        .map(|&v| {
            let r = (v * gain + f64::from(baseline)).round();
            r.clamp(-32767.0, 32767.0) as i16
        })
        .collect()
}

/// Inverse of [`read_signals`] for a single-file record.
pub fn write_signals(header: &WfdbHeader, record: &SignalRecord) -> Result<Vec<u8>> {
    if record.samples.len() != header.n_signals {
        return Err(Error::Data(format!(
            "header has {} signals, record has {}",
            header.n_signals,
            record.samples.len()
        )));
    }
    let raw: Vec<Vec<i16>> = record
        .samples
        .iter()
        .zip(&header.signals)
        .map(|(row, s)| digitize(row, s.adc_gain, s.baseline))
        .collect();
    let offset = header.signals.first().map_or(0, |s| s.byte_offset);
    let mut out = vec![0u8; offset];
    out.extend(encode_raw(&raw));
    Ok(out)
}

/// Build a format-16 header for `record`, all signals in `<record_id>.dat`,
/// with checksums and initial values filled from the digitized samples.
pub fn header_for(record: &SignalRecord, gain: f64) -> WfdbHeader {
    let file_name = format!("{}.dat", record.record_id);
    let signals = record
        .samples
        .iter()
        .zip(&record.lead_names)
        .map(|(row, name)| {
            let raw = digitize(row, gain, 0);
            SignalSpec {
                file_name: file_name.clone(),
                format: 16,
                byte_offset: 0,
                adc_gain: gain,
                baseline: 0,
                units: "mV".to_string(),
                adc_resolution: 16,
                adc_zero: 0,
                initial_value: raw.first().copied().map_or(0, i32::from),
                checksum: Some(checksum(&raw)),
                lead_name: name.clone(),
            }
        })
        .collect();
    WfdbHeader {
        record_name: record.record_id.clone(),
        n_signals: record.samples.len(),
        fs: record.fs,
        n_samples: record.n_samples(),
        signals,
        comments: Vec::new(),
    }
}

/// Write `<dir>/<record_id>.hea` and `.dat`.
pub fn write_record(dir: &Path, record: &SignalRecord, gain: f64) -> Result<PathBuf> {
    let header = header_for(record, gain);
    let hea = dir.join(format!("{}.hea", record.record_id));
    let dat = dir.join(format!("{}.dat", record.record_id));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    std::fs::write(&hea, write_header(&header)).map_err(|e| Error::io(&hea, e))?;
    std::fs::write(&dat, write_signals(&header, record)?).map_err(|e| Error::io(&dat, e))?;
    Ok(hea)
}

/// Read a record given its path without extension (`dir/00001_lr`).
/// Signals may be split across several format-16 files.
pub fn read_record(base: &Path, verify_checksums: bool) -> Result<SignalRecord> {
    let hea = base.with_extension("hea");
    let text = std::fs::read_to_string(&hea).map_err(|e| Error::io(&hea, e))?;
    let header = parse_header(&text)?;
    let dir = base.parent().unwrap_or_else(|| Path::new("."));

    let mut files: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, s) in header.signals.iter().enumerate() {
        match files.iter_mut().find(|(f, _)| *f == s.file_name) {
            Some((_, idx)) => idx.push(i),
            None => files.push((s.file_name.clone(), vec![i])),
        }
    }

    let mut rows: Vec<Option<Vec<f64>>> = vec![None; header.n_signals];
    for (file, idx) in files {
        let path = dir.join(&file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let sub = WfdbHeader {
            n_signals: idx.len(),
            signals: idx.iter().map(|&i| header.signals[i].clone()).collect(),
            ..header.clone()
        };
        let rec = read_signals(&sub, &bytes, verify_checksums)?;
        for (row, &i) in rec.samples.into_iter().zip(&idx) {
            rows[i] = Some(row);
        }
    }
    let samples: Vec<Vec<f64>> = rows.into_iter().map(|r| r.unwrap_or_default()).collect();
    let record = SignalRecord {
        samples,
        fs: header.fs,
        lead_names: header
            .signals
            .iter()
            .map(|s| canonical_lead_name(&s.lead_name))
            .collect(),
        record_id: header.record_name.clone(),
        patient_id: String::new(),
        labels: DiagnosticLabels::default(),
        fold: None,
    };
    record.validate()?;
    Ok(record)
}

/// One row of `ptbxl_database.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtbxlEntry {
    pub patient_id: String,
    pub fold: u8,
    pub labels: DiagnosticLabels,
    pub filename_lr: String,
}

impl PtbxlEntry {
    pub fn partition(&self) -> Option<Partition> {
        Partition::from_fold(self.fold)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    /// 1-based data row (header excluded).
    pub row: usize,
    pub record_id: String,
    pub msg: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetadataReport {
    pub rows_read: usize,
    pub errors: Vec<RowError>,
}

const REQUIRED_COLUMNS: [&str; 5] = ["ecg_id", "patient_id", "scp_codes", "strat_fold", "filename_lr"];

/// Parse `ptbxl_database.csv` and `scp_statements.csv`.
///
/// Rows whose `scp_codes` literal or fold cannot be parsed are skipped and
/// recorded in the returned report.
pub fn parse_ptbxl_metadata(
    csv_text: &str,
    scp_csv: &str,
) -> Result<(BTreeMap<String, PtbxlEntry>, MetadataReport)> {
    let classes = parse_scp_statements(scp_csv)?;

    let mut rdr = csv::ReaderBuilder::new()
        .flexible(false)
        .from_reader(csv_text.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("ptbxl_database.csv is missing column {name:?}")))
    };
    let [c_id, c_pat, c_scp, c_fold, c_file] = REQUIRED_COLUMNS.map(col);
    let (c_id, c_pat, c_scp, c_fold, c_file) = (c_id?, c_pat?, c_scp?, c_fold?, c_file?);

    let mut entries = BTreeMap::new();
    let mut report = MetadataReport::default();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        report.rows_read += 1;
        let record_id = normalize_id(row.get(c_id).unwrap_or_default());
        let fail = |msg: String| RowError {
            row: i + 1,
            record_id: record_id.clone(),
            msg,
        };
        let likelihoods = match parse_scp_codes(row.get(c_scp).unwrap_or_default()) {
            Ok(l) => l,
            Err(msg) => {
                report.errors.push(fail(msg));
                continue;
            }
        };
        let fold = match parse_fold(row.get(c_fold).unwrap_or_default()) {
            Some(f) => f,
            None => {
                report.errors.push(fail(format!(
                    "invalid strat_fold {:?}",
                    row.get(c_fold).unwrap_or_default()
                )));
                continue;
            }
        };
        let resolved = likelihoods
            .keys()
            .filter_map(|c| classes.get(c).map(|k| (c.clone(), k.clone())))
            .collect();
        entries.insert(
            record_id,
            PtbxlEntry {
                patient_id: normalize_id(row.get(c_pat).unwrap_or_default()),
                fold,
                labels: DiagnosticLabels {
                    likelihoods,
                    classes: resolved,
                },
                filename_lr: row.get(c_file).unwrap_or_default().trim().to_string(),
            },
        );
    }
    Ok((entries, report))
}

fn parse_fold(tok: &str) -> Option<u8> {
    let v: f64 = tok.trim().parse().ok()?;
    if v.fract() != 0.0 || !(1.0..=10.0).contains(&v) {
        return None;
    }
    Some(v as u8)
}

/// PTB-XL stores ids as floats ("15709.0").
fn normalize_id(tok: &str) -> String {
    let t = tok.trim();
    t.strip_suffix(".0").unwrap_or(t).to_string()
}

/// Statement code → diagnostic class. Codes with an empty class are omitted.
pub fn parse_scp_statements(text: &str) -> Result<BTreeMap<String, String>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let c_class = headers
        .iter()
        .position(|h| h.trim() == "diagnostic_class")
        .ok_or_else(|| Error::Schema("scp_statements.csv is missing column \"diagnostic_class\"".into()))?;
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let code = row.get(0).unwrap_or_default().trim();
        let class = row.get(c_class).unwrap_or_default().trim();
        if !code.is_empty() && !class.is_empty() {
            out.insert(code.to_string(), class.to_string());
        }
    }
    Ok(out)
}

/// Parse a Python/JSON dict literal such as `{'NORM': 100.0, 'SR': 0.0}`.
pub fn parse_scp_codes(literal: &str) -> std::result::Result<BTreeMap<String, f64>, String> {
    let s = literal.trim();
    let inner = s
        .strip_prefix('{')
        .and_then(|r| r.strip_suffix('}'))
        .ok_or_else(|| format!("scp_codes is not a mapping literal: {s:?}"))?;
    let mut out = BTreeMap::new();
    let mut chars = inner.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace() || *c == ',') {
            chars.next();
        }
        let Some(quote) = chars.next() else { break };
        if quote != '\'' && quote != '"' {
            return Err(format!("expected quoted key in {s:?}"));
        }
        let key: String = chars.by_ref().take_while(|&c| c != quote).collect();
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.next() != Some(':') {
            return Err(format!("expected ':' after key {key:?}"));
        }
        let mut num = String::new();
        while let Some(&c) = chars.peek() {
            if c == ',' {
                break;
            }
            num.push(c);
            chars.next();
        }
        let value: f64 = num
            .trim()
            .parse()
            .map_err(|_| format!("invalid likelihood {:?} for {key:?}", num.trim()))?;
        if !(0.0..=100.0).contains(&value) {
            return Err(format!("likelihood {value} for {key:?} outside [0, 100]"));
        }
        out.insert(key, value);
    }
    Ok(out)
}
