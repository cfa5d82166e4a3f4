//! Signal cleaning: powerline notch, Butterworth band-pass, two-stage median
//! baseline removal, integer-factor resampling to 100 Hz, and R-peak detection.
//!
//! IIR filters are realized as cascaded second-order sections in transposed
//! direct form II and applied forward-backward (zero phase) with odd-extension
//! padding and steady-state initial conditions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target rate for every signal entering segmentation.
pub const TARGET_FS: f64 = 100.0;

/// Lowered band-pass edge used when the requested edge yields an unstable filter.
pub const FALLBACK_HIGH_HZ: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSpec {
    pub notch_freq: f64,
    pub notch_q: f64,
    pub bandpass_low: f64,
    pub bandpass_high: f64,
    pub bandpass_order: usize,
    pub median_win_short: f64,
    pub median_win_long: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            notch_freq: 50.0,
            notch_q: 30.0,
            bandpass_low: 0.5,
            bandpass_high: 45.0,
            bandpass_order: 4,
            median_win_short: 0.2,
            median_win_long: 0.6,
        }
    }
}

/// One normalized second-order section (a0 = 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Both poles strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        self.a2.abs() < 1.0 && self.a1.abs() < 1.0 + self.a2
    }

    /// DC gain H(1).
    fn dc_gain(&self) -> f64 {
        let den = 1.0 + self.a1 + self.a2;
        if den.abs() < 1e-300 {
            0.0
        } else {
            (self.b0 + self.b1 + self.b2) / den
        }
    }

    /// Magnitude response at `f` Hz.
    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        let (c1, s1, c2, s2) = (w.cos(), -w.sin(), (2.0 * w).cos(), -(2.0 * w).sin());
        let num = (self.b0 + self.b1 * c1 + self.b2 * c2, self.b1 * s1 + self.b2 * s2);
        let den = (1.0 + self.a1 * c1 + self.a2 * c2, self.a1 * s1 + self.a2 * s2);
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }
}

/// A cascade of second-order sections.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sos(pub Vec<Biquad>);

impl Sos {
    pub fn is_stable(&self) -> bool {
        self.0.iter().all(Biquad::is_stable)
    }

    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        self.0.iter().map(|b| b.magnitude(f, fs)).product()
    }

    fn chain(mut self, other: Sos) -> Sos {
        self.0.extend(other.0);
        self
    }

    /// Single causal pass starting from the steady state for a constant `x[0]`.
    fn filter_steady(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let mut level = x0;
        for s in &self.0 {
            let g = s.dc_gain();
            let y0 = g * level;
            let mut z2 = s.b2 * level - s.a2 * y0;
            let mut z1 = s.b1 * level - s.a1 * y0 + z2;
            for v in x.iter_mut() {
                let xin = *v;
                let y = s.b0 * xin + z1;
                z1 = s.b1 * xin - s.a1 * y + z2;
                z2 = s.b2 * xin - s.a2 * y;
                *v = y;
            }
            level = y0;
        }
    }

    /// Forward-backward application with odd-extension padding.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 || self.0.is_empty() {
            return x.to_vec();
        }
        let pad = (3 * (2 * self.0.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.filter_steady(&mut ext);
        ext.reverse();
        self.filter_steady(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

#[derive(Clone, Copy)]
enum Pass {
    Low,
    High,
}

/// Butterworth design by bilinear transform with frequency prewarping.
fn butterworth(order: usize, fc: f64, fs: f64, pass: Pass) -> Sos {
    let k = (PI * fc / fs).tan();
    let mut sections = Vec::with_capacity(order.div_ceil(2));
    for i in 0..order / 2 {
        // s² + a·s + 1 with a = 2 sin((2i+1)π / 2N)
        let a = 2.0 * ((2 * i + 1) as f64 * PI / (2 * order) as f64).sin();
        let norm = 1.0 / (1.0 + a * k + k * k);
        let a1 = 2.0 * (k * k - 1.0) * norm;
        let a2 = (1.0 - a * k + k * k) * norm;
        let (b0, b1, b2) = match pass {
            Pass::Low => (k * k * norm, 2.0 * k * k * norm, k * k * norm),
            Pass::High => (norm, -2.0 * norm, norm),
        };
        sections.push(Biquad { b0, b1, b2, a1, a2 });
    }
    if order % 2 == 1 {
        let norm = 1.0 / (1.0 + k);
        let a1 = (k - 1.0) * norm;
        let (b0, b1) = match pass {
            Pass::Low => (k * norm, k * norm),
            Pass::High => (norm, -norm),
        };
        sections.push(Biquad { b0, b1, b2: 0.0, a1, a2: 0.0 });
    }
    Sos(sections)
}

pub fn butterworth_lowpass(order: usize, fc: f64, fs: f64) -> Sos {
    butterworth(order, fc, fs, Pass::Low)
}

pub fn butterworth_highpass(order: usize, fc: f64, fs: f64) -> Sos {
    butterworth(order, fc, fs, Pass::High)
}

/// RBJ notch biquad.
pub fn notch_biquad(f0: f64, q: f64, fs: f64) -> Biquad {
    let w0 = 2.0 * PI * f0 / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    Biquad {
        b0: 1.0 / a0,
        b1: -2.0 * w0.cos() / a0,
        b2: 1.0 / a0,
        a1: -2.0 * w0.cos() / a0,
        a2: (1.0 - alpha) / a0,
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Data("signal contains non-finite samples".into()))
    }
}

pub fn notch_filter(x: &[f64], fs: f64, spec: &FilterSpec) -> Result<Vec<f64>> {
    if !(spec.notch_freq > 0.0 && spec.notch_freq < fs / 2.0) {
        return Err(Error::FilterSpec(format!(
            "notch frequency {} Hz must lie in (0, fs/2 = {} Hz)",
            spec.notch_freq,
            fs / 2.0
        )));
    }
    if spec.notch_q <= 0.0 {
        return Err(Error::FilterSpec(format!("notch Q must be > 0, got {}", spec.notch_q)));
    }
    check_finite(x)?;
    Ok(Sos(vec![notch_biquad(spec.notch_freq, spec.notch_q, fs)]).filtfilt(x))
}

/// Realized band-pass cascade, after any stability fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct BandpassDesign {
    pub sos: Sos,
    pub low_hz: f64,
    pub high_hz: f64,
    /// Set when the requested upper edge produced an unstable cascade.
    pub fell_back: bool,
}

pub fn design_bandpass(fs: f64, spec: &FilterSpec) -> Result<BandpassDesign> {
    let (lo, hi) = (spec.bandpass_low, spec.bandpass_high);
    if !(lo > 0.0 && lo < hi && hi < fs / 2.0) {
        return Err(Error::FilterSpec(format!(
            "band-pass edges must satisfy 0 < {lo} < {hi} < fs/2 = {}",
            fs / 2.0
        )));
    }
    if spec.bandpass_order == 0 {
        return Err(Error::FilterSpec("band-pass order must be ≥ 1".into()));
    }
    let build = |high: f64| {
        butterworth_highpass(spec.bandpass_order, lo, fs)
            .chain(butterworth_lowpass(spec.bandpass_order, high, fs))
    };
    let sos = build(hi);
    if sos.is_stable() {
        return Ok(BandpassDesign {
            sos,
            low_hz: lo,
            high_hz: hi,
            fell_back: false,
        });
    }
    let sos = build(FALLBACK_HIGH_HZ);
    if FALLBACK_HIGH_HZ > lo && FALLBACK_HIGH_HZ < fs / 2.0 && sos.is_stable() {
        log::warn!("band-pass upper edge {hi} Hz unstable at fs={fs}; using {FALLBACK_HIGH_HZ} Hz");
        return Ok(BandpassDesign {
            sos,
            low_hz: lo,
            high_hz: FALLBACK_HIGH_HZ,
            fell_back: true,
        });
    }
    Err(Error::FilterSpec(format!("band-pass {lo}–{hi} Hz is unstable at fs={fs}")))
}

pub fn bandpass_filter(x: &[f64], fs: f64, spec: &FilterSpec) -> Result<Vec<f64>> {
    let design = design_bandpass(fs, spec)?;
    check_finite(x)?;
    Ok(design.sos.filtfilt(x))
}

/// Window length in samples, rounded to the nearest odd count ≥ 1.
pub fn odd_window(seconds: f64, fs: f64) -> usize {
    let n = (seconds * fs).round().max(1.0) as usize;
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

/// Reflect an out-of-range index back into `0..n` (edge sample not repeated).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Running median over an odd window with reflection padding.
pub fn median_filter(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 || window <= 1 {
        return x.to_vec();
    }
    let half = (window / 2) as isize;
    let mut buf = vec![0.0; window];
    (0..n)
        .map(|i| {
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = x[reflect(i as isize + k as isize - half, n)];
            }
            let (_, m, _) = buf.select_nth_unstable_by(window / 2, f64::total_cmp);
            *m
        })
        .collect()
}

/// x − median_long(median_short(x)).
pub fn baseline_remove(x: &[f64], fs: f64, spec: &FilterSpec) -> Result<Vec<f64>> {
    if !(spec.median_win_short > 0.0 && spec.median_win_long > 0.0) {
        return Err(Error::FilterSpec("median windows must be positive".into()));
    }
    check_finite(x)?;
    let short = median_filter(x, odd_window(spec.median_win_short, fs));
    let baseline = median_filter(&short, odd_window(spec.median_win_long, fs));
    Ok(x.iter().zip(&baseline).map(|(v, b)| v - b).collect())
}

/// Integer decimation factor from `fs_in` to 100 Hz.
pub fn decimation_factor(fs_in: f64) -> Result<usize> {
    let ratio = fs_in / TARGET_FS;
    if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 {
        return Err(Error::UnsupportedRate(fs_in));
    }
    Ok(ratio.round() as usize)
}

/// Anti-alias low-pass at 45 Hz then integer decimation.
/// Output length is ⌊len·100/fs_in⌋.
pub fn resample_to_100hz(x: &[f64], fs_in: f64) -> Result<Vec<f64>> {
    let factor = decimation_factor(fs_in)?;
    if factor == 1 {
        return Ok(x.to_vec());
    }
    check_finite(x)?;
    let filtered = butterworth_lowpass(8, 45.0, fs_in).filtfilt(x);
    let out_len = x.len() / factor;
    Ok((0..out_len).map(|k| filtered[k * factor]).collect())
}

/// Pan-Tompkins-style QRS detector.
///
/// Band-pass 5–15 Hz, derivative, squaring, 0.15 s moving-window integration,
/// adaptive threshold at half the running peak average, 0.2 s refractory
/// period. Each accepted integrator peak is refined to the band-passed maximum
/// within ±80 ms. Returns strictly increasing sample indices.
pub fn detect_r_peaks(lead_ii: &[f64], fs: f64) -> Vec<usize> {
    let n = lead_ii.len();
    if n < 3 || lead_ii.iter().any(|v| !v.is_finite()) {
        return Vec::new();
    }
    let refractory = (0.2 * fs).ceil() as usize;
    let nyq = fs / 2.0;
    let band = butterworth_highpass(2, 5.0, fs).chain(butterworth_lowpass(2, 15.0f64.min(0.9 * nyq), fs));
    let bp = band.filtfilt(lead_ii);

    let mut sq = vec![0.0; n];
    for i in 1..n - 1 {
        let d = 0.5 * (bp[i + 1] - bp[i - 1]);
        sq[i] = d * d;
    }
    let w = odd_window(0.15, fs);
    let half = w / 2;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + sq[i];
    }
    let mwi: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / w as f64
        })
        .collect();

    let global_max = mwi.iter().copied().fold(0.0, f64::max);
    if global_max <= 1e-12 {
        return Vec::new();
    }
    let init_span = ((2.0 * fs) as usize).clamp(1, n);
    let mut running_peak = mwi[..init_span].iter().copied().fold(0.0, f64::max);
    if running_peak <= 1e-12 {
        running_peak = global_max;
    }

    let mut accepted: Vec<(usize, f64)> = Vec::new();
    for i in 1..n - 1 {
        let v = mwi[i];
        if !(v > mwi[i - 1] && v >= mwi[i + 1]) || v < 0.5 * running_peak {
            continue;
        }
        match accepted.last_mut() {
            Some(last) if i - last.0 < refractory => {
                if v > last.1 {
                    *last = (i, v);
                }
            }
            _ => accepted.push((i, v)),
        }
        running_peak = 0.875 * running_peak + 0.125 * v;
    }

    let search = (0.08 * fs).round() as usize;
    let mut peaks: Vec<(usize, f64)> = Vec::with_capacity(accepted.len());
    for (i, _) in accepted {
        let lo = i.saturating_sub(search);
        let hi = (i + search + 1).min(n);
        let (best, &val) = bp[lo..hi]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty search window");
        let idx = lo + best;
        match peaks.last_mut() {
            Some(last) if idx <= last.0 || idx - last.0 < refractory => {
                if val > last.1 {
                    *last = (idx.max(last.0), val);
                }
            }
            _ => peaks.push((idx, val)),
        }
    }
    peaks.into_iter().map(|(i, _)| i).collect()
}

/// The full cleaning chain for one lead: notch at the native rate (skipped
/// when the notch frequency is at or above Nyquist), resampling to 100 Hz,
/// band-pass, and baseline removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub notch_applied: bool,
    pub bandpass_high_hz: f64,
    pub bandpass_fell_back: bool,
}

pub fn clean_lead(x: &[f64], fs: f64, spec: &FilterSpec) -> Result<(Vec<f64>, CleaningReport)> {
    let notch_applied = spec.notch_freq < fs / 2.0;
    let notched = if notch_applied {
        notch_filter(x, fs, spec)?
    } else {
        x.to_vec()
    };
    let resampled = resample_to_100hz(&notched, fs)?;
    let design = design_bandpass(TARGET_FS, spec)?;
    let banded = design.sos.filtfilt(&resampled);
    let cleaned = baseline_remove(&banded, TARGET_FS, spec)?;
    Ok((
        cleaned,
        CleaningReport {
            notch_applied,
            bandpass_high_hz: design.high_hz,
            bandpass_fell_back: design.fell_back,
        },
    ))
}
