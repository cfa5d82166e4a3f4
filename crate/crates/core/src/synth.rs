//! Deterministic multi-class synthetic 12-lead ECG.
//!
//! Each beat is a sum of Gaussian bumps (P, Q, R, S, T) per independent lead
//! (I, II, V1–V6); the remaining limb leads follow from Einthoven/Goldberger
//! relations. Per-patient traits (heart rate, amplitude scale, per-lead gain,
//! beat phase) are drawn once per patient, so records of one patient resemble
//! each other more than records of different patients.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leads::STANDARD_12;
use crate::wfdb::{DiagnosticLabels, SignalRecord};

/// Leads whose waveforms are specified directly; the other four are derived.
pub const INDEPENDENT_LEADS: [&str; 8] = ["I", "II", "V1", "V2", "V3", "V4", "V5", "V6"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveComponent {
    /// Position within the beat as a fraction of the RR interval.
    pub center: f64,
    /// Gaussian standard deviation in seconds.
    pub width: f64,
    /// Peak amplitude in mV.
    pub amplitude: f64,
}

fn default_amplitude_jitter() -> f64 {
    0.12
}
fn default_lead_jitter() -> f64 {
    0.08
}
fn default_rr_jitter() -> f64 {
    0.02
}
fn default_wander() -> f64 {
    0.15
}
fn default_powerline() -> f64 {
    0.03
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClassSpec {
    pub class_name: String,
    pub leads: BTreeMap<String, Vec<WaveComponent>>,
    /// Inclusive heart-rate range in bpm.
    pub heart_rate: [f64; 2],
    pub noise_sigma: f64,
    #[serde(default = "default_amplitude_jitter")]
    pub amplitude_jitter: f64,
    #[serde(default = "default_lead_jitter")]
    pub lead_jitter: f64,
    #[serde(default = "default_rr_jitter")]
    pub rr_jitter: f64,
    #[serde(default = "default_wander")]
    pub baseline_wander_mv: f64,
    #[serde(default = "default_powerline")]
    pub powerline_mv: f64,
}

impl SynthClassSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.heart_rate;
        if !(40.0..=180.0).contains(&lo) || !(40.0..=180.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!(
                "class {}: heart rate range {lo}–{hi} bpm outside [40, 180]",
                self.class_name
            )));
        }
        for (lead, comps) in &self.leads {
            if !INDEPENDENT_LEADS.contains(&lead.as_str()) {
                return Err(Error::Config(format!(
                    "class {}: lead {lead} cannot be specified (expected one of {INDEPENDENT_LEADS:?})",
                    self.class_name
                )));
            }
            if comps.iter().any(|c| !(c.width > 0.0)) {
                return Err(Error::Config(format!(
                    "class {}: lead {lead} has a non-positive width",
                    self.class_name
                )));
            }
        }
        if self.noise_sigma < 0.0 || self.amplitude_jitter < 0.0 || self.lead_jitter < 0.0 || self.rr_jitter < 0.0 {
            return Err(Error::Config(format!("class {}: negative noise or jitter", self.class_name)));
        }
        Ok(())
    }
}

/// Traits fixed for every record of one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTraits {
    pub heart_rate_bpm: f64,
    pub amplitude_scale: f64,
    /// Gain per independent lead, in [`INDEPENDENT_LEADS`] order.
    pub lead_scale: [f64; 8],
    /// Time from record start back to the first beat onset, in seconds.
    pub phase: f64,
}

impl PatientTraits {
    pub fn identity(heart_rate_bpm: f64) -> Self {
        PatientTraits {
            heart_rate_bpm,
            amplitude_scale: 1.0,
            lead_scale: [1.0; 8],
            phase: 0.0,
        }
    }

    pub fn draw(spec: &SynthClassSpec, rng: &mut impl Rng) -> Self {
        let [lo, hi] = spec.heart_rate;
        let heart_rate_bpm = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let jitter = |rng: &mut dyn rand::RngCore, j: f64| {
            if j > 0.0 {
                rng.random_range(1.0 - j..=1.0 + j)
            } else {
                1.0
            }
        };
        let amplitude_scale = jitter(rng, spec.amplitude_jitter);
        let mut lead_scale = [1.0; 8];
        for s in lead_scale.iter_mut() {
            *s = jitter(rng, spec.lead_jitter);
        }
        let rr = 60.0 / heart_rate_bpm;
        PatientTraits {
            heart_rate_bpm,
            amplitude_scale,
            lead_scale,
            phase: rng.random_range(0.0..rr),
        }
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Render a record for given patient traits. No duration precondition.
pub fn generate_with_traits(
    spec: &SynthClassSpec,
    traits: &PatientTraits,
    duration: f64,
    fs: f64,
    seed: u64,
) -> Result<SignalRecord> {
    spec.validate()?;
    if !(fs > 0.0 && duration > 0.0) {
        return Err(Error::Config(format!("invalid duration {duration} s or fs {fs} Hz")));
    }
    let n = (duration * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rr_mean = 60.0 / traits.heart_rate_bpm;

    // beat onsets covering [-rr, duration + rr]
    let mut onsets = Vec::new();
    let mut rrs = Vec::new();
    let mut t = -traits.phase - rr_mean;
    let rr_noise = Normal::new(0.0, 1.0).expect("unit normal");
    while t < duration + rr_mean {
        let jitter = if spec.rr_jitter > 0.0 {
            (spec.rr_jitter * rr_noise.sample(&mut rng)).clamp(-3.0 * spec.rr_jitter, 3.0 * spec.rr_jitter)
        } else {
            0.0
        };
        let rr = rr_mean * (1.0 + jitter);
        onsets.push(t);
        rrs.push(rr);
        t += rr;
    }

    let mut independent = vec![vec![0.0f64; n]; INDEPENDENT_LEADS.len()];
    for (l, name) in INDEPENDENT_LEADS.iter().enumerate() {
        let Some(comps) = spec.leads.get(*name) else { continue };
        let gain = traits.amplitude_scale * traits.lead_scale[l];
        let row = &mut independent[l];
        for (&onset, &rr) in onsets.iter().zip(&rrs) {
            for c in comps {
                let center = onset + c.center * rr;
                let reach = 8.0 * c.width;
                let i0 = (((center - reach) * fs).floor().max(0.0)) as usize;
                let i1 = ((((center + reach) * fs).ceil()).max(0.0) as usize).min(n);
                let amp = c.amplitude * gain;
                for (i, v) in row.iter_mut().enumerate().take(i1).skip(i0) {
                    let dt = i as f64 / fs - center;
                    *v += amp * (-dt * dt / (2.0 * c.width * c.width)).exp();
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    for row in independent.iter_mut() {
        if spec.baseline_wander_mv > 0.0 {
            let f = rng.random_range(0.1..0.3);
            let ph = rng.random_range(0.0..2.0 * PI);
            for (i, v) in row.iter_mut().enumerate() {
                *v += spec.baseline_wander_mv * (2.0 * PI * f * i as f64 / fs + ph).sin();
            }
        }
        if spec.powerline_mv > 0.0 {
            let ph = rng.random_range(0.0..2.0 * PI);
            for (i, v) in row.iter_mut().enumerate() {
                *v += spec.powerline_mv * (2.0 * PI * 50.0 * i as f64 / fs + ph).sin();
            }
        }
        if spec.noise_sigma > 0.0 {
            for v in row.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }

    let lead_i = &independent[0];
    let lead_ii = &independent[1];
    let derived = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        lead_i.iter().zip(lead_ii).map(|(&a, &b)| f(a, b)).collect()
    };
    let iii = derived(&|a, b| b - a);
    let avr = derived(&|a, b| -(a + b) / 2.0);
    let avl = derived(&|a, b| a - b / 2.0);
    let avf = derived(&|a, b| b - a / 2.0);
    let mut samples = vec![independent[0].clone(), independent[1].clone(), iii, avr, avl, avf];
    samples.extend(independent[2..].iter().cloned());

    Ok(SignalRecord {
        samples,
        fs,
        lead_names: STANDARD_12.iter().map(|s| s.to_string()).collect(),
        record_id: "synth".to_string(),
        patient_id: "synth".to_string(),
        labels: DiagnosticLabels::single(&spec.class_name),
        fold: None,
    })
}

/// Generate one record; patient traits are drawn from `seed`.
pub fn generate_record(spec: &SynthClassSpec, duration: f64, fs: f64, seed: u64) -> Result<SignalRecord> {
    spec.validate()?;
    let min_duration = 2.0 * 60.0 / spec.heart_rate[0];
    if duration < min_duration {
        return Err(Error::Precondition(format!(
            "duration {duration} s is shorter than two beats at {} bpm",
            spec.heart_rate[0]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 1));
    let traits = PatientTraits::draw(spec, &mut rng);
    generate_with_traits(spec, &traits, duration, fs, mix(seed, 2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub patients_per_class: usize,
    pub records_per_patient: usize,
    pub duration: f64,
    pub fs: f64,
    pub seed: u64,
}

/// Patients are enumerated class by class; patient `g` goes to fold `g % 10 + 1`.
pub fn generate_corpus(specs: &[SynthClassSpec], cfg: &CorpusConfig) -> Result<Vec<SignalRecord>> {
    if specs.is_empty() {
        return Err(Error::Config("at least one class spec is required".into()));
    }
    let mut out = Vec::with_capacity(specs.len() * cfg.patients_per_class * cfg.records_per_patient);
    let mut g = 0u64;
    for spec in specs {
        spec.validate()?;
        for _ in 0..cfg.patients_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1000 + g));
            let traits = PatientTraits::draw(spec, &mut rng);
            let fold = (g % 10) as u8 + 1;
            for r in 0..cfg.records_per_patient {
                let rec_seed = mix(mix(cfg.seed, g), r as u64 + 1);
                let mut rec = generate_with_traits(spec, &traits, cfg.duration, cfg.fs, rec_seed)?;
                rec.record_id = format!("syn{g:04}_{r}");
                rec.patient_id = format!("P{g:04}");
                rec.fold = Some(fold);
                out.push(rec);
            }
            g += 1;
        }
    }
    Ok(out)
}

fn comps(parts: &[(f64, f64, f64)]) -> Vec<WaveComponent> {
    parts
        .iter()
        .map(|&(center, width, amplitude)| WaveComponent {
            center,
            width,
            amplitude,
        })
        .collect()
}

/// Beat template from per-lead (P, Q, R, S, T) amplitudes.
fn template(name: &str, amps: [(&str, [f64; 5]); 8], scale: f64) -> SynthClassSpec {
    const CENTERS: [f64; 5] = [0.10, 0.26, 0.28, 0.30, 0.55];
    const WIDTHS: [f64; 5] = [0.025, 0.010, 0.012, 0.012, 0.045];
    let leads = amps
        .iter()
        .map(|(lead, a)| {
            let parts: Vec<(f64, f64, f64)> = (0..5)
                .filter(|&k| a[k] != 0.0)
                .map(|k| (CENTERS[k], WIDTHS[k], a[k] * scale))
                .collect();
            (lead.to_string(), comps(&parts))
        })
        .collect();
    SynthClassSpec {
        class_name: name.to_string(),
        leads,
        heart_rate: [55.0, 95.0],
        noise_sigma: 0.02,
        amplitude_jitter: default_amplitude_jitter(),
        lead_jitter: default_lead_jitter(),
        rr_jitter: default_rr_jitter(),
        baseline_wander_mv: default_wander(),
        powerline_mv: default_powerline(),
    }
}

const NORM_AMPS: [(&str, [f64; 5]); 8] = [
    ("I", [0.08, -0.05, 0.60, -0.10, 0.18]),
    ("II", [0.12, -0.06, 1.00, -0.15, 0.28]),
    ("V1", [0.05, 0.0, 0.15, -0.85, -0.08]),
    ("V2", [0.06, 0.0, 0.35, -1.10, 0.35]),
    ("V3", [0.06, 0.0, 0.70, -0.70, 0.38]),
    ("V4", [0.07, -0.03, 1.10, -0.40, 0.36]),
    ("V5", [0.07, -0.05, 1.20, -0.20, 0.30]),
    ("V6", [0.07, -0.05, 1.00, -0.10, 0.24]),
];

/// The four built-in classes: normal, tall right-precordial R, inverted T,
/// and low voltage.
pub fn builtin_classes() -> Vec<SynthClassSpec> {
    let tall_r = [
        ("I", [0.08, 0.0, 0.35, -0.45, 0.15]),
        ("II", [0.15, 0.0, 1.10, -0.10, 0.25]),
        ("V1", [0.05, 0.0, 1.00, -0.20, -0.30]),
        ("V2", [0.06, 0.0, 1.20, -0.40, -0.10]),
        ("V3", [0.06, 0.0, 1.00, -0.60, -0.20]),
        ("V4", [0.07, 0.0, 0.90, -0.70, 0.15]),
        ("V5", [0.07, 0.0, 0.70, -0.70, 0.20]),
        ("V6", [0.07, 0.0, 0.50, -0.60, 0.20]),
    ];
    let mut inv_t = NORM_AMPS;
    for (lead, t) in [
        ("I", -0.12),
        ("II", -0.15),
        ("V1", 0.12),
        ("V2", -0.25),
        ("V3", -0.40),
        ("V4", -0.45),
        ("V5", -0.35),
        ("V6", -0.25),
    ] {
        let slot = inv_t.iter_mut().find(|(l, _)| *l == lead).expect("lead in template");
        slot.1[4] = t;
    }
    vec![
        template("NORM", NORM_AMPS, 1.0),
        template("TALLR", tall_r, 1.0),
        template("INVT", inv_t, 1.0),
        template("LOWV", NORM_AMPS, 0.35),
    ]
}

pub fn load_class_specs(json: &str) -> Result<Vec<SynthClassSpec>> {
    let specs: Vec<SynthClassSpec> = serde_json::from_str(json)
        .map_err(|e| Error::Config(format!("class spec file: {e}")))?;
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(mut spec: SynthClassSpec) -> SynthClassSpec {
        spec.noise_sigma = 0.0;
        spec.rr_jitter = 0.0;
        spec.baseline_wander_mv = 0.0;
        spec.powerline_mv = 0.0;
        spec
    }

    #[test]
    fn single_gaussian_matches_closed_form() {
        let mut leads = BTreeMap::new();
        leads.insert("II".to_string(), comps(&[(0.5, 0.01, 1.3)]));
        let spec = quiet(SynthClassSpec {
            class_name: "X".into(),
            leads,
            heart_rate: [60.0, 60.0],
            noise_sigma: 0.0,
            amplitude_jitter: 0.0,
            lead_jitter: 0.0,
            rr_jitter: 0.0,
            baseline_wander_mv: 0.0,
            powerline_mv: 0.0,
        });
        let fs = 500.0;
        let rec = generate_with_traits(&spec, &PatientTraits::identity(60.0), 1.0, fs, 3).unwrap();
        let ii = rec.lead("II").unwrap();
        assert_eq!(ii.len(), 500);
        let max_err = ii
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let dt = i as f64 / fs - 0.5;
                (v - 1.3 * (-dt * dt / (2.0 * 0.01 * 0.01)).exp()).abs()
            })
            .fold(0.0, f64::max);
        assert!(max_err < 1e-9, "{max_err}");
        // lead I is absent, so III = II and aVF = II
        assert_eq!(rec.lead("III").unwrap(), ii);
        assert!(rec.lead("V3").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = &builtin_classes()[0];
        let a = generate_record(spec, 10.0, 500.0, 11).unwrap();
        let b = generate_record(spec, 10.0, 500.0, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_record(spec, 10.0, 500.0, 12).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn too_short_duration_rejected() {
        let spec = &builtin_classes()[0];
        assert!(matches!(generate_record(spec, 1.0, 100.0, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn limb_relations_hold() {
        let rec = generate_record(&builtin_classes()[1], 4.0, 100.0, 5).unwrap();
        let l = |n| rec.lead(n).unwrap();
        for t in 0..rec.n_samples() {
            assert!((l("III")[t] - (l("II")[t] - l("I")[t])).abs() < 1e-12);
            assert!((l("aVR")[t] + (l("I")[t] + l("II")[t]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn class_amplitude_separation() {
        let base = quiet(builtin_classes()[0].clone());
        let mut lo = base.clone();
        let mut hi = base;
        lo.noise_sigma = 0.02;
        hi.noise_sigma = 0.02;
        lo.leads.insert("V3".into(), comps(&[(0.28, 0.012, 1.0)]));
        hi.leads.insert("V3".into(), comps(&[(0.28, 0.012, 2.0)]));
        let peak_mean = |spec: &SynthClassSpec| -> f64 {
            (0..50)
                .map(|s| {
                    let r = generate_record(spec, 3.0, 500.0, s).unwrap();
                    r.lead("V3").unwrap().iter().copied().fold(f64::MIN, f64::max)
                })
                .sum::<f64>()
                / 50.0
        };
        let gap = peak_mean(&hi) - peak_mean(&lo);
        assert!(gap > 5.0 * 0.02, "{gap}");
    }

    #[test]
    fn corpus_shape_and_folds() {
        let specs = &builtin_classes()[..3];
        let cfg = CorpusConfig {
            patients_per_class: 10,
            records_per_patient: 2,
            duration: 3.0,
            fs: 100.0,
            seed: 7,
        };
        let recs = generate_corpus(specs, &cfg).unwrap();
        assert_eq!(recs.len(), 60);
        let mut fold_of: BTreeMap<String, u8> = BTreeMap::new();
        for r in &recs {
            let f = *fold_of.entry(r.patient_id.clone()).or_insert(r.fold.unwrap());
            assert_eq!(f, r.fold.unwrap(), "patient records share a fold");
        }
        assert_eq!(fold_of.len(), 30);
        let mut per_fold = [0usize; 10];
        for f in fold_of.values() {
            per_fold[*f as usize - 1] += 1;
        }
        let (mn, mx) = (per_fold.iter().min().unwrap(), per_fold.iter().max().unwrap());
        assert!(mx - mn <= 1, "{per_fold:?}");

        let other = generate_corpus(specs, &CorpusConfig { seed: 8, ..cfg.clone() }).unwrap();
        assert_eq!(other.len(), recs.len());
        assert_ne!(recs[0].samples, other[0].samples);
        assert_eq!(
            other.iter().map(|r| &r.record_id).collect::<Vec<_>>(),
            recs.iter().map(|r| &r.record_id).collect::<Vec<_>>()
        );
    }

    #[test]
    fn single_patient_single_fold() {
        let cfg = CorpusConfig {
            patients_per_class: 1,
            records_per_patient: 3,
            duration: 3.0,
            fs: 100.0,
            seed: 1,
        };
        let recs = generate_corpus(&builtin_classes()[..1], &cfg).unwrap();
        assert!(recs.iter().all(|r| r.fold == recs[0].fold));
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn intra_patient_similarity_exceeds_inter_patient() {
        let cfg = CorpusConfig {
            patients_per_class: 20,
            records_per_patient: 2,
            duration: 5.0,
            fs: 100.0,
            seed: 3,
        };
        let recs = generate_corpus(&builtin_classes()[..1], &cfg).unwrap();
        let v5 = |i: usize| recs[i].lead("V5").unwrap();
        let intra: f64 = (0..20).map(|p| corr(v5(2 * p), v5(2 * p + 1))).sum::<f64>() / 20.0;
        let inter: f64 = (0..20).map(|p| corr(v5(2 * p), v5((2 * p + 2) % 40))).sum::<f64>() / 20.0;
        assert!(intra > inter, "intra {intra} inter {inter}");
    }

    #[test]
    fn spec_validation_and_json() {
        let specs = builtin_classes();
        let json = serde_json::to_string(&specs).unwrap();
        assert_eq!(load_class_specs(&json).unwrap(), specs);
        let mut bad = specs[0].clone();
        bad.heart_rate = [30.0, 60.0];
        assert!(bad.validate().is_err());
        let mut bad = specs[0].clone();
        bad.leads.get_mut("V1").unwrap()[0].width = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = specs[0].clone();
        bad.leads.insert("aVR".into(), vec![]);
        assert!(bad.validate().is_err());
    }
}
