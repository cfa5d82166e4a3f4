use std::collections::BTreeSet;

use leadrecon::contrastive::{pretrain, supcon_loss, PretrainConfig};
use leadrecon::dataset::{
    apply_qc, fit_qc_bounds, patient_sets, segment_offsets, segment_record, split_by_fold, Segment,
};
use leadrecon::dsp::{bandpass_filter, detect_r_peaks, notch_filter, FilterSpec};
use leadrecon::reconstruction::{denormalize_target, normalize_target, LeadStats};
use leadrecon::synth::{builtin_classes, generate_record};
use leadrecon::wfdb::{digitize, header_for, read_signals, write_signals, DiagnosticLabels, SignalRecord};
use leadrecon::Error;
use proptest::prelude::*;

fn record_from_raw(rows: &[Vec<i16>], gain: f64) -> SignalRecord {
    SignalRecord {
        samples: rows.iter().map(|r| r.iter().map(|&v| v as f64 / gain).collect()).collect(),
        fs: 100.0,
        lead_names: (0..rows.len()).map(|i| format!("L{i}")).collect(),
        record_id: "prop".into(),
        patient_id: "p".into(),
        labels: DiagnosticLabels::default(),
        fold: None,
    }
}

fn raw_rows() -> impl Strategy<Value = Vec<Vec<i16>>> {
    (1usize..4, 1usize..40).prop_flat_map(|(s, n)| prop::collection::vec(prop::collection::vec(any::<i16>(), n), s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn format16_round_trip_is_bit_exact(rows in raw_rows()) {
        let rec = record_from_raw(&rows, 1000.0);
        let header = header_for(&rec, 1000.0);
        let bytes = write_signals(&header, &rec).unwrap();
        let back = read_signals(&header, &bytes, true).unwrap();
        let again = write_signals(&header, &back).unwrap();
        prop_assert_eq!(&bytes, &again);
        for (r, b) in rows.iter().zip(&back.samples) {
            prop_assert_eq!(r, &digitize(b, 1000.0, 0));
        }
    }

    #[test]
    fn checksum_rejects_any_single_sample_flip(rows in raw_rows(), pick in any::<prop::sample::Index>(), delta in 1i16..=i16::MAX) {
        let rec = record_from_raw(&rows, 1000.0);
        let header = header_for(&rec, 1000.0);
        let mut bytes = write_signals(&header, &rec).unwrap();
        let i = pick.index(bytes.len() / 2);
        let v = i16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]).wrapping_add(delta);
        bytes[2 * i..2 * i + 2].copy_from_slice(&v.to_le_bytes());
        let flagged = matches!(read_signals(&header, &bytes, true), Err(Error::Checksum { .. }));
        prop_assert!(flagged);
        prop_assert!(read_signals(&header, &bytes, false).is_ok());
    }

    #[test]
    fn digitize_inverts_physical_conversion(raw in prop::collection::vec(-20000i16..20000, 1..50), gain in 100.0f64..2000.0, base in -500i32..500) {
        let mv: Vec<f64> = raw.iter().map(|&r| (r as i32 - base) as f64 / gain).collect();
        prop_assert_eq!(digitize(&mv, gain, base), raw);
    }

    #[test]
    fn filters_are_linear_and_length_preserving(
        x in prop::collection::vec(-2.0f64..2.0, 300..400),
        noise in prop::collection::vec(-2.0f64..2.0, 400),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let y = &noise[..x.len()];
        let spec = FilterSpec::default();
        let mix: Vec<f64> = x.iter().zip(y).map(|(p, q)| a * p + b * q).collect();
        type Filter = fn(&[f64], f64, &FilterSpec) -> leadrecon::Result<Vec<f64>>;
        for (f, fs) in [(notch_filter as Filter, 500.0), (bandpass_filter as Filter, 100.0)] {
            let (fx, fy, fm) = (f(&x, fs, &spec).unwrap(), f(y, fs, &spec).unwrap(), f(&mix, fs, &spec).unwrap());
            prop_assert_eq!(fm.len(), x.len());
            let scale = fm.iter().map(|v| v.abs()).fold(1.0, f64::max);
            for i in 0..fm.len() {
                prop_assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() <= 1e-9 * scale);
            }
        }
    }

    #[test]
    fn r_peaks_increase_with_refractory_gap(x in prop::collection::vec(-1.5f64..1.5, 200..800)) {
        let peaks = detect_r_peaks(&x, 100.0);
        for w in peaks.windows(2) {
            prop_assert!(w[1] > w[0] && w[1] - w[0] >= 20);
        }
    }

    #[test]
    fn supcon_is_permutation_invariant(
        seed in any::<u64>(),
        b in 2usize..7,
        d in 1usize..5,
        perm_seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng, seq::SliceRandom};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut z = Vec::new();
        for _ in 0..b {
            let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            v[0] += if v[0] >= 0.0 { 0.1 } else { -0.1 };
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            z.extend(v.iter().map(|a| a / n));
        }
        let labels: Vec<Vec<String>> = (0..b).map(|_| vec![["A", "B"][rng.random_range(0..2)].to_string()]).collect();
        let mut order: Vec<usize> = (0..b).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let zp: Vec<f64> = order.iter().flat_map(|&i| z[i * d..(i + 1) * d].to_vec()).collect();
        let lp: Vec<Vec<String>> = order.iter().map(|&i| labels[i].clone()).collect();
        match (supcon_loss(&z, d, &labels, 0.07), supcon_loss(&zp, d, &lp, 0.07)) {
            (Ok(a), Ok(c)) => prop_assert!((a - c).abs() < 1e-6),
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "permutation changed the outcome: {:?}", other),
        }
    }

    #[test]
    fn target_normalization_round_trips(y in prop::collection::vec(-5.0f32..5.0, 1..64), mean in -1.0f64..1.0, std in 1e-6f64..3.0) {
        let s = LeadStats { mean, std };
        let back = denormalize_target(&normalize_target(&y, &s), &s);
        for (a, b) in y.iter().zip(&back) {
            prop_assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn segmentation_offsets_are_a_pure_function(n in 0usize..3000, w in 1usize..300, hop in 1usize..100) {
        let offs = segment_offsets(n, w, hop);
        prop_assert_eq!(&offs, &segment_offsets(n, w, hop));
        prop_assert!(offs.iter().all(|&o| o + w <= n && o % hop == 0));
    }
}

fn synth_records(patients: usize) -> Vec<SignalRecord> {
    let spec = &builtin_classes()[0];
    (0..patients)
        .map(|g| {
            let mut r = generate_record(spec, 10.0, 100.0, g as u64).unwrap();
            r.record_id = format!("r{g}");
            r.patient_id = format!("P{}", g / 2);
            r.fold = Some((g / 2 % 10) as u8 + 1);
            r
        })
        .collect()
}

#[test]
fn qc_is_idempotent() {
    let segs: Vec<Segment> = synth_records(12)
        .iter()
        .flat_map(|r| segment_record(r, 256, 64).unwrap())
        .collect();
    let bounds = fit_qc_bounds(&segs, 5.0, 95.0).unwrap();
    let first = apply_qc(segs, &bounds);
    assert!(!first.rejected.is_empty());
    let second = apply_qc(first.kept, &bounds);
    assert!(second.rejected.is_empty());
}

#[test]
fn split_is_a_partition() {
    let recs = synth_records(40);
    let ids: BTreeSet<String> = recs.iter().map(|r| r.record_id.clone()).collect();
    let split = split_by_fold(recs).unwrap();
    let mut seen = BTreeSet::new();
    for r in split.train.iter().chain(&split.val).chain(&split.test) {
        assert!(seen.insert(r.record_id.clone()));
    }
    assert_eq!(seen, ids);
    let [a, b, c] = patient_sets(&split);
    assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
}

#[test]
fn generator_is_pure() {
    let spec = &builtin_classes()[2];
    assert_eq!(generate_record(spec, 5.0, 250.0, 11).unwrap(), generate_record(spec, 5.0, 250.0, 11).unwrap());
    assert_ne!(generate_record(spec, 5.0, 250.0, 11).unwrap(), generate_record(spec, 5.0, 250.0, 12).unwrap());
}

#[test]
fn training_trajectory_is_bit_identical() {
    let specs = builtin_classes();
    let segs: Vec<Segment> = (0..8)
        .flat_map(|g| {
            let mut r = generate_record(&specs[g % 2], 10.0, 100.0, g as u64).unwrap();
            r.fold = Some(1);
            segment_record(&r, 256, 256).unwrap()
        })
        .collect();
    let cfg = PretrainConfig {
        epochs: 1,
        batch_pairs: 8,
        max_steps: Some(2),
        seed: 3,
        ..Default::default()
    };
    let (a, la) = pretrain(&segs, &cfg).unwrap();
    let (b, lb) = pretrain(&segs, &cfg).unwrap();
    assert_eq!(la, lb);
    for (p, q) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(p.value.data(), q.value.data());
    }
}
