//! Dual-view construction, the convolutional encoder with its projection
//! head, the supervised contrastive objective and the pretraining loop.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Segment;
use crate::dsp::{detect_r_peaks, TARGET_FS};
use crate::error::{Error, Result};
use crate::leads::INPUT_LEADS;
use crate::tensor::{
    load_checkpoint, save_checkpoint, AdamW, AdamWConfig, Conv1dLayer, DenseLayer, LayerSpec, ParamStore, Scalar,
    Tape, Tensor, Var,
};

pub const TAU: f64 = 0.07;
pub const EMBED_DIM: usize = 128;
pub const PROJ_DIM: usize = 64;
const N_IN: usize = INPUT_LEADS.len();
const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub noise_sigma: f64,
    pub max_shift: i64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_lo: 0.8,
            scale_hi: 1.2,
            noise_sigma: 0.02,
            max_shift: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    /// `[3×T]`, R-peak nearest the midpoint moved to the centre.
    pub view_a: Vec<f32>,
    /// `[3×T]`, amplitude-scaled, noisy and circularly shifted.
    pub view_b: Vec<f32>,
    pub labels: Vec<String>,
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// Shift every lead so the peak closest to the midpoint lands on it; edges
/// are filled by reflection. Without peaks the input is returned unchanged.
pub fn center_on_peak(x: &[f32], t: usize, r_peaks: &[usize]) -> Vec<f32> {
    let mid = t / 2;
    let Some(&peak) = r_peaks.iter().min_by_key(|&&p| (p as isize - mid as isize).unsigned_abs()) else {
        return x.to_vec();
    };
    let shift = mid as isize - peak as isize;
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(t) {
        out.extend((0..t).map(|i| row[reflect(i as isize - shift, t)]));
    }
    out
}

pub fn augment(x: &[f32], t: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f32> {
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let shift = if cfg.max_shift > 0 {
        rng.random_range(-cfg.max_shift..=cfg.max_shift)
    } else {
        0
    };
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(t) {
        let scale = if cfg.scale_hi > cfg.scale_lo {
            rng.random_range(cfg.scale_lo..cfg.scale_hi)
        } else {
            cfg.scale_lo
        };
        for i in 0..t {
            let src = row[(i as i64 - shift).rem_euclid(t as i64) as usize] as f64;
            let n = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            out.push((src * scale + n) as f32);
        }
    }
    out
}

/// R-peaks of a segment, detected on lead II.
pub fn segment_peaks(seg: &Segment) -> Vec<usize> {
    let lead_ii: Vec<f64> = seg.lead(1).iter().map(|&v| v as f64).collect();
    detect_r_peaks(&lead_ii, TARGET_FS)
}

pub fn make_views(seg: &Segment, r_peaks: &[usize], cfg: &AugmentConfig, seed: u64) -> Result<ViewPair> {
    if seg.x.is_empty() || seg.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "segment {}@{} has missing or non-finite input",
            seg.record_id, seg.start
        )));
    }
    let t = seg.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ViewPair {
        view_a: center_on_peak(&seg.x, t, r_peaks),
        view_b: augment(&seg.x, t, cfg, &mut rng),
        labels: seg.labels.clone(),
    })
}

/// `mask[i·B + j]` is true when rows i and j share at least one label.
pub fn positive_mask(labels: &[Vec<String>]) -> Vec<bool> {
    let b = labels.len();
    let mut mask = vec![false; b * b];
    for i in 0..b {
        for j in 0..b {
            mask[i * b + j] = labels[i].iter().any(|l| labels[j].contains(l));
        }
    }
    mask
}

/// Supervised contrastive loss of unit-norm rows `z` (`B×d`, row-major).
pub fn supcon_loss(z: &[f64], d: usize, labels: &[Vec<String>], tau: f64) -> Result<f64> {
    let b = labels.len();
    if b < 2 {
        return Err(Error::Batch(format!("contrastive batch needs at least 2 rows, got {b}")));
    }
    if z.len() != b * d {
        return Err(Error::Dimension {
            op: "supcon_loss",
            lhs: vec![z.len()],
            rhs: vec![b, d],
        });
    }
    for (i, row) in z.chunks(d).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!("row {i} of z has norm {n}, expected 1")));
        }
    }
    let tape = Tape::<f64>::new();
    let zv = tape.constant(Tensor::new(vec![b, d], z.to_vec())?);
    let loss = tape.supcon(zv, &positive_mask(labels), tau)?;
    let v = tape.value(loss).item();
    Ok(v)
}

/// Convolutional trunk `x [B×3×T] → h [B×128]` plus the projection head
/// `h → z [B×64]` on the unit sphere.
#[derive(Debug, Clone)]
pub struct Encoder<S: Scalar = f32> {
    pub store: ParamStore<S>,
    convs: Vec<Conv1dLayer>,
    fc1: DenseLayer,
    fc2: DenseLayer,
}

const CONV_SHAPES: [(usize, usize, usize, usize, usize); 4] = [
    (N_IN, 32, 7, 2, 3),
    (32, 64, 5, 2, 2),
    (64, 128, 3, 2, 1),
    (128, EMBED_DIM, 3, 1, 1),
];

impl<S: Scalar> Encoder<S> {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let convs = CONV_SHAPES
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, k, s, p))| {
                Conv1dLayer::new(&mut store, &format!("enc.conv{}", i + 1), cin, cout, k, s, p, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let fc1 = DenseLayer::new(&mut store, "proj.fc1", EMBED_DIM, EMBED_DIM, &mut rng)?;
        let fc2 = DenseLayer::new(&mut store, "proj.fc2", EMBED_DIM, PROJ_DIM, &mut rng)?;
        Ok(Encoder { store, convs, fc1, fc2 })
    }

    pub fn trunk(&self, tape: &Tape<S>, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.convs {
            let c = conv.forward(tape, &self.store, h)?;
            h = tape.relu(c)?;
        }
        tape.global_avg_pool(h)
    }

    pub fn project(&self, tape: &Tape<S>, h: Var) -> Result<Var> {
        let a = self.fc1.forward(tape, &self.store, h)?;
        let a = tape.relu(a)?;
        let z = self.fc2.forward(tape, &self.store, a)?;
        tape.l2_normalize(z)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            specs.push(c.spec(&format!("enc.conv{}", i + 1)));
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::GlobalAvgPool);
        specs.push(self.fc1.spec("proj.fc1"));
        specs.push(LayerSpec::Relu);
        specs.push(self.fc2.spec("proj.fc2"));
        specs.push(LayerSpec::L2Normalize);
        specs
    }

    pub fn trunk_parameters(&self) -> usize {
        self.store
            .iter()
            .filter(|p| p.name.starts_with("enc."))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn head_parameters(&self) -> usize {
        self.store.num_parameters() - self.trunk_parameters()
    }
}

impl Encoder<f32> {
    /// `h` for `n` inputs of shape `[3×t]` stored back to back.
    pub fn embed(&self, x: &[f32], t: usize) -> Result<Vec<f32>> {
        let row = N_IN * t;
        if row == 0 || x.len() % row != 0 {
            return Err(Error::Dimension {
                op: "embed",
                lhs: vec![x.len()],
                rhs: vec![N_IN, t],
            });
        }
        let mut out = Vec::with_capacity(x.len() / row * EMBED_DIM);
        for chunk in x.chunks(256 * row) {
            let tape = Tape::new();
            let xv = tape.constant(Tensor::new(vec![chunk.len() / row, N_IN, t], chunk.to_vec())?);
            let h = self.trunk(&tape, xv)?;
            out.extend_from_slice(tape.value(h).data());
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        save_checkpoint(path, &self.store, self.layer_specs(), meta)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (desc, store) = load_checkpoint(path)?;
        let mut enc = Encoder::new(0)?;
        if desc.layers != enc.layer_specs() {
            return Err(Error::Checkpoint(format!("{}: not an encoder checkpoint", path.display())));
        }
        enc.store.copy_values_from(&store)?;
        Ok((enc, desc.meta))
    }
}

/// `h` for every segment, `N×128` row-major.
pub fn embed_all(segments: &[Segment], encoder: &Encoder) -> Result<Vec<f32>> {
    let Some(first) = segments.first() else {
        return Ok(Vec::new());
    };
    let t = first.len();
    let mut x = Vec::with_capacity(segments.len() * N_IN * t);
    for s in segments {
        if s.len() != t {
            return Err(Error::Data(format!("segment {}@{} has length {}", s.record_id, s.start, s.len())));
        }
        x.extend_from_slice(&s.x);
    }
    encoder.embed(&x, t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_pairs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_steps: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_pairs: 128,
            lr: 1e-3,
            weight_decay: 1e-4,
            tau: TAU,
            seed: 0,
            augment: AugmentConfig::default(),
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub steps: usize,
    pub mean_batch_loss: f64,
    /// Loss on the fixed probe batch after this epoch.
    pub probe_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub n_segments: usize,
    pub n_excluded: usize,
    pub probe_rows: usize,
    /// Probe-batch loss before the first update.
    pub initial_probe_loss: f64,
    pub epochs: Vec<PretrainEpoch>,
    pub steps: usize,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Batch {
    x: Vec<f32>,
    labels: Vec<Vec<String>>,
    rows: usize,
}

/// Both views of each selected segment; view_a rows first, then view_b rows.
fn view_batch(
    segments: &[&Segment],
    peaks: &[Vec<usize>],
    idx: &[usize],
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<Batch> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut labels = Vec::with_capacity(2 * idx.len());
    for &i in idx {
        let v = make_views(segments[i], &peaks[i], cfg, mix(seed, i as u64))?;
        a.extend_from_slice(&v.view_a);
        b.extend_from_slice(&v.view_b);
        labels.push(v.labels);
    }
    let mut all_labels = labels.clone();
    all_labels.extend(labels);
    a.extend_from_slice(&b);
    Ok(Batch {
        x: a,
        labels: all_labels,
        rows: 2 * idx.len(),
    })
}

fn batch_loss(encoder: &Encoder, batch: &Batch, t: usize, tau: f64) -> Result<(Tape, Var)> {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![batch.rows, N_IN, t], batch.x.clone())?);
    let h = encoder.trunk(&tape, x)?;
    let z = encoder.project(&tape, h)?;
    let loss = tape.supcon(z, &positive_mask(&batch.labels), tau)?;
    Ok((tape, loss))
}

/// Train the encoder on segments that carry at least one high-confidence label.
pub fn pretrain(segments: &[Segment], cfg: &PretrainConfig) -> Result<(Encoder, PretrainLog)> {
    let usable: Vec<&Segment> = segments.iter().filter(|s| !s.labels.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Precondition(
            "no training segment carries a high-confidence label".into(),
        ));
    }
    if cfg.batch_pairs == 0 || cfg.epochs == 0 {
        return Err(Error::Config("pretraining needs batch_pairs ≥ 1 and epochs ≥ 1".into()));
    }
    let t = usable[0].len();
    if usable.iter().any(|s| s.len() != t) {
        return Err(Error::Data("pretraining segments differ in length".into()));
    }
    let peaks: Vec<Vec<usize>> = usable.iter().map(|s| segment_peaks(s)).collect();
    let mut encoder = Encoder::<f32>::new(cfg.seed)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &encoder.store,
    );

    // strided, so the probe spans every class even when segments are grouped
    let stride = (usable.len() / cfg.batch_pairs).max(1);
    let probe_idx: Vec<usize> = (0..usable.len()).step_by(stride).take(cfg.batch_pairs).collect();
    let probe = view_batch(&usable, &peaks, &probe_idx, &cfg.augment, mix(cfg.seed, u64::MAX))?;
    let probe_loss = |enc: &Encoder| -> Result<f64> {
        let (tape, loss) = batch_loss(enc, &probe, t, cfg.tau)?;
        let v = tape.value(loss).item() as f64;
        Ok(v)
    };
    let mut log = PretrainLog {
        n_segments: usable.len(),
        n_excluded: segments.len() - usable.len(),
        probe_rows: probe.rows,
        initial_probe_loss: probe_loss(&encoder)?,
        epochs: Vec::new(),
        steps: 0,
    };
    info!(
        "pretrain: {} segments ({} excluded), initial probe loss {:.4}",
        log.n_segments, log.n_excluded, log.initial_probe_loss
    );

    let mut order: Vec<usize> = (0..usable.len()).collect();
    'outer: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64 + 1));
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_pairs).enumerate() {
            if cfg.max_steps.is_some_and(|m| log.steps >= m) {
                break;
            }
            let seed = mix(mix(cfg.seed, epoch as u64 + 1), bi as u64 + 1);
            let batch = view_batch(&usable, &peaks, chunk, &cfg.augment, seed)?;
            let (tape, loss) = batch_loss(&encoder, &batch, t, cfg.tau)?;
            let grads = tape.backward(loss)?;
            encoder.store.zero_grad();
            encoder.store.accumulate(&tape, &grads);
            opt.step(&mut encoder.store)?;
            sum += tape.value(loss).item() as f64;
            steps += 1;
            log.steps += 1;
        }
        let entry = PretrainEpoch {
            epoch,
            steps,
            mean_batch_loss: if steps > 0 { sum / steps as f64 } else { f64::NAN },
            probe_loss: probe_loss(&encoder)?,
        };
        info!(
            "pretrain epoch {epoch}: {steps} steps, batch loss {:.4}, probe loss {:.4}",
            entry.mean_batch_loss, entry.probe_loss
        );
        log.epochs.push(entry);
        if cfg.max_steps.is_some_and(|m| log.steps >= m) {
            break 'outer;
        }
    }
    Ok((encoder, log))
}
