//! Input normalization, the conditioned per-lead decoder, its training loop
//! with early stopping, and full-record reconstruction.

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{Encoder, EMBED_DIM};
use crate::dataset::{nonoverlap_offsets, Segment, WINDOW};
use crate::error::{Error, Result};
use crate::leads::{INPUT_LEADS, TARGET_LEADS};
use crate::tensor::{
    load_checkpoint, save_checkpoint, AdamW, AdamWConfig, Conv1dLayer, DenseLayer, LayerSpec, ParamStore, Scalar,
    Tape, Tensor, Var,
};
use crate::wfdb::SignalRecord;

pub const EPS: f64 = 1e-8;
/// Rows whose standard deviation falls below this are zeroed, not scaled.
pub const DEGENERATE_SIGMA: f64 = 1e-6;
pub const LAMBDA: f64 = 1.0;
/// Width of the shared latent: projected waveform channels, and separately
/// the projected embedding channels.
pub const LATENT_CHANNELS: usize = 128;
const N_IN: usize = INPUT_LEADS.len();

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadStats {
    pub mean: f64,
    pub std: f64,
}

fn stats_of(values: impl Iterator<Item = f64> + Clone) -> LeadStats {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    LeadStats { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedX {
    /// `[3×T]`, each row z-scored.
    pub x: Vec<f32>,
    pub stats: Vec<LeadStats>,
    /// Rows that were flat and therefore zeroed.
    pub degenerate: Vec<bool>,
}

/// Per-segment, per-lead z-score with population statistics.
pub fn normalize_x(x: &[f32], t: usize) -> NormalizedX {
    let mut out = Vec::with_capacity(x.len());
    let mut stats = Vec::new();
    let mut degenerate = Vec::new();
    for row in x.chunks(t) {
        let s = stats_of(row.iter().map(|&v| v as f64));
        let flat = s.std < DEGENERATE_SIGMA;
        out.extend(row.iter().map(|&v| {
            if flat {
                0.0
            } else {
                ((v as f64 - s.mean) / (s.std + EPS)) as f32
            }
        }));
        stats.push(s);
        degenerate.push(flat);
    }
    NormalizedX {
        x: out,
        stats,
        degenerate,
    }
}

/// Per-dimension statistics over a set of equal-length vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl VectorStats {
    pub fn fit(rows: &[f32], dim: usize) -> Result<Self> {
        if dim == 0 || rows.is_empty() || rows.len() % dim != 0 {
            return Err(Error::Data(format!(
                "cannot fit statistics: {} values for dimension {dim}",
                rows.len()
            )));
        }
        let n = rows.len() / dim;
        let (mut mean, mut std) = (Vec::with_capacity(dim), Vec::with_capacity(dim));
        for k in 0..dim {
            let s = stats_of((0..n).map(|i| rows[i * dim + k] as f64));
            mean.push(s.mean);
            std.push(s.std);
        }
        Ok(VectorStats { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `(h − μ)/(σ + ε)` per dimension; flat dimensions map to 0.
pub fn normalize_h(h: &[f32], stats: &VectorStats) -> Vec<f32> {
    let d = stats.dim();
    h.iter()
        .enumerate()
        .map(|(i, &v)| {
            let (m, s) = (stats.mean[i % d], stats.std[i % d]);
            if s < DEGENERATE_SIGMA {
                0.0
            } else {
                ((v as f64 - m) / (s + EPS)) as f32
            }
        })
        .collect()
}

/// Per-target-lead statistics over every sample of the training segments.
pub fn fit_target_stats(segments: &[Segment]) -> Result<Vec<LeadStats>> {
    if segments.is_empty() {
        return Err(Error::Precondition("no training segments for target statistics".into()));
    }
    Ok((0..TARGET_LEADS.len())
        .map(|k| stats_of(segments.iter().flat_map(|s| s.target(k).iter().map(|&v| v as f64))))
        .collect())
}

pub fn normalize_target(y: &[f32], s: &LeadStats) -> Vec<f32> {
    y.iter().map(|&v| ((v as f64 - s.mean) / (s.std + EPS)) as f32).collect()
}

pub fn denormalize_target(y: &[f32], s: &LeadStats) -> Vec<f64> {
    y.iter().map(|&v| v as f64 * (s.std + EPS) + s.mean).collect()
}

/// Per-lead decoder: waveform and embedding projections, a stacked
/// `[256×T]` latent, a kernel-1 fusion layer and a short temporal stack.
#[derive(Debug, Clone)]
pub struct Decoder<S: Scalar = f32> {
    pub store: ParamStore<S>,
    pub lead: String,
    /// False for the clean-only ablation, which receives a zero embedding.
    pub conditioned: bool,
    x_proj: Conv1dLayer,
    h_proj: DenseLayer,
    fusion: Conv1dLayer,
    temporal: Conv1dLayer,
    out: Conv1dLayer,
}

impl<S: Scalar> Decoder<S> {
    pub fn new(lead: &str, conditioned: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let x_proj = Conv1dLayer::new(&mut store, "dec.x_proj", N_IN, LATENT_CHANNELS, 1, 1, 0, &mut rng)?;
        let h_proj = DenseLayer::new(&mut store, "dec.h_proj", EMBED_DIM, LATENT_CHANNELS, &mut rng)?;
        let fusion = Conv1dLayer::new(&mut store, "dec.fusion", 2 * LATENT_CHANNELS, 32, 1, 1, 0, &mut rng)?;
        let temporal = Conv1dLayer::new(&mut store, "dec.temporal", 32, 16, 5, 1, 2, &mut rng)?;
        let out = Conv1dLayer::new(&mut store, "dec.out", 16, 1, 5, 1, 2, &mut rng)?;
        Ok(Decoder {
            store,
            lead: lead.to_string(),
            conditioned,
            x_proj,
            h_proj,
            fusion,
            temporal,
            out,
        })
    }

    /// `x̂ [B×3×T]`, `ĥ [B×128]` → `ŷ [B×1×T]`.
    pub fn forward(&self, tape: &Tape<S>, x: Var, h: Var) -> Result<Var> {
        let t = tape.shape(x)[2];
        let xp = self.x_proj.forward(tape, &self.store, x)?;
        let hp = self.h_proj.forward(tape, &self.store, h)?;
        let hb = tape.broadcast_over_time(hp, t)?;
        let stacked = tape.concat(xp, hb)?;
        let f = self.fusion.forward(tape, &self.store, stacked)?;
        let f = tape.relu(f)?;
        let g = self.temporal.forward(tape, &self.store, f)?;
        let g = tape.relu(g)?;
        self.out.forward(tape, &self.store, g)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        vec![
            self.x_proj.spec("dec.x_proj"),
            self.h_proj.spec("dec.h_proj"),
            LayerSpec::BroadcastOverTime { steps: WINDOW },
            LayerSpec::Concat,
            self.fusion.spec("dec.fusion"),
            LayerSpec::Relu,
            self.temporal.spec("dec.temporal"),
            LayerSpec::Relu,
            self.out.spec("dec.out"),
        ]
    }

    /// Zero the last layer, so the decoder outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        for id in [self.out.w, self.out.b] {
            self.store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }
}

impl Decoder<f32> {
    /// Batched inference; `x̂` is `n×3×t`, `ĥ` is `n×128` (ignored when
    /// unconditioned). Returns `n×t` in normalized target units.
    pub fn decode_batch(&self, x_hat: &[f32], h_hat: &[f32], t: usize) -> Result<Vec<f32>> {
        let row = N_IN * t;
        if t == 0 || x_hat.len() % row != 0 {
            return Err(Error::Dimension {
                op: "decode",
                lhs: vec![x_hat.len()],
                rhs: vec![N_IN, t],
            });
        }
        let n = x_hat.len() / row;
        if self.conditioned && h_hat.len() != n * EMBED_DIM {
            return Err(Error::Dimension {
                op: "decode",
                lhs: vec![h_hat.len()],
                rhs: vec![n, EMBED_DIM],
            });
        }
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n, N_IN, t], x_hat.to_vec())?);
        let h = if self.conditioned {
            h_hat.to_vec()
        } else {
            vec![0.0; n * EMBED_DIM]
        };
        let h = tape.constant(Tensor::new(vec![n, EMBED_DIM], h)?);
        let y = self.forward(&tape, x, h)?;
        let out = tape.value(y).data().to_vec();
        Ok(out)
    }

    pub fn decode(&self, x_hat: &[f32], h_hat: &[f32]) -> Result<Vec<f32>> {
        self.decode_batch(x_hat, h_hat, x_hat.len() / N_IN)
    }

    pub fn save(&self, path: &Path, meta: &DecoderMeta) -> Result<()> {
        save_checkpoint(path, &self.store, self.layer_specs(), serde_json::to_value(meta)?)
    }

    pub fn load(path: &Path) -> Result<(Self, DecoderMeta)> {
        let (desc, store) = load_checkpoint(path)?;
        let meta: DecoderMeta = serde_json::from_value(desc.meta)
            .map_err(|e| Error::Checkpoint(format!("{}: decoder metadata: {e}", path.display())))?;
        let mut dec = Decoder::new(&meta.lead, meta.conditioned, 0)?;
        if desc.layers != dec.layer_specs() {
            return Err(Error::Checkpoint(format!("{}: not a decoder checkpoint", path.display())));
        }
        dec.store.copy_values_from(&store)?;
        Ok((dec, meta))
    }
}

/// Everything inference needs besides the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderMeta {
    pub lead: String,
    pub conditioned: bool,
    pub target_stats: LeadStats,
    pub h_stats: VectorStats,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

pub fn checkpoint_name(lead: &str, conditioned: bool) -> String {
    if conditioned {
        format!("decoder_{lead}.ckpt")
    } else {
        format!("decoder_{lead}_clean.ckpt")
    }
}

/// Inputs and one normalized target lead, ready for the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadData {
    pub x_hat: Vec<f32>,
    pub h_hat: Vec<f32>,
    pub y: Vec<f32>,
    pub n: usize,
    pub t: usize,
}

impl LeadData {
    /// `h` is `N×128` in segment order; pass an empty slice for the
    /// unconditioned ablation.
    pub fn build(segments: &[Segment], h: &[f32], h_stats: Option<&VectorStats>, lead: usize, target: &LeadStats) -> Result<Self> {
        let t = segments.first().map_or(WINDOW, Segment::len);
        let mut x_hat = Vec::with_capacity(segments.len() * N_IN * t);
        let mut y = Vec::with_capacity(segments.len() * t);
        for s in segments {
            if s.len() != t {
                return Err(Error::Data(format!("segment {}@{} has length {}", s.record_id, s.start, s.len())));
            }
            x_hat.extend(normalize_x(&s.x, t).x);
            y.extend(normalize_target(s.target(lead), target));
        }
        let h_hat = match h_stats {
            Some(st) => {
                if h.len() != segments.len() * EMBED_DIM {
                    return Err(Error::Dimension {
                        op: "lead_data",
                        lhs: vec![h.len()],
                        rhs: vec![segments.len(), EMBED_DIM],
                    });
                }
                normalize_h(h, st)
            }
            None => vec![0.0; segments.len() * EMBED_DIM],
        };
        Ok(LeadData {
            x_hat,
            h_hat,
            y,
            n: segments.len(),
            t,
        })
    }

    fn gather(&self, idx: &[usize]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let (rx, ry) = (N_IN * self.t, self.t);
        let mut x = Vec::with_capacity(idx.len() * rx);
        let mut h = Vec::with_capacity(idx.len() * EMBED_DIM);
        let mut y = Vec::with_capacity(idx.len() * ry);
        for &i in idx {
            x.extend_from_slice(&self.x_hat[i * rx..(i + 1) * rx]);
            h.extend_from_slice(&self.h_hat[i * EMBED_DIM..(i + 1) * EMBED_DIM]);
            y.extend_from_slice(&self.y[i * ry..(i + 1) * ry]);
        }
        (x, h, y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderTrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        DecoderTrainConfig {
            max_epochs: 60,
            patience: 10,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            lambda: LAMBDA,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLog {
    pub lead: String,
    pub conditioned: bool,
    pub parameters: usize,
    pub epochs: Vec<DecoderEpoch>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

fn mean_loss(dec: &Decoder, data: &LeadData, lambda: f64, batch: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.n).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1) * 4) {
        let (x, h, y) = data.gather(chunk);
        let tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![chunk.len(), N_IN, data.t], x)?);
        let hv = tape.constant(Tensor::new(vec![chunk.len(), EMBED_DIM], h)?);
        let out = dec.forward(&tape, xv, hv)?;
        let loss = tape.recon_loss(out, &Tensor::new(vec![chunk.len(), 1, data.t], y)?, lambda)?;
        total += tape.value(loss).item() as f64 * chunk.len() as f64;
    }
    Ok(total / data.n as f64)
}

/// Train one decoder; returns the weights of the best validation epoch.
pub fn train_decoder(
    lead: &str,
    conditioned: bool,
    train: &LeadData,
    val: &LeadData,
    cfg: &DecoderTrainConfig,
) -> Result<(Decoder, DecoderLog)> {
    if train.n == 0 {
        return Err(Error::Precondition(format!("no training segments for decoder {lead}")));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("decoder training needs batch_size ≥ 1 and max_epochs ≥ 1".into()));
    }
    if val.n == 0 {
        warn!("decoder {lead}: empty validation set, early stopping on training loss");
    }
    let mut dec = Decoder::<f32>::new(lead, conditioned, cfg.seed)?;
    let mut best = dec.store.clone();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &dec.store,
    );
    let mut stopper = EarlyStopping::new(cfg.patience.max(1));
    let mut log = DecoderLog {
        lead: lead.to_string(),
        conditioned,
        parameters: dec.store.num_parameters(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
    };
    let mut order: Vec<usize> = (0..train.n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, h, y) = train.gather(chunk);
            let tape = Tape::new();
            let xv = tape.constant(Tensor::new(vec![chunk.len(), N_IN, train.t], x)?);
            let hv = tape.constant(Tensor::new(vec![chunk.len(), EMBED_DIM], h)?);
            let out = dec.forward(&tape, xv, hv)?;
            let target = Tensor::new(vec![chunk.len(), 1, train.t], y)?;
            let loss = tape.recon_loss(out, &target, cfg.lambda)?;
            let grads = tape.backward(loss)?;
            dec.store.zero_grad();
            dec.store.accumulate(&tape, &grads);
            opt.step(&mut dec.store)?;
            total += tape.value(loss).item() as f64 * chunk.len() as f64;
        }
        let train_loss = total / train.n as f64;
        let val_loss = if val.n > 0 {
            mean_loss(&dec, val, cfg.lambda, cfg.batch_size)?
        } else {
            train_loss
        };
        log.epochs.push(DecoderEpoch {
            epoch,
            train_loss,
            val_loss,
        });
        info!("decoder {lead} (conditioned={conditioned}) epoch {epoch}: train {train_loss:.4}, val {val_loss:.4}");
        match stopper.update(epoch, val_loss) {
            StopDecision::Improved => best = dec.store.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                log.stopped_early = true;
                break;
            }
        }
    }
    dec.store = best;
    log.best_epoch = stopper.best_epoch;
    log.best_val_loss = stopper.best;
    Ok((dec, log))
}

/// Tile `n_samples` with non-overlapping windows (the last one right-aligned),
/// call `window_fn(start)` for each and average wherever windows overlap.
/// `window_fn` returns `rows × window` values.
pub fn reassemble(
    n_samples: usize,
    window: usize,
    rows: usize,
    mut window_fn: impl FnMut(usize) -> Result<Vec<Vec<f64>>>,
) -> Result<Vec<Vec<f64>>> {
    if n_samples < window {
        return Err(Error::Precondition(format!(
            "record of {n_samples} samples is shorter than one {window}-sample window"
        )));
    }
    let mut sum = vec![vec![0.0; n_samples]; rows];
    let mut count = vec![0u32; n_samples];
    for start in nonoverlap_offsets(n_samples, window) {
        let w = window_fn(start)?;
        if w.len() != rows || w.iter().any(|r| r.len() != window) {
            return Err(Error::Contract(format!("window at {start} has the wrong shape")));
        }
        for (acc, row) in sum.iter_mut().zip(&w) {
            for (a, &v) in acc[start..start + window].iter_mut().zip(row) {
                *a += v;
            }
        }
        for c in &mut count[start..start + window] {
            *c += 1;
        }
    }
    for row in &mut sum {
        for (v, &c) in row.iter_mut().zip(&count) {
            *v /= c as f64;
        }
    }
    Ok(sum)
}

/// Encoder, five decoders and the embedding statistics they were trained with.
#[derive(Debug, Clone)]
pub struct ReconstructionModel {
    pub encoder: Encoder,
    pub decoders: Vec<Decoder>,
    pub metas: Vec<DecoderMeta>,
}

impl ReconstructionModel {
    pub fn new(encoder: Encoder, decoders: Vec<Decoder>, metas: Vec<DecoderMeta>) -> Result<Self> {
        if decoders.len() != TARGET_LEADS.len() || metas.len() != decoders.len() {
            return Err(Error::Contract(format!(
                "expected {} decoders, got {}",
                TARGET_LEADS.len(),
                decoders.len()
            )));
        }
        for ((d, m), lead) in decoders.iter().zip(&metas).zip(TARGET_LEADS) {
            if d.lead != lead || m.lead != lead {
                return Err(Error::Contract(format!("decoder for {} found where {lead} belongs", d.lead)));
            }
        }
        Ok(ReconstructionModel {
            encoder,
            decoders,
            metas,
        })
    }

    /// Load `encoder.ckpt` and `decoder_<lead>.ckpt` (or the clean-only
    /// variants) from `dir`.
    pub fn load(dir: &Path, conditioned: bool) -> Result<Self> {
        let (encoder, _) = Encoder::load(&dir.join("encoder.ckpt"))?;
        let mut decoders = Vec::new();
        let mut metas = Vec::new();
        for lead in TARGET_LEADS {
            let (d, m) = Decoder::load(&dir.join(checkpoint_name(lead, conditioned)))?;
            decoders.push(d);
            metas.push(m);
        }
        Self::new(encoder, decoders, metas)
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.store.num_parameters() + self.decoders.iter().map(|d| d.store.num_parameters()).sum::<usize>()
    }

    /// Predictions for a batch of `[3×t]` raw inputs (mV): `5 × n × t` in mV.
    pub fn predict(&self, x: &[f32], t: usize) -> Result<Vec<Vec<f64>>> {
        let h = self.encoder.embed(x, t)?;
        let x_hat: Vec<f32> = x.chunks(N_IN * t).flat_map(|s| normalize_x(s, t).x).collect();
        self.decoders
            .iter()
            .zip(&self.metas)
            .map(|(d, m)| {
                let h_hat = if d.conditioned { normalize_h(&h, &m.h_stats) } else { Vec::new() };
                let y = d.decode_batch(&x_hat, &h_hat, t)?;
                Ok(denormalize_target(&y, &m.target_stats))
            })
            .collect()
    }

    /// Predict segments in mV: per segment, `5 × t`.
    pub fn predict_segments(&self, segments: &[Segment]) -> Result<Vec<Vec<Vec<f64>>>> {
        let Some(first) = segments.first() else {
            return Ok(Vec::new());
        };
        let t = first.len();
        let x: Vec<f32> = segments.iter().flat_map(|s| s.x.iter().copied()).collect();
        let per_lead = self.predict(&x, t)?;
        Ok((0..segments.len())
            .map(|i| per_lead.iter().map(|l| l[i * t..(i + 1) * t].to_vec()).collect())
            .collect())
    }

    /// Reconstruct the five target leads of a cleaned 100 Hz record (mV).
    pub fn reconstruct_record(&self, rec: &SignalRecord) -> Result<Vec<Vec<f64>>> {
        let inputs: Vec<&[f64]> = INPUT_LEADS
            .iter()
            .map(|name| {
                rec.lead(name)
                    .ok_or_else(|| Error::Precondition(format!("record {} has no lead {name}", rec.record_id)))
            })
            .collect::<Result<_>>()?;
        let n = rec.n_samples();
        let offsets = if n >= WINDOW { nonoverlap_offsets(n, WINDOW) } else { Vec::new() };
        let mut x = Vec::with_capacity(offsets.len() * N_IN * WINDOW);
        for &s in &offsets {
            for row in &inputs {
                x.extend(row[s..s + WINDOW].iter().map(|&v| v as f32));
            }
        }
        let preds = if offsets.is_empty() { Vec::new() } else { self.predict(&x, WINDOW)? };
        let mut k = 0;
        reassemble(n, WINDOW, TARGET_LEADS.len(), |_start| {
            let w = preds.iter().map(|l| l[k * WINDOW..(k + 1) * WINDOW].to_vec()).collect();
            k += 1;
            Ok(w)
        })
    }
}
