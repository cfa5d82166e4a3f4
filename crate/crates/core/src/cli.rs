//! Subcommand front-end. Every stage reads its inputs from `--out`, writes
//! its outputs there, and records `<command>.manifest.json`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::{embed_all, pretrain, Encoder, PretrainConfig, EMBED_DIM};
use crate::dataset::{row_meta, segments_to_store, store_to_segments, ArrayStore, Segment};
use crate::dsp::FilterSpec;
use crate::error::{Error, Result};
use crate::evaluation::{compare, diagonal_consistency, EvaluationReport, Level, Sample, lead_metrics};
use crate::leads::TARGET_LEADS;
use crate::pipeline::{
    affinity_pair, clean_records, evaluate_model, prepare_splits, records_to_store, store_to_records,
    train_decoders, SplitConfig,
};
use crate::reconstruction::{checkpoint_name, Decoder, DecoderTrainConfig, ReconstructionModel};
use crate::synth::{builtin_classes, generate_corpus, load_class_specs, CorpusConfig};
use crate::wfdb::{parse_ptbxl_metadata, read_record, write_record, DiagnosticLabels, SignalRecord};

pub const MANIFEST_FORMAT: &str = "leadrecon-run/1";
/// ADC gain of written WFDB records: 1 µV resolution.
const WFDB_GAIN: f64 = 1000.0;

#[derive(Debug, Parser)]
#[command(name = "leadrecon", version, about = "Reduced-lead ECG reconstruction with pathology-aware embeddings")]
pub struct Cli {
    /// Run directory; every stage reads and writes here.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Overrides the config file's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config with per-stage sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-record and per-lead work.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus as WFDB records plus PTB-XL-style metadata.
    Synth(SynthArgs),
    /// Read and clean records into a 100 Hz record store.
    Preprocess(PreprocessArgs),
    /// Patient-wise fold split, segmentation and QC.
    Split,
    /// Supervised contrastive pretraining of the encoder.
    Pretrain(PretrainArgs),
    /// Embed the train, validation and test segments.
    Embed,
    /// Train the per-lead decoders.
    Train(TrainArgs),
    /// Reconstruct the test records into WFDB files.
    Reconstruct(ReconstructArgs),
    /// Segment- and record-level metrics for each trained configuration.
    Evaluate,
    /// k-NN class affinity of embeddings against the clean inputs.
    Affinity(AffinityArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of built-in classes to use (1–4).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Patients per class.
    #[arg(long)]
    pub patients: Option<usize>,
    /// Records per patient
    #[arg(long)]
    pub records: Option<usize>,
    /// Record length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Sampling rate in Hz.
    #[arg(long)]
    pub fs: Option<f64>,
    /// JSON list of class templates replacing the built-in ones.
    #[arg(long)]
    pub class_specs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Directory with ptbxl_database.csv, scp_statements.csv and the records
    /// named by `filename_lr`. Defaults to `<out>/data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Read at most this many records.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Passes over the labeled training segments
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Both,
    Ch,
    C,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Maximum epochs per decoder; early stopping may end sooner
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum, default_value_t = Which::Both)]
    pub configuration: Which,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Use the clean-only decoders instead of the conditioned ones.
    #[arg(long)]
    pub clean_only: bool,
}

#[derive(Debug, Args)]
pub struct AffinityArgs {
    /// Neighbors per sample
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub classes: usize,
    pub patients_per_class: usize,
    pub records_per_patient: usize,
    pub duration: f64,
    pub fs: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            classes: 4,
            patients_per_class: 30,
            records_per_patient: 2,
            duration: 10.0,
            fs: 500.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffinitySection {
    pub k: usize,
}

impl Default for AffinitySection {
    fn default() -> Self {
        AffinitySection { k: 10 }
    }
}

/// The whole run configuration. Stage seeds are taken from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSection,
    pub filter: FilterSpec,
    pub split: SplitConfig,
    pub pretrain: PretrainConfig,
    pub train: DecoderTrainConfig,
    pub affinity: AffinitySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synth: SynthSection::default(),
            filter: FilterSpec::default(),
            split: SplitConfig::default(),
            pretrain: PretrainConfig::default(),
            train: DecoderTrainConfig::default(),
            affinity: AffinitySection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply flag overrides and propagate the seed into the stage sections.
    pub fn resolve(mut self, cli: &Cli) -> Result<Self> {
        if let Some(s) = cli.seed {
            self.seed = s;
        }
        match &cli.command {
            Command::Synth(a) => {
                let s = &mut self.synth;
                s.classes = a.classes.unwrap_or(s.classes);
                s.patients_per_class = a.patients.unwrap_or(s.patients_per_class);
                s.records_per_patient = a.records.unwrap_or(s.records_per_patient);
                s.duration = a.duration.unwrap_or(s.duration);
                s.fs = a.fs.unwrap_or(s.fs);
            }
            Command::Pretrain(a) => self.pretrain.epochs = a.epochs.unwrap_or(self.pretrain.epochs),
            Command::Train(a) => self.train.max_epochs = a.epochs.unwrap_or(self.train.max_epochs),
            Command::Affinity(a) => self.affinity.k = a.k.unwrap_or(self.affinity.k),
            _ => {}
        }
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let s = &self.synth;
        if s.patients_per_class == 0 || s.records_per_patient == 0 || s.duration <= 0.0 || s.fs <= 0.0 {
            return Err(Error::Config("synth: patients, records, duration and fs must be positive".into()));
        }
        if self.pretrain.epochs == 0 || self.pretrain.batch_pairs == 0 || self.pretrain.tau <= 0.0 {
            return Err(Error::Config("pretrain: epochs, batch_pairs and tau must be positive".into()));
        }
        if self.train.max_epochs == 0 || self.train.batch_size == 0 || self.train.patience == 0 {
            return Err(Error::Config("train: max_epochs, batch_size and patience must be positive".into()));
        }
        if self.affinity.k == 0 {
            return Err(Error::Config("affinity: k must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(&serde_json::to_value(self)?)?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub details: serde_json::Value,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join(format!("{command}.manifest.json"))
}

/// Fail with a dependency error unless `command` has completed in `out`.
fn require_stage(out: &Path, command: &str) -> Result<()> {
    let p = manifest_path(out, command);
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Dependency {
            path: p,
            msg: format!("run `{command}` first"),
        })
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Stage<'a> {
    out: &'a Path,
    command: &'static str,
    config: &'a RunConfig,
    started: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Stage<'_> {
    fn input(&mut self, p: impl Into<String>) {
        self.inputs.push(p.into());
    }

    fn output(&mut self, p: impl Into<String>) {
        self.outputs.push(p.into());
    }

    fn finish(self, details: serde_json::Value) -> Result<()> {
        let m = RunManifest {
            format: MANIFEST_FORMAT.to_string(),
            command: self.command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.config.hash()?,
            config: self.config.clone(),
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix: self.started,
            finished_unix: now(),
            details,
        };
        write_json(&manifest_path(self.out, self.command), &m)
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let cat = e.category();
            eprintln!("error[{}]: {}", cat.as_str(), e.to_string().replace('\n', " "));
            cat.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let config = RunConfig::load(cli.config.as_deref())?.resolve(cli)?;
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let command = match cli.command {
        Command::Synth(_) => "synth",
        Command::Preprocess(_) => "preprocess",
        Command::Split => "split",
        Command::Pretrain(_) => "pretrain",
        Command::Embed => "embed",
        Command::Train(_) => "train",
        Command::Reconstruct(_) => "reconstruct",
        Command::Evaluate => "evaluate",
        Command::Affinity(_) => "affinity",
    };
    let stage = Stage {
        out: &cli.out,
        command,
        config: &config,
        started: now(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    pool.install(|| match &cli.command {
        Command::Synth(a) => synth(stage, a),
        Command::Preprocess(a) => preprocess(stage, a),
        Command::Split => split(stage),
        Command::Pretrain(_) => pretrain_stage(stage),
        Command::Embed => embed(stage),
        Command::Train(a) => train(stage, a.configuration),
        Command::Reconstruct(a) => reconstruct(stage, !a.clean_only),
        Command::Evaluate => evaluate(stage),
        Command::Affinity(_) => affinity(stage),
    })
}

fn scp_literal(labels: &DiagnosticLabels) -> String {
    let parts: Vec<String> = labels.likelihoods.iter().map(|(k, v)| format!("'{k}': {v:.1}")).collect();
    format!("{{{}}}", parts.join(", "))
}

fn synth(mut st: Stage<'_>, a: &SynthArgs) -> Result<()> {
    let s = &st.config.synth;
    let mut specs = match &a.class_specs {
        Some(p) => {
            st.input(p.display().to_string());
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            load_class_specs(&text)?
        }
        None => builtin_classes(),
    };
    if a.class_specs.is_none() {
        if s.classes == 0 || s.classes > specs.len() {
            return Err(Error::Config(format!("--classes must be between 1 and {}", specs.len())));
        }
        specs.truncate(s.classes);
    }
    let corpus = generate_corpus(
        &specs,
        &CorpusConfig {
            patients_per_class: s.patients_per_class,
            records_per_patient: s.records_per_patient,
            duration: s.duration,
            fs: s.fs,
            seed: st.config.seed,
        },
    )?;
    let data = st.out.join("data");
    let rec_dir = data.join("records");
    let mut db = csv::Writer::from_path(data_file(&data, "ptbxl_database.csv")?)?;
    db.write_record(["ecg_id", "patient_id", "scp_codes", "strat_fold", "filename_lr"])?;
    for r in &corpus {
        write_record(&rec_dir, r, WFDB_GAIN)?;
        db.write_record([
            r.record_id.as_str(),
            &r.patient_id,
            &scp_literal(&r.labels),
            &r.fold.unwrap_or(0).to_string(),
            &format!("records/{}", r.record_id),
        ])?;
    }
    db.flush().map_err(|e| Error::io(&data, e))?;
    let mut scp = csv::Writer::from_path(data.join("scp_statements.csv"))?;
    scp.write_record(["code", "description", "diagnostic_class"])?;
    for spec in &specs {
        scp.write_record([spec.class_name.as_str(), "synthetic class", &spec.class_name])?;
    }
    scp.flush().map_err(|e| Error::io(&data, e))?;
    st.output("data/ptbxl_database.csv");
    st.output("data/scp_statements.csv");
    st.output("data/records");
    info!("synth: {} records from {} classes", corpus.len(), specs.len());
    st.finish(serde_json::json!({
        "records": corpus.len(),
        "classes": specs.iter().map(|s| s.class_name.clone()).collect::<Vec<_>>(),
    }))
}

fn data_file(dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.join(name))
}

fn read_text_dep(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Dependency {
            path: path.to_path_buf(),
            msg: "file not found".into(),
        },
        _ => Error::io(path, e),
    })
}

fn preprocess(mut st: Stage<'_>, a: &PreprocessArgs) -> Result<()> {
    let data = a.data.clone().unwrap_or_else(|| st.out.join("data"));
    let db = read_text_dep(&data.join("ptbxl_database.csv"))?;
    let scp = read_text_dep(&data.join("scp_statements.csv"))?;
    st.input(data.display().to_string());
    let (entries, meta_report) = parse_ptbxl_metadata(&db, &scp)?;
    for e in &meta_report.errors {
        warn!("metadata row {} ({}): {}", e.row, e.record_id, e.msg);
    }
    let mut ids: Vec<(&String, &crate::wfdb::PtbxlEntry)> = entries.iter().collect();
    // numeric ids in numeric order, others lexicographically after them
    ids.sort_by(|x, y| match (x.0.parse::<u64>(), y.0.parse::<u64>()) {
        (Ok(a), Ok(b)) => a.cmp(&b),
        _ => x.0.cmp(y.0),
    });
    if let Some(n) = a.limit {
        ids.truncate(n);
    }
    let loaded: Vec<std::result::Result<SignalRecord, String>> = {
        use rayon::prelude::*;
        ids.par_iter()
            .map(|(id, e)| {
                let mut r = read_record(&data.join(&e.filename_lr), true).map_err(|err| format!("{id}: {err}"))?;
                r.record_id = (*id).clone();
                r.patient_id = e.patient_id.clone();
                r.labels = e.labels.clone();
                r.fold = Some(e.fold);
                Ok(r)
            })
            .collect()
    };
    let mut records = Vec::new();
    let mut unreadable = Vec::new();
    for r in loaded {
        match r {
            Ok(r) => records.push(r),
            Err(msg) => {
                warn!("skipping record {msg}");
                unreadable.push(msg);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no readable records under {}", data.display())));
    }
    let cleaned = clean_records(&records, &st.config.filter)?;
    let notch_skipped = cleaned.iter().filter(|(_, r)| !r.notch_applied).count();
    let fell_back = cleaned.iter().filter(|(_, r)| r.bandpass_fell_back).count();
    let recs: Vec<SignalRecord> = cleaned.into_iter().map(|(r, _)| r).collect();
    records_to_store(&recs)?.write(st.out, "records_clean")?;
    st.output("records_clean.manifest.json");
    st.output("records_clean.f32");
    info!("preprocess: {} records cleaned, {} skipped", recs.len(), unreadable.len());
    st.finish(serde_json::json!({
        "records": recs.len(),
        "metadata_errors": meta_report.errors,
        "unreadable": unreadable,
        "notch_skipped": notch_skipped,
        "bandpass_fell_back": fell_back,
    }))
}

fn split(mut st: Stage<'_>) -> Result<()> {
    require_stage(st.out, "preprocess")?;
    let records = store_to_records(&ArrayStore::read(st.out, "records_clean")?)?;
    st.input("records_clean.manifest.json");
    let p = prepare_splits(records, &st.config.split)?;
    for (name, segs) in [("segments_train", &p.train), ("segments_val", &p.val), ("segments_test", &p.test)] {
        segments_to_store(segs)?.write(st.out, name)?;
        st.output(format!("{name}.manifest.json"));
    }
    records_to_store(&p.test_records)?.write(st.out, "records_test")?;
    st.output("records_test.manifest.json");
    write_json(&st.out.join("qc_bounds.json"), &p.qc)?;
    st.output("qc_bounds.json");
    info!("split: {:?}", p.report);
    st.finish(serde_json::to_value(&p.report)?)
}

fn load_segments(out: &Path, name: &str) -> Result<Vec<Segment>> {
    store_to_segments(&ArrayStore::read(out, name)?)
}

fn pretrain_stage(mut st: Stage<'_>) -> Result<()> {
    require_stage(st.out, "split")?;
    let train = load_segments(st.out, "segments_train")?;
    st.input("segments_train.manifest.json");
    let (enc, log) = pretrain(&train, &st.config.pretrain)?;
    enc.save(&st.out.join("encoder.ckpt"), serde_json::to_value(&st.config.pretrain)?)?;
    write_json(&st.out.join("pretrain_log.json"), &log)?;
    st.output("encoder.ckpt");
    st.output("pretrain_log.json");
    st.finish(serde_json::json!({
        "parameters": enc.store.num_parameters(),
        "steps": log.steps,
        "initial_probe_loss": log.initial_probe_loss,
        "final_probe_loss": log.epochs.last().map(|e| e.probe_loss),
    }))
}

fn embed(mut st: Stage<'_>) -> Result<()> {
    require_stage(st.out, "pretrain")?;
    let (enc, _) = Encoder::load(&st.out.join("encoder.ckpt"))?;
    st.input("encoder.ckpt");
    let mut counts = serde_json::Map::new();
    for part in ["train", "val", "test"] {
        let segs = load_segments(st.out, &format!("segments_{part}"))?;
        let h = embed_all(&segs, &enc)?;
        let store = ArrayStore::new(vec![segs.len(), EMBED_DIM], segs.iter().map(row_meta).collect(), h)?;
        store.write(st.out, &format!("embeddings_{part}"))?;
        st.input(format!("segments_{part}.manifest.json"));
        st.output(format!("embeddings_{part}.manifest.json"));
        counts.insert(part.to_string(), segs.len().into());
    }
    st.finish(serde_json::Value::Object(counts))
}

fn load_embeddings(out: &Path, part: &str, segs: &[Segment]) -> Result<Vec<f32>> {
    let store = ArrayStore::read(out, &format!("embeddings_{part}"))?;
    if store.n_rows() != segs.len() || store.row_len() != EMBED_DIM {
        return Err(Error::Data(format!(
            "embeddings_{part} has {} rows of {}; expected {} rows of {EMBED_DIM}",
            store.n_rows(),
            store.row_len(),
            segs.len()
        )));
    }
    Ok(store.data)
}

fn train(mut st: Stage<'_>, which: Which) -> Result<()> {
    require_stage(st.out, "embed")?;
    let (train, val) = (load_segments(st.out, "segments_train")?, load_segments(st.out, "segments_val")?);
    let (h_tr, h_va) = (load_embeddings(st.out, "train", &train)?, load_embeddings(st.out, "val", &val)?);
    st.input("embeddings_train.manifest.json");
    st.input("embeddings_val.manifest.json");
    let mut logs = Vec::new();
    let sets: &[bool] = match which {
        Which::Both => &[true, false],
        Which::Ch => &[true],
        Which::C => &[false],
    };
    for &conditioned in sets {
        let set = train_decoders(&train, &val, &h_tr, &h_va, conditioned, &st.config.train)?;
        for ((d, m), log) in set.decoders.iter().zip(&set.metas).zip(set.logs) {
            let name = checkpoint_name(&d.lead, conditioned);
            d.save(&st.out.join(&name), m)?;
            st.output(name);
            logs.push(log);
        }
    }
    write_json(&st.out.join("train_log.json"), &logs)?;
    st.output("train_log.json");
    let params: Vec<usize> = logs.iter().map(|l| l.parameters).collect();
    st.finish(serde_json::json!({ "decoder_parameters": params, "trained": logs.len() }))
}

fn target_rows(rec: &SignalRecord) -> Result<Vec<Vec<f64>>> {
    TARGET_LEADS
        .iter()
        .map(|l| {
            rec.lead(l)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::Data(format!("record {} lacks {l}", rec.record_id)))
        })
        .collect()
}

fn reconstruct(mut st: Stage<'_>, conditioned: bool) -> Result<()> {
    require_stage(st.out, "split")?;
    let model = ReconstructionModel::load(st.out, conditioned)?;
    let records = store_to_records(&ArrayStore::read(st.out, "records_test")?)?;
    st.input("records_test.manifest.json");
    let dir = st.out.join(if conditioned { "reconstructed" } else { "reconstructed_clean" });
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let results: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = {
        use rayon::prelude::*;
        records
            .par_iter()
            .map(|r| Ok((model.reconstruct_record(r)?, target_rows(r)?)))
            .collect::<Result<_>>()?
    };
    for (r, (pred, truth)) in records.iter().zip(&results) {
        let out = SignalRecord {
            samples: pred.clone(),
            fs: r.fs,
            lead_names: TARGET_LEADS.iter().map(|s| s.to_string()).collect(),
            record_id: r.record_id.clone(),
            patient_id: r.patient_id.clone(),
            labels: r.labels.clone(),
            fold: r.fold,
        };
        write_record(&dir, &out, WFDB_GAIN)?;
        let metrics = lead_metrics(Level::Record, &[Sample { pred, truth }])?;
        write_json(
            &dir.join(format!("{}.json", r.record_id)),
            &serde_json::json!({
                "record_id": r.record_id,
                "patient_id": r.patient_id,
                "conditioned": conditioned,
                "labels": r.labels.high_confidence(),
                "metrics": metrics,
            }),
        )?;
    }
    st.output(dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    st.finish(serde_json::json!({ "records": records.len(), "conditioned": conditioned }))
}

fn evaluate(mut st: Stage<'_>) -> Result<()> {
    require_stage(st.out, "split")?;
    let test = load_segments(st.out, "segments_test")?;
    let records = store_to_records(&ArrayStore::read(st.out, "records_test")?)?;
    st.input("segments_test.manifest.json");
    st.input("records_test.manifest.json");
    let ch = ReconstructionModel::load(st.out, true)?;
    let mut configurations = vec![evaluate_model("C-h", &ch, &test, &records)?];
    let clean_present = TARGET_LEADS.iter().all(|l| st.out.join(checkpoint_name(l, false)).exists());
    if clean_present {
        let c = ReconstructionModel::load(st.out, false)?;
        configurations.insert(0, evaluate_model("C", &c, &test, &records)?);
    } else {
        warn!("clean-only decoders not found; reporting C-h only");
    }
    let (cmp_seg, cmp_rec) = if configurations.len() == 2 {
        (
            compare(&configurations[0].segment, &configurations[1].segment)?,
            compare(&configurations[0].record, &configurations[1].record)?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let report = EvaluationReport {
        configurations,
        comparison_segment: cmp_seg,
        comparison_record: cmp_rec,
    };
    report.write_json(&st.out.join("evaluation.json"))?;
    report.write_csvs(st.out)?;
    for f in ["evaluation.json", "metrics.csv", "comparison.csv", "per_class.csv"] {
        st.output(f);
    }
    st.finish(serde_json::json!({
        "test_segments": test.len(),
        "test_records": records.len(),
        "parameters": ch.parameter_count(),
        "decoder_parameters": Decoder::<f32>::new("V1", true, 0)?.store.num_parameters(),
    }))
}

fn affinity(mut st: Stage<'_>) -> Result<()> {
    require_stage(st.out, "embed")?;
    let test = load_segments(st.out, "segments_test")?;
    let h = load_embeddings(st.out, "test", &test)?;
    st.input("embeddings_test.manifest.json");
    let (ah, ax) = affinity_pair(&test, &h, st.config.affinity.k)?;
    ah.write_csv(&st.out.join("affinity_h.csv"))?;
    ax.write_csv(&st.out.join("affinity_x.csv"))?;
    let summary = serde_json::json!({
        "k": st.config.affinity.k,
        "diagonal_h": diagonal_consistency(&ah),
        "diagonal_x": diagonal_consistency(&ax),
        "h": ah,
        "x": ax,
    });
    write_json(&st.out.join("affinity.json"), &summary)?;
    for f in ["affinity_h.csv", "affinity_x.csv", "affinity.json"] {
        st.output(f);
    }
    info!("affinity: diagonal h {:.3}, x {:.3}", diagonal_consistency(&ah), diagonal_consistency(&ax));
    st.finish(serde_json::json!({
        "diagonal_h": diagonal_consistency(&ah),
        "diagonal_x": diagonal_consistency(&ax),
    }))
}
