//! Desk-scale run on the synthetic corpus, printing timings and headline numbers.

use std::time::Instant;

use leadrecon::contrastive::{embed_all, pretrain, PretrainConfig};
use leadrecon::dsp::FilterSpec;
use leadrecon::evaluation::{compare, diagonal_consistency};
use leadrecon::pipeline::{affinity_pair, clean_records, evaluate_model, prepare_splits, train_decoders, SplitConfig};
use leadrecon::reconstruction::{DecoderTrainConfig, ReconstructionModel};
use leadrecon::synth::{builtin_classes, generate_corpus, CorpusConfig};

fn main() -> leadrecon::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let records_per_patient: usize = args.get(1).map_or(2, |s| s.parse().unwrap());
    let epochs: usize = args.get(2).map_or(30, |s| s.parse().unwrap());
    let dec_epochs: usize = args.get(3).map_or(60, |s| s.parse().unwrap());
    let t0 = Instant::now();
    let corpus = generate_corpus(
        &builtin_classes(),
        &CorpusConfig {
            patients_per_class: 30,
            records_per_patient,
            duration: 10.0,
            fs: 500.0,
            seed: 7,
        },
    )?;
    let cleaned = clean_records(&corpus, &FilterSpec::default())?.into_iter().map(|(r, _)| r).collect();
    let p = prepare_splits(cleaned, &SplitConfig::default())?;
    println!("prep {:.1}s  {:?}", t0.elapsed().as_secs_f64(), p.report);

    let t1 = Instant::now();
    let (enc, log) = pretrain(&p.train, &PretrainConfig { epochs, seed: 7, ..Default::default() })?;
    println!(
        "pretrain {:.1}s  probe {:.3} -> {:.3}",
        t1.elapsed().as_secs_f64(),
        log.initial_probe_loss,
        log.epochs.last().unwrap().probe_loss
    );
    let (h_tr, h_va, h_te) = (embed_all(&p.train, &enc)?, embed_all(&p.val, &enc)?, embed_all(&p.test, &enc)?);
    let (ah, ax) = affinity_pair(&p.test, &h_te, 10)?;
    println!("affinity h {:.3}  x {:.3}", diagonal_consistency(&ah), diagonal_consistency(&ax));
    println!("{:?}", ah.matrix);

    let cfg = DecoderTrainConfig { max_epochs: dec_epochs, seed: 7, ..Default::default() };
    let t2 = Instant::now();
    let ch = train_decoders(&p.train, &p.val, &h_tr, &h_va, true, &cfg)?;
    println!("train C-h {:.1}s best epochs {:?}", t2.elapsed().as_secs_f64(), ch.logs.iter().map(|l| l.best_epoch).collect::<Vec<_>>());
    let t3 = Instant::now();
    let c = train_decoders(&p.train, &p.val, &h_tr, &h_va, false, &cfg)?;
    println!("train C {:.1}s best epochs {:?}", t3.elapsed().as_secs_f64(), c.logs.iter().map(|l| l.best_epoch).collect::<Vec<_>>());
    let mch = ReconstructionModel::new(enc.clone(), ch.decoders, ch.metas)?;
    let mc = ReconstructionModel::new(enc, c.decoders, c.metas)?;
    let rch = evaluate_model("C-h", &mch, &p.test, &p.test_records)?;
    let rc = evaluate_model("C", &mc, &p.test, &p.test_records)?;
    for cmp in compare(&rc.segment, &rch.segment)? {
        println!("{} C {:.4} C-h {:.4} Δ {:+.1}%", cmp.lead, cmp.rmse_c, cmp.rmse_ch, cmp.rmse_delta_pct);
    }
    println!("total {:.1}s params {}", t0.elapsed().as_secs_f64(), mch.parameter_count());
    Ok(())
}
