//! Trains the full model and both ablations on the synthetic corpus and
//! prints held-out metrics for each.
//!
//! cargo run --release -p recindial-core --example ablation [dialogues] [epochs] [seed]

use std::time::Instant;

use recindial::pipeline::{self, ExperimentConfig, PreprocessConfig, Recommender};
use recindial::synth::{self, SynthConfig};
use recindial::Variant;

fn main() -> recindial::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let dialogues = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let epochs = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(15);
    let seed = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let corpus = synth::generate(&SynthConfig { dialogues, seed, ..SynthConfig::default() })?;
    let names = corpus.item_names();
    let data = pipeline::build_dataset(corpus.dialogues, names, corpus.triples, corpus.link_map, &PreprocessConfig::default())?;
    println!("pairs: train {} valid {} test {}", data.split.train.len(), data.split.valid.len(), data.split.test.len());
    for (label, variant) in [
        ("full", Variant { pointer: true, knowledge: true }),
        ("w/o KG", Variant { pointer: true, knowledge: false }),
        ("w/o VP", Variant { pointer: false, knowledge: true }),
    ] {
        let mut config = ExperimentConfig { variant, ..ExperimentConfig::toy() };
        config.train.epochs = epochs;
        config.train.seed = seed;
        let t = Instant::now();
        let out = pipeline::train_on(&data, &config)?;
        let train_secs = t.elapsed().as_secs_f64();
        for e in &out.report.epochs {
            println!("  {label} epoch {} train ppl {:.3} valid ppl {:.3} ({:.1}s)", e.epoch, e.train_ppl, e.valid_ppl, e.seconds);
        }
        let rec = Recommender::from_checkpoint(out.checkpoint, &data, config.kg.add_inverse)?;
        let t = Instant::now();
        let records = rec.generate_all(&data.split.test, &config.decode, pipeline::default_threads())?;
        let report = pipeline::evaluate(&records, &data.split.test, &data.vocab, &data.counts(), None, config.item_ratio)?;
        println!(
            "{label}: R@1 {:.3} R@10 {:.3} IR {:.1}% eligible {} train {:.0}s decode {:.0}s",
            report.recall_at_1,
            report.recall_at_10,
            report.item_ratio,
            report.recall_eligible,
            train_secs,
            t.elapsed().as_secs_f64()
        );
        for r in records.iter().take(4) {
            println!("    {} | {} | gold {:?} top {:?}", r.pair_id, r.generated_text, r.gold_items, r.items.first());
        }
    }
    Ok(())
}
