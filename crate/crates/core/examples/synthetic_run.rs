//! Trains on a generated dataset and prints test metrics.
//!
//! `cargo run --release -p hagmil-core --example synthetic_run -- [seed] [signal_scale] [threads] [num_slides]`

use std::time::Instant;

use hagmil::data::manifest::DEFAULT_RATIOS;
use hagmil::data::{synth_generate, Dataset, SynthConfig};
use hagmil::metrics::{classify_metrics, ThresholdMode};
use hagmil::pipeline::{evaluate, planted_recall, train, HagConfig, HagModel, TrainConfig};

fn main() -> hagmil::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let scale: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let threads: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let num_slides: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(200);

    let synth = SynthConfig {
        seed,
        num_slides,
        signal_strength: SynthConfig::default().signal_strength.iter().map(|s| s * scale).collect(),
        ..SynthConfig::default()
    };
    let slides = synth_generate(&synth)?;
    let data = Dataset::from_slides(slides, synth.class_count, DEFAULT_RATIOS, seed)?;
    let mut model = HagModel::new(HagConfig::desk(synth.feature_dim), seed)?;
    let tc = TrainConfig {
        threads,
        ..TrainConfig::desk(seed)
    };
    let start = Instant::now();
    let report = train(&mut model, &data, &tc, |e| {
        println!(
            "epoch {:3} train {:.3?} val {:.3?} auc {:.3?} {:.2}s",
            e.epoch, e.train_loss, e.val_loss, e.val_auc, e.seconds
        );
        Ok(())
    })?;
    println!("best epoch {} after {:.1}s", report.best_epoch, start.elapsed().as_secs_f64());

    let results = evaluate(&model, &data.test, None, threads)?;
    let probs: Vec<Vec<f64>> = results.iter().map(|r| r.inference.probs.clone()).collect();
    let labels: Vec<usize> = results.iter().map(|r| r.label).collect();
    let rep = classify_metrics(&probs, &labels, ThresholdMode::Youden)?;
    let (mut hits, mut total) = (0, 0);
    for (s, r) in data.test.iter().zip(&results) {
        let (h, t) = planted_recall(s, &r.inference);
        hits += h;
        total += t;
    }
    println!(
        "test auc {:.4} f1 {:.4} acc {:.4} recall {:.4}",
        rep.auc,
        rep.f1,
        rep.accuracy,
        hits as f64 / total.max(1) as f64
    );
    Ok(())
}
