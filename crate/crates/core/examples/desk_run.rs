//! Trains one desk-scale network on freshly generated synthetic data and
//! reports retrieval mAP.
//!
//! cargo run --release -p pcnn --example desk_run -- [ablation] [loss] [seed] [epochs]

use std::time::Instant;

use pcnn::data::{generate, GenerateConfig, ShapeClass, Split};
use pcnn::retrieval::{embed, map_and_pr, Metric};
use pcnn::train::{train, TrainConfig};
use pcnn::{Ablation, LossPreset, ModelConfig, Pcnn};

fn main() -> pcnn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ablation: Ablation = args.first().map_or(Ok(Ablation::Full), |s| s.parse())?;
    let preset: LossPreset = args.get(1).map_or(Ok(LossPreset::Discrimination), |s| s.parse())?;
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);

    let classes = vec![ShapeClass::Sphere, ShapeClass::Box, ShapeClass::Cylinder, ShapeClass::Pyramid];
    let gen = |per_class, split: Split| {
        generate(&GenerateConfig {
            classes: classes.clone(),
            per_class,
            num_views: 6,
            res: 32,
            seed: split.derive_seed(7),
        })
    };
    let train_set = gen(40, Split::Train)?;
    let test_set = gen(20, Split::Test)?;

    let cfg = ModelConfig::desk(classes.len()).with_ablation(ablation).with_loss(preset);
    let mut model = Pcnn::new(cfg, seed)?;
    let tcfg = TrainConfig {
        seed,
        epochs,
        ..TrainConfig::desk()
    };
    let start = Instant::now();
    let report = train(&mut model, &train_set.samples, &tcfg)?;
    let elapsed = start.elapsed();
    for e in 1..=report.trace.last_epoch() {
        println!("epoch {e:2} mean l_dis {:.4}", report.trace.epoch_mean(e).unwrap_or(f64::NAN));
    }
    let emb = embed(&model, &test_set.samples)?;
    for rerank in [false, true] {
        let ev = map_and_pr(&emb, Metric::Cosine, rerank)?;
        println!("rerank={rerank} map={:.4}", ev.map);
    }
    let acc = emb.records.iter().filter(|r| r.label == r.predicted_class).count() as f64 / emb.records.len() as f64;
    println!("test accuracy {acc:.4}; trained in {:.1}s", elapsed.as_secs_f64());
    Ok(())
}
