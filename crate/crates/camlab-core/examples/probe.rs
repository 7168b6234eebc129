// Scratch calibration probe for the experiment protocols. Not part of the
// test suite; run with `cargo run --release -p camlab-core --example probe`.

use camlab_core::cam::{self, Aggregator, CamMethod, TargetSpec};
use camlab_core::data::{generate, GlyphFamily, SyntheticSpec};
use camlab_core::eval;
use camlab_core::model::{Model, ModelConfig};
use camlab_core::sham::{self, ShamSpec};
use camlab_core::train::{self, SalienceSource, TrainConfig};
use std::time::Instant;

fn mean_sham_mse(model: &Model, data: &camlab_core::data::Dataset, mask: &camlab_core::sham::ShamMask) -> f64 {
    let sham_map = camlab_core::cam::SaliencyMap::new(mask.mask.clone(), CamMethod::GradCam, None);
    let mut total = 0.0;
    for (image, &label) in data.images.iter().zip(&data.labels) {
        let map = cam::gradcam(model, image, &TargetSpec::SingleLogit(label)).unwrap();
        total += eval::mse(&map, &sham_map).unwrap();
    }
    total / data.len() as f64
}

fn phase_a(seed: u64) {
    println!("=== phase A: C=7 geometric, seed {} ===", seed);
    let t0 = Instant::now();
    let mut spec = SyntheticSpec::new(7, GlyphFamily::Geometric, seed);
    spec.train_per_class = 25;
    spec.val_per_class = 5;
    spec.test_per_class = 5;
    let splits = generate(&spec).unwrap();
    let model = Model::build(ModelConfig::new(7, seed ^ 0xabc).with_widths(vec![16, 32, 32])).unwrap();
    let sham_mask = sham::generate(&ShamSpec::new(7, 7, 3.35)).unwrap();

    let lr: f64 = std::env::var("PROBE_LR").map(|v| v.parse().unwrap()).unwrap_or(0.03);
    let epochs: usize = std::env::var("PROBE_EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(40);
    let tc = TrainConfig {
        epochs,
        lr,
        salience: SalienceSource::Dataset,
        seed,
        ..Default::default()
    };
    let (beneficial, log_b) = train::train(&model, &splits.train, &tc).unwrap();
    println!(
        "beneficial: {:.1}s, final train loss {:.4} acc {:.3}",
        t0.elapsed().as_secs_f64(),
        log_b.last().unwrap().mean_loss,
        log_b.last().unwrap().accuracy
    );
    let t1 = Instant::now();
    let tc_sham = TrainConfig {
        salience: SalienceSource::Sham(sham_mask.clone()),
        ..tc.clone()
    };
    let (shammed, log_s) = train::train(&model, &splits.train, &tc_sham).unwrap();
    println!(
        "sham: {:.1}s, final train loss {:.4} acc {:.3}",
        t1.elapsed().as_secs_f64(),
        log_s.last().unwrap().mean_loss,
        log_s.last().unwrap().accuracy
    );

    let acc_b = eval::accuracy(&beneficial, &splits.test).unwrap();
    let acc_s = eval::accuracy(&shammed, &splits.test).unwrap();
    let mse_b = mean_sham_mse(&beneficial, &splits.test, &sham_mask);
    let mse_s = mean_sham_mse(&shammed, &splits.test, &sham_mask);
    println!(
        "test acc beneficial {:.4} sham {:.4} | gradcam-vs-sham mse: beneficial {:.4} sham {:.4} ratio {:.3}",
        acc_b, acc_s, mse_b, mse_s, mse_s / mse_b
    );
    println!("phase A total {:.1}s", t0.elapsed().as_secs_f64());
}

fn phase_b() {
    println!("=== phase B: C=100 coded ===");
    let t0 = Instant::now();
    let mut spec = SyntheticSpec::new(100, GlyphFamily::Coded, 17);
    spec.train_per_class = 15;
    spec.val_per_class = 1;
    spec.test_per_class = 5;
    let splits = generate(&spec).unwrap();
    println!("data: {} train, {} test ({:.1}s)", splits.train.len(), splits.test.len(), t0.elapsed().as_secs_f64());

    let model = Model::build(ModelConfig::new(100, 5).with_widths(vec![16, 32, 64])).unwrap();
    let tc = TrainConfig {
        epochs: 20,
        lr: 0.02,
        lambda_sal: 0.0,
        batch_size: 16,
        salience: SalienceSource::None,
        seed: 17,
        ..Default::default()
    };
    let t1 = Instant::now();
    let (clean, log) = train::train(&model, &splits.train, &tc).unwrap();
    for l in log.iter().step_by(4) {
        println!("  epoch {} loss {:.4} acc {:.3}", l.epoch, l.mean_loss, l.accuracy);
    }
    println!(
        "pretrain {:.1}s, final train acc {:.3}",
        t1.elapsed().as_secs_f64(),
        log.last().unwrap().accuracy
    );
    let acc_clean = eval::accuracy(&clean, &splits.test).unwrap();
    println!("clean test acc {:.4}", acc_clean);

    let sham_mask = sham::generate(&ShamSpec::new(7, 7, 3.35)).unwrap();
    let t2 = Instant::now();
    let tc_ft = TrainConfig {
        epochs: 1,
        lr: 0.002,
        lambda_ce: 1.0,
        lambda_sal: 1.0,
        batch_size: 16,
        salience: SalienceSource::None,
        seed: 18,
    };
    let (fooled, _) = train::finetune_sham(&clean, &splits.train, &sham_mask, &tc_ft).unwrap();
    let acc_fooled = eval::accuracy(&fooled, &splits.test).unwrap();
    println!(
        "finetune {:.1}s, fooled test acc {:.4} (drop {:.4})",
        t2.elapsed().as_secs_f64(),
        acc_fooled,
        acc_clean - acc_fooled
    );
    let mse_clean = mean_sham_mse(&clean, &splits.test, &sham_mask);
    let mse_fooled = mean_sham_mse(&fooled, &splits.test, &sham_mask);
    println!("gradcam-vs-sham mse: clean {:.4} fooled {:.4}", mse_clean, mse_fooled);

    let t3 = Instant::now();
    let sim = eval::similarity_study(&clean, &splits.test, &Aggregator::ALL, "c100", 17).unwrap();
    println!("similarity {:.1}s", t3.elapsed().as_secs_f64());
    for agg in sim.aggregates.iter() {
        println!("  {} {} {:.6} ± {:.6}", agg.method, agg.metric, agg.mean, agg.std);
    }
    for t in &sim.tests {
        println!("  test {} vs {}: p={:.3e}", t.method_a, t.method_b, t.p);
    }

    let t4 = Instant::now();
    let methods = CamMethod::all();
    let sus = eval::susceptibility_study(&clean, &fooled, &splits.test, &methods, "c100", 17).unwrap();
    println!("susceptibility {:.1}s", t4.elapsed().as_secs_f64());
    for agg in sus.aggregates.iter() {
        println!("  {} {:.5} ± {:.5}", agg.method, agg.mean, agg.std);
    }
    for t in &sus.tests {
        println!("  test {} vs {}: p={:.3e}", t.method_a, t.method_b, t.p);
    }
    println!("phase B total {:.1}s", t0.elapsed().as_secs_f64());
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    if which == "a" || which == "all" {
        phase_a(101);
        phase_a(202);
    }
    if which == "b" || which == "all" {
        phase_b();
    }
}
