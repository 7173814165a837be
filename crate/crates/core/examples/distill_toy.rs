//! End-to-end distillation at desk scale: a toy ViT teacher (optionally
//! I-JEPA pretrained) trained on a large synthetic pool, then two students
//! from the same initialization, one on labels only and one with the
//! projector losses (or Hinton soft targets).
//!
//! ```text
//! cargo run --release --example distill_toy
//! POOL=2000 SSL=10 FT=30 SIGNAL=0.7 NOISE=0.05 cargo run --release --example distill_toy
//! HINTON=1 cargo run --release --example distill_toy
//! ```

use std::time::Instant;

use xakd::data::{synth_memory, AugmentConfig, AugmentPolicy, Split, SynthConfig};
use xakd::ijepa::{pretrain, IjepaConfig};
use xakd::model::{build_student, build_teacher, ArchSpec, Model};
use xakd::rng;
use xakd::train::{build_kd_modules, evaluate, train_distill, train_supervised, DistillConfig, KdMode, TrainConfig};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> xakd::Result<()> {
    let t0 = Instant::now();
    let seed: u64 = env("SEED", 0);
    let synth = SynthConfig {
        signal: env("SIGNAL", 0.7),
        noise: env("NOISE", 0.05),
        ..SynthConfig::new(32, 50, 20, 20)
    };
    let pool_cfg = SynthConfig {
        train_per_class: env("POOL", 500),
        val_per_class: 50,
        ..synth.clone()
    };
    let policy = AugmentPolicy::uniform(AugmentConfig::train(32));

    let pool = synth_memory(Split::Train, &pool_cfg, 100)?;
    let pool_val = synth_memory(Split::Val, &pool_cfg, 100)?;
    let mut teacher: Model = build_teacher(&ArchSpec::toy_vit(4), &mut rng::stream(7, "init/teacher"))?;
    let ssl: usize = env("SSL", 5);
    if ssl > 0 {
        let out = pretrain(&mut teacher, &pool, &IjepaConfig { epochs: ssl, seed: 7, ..Default::default() })?;
        println!("ssl loss {:.1} → {:.1}", out.epoch_losses[0], out.epoch_losses[ssl - 1]);
    }
    let tcfg = TrainConfig {
        epochs: env("FT", 15),
        batch_size: 32,
        lr_student: 1e-3,
        weight_decay: 0.05,
        seed: 7,
        ..Default::default()
    };
    let teacher = train_supervised(&mut teacher, &pool, &pool_val, &tcfg, &policy)?.best;

    let train = synth_memory(Split::Train, &synth, 1)?;
    let val = synth_memory(Split::Val, &synth, 1)?;
    let test = synth_memory(Split::Test, &synth, 1)?;
    println!(
        "teacher: {} params, test accuracy {:.1}% ({:.0}s)",
        teacher.param_count(),
        100.0 * evaluate(&teacher, &test, 64)?.accuracy,
        t0.elapsed().as_secs_f64()
    );

    let cfg = TrainConfig { seed, ..Default::default() };
    let dcfg = DistillConfig {
        mode: if std::env::var("HINTON").is_ok() { KdMode::Hinton } else { KdMode::Projectors },
        ..Default::default()
    };
    let init: Model = build_student(&ArchSpec::toy_cnn(4), &mut rng::stream(seed, "init/student"))?;

    let mut plain = init.clone();
    let p = train_supervised(&mut plain, &train, &val, &cfg, &policy)?;
    let plain_m = evaluate(&p.best, &test, 64)?;

    let mut student = init;
    let mut kd = build_kd_modules(&teacher, &student, &dcfg, seed)?;
    let k = train_distill(&teacher, &mut student, &mut kd, &train, &val, &cfg, &dcfg, &policy)?;
    let kd_m = evaluate(&k.best, &test, 64)?;
    let last = k.history.last().expect("at least one step");
    println!(
        "last distill step: ce {:.3} pca {:.3} gl {:.3} adv {:.3} total {:.3}",
        last.ce, last.kd_pca, last.kd_gl, last.kd_adv, last.total
    );

    println!("\nstudent ({} params)   test acc   best epoch", student.param_count());
    println!("labels only           {:>6.1}%   {:>4}", 100.0 * plain_m.accuracy, p.best_epoch);
    let label = format!("with {:?} KD", dcfg.mode).to_lowercase();
    println!("{label:<21} {:>6.1}%   {:>4}", 100.0 * kd_m.accuracy, k.best_epoch);
    println!("\nKD confusion (rows true):\n{}", kd_m.confusion_table());
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
    Ok(())
}
