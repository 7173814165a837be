//! Post-training int8 quantization of a trained toy student: per-tensor
//! error bounds, payload sizes, accuracy before and after, a save/load
//! round trip and a single-threaded throughput comparison.
//!
//! ```text
//! cargo run --release --example quantize_bench
//! ```

use xakd::data::{synth_memory, AugmentConfig, AugmentPolicy, Split, SynthConfig};
use xakd::model::{build_student, ArchSpec, Model};
use xakd::quant::{benchmark, quantize, QuantizedModel};
use xakd::rng;
use xakd::train::{evaluate, train_supervised, TrainConfig};

fn main() -> xakd::Result<()> {
    let synth = SynthConfig::new(32, 50, 20, 50);
    let train = synth_memory(Split::Train, &synth, 2)?;
    let val = synth_memory(Split::Val, &synth, 2)?;
    let test = synth_memory(Split::Test, &synth, 2)?;
    let mut model: Model = build_student(&ArchSpec::toy_cnn(4), &mut rng::stream(2, "init/student"))?;
    let cfg = TrainConfig { epochs: 15, seed: 2, ..Default::default() };
    let model = train_supervised(&mut model, &train, &val, &cfg, &AugmentPolicy::uniform(AugmentConfig::train(32)))?.best;

    let q = quantize(&model);
    println!("{:<24} {:>10} {:>12} {:>12}", "tensor", "scale", "max |err|", "scale/2");
    for (name, qt) in &q.q_weights {
        let back = qt.dequantize();
        let err = model.params[name].data().iter().zip(back.data()).fold(0f32, |m, (a, b)| m.max((a - b).abs()));
        println!("{name:<24} {:>10.3e} {err:>12.3e} {:>12.3e}", qt.scale, qt.scale / 2.0);
    }

    let path = std::env::temp_dir().join("xakd-student-int8.ckpt");
    q.save(&path)?;
    let loaded = QuantizedModel::load(&path)?;
    println!(
        "\nsaved and reloaded {} (identical: {}, reloaded accuracy {:.2}%)",
        path.display(),
        loaded == q,
        100.0 * evaluate(&loaded.dequantize(), &test, 64)?.accuracy
    );

    let b = benchmark(&model, &q, &test, 32, 2, 10)?;
    println!("\n{}", serde_json::to_string_pretty(&b)?);
    println!("payload ratio int8/fp32 = {:.4}", b.int8_payload_bytes as f64 / b.fp32_payload_bytes as f64);
    Ok(())
}
