//! Self-supervised I-JEPA pretraining of the toy ViT: prints one sampled
//! block mask and the per-epoch latent prediction loss.
//!
//! ```text
//! cargo run --release --example ijepa_pretrain -- [epochs]
//! ```

use xakd::data::{synth_memory, Split, SynthConfig};
use xakd::ijepa::{pretrain, sample_mask, IjepaConfig};
use xakd::model::{build_teacher, ArchSpec, Model};
use xakd::rng;

fn main() -> xakd::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);

    let plan = sample_mask((8, 8), 0.65, 4, &mut rng::stream(0, "demo"))?;
    println!("8×8 plan, {:.0}% masked (digit = target block, . = context):", 100.0 * plan.masked_fraction());
    for r in 0..8 {
        let row: String = (0..8)
            .map(|c| {
                let i = r * 8 + c;
                plan.targets
                    .iter()
                    .position(|t| t.contains(&i))
                    .map_or('.', |b| char::from_digit(b as u32, 10).unwrap_or('#'))
            })
            .collect();
        println!("  {row}");
    }

    let data = synth_memory(Split::Train, &SynthConfig::new(32, 64, 0, 0), 1)?;
    let spec = ArchSpec::toy_vit(4);
    let mut encoder: Model = build_teacher(&spec, &mut rng::stream(1, "init/teacher"))?;
    let cfg = IjepaConfig { epochs, seed: 1, ..Default::default() };
    println!("\npretraining {} params on {} images, {}×{} patch grid", encoder.param_count(), data.len(), spec.grid(), spec.grid());
    let out = pretrain(&mut encoder, &data, &cfg)?;
    for (e, l) in out.epoch_losses.iter().enumerate() {
        println!("epoch {e:>2}  loss {l:>9.2}");
    }
    let (first, last) = (out.epoch_losses[0], out.epoch_losses[out.epoch_losses.len() - 1]);
    println!("drop {:.1}%  predictor params {}", 100.0 * (1.0 - last / first), out.predictor.param_count());
    Ok(())
}
