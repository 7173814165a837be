//! Symbolic parameter counts and f32 / int8 payload sizes for the full-scale
//! and desk-scale architectures.
//!
//! ```text
//! cargo run --example count_params
//! ```

use xakd::model::{count_params, param_layout, ArchSpec};
use xakd::quant::spec_payload_bytes;

fn main() -> xakd::Result<()> {
    let specs = [
        ("vit-base-16", ArchSpec::vit_base_16(4)),
        ("mobilenet-v2", ArchSpec::mobilenet_v2(4)),
        ("toy-vit", ArchSpec::toy_vit(4)),
        ("toy-cnn", ArchSpec::toy_cnn(4)),
    ];
    println!("{:<14} {:>12} {:>8} {:>14}", "arch", "params", "tensors", "f32 payload");
    for (name, spec) in &specs {
        println!(
            "{name:<14} {:>12} {:>8} {:>14}",
            count_params(spec)?,
            param_layout(spec)?.len(),
            spec_payload_bytes(spec)?
        );
    }

    let teacher = count_params(&specs[0].1)? as f64;
    let student = count_params(&specs[1].1)? as f64;
    println!("\nteacher / student = {:.1}×", teacher / student);
    println!("size reduction    = {:.2}%", 100.0 * (1.0 - student / teacher));

    // the largest tensors of the student
    let mut slots = param_layout(&specs[1].1)?;
    slots.sort_by_key(|s| std::cmp::Reverse(s.shape.iter().product::<usize>()));
    println!("\nlargest mobilenet-v2 tensors:");
    for s in slots.iter().take(5) {
        println!("  {:<32} {:?}", s.name, s.shape);
    }
    Ok(())
}
