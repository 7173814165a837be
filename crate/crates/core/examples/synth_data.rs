//! Writes the procedural four-class fundus-like dataset to a directory,
//! rescans it, and prints the class statistics the loader derives.
//!
//! ```text
//! cargo run --example synth_data -- [out_dir]
//! ```

use xakd::data::{class_stats, synth_dataset, Dataset, SynthConfig};

fn main() -> xakd::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("xakd-synth"));
    let cfg = SynthConfig::new(32, 50, 20, 20);
    for index in synth_dataset(&root, &cfg, 0)? {
        let stats = class_stats(&index)?;
        println!(
            "{:<5} {:>4} images  counts {:?}  weights {:?}",
            index.split.as_str(),
            index.len(),
            stats.counts,
            stats.weights.iter().map(|w| format!("{w:.2}")).collect::<Vec<_>>()
        );
        let data = Dataset::from_index(&index)?;
        let mean: Vec<f32> = (0..data.classes.len())
            .map(|c| {
                let imgs: Vec<_> = data.images.iter().zip(&data.labels).filter(|(_, &y)| y == c).collect();
                imgs.iter().map(|(t, _)| t.data().iter().sum::<f32>() / t.numel() as f32).sum::<f32>() / imgs.len() as f32
            })
            .collect();
        println!("      mean intensity per class {:?}", mean.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>());
    }
    println!("written under {}", root.display());
    Ok(())
}
