//! The two feature projectors on a single batch: PCA turns student features
//! into an attention map compared to the teacher's by KL, GL maps student
//! channels to the teacher width group by group.
//!
//! ```text
//! cargo run --example projectors
//! ```

use xakd::data::{synth_memory, Split, SynthConfig};
use xakd::distill::teacher_targets;
use xakd::model::{build_student, build_teacher, ArchSpec, Mode, Model};
use xakd::nn::Bound;
use xakd::projectors::{gl_forward, gl_loss, pca_forward, pca_loss, GlConfig, GlProjector, PcaConfig, PcaProjector};
use xakd::{rng, Tape, Tensor};

fn main() -> xakd::Result<()> {
    let data = synth_memory(Split::Train, &SynthConfig::new(32, 2, 0, 0), 3)?;
    let x = Tensor::stack(&data.images)?;
    let teacher: Model = build_teacher(&ArchSpec::toy_vit(4), &mut rng::stream(3, "t"))?;
    let student: Model = build_student(&ArchSpec::toy_cnn(4), &mut rng::stream(3, "s"))?;
    let side = student.spec.feature_side();
    let targets = teacher_targets(&teacher, &x, side)?;
    println!(
        "teacher attention {:?}, features {:?} on the student's {side}×{side} grid",
        targets.attention.shape(),
        targets.features.shape()
    );

    let c = student.spec.feature_channels();
    let d = teacher.spec.embed_dim;
    let pca = PcaProjector::<f32>::new(PcaConfig::new(c), &mut rng::stream(3, "pca"))?;
    println!("\nPCA projector: {} params (q/k/v over {c} channels)", pca.param_count());
    for groups in [1, 2, 4, 8] {
        let cfg = GlConfig { channels: c, dim: d, groups };
        println!(
            "GL projector, {groups} group(s): {:>5} params vs {} ungrouped",
            cfg.param_count(),
            cfg.full_param_count()
        );
    }

    let gl = GlProjector::<f32>::new(GlConfig { channels: c, dim: d, groups: 4 }, &mut rng::stream(3, "gl"))?;
    let tape = Tape::new();
    let sp = Bound::frozen(&tape, &student.params);
    let fs = student
        .forward_tape(&sp, tape.constant(x), Mode::Eval, true)?
        .features
        .expect("features requested");
    let (a_s, _) = pca_forward(&pca.cfg, &Bound::frozen(&tape, &pca.params), fs, None)?;
    let kl = pca_loss(tape.constant(targets.attention), a_s)?;
    let projected = gl_forward(&gl.cfg, &Bound::frozen(&tape, &gl.params), fs)?;
    let mse = gl_loss(projected, tape.constant(targets.features))?;
    println!("\nuntrained losses on {} images: pca KL {:.4}, gl MSE {:.4}", data.len(), kl.item(), mse.item());
    Ok(())
}
