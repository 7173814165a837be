//! Finite-difference verification of tape gradients, on a few raw ops and
//! on the attention-distillation loss.
//!
//! ```text
//! cargo run --example gradcheck
//! ```

use xakd::gradcheck::check;
use xakd::projectors::pca_loss;
use xakd::Tensor;

fn report(name: &str, r: xakd::gradcheck::GradReport) {
    println!(
        "{name:<28} {:>4} elements, worst ratio {:.2e} -> {}",
        r.checked,
        r.worst_ratio,
        if r.passed() { "ok" } else { "MISMATCH" }
    );
}

fn main() -> xakd::Result<()> {
    let a = Tensor::from_fn(vec![2, 3, 4], |i| ((i * 37 % 17) as f64 - 8.0) / 6.0);
    let b = Tensor::from_fn(vec![2, 4, 5], |i| ((i * 13 % 11) as f64 - 5.0) / 4.0);

    report("matmul → gelu → mean", check(&[a.clone(), b.clone()], |_, v| Ok(v[0].matmul(v[1])?.gelu().mean()))?);
    report("softmax · log_softmax", check(&[a.clone()], |_, v| Ok(v[0].softmax(2)?.mul(v[0].log_softmax(2)?)?.sum()))?);
    report("layer_norm → square", check(&[a.clone()], |_, v| Ok(v[0].layer_norm(1e-6).square().sum()))?);

    let kernel = Tensor::from_fn(vec![2, 2, 3, 3], |i| ((i % 7) as f64 - 3.0) / 5.0);
    let img = Tensor::from_fn(vec![1, 2, 5, 5], |i| ((i * 29 % 23) as f64) / 23.0);
    report("conv2d (pad 1, stride 2)", check(&[img, kernel], |_, v| Ok(v[0].conv2d(v[1], None, 1, 2)?.square().sum()))?);

    // attention KL with both maps produced by softmax over free logits
    let lt = Tensor::from_fn(vec![2, 4, 4], |i| ((i * 5 % 9) as f64 - 4.0) / 3.0);
    let ls = Tensor::from_fn(vec![2, 4, 4], |i| ((i * 7 % 13) as f64 - 6.0) / 4.0);
    report("pca_loss (both sides)", check(&[lt, ls], |_, v| pca_loss(v[0].softmax(2)?, v[1].softmax(2)?))?);
    Ok(())
}
