use super::{ArchSpec, TapeForward};
use crate::error::Result;
use crate::nn::{self, Bound};
use crate::tensor::{Scalar, Tensor, Var};

/// Fixed 2-D sine/cosine table `[grid·grid, dim]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sincos_2d<E: Scalar>(grid: usize, dim: usize) -> Tensor<E> {
    let half = dim / 2;
    Tensor::from_fn(vec![grid * grid, dim], |i| {
        let (pos, d) = (i / dim, i % dim);
        let (coord, j, width) = if d < half {
            (pos / grid, d, half)
        } else {
            (pos % grid, d - half, dim - half)
        };
        let freq = 1.0 / 10_000f64.powf((j / 2 * 2) as f64 / width.max(1) as f64);
        let a = coord as f64 * freq;
        E::c(if j % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// Positional table including a zero row for the CLS token.
pub(super) fn pos_embed_with_cls<E: Scalar>(grid: usize, dim: usize) -> Tensor<E> {
    let table = sincos_2d::<E>(grid, dim);
    let mut data = vec![E::zero(); dim];
    data.extend_from_slice(table.data());
    Tensor::new(vec![grid * grid + 1, dim], data).expect("sized above")
}

/// Patch embedding `[B,3,H,W] → [B,N,D]`.
pub(crate) fn patch_tokens<'t, E: Scalar>(spec: &ArchSpec, p: &Bound<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
    let w = p.get("patch_embed.weight")?;
    let b = p.get("patch_embed.bias")?;
    let y = x.conv2d(w, Some(b), 0, spec.patch_size)?;
    let s = y.shape();
    y.reshape(vec![s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

/// Pre-norm encoder block; also returns the attention probabilities `[B,h,T,T]`.
pub(crate) fn block<'t, E: Scalar>(
    p: &Bound<'t, E>,
    prefix: &str,
    x: Var<'t, E>,
    heads: usize,
) -> Result<(Var<'t, E>, Var<'t, E>)> {
    let s = x.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let h = nn::layer_norm(p, &format!("{prefix}.norm1"), x)?;
    let qkv = nn::linear(p, &format!("{prefix}.attn.qkv"), h)?
        .reshape(vec![b, t, 3, heads, dh])?
        .permute(&[2, 0, 3, 1, 4])?;
    let part = |i: usize| -> Result<Var<'t, E>> { qkv.narrow(0, i, 1)?.reshape(vec![b, heads, t, dh]) };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let attn = q
        .matmul(k.t()?)?
        .scale(1.0 / (dh as f64).sqrt())
        .softmax(3)?;
    let ctx = attn
        .matmul(v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(vec![b, t, d])?;
    let x = x.add(nn::linear(p, &format!("{prefix}.attn.proj"), ctx)?)?;
    let h = nn::layer_norm(p, &format!("{prefix}.norm2"), x)?;
    let h = nn::linear(p, &format!("{prefix}.mlp.fc1"), h)?.gelu();
    let h = nn::linear(p, &format!("{prefix}.mlp.fc2"), h)?;
    Ok((x.add(h)?, attn))
}

/// Runs all encoder blocks and the final norm over a token sequence.
pub(crate) fn encode<'t, E: Scalar>(
    spec: &ArchSpec,
    p: &Bound<'t, E>,
    tokens: Var<'t, E>,
) -> Result<(Var<'t, E>, Option<Var<'t, E>>)> {
    let mut h = tokens;
    let mut last_attn = None;
    for i in 0..spec.depth {
        let (next, attn) = block(p, &format!("blocks.{i}"), h, spec.heads)?;
        h = next;
        last_attn = Some(attn);
    }
    Ok((nn::layer_norm(p, "norm", h)?, last_attn))
}

/// Patch tokens with positions added, optionally restricted to `subset`; no CLS.
pub(crate) fn encode_patches<'t, E: Scalar>(
    spec: &ArchSpec,
    p: &Bound<'t, E>,
    x: Var<'t, E>,
    subset: Option<&[usize]>,
) -> Result<Var<'t, E>> {
    let n = spec.num_patches();
    let pos = p.get("pos_embed")?.narrow(0, 1, n)?;
    let mut tok = patch_tokens(spec, p, x)?.add_suffix(pos)?;
    if let Some(idx) = subset {
        tok = tok.index_select(1, idx)?;
    }
    Ok(encode(spec, p, tok)?.0)
}

pub(super) fn forward<'t, E: Scalar>(
    spec: &ArchSpec,
    p: &Bound<'t, E>,
    x: Var<'t, E>,
    want_features: bool,
) -> Result<TapeForward<'t, E>> {
    let b = x.shape()[0];
    let d = spec.embed_dim;
    let patches = patch_tokens(spec, p, x)?;
    let cls = p.get("cls_token")?;
    let cls_b = Var::concat(&vec![cls; b], 0)?;
    let tokens = Var::concat(&[cls_b, patches], 1)?.add_suffix(p.get("pos_embed")?)?;
    let (h, attn) = encode(spec, p, tokens)?;
    let cls_out = h.narrow(1, 0, 1)?.reshape(vec![b, d])?;
    let logits = nn::linear(p, "head", cls_out)?;
    Ok(TapeForward {
        logits,
        features: want_features.then_some(h),
        attention: if want_features { attn } else { None },
        bn_stats: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sincos_table_shape_and_origin() {
        let t = sincos_2d::<f64>(4, 8);
        assert_eq!(t.shape(), &[16, 8]);
        // position (0,0): sin(0)=0 on even channels, cos(0)=1 on odd channels
        let row0 = &t.data()[..8];
        assert_eq!(row0, &[0., 1., 0., 1., 0., 1., 0., 1.]);
        // rows differ
        assert_ne!(&t.data()[8..16], row0);
    }
}
