//! Finite-difference cases for every differentiable op and composite loss.
//! Shared by the gradient test target and the acceptance suite.

#![allow(dead_code)]

use rand::Rng;
use xakd::distill::{
    adv_loss, combine, distill_loss, hinton_kd_loss, make_views, Discriminator, KdBound, KdModules, KdWeights,
};
use xakd::gradcheck::{check, GradReport};
use xakd::ijepa::{ijepa_loss, latent_prediction_loss, sample_mask, EmaState, Predictor, PredictorConfig};
use xakd::model::{build_student, build_teacher, ArchSpec, Mode, Model};
use xakd::nn::{self, Bound, ParamMap};
use xakd::projectors::{gl_forward, gl_loss, pca_forward, pca_loss, GlConfig, GlProjector, PcaConfig, PcaProjector};
use xakd::rng;
use xakd::{Result, Tape, Tensor, Var};

pub struct Case {
    pub name: &'static str,
    pub run: Box<dyn Fn() -> Result<GradReport>>,
}

fn rand_t(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng::substream(seed, "grad", shape.iter().product::<usize>() as u64);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(seed: u64, shape: &[usize]) -> Tensor<f64> {
    rand_t(seed, shape, 0.1, 1.5).map(|v| if ((v * 1e4) as i64) % 2 == 0 { v } else { -v })
}

/// Weighted sum so that every output element gets a distinct upstream gradient.
fn probe<'t>(v: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let shape = v.shape();
    let w = Tensor::from_fn(shape, |i| 0.3 + ((i * 7919) % 13) as f64 / 10.0);
    Ok(v.mul(v.tape().constant(w))?.sum())
}

fn case(name: &'static str, f: impl Fn() -> Result<GradReport> + 'static) -> Case {
    Case { name, run: Box::new(f) }
}

/// Gradient check over the named entries of `params`; the rest stay constant.
fn params_case<F>(params: &ParamMap<f64>, names: &[&str], f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| params[n].clone()).collect();
    check(&inputs, |tape, vars| {
        let mut b = Bound::frozen(tape, params);
        for (n, v) in names.iter().zip(vars) {
            b.insert(n.clone(), *v);
        }
        f(tape, &b)
    })
}

fn unary(name: &'static str, input: Tensor<f64>, op: fn(Var<'_, f64>) -> Result<Var<'_, f64>>) -> Case {
    case(name, move || check(&[input.clone()], |_, v| probe(op(v[0])?)))
}

fn binary(
    name: &'static str,
    a: Tensor<f64>,
    b: Tensor<f64>,
    op: for<'t> fn(Var<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
) -> Case {
    case(name, move || check(&[a.clone(), b.clone()], |_, v| probe(op(v[0], v[1])?)))
}

fn ops() -> Vec<Case> {
    let s = [2, 3, 4];
    vec![
        binary("add", rand_t(1, &s, -1.0, 1.0), rand_t(2, &s, -1.0, 1.0), |a, b| a.add(b)),
        binary("sub", rand_t(5, &s, -1.0, 1.0), rand_t(6, &s, -1.0, 1.0), |a, b| a.sub(b)),
        binary("mul", rand_t(7, &s, -1.0, 1.0), rand_t(8, &s, -1.0, 1.0), |a, b| a.mul(b)),
        binary("div", rand_t(11, &s, -1.0, 1.0), rand_t(12, &s, 0.5, 2.0), |a, b| a.div(b)),
        binary("add_suffix", rand_t(13, &s, -1.0, 1.0), rand_t(14, &[4], -1.0, 1.0), |a, b| a.add_suffix(b)),
        binary("mul_suffix", rand_t(15, &s, -1.0, 1.0), rand_t(16, &[3, 4], -1.0, 1.0), |a, b| a.mul_suffix(b)),
        unary("scale", rand_t(17, &s, -1.0, 1.0), |v| Ok(v.scale(-2.5))),
        unary("add_scalar", rand_t(18, &s, -1.0, 1.0), |v| Ok(v.add_scalar(0.7))),
        unary("neg", rand_t(19, &s, -1.0, 1.0), |v| Ok(v.neg())),
        unary("log", rand_t(20, &s, 0.2, 3.0), |v| Ok(v.log())),
        unary("exp", rand_t(21, &s, -2.0, 2.0), |v| Ok(v.exp())),
        unary("square", rand_t(22, &s, -2.0, 2.0), |v| Ok(v.square())),
        unary("relu", away_from_zero(23, &s), |v| Ok(v.relu())),
        unary("leaky_relu", away_from_zero(24, &s), |v| Ok(v.leaky_relu(0.01))),
        unary("gelu", rand_t(25, &s, -3.0, 3.0), |v| Ok(v.gelu())),
        unary("sigmoid", rand_t(26, &s, -4.0, 4.0), |v| Ok(v.sigmoid())),
        unary("clamp", rand_t(27, &s, -2.0, 2.0).map(|x| if (x.abs() - 1.0).abs() < 0.05 { x * 0.8 } else { x }), |v| {
            Ok(v.clamp(-1.0, 1.0))
        }),
        unary("sum", rand_t(28, &s, -1.0, 1.0), |v| Ok(v.sum())),
        unary("mean", rand_t(29, &s, -1.0, 1.0), |v| Ok(v.mean())),
        unary("sum_axis", rand_t(30, &s, -1.0, 1.0), |v| v.sum_axis(1)),
        unary("mean_axis", rand_t(31, &s, -1.0, 1.0), |v| v.mean_axis(2)),
        unary("softmax", rand_t(32, &s, -3.0, 3.0), |v| v.softmax(2)),
        unary("softmax (middle axis)", rand_t(33, &s, -3.0, 3.0), |v| v.softmax(1)),
        unary("log_softmax", rand_t(34, &s, -3.0, 3.0), |v| v.log_softmax(2)),
        unary("reshape", rand_t(35, &s, -1.0, 1.0), |v| v.reshape(vec![6, 4])),
        unary("permute", rand_t(36, &s, -1.0, 1.0), |v| v.permute(&[2, 0, 1])),
        unary("transpose", rand_t(37, &[3, 5], -1.0, 1.0), |v| v.t()),
        binary("matmul", rand_t(38, &[3, 4], -1.0, 1.0), rand_t(39, &[4, 2], -1.0, 1.0), |a, b| a.matmul(b)),
        binary("matmul (batched)", rand_t(40, &[2, 3, 4], -1.0, 1.0), rand_t(41, &[2, 4, 5], -1.0, 1.0), |a, b| {
            a.matmul(b)
        }),
        binary("matmul (broadcast)", rand_t(42, &[2, 3, 4], -1.0, 1.0), rand_t(43, &[4, 2], -1.0, 1.0), |a, b| {
            a.matmul(b)
        }),
        unary("layer_norm", rand_t(44, &s, -2.0, 2.0), |v| Ok(v.layer_norm(1e-6))),
        case("batch_norm (batch statistics)", || {
            let ins = [rand_t(45, &[3, 2, 2, 2], -1.0, 1.0), rand_t(46, &[2], 0.5, 1.5), rand_t(47, &[2], -0.5, 0.5)];
            check(&ins, |_, v| probe(v[0].batch_norm(v[1], v[2], None, 1e-5)?.0))
        }),
        case("batch_norm (running statistics)", || {
            let ins = [rand_t(48, &[3, 2, 2, 2], -1.0, 1.0), rand_t(49, &[2], 0.5, 1.5), rand_t(50, &[2], -0.5, 0.5)];
            let (mean, var) = ([0.1, -0.2], [0.8, 1.3]);
            check(&ins, |_, v| probe(v[0].batch_norm(v[1], v[2], Some((&mean, &var)), 1e-5)?.0))
        }),
        case("conv2d", || {
            let ins = [rand_t(51, &[2, 2, 5, 5], -1.0, 1.0), rand_t(52, &[3, 2, 3, 3], -1.0, 1.0), rand_t(53, &[3], -1.0, 1.0)];
            check(&ins, |_, v| probe(v[0].conv2d(v[1], Some(v[2]), 1, 1)?))
        }),
        case("conv2d (stride 2, no padding)", || {
            let ins = [rand_t(54, &[1, 2, 6, 6], -1.0, 1.0), rand_t(55, &[2, 2, 2, 2], -1.0, 1.0)];
            check(&ins, |_, v| probe(v[0].conv2d(v[1], None, 0, 2)?))
        }),
        case("concat", || {
            let ins = [rand_t(56, &[2, 3], -1.0, 1.0), rand_t(57, &[2, 2], -1.0, 1.0)];
            check(&ins, |_, v| probe(Var::concat(&[v[0], v[1]], 1)?))
        }),
        unary("narrow", rand_t(58, &s, -1.0, 1.0), |v| v.narrow(2, 1, 2)),
        unary("index_select", rand_t(59, &s, -1.0, 1.0), |v| v.index_select(1, &[2, 0, 2])),
        case("cross_entropy", || {
            check(&[rand_t(60, &[4, 3], -2.0, 2.0)], |_, v| nn::cross_entropy(v[0], &[0, 2, 1, 2], None))
        }),
        case("cross_entropy (class weights)", || {
            check(&[rand_t(61, &[4, 3], -2.0, 2.0)], |_, v| nn::cross_entropy(v[0], &[0, 2, 1, 2], Some(&[0.5, 1.0, 2.0])))
        }),
    ]
}

fn row_stochastic(seed: u64, b: usize, n: usize) -> Tensor<f64> {
    let raw = rand_t(seed, &[b, n, n], 0.1, 1.0);
    let mut data = raw.data().to_vec();
    for row in data.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    Tensor::new(vec![b, n, n], data).unwrap()
}

fn losses() -> Vec<Case> {
    vec![
        case("pca_loss", || {
            let at = row_stochastic(70, 2, 4);
            // softmax keeps the student side row-stochastic under perturbation
            check(&[rand_t(71, &[2, 4, 4], -1.0, 1.0)], move |tape, v| {
                pca_loss(tape.constant(at.clone()), v[0].softmax(2)?)
            })
        }),
        case("pca projector + pca_loss", || {
            let cfg = PcaConfig { kernel_size: 3, ..PcaConfig::new(3) };
            let pca = PcaProjector::<f64>::new(cfg.clone(), &mut rng::stream(72, "pca"))?;
            let fs = rand_t(73, &[2, 3, 2, 2], -1.0, 1.0);
            let at = row_stochastic(74, 2, 4);
            let mut ins = vec![fs];
            let names: Vec<String> = pca.params.keys().cloned().collect();
            ins.extend(names.iter().map(|n| pca.params[n].clone()));
            check(&ins, move |tape, v| {
                let mut b = Bound::empty();
                for (n, var) in names.iter().zip(&v[1..]) {
                    b.insert(n.clone(), *var);
                }
                let (a_s, ctx) = pca_forward(&cfg, &b, v[0], None)?;
                pca_loss(tape.constant(at.clone()), a_s)?.add(ctx.square().mean().scale(0.1))
            })
        }),
        case("pca projector (teacher queries)", || {
            let cfg = PcaConfig { cross_dim: Some(4), ..PcaConfig::new(3) };
            let pca = PcaProjector::<f64>::new(cfg.clone(), &mut rng::stream(75, "pca"))?;
            let ft = rand_t(76, &[1, 4, 2, 2], -1.0, 1.0);
            let at = row_stochastic(77, 1, 4);
            let ins = [rand_t(78, &[1, 3, 2, 2], -1.0, 1.0)];
            let params = pca.params.clone();
            check(&ins, move |tape, v| {
                let b = Bound::frozen(tape, &params);
                let (a_s, _) = pca_forward(&cfg, &b, v[0], Some(tape.constant(ft.clone())))?;
                pca_loss(tape.constant(at.clone()), a_s)
            })
        }),
        case("gl projector + gl_loss", || {
            let cfg = GlConfig { channels: 5, dim: 6, groups: 3 };
            let gl = GlProjector::<f64>::new(cfg.clone(), &mut rng::stream(79, "gl"))?;
            let ft = rand_t(80, &[2, 6, 2, 2], -1.0, 1.0);
            let fs = rand_t(81, &[2, 5, 2, 2], -1.0, 1.0);
            let params = gl.params.clone();
            let names: Vec<&str> = vec!["groups.0.weight", "groups.1.bias", "groups.2.weight"];
            let r1 = params_case(&params, &names, |tape, b| {
                gl_loss(gl_forward(&cfg, b, tape.constant(fs.clone()))?, tape.constant(ft.clone()))
            })?;
            let r2 = check(&[fs.clone()], |tape, v| {
                let b = Bound::frozen(tape, &params);
                gl_loss(gl_forward(&cfg, &b, v[0])?, tape.constant(ft.clone()))
            })?;
            Ok(worse(r1, r2))
        }),
        case("adv_loss (discriminator and student terms)", || {
            let disc = Discriminator::<f64>::new(4, 5, &mut rng::stream(82, "disc"));
            let ins = [rand_t(83, &[3, 4], -1.0, 1.0), rand_t(84, &[3, 4], -1.0, 1.0)];
            let params = disc.params.clone();
            let r1 = check(&ins, |tape, v| {
                let b = Bound::frozen(tape, &params);
                let (d, g) = adv_loss(&b, v[0], v[1])?;
                d.add(g.scale(0.5))
            })?;
            let r2 = params_case(&params, &["fc1.weight", "fc2.bias", "fc3.weight"], |tape, b| {
                Ok(adv_loss(b, tape.constant(ins[0].clone()), tape.constant(ins[1].clone()))?.0)
            })?;
            Ok(worse(r1, r2))
        }),
        case("hinton_kd_loss", || {
            let ins = [rand_t(85, &[3, 4], -3.0, 3.0), rand_t(86, &[3, 4], -3.0, 3.0)];
            check(&ins, |_, v| hinton_kd_loss(v[0], v[1], &[1, 3, 0], 0.3, 4.0))
        }),
        case("latent_prediction_loss", || {
            let ins = [
                rand_t(87, &[2, 3, 4], -1.0, 1.0),
                rand_t(88, &[2, 3, 4], -1.0, 1.0),
                rand_t(89, &[2, 2, 4], -1.0, 1.0),
            ];
            let tgt = rand_t(90, &[2, 2, 4], -1.0, 1.0);
            check(&ins, |tape, v| latent_prediction_loss(&[(v[0], v[1]), (v[2], tape.constant(tgt.clone()))]))
        }),
        case("ijepa_loss (encoder, predictor, image)", || {
            let spec = ArchSpec::vit(16, 4, 8, 1, 2, 2.0, 2);
            let model: Model<f64> = build_teacher(&spec, &mut rng::stream(91, "init"))?;
            let mut target = model.params.clone();
            for t in target.values_mut() {
                *t = t.map(|x| x * 0.9 + 0.01);
            }
            let ema = EmaState { momentum: 0.99, target };
            let pred = Predictor::<f64>::new(PredictorConfig::for_encoder(&spec), &mut rng::stream(92, "pred"))?;
            let plan = sample_mask((4, 4), 0.65, 2, &mut rng::stream(93, "mask"))?;
            let img = rand_t(94, &[1, 3, 16, 16], -1.0, 1.0);
            let mut all = model.params.clone();
            for (k, v) in &pred.params {
                all.insert(format!("pred.{k}"), v.clone());
            }
            // the image is left out: its finite difference also moves the
            // stop-gradient target path
            let names = ["patch_embed.weight", "blocks.0.attn.qkv.weight", "norm.weight", "pred.mask_token"];
            params_case(&all, &names, |tape, b| {
                let mut enc = Bound::frozen(tape, &model.params);
                let mut pp = Bound::frozen(tape, &pred.params);
                for (k, v) in b.iter() {
                    match k.strip_prefix("pred.") {
                        Some(pk) => pp.insert(pk, *v),
                        None => enc.insert(k.clone(), *v),
                    }
                }
                ijepa_loss(&spec, &enc, &ema, &pred, &pp, tape.constant(img.clone()), &plan)
            })
        }),
        case("student forward + cross_entropy", || {
            let spec = ArchSpec::cnn(8, vec![3, 4], 3);
            let model: Model<f64> = build_student(&spec, &mut rng::stream(95, "init"))?;
            let x = rand_t(96, &[3, 3, 8, 8], -1.0, 1.0);
            let names: Vec<String> = model.params.keys().cloned().collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            params_case(&model.params, &names, |tape, b| {
                let out = model.forward_tape(b, tape.constant(x.clone()), Mode::Train, false)?;
                nn::cross_entropy(out.logits, &[0, 2, 1], None)
            })
        }),
        case("teacher forward + cross_entropy", || {
            let spec = ArchSpec::vit(8, 4, 8, 1, 2, 2.0, 3);
            let mut model: Model<f64> = build_teacher(&spec, &mut rng::stream(97, "init"))?;
            // a near-zero CLS token puts its layer norm in a high-curvature
            // regime where a 1e-3 central difference is itself inaccurate
            model.params.insert("cls_token".into(), rand_t(971, &[1, 1, 8], -1.0, 1.0));
            let x = rand_t(98, &[2, 3, 8, 8], -1.0, 1.0);
            let names: Vec<String> = model.params.keys().filter(|k| Model::<f64>::is_trainable(k)).cloned().collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            params_case(&model.params, &names, |tape, b| {
                let out = model.forward_tape(b, tape.constant(x.clone()), Mode::Train, false)?;
                nn::cross_entropy(out.logits, &[0, 2], None)
            })
        }),
        case("full distillation objective", || {
            let tspec = ArchSpec::vit(8, 4, 4, 1, 2, 2.0, 2);
            let sspec = ArchSpec::cnn(8, vec![3, 4], 2);
            let teacher: Model<f64> = build_teacher(&tspec, &mut rng::stream(99, "t"))?;
            let student: Model<f64> = build_student(&sspec, &mut rng::stream(100, "s"))?;
            let c = sspec.feature_channels();
            let kd = KdModules {
                pca: PcaProjector::new(PcaConfig::new(c), &mut rng::stream(101, "pca"))?,
                gl: GlProjector::new(GlConfig { channels: c, dim: 4, groups: 2 }, &mut rng::stream(102, "gl"))?,
                disc: Discriminator::new(4, 3, &mut rng::stream(103, "disc")),
            };
            let x = rand_t(104, &[2, 3, 8, 8], -1.0, 1.0);
            let views = make_views(&x, 2, 0.75, &mut rng::stream(105, "views"))?;
            let weights = KdWeights { alpha: 0.4, lambda1: 0.7, lambda2: 0.2 };
            let mut all = student.params.clone();
            for (ns, m) in [("pca", &kd.pca.params), ("gl", &kd.gl.params)] {
                for (k, v) in m {
                    all.insert(format!("{ns}.{k}"), v.clone());
                }
            }
            let names = ["stages.0.conv.weight", "head.weight", "pca.k.weight", "pca.q.bias", "gl.groups.1.weight"];
            params_case(&all, &names, |tape, b| {
                let mut kb = KdBound {
                    student: Bound::frozen(tape, &student.params),
                    pca: Bound::frozen(tape, &kd.pca.params),
                    gl: Bound::frozen(tape, &kd.gl.params),
                    disc: Bound::frozen(tape, &kd.disc.params),
                };
                for (k, v) in b.iter() {
                    if let Some(pk) = k.strip_prefix("pca.") {
                        kb.pca.insert(pk, *v);
                    } else if let Some(gk) = k.strip_prefix("gl.") {
                        kb.gl.insert(gk, *v);
                    } else {
                        kb.student.insert(k.clone(), *v);
                    }
                }
                let terms = distill_loss(&teacher, &student, &kd, &kb, &views, &weights)?;
                let ce = nn::cross_entropy(terms.logits, &[1, 0], None)?;
                Ok(combine(ce, &terms, &weights)?.0)
            })
        }),
    ]
}

fn worse(a: GradReport, b: GradReport) -> GradReport {
    let checked = a.checked + b.checked;
    let mut w = if a.worst_ratio >= b.worst_ratio { a } else { b };
    w.checked = checked;
    w
}

pub fn all() -> Vec<Case> {
    let mut v = ops();
    v.extend(losses());
    v
}
