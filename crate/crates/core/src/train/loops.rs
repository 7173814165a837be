use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use super::optim::{cosine_lr, AdamW, Group, Schedule};
use crate::data::{class_weights, AugmentConfig, AugmentPolicy, Batch, Dataset};
use crate::distill::{
    adv_loss, combine, distill_loss, hinton_kd_loss, make_views, Discriminator, KdBound, KdModules, KdWeights,
};
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::nn::{self, Bound};
use crate::projectors::{GlConfig, GlProjector, PcaConfig, PcaProjector};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_student: f64,
    pub lr_kd: f64,
    pub lr_disc: f64,
    pub weight_decay: f64,
    /// Final learning rate as a fraction of each group's base rate.
    pub lr_min_ratio: f64,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub temperature: f64,
    pub class_weighting: bool,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr_student: 2e-3,
            lr_kd: 2e-3,
            lr_disc: 1e-3,
            weight_decay: 1e-4,
            lr_min_ratio: 0.01,
            alpha: 0.5,
            lambda1: 1.0,
            lambda2: 0.1,
            temperature: 4.0,
            class_weighting: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_student, self.lr_kd, self.lr_disc];
        if self.epochs == 0
            || self.batch_size == 0
            || lrs.iter().any(|l| !(*l > 0.0))
            || !(0.0..=1.0).contains(&self.alpha)
            || !(self.temperature > 0.0)
            || !(0.0..=1.0).contains(&self.lr_min_ratio)
        {
            return Err(Error::invalid(format!("invalid training config {self:?}")));
        }
        Ok(())
    }

    pub fn weights(&self) -> KdWeights {
        KdWeights {
            alpha: self.alpha,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    /// Learning-rate multiplier at `step` of `total`.
    pub fn lr_factor(&self, step: usize, total: usize) -> f64 {
        cosine_lr(
            step,
            &Schedule {
                lr_min: self.lr_min_ratio,
                lr_max: 1.0,
                total_steps: total,
            },
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdMode {
    /// PCA + GL + adversarial feature distillation.
    #[default]
    Projectors,
    /// Soft-target logit distillation.
    Hinton,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub mode: KdMode,
    pub views: usize,
    pub crop_frac: f64,
    /// Key width of the PCA projector; the student width when absent.
    pub pca_dk: Option<usize>,
    pub pca_kernel: usize,
    pub pca_cross: bool,
    pub gl_groups: usize,
    pub disc_hidden: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mode: KdMode::Projectors,
            views: 2,
            crop_frac: 0.8,
            pca_dk: None,
            pca_kernel: 1,
            pca_cross: false,
            gl_groups: 4,
            disc_hidden: 64,
        }
    }
}

/// One logged optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub ce: f64,
    pub kd_pca: f64,
    pub kd_gl: f64,
    pub kd_adv: f64,
    pub total: f64,
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "step,ce,kd_pca,kd_gl,kd_adv,total,lr";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.ce, r.kd_pca, r.kd_gl, r.kd_adv, r.total, r.lr
        );
    }
    out
}

pub fn write_history(path: impl AsRef<Path>, rows: &[HistoryRow]) -> Result<()> {
    std::fs::write(path, history_csv(rows))?;
    Ok(())
}

/// Parses a history CSV; a bad row is reported with its 1-based line number.
pub fn parse_history(text: &str) -> Result<Vec<HistoryRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HISTORY_HEADER => {}
        _ => {
            return Err(Error::Malformed {
                line: 1,
                msg: format!("expected header `{HISTORY_HEADER}`"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |msg: String| Error::Malformed { line: i + 1, msg };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(bad(format!("expected 7 fields, found {}", f.len())));
            }
            let num = |j: usize| f[j].trim().parse::<f64>().map_err(|e| bad(format!("field {}: {e}", j + 1)));
            Ok(HistoryRow {
                step: f[0].trim().parse().map_err(|e| bad(format!("field 1: {e}")))?,
                ce: num(1)?,
                kd_pca: num(2)?,
                kd_gl: num(3)?,
                kd_adv: num(4)?,
                total: num(5)?,
                lr: num(6)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
    /// Whether this epoch produced the retained checkpoint at the time.
    pub improved: bool,
}

/// Result of a supervised or distillation run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<HistoryRow>,
    pub epochs: Vec<EpochRecord>,
    /// Distillation components at the best epoch.
    pub kd: Option<KdModules>,
}

fn eval_policy(model: &Model) -> AugmentPolicy {
    AugmentPolicy::uniform(AugmentConfig::eval(model.spec.image_size))
}

/// Softmax scores for every sample, in dataset order.
pub fn predict(model: &Model, data: &Dataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut scores = Vec::with_capacity(data.len());
    for b in data.batches(0, batch_size.max(1), false, &eval_policy(model), 0)? {
        let logits = model.forward(&b.x, false)?.logits;
        let k = logits.shape()[1];
        for row in logits.data().chunks(k) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(f64::from(v)));
            let e: Vec<f64> = row.iter().map(|&v| (f64::from(v) - m).exp()).collect();
            let s: f64 = e.iter().sum();
            scores.push(e.into_iter().map(|v| v / s).collect());
        }
    }
    Ok(scores)
}

/// Eval-mode metrics over a labelled dataset.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    let scores = predict(model, data, batch_size)?;
    MetricsReport::from_scores(data.classes.clone(), &data.labels, &scores)
}

fn accuracy(model: &Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("validation set is empty".into()));
    }
    Ok(evaluate(model, data, batch_size)?.accuracy)
}

fn ce_weights(cfg: &TrainConfig, data: &Dataset) -> Result<Option<Vec<f64>>> {
    cfg.class_weighting.then(|| class_weights(&data.counts())).transpose()
}

fn f(v: Var<'_>) -> f64 {
    f64::from(v.item())
}

/// Tracks the best validation accuracy; ties keep the earlier epoch.
struct BestKeeper {
    model: Option<Model>,
    kd: Option<KdModules>,
    epoch: usize,
    acc: f64,
}

impl BestKeeper {
    fn new() -> Self {
        Self {
            model: None,
            kd: None,
            epoch: 0,
            acc: f64::NEG_INFINITY,
        }
    }

    fn offer(&mut self, epoch: usize, acc: f64, model: &Model, kd: Option<&KdModules>) -> bool {
        if acc > self.acc {
            self.acc = acc;
            self.epoch = epoch;
            self.model = Some(model.clone());
            self.kd = kd.cloned();
            true
        } else {
            false
        }
    }
}

fn epoch_batches(data: &Dataset, cfg: &TrainConfig, epoch: usize, policy: &AugmentPolicy) -> Result<Vec<Batch>> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    data.batches(epoch, cfg.batch_size, true, policy, cfg.seed)
}

fn steps_per_epoch(data: &Dataset, cfg: &TrainConfig) -> usize {
    data.len().div_ceil(cfg.batch_size)
}

/// Plain cross-entropy training with AdamW, a cosine schedule, and
/// best-validation checkpointing.
pub fn train_supervised(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    policy: &AugmentPolicy,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let weights = ce_weights(cfg, train)?;
    let total_steps = cfg.epochs * steps_per_epoch(train, cfg);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut keeper = BestKeeper::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let batches = epoch_batches(train, cfg, epoch, policy)?;
        let n_batches = batches.len();
        for batch in batches {
            let lr = cfg.lr_student * cfg.lr_factor(step, total_steps);
            let tape = Tape::new();
            let p = Bound::bind(&tape, &model.params, Model::<f32>::is_trainable);
            let out = model.forward_tape(&p, tape.constant(batch.x), Mode::Train, false)?;
            let ce = nn::cross_entropy(out.logits, &batch.y, weights.as_deref())?;
            let row = HistoryRow {
                step,
                ce: f(ce),
                kd_pca: 0.0,
                kd_gl: 0.0,
                kd_adv: 0.0,
                total: f(ce),
                lr,
            };
            let mut grads = tape.backward(ce)?;
            let g = p.grads(&mut grads);
            opt.step(&mut [Group {
                name: "student",
                params: &mut model.params,
                grads: &g,
                lr,
            }])?;
            model.update_bn(&out.bn_stats, BN_MOMENTUM);
            loss_sum += row.total;
            history.push(row);
            step += 1;
        }
        let acc = accuracy(model, val, cfg.batch_size)?;
        let improved = keeper.offer(epoch, acc, model, None);
        log::info!("epoch {epoch}: loss {:.4} val acc {acc:.4}", loss_sum / n_batches as f64);
        epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / n_batches as f64,
            val_accuracy: acc,
            improved,
        });
    }
    Ok(TrainOutcome {
        best: keeper.model.expect("at least one epoch"),
        best_epoch: keeper.epoch,
        best_val_accuracy: keeper.acc,
        history,
        epochs,
        kd: None,
    })
}

/// Builds projectors and discriminator sized for a teacher/student pair.
pub fn build_kd_modules(teacher: &Model, student: &Model, dcfg: &DistillConfig, seed: u64) -> Result<KdModules> {
    let c = student.spec.feature_channels();
    let d = teacher.spec.embed_dim;
    let mut r = rng::stream(seed, "init/kd");
    let pca = PcaProjector::new(
        PcaConfig {
            channels: c,
            dk: dcfg.pca_dk.unwrap_or(c),
            kernel_size: dcfg.pca_kernel,
            cross_dim: dcfg.pca_cross.then_some(d),
        },
        &mut r,
    )?;
    let gl = GlProjector::new(
        GlConfig {
            channels: c,
            dim: d,
            groups: dcfg.gl_groups,
        },
        &mut r,
    )?;
    let disc = Discriminator::new(d, dcfg.disc_hidden, &mut rng::stream(seed, "discriminator"));
    Ok(KdModules { pca, gl, disc })
}

/// Trains the student against a frozen teacher. Each step builds the view
/// set, updates the student and projectors on `α·CE + (1−α)·L_KD`, then
/// updates the discriminator on detached features with its own optimizer.
pub fn train_distill(
    teacher: &Model,
    student: &mut Model,
    kd: &mut KdModules,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    dcfg: &DistillConfig,
    policy: &AugmentPolicy,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let weights = ce_weights(cfg, train)?;
    let kw = cfg.weights();
    let total_steps = cfg.epochs * steps_per_epoch(train, cfg);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut disc_opt = AdamW::new(0.0);
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut keeper = BestKeeper::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let batches = epoch_batches(train, cfg, epoch, policy)?;
        let n_batches = batches.len();
        for batch in batches {
            let factor = cfg.lr_factor(step, total_steps);
            let lr = cfg.lr_student * factor;
            let tape = Tape::new();
            let sp = Bound::bind(&tape, &student.params, Model::<f32>::is_trainable);
            let (row, bn_stats, pooled) = match dcfg.mode {
                KdMode::Projectors => {
                    let views = make_views(&batch.x, dcfg.views, dcfg.crop_frac, &mut rng::substream(cfg.seed, "views", step as u64))?;
                    let b = KdBound {
                        student: sp,
                        pca: Bound::bind(&tape, &kd.pca.params, |_| true),
                        gl: Bound::bind(&tape, &kd.gl.params, |_| true),
                        disc: Bound::frozen(&tape, &kd.disc.params),
                    };
                    let terms = distill_loss(teacher, student, kd, &b, &views, &kw)?;
                    let ce = nn::cross_entropy(terms.logits, &batch.y, weights.as_deref())?;
                    let (total, lb) = combine(ce, &terms, &kw)?;
                    let mut grads = tape.backward(total)?;
                    let gs = b.student.grads(&mut grads);
                    let gp = b.pca.grads(&mut grads);
                    let gg = b.gl.grads(&mut grads);
                    let lr_kd = cfg.lr_kd * factor;
                    opt.step(&mut [
                        Group { name: "student", params: &mut student.params, grads: &gs, lr },
                        Group { name: "pca", params: &mut kd.pca.params, grads: &gp, lr: lr_kd },
                        Group { name: "gl", params: &mut kd.gl.params, grads: &gg, lr: lr_kd },
                    ])?;
                    let row = HistoryRow {
                        step,
                        ce: lb.ce,
                        kd_pca: lb.kd_pca,
                        kd_gl: lb.kd_gl,
                        kd_adv: lb.kd_adv,
                        total: lb.total,
                        lr,
                    };
                    (row, terms.bn_stats, terms.pooled)
                }
                KdMode::Hinton => {
                    let zt = teacher.forward(&batch.x, false)?.logits;
                    let out = student.forward_tape(&sp, tape.constant(batch.x.clone()), Mode::Train, false)?;
                    let ce = nn::cross_entropy(out.logits, &batch.y, weights.as_deref())?;
                    let loss = hinton_kd_loss(out.logits, tape.constant(zt), &batch.y, cfg.alpha, cfg.temperature)?;
                    let row = HistoryRow {
                        step,
                        ce: f(ce),
                        kd_pca: 0.0,
                        kd_gl: 0.0,
                        kd_adv: 0.0,
                        total: f(loss),
                        lr,
                    };
                    let mut grads = tape.backward(loss)?;
                    let gs = sp.grads(&mut grads);
                    opt.step(&mut [Group { name: "student", params: &mut student.params, grads: &gs, lr }])?;
                    (row, out.bn_stats, Vec::new())
                }
            };
            student.update_bn(&bn_stats, BN_MOMENTUM);
            if !pooled.is_empty() {
                discriminator_step(&mut kd.disc, &mut disc_opt, &pooled, cfg.lr_disc * factor)?;
            }
            loss_sum += row.total;
            history.push(row);
            step += 1;
        }
        let acc = accuracy(student, val, cfg.batch_size)?;
        let improved = keeper.offer(epoch, acc, student, Some(kd));
        log::info!("epoch {epoch}: loss {:.4} val acc {acc:.4}", loss_sum / n_batches as f64);
        epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / n_batches as f64,
            val_accuracy: acc,
            improved,
        });
    }
    Ok(TrainOutcome {
        best: keeper.model.expect("at least one epoch"),
        best_epoch: keeper.epoch,
        best_val_accuracy: keeper.acc,
        history,
        epochs,
        kd: keeper.kd,
    })
}

/// One discriminator update on detached (teacher, student) pooled features,
/// averaged over views.
fn discriminator_step(disc: &mut Discriminator, opt: &mut AdamW, pooled: &[(Tensor, Tensor)], lr: f64) -> Result<f64> {
    let tape = Tape::new();
    let p = Bound::bind(&tape, &disc.params, |_| true);
    let mut acc: Option<Var<'_>> = None;
    for (ft, fs) in pooled {
        let (d_loss, _) = adv_loss(&p, tape.constant(ft.clone()), tape.constant(fs.clone()))?;
        acc = Some(match acc {
            Some(a) => a.add(d_loss)?,
            None => d_loss,
        });
    }
    let loss = acc.ok_or_else(|| Error::invalid("no views for the discriminator"))?.scale(1.0 / pooled.len() as f64);
    let value = f(loss);
    let mut grads = tape.backward(loss)?;
    let g = p.grads(&mut grads);
    opt.step(&mut [Group { name: "disc", params: &mut disc.params, grads: &g, lr }])?;
    Ok(value)
}
