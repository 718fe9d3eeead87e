//! Optimization, training loops, autoregressive rollout and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::data::{shuffle, Dataset, FrameSequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::metrics::{cgan_losses, frame_metrics, MetricResult, SsimMode};
use crate::models::{Model, ModelKind, Noise};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moments for `id`, once it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        let i = id.index();
        Some((self.m.get(i)?.as_ref()?, self.v.get(i)?.as_ref()?))
    }

    /// Applies one update to `ids` from their stored gradients. Fails without
    /// touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            let p = store.get(id);
            if !p.grad.is_finite() {
                return Err(Error::NonFiniteGradient { name: p.name.clone(), step: self.step + 1 });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let n = store.len();
        if self.m.len() < n {
            self.m.resize(n, None);
            self.v.resize(n, None);
        }
        for &id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            let (b1, b2) = (self.beta1, self.beta2);
            for (((w, &g), m), v) in
                p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    /// Adversarial BCE plus `lambda_l1 · L1`, alternating D and G updates.
    CGan {
        lambda_l1: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub input_frames: usize,
    pub loss: LossKind,
    /// Global gradient-norm cap, if any.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn defaults(kind: ModelKind) -> Self {
        let (epochs, batch_size, lr, input_frames) = match kind {
            ModelKind::ConvLstm => (5, 2, 1e-3, 15),
            ModelKind::Cgan => (10, 4, 1e-4, 4),
            ModelKind::Unet => (5, 4, 1e-3, 16),
            ModelKind::AxialUnet => (15, 1, 1e-4, 16),
        };
        TrainConfig {
            model: kind.name().to_string(),
            epochs,
            batch_size,
            lr,
            seed: 0,
            input_frames,
            loss: match kind {
                ModelKind::Cgan => LossKind::CGan { lambda_l1: 100.0 },
                _ => LossKind::Mse,
            },
            clip_norm: (kind == ModelKind::ConvLstm).then_some(5.0),
        }
    }

    fn check(&self, model: &Model) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.input_frames != model.spec().input_frames() {
            return Err(Error::Config(format!(
                "config uses {} input frames but the model takes {}",
                self.input_frames,
                model.spec().input_frames()
            )));
        }
        if matches!(self.loss, LossKind::CGan { .. }) != (model.kind() == ModelKind::Cgan) {
            return Err(Error::Config(format!("loss {:?} does not fit model {}", self.loss, model.kind())));
        }
        Ok(())
    }
}

/// Training targets per sequence: the next frame, or for the cGAN as many
/// frames as it generates.
fn target_frames(model: &Model) -> usize {
    match model.cgan() {
        Some(c) => c.spec.generator.out_channels,
        None => 1,
    }
}

fn batch(seqs: &[&FrameSequence], m: usize, t: usize) -> Result<(Tensor, Tensor)> {
    let inputs: Vec<Tensor> = seqs.iter().map(|s| s.window(0, m)).collect();
    let targets: Vec<Tensor> = seqs.iter().map(|s| s.window(m, t)).collect();
    Ok((Tensor::stack(&inputs)?, Tensor::stack(&targets)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Per-epoch losses. Row 0 holds the losses of the untrained model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub rows: Vec<LossRow>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.epoch, r.train_loss, r.val_loss);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Owns a model and its optimizer state through a training run.
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    opt: Adam,
    disc_opt: Adam,
    rng: SplitMix64,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.check(&model)?;
        let rng = SplitMix64::seed_from_u64(cfg.seed);
        Ok(Trainer { opt: Adam::new(cfg.lr), disc_opt: Adam::new(cfg.lr), model, cfg, rng, epoch: 0 })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn check_data(&self, seqs: &[FrameSequence]) -> Result<()> {
        let need = self.cfg.input_frames + target_frames(&self.model);
        let spec = self.model.spec();
        for s in seqs {
            if s.len() < need || s.height() != spec.height || s.width() != spec.width {
                return Err(Error::shape(
                    "train",
                    format!(
                        "model needs sequences of at least {need} frames at {}x{}, got {}x{}x{}",
                        spec.height,
                        spec.width,
                        s.len(),
                        s.height(),
                        s.width()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Mean loss over `seqs` in eval mode.
    pub fn eval_loss(&self, seqs: &[FrameSequence]) -> Result<f64> {
        if seqs.is_empty() {
            return Ok(f64::NAN);
        }
        self.check_data(seqs)?;
        let (m, t) = (self.cfg.input_frames, target_frames(&self.model));
        let mut total = 0.0;
        for group in seqs.chunks(self.cfg.batch_size) {
            let refs: Vec<&FrameSequence> = group.iter().collect();
            let (x, y) = batch(&refs, m, t)?;
            let mut g = Graph::new(self.model.params(), Mode::Eval);
            let loss = objective(&self.model, self.cfg.loss, &mut g, x, y, None)?;
            total += g.value(loss).item() * group.len() as f64;
        }
        Ok(total / seqs.len() as f64)
    }

    /// Row 0 of the loss curve: losses before any update.
    pub fn initial_losses(&self, data: &Dataset) -> Result<LossRow> {
        Ok(LossRow { epoch: 0, train_loss: self.eval_loss(&data.train)?, val_loss: self.eval_loss(&data.val)? })
    }

    /// One pass over the shuffled training split. The reported training loss
    /// is the mean of the minibatch losses seen during the pass.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<LossRow> {
        if data.train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        self.check_data(&data.train)?;
        self.epoch += 1;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        shuffle(&mut order, self.rng.next_u64());
        let (m, t) = (self.cfg.input_frames, target_frames(&self.model));
        let mut total = 0.0;
        for idx in order.chunks(self.cfg.batch_size) {
            let refs: Vec<&FrameSequence> = idx.iter().map(|&i| &data.train[i]).collect();
            let (x, y) = batch(&refs, m, t)?;
            let loss = match self.cfg.loss {
                LossKind::Mse => self.mse_step(x, y)?,
                LossKind::CGan { lambda_l1 } => self.cgan_step(x, y, lambda_l1)?,
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: self.epoch, loss });
            }
            total += loss * idx.len() as f64;
        }
        let train_loss = total / data.train.len() as f64;
        let val_loss = self.eval_loss(&data.val)?;
        if !val_loss.is_finite() && !data.val.is_empty() {
            return Err(Error::Diverged { epoch: self.epoch, loss: val_loss });
        }
        Ok(LossRow { epoch: self.epoch, train_loss, val_loss })
    }

    fn apply_buffers(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) -> Result<()> {
        for (id, t) in updates {
            store.set_value(id, t)?;
        }
        Ok(())
    }

    fn mse_step(&mut self, x: Tensor, y: Tensor) -> Result<f64> {
        let ids: Vec<ParamId> = self.model.params().iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        let (loss, grads, updates) = {
            let mut g = Graph::new(self.model.params(), Mode::Train);
            let loss = objective(&self.model, self.cfg.loss, &mut g, x, y, None)?;
            let grads = g.backward(loss)?;
            (g.value(loss).item(), grads, g.into_buffer_updates())
        };
        if !loss.is_finite() {
            return Ok(loss);
        }
        let store = self.model.params_mut();
        grads.write_to(store);
        if let Some(max) = self.cfg.clip_norm {
            store.clip_grad_norm(&ids, max);
        }
        self.opt.step(store, &ids)?;
        Self::apply_buffers(store, updates)?;
        Ok(loss)
    }

    /// Discriminator update on (real, detached fake), then generator update.
    /// Returns the generator objective.
    fn cgan_step(&mut self, x: Tensor, y: Tensor, lambda: f64) -> Result<f64> {
        let c = self.model.cgan().expect("cGAN loss on a cGAN model");
        let d_ids = c.discriminator_params(self.model.params());
        let g_ids = c.generator_params(self.model.params());

        let fake = {
            let mut g = Graph::new(self.model.params(), Mode::Train);
            let xv = g.input(x.clone());
            let fake = c.generator.forward(&mut g, xv, Noise::Dropout(&mut self.rng))?;
            g.value(fake).clone()
        };
        let (d_grads, d_updates) = {
            let mut g = Graph::new(self.model.params(), Mode::Train);
            let xv = g.input(x.clone());
            let real = g.input(y.clone());
            let fv = g.input(fake);
            let d_real = c.discriminator.forward(&mut g, xv, real)?;
            let d_fake = c.discriminator.forward(&mut g, xv, fv)?;
            let losses = cgan_losses(&mut g, d_real, d_fake, fv, real, lambda)?;
            (g.backward(losses.discriminator)?, g.into_buffer_updates())
        };
        let store = self.model.params_mut();
        d_grads.write_to(store);
        self.disc_opt.step(store, &d_ids)?;
        Self::apply_buffers(store, d_updates)?;

        let (loss, g_grads, g_updates) = {
            let mut g = Graph::new(self.model.params(), Mode::Train);
            let loss = objective(&self.model, self.cfg.loss, &mut g, x, y, Some(&mut self.rng))?;
            (g.value(loss).item(), g.backward(loss)?, g.into_buffer_updates())
        };
        if !loss.is_finite() {
            return Ok(loss);
        }
        let store = self.model.params_mut();
        g_grads.write_to(store);
        self.opt.step(store, &g_ids)?;
        Self::apply_buffers(store, g_updates)?;
        Ok(loss)
    }
}

/// Records the training objective on `g`. For the cGAN this is the
/// generator objective; `rng` enables generator dropout.
fn objective(
    model: &Model,
    loss: LossKind,
    g: &mut Graph<'_>,
    x: Tensor,
    y: Tensor,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let x = g.input(x);
    let y = g.input(y);
    match (loss, model.cgan()) {
        (LossKind::CGan { lambda_l1 }, Some(c)) => {
            let noise = match rng {
                Some(r) => Noise::Dropout(r),
                None => Noise::Off,
            };
            let fake = c.generator.forward(g, x, noise)?;
            let d_fake = c.discriminator.forward(g, x, fake)?;
            let adv = g.bce_with_logits(d_fake, 1.0);
            let l1 = g.l1_loss(fake, y)?;
            let l1 = g.scale(l1, lambda_l1);
            g.add(adv, l1)
        }
        _ => {
            let pred = model.predict_batch(g, x)?;
            g.mse_loss(pred, y)
        }
    }
}

/// Runs `cfg.epochs` epochs, calling `on_epoch` after row 0 and after each
/// epoch with the model as it stands.
pub fn train(
    model: Model,
    cfg: TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&LossRow, &Model) -> Result<()>,
) -> Result<(Model, LossCurve)> {
    let mut trainer = Trainer::new(model, cfg)?;
    let mut curve = LossCurve::default();
    let row = trainer.initial_losses(data)?;
    on_epoch(&row, trainer.model())?;
    curve.rows.push(row);
    for _ in 0..trainer.cfg.epochs {
        let row = trainer.train_epoch(data)?;
        log::info!("epoch {}: train {:.6} val {:.6}", row.epoch, row.train_loss, row.val_loss);
        on_epoch(&row, trainer.model())?;
        curve.rows.push(row);
    }
    Ok((trainer.into_model(), curve))
}

/// Anything that maps the last `input_frames` frames to the next one.
pub trait Forecaster {
    fn input_frames(&self) -> usize;
    /// `[M,H,W]` → `[H,W]`.
    fn predict_next(&self, window: &Tensor) -> Result<Tensor>;
    fn label(&self) -> String;
}

impl Forecaster for Model {
    fn input_frames(&self) -> usize {
        self.spec().input_frames()
    }

    fn predict_next(&self, window: &Tensor) -> Result<Tensor> {
        Model::predict_next(self, window)
    }

    fn label(&self) -> String {
        self.kind().label().to_string()
    }
}

/// Repeats the last observed frame.
#[derive(Clone, Copy, Debug)]
pub struct Persistence {
    pub input_frames: usize,
}

impl Forecaster for Persistence {
    fn input_frames(&self) -> usize {
        self.input_frames
    }

    fn predict_next(&self, window: &Tensor) -> Result<Tensor> {
        Ok(window.index_first(window.shape()[0] - 1))
    }

    fn label(&self) -> String {
        "Persistence".into()
    }
}

/// Predicts `steps` frames by feeding each clamped prediction back as the
/// newest input frame. `seed` must hold exactly `input_frames` frames.
pub fn rollout(f: &dyn Forecaster, seed: &Tensor, steps: usize) -> Result<Tensor> {
    let s = seed.shape();
    if s.len() != 3 || s[0] != f.input_frames() {
        return Err(Error::shape("rollout", format!("expected [{},H,W] seed, got {:?}", f.input_frames(), s)));
    }
    if steps == 0 {
        return Err(Error::arg("rollout", "steps must be >= 1"));
    }
    let (m, h, w) = (s[0], s[1], s[2]);
    let mut window = seed.clone();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next = f.predict_next(&window)?.map(|v| v.clamp(0.0, 1.0));
        let mut data = window.data()[h * w..].to_vec();
        data.extend_from_slice(next.data());
        window = Tensor::new(&[m, h, w], data)?;
        out.push(next);
    }
    Tensor::stack(&out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub sequence: usize,
    /// 1-based lead index.
    pub step: usize,
    pub metrics: MetricResult,
}

/// Unweighted means over rows; infinite PSNR values are left out of the
/// PSNR mean and counted instead.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub infinite_psnr: usize,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub steps: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    fn aggregate_of<'a>(rows: impl Iterator<Item = &'a EvalRow>) -> Aggregate {
        let (mut mse, mut psnr, mut ssim) = (0.0, 0.0, 0.0);
        let (mut n, mut finite, mut inf) = (0usize, 0usize, 0usize);
        for r in rows {
            n += 1;
            mse += r.metrics.mse;
            ssim += r.metrics.ssim;
            if r.metrics.psnr.is_finite() {
                psnr += r.metrics.psnr;
                finite += 1;
            } else {
                inf += 1;
            }
        }
        let div = |s: f64, k: usize| if k == 0 { f64::NAN } else { s / k as f64 };
        Aggregate { mse: div(mse, n), psnr: div(psnr, finite), ssim: div(ssim, n), infinite_psnr: inf, rows: n }
    }

    pub fn aggregate(&self) -> Aggregate {
        Self::aggregate_of(self.rows.iter())
    }

    pub fn step_aggregate(&self, step: usize) -> Aggregate {
        Self::aggregate_of(self.rows.iter().filter(|r| r.step == step))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sequence,step,mse,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.sequence, r.step, r.metrics.mse, r.metrics.psnr, r.metrics.ssim);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Rolls out `steps` frames from the first `input_frames` frames of every
/// sequence and scores each against the true continuation.
pub fn evaluate(f: &dyn Forecaster, seqs: &[FrameSequence], steps: usize, ssim: SsimMode) -> Result<EvalReport> {
    let m = f.input_frames();
    let mut rows = Vec::with_capacity(seqs.len() * steps);
    for (k, s) in seqs.iter().enumerate() {
        if s.len() < m + steps {
            return Err(Error::shape(
                "evaluate",
                format!("sequence {k} has {} frames, need {} inputs + {steps} steps", s.len(), m),
            ));
        }
        let pred = rollout(f, &s.window(0, m), steps)?;
        for t in 0..steps {
            let metrics = frame_metrics(&pred.index_first(t), &s.frame(m + t), ssim)?;
            rows.push(EvalRow { sequence: k, step: t + 1, metrics });
        }
    }
    Ok(EvalReport { label: f.label(), steps, rows })
}

/// Comparison table of aggregate PSNR and SSIM, one row per report.
pub fn comparison_table(reports: &[&EvalReport]) -> String {
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$}  {:>10}  {:>8}", "Model", "PSNR", "SSIM");
    for r in reports {
        let a = r.aggregate();
        let _ = writeln!(s, "{:<width$}  {:>10.4}  {:>8.4}", r.label, a.psnr, a.ssim);
    }
    let _ = writeln!(s, "Higher is better for both PSNR (dB) and SSIM.");
    s
}
