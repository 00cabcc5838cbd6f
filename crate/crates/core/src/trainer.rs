//! The two training stages, the combined loss, Adam, and checkpoint I/O.
//!
//! Stage one trains the full denoiser and the color corrector on synthetic
//! noise drawn from every virtual camera. Stage two freezes the shared
//! convolutions and fits only the averaged modulation pathway (plus the
//! corrector) on real pairs from the target sensor.

use crate::color_corrector::ColorCorrector;
use crate::denoiser::{DenoiserConfig, DenoiserModel, Mode};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::noisespace::{sample_params, synthesize, NoiseSpace, VirtualCamera};
use crate::rawproc::{build_condition, downsample, PackedRaw};
use crate::schedule::{DiffusionSchedule, ScheduleSpec};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    /// Iterations at which the learning rate halves.
    pub lr_milestones: Vec<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_img: f32,
    pub pretrain_iters: usize,
    pub align_iters: usize,
    pub crop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 4,
            lr: 1e-3,
            lr_milestones: Vec::new(),
            beta1: 0.9,
            beta2: 0.999,
            lambda_img: 1.0,
            pretrain_iters: 2000,
            align_iters: 200,
            crop: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::invalid("TrainConfig", format!("lr must be positive, got {}", self.lr)));
        }
        if self.lambda_img < 0.0 || !self.lambda_img.is_finite() {
            return Err(Error::invalid(
                "TrainConfig",
                format!("lambda_img must be >= 0, got {}", self.lambda_img),
            ));
        }
        if self.batch == 0 {
            return Err(Error::invalid("TrainConfig", "batch must be positive"));
        }
        if self.crop < 16 || self.crop % 4 != 0 {
            return Err(Error::invalid(
                "TrainConfig",
                format!("crop must be a multiple of 4 and >= 16, got {}", self.crop),
            ));
        }
        Ok(())
    }
}

/// Adam without weight decay, moments keyed by parameter name so the update
/// order never depends on iteration internals.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub milestones: Vec<usize>,
    step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            milestones: cfg.lr_milestones.clone(),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn effective_lr(&self) -> f64 {
        let halvings = self.milestones.iter().filter(|&&ms| self.step >= ms).count();
        self.lr * 0.5f64.powi(halvings as i32)
    }

    /// One update over named (param, gradient) pairs.
    pub fn apply(&mut self, updates: Vec<(String, &mut Tensor, &Tensor)>) -> Result<()> {
        self.step += 1;
        let lr = self.effective_lr();
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, param, grad) in updates {
            if param.shape() != grad.shape() {
                return Err(Error::shape("Adam::apply", format!("{name}: {:?} vs {:?}", param.shape(), grad.shape())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            let v = self.v.entry(name).or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            let (pd, gd) = (param.data_mut(), grad.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let g = gd[i] as f64;
                let mi = self.beta1 * md[i] as f64 + (1.0 - self.beta1) * g;
                let vi = self.beta2 * vd[i] as f64 + (1.0 - self.beta2) * g * g;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                pd[i] -= (lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }

    pub fn export_state(&self) -> (usize, &BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (self.step, &self.m, &self.v)
    }

    pub fn import_state(&mut self, step: usize, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

/// L = mean((eps_hat - eps)^2) + lambda_img * mean|x0_corrected - x_rt0|.
/// Returns (total, noise term, image term) nodes.
pub fn loss_on(
    g: &mut Graph,
    eps_hat: NodeId,
    eps: NodeId,
    x0_corrected: NodeId,
    x_rt0: NodeId,
    lambda_img: f32,
) -> Result<(NodeId, NodeId, NodeId)> {
    let d = g.sub(eps_hat, eps)?;
    let sq = g.mul(d, d)?;
    let eps_term = g.mean(sq);
    let id = g.sub(x0_corrected, x_rt0)?;
    let ia = g.abs(id);
    let img_term = g.mean(ia);
    let scaled = g.scale(img_term, lambda_img);
    let total = g.add(eps_term, scaled)?;
    Ok((total, eps_term, img_term))
}

/// Tensor-level convenience around [`loss_on`].
pub fn loss_value(
    eps_hat: &Tensor,
    eps: &Tensor,
    x0_corrected: &Tensor,
    x_rt0: &Tensor,
    lambda_img: f32,
) -> Result<f32> {
    let mut g = Graph::new();
    let a = g.leaf(eps_hat.clone(), false);
    let b = g.leaf(eps.clone(), false);
    let c = g.leaf(x0_corrected.clone(), false);
    let d = g.leaf(x_rt0.clone(), false);
    let (total, _, _) = loss_on(&mut g, a, b, c, d, lambda_img)?;
    Ok(g.value(total).data()[0])
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f32,
    pub eps_loss: f32,
    pub img_loss: f32,
    pub t: usize,
    /// Virtual camera drawn this iteration (0 for aligning steps).
    pub camera: usize,
}

fn stack(items: &[Tensor]) -> Result<Tensor> {
    let s = items[0].shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].data().len());
    for it in items {
        if it.shape() != s {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", it.shape(), s)));
        }
        data.extend_from_slice(it.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(&s);
    Tensor::new(shape, data)
}

// Downsampled clean target, condition stack, and x_t for one shared timestep.
struct PreparedBatch {
    x_t: Tensor,
    cond: Tensor,
    eps: Tensor,
    x_rt0: Tensor,
}

fn prepare<R: Rng>(
    pairs: &[(PackedRaw, PackedRaw)], // (noisy, clean)
    sched: &DiffusionSchedule,
    t: usize,
    rng: &mut R,
) -> Result<PreparedBatch> {
    let r = sched.r(t);
    let (mut xs, mut conds, mut epss, mut x0s) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (noisy, clean) in pairs {
        let cond = build_condition(&noisy.amplified());
        let cond_r = downsample(&cond.data, r)?;
        let x_rt0 = downsample(&clean.data, r)?;
        let eps = Tensor::randn(x_rt0.shape().to_vec(), rng);
        let x_t = sched.forward_sample(&x_rt0, t, &eps)?;
        xs.push(x_t);
        conds.push(cond_r);
        epss.push(eps);
        x0s.push(x_rt0);
    }
    Ok(PreparedBatch { x_t: stack(&xs)?, cond: stack(&conds)?, eps: stack(&epss)?, x_rt0: stack(&x0s)? })
}

/// Run one shared-timestep iteration on prepared tensors and update every
/// trainable parameter. Shared by both stages.
fn optimize_batch<R: Rng>(
    model: &mut DenoiserModel,
    cc: &mut ColorCorrector,
    batch: PreparedBatch,
    sched: &DiffusionSchedule,
    t: usize,
    camera: Option<usize>,
    lambda_img: f32,
    opt: &mut Adam,
    _rng: &mut R,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let x_t = g.leaf(batch.x_t, false);
    let cond = g.leaf(batch.cond, false);
    let eps = g.leaf(batch.eps, false);
    let x_rt0 = g.leaf(batch.x_rt0, false);

    let (eps_hat, d_binding) = model.forward(&mut g, x_t, cond, t, camera)?;
    // in-graph x0 estimate: (x_t - sqrt(1-abar) eps_hat) / sqrt(abar)
    let ab = sched.alpha_bar(t);
    let noise_part = g.scale(eps_hat, (1.0 - ab).sqrt() as f32);
    let centered = g.sub(x_t, noise_part)?;
    let x0_hat = g.scale(centered, (1.0 / ab.sqrt()) as f32);
    // The corrector sees the estimate clipped to [0,1], exactly as during
    // sampling; clip(x) = relu(x) - relu(x - 1) keeps this inside the graph.
    let ones = g.leaf(Tensor::full(g.value(x0_hat).shape().to_vec(), 1.0), false);
    let low = g.relu(x0_hat);
    let over = g.sub(x0_hat, ones)?;
    let over_r = g.relu(over);
    let x0_clipped = g.sub(low, over_r)?;
    let mut c_binding = Vec::new();
    let corrected = cc.correct_on(&mut g, x0_clipped, t, &mut c_binding)?;

    // During pre-training the image term is down-weighted by alpha_bar(t):
    // with no systematic color shift to learn, a high-noise x0 estimate only
    // rewards the corrector for shrinking images toward the dataset mean — a
    // bias that compounds badly when the correction is applied at every
    // reverse step. During aligning the full weight is kept at every t: the
    // high-noise estimates are dominated by the conditioning pathway and so
    // carry the target camera's color shift — exactly the signal the
    // corrector exists to remove.
    let lambda_t = if camera.is_some() { lambda_img * ab as f32 } else { lambda_img };
    let (total, eps_term, img_term) = loss_on(&mut g, eps_hat, eps, corrected, x_rt0, lambda_t)?;
    let stats = StepStats {
        loss: g.value(total).data()[0],
        eps_loss: g.value(eps_term).data()[0],
        img_loss: g.value(img_term).data()[0],
        t,
        camera: camera.unwrap_or(0),
    };
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite { context: format!("training loss at t={t}") });
    }
    let grads = g.backward(total)?;

    let zero = Tensor::scalar(0.0);
    let mut updates: Vec<(String, Tensor, Tensor)> = Vec::new();
    for (name, id) in d_binding {
        if !model.is_trainable(&name) {
            continue;
        }
        let grad = grads.get(id).unwrap_or(&zero);
        if grad.shape() == zero.shape() && model.param(&name).unwrap().shape() != zero.shape() {
            continue; // parameter never reached the loss this step
        }
        updates.push((format!("d.{name}"), model.param(&name).unwrap().clone(), grad.clone()));
    }
    for (name, id) in c_binding {
        let grad = grads.get(id).unwrap_or(&zero);
        if grad.shape() == zero.shape() && cc.param(&name).unwrap().shape() != zero.shape() {
            continue;
        }
        updates.push((format!("c.{name}"), cc.param(&name).unwrap().clone(), grad.clone()));
    }
    let mut refs: Vec<(String, &mut Tensor, &Tensor)> = Vec::with_capacity(updates.len());
    // split borrows: collect owned copies above, write back below
    let mut owned: Vec<(String, Tensor, Tensor)> = updates;
    for (name, param, grad) in owned.iter_mut() {
        refs.push((name.clone(), param, &*grad));
    }
    opt.apply(refs)?;
    for (name, param, _) in owned {
        if let Some(rest) = name.strip_prefix("d.") {
            model.set_param(rest, param)?;
        } else if let Some(rest) = name.strip_prefix("c.") {
            cc.set_param(rest, param)?;
        }
    }
    Ok(stats)
}

/// One stage-one iteration: draw a virtual camera, synthesize noisy inputs
/// for the whole batch, and take one optimizer step on denoiser + corrector.
pub fn pretrain_step<R: Rng>(
    model: &mut DenoiserModel,
    cc: &mut ColorCorrector,
    clean_batch: &[PackedRaw],
    sched: &DiffusionSchedule,
    space: &NoiseSpace,
    cameras: &[VirtualCamera],
    lambda_img: f32,
    opt: &mut Adam,
    rng: &mut R,
) -> Result<StepStats> {
    if clean_batch.is_empty() {
        return Err(Error::invalid("pretrain_step", "empty batch"));
    }
    if model.mode() != Mode::Pretrain {
        return Err(Error::ModeMismatch { expected: "pretrain".into(), found: model.mode().as_str().into() });
    }
    if cameras.is_empty() {
        return Err(Error::invalid("pretrain_step", "no virtual cameras"));
    }
    let i = rng.random_range(1..=cameras.len());
    let t = rng.random_range(1..=sched.t_max);
    let mut pairs = Vec::with_capacity(clean_batch.len());
    for clean in clean_batch {
        let params = sample_params(&cameras[i - 1], space, rng);
        let noisy = synthesize(clean, &params, rng)?;
        pairs.push((noisy, clean.clone()));
    }
    let batch = prepare(&pairs, sched, t, rng)?;
    optimize_batch(model, cc, batch, sched, t, Some(i), lambda_img, opt, rng)
}

/// One stage-two iteration on real (noisy, clean) pairs. Requires frozen
/// convolutions; only CFI^T and the corrector move.
pub fn align_step<R: Rng>(
    model: &mut DenoiserModel,
    cc: &mut ColorCorrector,
    pairs: &[(PackedRaw, PackedRaw)],
    sched: &DiffusionSchedule,
    lambda_img: f32,
    opt: &mut Adam,
    rng: &mut R,
) -> Result<StepStats> {
    if pairs.is_empty() {
        return Err(Error::invalid("align_step", "empty batch"));
    }
    if model.mode() != Mode::Aligned {
        return Err(Error::ModeMismatch { expected: "aligned".into(), found: model.mode().as_str().into() });
    }
    if !model.convs_frozen() {
        return Err(Error::invalid("align_step", "convolutions must be frozen before aligning"));
    }
    let t = rng.random_range(1..=sched.t_max);
    let batch = prepare(pairs, sched, t, rng)?;
    optimize_batch(model, cc, batch, sched, t, None, lambda_img, opt, rng)
}

// ---------------------------------------------------------------------------
// Checkpoints

const CKPT_MAGIC: &[u8; 4] = b"RGCP";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema: u32,
    mode: String,
    frozen: bool,
    iteration: u64,
    opt_step: u64,
    schedule: ScheduleSpec,
    denoiser: DenoiserConfig,
}

/// Everything a stage needs to resume: both models, the schedule numbers,
/// and optimizer moments, stored as named f32 tensors.
#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    pub mode: Mode,
    pub frozen: bool,
    pub iteration: usize,
    pub opt_step: usize,
    pub schedule: ScheduleSpec,
    pub denoiser_config: DenoiserConfig,
    /// Keys: `d.*` denoiser, `c.*` corrector, `opt.m.*` / `opt.v.*` moments.
    pub tensors: BTreeMap<String, Tensor>,
}

impl CheckpointBundle {
    pub fn from_models(
        model: &DenoiserModel,
        cc: &ColorCorrector,
        opt: Option<&Adam>,
        schedule: ScheduleSpec,
        iteration: usize,
    ) -> Self {
        let mut tensors = BTreeMap::new();
        for (k, t) in model.params() {
            tensors.insert(format!("d.{k}"), t.clone());
        }
        for (k, t) in cc.params() {
            tensors.insert(format!("c.{k}"), t.clone());
        }
        let mut opt_step = 0;
        if let Some(opt) = opt {
            let (step, m, v) = opt.export_state();
            opt_step = step;
            for (k, t) in m {
                tensors.insert(format!("opt.m.{k}"), t.clone());
            }
            for (k, t) in v {
                tensors.insert(format!("opt.v.{k}"), t.clone());
            }
        }
        CheckpointBundle {
            mode: model.mode(),
            frozen: model.convs_frozen(),
            iteration,
            opt_step,
            schedule,
            denoiser_config: model.config().clone(),
            tensors,
        }
    }

    fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), t.clone())))
            .collect()
    }

    pub fn to_models(&self) -> Result<(DenoiserModel, ColorCorrector)> {
        let model = DenoiserModel::from_parts(
            self.denoiser_config.clone(),
            self.mode,
            self.frozen,
            self.group("d."),
        )?;
        let cc = ColorCorrector::from_parts(self.group("c."))?;
        Ok((model, cc))
    }

    /// Restore Adam moments into `opt` (fresh moments if none were saved).
    pub fn restore_optimizer(&self, opt: &mut Adam) {
        opt.import_state(self.opt_step, self.group("opt.m."), self.group("opt.v."));
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = Manifest {
            schema: CKPT_VERSION,
            mode: self.mode.as_str().to_string(),
            frozen: self.frozen,
            iteration: self.iteration as u64,
            opt_step: self.opt_step as u64,
            schedule: self.schedule,
            denoiser: self.denoiser_config.clone(),
        };
        let manifest_text =
            toml::to_string(&manifest).map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(manifest_text.len() as u32).to_le_bytes());
        buf.extend_from_slice(manifest_text.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.shape().len() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > buf.len() {
                return Err(Error::Checkpoint {
                    offset: *off as u64,
                    detail: format!("truncated: wanted {n} bytes, {} remain", buf.len() - *off),
                });
            }
            let s = &buf[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != CKPT_MAGIC {
            return Err(Error::Checkpoint { offset: 0, detail: "bad magic".into() });
        }
        let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint {
                offset: 4,
                detail: format!("schema version {version}, this build reads {CKPT_VERSION}"),
            });
        }
        let mlen = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        if mlen == 0 {
            return Err(Error::Checkpoint { offset: off as u64, detail: "empty manifest".into() });
        }
        let moff = off;
        let mtext = std::str::from_utf8(take(&mut off, mlen)?)
            .map_err(|_| Error::Checkpoint { offset: moff as u64, detail: "manifest is not UTF-8".into() })?;
        let manifest: Manifest = toml::from_str(mtext)
            .map_err(|e| Error::Checkpoint { offset: moff as u64, detail: format!("manifest parse: {e}") })?;
        if manifest.schema != CKPT_VERSION {
            return Err(Error::Checkpoint {
                offset: moff as u64,
                detail: format!("manifest schema {} unsupported", manifest.schema),
            });
        }
        let mode = Mode::parse(&manifest.mode).ok_or_else(|| Error::Checkpoint {
            offset: moff as u64,
            detail: format!("unknown mode {:?}", manifest.mode),
        })?;
        let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
            let noff = off;
            let name = std::str::from_utf8(take(&mut off, nlen)?)
                .map_err(|_| Error::Checkpoint { offset: noff as u64, detail: "tensor name is not UTF-8".into() })?
                .to_string();
            let ndim = take(&mut off, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut off, numel * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint { offset: noff as u64, detail: format!("{name}: {e}") })?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint { offset: noff as u64, detail: format!("duplicate tensor {name}") });
            }
        }
        if off != buf.len() {
            return Err(Error::Checkpoint {
                offset: off as u64,
                detail: format!("{} trailing bytes", buf.len() - off),
            });
        }
        Ok(CheckpointBundle {
            mode,
            frozen: manifest.frozen,
            iteration: manifest.iteration as usize,
            opt_step: manifest.opt_step as usize,
            schedule: manifest.schedule,
            denoiser_config: manifest.denoiser,
            tensors,
        })
    }
}
