//! Reverse-process enhancement (the coarse-to-fine trajectory with color
//! correction at every step) and PSNR/SSIM evaluation on packed data.

use crate::color_corrector::ColorCorrector;
use crate::denoiser::{DenoiserModel, Mode};
use crate::error::{Error, Result};
use crate::rawproc::{build_condition, downsample, upsample, PackedRaw};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor;
use rand::Rng;
use std::time::Instant;

pub const PSNR_CAP_DB: f64 = 100.0;
const SSIM_WINDOW: usize = 7;

/// Core reverse loop with pluggable noise prediction and correction, so an
/// oracle predictor can drive it in tests. `eps_fn(x_t, t, r)` must return
/// the predicted noise at the resolution of `x_t`; `correct_fn(x0_hat, t)`
/// refines the clean estimate.
pub fn enhance_core<R, F, C>(
    h: usize,
    w: usize,
    sched: &DiffusionSchedule,
    rng: &mut R,
    mut eps_fn: F,
    mut correct_fn: C,
) -> Result<Tensor>
where
    R: Rng,
    F: FnMut(&Tensor, usize, usize) -> Result<Tensor>,
    C: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let r_max = sched.r_max();
    let granule = 2 * r_max; // one pooling level inside the denoiser
    if h % granule != 0 || w % granule != 0 {
        return Err(Error::invalid(
            "enhance",
            format!("resolution {h}x{w} not divisible by {granule}"),
        ));
    }
    let t_top = sched.t_max;
    let r_top = sched.r(t_top);
    let mut x = Tensor::randn(vec![4, h / r_top, w / r_top], rng);
    let mut x0_final = None;
    // Correction already written into the state by earlier steps. The global
    // color correction is a quasi-constant offset: once applied it persists
    // inside the trajectory, so re-applying it to the raw estimate at every
    // step would accumulate roughly one extra correction per step. Tracking
    // the applied correction and correcting the correction-free estimate
    // keeps exactly one correction in-flight at any time.
    let mut applied: Option<Tensor> = None;
    for t in (1..=t_top).rev() {
        let r = sched.r(t);
        let eps_hat = eps_fn(&x, t, r)?;
        let x0_raw = sched.predict_x0(&x, t, &eps_hat)?;
        // clamp the clean-image estimate; with a weak predictor the raw
        // rollout can amplify itself past f32 range
        let est = match &applied {
            Some(a) => x0_raw.sub(a)?.clip(0.0, 1.0),
            None => x0_raw.clip(0.0, 1.0),
        };
        let x0_hat = correct_fn(&est, t)?.clip(0.0, 1.0);
        if t == 1 {
            x0_final = Some(x0_hat);
            break;
        }
        // The noise direction is recomputed from the state's own clamped
        // estimate: clamping keeps the rollout bounded, while leaving the
        // correction out of the noise term keeps corrector output from being
        // double-counted through the state. The corrected estimate steers
        // the update through the direct x0 term below.
        let x0_base = x0_raw.clip(0.0, 1.0);
        let ab = sched.alpha_bar(t);
        let eps_used = x
            .sub(&x0_base.scale(ab.sqrt() as f32))?
            .scale(1.0 / (1.0 - ab).sqrt() as f32);
        let r_prev = sched.r(t - 1);
        let z = Tensor::randn(vec![4, h / r_prev, w / r_prev], rng);
        x = sched.reverse_step(&x, t, &eps_used, &x0_hat, &z)?;
        if !x.is_finite() {
            return Err(Error::NonFinite { context: format!("enhance at t={t}") });
        }
        let corr = x0_hat.sub(&est)?;
        applied = Some(if r_prev != r { upsample(&corr, r / r_prev)? } else { corr });
    }
    Ok(x0_final.unwrap())
}

/// Enhance one packed low-light frame. The condition stack is rebuilt from
/// the amplified input at each resolution the trajectory visits.
///
/// `camera` must be `None` unless the model is still in pretrain mode
/// (diagnostic runs through one virtual-camera pathway).
pub fn enhance<R: Rng>(
    noisy: &PackedRaw,
    ratio: f32,
    model: &DenoiserModel,
    cc: &ColorCorrector,
    sched: &DiffusionSchedule,
    camera: Option<usize>,
    rng: &mut R,
) -> Result<PackedRaw> {
    if ratio <= 0.0 || !ratio.is_finite() {
        return Err(Error::invalid("enhance", format!("ratio must be positive, got {ratio}")));
    }
    if model.mode() == Mode::Pretrain && camera.is_none() {
        return Err(Error::ModeMismatch {
            expected: "aligned or merged (or an explicit camera index)".into(),
            found: "pretrain".into(),
        });
    }
    let amp = PackedRaw::new(noisy.data.scale(ratio).clip(0.0, 1.0), noisy.meta.clone())?;
    // One condition stack per resolution in the schedule. The stack is built
    // once at full resolution and then downsampled, matching how training
    // batches are prepared: position encoding and histogram equalisation do
    // not commute with downsampling, so rebuilding the stack from a
    // downsampled image would shift the coarse-stage input statistics away
    // from what the model saw in training.
    let cond_full = build_condition(&amp).data;
    let mut conds: Vec<Option<Tensor>> = vec![None; sched.r_max() + 1];
    for t in 1..=sched.t_max {
        let r = sched.r(t);
        if conds[r].is_none() {
            conds[r] = Some(downsample(&cond_full, r)?);
        }
    }
    let (h, w) = (noisy.height(), noisy.width());
    let out = enhance_core(
        h,
        w,
        sched,
        rng,
        |x_t, t, r| {
            let s = x_t.shape().to_vec();
            let cond = conds[r].as_ref().unwrap();
            let xb = Tensor::new(vec![1, s[0], s[1], s[2]], x_t.data().to_vec())?;
            let cs = cond.shape().to_vec();
            let cb = Tensor::new(vec![1, cs[0], cs[1], cs[2]], cond.data().to_vec())?;
            let out = model.predict(&xb, &cb, t, camera)?;
            Tensor::new(s, out.data().to_vec())
        },
        |x0, t| cc.correct(x0, t),
    )?;
    let mut meta = noisy.meta.clone();
    meta.exposure_ratio = 1.0;
    PackedRaw::new(out, meta)
}

/// 10 log10(1 / MSE) with peak 1.0, capped at 100 dB for identical inputs.
pub fn psnr(a: &PackedRaw, b: &PackedRaw) -> Result<f64> {
    let mse = a.data.mse(&b.data)?;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn ssim_channel(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let k = SSIM_WINDOW;
    let norm = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..k {
                let row = (y + dy) * w + x;
                for dx in 0..k {
                    let (va, vb) = (a[row + dx] as f64, b[row + dx] as f64);
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let (ma, mb) = (sa / norm, sb / norm);
            let va = saa / norm - ma * ma;
            let vb = sbb / norm - mb * mb;
            let cov = sab / norm - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Single-scale SSIM with a uniform 7x7 window, per channel then averaged.
pub fn ssim(a: &PackedRaw, b: &PackedRaw) -> Result<f64> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", a.data.shape(), b.data.shape())));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid("ssim", format!("{h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let plane = h * w;
    let mut acc = 0.0;
    for c in 0..4 {
        acc += ssim_channel(&a.data.data()[c * plane..(c + 1) * plane], &b.data.data()[c * plane..(c + 1) * plane], h, w);
    }
    Ok(acc / 4.0)
}

#[derive(Debug, Clone, Copy)]
pub struct ImageScore {
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct EnhanceReport {
    pub per_image: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
    pub runtime_secs: f64,
}

impl EnhanceReport {
    fn from_scores(per_image: Vec<ImageScore>, runtime_secs: f64) -> Self {
        let n = per_image.len() as f64;
        let mean = |f: &dyn Fn(&ImageScore) -> f64| per_image.iter().map(|s| f(s)).sum::<f64>() / n;
        let std = |m: f64, f: &dyn Fn(&ImageScore) -> f64| {
            (per_image.iter().map(|s| (f(s) - m).powi(2)).sum::<f64>() / n).sqrt()
        };
        let mp = mean(&|s: &ImageScore| s.psnr_db);
        let ms = mean(&|s: &ImageScore| s.ssim);
        EnhanceReport {
            std_psnr: std(mp, &|s| s.psnr_db),
            std_ssim: std(ms, &|s| s.ssim),
            mean_psnr: mp,
            mean_ssim: ms,
            per_image,
            runtime_secs,
        }
    }

    /// Line-delimited text form (one record per image, then aggregates).
    pub fn text(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.per_image.iter().enumerate() {
            out.push_str(&format!("image={i} psnr_db={:.4} ssim={:.6}\n", s.psnr_db, s.ssim));
        }
        out.push_str(&format!(
            "aggregate n={} mean_psnr_db={:.4} std_psnr_db={:.4} mean_ssim={:.6} std_ssim={:.6}\n",
            self.per_image.len(),
            self.mean_psnr,
            self.std_psnr,
            self.mean_ssim,
            self.std_ssim,
        ));
        out
    }
}

/// Enhance every (noisy, clean, ratio) triple and score against the clean
/// reference.
pub fn evaluate<R: Rng>(
    dataset: &[(PackedRaw, PackedRaw, f32)],
    model: &DenoiserModel,
    cc: &ColorCorrector,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<EnhanceReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let start = Instant::now();
    let mut scores = Vec::with_capacity(dataset.len());
    for (noisy, clean, ratio) in dataset {
        let out = enhance(noisy, *ratio, model, cc, sched, None, rng)?;
        scores.push(ImageScore { psnr_db: psnr(&out, clean)?, ssim: ssim(&out, clean)? });
    }
    Ok(EnhanceReport::from_scores(scores, start.elapsed().as_secs_f64()))
}

/// Score a dataset without enhancement (noisy-after-amplification vs clean);
/// the baseline the enhanced numbers are compared against.
pub fn evaluate_identity(dataset: &[(PackedRaw, PackedRaw, f32)]) -> Result<EnhanceReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let start = Instant::now();
    let mut scores = Vec::with_capacity(dataset.len());
    for (noisy, clean, ratio) in dataset {
        let amp = PackedRaw::new(noisy.data.scale(*ratio).clip(0.0, 1.0), noisy.meta.clone())?;
        scores.push(ImageScore { psnr_db: psnr(&amp, clean)?, ssim: ssim(&amp, clean)? });
    }
    Ok(EnhanceReport::from_scores(scores, start.elapsed().as_secs_f64()))
}
