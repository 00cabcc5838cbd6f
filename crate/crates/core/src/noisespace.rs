//! Noise parameter space, its even partition into virtual cameras, and
//! physics-based noisy-image synthesis.
//!
//! The noise model has four components applied in the DN domain:
//! Poisson shot noise governed by the system gain K, i.i.d. Gaussian read
//! noise, a per-row shared Gaussian offset, and uniform quantization from
//! the ADC step. Read- and row-noise levels follow log-linear models in K.

use crate::error::{Error, Result};
use crate::rawproc::PackedRaw;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use std::path::Path;

/// One sampled parameter set for synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseParams {
    /// System gain, DN per electron (> 0).
    pub gain: f64,
    /// Read-noise standard deviation, DN (>= 0).
    pub sigma_read: f64,
    /// Row-noise standard deviation, DN (>= 0).
    pub sigma_row: f64,
    /// Quantization step, DN (> 0).
    pub q_step: f64,
    /// Exposure amplification (>= 1).
    pub ratio: f64,
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gain > 0.0
            && self.sigma_read >= 0.0
            && self.sigma_row >= 0.0
            && self.q_step > 0.0
            && self.ratio >= 1.0
            && [self.gain, self.sigma_read, self.sigma_row, self.q_step, self.ratio]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("NoiseParams", format!("{self:?}")))
        }
    }
}

/// Log-linear level model: log sigma = a * log K + b + N(0, s^2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelModel {
    pub slope: f64,
    pub intercept: f64,
    pub scatter: f64,
}

impl LevelModel {
    fn sample<R: Rng>(&self, log_gain: f64, rng: &mut R) -> f64 {
        let noise = if self.scatter > 0.0 {
            Normal::new(0.0, self.scatter).unwrap().sample(rng)
        } else {
            0.0
        };
        (self.slope * log_gain + self.intercept + noise).exp()
    }
}

/// Calibrated parameter ranges of a family of cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpace {
    /// Range of log K.
    pub log_gain_range: (f64, f64),
    pub read_model: LevelModel,
    pub row_model: LevelModel,
    pub q_step: f64,
    /// Exposure-ratio range.
    pub ratio_range: (f64, f64),
}

impl NoiseSpace {
    pub fn validate(&self) -> Result<()> {
        if self.log_gain_range.0 >= self.log_gain_range.1 {
            return Err(Error::invalid("NoiseSpace", "log gain range is empty"));
        }
        if self.read_model.scatter < 0.0 || self.row_model.scatter < 0.0 {
            return Err(Error::invalid("NoiseSpace", "negative scatter"));
        }
        if self.q_step <= 0.0 {
            return Err(Error::invalid("NoiseSpace", "q_step must be positive"));
        }
        if self.ratio_range.0 < 1.0 || self.ratio_range.0 > self.ratio_range.1 {
            return Err(Error::invalid("NoiseSpace", "bad ratio range"));
        }
        Ok(())
    }

    /// Default desk-scale space: K spans 0.1..10 DN/e-, ratios 50..300.
    pub fn default_space() -> Self {
        NoiseSpace {
            log_gain_range: ((0.1f64).ln(), (10.0f64).ln()),
            read_model: LevelModel { slope: 0.85, intercept: 0.2, scatter: 0.1 },
            row_model: LevelModel { slope: 0.7, intercept: -0.8, scatter: 0.1 },
            q_step: 1.0,
            ratio_range: (50.0, 300.0),
        }
    }
}

/// One even slice of the noise space along the log K axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualCamera {
    /// 1-based index.
    pub index: usize,
    pub log_gain_range: (f64, f64),
}

/// Evenly partition the log K range into `n` virtual cameras.
pub fn partition(space: &NoiseSpace, n: usize) -> Result<Vec<VirtualCamera>> {
    if n == 0 {
        return Err(Error::invalid("partition", "camera count must be >= 1"));
    }
    space.validate()?;
    let (lo, hi) = space.log_gain_range;
    let width = (hi - lo) / n as f64;
    Ok((1..=n)
        .map(|i| VirtualCamera {
            index: i,
            log_gain_range: (lo + (i - 1) as f64 * width, lo + i as f64 * width),
        })
        .collect())
}

/// Draw one parameter set from a virtual camera's region of the space.
pub fn sample_params<R: Rng>(vc: &VirtualCamera, space: &NoiseSpace, rng: &mut R) -> NoiseParams {
    let log_gain = rng.random_range(vc.log_gain_range.0..vc.log_gain_range.1);
    let sigma_read = space.read_model.sample(log_gain, rng);
    let sigma_row = space.row_model.sample(log_gain, rng);
    let ratio = rng.random_range(space.ratio_range.0..space.ratio_range.1);
    NoiseParams {
        gain: log_gain.exp(),
        sigma_read,
        sigma_row,
        q_step: space.q_step,
        ratio,
    }
}

/// Synthesize a short-exposure noisy capture of `clean` (values in [0,1]).
///
/// DN-domain pipeline with D = white - black: scale the scene by 1/ratio,
/// draw Poisson electrons, apply gain, add read noise per sample and row
/// noise per mosaic row, quantize to the ADC step, clip to [0,D], and
/// renormalize. Amplification by `ratio` happens downstream, in the
/// conditioning step.
pub fn synthesize<R: Rng>(clean: &PackedRaw, params: &NoiseParams, rng: &mut R) -> Result<PackedRaw> {
    params.validate()?;
    let d = clean.meta.dynamic_range() as f64;
    let (h, w) = (clean.height(), clean.width());
    // Packed channels R,G1 live on even mosaic rows, B,G2 on odd rows;
    // row offsets are drawn once per mosaic row.
    let row_offsets: Vec<f64> = if params.sigma_row > 0.0 {
        let dist = Normal::new(0.0, params.sigma_row).unwrap();
        (0..2 * h).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; 2 * h]
    };
    let read = if params.sigma_read > 0.0 {
        Some(Normal::new(0.0, params.sigma_read).unwrap())
    } else {
        None
    };
    let mut out = vec![0.0f32; 4 * h * w];
    for c in 0..4 {
        let mosaic_row_off = if c == 0 || c == 1 { 0 } else { 1 };
        let src = &clean.data.data()[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let row_dn = row_offsets[2 * y + mosaic_row_off];
            for x in 0..w {
                let expected_e = (src[y * w + x].max(0.0) as f64) * d / (params.ratio * params.gain);
                let electrons = if expected_e > 0.0 {
                    Poisson::new(expected_e).unwrap().sample(rng)
                } else {
                    0.0
                };
                let mut dn = params.gain * electrons;
                if let Some(dist) = &read {
                    dn += dist.sample(rng);
                }
                dn += row_dn;
                dn = (dn / params.q_step).round() * params.q_step;
                dst[y * w + x] = (dn.clamp(0.0, d) / d) as f32;
            }
        }
    }
    let mut meta = clean.meta.clone();
    meta.exposure_ratio = params.ratio as f32;
    PackedRaw::new(Tensor::new(vec![4, h, w], out)?, meta)
}

// --- noise-space definition file -----------------------------------------
//
// Plain key = value lines; `#` starts a comment.

pub fn write_space_file(path: &Path, space: &NoiseSpace) -> Result<()> {
    let text = format!(
        "# noise space definition\n\
         log_gain_min = {}\n\
         log_gain_max = {}\n\
         read_slope = {}\n\
         read_intercept = {}\n\
         read_scatter = {}\n\
         row_slope = {}\n\
         row_intercept = {}\n\
         row_scatter = {}\n\
         q_step = {}\n\
         ratio_min = {}\n\
         ratio_max = {}\n",
        space.log_gain_range.0,
        space.log_gain_range.1,
        space.read_model.slope,
        space.read_model.intercept,
        space.read_model.scatter,
        space.row_model.slope,
        space.row_model.intercept,
        space.row_model.scatter,
        space.q_step,
        space.ratio_range.0,
        space.ratio_range.1,
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_space_file(path: &Path) -> Result<NoiseSpace> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut fields = std::collections::BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            detail: format!("expected key = value, got {line:?}"),
        })?;
        let value: f64 = v.trim().parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            detail: format!("bad number {:?}", v.trim()),
        })?;
        fields.insert(k.trim().to_string(), (value, lineno + 1));
    }
    let mut get = |name: &str| -> Result<f64> {
        fields
            .remove(name)
            .map(|(v, _)| v)
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                detail: format!("missing key {name:?}"),
            })
    };
    let space = NoiseSpace {
        log_gain_range: (get("log_gain_min")?, get("log_gain_max")?),
        read_model: LevelModel {
            slope: get("read_slope")?,
            intercept: get("read_intercept")?,
            scatter: get("read_scatter")?,
        },
        row_model: LevelModel {
            slope: get("row_slope")?,
            intercept: get("row_intercept")?,
            scatter: get("row_scatter")?,
        },
        q_step: get("q_step")?,
        ratio_range: (get("ratio_min")?, get("ratio_max")?),
    };
    if let Some((k, (_, line))) = fields.into_iter().next() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            detail: format!("unknown key {k:?}"),
        });
    }
    space.validate()?;
    Ok(space)
}
