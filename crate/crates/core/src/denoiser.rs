//! Conditional U-Net noise predictor with per-virtual-camera feature
//! integration (CFI) pathways, pathway averaging for the aligning stage,
//! and exact structural reparameterization for deployment.
//!
//! Every 3x3 convolution is preceded by a CFI: a per-channel affine with one
//! (W, B) pathway per virtual camera, initialized to identity so a fresh
//! model behaves exactly like the CFI-free backbone. For deployment the
//! averaged pathway is folded into the convolution. With zero padding that
//! fold is not a plain kernel rescale: the affine shift contributes a
//! spatially varying bias on the one-pixel border, handled here with an
//! explicit bias field so the merge is exact everywhere.

use crate::error::{Error, Result};
use crate::graph::{sinusoidal_embed, Graph, NodeId, PadMode};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

pub const IN_CHANNELS: usize = 4;
pub const COND_CHANNELS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// n CFI pathways per layer, routed by virtual-camera index.
    Pretrain,
    /// Single averaged pathway (CFI^T).
    Aligned,
    /// CFI^T folded into the convolutions; no affine ops remain.
    Merged,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::Aligned => "aligned",
            Mode::Merged => "merged",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "pretrain" => Some(Mode::Pretrain),
            "aligned" => Some(Mode::Aligned),
            "merged" => Some(Mode::Merged),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_width: usize,
    pub time_dim: usize,
    pub n_cameras: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { base_width: 32, time_dim: 64, n_cameras: 5 }
    }
}

/// (name, cin, cout) for the six 3x3 conv layers of the two-scale U-Net.
fn layer_specs(cfg: &DenoiserConfig) -> [(&'static str, usize, usize); 6] {
    let b = cfg.base_width;
    [
        ("enc1a", IN_CHANNELS + COND_CHANNELS, b),
        ("enc1b", b, b),
        ("enc2a", b, 2 * b),
        ("enc2b", 2 * b, 2 * b),
        ("dec1", 3 * b, b),
        ("out", b, IN_CHANNELS),
    ]
}

/// A CFI^T affine merged into its 3x3 zero-pad convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedConv {
    /// [Cout, Cin, 3, 3]: original kernel scaled per input channel.
    pub kernel: Tensor,
    /// [Cout, H, W]: constant in the interior, corrected on the border.
    pub bias_field: Tensor,
}

/// Fold `affine` (w, b applied per input channel) into a zero-pad 3x3 conv
/// (kernel, bias) for inputs of `h` x `w`. The result satisfies
/// `conv(affine(x)) == MergedConv(x)` exactly, border pixels included.
pub fn merge_cfi_conv(w: &Tensor, b: &Tensor, kernel: &Tensor, bias: &Tensor, h: usize, w_dim: usize) -> Result<MergedConv> {
    let ks = kernel.shape();
    if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
        return Err(Error::shape("merge_cfi_conv", format!("kernel {ks:?}, need 3x3")));
    }
    let (cout, cin) = (ks[0], ks[1]);
    if w.shape() != [cin] || b.shape() != [cin] || bias.shape() != [cout] {
        return Err(Error::shape(
            "merge_cfi_conv",
            format!("w {:?} b {:?} bias {:?} vs cin {cin}, cout {cout}", w.shape(), b.shape(), bias.shape()),
        ));
    }
    let mut merged = kernel.clone();
    for o in 0..cout {
        for ci in 0..cin {
            let base = (o * cin + ci) * 9;
            for k in 0..9 {
                merged.data_mut()[base + k] *= w.data()[ci];
            }
        }
    }
    let bias_field = shift_bias_field(kernel, b, bias, h, w_dim);
    Ok(MergedConv { kernel: merged, bias_field })
}

/// bias_field[o,y,x] = bias[o] + sum_ci shift[ci] * S[o,ci,y,x], where S is
/// the sum of the kernel taps that land inside the image under zero padding.
fn shift_bias_field(kernel: &Tensor, shift: &Tensor, bias: &Tensor, h: usize, w: usize) -> Tensor {
    let ks = kernel.shape();
    let (cout, cin) = (ks[0], ks[1]);
    let kd = kernel.data();
    let mut out = vec![0.0f32; cout * h * w];
    for o in 0..cout {
        // interior value: full kernel sum per input channel
        let mut interior = bias.data()[o] as f64;
        for ci in 0..cin {
            let base = (o * cin + ci) * 9;
            let full: f64 = kd[base..base + 9].iter().map(|&v| v as f64).sum();
            interior += shift.data()[ci] as f64 * full;
        }
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        plane.fill(interior as f32);
        // border rows/cols get partial sums
        for y in 0..h {
            for x in 0..w {
                if y > 0 && y + 1 < h && x > 0 && x + 1 < w {
                    continue;
                }
                let mut v = bias.data()[o] as f64;
                for ci in 0..cin {
                    let base = (o * cin + ci) * 9;
                    let mut s = 0.0f64;
                    for ky in 0..3usize {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = x as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            s += kd[base + ky * 3 + kx] as f64;
                        }
                    }
                    v += shift.data()[ci] as f64 * s;
                }
                plane[y * w + x] = v as f32;
            }
        }
    }
    Tensor::new(vec![cout, h, w], out).unwrap()
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    mode: Mode,
    convs_frozen: bool,
    params: BTreeMap<String, Tensor>,
}

impl DenoiserModel {
    /// Fresh pretrain-mode model: He-initialized kernels, identity CFIs.
    pub fn new_pretrain<R: Rng>(config: DenoiserConfig, rng: &mut R) -> Self {
        let mut params = BTreeMap::new();
        for (name, cin, cout) in layer_specs(&config) {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            let kernel = Tensor::new(
                vec![cout, cin, 3, 3],
                (0..cout * cin * 9).map(|_| dist.sample(rng) as f32).collect(),
            )
            .unwrap();
            params.insert(format!("{name}.kernel"), kernel);
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]));
            for i in 1..=config.n_cameras {
                params.insert(format!("{name}.cfi{i}.w"), Tensor::ones(vec![cin]));
                params.insert(format!("{name}.cfi{i}.b"), Tensor::zeros(vec![cin]));
            }
        }
        let b = config.base_width;
        let std = (2.0 / config.time_dim as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        params.insert(
            "time.w".into(),
            Tensor::new(vec![b, config.time_dim], (0..b * config.time_dim).map(|_| dist.sample(rng) as f32).collect())
                .unwrap(),
        );
        params.insert("time.b".into(), Tensor::zeros(vec![b]));
        DenoiserModel { config, mode: Mode::Pretrain, convs_frozen: false, params }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn convs_frozen(&self) -> bool {
        self.convs_frozen
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.params.get_mut(name) {
            Some(t) if t.shape() == value.shape() => {
                *t = value;
                Ok(())
            }
            Some(t) => Err(Error::shape(
                "set_param",
                format!("{name}: {:?} vs {:?}", t.shape(), value.shape()),
            )),
            None => Err(Error::invalid("set_param", format!("unknown parameter {name}"))),
        }
    }

    /// Rebuild a model from checkpoint parts, validating the parameter set.
    pub fn from_parts(
        config: DenoiserConfig,
        mode: Mode,
        convs_frozen: bool,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let template = Self::expected_names(&config, mode);
        let got: Vec<&String> = params.keys().collect();
        let want: Vec<&String> = template.iter().collect();
        if got != want {
            return Err(Error::Data(format!(
                "denoiser parameter set mismatch: got {got:?}, want {want:?}"
            )));
        }
        Ok(DenoiserModel { config, mode, convs_frozen, params })
    }

    fn expected_names(config: &DenoiserConfig, mode: Mode) -> Vec<String> {
        let mut names = Vec::new();
        for (name, _, _) in layer_specs(config) {
            names.push(format!("{name}.bias"));
            match mode {
                Mode::Pretrain => {
                    for i in 1..=config.n_cameras {
                        names.push(format!("{name}.cfi{i}.b"));
                        names.push(format!("{name}.cfi{i}.w"));
                    }
                    names.push(format!("{name}.kernel"));
                }
                Mode::Aligned => {
                    names.push(format!("{name}.cfit.b"));
                    names.push(format!("{name}.cfit.w"));
                    names.push(format!("{name}.kernel"));
                }
                Mode::Merged => {
                    names.push(format!("{name}.kernel"));
                    names.push(format!("{name}.kernel_src"));
                    names.push(format!("{name}.shift"));
                }
            }
        }
        names.push("time.b".into());
        names.push("time.w".into());
        names.sort();
        names
    }

    /// Whether an optimizer may update this parameter in the current mode.
    pub fn is_trainable(&self, name: &str) -> bool {
        match self.mode {
            Mode::Pretrain => true,
            Mode::Aligned => {
                if self.convs_frozen {
                    name.contains(".cfit.")
                } else {
                    true
                }
            }
            Mode::Merged => false,
        }
    }

    /// Average all CFI pathways into a single CFI^T per layer.
    pub fn average_cfis(&mut self) -> Result<()> {
        if self.mode != Mode::Pretrain {
            return Err(Error::ModeMismatch {
                expected: "pretrain".into(),
                found: self.mode.as_str().into(),
            });
        }
        let n = self.config.n_cameras;
        for (name, cin, _) in layer_specs(&self.config) {
            let mut w_mean = vec![0.0f64; cin];
            let mut b_mean = vec![0.0f64; cin];
            for i in 1..=n {
                let w = self.params.remove(&format!("{name}.cfi{i}.w")).unwrap();
                let b = self.params.remove(&format!("{name}.cfi{i}.b")).unwrap();
                for c in 0..cin {
                    w_mean[c] += w.data()[c] as f64;
                    b_mean[c] += b.data()[c] as f64;
                }
            }
            let inv = 1.0 / n as f64;
            self.params.insert(
                format!("{name}.cfit.w"),
                Tensor::new(vec![cin], w_mean.iter().map(|&v| (v * inv) as f32).collect()).unwrap(),
            );
            self.params.insert(
                format!("{name}.cfit.b"),
                Tensor::new(vec![cin], b_mean.iter().map(|&v| (v * inv) as f32).collect()).unwrap(),
            );
        }
        self.mode = Mode::Aligned;
        Ok(())
    }

    /// Exclude conv kernels/biases (and the time projection) from updates.
    pub fn freeze_convs(&mut self) -> Result<()> {
        if self.mode != Mode::Aligned {
            return Err(Error::ModeMismatch {
                expected: "aligned".into(),
                found: self.mode.as_str().into(),
            });
        }
        self.convs_frozen = true;
        Ok(())
    }

    pub fn unfreeze_convs(&mut self) {
        self.convs_frozen = false;
    }

    /// Fold every CFI^T into its convolution (aligned -> merged).
    pub fn reparameterize(&mut self) -> Result<()> {
        if self.mode != Mode::Aligned {
            return Err(Error::ModeMismatch {
                expected: "aligned".into(),
                found: self.mode.as_str().into(),
            });
        }
        for (name, cin, cout) in layer_specs(&self.config) {
            let kernel = self.params.remove(&format!("{name}.kernel")).unwrap();
            let w = self.params.remove(&format!("{name}.cfit.w")).unwrap();
            let b = self.params.remove(&format!("{name}.cfit.b")).unwrap();
            let mut merged = kernel.clone();
            for o in 0..cout {
                for ci in 0..cin {
                    let base = (o * cin + ci) * 9;
                    for k in 0..9 {
                        merged.data_mut()[base + k] *= w.data()[ci];
                    }
                }
            }
            self.params.insert(format!("{name}.kernel"), merged);
            self.params.insert(format!("{name}.kernel_src"), kernel);
            self.params.insert(format!("{name}.shift"), b);
        }
        self.mode = Mode::Merged;
        self.convs_frozen = false;
        Ok(())
    }

    fn leaf_param(&self, g: &mut Graph, name: &str, binding: &mut Vec<(String, NodeId)>) -> NodeId {
        let t = self.params.get(name).unwrap_or_else(|| panic!("missing param {name}"));
        let id = g.leaf(t.clone(), self.is_trainable(name));
        binding.push((name.to_string(), id));
        id
    }

    fn conv_layer(
        &self,
        g: &mut Graph,
        name: &str,
        x: NodeId,
        camera: Option<usize>,
        binding: &mut Vec<(String, NodeId)>,
    ) -> Result<NodeId> {
        match self.mode {
            Mode::Pretrain => {
                let i = camera.unwrap();
                let w = self.leaf_param(g, &format!("{name}.cfi{i}.w"), binding);
                let b = self.leaf_param(g, &format!("{name}.cfi{i}.b"), binding);
                let k = self.leaf_param(g, &format!("{name}.kernel"), binding);
                let c = self.leaf_param(g, &format!("{name}.bias"), binding);
                let a = g.channel_affine(x, w, b)?;
                g.conv2d(a, k, c, PadMode::Zero, 1)
            }
            Mode::Aligned => {
                let w = self.leaf_param(g, &format!("{name}.cfit.w"), binding);
                let b = self.leaf_param(g, &format!("{name}.cfit.b"), binding);
                let k = self.leaf_param(g, &format!("{name}.kernel"), binding);
                let c = self.leaf_param(g, &format!("{name}.bias"), binding);
                let a = g.channel_affine(x, w, b)?;
                g.conv2d(a, k, c, PadMode::Zero, 1)
            }
            Mode::Merged => {
                let shape = g.value(x).shape();
                let (h, w_dim) = (shape[2], shape[3]);
                let field = shift_bias_field(
                    self.params.get(&format!("{name}.kernel_src")).unwrap(),
                    self.params.get(&format!("{name}.shift")).unwrap(),
                    self.params.get(&format!("{name}.bias")).unwrap(),
                    h,
                    w_dim,
                );
                let k = self.leaf_param(g, &format!("{name}.kernel"), binding);
                let f = g.leaf(field, false);
                g.conv2d_spatial_bias(x, k, f)
            }
        }
    }

    /// Predict the noise component of `x_t` given the conditional stack and
    /// timestep. In pretrain mode `camera` routes every CFI through one
    /// pathway; aligned/merged modes ignore it.
    ///
    /// Returns the output node and the (name, leaf) binding of every
    /// parameter that entered the graph.
    pub fn forward(
        &self,
        g: &mut Graph,
        x_t: NodeId,
        cond: NodeId,
        t: usize,
        camera: Option<usize>,
    ) -> Result<(NodeId, Vec<(String, NodeId)>)> {
        let xs = g.value(x_t).shape().to_vec();
        let cs = g.value(cond).shape().to_vec();
        if xs.len() != 4 || xs[1] != IN_CHANNELS {
            return Err(Error::shape("denoiser::forward", format!("x_t {xs:?}")));
        }
        if cs != [xs[0], COND_CHANNELS, xs[2], xs[3]] {
            return Err(Error::shape(
                "denoiser::forward",
                format!("cond {cs:?} vs x_t {xs:?}"),
            ));
        }
        if xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::shape("denoiser::forward", format!("H,W must be even, got {xs:?}")));
        }
        match self.mode {
            Mode::Pretrain => match camera {
                Some(i) if i >= 1 && i <= self.config.n_cameras => {}
                Some(i) => {
                    return Err(Error::invalid(
                        "denoiser::forward",
                        format!("camera {i} out of range 1..={}", self.config.n_cameras),
                    ))
                }
                None => {
                    return Err(Error::invalid(
                        "denoiser::forward",
                        "pretrain mode requires a camera index",
                    ))
                }
            },
            _ => {}
        }
        let n = xs[0];
        let mut binding = Vec::new();

        let input = g.concat_channels(&[x_t, cond])?;
        let h1 = self.conv_layer(g, "enc1a", input, camera, &mut binding)?;
        // timestep bias, projected to the base width and added per channel
        let emb = g.leaf(sinusoidal_embed(t, self.config.time_dim, n), false);
        let tw = self.leaf_param(g, "time.w", &mut binding);
        let tb = self.leaf_param(g, "time.b", &mut binding);
        let tvec = g.dense(emb, tw, tb)?;
        let ones = g.leaf(Tensor::ones(vec![n, self.config.base_width]), false);
        let h1t = g.modulate(h1, ones, tvec)?;
        let h1a = g.relu(h1t);
        let s1 = {
            let c = self.conv_layer(g, "enc1b", h1a, camera, &mut binding)?;
            g.relu(c)
        };
        let down = g.avg_pool2(s1)?;
        let h2 = {
            let c = self.conv_layer(g, "enc2a", down, camera, &mut binding)?;
            g.relu(c)
        };
        let h2b = {
            let c = self.conv_layer(g, "enc2b", h2, camera, &mut binding)?;
            g.relu(c)
        };
        let up = g.upsample_nearest2(h2b)?;
        let cat = g.concat_channels(&[up, s1])?;
        let d1 = {
            let c = self.conv_layer(g, "dec1", cat, camera, &mut binding)?;
            g.relu(c)
        };
        let eps = self.conv_layer(g, "out", d1, camera, &mut binding)?;
        Ok((eps, binding))
    }

    /// Convenience: run the model outside a training graph.
    pub fn predict(&self, x_t: &Tensor, cond: &Tensor, t: usize, camera: Option<usize>) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.leaf(x_t.clone(), false);
        let c = g.leaf(cond.clone(), false);
        let (out, _) = self.forward(&mut g, x, c, t, camera)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn small_config() -> DenoiserConfig {
        DenoiserConfig { base_width: 8, time_dim: 16, n_cameras: 3 }
    }

    fn inputs(r: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> (Tensor, Tensor) {
        (
            Tensor::randn(vec![n, IN_CHANNELS, h, w], r),
            Tensor::randn(vec![n, COND_CHANNELS, h, w], r),
        )
    }

    #[test]
    fn forward_shape_and_camera_checks() {
        let mut r = rng(1);
        let model = DenoiserModel::new_pretrain(small_config(), &mut r);
        let (x, c) = inputs(&mut r, 1, 8, 8);
        let y = model.predict(&x, &c, 10, Some(2)).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(model.predict(&x, &c, 10, Some(9)).is_err());
        assert!(model.predict(&x, &c, 10, None).is_err());
        // other resolutions too
        let (x2, c2) = inputs(&mut r, 2, 16, 12);
        assert_eq!(model.predict(&x2, &c2, 3, Some(1)).unwrap().shape(), x2.shape());
    }

    #[test]
    fn fresh_cfis_are_transparent() {
        // identity-initialized CFIs leave the backbone output unchanged:
        // every pathway and the averaged model agree bitwise
        let mut r = rng(2);
        let model = DenoiserModel::new_pretrain(small_config(), &mut r);
        let (x, c) = inputs(&mut r, 1, 8, 8);
        let y1 = model.predict(&x, &c, 5, Some(1)).unwrap();
        let y2 = model.predict(&x, &c, 5, Some(3)).unwrap();
        assert_eq!(y1.data(), y2.data());
        let mut aligned = model.clone();
        aligned.average_cfis().unwrap();
        let ya = aligned.predict(&x, &c, 5, None).unwrap();
        assert_eq!(y1.data(), ya.data());
    }

    #[test]
    fn perturbed_pathways_diverge() {
        let mut r = rng(3);
        let mut model = DenoiserModel::new_pretrain(small_config(), &mut r);
        let w = model.param("enc1b.cfi2.w").unwrap().map(|v| v * 1.5 + 0.1);
        model.set_param("enc1b.cfi2.w", w).unwrap();
        let (x, c) = inputs(&mut r, 1, 8, 8);
        let y1 = model.predict(&x, &c, 5, Some(1)).unwrap();
        let y2 = model.predict(&x, &c, 5, Some(2)).unwrap();
        assert!(y1.max_abs_diff(&y2) > 1e-4);
    }

    #[test]
    fn average_cfis_arithmetic() {
        let mut r = rng(4);
        let mut model = DenoiserModel::new_pretrain(
            DenoiserConfig { base_width: 8, time_dim: 16, n_cameras: 2 },
            &mut r,
        );
        let cin = model.param("enc1b.cfi1.w").unwrap().shape()[0];
        model.set_param("enc1b.cfi1.w", Tensor::full(vec![cin], 1.0)).unwrap();
        model.set_param("enc1b.cfi2.w", Tensor::full(vec![cin], 3.0)).unwrap();
        model.set_param("enc1b.cfi1.b", Tensor::full(vec![cin], 0.0)).unwrap();
        model.set_param("enc1b.cfi2.b", Tensor::full(vec![cin], 2.0)).unwrap();
        model.average_cfis().unwrap();
        assert!(model.param("enc1b.cfit.w").unwrap().data().iter().all(|&v| v == 2.0));
        assert!(model.param("enc1b.cfit.b").unwrap().data().iter().all(|&v| v == 1.0));
        // calling twice is an error
        assert!(model.average_cfis().is_err());
    }

    #[test]
    fn aligned_equals_pretrain_when_pathways_equal() {
        let mut r = rng(5);
        let mut model = DenoiserModel::new_pretrain(small_config(), &mut r);
        // set all pathways of each layer to the same random affine
        for (name, cin, _) in layer_specs(&model.config) {
            let w = Tensor::rand_uniform(vec![cin], 0.5, 1.5, &mut r);
            let b = Tensor::rand_uniform(vec![cin], -0.2, 0.2, &mut r);
            for i in 1..=model.config.n_cameras {
                model.set_param(&format!("{name}.cfi{i}.w"), w.clone()).unwrap();
                model.set_param(&format!("{name}.cfi{i}.b"), b.clone()).unwrap();
            }
        }
        let (x, c) = inputs(&mut r, 1, 8, 8);
        let yp = model.predict(&x, &c, 7, Some(2)).unwrap();
        let mut aligned = model.clone();
        aligned.average_cfis().unwrap();
        let ya = aligned.predict(&x, &c, 7, None).unwrap();
        assert!(yp.max_abs_diff(&ya) <= 1e-6);
    }

    #[test]
    fn merge_identity_affine_is_noop() {
        let mut r = rng(6);
        let kernel = Tensor::randn(vec![2, 3, 3, 3], &mut r);
        let bias = Tensor::randn(vec![2], &mut r);
        let w = Tensor::ones(vec![3]);
        let b = Tensor::zeros(vec![3]);
        let m = merge_cfi_conv(&w, &b, &kernel, &bias, 6, 6).unwrap();
        assert_eq!(m.kernel.data(), kernel.data());
        for o in 0..2 {
            for &v in &m.bias_field.data()[o * 36..(o + 1) * 36] {
                assert_eq!(v, bias.data()[o]);
            }
        }
    }

    #[test]
    fn merge_bias_field_border_values() {
        // all-ones 3x3 kernel, shift 1, bias 0: interior 9, edges 6, corners 4
        let kernel = Tensor::ones(vec![1, 1, 3, 3]);
        let bias = Tensor::zeros(vec![1]);
        let w = Tensor::ones(vec![1]);
        let b = Tensor::ones(vec![1]);
        let m = merge_cfi_conv(&w, &b, &kernel, &bias, 4, 4).unwrap();
        let f = m.bias_field.data();
        assert_eq!(f[0], 4.0); // corner
        assert_eq!(f[1], 6.0); // top edge
        assert_eq!(f[5], 9.0); // interior
        assert_eq!(f[15], 4.0); // opposite corner
    }

    #[test]
    fn merge_matches_unmerged_path() {
        let mut r = rng(7);
        for _ in 0..20 {
            let (cin, cout) = (3, 4);
            let x = Tensor::randn(vec![1, cin, 8, 8], &mut r);
            let kernel = Tensor::randn(vec![cout, cin, 3, 3], &mut r);
            let bias = Tensor::randn(vec![cout], &mut r);
            let w = Tensor::rand_uniform(vec![cin], -1.5, 1.5, &mut r);
            let b = Tensor::rand_uniform(vec![cin], -1.0, 1.0, &mut r);
            let m = merge_cfi_conv(&w, &b, &kernel, &bias, 8, 8).unwrap();

            let mut g = Graph::new();
            let xi = g.leaf(x.clone(), false);
            let wi = g.leaf(w.clone(), false);
            let bi = g.leaf(b.clone(), false);
            let ki = g.leaf(kernel.clone(), false);
            let ci = g.leaf(bias.clone(), false);
            let a = g.channel_affine(xi, wi, bi).unwrap();
            let unmerged = g.conv2d(a, ki, ci, PadMode::Zero, 1).unwrap();

            let mk = g.leaf(m.kernel.clone(), false);
            let mf = g.leaf(m.bias_field.clone(), false);
            let merged = g.conv2d_spatial_bias(xi, mk, mf).unwrap();
            let diff = g.value(merged).max_abs_diff(g.value(unmerged));
            assert!(diff <= 1e-5, "merged vs unmerged diff {diff}");
        }
    }

    #[test]
    fn reparameterized_model_matches_aligned() {
        let mut r = rng(8);
        let mut model = DenoiserModel::new_pretrain(small_config(), &mut r);
        // non-trivial CFIs
        for (name, cin, _) in layer_specs(&model.config) {
            for i in 1..=model.config.n_cameras {
                model
                    .set_param(&format!("{name}.cfi{i}.w"), Tensor::rand_uniform(vec![cin], 0.5, 1.5, &mut r))
                    .unwrap();
                model
                    .set_param(&format!("{name}.cfi{i}.b"), Tensor::rand_uniform(vec![cin], -0.3, 0.3, &mut r))
                    .unwrap();
            }
        }
        model.average_cfis().unwrap();
        let (x, c) = inputs(&mut r, 1, 12, 8);
        let ya = model.predict(&x, &c, 17, None).unwrap();
        let mut merged = model.clone();
        merged.reparameterize().unwrap();
        let ym = merged.predict(&x, &c, 17, None).unwrap();
        assert!(ya.max_abs_diff(&ym) <= 1e-5);
        // merging twice is an error
        assert!(merged.clone().reparameterize().is_err());
    }

    #[test]
    fn merged_graph_has_fewer_ops() {
        let mut r = rng(9);
        let mut model = DenoiserModel::new_pretrain(small_config(), &mut r);
        model.average_cfis().unwrap();
        let (x, c) = inputs(&mut r, 1, 8, 8);
        let count_ops = |m: &DenoiserModel| {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone(), false);
            let ci = g.leaf(c.clone(), false);
            m.forward(&mut g, xi, ci, 3, None).unwrap();
            g.op_count()
        };
        let aligned_ops = count_ops(&model);
        let mut merged = model.clone();
        merged.reparameterize().unwrap();
        let merged_ops = count_ops(&merged);
        assert!(merged_ops < aligned_ops, "{merged_ops} vs {aligned_ops}");
    }

    #[test]
    fn freeze_gates_trainability() {
        let mut r = rng(10);
        let mut model = DenoiserModel::new_pretrain(small_config(), &mut r);
        assert!(model.freeze_convs().is_err()); // only in aligned mode
        model.average_cfis().unwrap();
        model.freeze_convs().unwrap();
        assert!(model.is_trainable("enc1a.cfit.w"));
        assert!(!model.is_trainable("enc1a.kernel"));
        assert!(!model.is_trainable("time.w"));
        model.unfreeze_convs();
        assert!(model.is_trainable("enc1a.kernel"));
    }

    #[test]
    fn from_parts_validates_names() {
        let mut r = rng(11);
        let model = DenoiserModel::new_pretrain(small_config(), &mut r);
        let ok = DenoiserModel::from_parts(
            small_config(),
            Mode::Pretrain,
            false,
            model.params().clone(),
        );
        assert!(ok.is_ok());
        let mut bad = model.params().clone();
        bad.remove("enc1a.kernel");
        assert!(DenoiserModel::from_parts(small_config(), Mode::Pretrain, false, bad).is_err());
    }
}
