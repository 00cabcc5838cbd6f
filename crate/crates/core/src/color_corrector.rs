//! Global color-shift correction applied to the clean-image estimate during
//! the reverse process.
//!
//! A strictly per-pixel base network (1x1 convolutions) is modulated by
//! global features: a conditional network of three stride-2 convolutions
//! pools the input into one feature vector, the timestep embedding is added,
//! and two dense heads emit a scaling factor and an offset that rescale the
//! first base layer's activations. The base network's output is applied as a
//! residual on top of the input.

use crate::error::{Error, Result};
use crate::graph::{sinusoidal_embed, Graph, NodeId, PadMode};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

pub const CC_CHANNELS: usize = 4;
const BASE_WIDTH: usize = 16;
const COND_WIDTHS: [usize; 3] = [8, 8, 16];
pub const CC_TIME_DIM: usize = 16;
/// Three stride-2 stages need at least this much resolution.
pub const CC_MIN_DIM: usize = 8;

#[derive(Debug, Clone)]
pub struct ColorCorrector {
    params: BTreeMap<String, Tensor>,
}

impl ColorCorrector {
    /// Fresh corrector. The modulation heads start at identity
    /// (scale 1, offset 0) so the conditional pathway fades in smoothly.
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let mut params = BTreeMap::new();
        let mut conv = |name: &str, cout: usize, cin: usize, k: usize, rng: &mut R| {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            params.insert(
                format!("{name}.kernel"),
                Tensor::new(vec![cout, cin, k, k], (0..cout * cin * k * k).map(|_| dist.sample(rng) as f32).collect())
                    .unwrap(),
            );
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        };
        conv("base1", BASE_WIDTH, CC_CHANNELS, 1, rng);
        conv("base2", BASE_WIDTH, BASE_WIDTH, 1, rng);
        conv("base3", CC_CHANNELS, BASE_WIDTH, 1, rng);
        conv("cond1", COND_WIDTHS[0], CC_CHANNELS, 3, rng);
        conv("cond2", COND_WIDTHS[1], COND_WIDTHS[0], 3, rng);
        conv("cond3", COND_WIDTHS[2], COND_WIDTHS[1], 3, rng);
        // keep the initial residual small so correction starts near identity
        let k3 = params["base3.kernel"].scale(0.1);
        params.insert("base3.kernel".into(), k3);
        params.insert("gamma.w".into(), Tensor::zeros(vec![BASE_WIDTH, COND_WIDTHS[2]]));
        params.insert("gamma.b".into(), Tensor::ones(vec![BASE_WIDTH]));
        params.insert("nu.w".into(), Tensor::zeros(vec![BASE_WIDTH, COND_WIDTHS[2]]));
        params.insert("nu.b".into(), Tensor::zeros(vec![BASE_WIDTH]));
        ColorCorrector { params }
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

    pub fn from_parts(params: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = ColorCorrector::new(&mut rng);
        let got: Vec<&String> = params.keys().collect();
        let want: Vec<&String> = template.params.keys().collect();
        if got != want {
            return Err(Error::Data(format!(
                "color corrector parameter set mismatch: got {got:?}, want {want:?}"
            )));
        }
        for (name, t) in &params {
            if t.shape() != template.params[name].shape() {
                return Err(Error::Data(format!(
                    "color corrector parameter {name} has shape {:?}, want {:?}",
                    t.shape(),
                    template.params[name].shape()
                )));
            }
        }
        Ok(ColorCorrector { params })
    }

    fn leaf_param(&self, g: &mut Graph, name: &str, binding: &mut Vec<(String, NodeId)>) -> NodeId {
        let id = g.leaf(self.params[name].clone(), true);
        binding.push((name.to_string(), id));
        id
    }

    /// Global modulation coefficients from the input image and timestep.
    pub fn cond_features(
        &self,
        g: &mut Graph,
        x: NodeId,
        t: usize,
        binding: &mut Vec<(String, NodeId)>,
    ) -> Result<(NodeId, NodeId)> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != CC_CHANNELS {
            return Err(Error::shape("cond_features", format!("{xs:?}")));
        }
        if xs[2] < CC_MIN_DIM || xs[3] < CC_MIN_DIM {
            return Err(Error::shape(
                "cond_features",
                format!("input {}x{} too small for three stride-2 stages", xs[2], xs[3]),
            ));
        }
        let mut h = x;
        for name in ["cond1", "cond2", "cond3"] {
            let k = self.leaf_param(g, &format!("{name}.kernel"), binding);
            let b = self.leaf_param(g, &format!("{name}.bias"), binding);
            let c = g.conv2d(h, k, b, PadMode::Zero, 2)?;
            h = g.relu(c);
        }
        let pooled = g.global_avg_pool(h)?;
        let emb = g.leaf(sinusoidal_embed(t, CC_TIME_DIM, xs[0]), false);
        let mixed = g.add(pooled, emb)?;
        let gw = self.leaf_param(g, "gamma.w", binding);
        let gb = self.leaf_param(g, "gamma.b", binding);
        let gamma = g.dense(mixed, gw, gb)?;
        let nw = self.leaf_param(g, "nu.w", binding);
        let nb = self.leaf_param(g, "nu.b", binding);
        let nu = g.dense(mixed, nw, nb)?;
        Ok((gamma, nu))
    }

    /// Per-pixel base network under explicit modulation coefficients.
    pub fn base_with(
        &self,
        g: &mut Graph,
        x: NodeId,
        gamma: NodeId,
        nu: NodeId,
        binding: &mut Vec<(String, NodeId)>,
    ) -> Result<NodeId> {
        let k1 = self.leaf_param(g, "base1.kernel", binding);
        let b1 = self.leaf_param(g, "base1.bias", binding);
        let c1 = g.conv2d(x, k1, b1, PadMode::Zero, 1)?;
        let r1 = g.relu(c1);
        let modulated = g.modulate(r1, gamma, nu)?;
        let k2 = self.leaf_param(g, "base2.kernel", binding);
        let b2 = self.leaf_param(g, "base2.bias", binding);
        let c2 = g.conv2d(modulated, k2, b2, PadMode::Zero, 1)?;
        let r2 = g.relu(c2);
        let k3 = self.leaf_param(g, "base3.kernel", binding);
        let b3 = self.leaf_param(g, "base3.bias", binding);
        g.conv2d(r2, k3, b3, PadMode::Zero, 1)
    }

    /// Full correction: conditional features modulate the base network, and
    /// the base network's output is added to the input as a residual. Starting
    /// near the identity map matters at small training budgets — the corrector
    /// only has to learn the color shift, not reproduce the whole image.
    pub fn correct_on(
        &self,
        g: &mut Graph,
        x: NodeId,
        t: usize,
        binding: &mut Vec<(String, NodeId)>,
    ) -> Result<NodeId> {
        let (gamma, nu) = self.cond_features(g, x, t, binding)?;
        let delta = self.base_with(g, x, gamma, nu, binding)?;
        g.add(x, delta)
    }

    /// Convenience wrapper over [`ColorCorrector::correct_on`] for a single
    /// [4,h,w] image outside a training graph.
    pub fn correct(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let s = x.shape().to_vec();
        if s.len() != 3 || s[0] != CC_CHANNELS {
            return Err(Error::shape("correct", format!("{s:?}")));
        }
        let mut g = Graph::new();
        let xi = g.leaf(Tensor::new(vec![1, s[0], s[1], s[2]], x.data().to_vec())?, false);
        let mut binding = Vec::new();
        let out = self.correct_on(&mut g, xi, t, &mut binding)?;
        Tensor::new(s, g.value(out).data().to_vec())
    }
}

use rand::SeedableRng;
