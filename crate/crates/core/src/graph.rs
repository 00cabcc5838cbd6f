//! Reverse-mode automatic differentiation over a closed primitive set.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its inputs
//! and cached output. [`Graph::backward`] walks the tape in reverse and
//! accumulates an exact adjoint for every parameter leaf. The primitive set
//! is exactly what the denoiser and color corrector need; there is no
//! broadcasting beyond the documented per-channel forms.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Zero padding of (k-1)/2 on each side; preserves H,W at stride 1.
    Zero,
    /// No padding.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { pad: PadMode, stride: usize },
    /// Conv2d with a spatially varying bias plane per output channel
    /// (the deployed form of an affine merged into a conv). Stride 1, zero pad.
    Conv2dSpatialBias,
    ChannelAffine,
    /// Per-(n,c) scale and shift: out = g[n,c]*x + v[n,c].
    Modulate,
    Relu,
    Dense,
    GlobalAvgPool,
    AvgPool2,
    UpsampleNearest2,
    Add,
    Mul,
    ConcatChannels,
    Scale(f32),
    Abs,
    Mean,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
    param: bool,
}

/// Gradients for one backward pass, indexed by the node ids of the graph
/// that produced them.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of non-leaf nodes, i.e. actual runtime operations recorded.
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { op, inputs, value, needs_grad, param: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input tensor. `param` marks it as a trainable leaf whose
    /// gradient is produced by [`Graph::backward`]; non-parameter leaves are
    /// skipped during the backward pass.
    pub fn leaf(&mut self, value: Tensor, param: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            needs_grad: param,
            param,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        pad: PadMode,
        stride: usize,
    ) -> Result<NodeId> {
        let (xs, ks, bs) = (
            self.value(x).shape().to_vec(),
            self.value(kernel).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        validate_conv("conv2d", &xs, &ks, stride)?;
        if bs != [ks[0]] {
            return Err(Error::shape("conv2d", format!("bias {bs:?} vs Cout {}", ks[0])));
        }
        let value = conv2d_forward(self.value(x), self.value(kernel), self.value(bias).data(), pad, stride);
        Ok(self.push(Op::Conv2d { pad, stride }, vec![x, kernel, bias], value))
    }

    /// Conv2d (stride 1, zero pad) whose bias is a full [Cout,H,W] plane.
    pub fn conv2d_spatial_bias(&mut self, x: NodeId, kernel: NodeId, bias_field: NodeId) -> Result<NodeId> {
        let (xs, ks) = (self.value(x).shape().to_vec(), self.value(kernel).shape().to_vec());
        validate_conv("conv2d_spatial_bias", &xs, &ks, 1)?;
        let bf = self.value(bias_field).shape().to_vec();
        if bf != [ks[0], xs[2], xs[3]] {
            return Err(Error::shape(
                "conv2d_spatial_bias",
                format!("bias field {bf:?}, expected [{}, {}, {}]", ks[0], xs[2], xs[3]),
            ));
        }
        let mut value = conv2d_forward(self.value(x), self.value(kernel), &vec![0.0; ks[0]], PadMode::Zero, 1);
        {
            let (n, co, oh, ow) = (xs[0], ks[0], xs[2], xs[3]);
            let plane = co * oh * ow;
            let bfd = self.value(bias_field).data().to_vec();
            let vd = value.data_mut();
            for ni in 0..n {
                for (v, b) in vd[ni * plane..(ni + 1) * plane].iter_mut().zip(bfd.iter()) {
                    *v += *b;
                }
            }
        }
        Ok(self.push(Op::Conv2dSpatialBias, vec![x, kernel, bias_field], value))
    }

    /// out[n,c,h,w] = w[c]*x[n,c,h,w] + b[c]
    pub fn channel_affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("channel_affine", format!("x must be 4-D, got {xs:?}")));
        }
        let c = xs[1];
        if self.value(w).shape() != [c] || self.value(b).shape() != [c] {
            return Err(Error::shape(
                "channel_affine",
                format!(
                    "w {:?} / b {:?} vs C={c}",
                    self.value(w).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let (wd, bd) = (self.value(w).data().to_vec(), self.value(b).data().to_vec());
        let xt = self.value(x);
        let hw = xs[2] * xs[3];
        let mut out = xt.clone();
        for ni in 0..xs[0] {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for v in &mut out.data_mut()[base..base + hw] {
                    *v = wd[ci] * *v + bd[ci];
                }
            }
        }
        Ok(self.push(Op::ChannelAffine, vec![x, w, b], out))
    }

    /// out[n,c,h,w] = g[n,c]*x[n,c,h,w] + v[n,c]
    pub fn modulate(&mut self, x: NodeId, g: NodeId, v: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("modulate", format!("x must be 4-D, got {xs:?}")));
        }
        let nc = [xs[0], xs[1]];
        if self.value(g).shape() != nc || self.value(v).shape() != nc {
            return Err(Error::shape(
                "modulate",
                format!("g {:?} / v {:?} vs {nc:?}", self.value(g).shape(), self.value(v).shape()),
            ));
        }
        let gd = self.value(g).data().to_vec();
        let vd = self.value(v).data().to_vec();
        let hw = xs[2] * xs[3];
        let mut out = self.value(x).clone();
        for i in 0..xs[0] * xs[1] {
            for val in &mut out.data_mut()[i * hw..(i + 1) * hw] {
                *val = gd[i] * *val + vd[i];
            }
        }
        Ok(self.push(Op::Modulate, vec![x, g, v], out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu, vec![x], value)
    }

    /// out[n,o] = b[o] + sum_i w[o,i]*x[n,i]
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(Error::shape("dense", format!("x {xs:?} vs w {ws:?}")));
        }
        if self.value(b).shape() != [ws[0]] {
            return Err(Error::shape("dense", format!("b {:?} vs Cout {}", self.value(b).shape(), ws[0])));
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[0]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0f32; n * cout];
        for ni in 0..n {
            for o in 0..cout {
                let mut acc = bd[o] as f64;
                for i in 0..cin {
                    acc += (wd[o * cin + i] * xd[ni * cin + i]) as f64;
                }
                out[ni * cout + o] = acc as f32;
            }
        }
        let value = Tensor::new(vec![n, cout], out).unwrap();
        Ok(self.push(Op::Dense, vec![x, w, b], value))
    }

    /// [N,C,H,W] -> [N,C] spatial mean, accumulated in f64.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; xs[0] * xs[1]];
        for (i, o) in out.iter_mut().enumerate() {
            let s: f64 = xd[i * hw..(i + 1) * hw].iter().map(|&v| v as f64).sum();
            *o = (s / hw as f64) as f32;
        }
        let value = Tensor::new(vec![xs[0], xs[1]], out).unwrap();
        Ok(self.push(Op::GlobalAvgPool, vec![x], value))
    }

    /// Factor-2 mean pooling; H and W must be even.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("{xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        for nc in 0..n * c {
            let src = &xd[nc * h * w..];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = 2 * oy * w + 2 * ox;
                    let s = src[i] as f64 + src[i + 1] as f64 + src[i + w] as f64 + src[i + w + 1] as f64;
                    dst[oy * ow + ox] = (s * 0.25) as f32;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out).unwrap();
        Ok(self.push(Op::AvgPool2, vec![x], value))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample_nearest2", format!("{xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; n * c * 4 * h * w];
        for nc in 0..n * c {
            let src = &xd[nc * h * w..];
            let dst = &mut out[nc * 4 * h * w..(nc + 1) * 4 * h * w];
            for y in 0..h {
                for x_ in 0..w {
                    let v = src[y * w + x_];
                    let base = 2 * y * 2 * w + 2 * x_;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + 2 * w] = v;
                    dst[base + 2 * w + 1] = v;
                }
            }
        }
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out).unwrap();
        Ok(self.push(Op::UpsampleNearest2, vec![x], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul, vec![a, b], value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_channels", "empty input list"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() != 4 {
            return Err(Error::shape("concat_channels", format!("{first:?}")));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::shape("concat_channels", format!("{s:?} vs [{n},_,{h},{w}]")));
            }
            c_total += s[1];
        }
        let mut out = vec![0.0f32; n * c_total * h * w];
        let hw = h * w;
        for ni in 0..n {
            let mut c_off = 0;
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                let src = &t.data()[ni * c * hw..(ni + 1) * c * hw];
                out[(ni * c_total + c_off) * hw..(ni * c_total + c_off + c) * hw].copy_from_slice(src);
                c_off += c;
            }
        }
        let value = Tensor::new(vec![n, c_total, h, w], out).unwrap();
        Ok(self.push(Op::ConcatChannels, parts.to_vec(), value))
    }

    pub fn scale(&mut self, x: NodeId, s: f32) -> NodeId {
        let value = self.value(x).scale(s);
        self.push(Op::Scale(s), vec![x], value)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f32::abs);
        self.push(Op::Abs, vec![x], value)
    }

    /// Full reduction to a scalar mean, accumulated in f64.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).mean() as f32);
        self.push(Op::Mean, vec![x], value)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// parameter leaf (and intermediates that required them).
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_input_grads(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Zero-fill parameters that the loss never touched.
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.param && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Grads { grads })
    }

    fn accumulate_input_grads(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let ins = &node.inputs;
        let want = |s: &Self, id: NodeId| s.nodes[id.0].needs_grad;
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(acc) => {
                    let sum = acc.add(&delta).expect("gradient shape");
                    *acc = sum;
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { pad, stride } => {
                let (x, k, b) = (ins[0], ins[1], ins[2]);
                let xv = self.value(x);
                let kv = self.value(k);
                if want(self, x) {
                    add_to(grads, x, conv2d_backward_input(g, kv, xv.shape(), pad, stride));
                }
                if want(self, k) {
                    add_to(grads, k, conv2d_backward_kernel(g, xv, kv.shape(), pad, stride));
                }
                if want(self, b) {
                    add_to(grads, b, conv2d_backward_bias(g));
                }
            }
            Op::Conv2dSpatialBias => {
                let (x, k, bf) = (ins[0], ins[1], ins[2]);
                let xv = self.value(x);
                let kv = self.value(k);
                if want(self, x) {
                    add_to(grads, x, conv2d_backward_input(g, kv, xv.shape(), PadMode::Zero, 1));
                }
                if want(self, k) {
                    add_to(grads, k, conv2d_backward_kernel(g, xv, kv.shape(), PadMode::Zero, 1));
                }
                if want(self, bf) {
                    // sum over batch
                    let gs = g.shape();
                    let plane = gs[1] * gs[2] * gs[3];
                    let mut out = vec![0.0f32; plane];
                    for ni in 0..gs[0] {
                        for (o, v) in out.iter_mut().zip(&g.data()[ni * plane..(ni + 1) * plane]) {
                            *o += *v;
                        }
                    }
                    add_to(grads, bf, Tensor::new(vec![gs[1], gs[2], gs[3]], out).unwrap());
                }
            }
            Op::ChannelAffine => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let xv = self.value(x);
                let wv = self.value(w);
                let xs = xv.shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                if want(self, x) {
                    let mut dx = g.clone();
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let wc = wv.data()[ci];
                            for v in &mut dx.data_mut()[base..base + hw] {
                                *v *= wc;
                            }
                        }
                    }
                    add_to(grads, x, dx);
                }
                if want(self, w) {
                    let mut dw = vec![0.0f64; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for j in 0..hw {
                                dw[ci] += (g.data()[base + j] * xv.data()[base + j]) as f64;
                            }
                        }
                    }
                    add_to(grads, w, Tensor::new(vec![c], dw.iter().map(|&v| v as f32).collect()).unwrap());
                }
                if want(self, b) {
                    let mut db = vec![0.0f64; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            db[ci] += g.data()[base..base + hw].iter().map(|&v| v as f64).sum::<f64>();
                        }
                    }
                    add_to(grads, b, Tensor::new(vec![c], db.iter().map(|&v| v as f32).collect()).unwrap());
                }
            }
            Op::Modulate => {
                let (x, gm, vm) = (ins[0], ins[1], ins[2]);
                let xv = self.value(x);
                let gv = self.value(gm);
                let xs = xv.shape();
                let (nc, hw) = (xs[0] * xs[1], xs[2] * xs[3]);
                if want(self, x) {
                    let mut dx = g.clone();
                    for i in 0..nc {
                        let s = gv.data()[i];
                        for v in &mut dx.data_mut()[i * hw..(i + 1) * hw] {
                            *v *= s;
                        }
                    }
                    add_to(grads, x, dx);
                }
                if want(self, gm) {
                    let mut dg = vec![0.0f64; nc];
                    for i in 0..nc {
                        for j in 0..hw {
                            dg[i] += (g.data()[i * hw + j] * xv.data()[i * hw + j]) as f64;
                        }
                    }
                    add_to(
                        grads,
                        gm,
                        Tensor::new(vec![xs[0], xs[1]], dg.iter().map(|&v| v as f32).collect()).unwrap(),
                    );
                }
                if want(self, vm) {
                    let mut dv = vec![0.0f64; nc];
                    for i in 0..nc {
                        dv[i] += g.data()[i * hw..(i + 1) * hw].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    add_to(
                        grads,
                        vm,
                        Tensor::new(vec![xs[0], xs[1]], dv.iter().map(|&v| v as f32).collect()).unwrap(),
                    );
                }
            }
            Op::Relu => {
                let x = ins[0];
                if want(self, x) {
                    let xv = self.value(x);
                    let dx = Tensor::new(
                        xv.shape().to_vec(),
                        xv.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x_, &g_)| if x_ > 0.0 { g_ } else { 0.0 })
                            .collect(),
                    )
                    .unwrap();
                    add_to(grads, x, dx);
                }
            }
            Op::Dense => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let xv = self.value(x);
                let wv = self.value(w);
                let (n, cin) = (xv.shape()[0], xv.shape()[1]);
                let cout = wv.shape()[0];
                if want(self, x) {
                    let mut dx = vec![0.0f32; n * cin];
                    for ni in 0..n {
                        for o in 0..cout {
                            let go = g.data()[ni * cout + o];
                            for i in 0..cin {
                                dx[ni * cin + i] += go * wv.data()[o * cin + i];
                            }
                        }
                    }
                    add_to(grads, x, Tensor::new(vec![n, cin], dx).unwrap());
                }
                if want(self, w) {
                    let mut dw = vec![0.0f64; cout * cin];
                    for ni in 0..n {
                        for o in 0..cout {
                            let go = g.data()[ni * cout + o] as f64;
                            for i in 0..cin {
                                dw[o * cin + i] += go * xv.data()[ni * cin + i] as f64;
                            }
                        }
                    }
                    add_to(
                        grads,
                        w,
                        Tensor::new(vec![cout, cin], dw.iter().map(|&v| v as f32).collect()).unwrap(),
                    );
                }
                if want(self, b) {
                    let mut db = vec![0.0f64; cout];
                    for ni in 0..n {
                        for o in 0..cout {
                            db[o] += g.data()[ni * cout + o] as f64;
                        }
                    }
                    add_to(grads, b, Tensor::new(vec![cout], db.iter().map(|&v| v as f32).collect()).unwrap());
                }
            }
            Op::GlobalAvgPool => {
                let x = ins[0];
                if want(self, x) {
                    let xs = self.value(x).shape().to_vec();
                    let hw = xs[2] * xs[3];
                    let inv = 1.0 / hw as f32;
                    let mut dx = vec![0.0f32; xs.iter().product()];
                    for i in 0..xs[0] * xs[1] {
                        let gv = g.data()[i] * inv;
                        for v in &mut dx[i * hw..(i + 1) * hw] {
                            *v = gv;
                        }
                    }
                    add_to(grads, x, Tensor::new(xs, dx).unwrap());
                }
            }
            Op::AvgPool2 => {
                let x = ins[0];
                if want(self, x) {
                    let xs = self.value(x).shape().to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = vec![0.0f32; xs.iter().product()];
                    for nc in 0..xs[0] * xs[1] {
                        let gs = &g.data()[nc * oh * ow..(nc + 1) * oh * ow];
                        let d = &mut dx[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gs[oy * ow + ox] * 0.25;
                                let i = 2 * oy * w + 2 * ox;
                                d[i] += gv;
                                d[i + 1] += gv;
                                d[i + w] += gv;
                                d[i + w + 1] += gv;
                            }
                        }
                    }
                    add_to(grads, x, Tensor::new(xs, dx).unwrap());
                }
            }
            Op::UpsampleNearest2 => {
                let x = ins[0];
                if want(self, x) {
                    let xs = self.value(x).shape().to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let mut dx = vec![0.0f32; xs.iter().product()];
                    for nc in 0..xs[0] * xs[1] {
                        let gs = &g.data()[nc * 4 * h * w..(nc + 1) * 4 * h * w];
                        let d = &mut dx[nc * h * w..(nc + 1) * h * w];
                        for y in 0..h {
                            for x_ in 0..w {
                                let base = 2 * y * 2 * w + 2 * x_;
                                d[y * w + x_] =
                                    gs[base] + gs[base + 1] + gs[base + 2 * w] + gs[base + 2 * w + 1];
                            }
                        }
                    }
                    add_to(grads, x, Tensor::new(xs, dx).unwrap());
                }
            }
            Op::Add => {
                for &i in ins {
                    if want(self, i) {
                        add_to(grads, i, g.clone());
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (ins[0], ins[1]);
                if want(self, a) {
                    add_to(grads, a, g.mul(self.value(b)).unwrap());
                }
                if want(self, b) {
                    add_to(grads, b, g.mul(self.value(a)).unwrap());
                }
            }
            Op::ConcatChannels => {
                let os = self.value(NodeId(idx)).shape().to_vec();
                let (n, c_total, hw) = (os[0], os[1], os[2] * os[3]);
                let mut c_off = 0;
                for &p in ins {
                    let ps = self.value(p).shape().to_vec();
                    let c = ps[1];
                    if want(self, p) {
                        let mut dp = vec![0.0f32; ps.iter().product()];
                        for ni in 0..n {
                            let src = &g.data()[(ni * c_total + c_off) * hw..(ni * c_total + c_off + c) * hw];
                            dp[ni * c * hw..(ni + 1) * c * hw].copy_from_slice(src);
                        }
                        add_to(grads, p, Tensor::new(ps, dp).unwrap());
                    }
                    c_off += c;
                }
            }
            Op::Scale(s) => {
                let x = ins[0];
                if want(self, x) {
                    add_to(grads, x, g.scale(s));
                }
            }
            Op::Abs => {
                let x = ins[0];
                if want(self, x) {
                    let xv = self.value(x);
                    let dx = Tensor::new(
                        xv.shape().to_vec(),
                        xv.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x_, &g_)| {
                                if x_ > 0.0 {
                                    g_
                                } else if x_ < 0.0 {
                                    -g_
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    )
                    .unwrap();
                    add_to(grads, x, dx);
                }
            }
            Op::Mean => {
                let x = ins[0];
                if want(self, x) {
                    let xs = self.value(x).shape().to_vec();
                    let n: usize = xs.iter().product();
                    let gv = g.data()[0] / n as f32;
                    add_to(grads, x, Tensor::full(xs, gv));
                }
            }
        }
    }
}

/// Sinusoidal timestep embedding of dimension `dim` (must be even),
/// replicated across `n` rows.
pub fn sinusoidal_embed(t: usize, dim: usize, n: usize) -> Tensor {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even, got {dim}");
    let half = dim / 2;
    let mut row = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(i as f64) * (10000.0f64).ln() / (half as f64 - 1.0).max(1.0)).exp();
        let arg = t as f64 * freq;
        row[2 * i] = arg.sin() as f32;
        row[2 * i + 1] = arg.cos() as f32;
    }
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        data.extend_from_slice(&row);
    }
    Tensor::new(vec![n, dim], data).unwrap()
}

fn validate_conv(op: &'static str, xs: &[usize], ks: &[usize], stride: usize) -> Result<()> {
    if xs.len() != 4 || ks.len() != 4 {
        return Err(Error::shape(op, format!("x {xs:?}, kernel {ks:?}")));
    }
    if ks[1] != xs[1] {
        return Err(Error::shape(op, format!("Cin mismatch: x has {}, kernel wants {}", xs[1], ks[1])));
    }
    if ks[2] != ks[3] || !(ks[2] == 1 || ks[2] == 3) {
        return Err(Error::invalid(op, format!("kernel must be 1x1 or 3x3, got {}x{}", ks[2], ks[3])));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::invalid(op, format!("stride must be 1 or 2, got {stride}")));
    }
    Ok(())
}

fn conv_out_dims(h: usize, w: usize, k: usize, pad: PadMode, stride: usize) -> (usize, usize, usize) {
    let p = match pad {
        PadMode::Zero => (k - 1) / 2,
        PadMode::Valid => 0,
    };
    let oh = (h + 2 * p - k) / stride + 1;
    let ow = (w + 2 * p - k) / stride + 1;
    (oh, ow, p)
}

fn conv2d_forward(x: &Tensor, kernel: &Tensor, bias: &[f32], pad: PadMode, stride: usize) -> Tensor {
    let xs = x.shape();
    let ks = kernel.shape();
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ks[0], ks[2]);
    let (oh, ow, p) = conv_out_dims(h, w, k, pad, stride);
    let mut out = vec![0.0f32; n * cout * oh * ow];
    let xd = x.data();
    let kd = kernel.data();
    for ni in 0..n {
        for co in 0..cout {
            let o_base = (ni * cout + co) * oh * ow;
            out[o_base..o_base + oh * ow].fill(bias[co]);
            for ci in 0..cin {
                let x_base = (ni * cin + ci) * h * w;
                let k_base = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let kv = kd[k_base + ky * k + kx];
                        if kv == 0.0 && k == 3 {
                            continue;
                        }
                        // oy*stride - p + ky must be in [0,h)
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * w;
                            let o_row = o_base + oy * ow;
                            if stride == 1 {
                                // contiguous run of valid ox
                                let lo = p.saturating_sub(kx);
                                let hi = (w + p - kx).min(ow);
                                let shift = kx as isize - p as isize;
                                // lo >= p-kx guarantees lo+shift >= 0
                                let xr = &xd[((x_row + lo) as isize + shift) as usize..];
                                let or = &mut out[o_row + lo..o_row + hi];
                                for (o, xv) in or.iter_mut().zip(xr.iter()) {
                                    *o += kv * *xv;
                                }
                            } else {
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - p as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    out[o_row + ox] += kv * xd[x_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

fn conv2d_backward_input(g: &Tensor, kernel: &Tensor, x_shape: &[usize], pad: PadMode, stride: usize) -> Tensor {
    let ks = kernel.shape();
    let (n, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (cout, k) = (ks[0], ks[2]);
    let (oh, ow, p) = conv_out_dims(h, w, k, pad, stride);
    let mut dx = vec![0.0f32; n * cin * h * w];
    let gd = g.data();
    let kd = kernel.data();
    for ni in 0..n {
        for co in 0..cout {
            let g_base = (ni * cout + co) * oh * ow;
            for ci in 0..cin {
                let x_base = (ni * cin + ci) * h * w;
                let k_base = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let kv = kd[k_base + ky * k + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * w;
                            let g_row = g_base + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dx[x_row + ix as usize] += kv * gd[g_row + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx).unwrap()
}

fn conv2d_backward_kernel(g: &Tensor, x: &Tensor, k_shape: &[usize], pad: PadMode, stride: usize) -> Tensor {
    let xs = x.shape();
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (k_shape[0], k_shape[2]);
    let (oh, ow, p) = conv_out_dims(h, w, k, pad, stride);
    let mut dk = vec![0.0f64; cout * cin * k * k];
    let gd = g.data();
    let xd = x.data();
    for ni in 0..n {
        for co in 0..cout {
            let g_base = (ni * cout + co) * oh * ow;
            for ci in 0..cin {
                let x_base = (ni * cin + ci) * h * w;
                let k_base = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0f64;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * w;
                            let g_row = g_base + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += (gd[g_row + ox] * xd[x_row + ix as usize]) as f64;
                            }
                        }
                        dk[k_base + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(k_shape.to_vec(), dk.iter().map(|&v| v as f32).collect()).unwrap()
}

fn conv2d_backward_bias(g: &Tensor) -> Tensor {
    let gs = g.shape();
    let (n, cout, hw) = (gs[0], gs[1], gs[2] * gs[3]);
    let mut db = vec![0.0f64; cout];
    for ni in 0..n {
        for co in 0..cout {
            let base = (ni * cout + co) * hw;
            db[co] += g.data()[base..base + hw].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    Tensor::new(vec![cout], db.iter().map(|&v| v as f32).collect()).unwrap()
}
