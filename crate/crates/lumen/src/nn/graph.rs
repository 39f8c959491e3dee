//! Define-by-run computation tape with reverse-mode differentiation.
//!
//! Each builder method validates shapes (violations surface as `Config`
//! errors per the operation contracts), evaluates the op eagerly, and records
//! enough metadata to replay the backward pass. Convolutions go through
//! im2col + GEMM; the im2col buffer is recomputed during backward instead of
//! cached, trading a little arithmetic for a much smaller peak footprint.

use super::params::{GradStore, ParamId, ParamStore};
use super::scalar::Scalar;
use crate::error::{config_err, Result};
use ndarray::{ArrayD, IxDyn};

pub type NodeId = usize;

const IN_EPS: f64 = 1e-5;
/// log-stabilization epsilon used by every adversarial loss
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    ReflectPad { x: NodeId, pad: usize },
    ZeroPad { x: NodeId, pad: usize },
    InstanceNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Relu { x: NodeId },
    LeakyRelu { x: NodeId, slope: f64 },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Upsample2x { x: NodeId },
    ConcatC { a: NodeId, b: NodeId },
    BroadcastVec { z: NodeId, h: usize, w: usize },
    Add { a: NodeId, b: NodeId },
    L1Mean { a: NodeId, b: NodeId },
    MeanLogEps { x: NodeId },
    MeanLog1mEps { x: NodeId },
    MeanSquare { x: NodeId },
    Affine { x: NodeId, mul: f64 },
    WeightedSum { terms: Vec<(NodeId, f64)> },
}

struct Node<E> {
    value: ArrayD<E>,
    op: Op,
    requires_grad: bool,
    tag: Option<&'static str>,
}

pub struct Graph<'p, E: Scalar> {
    params: &'p ParamStore<E>,
    nodes: Vec<Node<E>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p, E: Scalar> Graph<'p, E> {
    pub fn new(params: &'p ParamStore<E>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    fn push(&mut self, value: ArrayD<E>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            tag: None,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<E> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value.iter().next().unwrap().cast_f64()
    }

    pub fn tag(&mut self, id: NodeId, tag: &'static str) {
        self.nodes[id].tag = Some(tag);
    }

    pub fn tag_of(&self, id: NodeId) -> Option<&'static str> {
        self.nodes[id].tag
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives gradient.
    pub fn constant(&mut self, value: ArrayD<E>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let v = self.params.get(id).value.clone();
        let n = self.push(v, Op::Param(id), true);
        self.param_nodes[id.0] = Some(n);
        n
    }

    // ---- feature-map ops -------------------------------------------------

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        let bs = self.nodes[b].value.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return config_err(format!("conv2d expects 4-d input/weight, got {xs:?}/{ws:?}"));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != wcin {
            return config_err(format!(
                "conv2d channel mismatch: input has {cin}, weight expects {wcin}"
            ));
        }
        if bs != [cout] {
            return config_err(format!("conv2d bias shape {bs:?} != [{cout}]"));
        }
        if stride == 0 || h < kh || wd < kw {
            return config_err(format!(
                "conv2d degenerate geometry: input {h}x{wd}, kernel {kh}x{kw}, stride {stride}"
            ));
        }
        let ho = (h - kh) / stride + 1;
        let wo = (wd - kw) / stride + 1;
        let k = cin * kh * kw;
        let p = ho * wo;
        let xv = self.nodes[x].value.as_slice().unwrap();
        let wv = self.nodes[w].value.as_slice().unwrap();
        let bv = self.nodes[b].value.as_slice().unwrap();
        let mut out = vec![E::zero(); n * cout * p];
        let mut col = vec![E::zero(); k * p];
        for ni in 0..n {
            im2col(
                &xv[ni * cin * h * wd..(ni + 1) * cin * h * wd],
                cin, h, wd, kh, kw, stride, ho, wo, &mut col,
            );
            let o = &mut out[ni * cout * p..(ni + 1) * cout * p];
            E::gemm_nn(cout, k, p, wv, &col, o, false);
            for oc in 0..cout {
                let bias = bv[oc];
                for v in &mut o[oc * p..(oc + 1) * p] {
                    *v = *v + bias;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, cout, ho, wo]), out).unwrap();
        let req = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride }, req))
    }

    pub fn reflect_pad(&mut self, x: NodeId, pad: usize) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 4 {
            return config_err("reflect_pad expects 4-d input");
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h <= pad || w <= pad {
            return config_err(format!("reflect_pad {pad} too large for {h}x{w}"));
        }
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let xv = self.nodes[x].value.as_slice().unwrap();
        let mut out = vec![E::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            let src = &xv[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
            for i in 0..ho {
                let si = reflect_index(i, pad, h);
                for j in 0..wo {
                    let sj = reflect_index(j, pad, w);
                    dst[i * wo + j] = src[si * w + sj];
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).unwrap();
        let req = self.rg(x);
        Ok(self.push(value, Op::ReflectPad { x, pad }, req))
    }

    pub fn zero_pad(&mut self, x: NodeId, pad: usize) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 4 {
            return config_err("zero_pad expects 4-d input");
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let xv = self.nodes[x].value.as_slice().unwrap();
        let mut out = vec![E::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            let src = &xv[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
            for i in 0..h {
                let drow = &mut dst[(i + pad) * wo + pad..(i + pad) * wo + pad + w];
                drow.copy_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).unwrap();
        let req = self.rg(x);
        Ok(self.push(value, Op::ZeroPad { x, pad }, req))
    }

    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 4 {
            return config_err("instance_norm expects 4-d input");
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let gs = self.nodes[gamma].value.shape().to_vec();
        let bs = self.nodes[beta].value.shape().to_vec();
        if gs != [c] || bs != [c] {
            return config_err(format!(
                "instance_norm affine shapes {gs:?}/{bs:?} do not match {c} channels"
            ));
        }
        let hw = h * w;
        let xv = self.nodes[x].value.as_slice().unwrap();
        let gv = self.nodes[gamma].value.as_slice().unwrap();
        let bv = self.nodes[beta].value.as_slice().unwrap();
        let eps = E::of_f64(IN_EPS);
        let inv_hw = E::of_f64(1.0 / hw as f64);
        let mut out = vec![E::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let src = &xv[base..base + hw];
                let mean: E = src.iter().copied().sum::<E>() * inv_hw;
                let var: E = src
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<E>()
                    * inv_hw;
                let inv_std = (var + eps).sqrt().recip();
                let (g, b) = (gv[ci], bv[ci]);
                for (o, &v) in out[base..base + hw].iter_mut().zip(src) {
                    *o = g * (v - mean) * inv_std + b;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&xs), out).unwrap();
        let req = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::InstanceNorm { x, gamma, beta }, req))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.mapv(|v| v.max(E::zero()));
        let req = self.rg(x);
        self.push(value, Op::Relu { x }, req)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = E::of_f64(slope);
        let value = self.nodes[x]
            .value
            .mapv(|v| if v > E::zero() { v } else { v * s });
        let req = self.rg(x);
        self.push(value, Op::LeakyRelu { x, slope }, req)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.mapv(|v| v.tanh());
        let req = self.rg(x);
        self.push(value, Op::Tanh { x }, req)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = E::one();
        let value = self.nodes[x].value.mapv(|v| one / (one + (-v).exp()));
        let req = self.rg(x);
        self.push(value, Op::Sigmoid { x }, req)
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 4 {
            return config_err("upsample2x expects 4-d input");
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let xv = self.nodes[x].value.as_slice().unwrap();
        let mut out = vec![E::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            let src = &xv[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
            for i in 0..ho {
                let si = i / 2;
                for j in 0..wo {
                    dst[i * wo + j] = src[si * w + j / 2];
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).unwrap();
        let req = self.rg(x);
        Ok(self.push(value, Op::Upsample2x { x }, req))
    }

    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a].value.shape().to_vec();
        let sb = self.nodes[b].value.shape().to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return config_err(format!("concat_c shape mismatch: {sa:?} vs {sb:?}"));
        }
        let (n, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let hw = h * w;
        let av = self.nodes[a].value.as_slice().unwrap();
        let bv = self.nodes[b].value.as_slice().unwrap();
        let mut out = vec![E::zero(); n * (ca + cb) * hw];
        for ni in 0..n {
            let dst = &mut out[ni * (ca + cb) * hw..(ni + 1) * (ca + cb) * hw];
            dst[..ca * hw].copy_from_slice(&av[ni * ca * hw..(ni + 1) * ca * hw]);
            dst[ca * hw..].copy_from_slice(&bv[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, ca + cb, h, w]), out).unwrap();
        let req = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatC { a, b }, req))
    }

    /// (N, D) vector replicated over an (h, w) spatial grid -> (N, D, h, w).
    pub fn broadcast_vec(&mut self, z: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let zs = self.nodes[z].value.shape().to_vec();
        if zs.len() != 2 {
            return config_err(format!("broadcast_vec expects (N, D) input, got {zs:?}"));
        }
        let (n, d) = (zs[0], zs[1]);
        let zv = self.nodes[z].value.as_slice().unwrap();
        let mut out = vec![E::zero(); n * d * h * w];
        for nd in 0..n * d {
            out[nd * h * w..(nd + 1) * h * w].fill(zv[nd]);
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, d, h, w]), out).unwrap();
        let req = self.rg(z);
        Ok(self.push(value, Op::BroadcastVec { z, h, w }, req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return config_err(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            ));
        }
        let value = &self.nodes[a].value + &self.nodes[b].value;
        let req = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, req))
    }

    // ---- reductions / scalars -------------------------------------------

    /// Mean absolute difference over all elements (the crate's L1 norm).
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return config_err(format!(
                "l1_mean shape mismatch: {:?} vs {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            ));
        }
        let n = self.nodes[a].value.len();
        let s: E = self.nodes[a]
            .value
            .iter()
            .zip(self.nodes[b].value.iter())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let value = ArrayD::from_elem(IxDyn(&[]), s * E::of_f64(1.0 / n as f64));
        let req = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::L1Mean { a, b }, req))
    }

    /// mean(ln(x + eps)) with the adversarial-loss stabilization epsilon.
    pub fn mean_log_eps(&mut self, x: NodeId) -> NodeId {
        let eps = E::of_f64(LOG_EPS);
        let n = self.nodes[x].value.len();
        let s: E = self.nodes[x].value.iter().map(|&v| (v + eps).ln()).sum();
        let value = ArrayD::from_elem(IxDyn(&[]), s * E::of_f64(1.0 / n as f64));
        let req = self.rg(x);
        self.push(value, Op::MeanLogEps { x }, req)
    }

    /// mean(ln(1 - x + eps))
    pub fn mean_log1m_eps(&mut self, x: NodeId) -> NodeId {
        let eps = E::of_f64(LOG_EPS);
        let one = E::one();
        let n = self.nodes[x].value.len();
        let s: E = self.nodes[x]
            .value
            .iter()
            .map(|&v| (one - v + eps).ln())
            .sum();
        let value = ArrayD::from_elem(IxDyn(&[]), s * E::of_f64(1.0 / n as f64));
        let req = self.rg(x);
        self.push(value, Op::MeanLog1mEps { x }, req)
    }

    /// mean(x^2), the least-squares adversarial penalty.
    pub fn mean_square(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len();
        let s: E = self.nodes[x].value.iter().map(|&v| v * v).sum();
        let value = ArrayD::from_elem(IxDyn(&[]), s * E::of_f64(1.0 / n as f64));
        let req = self.rg(x);
        self.push(value, Op::MeanSquare { x }, req)
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let m = E::of_f64(mul);
        let a = E::of_f64(add);
        let value = self.nodes[x].value.mapv(|v| m * v + a);
        let req = self.rg(x);
        self.push(value, Op::Affine { x, mul }, req)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut acc = 0.0f64;
        for &(id, wgt) in terms {
            debug_assert_eq!(self.nodes[id].value.len(), 1);
            acc += wgt * self.scalar(id);
        }
        let value = ArrayD::from_elem(IxDyn(&[]), E::of_f64(acc));
        let req = terms.iter().any(|&(id, _)| self.rg(id));
        self.push(
            value,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            req,
        )
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode pass from a scalar root. Returns parameter gradients.
    pub fn backward(&self, root: NodeId) -> Result<GradStore<E>> {
        let mut grads = GradStore::new(self.params.len());
        if self.nodes[root].value.len() != 1 {
            return config_err("backward root must be a scalar");
        }
        if !self.nodes[root].requires_grad {
            return Ok(grads);
        }
        let mut node_grads: Vec<Option<ArrayD<E>>> = (0..=root).map(|_| None).collect();
        node_grads[root] = Some(ArrayD::from_elem(IxDyn(&[]), E::one()));

        for id in (0..=root).rev() {
            let g = match node_grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Param(pid) => grads.accumulate(*pid, &g),
                Op::Conv2d { x, w, b, stride } => {
                    self.backward_conv2d(*x, *w, *b, *stride, id, &g, &mut node_grads);
                }
                Op::ReflectPad { x, pad } => {
                    if self.rg(*x) {
                        let xs = self.nodes[*x].value.shape();
                        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
                        let gv = g.as_slice().unwrap();
                        let mut dx = vec![E::zero(); n * c * h * w];
                        for nc in 0..n * c {
                            let src = &gv[nc * ho * wo..(nc + 1) * ho * wo];
                            let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
                            for i in 0..ho {
                                let si = reflect_index(i, *pad, h);
                                for j in 0..wo {
                                    let sj = reflect_index(j, *pad, w);
                                    dst[si * w + sj] = dst[si * w + sj] + src[i * wo + j];
                                }
                            }
                        }
                        let dx = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap();
                        accumulate(&mut node_grads[*x], dx);
                    }
                }
                Op::ZeroPad { x, pad } => {
                    if self.rg(*x) {
                        let xs = self.nodes[*x].value.shape();
                        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                        let wo = w + 2 * pad;
                        let gv = g.as_slice().unwrap();
                        let mut dx = vec![E::zero(); n * c * h * w];
                        for nc in 0..n * c {
                            let src = &gv[nc * (h + 2 * pad) * wo..];
                            let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
                            for i in 0..h {
                                let srow = &src[(i + pad) * wo + pad..(i + pad) * wo + pad + w];
                                dst[i * w..(i + 1) * w].copy_from_slice(srow);
                            }
                        }
                        let dx = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap();
                        accumulate(&mut node_grads[*x], dx);
                    }
                }
                Op::InstanceNorm { x, gamma, beta } => {
                    self.backward_instance_norm(*x, *gamma, *beta, &g, &mut node_grads);
                }
                Op::Relu { x } => {
                    if self.rg(*x) {
                        let mut dx = g.clone();
                        dx.zip_mut_with(&self.nodes[*x].value, |d, &v| {
                            if v <= E::zero() {
                                *d = E::zero();
                            }
                        });
                        accumulate(&mut node_grads[*x], dx);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    if self.rg(*x) {
                        let s = E::of_f64(*slope);
                        let mut dx = g.clone();
                        dx.zip_mut_with(&self.nodes[*x].value, |d, &v| {
                            if v <= E::zero() {
                                *d = *d * s;
                            }
                        });
                        accumulate(&mut node_grads[*x], dx);
                    }
                }
                Op::Tanh { x } => {
                    if self.rg(*x) {
                        let one = E::one();
                        let mut dx = g.clone();
                        dx.zip_mut_with(&self.nodes[id].value, |d, &y| {
                            *d = *d * (one - y * y);
                        });
                        accumulate(&mut node_grads[*x], dx);
                    }
                }
                Op::Sigmoid { x } => {
                    if self.rg(*x) {
                        let one = E::one();
                        let mut dx = g.clone();
                        dx.zip_mut_with(&self.nodes[id].value, |d, &y| {
                            *d = *d * y * (one - y);
                        });
                        accumulate(&mut node_grads[*x], dx);
                    }
                }
                Op::Upsample2x { x } => {
                    if self.rg(*x) {
                        let xs = self.nodes[*x].value.shape();
                        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                        let wo = 2 * w;
                        let gv = g.as_slice().unwrap();
                        let mut dx = vec![E::zero(); n * c * h * w];
                        for nc in 0..n * c {
                            let src = &gv[nc * 4 * h * w..(nc + 1) * 4 * h * w];
                            let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
                            for i in 0..2 * h {
                                let si = i / 2;
                                for j in 0..wo {
                                    dst[si * w + j / 2] =
                                        dst[si * w + j / 2] + src[i * wo + j];
                                }
                            }
                        }
                        let dx = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap();
                        accumulate(&mut node_grads[*x], dx);
                    }
                }
                Op::ConcatC { a, b } => {
                    let sa = self.nodes[*a].value.shape().to_vec();
                    let sb = self.nodes[*b].value.shape().to_vec();
                    let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                    let gv = g.as_slice().unwrap();
                    if self.rg(*a) {
                        let mut da = vec![E::zero(); n * ca * hw];
                        for ni in 0..n {
                            let src = &gv[ni * (ca + cb) * hw..];
                            da[ni * ca * hw..(ni + 1) * ca * hw]
                                .copy_from_slice(&src[..ca * hw]);
                        }
                        let da = ArrayD::from_shape_vec(IxDyn(&sa), da).unwrap();
                        accumulate(&mut node_grads[*a], da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![E::zero(); n * cb * hw];
                        for ni in 0..n {
                            let src = &gv[ni * (ca + cb) * hw..];
                            db[ni * cb * hw..(ni + 1) * cb * hw]
                                .copy_from_slice(&src[ca * hw..(ca + cb) * hw]);
                        }
                        let db = ArrayD::from_shape_vec(IxDyn(&sb), db).unwrap();
                        accumulate(&mut node_grads[*b], db);
                    }
                }
                Op::BroadcastVec { z, h, w } => {
                    if self.rg(*z) {
                        let zs = self.nodes[*z].value.shape().to_vec();
                        let (n, d) = (zs[0], zs[1]);
                        let gv = g.as_slice().unwrap();
                        let mut dz = vec![E::zero(); n * d];
                        for nd in 0..n * d {
                            dz[nd] = gv[nd * h * w..(nd + 1) * h * w].iter().copied().sum();
                        }
                        let dz = ArrayD::from_shape_vec(IxDyn(&[n, d]), dz).unwrap();
                        accumulate(&mut node_grads[*z], dz);
                    }
                }
                Op::Add { a, b } => {
                    if self.rg(*a) {
                        accumulate(&mut node_grads[*a], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut node_grads[*b], g);
                    }
                }
                Op::L1Mean { a, b } => {
                    let gs = g.iter().next().unwrap().cast_f64();
                    let n = self.nodes[*a].value.len();
                    let scale = E::of_f64(gs / n as f64);
                    let sign = |x: E, y: E| {
                        if x > y {
                            scale
                        } else if x < y {
                            -scale
                        } else {
                            E::zero()
                        }
                    };
                    if self.rg(*a) {
                        let mut da = self.nodes[*a].value.clone();
                        da.zip_mut_with(&self.nodes[*b].value, |x, &y| *x = sign(*x, y));
                        accumulate(&mut node_grads[*a], da);
                    }
                    if self.rg(*b) {
                        let mut db = self.nodes[*b].value.clone();
                        db.zip_mut_with(&self.nodes[*a].value, |y, &x| *y = -sign(x, *y));
                        accumulate(&mut node_grads[*b], db);
                    }
                }
                Op::MeanLogEps { x } => {
                    if self.rg(*x) {
                        let gs = g.iter().next().unwrap().cast_f64();
                        let n = self.nodes[*x].value.len();
                        let eps = E::of_f64(LOG_EPS);
                        let scale = E::of_f64(gs / n as f64);
                        let dx = self.nodes[*x].value.mapv(|v| scale / (v + eps));
                        accumulate(&mut node_grads[*x], dx);
                    }
                }
                Op::MeanLog1mEps { x } => {
                    if self.rg(*x) {
                        let gs = g.iter().next().unwrap().cast_f64();
                        let n = self.nodes[*x].value.len();
                        let eps = E::of_f64(LOG_EPS);
                        let one = E::one();
                        let scale = E::of_f64(gs / n as f64);
                        let dx = self.nodes[*x].value.mapv(|v| -scale / (one - v + eps));
                        accumulate(&mut node_grads[*x], dx);
                    }
                }
                Op::MeanSquare { x } => {
                    if self.rg(*x) {
                        let gs = g.iter().next().unwrap().cast_f64();
                        let n = self.nodes[*x].value.len();
                        let scale = E::of_f64(2.0 * gs / n as f64);
                        let dx = self.nodes[*x].value.mapv(|v| v * scale);
                        accumulate(&mut node_grads[*x], dx);
                    }
                }
                Op::Affine { x, mul } => {
                    if self.rg(*x) {
                        let m = E::of_f64(*mul);
                        accumulate(&mut node_grads[*x], g.mapv(|v| v * m));
                    }
                }
                Op::WeightedSum { terms } => {
                    let gs = g.iter().next().unwrap().cast_f64();
                    for &(tid, wgt) in terms {
                        if self.rg(tid) {
                            let contrib =
                                ArrayD::from_elem(IxDyn(&[]), E::of_f64(gs * wgt));
                            accumulate(&mut node_grads[tid], contrib);
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    fn backward_conv2d(
        &self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        out: NodeId,
        g: &ArrayD<E>,
        node_grads: &mut [Option<ArrayD<E>>],
    ) {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        let os = self.nodes[out].value.shape().to_vec();
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (ho, wo) = (os[2], os[3]);
        let k = cin * kh * kw;
        let p = ho * wo;
        let xv = self.nodes[x].value.as_slice().unwrap();
        let wv = self.nodes[w].value.as_slice().unwrap();
        let gv = g.as_slice().unwrap();

        let want_dx = self.rg(x);
        let want_dw = self.rg(w);
        let want_db = self.rg(b);
        let mut dw = if want_dw { vec![E::zero(); cout * k] } else { Vec::new() };
        let mut db = if want_db { vec![E::zero(); cout] } else { Vec::new() };
        let mut dx = if want_dx { vec![E::zero(); n * cin * h * wd] } else { Vec::new() };
        let mut col = vec![E::zero(); k * p];
        let mut dcol = if want_dx { vec![E::zero(); k * p] } else { Vec::new() };

        for ni in 0..n {
            let gn = &gv[ni * cout * p..(ni + 1) * cout * p];
            if want_dw {
                im2col(
                    &xv[ni * cin * h * wd..(ni + 1) * cin * h * wd],
                    cin, h, wd, kh, kw, stride, ho, wo, &mut col,
                );
                E::gemm_nt(cout, p, k, gn, &col, &mut dw, true);
            }
            if want_db {
                for oc in 0..cout {
                    db[oc] = db[oc] + gn[oc * p..(oc + 1) * p].iter().copied().sum::<E>();
                }
            }
            if want_dx {
                E::gemm_tn(k, cout, p, wv, gn, &mut dcol, false);
                col2im_add(
                    &dcol,
                    &mut dx[ni * cin * h * wd..(ni + 1) * cin * h * wd],
                    cin, h, wd, kh, kw, stride, ho, wo,
                );
            }
        }
        if want_dw {
            let dw = ArrayD::from_shape_vec(IxDyn(&ws), dw).unwrap();
            accumulate(&mut node_grads[w], dw);
        }
        if want_db {
            let db = ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap();
            accumulate(&mut node_grads[b], db);
        }
        if want_dx {
            let dx = ArrayD::from_shape_vec(IxDyn(&xs), dx).unwrap();
            accumulate(&mut node_grads[x], dx);
        }
    }

    fn backward_instance_norm(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        g: &ArrayD<E>,
        node_grads: &mut [Option<ArrayD<E>>],
    ) {
        let xs = self.nodes[x].value.shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let xv = self.nodes[x].value.as_slice().unwrap();
        let gv_in = g.as_slice().unwrap();
        let gammav = self.nodes[gamma].value.as_slice().unwrap();
        let eps = E::of_f64(IN_EPS);
        let inv_hw = E::of_f64(1.0 / hw as f64);

        let want_dx = self.rg(x);
        let want_dg = self.rg(gamma);
        let want_db = self.rg(beta);
        let mut dx = if want_dx { vec![E::zero(); xv.len()] } else { Vec::new() };
        let mut dgamma = vec![E::zero(); c];
        let mut dbeta = vec![E::zero(); c];

        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let src = &xv[base..base + hw];
                let gy = &gv_in[base..base + hw];
                let mean: E = src.iter().copied().sum::<E>() * inv_hw;
                let var: E = src
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<E>()
                    * inv_hw;
                let inv_std = (var + eps).sqrt().recip();

                let mut sum_gy = E::zero();
                let mut sum_gy_xhat = E::zero();
                for (&d, &v) in gy.iter().zip(src) {
                    let xhat = (v - mean) * inv_std;
                    sum_gy = sum_gy + d;
                    sum_gy_xhat = sum_gy_xhat + d * xhat;
                }
                dgamma[ci] = dgamma[ci] + sum_gy_xhat;
                dbeta[ci] = dbeta[ci] + sum_gy;
                if want_dx {
                    let gcoef = gammav[ci] * inv_std;
                    let mean_gy = sum_gy * inv_hw;
                    let mean_gy_xhat = sum_gy_xhat * inv_hw;
                    let out = &mut dx[base..base + hw];
                    for ((o, &d), &v) in out.iter_mut().zip(gy).zip(src) {
                        let xhat = (v - mean) * inv_std;
                        *o = gcoef * (d - mean_gy - xhat * mean_gy_xhat);
                    }
                }
            }
        }
        if want_dx {
            let dx = ArrayD::from_shape_vec(IxDyn(&xs), dx).unwrap();
            accumulate(&mut node_grads[x], dx);
        }
        if want_dg {
            let dg = ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap();
            accumulate(&mut node_grads[gamma], dg);
        }
        if want_db {
            let db = ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap();
            accumulate(&mut node_grads[beta], db);
        }
    }
}

fn accumulate<E: Scalar>(slot: &mut Option<ArrayD<E>>, g: ArrayD<E>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn reflect_index(i: usize, pad: usize, len: usize) -> usize {
    // Mirror without repeating the border sample (torch ReflectionPad2d).
    let i = i as isize - pad as isize;
    let last = len as isize - 1;
    let r = if i < 0 {
        -i
    } else if i > last {
        2 * last - i
    } else {
        i
    };
    r as usize
}

#[allow(clippy::too_many_arguments)]
fn im2col<E: Scalar>(
    x: &[E],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    col: &mut [E],
) {
    debug_assert_eq!(col.len(), cin * kh * kw * ho * wo);
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut col[((ci * kh + i) * kw + j) * p..((ci * kh + i) * kw + j + 1) * p];
                for oi in 0..ho {
                    let src = &plane[(oi * stride + i) * w..];
                    let dst = &mut row[oi * wo..(oi + 1) * wo];
                    if stride == 1 {
                        dst.copy_from_slice(&src[j..j + wo]);
                    } else {
                        for (oj, d) in dst.iter_mut().enumerate() {
                            *d = src[oj * stride + j];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<E: Scalar>(
    col: &[E],
    x: &mut [E],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &col[((ci * kh + i) * kw + j) * p..((ci * kh + i) * kw + j + 1) * p];
                for oi in 0..ho {
                    let dst = &mut plane[(oi * stride + i) * w..];
                    let src = &row[oi * wo..(oi + 1) * wo];
                    for (oj, &s) in src.iter().enumerate() {
                        dst[oj * stride + j] = dst[oj * stride + j] + s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| f64::sample_normal(rng)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    #[test]
    fn conv2d_known_values() {
        // 1x1x3x3 input, 1x1x2x2 kernel of ones, stride 1 -> windowed sums
        let store: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(
            ArrayD::from_shape_vec(
                IxDyn(&[1, 1, 3, 3]),
                vec![1., 2., 3., 4., 5., 6., 7., 8., 9.],
            )
            .unwrap(),
        );
        let w = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.0));
        let b = g.constant(ArrayD::from_elem(IxDyn(&[1]), 0.5));
        let y = g.conv2d(x, w, b, 1).unwrap();
        let v = g.value(y).as_slice().unwrap().to_vec();
        assert_eq!(v, vec![12.5, 16.5, 24.5, 28.5]);
    }

    #[test]
    fn conv2d_channel_mismatch_is_config_error() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(ArrayD::zeros(IxDyn(&[1, 3, 4, 4])));
        let w = g.constant(ArrayD::zeros(IxDyn(&[8, 4, 3, 3])));
        let b = g.constant(ArrayD::zeros(IxDyn(&[8])));
        assert!(g.conv2d(x, w, b, 1).is_err());
    }

    #[test]
    fn reflect_pad_mirrors() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1., 2., 3., 4.]).unwrap(),
        );
        let y = g.reflect_pad(x, 1).unwrap();
        let v = g.value(y).as_slice().unwrap().to_vec();
        assert_eq!(
            v,
            vec![4., 3., 4., 3., 2., 1., 2., 1., 4., 3., 4., 3., 2., 1., 2., 1.]
        );
    }

    #[test]
    fn instance_norm_normalizes() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1., 2., 3., 4.]).unwrap(),
        );
        let gamma = g.constant(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let beta = g.constant(ArrayD::from_elem(IxDyn(&[1]), 0.0));
        let y = g.instance_norm(x, gamma, beta).unwrap();
        let v = g.value(y).as_slice().unwrap().to_vec();
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    /// Central finite differences over every element of every op's inputs.
    #[test]
    fn backward_matches_finite_differences_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.add("w", randn(&[2, 3, 3, 3], &mut rng));
        let b = store.add("b", randn(&[2], &mut rng));
        let gamma = store.add("gamma", randn(&[2], &mut rng));
        let beta = store.add("beta", randn(&[2], &mut rng));
        let z = store.add("z", randn(&[1, 4], &mut rng));
        let x_data = randn(&[1, 3, 6, 6], &mut rng);
        let t_data = randn(&[1, 2, 6, 6], &mut rng);

        let eval = |store: &ParamStore<f64>| -> f64 {
            let mut g = Graph::new(store);
            let x = g.constant(x_data.clone());
            let t = g.constant(t_data.clone());
            let wp = g.param(w);
            let bp = g.param(b);
            let gp = g.param(gamma);
            let be = g.param(beta);
            let zp = g.param(z);
            let xp = g.reflect_pad(x, 1).unwrap();
            let c = g.conv2d(xp, wp, bp, 1).unwrap();
            let nrm = g.instance_norm(c, gp, be).unwrap();
            let a = g.tanh(nrm);
            let zb = g.broadcast_vec(zp, 6, 6).unwrap();
            let cat = g.concat_c(a, zb).unwrap();
            let up = g.upsample2x(cat).unwrap();
            let lr = g.leaky_relu(up, 0.2);
            let sg = g.sigmoid(lr);
            let l1 = {
                let t_up = g.upsample2x(t).unwrap();
                let t6 = g.constant(ArrayD::zeros(IxDyn(&[1, 4, 12, 12])));
                let tt = g.concat_c(t_up, t6).unwrap();
                g.l1_mean(sg, tt).unwrap()
            };
            let lg = g.mean_log_eps(sg);
            let lg1 = g.mean_log1m_eps(sg);
            let total = g.weighted_sum(&[(l1, 1.0), (lg, 0.3), (lg1, 0.2)]);
            g.scalar(total)
        };

        // analytic gradients
        let grads = {
            let mut g = Graph::new(&store);
            let x = g.constant(x_data.clone());
            let t = g.constant(t_data.clone());
            let wp = g.param(w);
            let bp = g.param(b);
            let gp = g.param(gamma);
            let be = g.param(beta);
            let zp = g.param(z);
            let xp = g.reflect_pad(x, 1).unwrap();
            let c = g.conv2d(xp, wp, bp, 1).unwrap();
            let nrm = g.instance_norm(c, gp, be).unwrap();
            let a = g.tanh(nrm);
            let zb = g.broadcast_vec(zp, 6, 6).unwrap();
            let cat = g.concat_c(a, zb).unwrap();
            let up = g.upsample2x(cat).unwrap();
            let lr = g.leaky_relu(up, 0.2);
            let sg = g.sigmoid(lr);
            let l1 = {
                let t_up = g.upsample2x(t).unwrap();
                let t6 = g.constant(ArrayD::zeros(IxDyn(&[1, 4, 12, 12])));
                let tt = g.concat_c(t_up, t6).unwrap();
                g.l1_mean(sg, tt).unwrap()
            };
            let lg = g.mean_log_eps(sg);
            let lg1 = g.mean_log1m_eps(sg);
            let total = g.weighted_sum(&[(l1, 1.0), (lg, 0.3), (lg1, 0.2)]);
            g.backward(total).unwrap()
        };

        let step = 1e-5;
        for pid in [w, b, gamma, beta, z] {
            let n = store.get(pid).value.len();
            let ga = grads.get(pid).expect("missing gradient").clone();
            for i in 0..n {
                let orig = store.get(pid).value.as_slice().unwrap()[i];
                store.get_mut(pid).value.as_slice_mut().unwrap()[i] = orig + step;
                let lp = eval(&store);
                store.get_mut(pid).value.as_slice_mut().unwrap()[i] = orig - step;
                let lm = eval(&store);
                store.get_mut(pid).value.as_slice_mut().unwrap()[i] = orig;
                let fd = (lp - lm) / (2.0 * step);
                let an = ga.as_slice().unwrap()[i];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((an - fd) / denom).abs() < 1e-5,
                    "param {:?} elem {}: analytic {} vs fd {}",
                    pid,
                    i,
                    an,
                    fd
                );
            }
        }
    }

    #[test]
    fn strided_conv_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.add("w", randn(&[4, 2, 3, 3], &mut rng));
        let b = store.add("b", randn(&[4], &mut rng));
        let x_data = randn(&[2, 2, 8, 8], &mut rng);

        let eval = |store: &ParamStore<f64>| -> f64 {
            let mut g = Graph::new(store);
            let x = g.constant(x_data.clone());
            let wp = g.param(w);
            let bp = g.param(b);
            let xp = g.zero_pad(x, 1).unwrap();
            let c = g.conv2d(xp, wp, bp, 2).unwrap();
            let t = g.tanh(c);
            let dim = g.value(c).raw_dim();
            let zero = g.constant(ArrayD::zeros(dim));
            let l = g.l1_mean(t, zero).unwrap();
            g.scalar(l)
        };

        let grads = {
            let mut g = Graph::new(&store);
            let x = g.constant(x_data.clone());
            let wp = g.param(w);
            let bp = g.param(b);
            let xp = g.zero_pad(x, 1).unwrap();
            let c = g.conv2d(xp, wp, bp, 2).unwrap();
            let t = g.tanh(c);
            let dim = g.value(c).raw_dim();
            let zero = g.constant(ArrayD::zeros(dim));
            let l = g.l1_mean(t, zero).unwrap();
            g.backward(l).unwrap()
        };
        let step = 1e-5;
        for pid in [w, b] {
            let n = store.get(pid).value.len();
            let ga = grads.get(pid).unwrap().clone();
            for i in 0..n {
                let orig = store.get(pid).value.as_slice().unwrap()[i];
                store.get_mut(pid).value.as_slice_mut().unwrap()[i] = orig + step;
                let lp = eval(&store);
                store.get_mut(pid).value.as_slice_mut().unwrap()[i] = orig - step;
                let lm = eval(&store);
                store.get_mut(pid).value.as_slice_mut().unwrap()[i] = orig;
                let fd = (lp - lm) / (2.0 * step);
                let an = ga.as_slice().unwrap()[i];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(((an - fd) / denom).abs() < 1e-5);
            }
        }
    }
}
