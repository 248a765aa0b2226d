//! Encoder-decoder mapping network with hand-written reverse-mode gradients.
//!
//! The network is compiled from a [`NetSpec`] into a flat list of nodes.
//! Forward passes record a [`Tape`] of per-node caches; [`backward_net`]
//! walks it in reverse. All parameters live in one flat `f64` vector.

pub mod layers;

use ndarray::Array3;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{Container, Dtype, Header, Kind, Persist};
use crate::error::{Error, Result};
use crate::exec;
use layers::ConvGeom;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub levels: usize,
    pub base_filters: usize,
}

impl NetSpec {
    pub fn new(in_channels: usize) -> Self {
        Self { in_channels, out_channels: 2, levels: 3, base_filters: 16 }
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        self.levels = levels;
        self
    }

    pub fn with_base_filters(mut self, base_filters: usize) -> Self {
        self.base_filters = base_filters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_filters == 0 {
            return Err(Error::invalid("network channel counts must be positive"));
        }
        if self.levels > 8 {
            return Err(Error::invalid("at most 8 encoder levels are supported"));
        }
        Ok(())
    }

    /// Checks that `ny x nx` inputs are divisible by `2^levels`.
    pub fn check_input(&self, ny: usize, nx: usize) -> Result<()> {
        let d = 1usize << self.levels;
        if ny == 0 || nx == 0 || ny % d != 0 || nx % d != 0 {
            return Err(Error::shape(format!(
                "input {ny}x{nx} is not divisible by 2^{} = {d}",
                self.levels
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_filters << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Conv { cin: usize, cout: usize, k: usize, stride: usize, w: usize, b: Option<usize> },
    ConvT { cin: usize, cout: usize, w: usize },
    Bn { c: usize, gamma: usize, beta: usize, stat: usize },
    Relu,
    Save(usize),
    Concat(usize),
}

struct Program {
    nodes: Vec<Node>,
    registry: Vec<LayerShape>,
    n_params: usize,
    n_bn: usize,
}

struct Builder {
    nodes: Vec<Node>,
    registry: Vec<LayerShape>,
    n_params: usize,
    n_bn: usize,
}

impl Builder {
    fn alloc(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.n_params;
        let l = LayerShape { name, offset, shape };
        self.n_params += l.len();
        self.registry.push(l);
        offset
    }

    fn conv_bn_relu(&mut self, name: &str, cin: usize, cout: usize, stride: usize) {
        let w = self.alloc(format!("{name}.weight"), vec![cout, cin, 3, 3]);
        self.nodes.push(Node::Conv { cin, cout, k: 3, stride, w, b: None });
        self.bn_relu(name, cout);
    }

    fn bn_relu(&mut self, name: &str, c: usize) {
        let gamma = self.alloc(format!("{name}.bn.gamma"), vec![c]);
        let beta = self.alloc(format!("{name}.bn.beta"), vec![c]);
        self.nodes.push(Node::Bn { c, gamma, beta, stat: self.n_bn });
        self.n_bn += c;
        self.nodes.push(Node::Relu);
    }
}

fn compile(spec: &NetSpec) -> Program {
    let mut b = Builder { nodes: Vec::new(), registry: Vec::new(), n_params: 0, n_bn: 0 };
    let f = spec.base_filters;
    b.conv_bn_relu("enc0.conv1", spec.in_channels, f, 1);
    b.conv_bn_relu("enc0.conv2", f, f, 1);
    for l in 1..=spec.levels {
        b.nodes.push(Node::Save(l - 1));
        let (cp, c) = (spec.width(l - 1), spec.width(l));
        b.conv_bn_relu(&format!("enc{l}.down"), cp, c, 2);
        b.conv_bn_relu(&format!("enc{l}.conv"), c, c, 1);
    }
    for l in (0..spec.levels).rev() {
        let (cp, c) = (spec.width(l + 1), spec.width(l));
        let w = b.alloc(format!("dec{l}.up.weight"), vec![c, 2, 2, cp]);
        b.nodes.push(Node::ConvT { cin: cp, cout: c, w });
        b.bn_relu(&format!("dec{l}.up"), c);
        b.nodes.push(Node::Concat(l));
        b.conv_bn_relu(&format!("dec{l}.conv"), 2 * c, c, 1);
    }
    let w = b.alloc("head.weight".into(), vec![spec.out_channels, f, 1, 1]);
    let bias = b.alloc("head.bias".into(), vec![spec.out_channels]);
    b.nodes.push(Node::Conv { cin: f, cout: spec.out_channels, k: 1, stride: 1, w, b: Some(bias) });
    Program { nodes: b.nodes, registry: b.registry, n_params: b.n_params, n_bn: b.n_bn }
}

/// Network parameters, optimizer moments and normalization running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    spec: NetSpec,
    pub theta: Vec<f64>,
    pub grad: Vec<f64>,
    registry: Vec<LayerShape>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub adam_t: u64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl NetParams {
    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn registry(&self) -> &[LayerShape] {
        &self.registry
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn layer(&self, name: &str) -> Option<&[f64]> {
        self.registry
            .iter()
            .find(|l| l.name == name)
            .map(|l| &self.theta[l.offset..l.offset + l.len()])
    }

    /// Folds the batch statistics of a training pass into the running averages.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        if tape.mode != Mode::Train {
            return;
        }
        for (i, (m, v)) in tape.batch_mean.iter().zip(&tape.batch_var).enumerate() {
            self.running_mean[i] = BN_MOMENTUM * self.running_mean[i] + (1.0 - BN_MOMENTUM) * m;
            self.running_var[i] = BN_MOMENTUM * self.running_var[i] + (1.0 - BN_MOMENTUM) * v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(&self.running_mean).chain(&self.running_var).all(|v| v.is_finite())
    }
}

/// He-normal weights, zero biases and shifts, unit scales.
pub fn init_params(spec: &NetSpec, seed: u64) -> Result<NetParams> {
    spec.validate()?;
    let prog = compile(spec);
    let mut theta = vec![0.0; prog.n_params];
    let mut rng = crate::rng::rng(seed);
    for l in &prog.registry {
        let slot = &mut theta[l.offset..l.offset + l.len()];
        if l.name.ends_with(".gamma") {
            slot.fill(1.0);
        } else if l.name.ends_with(".weight") {
            let fan_in = if l.name.contains(".up.") { l.shape[3] } else { l.shape[1] * l.shape[2] * l.shape[3] };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive sd");
            slot.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
    }
    let n = prog.n_params;
    Ok(NetParams {
        spec: *spec,
        theta,
        grad: vec![0.0; n],
        registry: prog.registry,
        adam_m: vec![0.0; n],
        adam_v: vec![0.0; n],
        adam_t: 0,
        running_mean: vec![0.0; prog.n_bn],
        running_var: vec![1.0; prog.n_bn],
    })
}

enum Cache {
    Conv { g: ConvGeom, cols: Vec<Vec<f64>> },
    ConvT { h: usize, w: usize, input: Vec<Vec<f64>> },
    Bn { p: usize, xhat: Vec<Vec<f64>>, inv_std: Vec<f64> },
    Relu { out: Vec<Vec<f64>> },
    Save,
    Concat { c_first: usize, p: usize },
}

/// Record of one forward pass over a mini-batch.
pub struct Tape {
    mode: Mode,
    batch: usize,
    input_shape: (usize, usize, usize),
    caches: Vec<Cache>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

impl Tape {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Runs the network on a mini-batch of `[t, ny, nx]` inputs, returning
/// `[out_channels, ny, nx]` outputs and the tape for [`backward_net`].
///
/// In train mode normalization uses the statistics of this batch (returned in
/// the tape); in infer mode it uses the running statistics.
pub fn forward_net(params: &NetParams, inputs: &[Array3<f64>], mode: Mode) -> Result<(Vec<Array3<f64>>, Tape)> {
    let spec = &params.spec;
    let Some(first) = inputs.first() else {
        return Err(Error::invalid("empty mini-batch"));
    };
    let (t, ny, nx) = first.dim();
    if t != spec.in_channels {
        return Err(Error::shape(format!("network expects {} channels, got {t}", spec.in_channels)));
    }
    spec.check_input(ny, nx)?;
    if inputs.iter().any(|x| x.dim() != (t, ny, nx)) {
        return Err(Error::shape("mini-batch inputs differ in shape"));
    }
    let prog = compile(spec);
    let theta = &params.theta;
    let batch = inputs.len();
    let mut acts: Vec<Vec<f64>> = inputs.iter().map(|x| x.iter().copied().collect()).collect();
    let (mut c, mut h, mut w) = (t, ny, nx);
    let mut slots: Vec<Option<(Vec<Vec<f64>>, usize)>> = vec![None; spec.levels + 1];
    let mut caches = Vec::with_capacity(prog.nodes.len());
    let mut batch_mean = vec![0.0; prog.n_bn];
    let mut batch_var = vec![1.0; prog.n_bn];

    for node in &prog.nodes {
        match *node {
            Node::Conv { cin, cout, k, stride, w: wo, b } => {
                debug_assert_eq!(cin, c);
                let g = ConvGeom { cin, cout, k, stride, pad: k / 2, h, w };
                let weight = &theta[wo..wo + cout * g.patch()];
                let bias = b.map(|b| &theta[b..b + cout]);
                let res = exec::map_slice(&acts, |x| layers::conv_forward(&g, weight, bias, x));
                let (outs, cols): (Vec<_>, Vec<_>) = res.into_iter().unzip();
                acts = outs;
                (h, w) = g.out_hw();
                c = cout;
                caches.push(Cache::Conv { g, cols });
            }
            Node::ConvT { cin, cout, w: wo } => {
                let weight = &theta[wo..wo + cout * 4 * cin];
                let outs = exec::map_slice(&acts, |x| layers::convt_forward(cin, cout, h, w, weight, x));
                let input = std::mem::replace(&mut acts, outs);
                caches.push(Cache::ConvT { h, w, input });
                (c, h, w) = (cout, 2 * h, 2 * w);
            }
            Node::Bn { c: nc, gamma, beta, stat } => {
                let p = h * w;
                let mut inv_std = vec![0.0; nc];
                for ch in 0..nc {
                    let (mean, var) = match mode {
                        Mode::Train => {
                            let n = (batch * p) as f64;
                            let mean = acts.iter().map(|a| a[ch * p..(ch + 1) * p].iter().sum::<f64>()).sum::<f64>() / n;
                            let var = acts
                                .iter()
                                .map(|a| a[ch * p..(ch + 1) * p].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                                .sum::<f64>()
                                / n;
                            batch_mean[stat + ch] = mean;
                            batch_var[stat + ch] = var;
                            (mean, var)
                        }
                        Mode::Infer => (params.running_mean[stat + ch], params.running_var[stat + ch]),
                    };
                    inv_std[ch] = 1.0 / (var + BN_EPS).sqrt();
                    for a in acts.iter_mut() {
                        a[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v = (*v - mean) * inv_std[ch]);
                    }
                }
                let xhat = acts.clone();
                for a in acts.iter_mut() {
                    for ch in 0..nc {
                        let (gm, bt) = (theta[gamma + ch], theta[beta + ch]);
                        a[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v = gm * *v + bt);
                    }
                }
                caches.push(Cache::Bn { p, xhat, inv_std });
            }
            Node::Relu => {
                exec::for_each_mut(&mut acts, |_, a| a.iter_mut().for_each(|v| *v = v.max(0.0)));
                caches.push(Cache::Relu { out: acts.clone() });
            }
            Node::Save(s) => {
                slots[s] = Some((acts.clone(), c));
                caches.push(Cache::Save);
            }
            Node::Concat(s) => {
                let (skip, cs) = slots[s].take().expect("skip saved before use");
                for (a, sk) in acts.iter_mut().zip(skip) {
                    a.extend(sk);
                }
                caches.push(Cache::Concat { c_first: c, p: h * w });
                c += cs;
            }
        }
    }
    let outputs = acts
        .into_iter()
        .map(|a| Array3::from_shape_vec((c, h, w), a).map_err(|e| Error::shape(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let tape = Tape { mode, batch, input_shape: (t, ny, nx), caches, batch_mean, batch_var };
    Ok((outputs, tape))
}

/// Exact gradient of `sum_b <output_grads[b], outputs[b]>` with respect to
/// the parameters, for the forward pass recorded in `tape`.
pub fn backward_net(params: &NetParams, tape: &Tape, output_grads: &[Array3<f64>]) -> Result<Vec<f64>> {
    let spec = &params.spec;
    let (_, ny, nx) = tape.input_shape;
    if output_grads.len() != tape.batch || output_grads.iter().any(|g| g.dim() != (spec.out_channels, ny, nx)) {
        return Err(Error::shape("output gradients do not match the recorded forward pass"));
    }
    let prog = compile(spec);
    let theta = &params.theta;
    let mut grad = vec![0.0; prog.n_params];
    let mut dacts: Vec<Vec<f64>> = output_grads.iter().map(|g| g.iter().copied().collect()).collect();
    let mut dslots: Vec<Option<Vec<Vec<f64>>>> = vec![None; spec.levels + 1];

    for (node, cache) in prog.nodes.iter().zip(&tape.caches).rev() {
        match (*node, cache) {
            (Node::Conv { cout, w: wo, b, .. }, Cache::Conv { g, cols }) => {
                let kk = g.patch();
                let weight = &theta[wo..wo + cout * kk];
                let per = exec::map_range(dacts.len(), |i| {
                    let mut dw = vec![0.0; cout * kk];
                    let mut db = b.map(|_| vec![0.0; cout]);
                    let dx = layers::conv_backward(g, weight, &cols[i], &dacts[i], &mut dw, db.as_deref_mut());
                    (dx, dw, db)
                });
                let mut next = Vec::with_capacity(per.len());
                for (dx, dw, db) in per {
                    add_into(&mut grad[wo..wo + cout * kk], &dw);
                    if let (Some(bo), Some(db)) = (b, db) {
                        add_into(&mut grad[bo..bo + cout], &db);
                    }
                    next.push(dx);
                }
                dacts = next;
            }
            (Node::ConvT { cin, cout, w: wo }, Cache::ConvT { h, w, input }) => {
                let n = cout * 4 * cin;
                let weight = &theta[wo..wo + n];
                let per = exec::map_range(dacts.len(), |i| {
                    let mut dw = vec![0.0; n];
                    let dx = layers::convt_backward(cin, cout, *h, *w, weight, &input[i], &dacts[i], &mut dw);
                    (dx, dw)
                });
                let mut next = Vec::with_capacity(per.len());
                for (dx, dw) in per {
                    add_into(&mut grad[wo..wo + n], &dw);
                    next.push(dx);
                }
                dacts = next;
            }
            (Node::Bn { c, gamma, beta, .. }, Cache::Bn { p, xhat, inv_std }) => {
                let p = *p;
                let n = (tape.batch * p) as f64;
                for ch in 0..c {
                    let range = ch * p..(ch + 1) * p;
                    let (mut sdy, mut sdyx) = (0.0, 0.0);
                    for (d, xh) in dacts.iter().zip(xhat) {
                        for (a, b) in d[range.clone()].iter().zip(&xh[range.clone()]) {
                            sdy += a;
                            sdyx += a * b;
                        }
                    }
                    grad[gamma + ch] += sdyx;
                    grad[beta + ch] += sdy;
                    let scale = theta[gamma + ch] * inv_std[ch];
                    for (d, xh) in dacts.iter_mut().zip(xhat) {
                        for (a, b) in d[range.clone()].iter_mut().zip(&xh[range.clone()]) {
                            *a = match tape.mode {
                                Mode::Train => scale * (*a - sdy / n - b * sdyx / n),
                                Mode::Infer => scale * *a,
                            };
                        }
                    }
                }
            }
            (Node::Relu, Cache::Relu { out }) => {
                for (d, o) in dacts.iter_mut().zip(out) {
                    for (a, &y) in d.iter_mut().zip(o) {
                        if y <= 0.0 {
                            *a = 0.0;
                        }
                    }
                }
            }
            (Node::Save(s), Cache::Save) => {
                if let Some(ds) = dslots[s].take() {
                    for (d, e) in dacts.iter_mut().zip(ds) {
                        add_into(d, &e);
                    }
                }
            }
            (Node::Concat(s), Cache::Concat { c_first, p }) => {
                let split = c_first * p;
                dslots[s] = Some(dacts.iter_mut().map(|d| d.split_off(split)).collect());
            }
            _ => unreachable!("tape out of sync with program"),
        }
    }
    Ok(grad)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One ADAM update with bias correction. Also stores `grads` in `params.grad`.
pub fn adam_step(params: &mut NetParams, grads: &[f64], cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.theta.len() {
        return Err(Error::shape(format!(
            "gradient length {} does not match {} parameters",
            grads.len(),
            params.theta.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged("non-finite parameter gradient".into()));
    }
    params.adam_t += 1;
    let t = params.adam_t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    params.grad.copy_from_slice(grads);
    for i in 0..grads.len() {
        let g = grads[i];
        params.adam_m[i] = cfg.beta1 * params.adam_m[i] + (1.0 - cfg.beta1) * g;
        params.adam_v[i] = cfg.beta2 * params.adam_v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = params.adam_m[i] / c1;
        let vhat = params.adam_v[i] / c2;
        params.theta[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    if !params.is_finite() {
        return Err(Error::Diverged("non-finite parameters after update".into()));
    }
    Ok(())
}

/// Stored as float32: parameters followed by running means and variances.
/// Optimizer moments are not persisted.
impl Persist for NetParams {
    fn to_container(&self) -> Container {
        let payload: Vec<f32> = self
            .theta
            .iter()
            .chain(&self.running_mean)
            .chain(&self.running_var)
            .map(|&v| v as f32)
            .collect();
        let header = Header::new(Kind::Netparams, vec![payload.len()], Dtype::Float32);
        Container::new(header, payload)
            .expect("consistent shape")
            .with_extra("spec", serde_json::to_value(self.spec).expect("plain struct"))
            .with_extra("n_params", self.theta.len() as u64)
            .with_extra("adam_t", self.adam_t)
    }

    fn from_container(c: &Container) -> Result<Self> {
        let h = &c.header;
        h.expect_kind(Kind::Netparams)?;
        let spec: NetSpec = h
            .extra
            .get("spec")
            .cloned()
            .ok_or_else(|| Error::Header("netparams header lacks the network spec".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Header(e.to_string())))?;
        let mut p = init_params(&spec, 0)?;
        let (n, nb) = (p.theta.len(), p.running_mean.len());
        if c.payload.len() != n + 2 * nb {
            return Err(Error::shape(format!(
                "netparams payload has {} values, spec needs {}",
                c.payload.len(),
                n + 2 * nb
            )));
        }
        let vals: Vec<f64> = c.payload.iter().map(|&v| v as f64).collect();
        p.theta.copy_from_slice(&vals[..n]);
        p.running_mean.copy_from_slice(&vals[n..n + nb]);
        p.running_var.copy_from_slice(&vals[n + nb..]);
        p.adam_t = h.extra.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(0);
        if !p.is_finite() {
            return Err(Error::Header("netparams contain non-finite values".into()));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy() -> NetSpec {
        NetSpec::new(3).with_levels(2).with_base_filters(2)
    }

    fn random_inputs(n: usize, t: usize, h: usize, w: usize, seed: u64) -> Vec<Array3<f64>> {
        let mut rng = crate::rng::rng(seed);
        (0..n).map(|_| Array3::from_shape_fn((t, h, w), |_| rng.random_range(0.0..1.0))).collect()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = NetSpec::new(8);
        let a = init_params(&spec, 3).unwrap();
        assert_eq!(a, init_params(&spec, 3).unwrap());
        assert_ne!(a.theta, init_params(&spec, 4).unwrap().theta);
        for l in a.registry() {
            let v = a.layer(&l.name).unwrap();
            if l.name.ends_with(".bias") || l.name.ends_with(".beta") {
                assert!(v.iter().all(|&x| x == 0.0));
            }
            if l.name.ends_with(".gamma") {
                assert!(v.iter().all(|&x| x == 1.0));
            }
        }
        let total: usize = a.registry().iter().map(LayerShape::len).sum();
        assert_eq!(total, a.len());
        assert!(a.len() > 100_000 && a.len() < 1_000_000, "{}", a.len());
    }

    #[test]
    fn he_variance_on_large_layer() {
        let p = init_params(&NetSpec::new(8), 11).unwrap();
        let w = p.layer("enc3.conv.weight").unwrap();
        assert!(w.len() >= 10_000);
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / (128.0 * 9.0);
        assert!((var / expect - 1.0).abs() < 0.1, "{var} vs {expect}");
    }

    #[test]
    fn output_shape_and_divisibility() {
        let p = init_params(&NetSpec::new(8), 1).unwrap();
        let x = random_inputs(1, 8, 64, 64, 2);
        let (y, _) = forward_net(&p, &x, Mode::Infer).unwrap();
        assert_eq!(y[0].dim(), (2, 64, 64));
        assert!(forward_net(&p, &random_inputs(1, 8, 60, 64, 2), Mode::Infer).is_err());
        assert!(forward_net(&p, &random_inputs(1, 7, 64, 64, 2), Mode::Infer).is_err());
    }

    #[test]
    fn zero_input_gives_finite_output() {
        let p = init_params(&toy(), 1).unwrap();
        let x = vec![Array3::zeros((3, 8, 8)); 2];
        for mode in [Mode::Train, Mode::Infer] {
            let (y, _) = forward_net(&p, &x, mode).unwrap();
            assert!(y.iter().all(|a| a.iter().all(|v| v.is_finite())));
        }
    }

    #[test]
    fn infer_is_bit_identical() {
        let p = init_params(&toy(), 5).unwrap();
        let x = random_inputs(2, 3, 8, 8, 6);
        let (a, _) = forward_net(&p, &x, Mode::Infer).unwrap();
        let (b, _) = forward_net(&p, &x, Mode::Infer).unwrap();
        assert_eq!(a, b);
    }

    fn scalar_loss(y: &[Array3<f64>], r: &[Array3<f64>]) -> f64 {
        y.iter().zip(r).map(|(a, b)| (a * b).sum() + 0.5 * (a * a).sum()).sum()
    }

    fn check_gradient(mode: Mode) {
        let mut p = init_params(&toy(), 9).unwrap();
        // Perturb the affine terms so every parameter has a non-trivial gradient.
        let mut rng = crate::rng::rng(10);
        for l in p.registry.clone() {
            if l.name.contains(".bn.") || l.name == "head.bias" {
                for v in &mut p.theta[l.offset..l.offset + l.len()] {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
        }
        p.running_mean.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        p.running_var.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        let x = random_inputs(2, 3, 8, 8, 12);
        let r = random_inputs(2, 2, 8, 8, 13);
        let (y, tape) = forward_net(&p, &x, mode).unwrap();
        let dy: Vec<Array3<f64>> = y.iter().zip(&r).map(|(a, b)| a + b).collect();
        let g = backward_net(&p, &tape, &dy).unwrap();
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for i in 0..p.len() {
            let h = 1e-6 * p.theta[i].abs().max(1.0);
            let mut q = p.clone();
            q.theta[i] += h;
            let up = scalar_loss(&forward_net(&q, &x, mode).unwrap().0, &r);
            q.theta[i] -= 2.0 * h;
            let dn = scalar_loss(&forward_net(&q, &x, mode).unwrap().0, &r);
            let fd = (up - dn) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6 * gmax);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "{mode:?} worst relative error {worst}");
    }

    #[test]
    fn gradient_matches_finite_differences_train() {
        check_gradient(Mode::Train);
    }

    #[test]
    fn gradient_matches_finite_differences_infer() {
        check_gradient(Mode::Infer);
    }

    #[test]
    fn backward_is_linear_in_output_grad() {
        let p = init_params(&toy(), 2).unwrap();
        let x = random_inputs(1, 3, 8, 8, 3);
        let (_, tape) = forward_net(&p, &x, Mode::Train).unwrap();
        let zero = backward_net(&p, &tape, &[Array3::zeros((2, 8, 8))]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let a = random_inputs(1, 2, 8, 8, 4);
        let b = random_inputs(1, 2, 8, 8, 5);
        let ga = backward_net(&p, &tape, &a).unwrap();
        let gb = backward_net(&p, &tape, &b).unwrap();
        let gab = backward_net(&p, &tape, &[&a[0] + &b[0]]).unwrap();
        for i in 0..ga.len() {
            assert!((ga[i] + gb[i] - gab[i]).abs() < 1e-10 * (1.0 + gab[i].abs()));
        }
    }

    #[test]
    fn infer_gradient_of_batch_is_sum_of_single_gradients() {
        let p = init_params(&toy(), 2).unwrap();
        let x = random_inputs(2, 3, 8, 8, 7);
        let d = random_inputs(2, 2, 8, 8, 8);
        let (_, tape) = forward_net(&p, &x, Mode::Infer).unwrap();
        let both = backward_net(&p, &tape, &d).unwrap();
        let mut sum = vec![0.0; both.len()];
        for i in 0..2 {
            let (_, t) = forward_net(&p, &x[i..=i], Mode::Infer).unwrap();
            add_into(&mut sum, &backward_net(&p, &t, &d[i..=i]).unwrap());
        }
        for (a, b) in both.iter().zip(&sum) {
            assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let mut p = init_params(&toy(), 1).unwrap();
        let cfg = AdamConfig { lr: 1e-3, ..Default::default() };
        let g: Vec<f64> = (0..p.len()).map(|i| if i % 2 == 0 { 0.5 } else { -3.0 }).collect();
        for _ in 0..200 {
            let before = p.theta.clone();
            adam_step(&mut p, &g, &cfg).unwrap();
            for (i, (a, b)) in before.iter().zip(&p.theta).enumerate() {
                let step = a - b;
                assert!((step.abs() / 1e-3 - 1.0).abs() < 1e-6);
                assert_eq!(step.signum(), g[i].signum());
            }
        }
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr() {
        let mut p = init_params(&toy(), 1).unwrap();
        let g: Vec<f64> = vec![1.0; p.len()];
        adam_step(&mut p, &g, &AdamConfig::default()).unwrap();
        let theta = p.theta.clone();
        let m = p.adam_m.clone();
        adam_step(&mut p, &vec![0.0; theta.len()], &AdamConfig { lr: 0.0, ..Default::default() }).unwrap();
        assert_eq!(p.theta, theta);
        adam_step(&mut p, &vec![0.0; theta.len()], &AdamConfig::default()).unwrap();
        assert!(p.adam_m.iter().zip(&m).all(|(a, b)| a.abs() < b.abs()));
        let q = p.theta.clone();
        adam_step(&mut p, &g, &AdamConfig { lr: 0.0, ..Default::default() }).unwrap();
        assert_eq!(p.theta, q);
    }

    #[test]
    fn netparams_round_trip_through_container() {
        let p = init_params(&toy(), 4).unwrap();
        let back = NetParams::from_container(&Container::decode(&p.to_container().encode()).unwrap()).unwrap();
        assert_eq!(back.spec(), p.spec());
        for (a, b) in back.theta.iter().zip(&p.theta) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
