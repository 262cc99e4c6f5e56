use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::spec::{ActivationKind, HeadMode, LayerSpec, NetworkSpec, PoolKind, Shape};
use super::weights::WeightBundle;
use crate::error::{ensure, Result};

/// Evaluation runs without masking. Training draws dropout masks from `rng`;
/// `feature_dropout` is an extra inverted dropout on the shared feature
/// before the class heads.
pub enum Mode<'r> {
    Eval,
    Train {
        rng: &'r mut ChaCha8Rng,
        feature_dropout: f64,
    },
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    /// Shared feature (before any training-time feature dropout).
    pub feature: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Gradient buffers keyed like the bundle entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub entries: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(bundle: &WeightBundle) -> Self {
        Gradients {
            entries: bundle
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), vec![0.0; v.len()]))
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for g in self.entries.values_mut() {
            g.fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.entries.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    fn slot(&mut self, name: &str) -> &mut [f64] {
        self.entries
            .get_mut(name)
            .map(Vec::as_mut_slice)
            .unwrap_or_else(|| panic!("gradient slot '{name}' missing"))
    }
}

enum Cache {
    None,
    ArgMax(Vec<usize>),
    Mask(Vec<f64>),
}

/// Activations recorded by a training-mode forward pass.
pub struct Trace {
    /// `acts[0]` is the input, `acts[i + 1]` the output of backbone layer `i`.
    acts: Vec<Vec<f64>>,
    caches: Vec<Cache>,
    feature: Vec<f64>,
    head_input: Vec<f64>,
    feature_mask: Option<Vec<f64>>,
    pub output: NetOutput,
}

/// A spec paired with a bundle that has been checked against it.
pub struct Network<'a> {
    spec: &'a NetworkSpec,
    bundle: &'a WeightBundle,
    shapes: Vec<Shape>,
}

impl<'a> Network<'a> {
    pub fn new(spec: &'a NetworkSpec, bundle: &'a WeightBundle) -> Result<Self> {
        spec.validate()?;
        bundle.check_against(spec)?;
        let mut shapes = vec![spec.input];
        for layer in &spec.backbone {
            let next = layer.output_shape(*shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(Network {
            spec,
            bundle,
            shapes,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.spec
    }

    fn param(&self, name: &str) -> &[f64] {
        &self.bundle.entries[name].data
    }

    fn opt_param(&self, name: &str) -> Option<&[f64]> {
        self.bundle.entries.get(name).map(|a| a.data.as_slice())
    }

    pub fn forward(&self, input: &[f64], mode: Mode<'_>) -> Result<NetOutput> {
        Ok(self.forward_traced(input, mode)?.output)
    }

    pub fn forward_traced(&self, input: &[f64], mode: Mode<'_>) -> Result<Trace> {
        ensure!(
            input.len() == self.spec.input.len(),
            "input has {} values, network '{}' expects {} ({})",
            input.len(),
            self.spec.name,
            self.spec.input.len(),
            self.spec.input
        );
        let train = mode.is_train();
        let (mut rng, feature_dropout) = match mode {
            Mode::Eval => (None, 0.0),
            Mode::Train {
                rng,
                feature_dropout,
            } => (Some(rng), feature_dropout),
        };
        ensure!(
            (0.0..1.0).contains(&feature_dropout),
            "feature dropout must be in [0, 1)"
        );

        let mut acts = Vec::with_capacity(self.spec.backbone.len() + 1);
        let mut caches = Vec::with_capacity(self.spec.backbone.len());
        acts.push(input.to_vec());
        for (i, layer) in self.spec.backbone.iter().enumerate() {
            let x = acts.last().expect("non-empty");
            let (ish, osh) = (self.shapes[i], self.shapes[i + 1]);
            let (y, cache) = match *layer {
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => (
                    conv_forward(
                        x,
                        ish,
                        osh,
                        self.param(&format!("backbone.{i}.weight")),
                        self.opt_param(&format!("backbone.{i}.bias")),
                        kernel,
                        stride,
                        padding,
                    ),
                    Cache::None,
                ),
                LayerSpec::FullyConnected { .. } => (
                    fc_forward(
                        x,
                        self.param(&format!("backbone.{i}.weight")),
                        self.opt_param(&format!("backbone.{i}.bias")),
                        osh.len(),
                    ),
                    Cache::None,
                ),
                LayerSpec::Pool { pool, size, stride } => {
                    let (y, idx) = pool_forward(x, ish, osh, pool, size, stride);
                    (y, idx.map_or(Cache::None, Cache::ArgMax))
                }
                LayerSpec::Activation { func } => (activate(x, func), Cache::None),
                LayerSpec::Dropout { rate } => match rng.as_deref_mut() {
                    Some(r) if rate > 0.0 => {
                        let mask = dropout_mask(r, x.len(), rate);
                        (x.iter().zip(&mask).map(|(a, m)| a * m).collect(), Cache::Mask(mask))
                    }
                    _ => (x.clone(), Cache::None),
                },
                LayerSpec::Flatten => (x.clone(), Cache::None),
            };
            acts.push(y);
            caches.push(cache);
        }

        let backbone_out = acts.last().expect("non-empty");
        let feature = match &self.spec.shared_head {
            Some(LayerSpec::FullyConnected { out_features, .. }) => {
                let pre = fc_forward(
                    backbone_out,
                    self.param("shared.weight"),
                    self.opt_param("shared.bias"),
                    *out_features,
                );
                activate(&pre, self.spec.shared_activation)
            }
            Some(_) => unreachable!("validated: shared head is fully connected"),
            None => backbone_out.clone(),
        };

        let (head_input, feature_mask) = match rng.as_deref_mut() {
            Some(r) if train && feature_dropout > 0.0 => {
                let mask = dropout_mask(r, feature.len(), feature_dropout);
                (
                    feature.iter().zip(&mask).map(|(a, m)| a * m).collect(),
                    Some(mask),
                )
            }
            _ => (feature.clone(), None),
        };

        let mut logits = Vec::with_capacity(self.spec.logit_count());
        for head in &self.spec.class_heads {
            let out_features = match head.layer {
                LayerSpec::FullyConnected { out_features, .. } => out_features,
                _ => unreachable!("validated: heads are fully connected"),
            };
            let w = self.param(&format!("head.{}.weight", head.name));
            match self.spec.head_mode {
                HeadMode::Linear => {
                    let b = self.opt_param(&format!("head.{}.bias", head.name));
                    logits.extend(fc_forward(&head_input, w, b, out_features));
                }
                HeadMode::Cosine { scale } => {
                    logits.push(scale * cosine(w, &head_input));
                }
            }
        }

        Ok(Trace {
            acts,
            caches,
            feature: feature.clone(),
            head_input,
            feature_mask,
            output: NetOutput { feature, logits },
        })
    }

    /// Accumulate parameter gradients for a loss whose gradient with respect
    /// to the logits is `d_logits` and, optionally, with respect to the
    /// (pre-dropout) shared feature is `d_feature`.
    pub fn backward(
        &self,
        trace: &Trace,
        d_logits: &[f64],
        d_feature: Option<&[f64]>,
        grads: &mut Gradients,
    ) {
        assert_eq!(d_logits.len(), trace.output.logits.len());
        let h = &trace.head_input;
        let mut dh = vec![0.0; h.len()];
        let mut offset = 0;
        for head in &self.spec.class_heads {
            let out_features = match head.layer {
                LayerSpec::FullyConnected { out_features, .. } => out_features,
                _ => unreachable!(),
            };
            let wname = format!("head.{}.weight", head.name);
            let w = self.param(&wname);
            let dz = &d_logits[offset..offset + out_features];
            match self.spec.head_mode {
                HeadMode::Linear => {
                    fc_backward(h, w, dz, grads.slot(&wname), Some(&mut dh));
                    let bname = format!("head.{}.bias", head.name);
                    if let Some(db) = grads.entries.get_mut(&bname) {
                        for (b, d) in db.iter_mut().zip(dz) {
                            *b += d;
                        }
                    }
                }
                HeadMode::Cosine { scale } => {
                    cosine_backward(w, h, scale * dz[0], grads.slot(&wname), &mut dh);
                }
            }
            offset += out_features;
        }

        let mut dfeat = match &trace.feature_mask {
            Some(mask) => dh.iter().zip(mask).map(|(a, m)| a * m).collect(),
            None => dh,
        };
        if let Some(extra) = d_feature {
            for (a, b) in dfeat.iter_mut().zip(extra) {
                *a += b;
            }
        }

        let backbone_out = trace.acts.last().expect("non-empty");
        let needs_backbone_grad = !self.spec.backbone.is_empty()
            && self.spec.backbone.iter().any(LayerSpec::has_params);
        let mut dx = match &self.spec.shared_head {
            Some(_) => {
                let dpre = activation_backward(&trace.feature, &dfeat, self.spec.shared_activation);
                let mut dx = vec![0.0; backbone_out.len()];
                let w = self.param("shared.weight");
                fc_backward(
                    backbone_out,
                    w,
                    &dpre,
                    grads.slot("shared.weight"),
                    needs_backbone_grad.then_some(&mut dx),
                );
                if let Some(db) = grads.entries.get_mut("shared.bias") {
                    for (b, d) in db.iter_mut().zip(&dpre) {
                        *b += d;
                    }
                }
                dx
            }
            None => dfeat,
        };
        if !needs_backbone_grad {
            return;
        }

        let first_param = self
            .spec
            .backbone
            .iter()
            .position(LayerSpec::has_params)
            .expect("checked above");
        for i in (first_param..self.spec.backbone.len()).rev() {
            let layer = &self.spec.backbone[i];
            let (x, y) = (&trace.acts[i], &trace.acts[i + 1]);
            let (ish, osh) = (self.shapes[i], self.shapes[i + 1]);
            let want_input_grad = i > first_param;
            dx = match *layer {
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let wname = format!("backbone.{i}.weight");
                    let bname = format!("backbone.{i}.bias");
                    if let Some(db) = grads.entries.get_mut(&bname) {
                        let plane = osh.height * osh.width;
                        for (o, b) in db.iter_mut().enumerate() {
                            *b += dx[o * plane..(o + 1) * plane].iter().sum::<f64>();
                        }
                    }
                    let w = self.param(&wname);
                    let mut din = vec![0.0; if want_input_grad { x.len() } else { 0 }];
                    conv_backward(
                        x,
                        ish,
                        osh,
                        w,
                        &dx,
                        kernel,
                        stride,
                        padding,
                        grads.slot(&wname),
                        want_input_grad.then_some(&mut din),
                    );
                    din
                }
                LayerSpec::FullyConnected { .. } => {
                    let wname = format!("backbone.{i}.weight");
                    let bname = format!("backbone.{i}.bias");
                    if let Some(db) = grads.entries.get_mut(&bname) {
                        for (b, d) in db.iter_mut().zip(&dx) {
                            *b += d;
                        }
                    }
                    let w = self.param(&wname);
                    let mut din = vec![0.0; if want_input_grad { x.len() } else { 0 }];
                    fc_backward(x, w, &dx, grads.slot(&wname), want_input_grad.then_some(&mut din));
                    din
                }
                LayerSpec::Pool { pool, size, stride } => {
                    pool_backward(&dx, ish, osh, pool, size, stride, &trace.caches[i])
                }
                LayerSpec::Activation { func } => activation_backward(y, &dx, func),
                LayerSpec::Dropout { .. } => match &trace.caches[i] {
                    Cache::Mask(mask) => dx.iter().zip(mask).map(|(a, m)| a * m).collect(),
                    _ => dx,
                },
                LayerSpec::Flatten => dx,
            };
            if !want_input_grad {
                break;
            }
        }
    }
}

/// Inverted dropout mask: 0 with probability `rate`, else `1 / (1 - rate)`.
fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

fn activate(x: &[f64], func: ActivationKind) -> Vec<f64> {
    match func {
        ActivationKind::Relu => x.iter().map(|v| v.max(0.0)).collect(),
        ActivationKind::Tanh => x.iter().map(|v| v.tanh()).collect(),
        ActivationKind::Sigmoid => x.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
        ActivationKind::Identity => x.to_vec(),
    }
}

/// Backward through an activation given its output `y`.
fn activation_backward(y: &[f64], dy: &[f64], func: ActivationKind) -> Vec<f64> {
    match func {
        ActivationKind::Relu => y
            .iter()
            .zip(dy)
            .map(|(o, d)| if *o > 0.0 { *d } else { 0.0 })
            .collect(),
        ActivationKind::Tanh => y.iter().zip(dy).map(|(o, d)| d * (1.0 - o * o)).collect(),
        ActivationKind::Sigmoid => y.iter().zip(dy).map(|(o, d)| d * o * (1.0 - o)).collect(),
        ActivationKind::Identity => dy.to_vec(),
    }
}

fn fc_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, out: usize) -> Vec<f64> {
    let n = x.len();
    (0..out)
        .map(|o| {
            let row = &w[o * n..(o + 1) * n];
            let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            dot + b.map_or(0.0, |b| b[o])
        })
        .collect()
}

fn fc_backward(x: &[f64], w: &[f64], dy: &[f64], dw: &mut [f64], dx: Option<&mut Vec<f64>>) {
    let n = x.len();
    for (o, d) in dy.iter().enumerate() {
        if *d == 0.0 {
            continue;
        }
        for (g, xv) in dw[o * n..(o + 1) * n].iter_mut().zip(x) {
            *g += d * xv;
        }
    }
    if let Some(dx) = dx {
        for (o, d) in dy.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            for (g, wv) in dx.iter_mut().zip(&w[o * n..(o + 1) * n]) {
                *g += d * wv;
            }
        }
    }
}

const NORM_EPS: f64 = 1e-12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS)
}

fn cosine(w: &[f64], h: &[f64]) -> f64 {
    let dot: f64 = w.iter().zip(h).map(|(a, b)| a * b).sum();
    dot / (norm(w) * norm(h))
}

fn cosine_backward(w: &[f64], h: &[f64], dc: f64, dw: &mut [f64], dh: &mut [f64]) {
    let (nw, nh) = (norm(w), norm(h));
    let c = cosine(w, h);
    for j in 0..w.len() {
        dw[j] += dc * (h[j] / (nw * nh) - c * w[j] / (nw * nw));
        dh[j] += dc * (w[j] / (nw * nh) - c * h[j] / (nh * nh));
    }
}

/// Output columns `ox` for which `ox * stride + k - pad` lands inside `0..len`.
fn valid_range(len: usize, out_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    ish: Shape,
    osh: Shape,
    w: &[f64],
    b: Option<&[f64]>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (ic, ih, iw) = (ish.channels, ish.height, ish.width);
    let (oc, oh, ow) = (osh.channels, osh.height, osh.width);
    let mut out = vec![0.0; osh.len()];
    for o in 0..oc {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        if let Some(b) = b {
            plane.fill(b[o]);
        }
        for c in 0..ic {
            let ip = &x[c * ih * iw..(c + 1) * ih * iw];
            for ky in 0..k {
                let (ylo, yhi) = valid_range(ih, oh, ky, stride, pad);
                for kx in 0..k {
                    let wv = w[((o * ic + c) * k + ky) * k + kx];
                    let (xlo, xhi) = valid_range(iw, ow, kx, stride, pad);
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - pad;
                        let row = &ip[iy * iw..(iy + 1) * iw];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let shift = kx as isize - pad as isize;
                            let src = &row[(xlo as isize + shift) as usize..(xhi as isize + shift) as usize];
                            for (a, v) in orow[xlo..xhi].iter_mut().zip(src) {
                                *a += wv * v;
                            }
                        } else {
                            for ox in xlo..xhi {
                                orow[ox] += wv * row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    ish: Shape,
    osh: Shape,
    w: &[f64],
    dy: &[f64],
    k: usize,
    stride: usize,
    pad: usize,
    dw: &mut [f64],
    mut dx: Option<&mut Vec<f64>>,
) {
    let (ic, ih, iw) = (ish.channels, ish.height, ish.width);
    let (oc, oh, ow) = (osh.channels, osh.height, osh.width);
    for o in 0..oc {
        let dplane = &dy[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..ic {
            let ip = &x[c * ih * iw..(c + 1) * ih * iw];
            for ky in 0..k {
                let (ylo, yhi) = valid_range(ih, oh, ky, stride, pad);
                for kx in 0..k {
                    let widx = ((o * ic + c) * k + ky) * k + kx;
                    let wv = w[widx];
                    let (xlo, xhi) = valid_range(iw, ow, kx, stride, pad);
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - pad;
                        let drow = &dplane[oy * ow..(oy + 1) * ow];
                        for ox in xlo..xhi {
                            let ix = ox * stride + kx - pad;
                            acc += drow[ox] * ip[iy * iw + ix];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let dxp = &mut dx[c * ih * iw..(c + 1) * ih * iw];
                            for ox in xlo..xhi {
                                let ix = ox * stride + kx - pad;
                                dxp[iy * iw + ix] += wv * drow[ox];
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
}

fn pool_forward(
    x: &[f64],
    ish: Shape,
    osh: Shape,
    pool: PoolKind,
    size: usize,
    stride: usize,
) -> (Vec<f64>, Option<Vec<usize>>) {
    let (ih, iw) = (ish.height, ish.width);
    let (oh, ow) = (osh.height, osh.width);
    let mut out = vec![0.0; osh.len()];
    let mut idx = match pool {
        PoolKind::Max => Some(vec![0usize; osh.len()]),
        PoolKind::Avg => None,
    };
    let area = (size * size) as f64;
    for c in 0..ish.channels {
        let base = c * ih * iw;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (c * oh + oy) * ow + ox;
                match pool {
                    PoolKind::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dy in 0..size {
                            for dx in 0..size {
                                let i = base + (oy * stride + dy) * iw + ox * stride + dx;
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                        out[o] = best;
                        idx.as_mut().expect("max pool")[o] = best_i;
                    }
                    PoolKind::Avg => {
                        let mut sum = 0.0;
                        for dy in 0..size {
                            for dx in 0..size {
                                sum += x[base + (oy * stride + dy) * iw + ox * stride + dx];
                            }
                        }
                        out[o] = sum / area;
                    }
                }
            }
        }
    }
    (out, idx)
}

fn pool_backward(
    dy: &[f64],
    ish: Shape,
    osh: Shape,
    pool: PoolKind,
    size: usize,
    stride: usize,
    cache: &Cache,
) -> Vec<f64> {
    let mut dx = vec![0.0; ish.len()];
    match (pool, cache) {
        (PoolKind::Max, Cache::ArgMax(idx)) => {
            for (o, i) in idx.iter().enumerate() {
                dx[*i] += dy[o];
            }
        }
        _ => {
            let (ih, iw) = (ish.height, ish.width);
            let (oh, ow) = (osh.height, osh.width);
            let area = (size * size) as f64;
            for c in 0..ish.channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dy[(c * oh + oy) * ow + ox] / area;
                        for ddy in 0..size {
                            for ddx in 0..size {
                                dx[c * ih * iw + (oy * stride + ddy) * iw + ox * stride + ddx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::weights::{init_weights, ParamArray};
    use rand::SeedableRng;

    fn zero_bundle(spec: &NetworkSpec) -> WeightBundle {
        let mut b = init_weights(spec, 0).unwrap();
        for arr in b.entries.values_mut() {
            arr.data.fill(0.0);
        }
        b
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let spec = NetworkSpec::conv_blocks("z", 8, &[2, 2], 4, &["a".into(), "b".into()]).unwrap();
        let bundle = zero_bundle(&spec);
        let net = Network::new(&spec, &bundle).unwrap();
        let img: Vec<f64> = (0..64).map(|i| i as f64 / 64.0).collect();
        let out = net.forward(&img, Mode::Eval).unwrap();
        assert!(out.feature.iter().all(|v| *v == 0.0));
        assert!(out.logits.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_by_one_conv_hand_evaluation() {
        let spec = NetworkSpec {
            name: "c".into(),
            input: Shape::new(1, 3, 3),
            backbone: vec![LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 1,
                stride: 1,
                padding: 0,
                bias: true,
            }],
            shared_head: None,
            shared_activation: ActivationKind::Identity,
            class_heads: vec![],
            head_mode: HeadMode::Linear,
        };
        let mut bundle = init_weights(&spec, 0).unwrap();
        bundle.entries.insert(
            "backbone.0.weight".into(),
            ParamArray {
                shape: vec![1, 1, 1, 1],
                data: vec![2.0],
            },
        );
        let net = Network::new(&spec, &bundle).unwrap();
        let out = net.forward(&[3.0; 9], Mode::Eval).unwrap();
        assert_eq!(out.feature, vec![6.0; 9]);
    }

    #[test]
    fn padded_and_strided_conv_matches_naive_loop() {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (2, 2, 0), (5, 1, 2), (3, 3, 0)] {
            let ish = Shape::new(2, 7, 6);
            let layer = LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: k,
                stride,
                padding: pad,
                bias: false,
            };
            let osh = layer.output_shape(ish).unwrap();
            let x: Vec<f64> = (0..ish.len()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
            let got = conv_forward(&x, ish, osh, &w, None, k, stride, pad);
            for o in 0..3 {
                for oy in 0..osh.height {
                    for ox in 0..osh.width {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                        continue;
                                    }
                                    acc += w[((o * 2 + c) * k + ky) * k + kx]
                                        * x[(c * 7 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                        assert_eq!(got[(o * osh.height + oy) * osh.width + ox], acc);
                    }
                }
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let spec = NetworkSpec::conv_blocks("d", 8, &[2], 4, &["a".into(), "b".into()]).unwrap();
        let bundle = init_weights(&spec, 5).unwrap();
        let net = Network::new(&spec, &bundle).unwrap();
        let img: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let a = net.forward(&img, Mode::Eval).unwrap();
        let b = net.forward(&img, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_and_fingerprint_errors() {
        let spec = NetworkSpec::conv_blocks("d", 8, &[2], 4, &["a".into()]).unwrap();
        let bundle = init_weights(&spec, 5).unwrap();
        let net = Network::new(&spec, &bundle).unwrap();
        assert!(net.forward(&[0.0; 10], Mode::Eval).is_err());
        let other = spec.with_heads("e", &["x".into(), "y".into()]).unwrap();
        assert!(matches!(
            Network::new(&other, &bundle),
            Err(crate::KtdError::State(_))
        ));
    }

    #[test]
    fn dropout_rate_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rate = 0.3;
        let mask = dropout_mask(&mut rng, 200_000, rate);
        let dropped = mask.iter().filter(|m| **m == 0.0).count() as f64 / mask.len() as f64;
        assert!((dropped - rate).abs() < 0.005, "{dropped}");
        let mean = mask.iter().sum::<f64>() / mask.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }
}
