//! Layer graph with hand-written reverse mode.
//!
//! Activations are stored row-major per sample; image activations use the
//! `[channels, height, width]` layout inside each row.

use super::{ArchitectureSpec, Family, Normalization};
use crate::error::{FbpcError, Result};
use crate::rng::{standard_normal, FbpcRng};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Layer {
    Dense {
        inp: usize,
        out: usize,
        w: usize,
        b: usize,
    },
    /// 3x3 convolution, stride 1, zero padding 1.
    Conv {
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
        wo: usize,
        bo: usize,
    },
    Norm {
        kind: Normalization,
        channels: usize,
        spatial: usize,
        groups: usize,
        g: usize,
        b: usize,
    },
    Relu,
    /// 2x2 average pooling, stride 2; trailing odd row/column dropped.
    Pool {
        c: usize,
        h: usize,
        w: usize,
    },
}

#[derive(Debug, Clone, Copy)]
enum ParamRole {
    Weight { fan_in: usize },
    Bias,
    Scale,
    Shift,
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    roles: Vec<ParamRole>,
    input_dim: usize,
    num_classes: usize,
}

struct NormCache {
    xhat: Vec<f64>,
    inv: Vec<f64>,
}

struct Tape {
    inputs: Vec<Vec<f64>>,
    norms: Vec<Option<NormCache>>,
}

fn group_count(channels: usize) -> usize {
    (1..=4.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

impl Network {
    pub fn new(spec: &ArchitectureSpec) -> Result<Network> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut roles = Vec::new();
        let push_params = |role: ParamRole, n: usize, roles: &mut Vec<ParamRole>| {
            let off = roles.len();
            roles.extend(std::iter::repeat_n(role, n));
            off
        };
        let norm = spec.normalization;
        match spec.family {
            Family::Mlp => {
                let mut dim = spec.input_shape[0];
                for &width in &spec.hidden_widths {
                    let w = push_params(ParamRole::Weight { fan_in: dim }, dim * width, &mut roles);
                    let b = push_params(ParamRole::Bias, width, &mut roles);
                    layers.push(Layer::Dense {
                        inp: dim,
                        out: width,
                        w,
                        b,
                    });
                    if norm != Normalization::None {
                        let g = push_params(ParamRole::Scale, width, &mut roles);
                        let b = push_params(ParamRole::Shift, width, &mut roles);
                        layers.push(Layer::Norm {
                            kind: norm,
                            channels: width,
                            spatial: 1,
                            groups: group_count(width),
                            g,
                            b,
                        });
                    }
                    layers.push(Layer::Relu);
                    dim = width;
                }
                let w = push_params(
                    ParamRole::Weight { fan_in: dim },
                    dim * spec.num_classes,
                    &mut roles,
                );
                let b = push_params(ParamRole::Bias, spec.num_classes, &mut roles);
                layers.push(Layer::Dense {
                    inp: dim,
                    out: spec.num_classes,
                    w,
                    b,
                });
            }
            Family::ConvnetSmall => {
                let (mut c, mut h, mut wd) = (
                    spec.input_shape[0],
                    spec.input_shape[1],
                    spec.input_shape[2],
                );
                for &width in &spec.hidden_widths {
                    let wo = push_params(
                        ParamRole::Weight { fan_in: c * 9 },
                        width * c * 9,
                        &mut roles,
                    );
                    let bo = push_params(ParamRole::Bias, width, &mut roles);
                    layers.push(Layer::Conv {
                        cin: c,
                        cout: width,
                        h,
                        w: wd,
                        wo,
                        bo,
                    });
                    if norm != Normalization::None {
                        let g = push_params(ParamRole::Scale, width, &mut roles);
                        let b = push_params(ParamRole::Shift, width, &mut roles);
                        layers.push(Layer::Norm {
                            kind: norm,
                            channels: width,
                            spatial: h * wd,
                            groups: group_count(width),
                            g,
                            b,
                        });
                    }
                    layers.push(Layer::Relu);
                    layers.push(Layer::Pool { c: width, h, w: wd });
                    c = width;
                    h /= 2;
                    wd /= 2;
                }
                let dim = c * h * wd;
                let w = push_params(
                    ParamRole::Weight { fan_in: dim },
                    dim * spec.num_classes,
                    &mut roles,
                );
                let b = push_params(ParamRole::Bias, spec.num_classes, &mut roles);
                layers.push(Layer::Dense {
                    inp: dim,
                    out: spec.num_classes,
                    w,
                    b,
                });
            }
        }
        Ok(Network {
            layers,
            roles,
            input_dim: spec.input_dim(),
            num_classes: spec.num_classes,
        })
    }

    pub fn num_params(&self) -> usize {
        self.roles.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn rows(&self, inputs: &[f64]) -> Result<usize> {
        if !inputs.len().is_multiple_of(self.input_dim) {
            return Err(FbpcError::Dimension(format!(
                "{} input values are not a multiple of the input size {}",
                inputs.len(),
                self.input_dim
            )));
        }
        Ok(inputs.len() / self.input_dim)
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(FbpcError::Dimension(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        Ok(())
    }

    /// Prior draw: N(0, 1/fan_in) weights, zero biases and shifts, unit scales.
    pub fn sample_prior(&self, rng: &mut FbpcRng) -> Vec<f64> {
        self.roles
            .iter()
            .map(|role| match role {
                ParamRole::Weight { fan_in } => standard_normal(rng) / (*fan_in as f64).sqrt(),
                ParamRole::Bias | ParamRole::Shift => 0.0,
                ParamRole::Scale => 1.0,
            })
            .collect()
    }

    /// Per-parameter `(mean, variance)` of the Gaussian prior density used in
    /// posterior sampling. Biases and normalization affines get unit variance
    /// around their initial value.
    pub fn prior_moments(&self) -> Vec<(f64, f64)> {
        self.roles
            .iter()
            .map(|role| match role {
                ParamRole::Weight { fan_in } => (0.0, 1.0 / *fan_in as f64),
                ParamRole::Bias | ParamRole::Shift => (0.0, 1.0),
                ParamRole::Scale => (1.0, 1.0),
            })
            .collect()
    }

    /// Negative log prior (up to a constant) and its gradient.
    pub fn prior_neg_log(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let mut value = 0.0;
        let grad = self
            .prior_moments()
            .iter()
            .zip(params)
            .map(|(&(mean, var), &p)| {
                let d = p - mean;
                value += 0.5 * d * d / var;
                d / var
            })
            .collect();
        (value, grad)
    }

    pub fn forward(&self, params: &[f64], inputs: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let n = self.rows(inputs)?;
        let mut x = inputs.to_vec();
        for layer in &self.layers {
            x = self.layer_forward(layer, params, &x, n, None);
        }
        Ok(x)
    }

    fn forward_tape(&self, params: &[f64], inputs: &[f64]) -> Result<(Vec<f64>, Tape, usize)> {
        self.check_params(params)?;
        let n = self.rows(inputs)?;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            norms: Vec::with_capacity(self.layers.len()),
        };
        let mut x = inputs.to_vec();
        for layer in &self.layers {
            let mut cache = None;
            let y = self.layer_forward(layer, params, &x, n, Some(&mut cache));
            tape.inputs.push(x);
            tape.norms.push(cache);
            x = y;
        }
        Ok((x, tape, n))
    }

    /// Vector-Jacobian product of the logits map. Returns the parameter
    /// cotangent (if requested) and the input cotangent (if requested).
    fn vjp(
        &self,
        params: &[f64],
        inputs: &[f64],
        cotangent: &[f64],
        want_params: bool,
        want_inputs: bool,
    ) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
        let (out, tape, n) = self.forward_tape(params, inputs)?;
        if cotangent.len() != out.len() {
            return Err(FbpcError::Dimension(format!(
                "cotangent has {} entries, logits have {}",
                cotangent.len(),
                out.len()
            )));
        }
        let mut gp = if want_params {
            Some(vec![0.0; self.num_params()])
        } else {
            None
        };
        let mut dy = cotangent.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let skip_dx = idx == 0 && !want_inputs;
            dy = self.layer_backward(
                layer,
                params,
                &tape.inputs[idx],
                tape.norms[idx].as_ref(),
                &dy,
                n,
                gp.as_deref_mut(),
                skip_dx,
            );
        }
        Ok((gp, if want_inputs { Some(dy) } else { None }))
    }

    pub fn vjp_inputs(
        &self,
        params: &[f64],
        inputs: &[f64],
        cotangent: &[f64],
    ) -> Result<Vec<f64>> {
        Ok(self
            .vjp(params, inputs, cotangent, false, true)?
            .1
            .expect("requested"))
    }

    pub fn vjp_params(
        &self,
        params: &[f64],
        inputs: &[f64],
        cotangent: &[f64],
    ) -> Result<Vec<f64>> {
        Ok(self
            .vjp(params, inputs, cotangent, true, false)?
            .0
            .expect("requested"))
    }

    /// Gradient of the summed categorical log-likelihood w.r.t. parameters, and its value.
    pub fn loglik_grad_params(
        &self,
        params: &[f64],
        inputs: &[f64],
        labels: &[usize],
    ) -> Result<(Vec<f64>, f64)> {
        let (out, tape, n) = self.forward_tape(params, inputs)?;
        if labels.len() != n {
            return Err(FbpcError::Dimension(format!(
                "{n} rows but {} labels",
                labels.len()
            )));
        }
        let ll = super::log_likelihood(&out, labels)?;
        let mut dy = super::categorical_logit_grad(&out, labels, self.num_classes)?;
        let mut gp = vec![0.0; self.num_params()];
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            dy = self.layer_backward(
                layer,
                params,
                &tape.inputs[idx],
                tape.norms[idx].as_ref(),
                &dy,
                n,
                Some(&mut gp),
                idx == 0,
            );
        }
        Ok((gp, ll))
    }

    fn layer_forward(
        &self,
        layer: &Layer,
        p: &[f64],
        x: &[f64],
        n: usize,
        cache: Option<&mut Option<NormCache>>,
    ) -> Vec<f64> {
        match *layer {
            Layer::Dense { inp, out, w, b } => {
                let mut y = vec![0.0; n * out];
                for s in 0..n {
                    let xs = &x[s * inp..(s + 1) * inp];
                    for o in 0..out {
                        let row = &p[w + o * inp..w + (o + 1) * inp];
                        y[s * out + o] =
                            p[b + o] + row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                y
            }
            Layer::Conv {
                cin,
                cout,
                h,
                w,
                wo,
                bo,
            } => {
                let hw = h * w;
                let mut y = vec![0.0; n * cout * hw];
                for s in 0..n {
                    let xs = &x[s * cin * hw..(s + 1) * cin * hw];
                    let ys = &mut y[s * cout * hw..(s + 1) * cout * hw];
                    for co in 0..cout {
                        let yc = &mut ys[co * hw..(co + 1) * hw];
                        yc.iter_mut().for_each(|v| *v = p[bo + co]);
                        for ci in 0..cin {
                            let xc = &xs[ci * hw..(ci + 1) * hw];
                            let k = &p[wo + (co * cin + ci) * 9..wo + (co * cin + ci + 1) * 9];
                            for i in 0..h {
                                for j in 0..w {
                                    let mut acc = 0.0;
                                    for di in 0..3 {
                                        let ii = i + di;
                                        if ii == 0 || ii > h {
                                            continue;
                                        }
                                        for dj in 0..3 {
                                            let jj = j + dj;
                                            if jj == 0 || jj > w {
                                                continue;
                                            }
                                            acc += k[di * 3 + dj] * xc[(ii - 1) * w + jj - 1];
                                        }
                                    }
                                    yc[i * w + j] += acc;
                                }
                            }
                        }
                    }
                }
                y
            }
            Layer::Norm {
                kind,
                channels,
                spatial,
                groups,
                g,
                b,
            } => {
                let (group_of, n_groups) = norm_groups(kind, n, channels, spatial, groups);
                let mut sum = vec![0.0; n_groups];
                let mut cnt = vec![0.0; n_groups];
                for (e, &v) in x.iter().enumerate() {
                    let gi = group_of(e);
                    sum[gi] += v;
                    cnt[gi] += 1.0;
                }
                let mean: Vec<f64> = sum.iter().zip(&cnt).map(|(s, c)| s / c).collect();
                let mut var = vec![0.0; n_groups];
                for (e, &v) in x.iter().enumerate() {
                    let gi = group_of(e);
                    var[gi] += (v - mean[gi]).powi(2);
                }
                let inv_g: Vec<f64> = var
                    .iter()
                    .zip(&cnt)
                    .map(|(v, c)| 1.0 / (v / c + NORM_EPS).sqrt())
                    .collect();
                let mut y = vec![0.0; x.len()];
                let mut xhat = vec![0.0; x.len()];
                let mut inv = vec![0.0; x.len()];
                for (e, &v) in x.iter().enumerate() {
                    let gi = group_of(e);
                    let c = (e / spatial) % channels;
                    xhat[e] = (v - mean[gi]) * inv_g[gi];
                    inv[e] = inv_g[gi];
                    y[e] = p[g + c] * xhat[e] + p[b + c];
                }
                if let Some(slot) = cache {
                    *slot = Some(NormCache { xhat, inv });
                }
                y
            }
            Layer::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            Layer::Pool { c, h, w } => {
                let (oh, ow) = (h / 2, w / 2);
                let mut y = vec![0.0; n * c * oh * ow];
                for s in 0..n {
                    for ch in 0..c {
                        let xc = &x[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                        let yc = &mut y[(s * c + ch) * oh * ow..(s * c + ch + 1) * oh * ow];
                        for i in 0..oh {
                            for j in 0..ow {
                                yc[i * ow + j] = 0.25
                                    * (xc[2 * i * w + 2 * j]
                                        + xc[2 * i * w + 2 * j + 1]
                                        + xc[(2 * i + 1) * w + 2 * j]
                                        + xc[(2 * i + 1) * w + 2 * j + 1]);
                            }
                        }
                    }
                }
                y
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        layer: &Layer,
        p: &[f64],
        x: &[f64],
        cache: Option<&NormCache>,
        dy: &[f64],
        n: usize,
        gp: Option<&mut [f64]>,
        skip_dx: bool,
    ) -> Vec<f64> {
        match *layer {
            Layer::Dense { inp, out, w, b } => {
                if let Some(gp) = gp {
                    for s in 0..n {
                        let xs = &x[s * inp..(s + 1) * inp];
                        for o in 0..out {
                            let d = dy[s * out + o];
                            gp[b + o] += d;
                            let row = &mut gp[w + o * inp..w + (o + 1) * inp];
                            row.iter_mut().zip(xs).for_each(|(g, xv)| *g += d * xv);
                        }
                    }
                }
                if skip_dx {
                    return Vec::new();
                }
                let mut dx = vec![0.0; n * inp];
                for s in 0..n {
                    let dxs = &mut dx[s * inp..(s + 1) * inp];
                    for o in 0..out {
                        let d = dy[s * out + o];
                        let row = &p[w + o * inp..w + (o + 1) * inp];
                        dxs.iter_mut().zip(row).for_each(|(g, wv)| *g += d * wv);
                    }
                }
                dx
            }
            Layer::Conv {
                cin,
                cout,
                h,
                w,
                wo,
                bo,
            } => {
                let hw = h * w;
                let mut dx = if skip_dx {
                    Vec::new()
                } else {
                    vec![0.0; n * cin * hw]
                };
                let mut gp = gp;
                for s in 0..n {
                    let xs = &x[s * cin * hw..(s + 1) * cin * hw];
                    let dys = &dy[s * cout * hw..(s + 1) * cout * hw];
                    for co in 0..cout {
                        let dyc = &dys[co * hw..(co + 1) * hw];
                        if let Some(gp) = gp.as_deref_mut() {
                            gp[bo + co] += dyc.iter().sum::<f64>();
                        }
                        for ci in 0..cin {
                            let kidx = wo + (co * cin + ci) * 9;
                            let xc = &xs[ci * hw..(ci + 1) * hw];
                            for di in 0..3 {
                                for dj in 0..3 {
                                    let kv = p[kidx + di * 3 + dj];
                                    let mut gk = 0.0;
                                    for i in 0..h {
                                        let ii = i + di;
                                        if ii == 0 || ii > h {
                                            continue;
                                        }
                                        for j in 0..w {
                                            let jj = j + dj;
                                            if jj == 0 || jj > w {
                                                continue;
                                            }
                                            let xi = (ii - 1) * w + jj - 1;
                                            let d = dyc[i * w + j];
                                            gk += d * xc[xi];
                                            if !skip_dx {
                                                dx[s * cin * hw + ci * hw + xi] += d * kv;
                                            }
                                        }
                                    }
                                    if let Some(gp) = gp.as_deref_mut() {
                                        gp[kidx + di * 3 + dj] += gk;
                                    }
                                }
                            }
                        }
                    }
                }
                dx
            }
            Layer::Norm {
                kind,
                channels,
                spatial,
                groups,
                g,
                b,
            } => {
                let cache = cache.expect("norm layers record their statistics");
                let (group_of, n_groups) = norm_groups(kind, n, channels, spatial, groups);
                let mut dxhat = vec![0.0; dy.len()];
                let mut s1 = vec![0.0; n_groups];
                let mut s2 = vec![0.0; n_groups];
                let mut cnt = vec![0.0; n_groups];
                let mut gp = gp;
                for (e, &d) in dy.iter().enumerate() {
                    let c = (e / spatial) % channels;
                    if let Some(gp) = gp.as_deref_mut() {
                        gp[g + c] += d * cache.xhat[e];
                        gp[b + c] += d;
                    }
                    let dh = d * p[g + c];
                    dxhat[e] = dh;
                    let gi = group_of(e);
                    s1[gi] += dh;
                    s2[gi] += dh * cache.xhat[e];
                    cnt[gi] += 1.0;
                }
                if skip_dx {
                    return Vec::new();
                }
                dxhat
                    .iter()
                    .enumerate()
                    .map(|(e, &dh)| {
                        let gi = group_of(e);
                        cache.inv[e] * (dh - s1[gi] / cnt[gi] - cache.xhat[e] * s2[gi] / cnt[gi])
                    })
                    .collect()
            }
            Layer::Relu => dy
                .iter()
                .zip(x)
                .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                .collect(),
            Layer::Pool { c, h, w } => {
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; n * c * h * w];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * h * w;
                        let dyc = &dy[(s * c + ch) * oh * ow..(s * c + ch + 1) * oh * ow];
                        for i in 0..oh {
                            for j in 0..ow {
                                let d = 0.25 * dyc[i * ow + j];
                                dx[base + 2 * i * w + 2 * j] += d;
                                dx[base + 2 * i * w + 2 * j + 1] += d;
                                dx[base + (2 * i + 1) * w + 2 * j] += d;
                                dx[base + (2 * i + 1) * w + 2 * j + 1] += d;
                            }
                        }
                    }
                }
                dx
            }
        }
    }
}

/// Maps an element index `s*C*HW + c*HW + k` to its statistics group.
fn norm_groups(
    kind: Normalization,
    n: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
) -> (impl Fn(usize) -> usize, usize) {
    let per_sample = channels * spatial;
    let cpg = channels / groups;
    let n_groups = match kind {
        Normalization::Layer => n,
        Normalization::Group => n * groups,
        Normalization::Instance => n * channels,
        Normalization::Batch => channels,
        Normalization::None => unreachable!("no norm layer is built for `none`"),
    };
    let f = move |e: usize| {
        let s = e / per_sample;
        let c = (e / spatial) % channels;
        match kind {
            Normalization::Layer => s,
            Normalization::Group => s * groups + c / cpg,
            Normalization::Instance => s * channels + c,
            Normalization::Batch => c,
            Normalization::None => 0,
        }
    };
    (f, n_groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn group_counts() {
        assert_eq!(group_count(8), 4);
        assert_eq!(group_count(6), 3);
        assert_eq!(group_count(5), 1);
        assert_eq!(group_count(1), 1);
    }

    #[test]
    fn convnet_output_shape() {
        let spec = ArchitectureSpec::convnet_small(2, 9, [3, 4], 5)
            .with_normalization(Normalization::Group);
        let net = Network::new(&spec).unwrap();
        let params = net.sample_prior(&mut seeded(0));
        let x: Vec<f64> = (0..3 * 2 * 81).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = net.forward(&params, &x).unwrap();
        assert_eq!(y.len(), 3 * 5);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_norm_couples_rows() {
        let spec = ArchitectureSpec::mlp(2, &[4], 2).with_normalization(Normalization::Batch);
        let net = Network::new(&spec).unwrap();
        let params = net.sample_prior(&mut seeded(2));
        let a = net.forward(&params, &[0.1, 0.2, 0.5, -0.3]).unwrap();
        let b = net.forward(&params, &[0.1, 0.2, 2.5, 1.3]).unwrap();
        assert_ne!(a[..2], b[..2]);
    }
}
