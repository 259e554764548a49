//! Coordinate network mapping a point to excipient fractions.
//!
//! `x -> [cos(2 pi F x), sin(2 pi F x)] -> dense+ReLU (x hidden) -> dense -> softmax`.
//! The Fourier matrix `F` is drawn once and frozen; only the dense layers
//! are trainable.
//!
//! Text serialization (`format_version` 1), one item per line:
//!
//! ```text
//! pilltop-network 1
//! layers <2*n_freq> <hidden...> <S>
//! n_freq <n>
//! freq_scale <f>
//! seed <u64>
//! frequencies
//! <n_freq * 2 values, row-major (f_i0, f_i1)>
//! parameters <count>
//! <values: per layer, weights row-major (out x in), then biases>
//! ```

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::optimize::Adam;

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

/// Architecture and initialization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub n_freq: usize,
    pub freq_scale: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_freq: 64,
            freq_scale: 10.0,
            hidden: vec![40, 40],
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_freq == 0 {
            problems.push("network.n_freq must be at least 1".to_string());
        }
        if !(self.freq_scale.is_finite() && self.freq_scale > 0.0) {
            problems.push(format!(
                "network.freq_scale must be positive (got {})",
                self.freq_scale
            ));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            problems.push("network.hidden sizes must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    n_in: usize,
    n_out: usize,
    /// Row-major `n_out x n_in`.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Layer {
    fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.w.chunks_exact(self.n_in).zip(&self.b))
        {
            *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }
}

/// Fourier projection plus dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    /// `n_freq x 2`, row-major. Frozen.
    frequencies: Vec<f64>,
    layers: Vec<Layer>,
    pub seed: u64,
    pub freq_scale: f64,
}

/// Softmax with max-subtraction.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `[cos(2 pi F x), sin(2 pi F x)]`.
pub fn fourier_features(x: Point, frequencies: &[f64]) -> Vec<f64> {
    let n = frequencies.len() / 2;
    let mut out = vec![0.0; 2 * n];
    for i in 0..n {
        let arg = 2.0 * PI * (frequencies[2 * i] * x[0] + frequencies[2 * i + 1] * x[1]);
        out[i] = arg.cos();
        out[n + i] = arg.sin();
    }
    out
}

/// Activations retained for a backward pass over a batch of points.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Per point: input features, then each hidden layer's post-ReLU output.
    activations: Vec<Vec<Vec<f64>>>,
    pub gamma: Vec<Vec<f64>>,
}

impl NetworkWeights {
    pub fn init(config: &NetworkConfig, n_materials: usize) -> Result<Self> {
        config.validate()?;
        if n_materials == 0 {
            return Err(Error::Config("network needs at least one material".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let freq = Normal::new(0.0, config.freq_scale)
            .map_err(|e| Error::Config(format!("network.freq_scale: {e}")))?;
        let frequencies: Vec<f64> = (0..2 * config.n_freq)
            .map(|_| freq.sample(&mut rng))
            .collect();
        let mut sizes = vec![2 * config.n_freq];
        sizes.extend(&config.hidden);
        sizes.push(n_materials);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let std = (2.0 / (n_in + n_out) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("positive std");
                Layer {
                    n_in,
                    n_out,
                    w: (0..n_in * n_out).map(|_| dist.sample(&mut rng)).collect(),
                    b: vec![0.0; n_out],
                }
            })
            .collect();
        Ok(Self {
            frequencies,
            layers,
            seed: config.seed,
            freq_scale: config.freq_scale,
        })
    }

    pub fn n_materials(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    pub fn n_freq(&self) -> usize {
        self.frequencies.len() / 2
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// Layer widths from the feature vector to the output.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].n_in];
        s.extend(self.layers.iter().map(|l| l.n_out));
        s
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Trainable parameters, per layer weights then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            p.extend(&l.w);
            p.extend(&l.b);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params());
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
    }

    /// Zero the output layer, making every prediction exactly uniform.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.w.iter_mut().for_each(|v| *v = 0.0);
        last.b.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Set the output-layer bias directly.
    pub fn set_output_bias(&mut self, bias: &[f64]) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.b.copy_from_slice(bias);
    }

    fn logits_with(&self, x: Point, mut keep: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
        let mut h = fourier_features(x, &self.frequencies);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.n_out];
            layer.apply(&h, &mut out);
            if let Some(k) = keep.as_deref_mut() {
                k.push(std::mem::take(&mut h));
            }
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out;
        }
        h
    }

    /// Material fractions at `x`.
    pub fn forward(&self, x: Point) -> Vec<f64> {
        softmax(&self.logits_with(x, None))
    }

    pub fn forward_batch(&self, points: &[Point]) -> ForwardCache {
        let mut activations = Vec::with_capacity(points.len());
        let mut gamma = Vec::with_capacity(points.len());
        for &x in points {
            let mut keep = Vec::with_capacity(self.layers.len());
            let z = self.logits_with(x, Some(&mut keep));
            gamma.push(softmax(&z));
            activations.push(keep);
        }
        ForwardCache { activations, gamma }
    }

    /// Gradient of `sum_p gamma_bar[p] . gamma(x_p)` with respect to the
    /// trainable parameters, in [`NetworkWeights::params`] order.
    pub fn backward_batch(&self, cache: &ForwardCache, gamma_bar: &[Vec<f64>]) -> Vec<f64> {
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
            .collect();
        for ((acts, gamma), gbar) in cache.activations.iter().zip(&cache.gamma).zip(gamma_bar) {
            let dot: f64 = gamma.iter().zip(gbar).map(|(g, b)| g * b).sum();
            let mut delta: Vec<f64> = gamma.iter().zip(gbar).map(|(g, b)| g * (b - dot)).collect();
            for (li, layer) in self.layers.iter().enumerate().rev() {
                let input = &acts[li];
                let (gw, gb) = &mut grads[li];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let row = &mut gw[o * layer.n_in..(o + 1) * layer.n_in];
                    for (g, x) in row.iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
                if li == 0 {
                    break;
                }
                let mut next = vec![0.0; layer.n_in];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += d * w;
                    }
                }
                // ReLU mask: the stored input is the post-activation value
                for (n, x) in next.iter_mut().zip(input) {
                    if *x <= 0.0 {
                        *n = 0.0;
                    }
                }
                delta = next;
            }
        }
        let mut out = Vec::with_capacity(self.n_params());
        for (gw, gb) in grads {
            out.extend(gw);
            out.extend(gb);
        }
        out
    }

    /// `d gamma_s / d x_j` at `x`, as `S` rows of `[d/dx, d/dy]`.
    pub fn spatial_gradient(&self, x: Point) -> Vec<[f64; 2]> {
        let n = self.n_freq();
        let mut h = fourier_features(x, &self.frequencies);
        let mut dh = vec![[0.0; 2]; 2 * n];
        for i in 0..n {
            let f = [self.frequencies[2 * i], self.frequencies[2 * i + 1]];
            for j in 0..2 {
                dh[i][j] = -h[n + i] * 2.0 * PI * f[j];
                dh[n + i][j] = h[i] * 2.0 * PI * f[j];
            }
        }
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.n_out];
            layer.apply(&h, &mut out);
            let mut dout = vec![[0.0; 2]; layer.n_out];
            for (o, d) in dout.iter_mut().enumerate() {
                let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                for (w, dx) in row.iter().zip(&dh) {
                    d[0] += w * dx[0];
                    d[1] += w * dx[1];
                }
            }
            if li < last {
                for (v, d) in out.iter_mut().zip(dout.iter_mut()) {
                    if *v <= 0.0 {
                        *v = 0.0;
                        *d = [0.0; 2];
                    }
                }
            }
            h = out;
            dh = dout;
        }
        let gamma = softmax(&h);
        let mean = [0, 1].map(|j| gamma.iter().zip(&dh).map(|(g, d)| g * d[j]).sum::<f64>());
        gamma
            .iter()
            .zip(&dh)
            .map(|(g, d)| [g * (d[0] - mean[0]), g * (d[1] - mean[1])])
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "pilltop-network {WEIGHTS_FORMAT_VERSION}");
        let sizes: Vec<String> = self.layer_sizes().iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "layers {}", sizes.join(" "));
        let _ = writeln!(out, "n_freq {}", self.n_freq());
        let _ = writeln!(out, "freq_scale {:e}", self.freq_scale);
        let _ = writeln!(out, "seed {}", self.seed);
        out.push_str("frequencies\n");
        for v in &self.frequencies {
            let _ = writeln!(out, "{v:e}");
        }
        let _ = writeln!(out, "parameters {}", self.n_params());
        for v in self.params() {
            let _ = writeln!(out, "{v:e}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("network weights: {m}"));
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        fn next<'t>(it: &mut (dyn Iterator<Item = &'t str> + '_)) -> Result<&'t str> {
            it.next()
                .ok_or_else(|| Error::Config("network weights: truncated".into()))
        }
        let field = |it: &mut dyn Iterator<Item = &str>, key: &str| -> Result<String> {
            let line = next(it)?;
            line.strip_prefix(key)
                .map(|r| r.trim().to_string())
                .ok_or_else(|| bad(&format!("expected '{key}', found '{line}'")))
        };
        let version = field(&mut lines, "pilltop-network")?;
        if version != WEIGHTS_FORMAT_VERSION.to_string() {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let sizes: Vec<usize> = field(&mut lines, "layers")?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("layer size")))
            .collect::<Result<_>>()?;
        let n_freq: usize = field(&mut lines, "n_freq")?
            .parse()
            .map_err(|_| bad("n_freq"))?;
        let freq_scale: f64 = field(&mut lines, "freq_scale")?
            .parse()
            .map_err(|_| bad("freq_scale"))?;
        let seed: u64 = field(&mut lines, "seed")?
            .parse()
            .map_err(|_| bad("seed"))?;
        if sizes.len() < 2 || sizes[0] != 2 * n_freq || sizes.contains(&0) {
            return Err(bad("layer sizes inconsistent with n_freq"));
        }
        field(&mut lines, "frequencies")?;
        let numbers = |it: &mut dyn Iterator<Item = &str>, count: usize| -> Result<Vec<f64>> {
            (0..count)
                .map(|_| {
                    let v: f64 = next(it)?.parse().map_err(|_| bad("number"))?;
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(bad("non-finite value"))
                    }
                })
                .collect()
        };
        let frequencies = numbers(&mut lines, 2 * n_freq)?;
        let mut net = Self {
            frequencies,
            layers: sizes
                .windows(2)
                .map(|w| Layer {
                    n_in: w[0],
                    n_out: w[1],
                    w: vec![0.0; w[0] * w[1]],
                    b: vec![0.0; w[1]],
                })
                .collect(),
            seed,
            freq_scale,
        };
        let count: usize = field(&mut lines, "parameters")?
            .parse()
            .map_err(|_| bad("parameter count"))?;
        if count != net.n_params() {
            return Err(bad("parameter count does not match layer sizes"));
        }
        let params = numbers(&mut lines, count)?;
        if lines.next().is_some() {
            return Err(bad("trailing data"));
        }
        net.set_params(&params);
        Ok(net)
    }
}

/// Mean squared deviation of `gamma` from the uniform vector.
pub fn uniformity_error(gamma: &[Vec<f64>]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut count = 0usize;
    for g in gamma {
        let u = 1.0 / g.len() as f64;
        for v in g {
            let d = v - u;
            sum += d * d;
            max = max.max(d.abs());
            count += 1;
        }
    }
    (sum / count.max(1) as f64, max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    pub lr: f64,
    pub max_iters: usize,
    /// Target mean squared deviation from the uniform mixture.
    pub tol: f64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            lr: 8e-3,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainReport {
    pub iterations: usize,
    pub mse: f64,
    pub max_deviation: f64,
    pub converged: bool,
}

/// Train toward a spatially uniform material distribution at `points`.
/// Returns the best weights seen if the tolerance is not reached.
pub fn pretrain_uniform(
    weights: &mut NetworkWeights,
    points: &[Point],
    settings: &PretrainSettings,
) -> PretrainReport {
    let s = weights.n_materials();
    let target = 1.0 / s as f64;
    let mut adam = Adam::new(weights.n_params());
    let mut best = (f64::INFINITY, 0.0, weights.params());
    for it in 0..=settings.max_iters {
        let cache = weights.forward_batch(points);
        let (mse, max) = uniformity_error(&cache.gamma);
        if mse < best.0 {
            best = (mse, max, weights.params());
        }
        if mse <= settings.tol || s == 1 {
            return PretrainReport {
                iterations: it,
                mse,
                max_deviation: max,
                converged: true,
            };
        }
        if it == settings.max_iters {
            break;
        }
        let scale = 2.0 / (points.len() * s) as f64;
        let gbar: Vec<Vec<f64>> = cache
            .gamma
            .iter()
            .map(|g| g.iter().map(|v| scale * (v - target)).collect())
            .collect();
        let grad = weights.backward_batch(&cache, &gbar);
        let mut p = weights.params();
        adam.step(&mut p, &grad, settings.lr);
        weights.set_params(&p);
    }
    log::warn!(
        "uniform pretraining stopped at the iteration cap: mse {:.3e}, max deviation {:.3e}",
        best.0,
        best.1
    );
    weights.set_params(&best.2);
    PretrainReport {
        iterations: settings.max_iters,
        mse: best.0,
        max_deviation: best.1,
        converged: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(s: usize) -> NetworkWeights {
        NetworkWeights::init(&NetworkConfig::default(), s).unwrap()
    }

    #[test]
    fn fourier_feature_values() {
        let f = fourier_features([0.0, 0.0], &[1.0, 2.0, -3.0, 0.5]);
        assert_eq!(f, vec![1.0, 1.0, 0.0, 0.0]);
        let f = fourier_features([0.25, 0.9], &[1.0, 0.0]);
        assert!(f[0].abs() < 1e-15 && (f[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_saturation_and_uniformity() {
        let mut n = net(3);
        n.zero_output_layer();
        for g in n.forward([0.3, 0.7]) {
            assert!((g - 1.0 / 3.0).abs() < 1e-15);
        }
        n.set_output_bias(&[50.0, 0.0, 0.0]);
        let g = n.forward([0.1, 0.2]);
        assert!((g[0] - 1.0).abs() < 1e-20 + 1e-15 && g[1] < 2e-22);
        assert_eq!(net(1).forward([0.4, 0.4]), vec![1.0]);
    }

    #[test]
    fn deterministic_init_and_layout() {
        assert_eq!(net(4), net(4));
        let n = net(4);
        assert_eq!(n.layer_sizes(), vec![128, 40, 40, 4]);
        assert_eq!(n.n_params(), 128 * 40 + 40 + 40 * 40 + 40 + 40 * 4 + 4);
    }

    #[test]
    fn serialization_round_trip() {
        let n = net(5);
        let back = NetworkWeights::from_text(&n.to_text()).unwrap();
        assert_eq!(n, back);
        assert!(NetworkWeights::from_text("pilltop-network 9\n").is_err());
    }
}
