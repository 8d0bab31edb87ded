//! Fixed-weight convolutional feature extractor with hand-written
//! backpropagation to the input.
//!
//! Each layer is a 3x3 convolution with stride 1, zero padding 1, zero bias,
//! followed by a rectifier. The last activation map is averaged over all
//! positions to give the feature vector. Everything runs in binary64.
//!
//! Weights are drawn from `ChaCha8Rng::seed_from_u64(weight_seed)` with
//! `random_range(-s..=s)`, `s = sqrt(1 / (9 * c_in))`, layer by layer, and
//! within a layer in the order kernel row, kernel column, input channel,
//! output channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const KERNEL: usize = 3;
pub const DEFAULT_WIDTH: usize = 32;
pub const DEFAULT_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureNetSpec {
    pub input_channels: usize,
    pub width: usize,
    pub layers: usize,
    pub weight_seed: u64,
}

impl FeatureNetSpec {
    pub fn new(input_channels: usize, weight_seed: u64) -> Self {
        Self {
            input_channels,
            width: DEFAULT_WIDTH,
            layers: DEFAULT_LAYERS,
            weight_seed,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    /// `[ky][kx][cin][cout]`
    weights: Vec<f64>,
}

impl ConvLayer {
    #[inline]
    fn kernel_row(&self, ky: usize, kx: usize, i: usize) -> &[f64] {
        let start = ((ky * KERNEL + kx) * self.cin + i) * self.cout;
        &self.weights[start..start + self.cout]
    }

    fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (cin, cout) = (self.cin, self.cout);
        let mut out = vec![0.0f64; h * w * cout];
        for y in 0..h {
            for x in 0..w {
                let acc = &mut out[(y * w + x) * cout..][..cout];
                for ky in 0..KERNEL {
                    let Some(iy) = (y + ky).checked_sub(1).filter(|&r| r < h) else {
                        continue;
                    };
                    for kx in 0..KERNEL {
                        let Some(ix) = (x + kx).checked_sub(1).filter(|&c| c < w) else {
                            continue;
                        };
                        let px = &input[(iy * w + ix) * cin..][..cin];
                        for (i, &v) in px.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            for (a, &k) in acc.iter_mut().zip(self.kernel_row(ky, kx, i)) {
                                *a += v * k;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradient w.r.t. the layer input given the gradient w.r.t. its
    /// pre-activation output.
    fn backward(&self, grad_out: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (cin, cout) = (self.cin, self.cout);
        let mut grad_in = vec![0.0f64; h * w * cin];
        for y in 0..h {
            for x in 0..w {
                let g = &grad_out[(y * w + x) * cout..][..cout];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for ky in 0..KERNEL {
                    let Some(iy) = (y + ky).checked_sub(1).filter(|&r| r < h) else {
                        continue;
                    };
                    for kx in 0..KERNEL {
                        let Some(ix) = (x + kx).checked_sub(1).filter(|&c| c < w) else {
                            continue;
                        };
                        let dst = &mut grad_in[(iy * w + ix) * cin..][..cin];
                        for (i, d) in dst.iter_mut().enumerate() {
                            let k = self.kernel_row(ky, kx, i);
                            *d += k.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
        grad_in
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub height: usize,
    pub width: usize,
    /// Input of every layer; `inputs[0]` is the image.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation output of every layer.
    pub pre: Vec<Vec<f64>>,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FeatureNet {
    spec: FeatureNetSpec,
    layers: Vec<ConvLayer>,
}

impl FeatureNet {
    pub fn new(spec: FeatureNetSpec) -> Result<Self> {
        if spec.input_channels == 0 || spec.width == 0 || spec.layers == 0 {
            return Err(Error::FeatureSpec(format!(
                "channels, width and layer count must be positive: {spec:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.weight_seed);
        let layers = (0..spec.layers)
            .map(|l| {
                let cin = if l == 0 { spec.input_channels } else { spec.width };
                let cout = spec.width;
                let s = (1.0 / (KERNEL * KERNEL * cin) as f64).sqrt();
                let weights = (0..KERNEL * KERNEL * cin * cout)
                    .map(|_| rng.random_range(-s..=s))
                    .collect();
                ConvLayer { cin, cout, weights }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &FeatureNetSpec {
        &self.spec
    }

    pub fn feature_len(&self) -> usize {
        self.spec.width
    }

    /// Weight `[layer][out][in][ky][kx]`.
    pub fn weight(&self, layer: usize, out: usize, input: usize, ky: usize, kx: usize) -> f64 {
        self.layers[layer].kernel_row(ky, kx, input)[out]
    }

    fn check(&self, len: usize, h: usize, w: usize, c: usize) -> Result<()> {
        if c != self.spec.input_channels {
            return Err(Error::FeatureSpec(format!(
                "image has {c} channels, network expects {}",
                self.spec.input_channels
            )));
        }
        if len != h * w * c || h == 0 || w == 0 {
            return Err(Error::FeatureSpec(format!("{len} values for {h}x{w}x{c}")));
        }
        Ok(())
    }

    /// Forward pass from `input` (HWC layout) starting at `layer`.
    pub fn forward_from(&self, layer: usize, input: Vec<f64>, h: usize, w: usize) -> Trace {
        let mut inputs = vec![input];
        let mut pre = Vec::with_capacity(self.layers.len() - layer);
        for conv in &self.layers[layer..] {
            let z = conv.forward(inputs.last().unwrap(), h, w);
            inputs.push(z.iter().map(|&v| v.max(0.0)).collect());
            pre.push(z);
        }
        let last = inputs.pop().unwrap();
        let width = self.spec.width;
        let mut features = vec![0.0f64; width];
        for px in last.chunks_exact(width) {
            for (f, v) in features.iter_mut().zip(px) {
                *f += v;
            }
        }
        let n = (h * w) as f64;
        features.iter_mut().for_each(|f| *f /= n);
        Trace {
            height: h,
            width: w,
            inputs,
            pre,
            features,
        }
    }

    pub fn forward(&self, input: &[f64], h: usize, w: usize, c: usize) -> Result<Trace> {
        self.check(input.len(), h, w, c)?;
        Ok(self.forward_from(0, input.to_vec(), h, w))
    }

    pub fn features(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let (h, w, c) = image.dims();
        let input: Vec<f64> = image.values().iter().map(|&v| v as f64).collect();
        Ok(self.forward(&input, h, w, c)?.features)
    }

    /// Gradients w.r.t. every recorded layer input, given the gradient w.r.t.
    /// the features. The first entry is the gradient w.r.t. the trace input.
    pub fn backward(&self, trace: &Trace, grad_features: &[f64]) -> Vec<Vec<f64>> {
        let (h, w) = (trace.height, trace.width);
        let first = self.layers.len() - trace.pre.len();
        let n = (h * w) as f64;
        let scaled: Vec<f64> = grad_features.iter().map(|g| g / n).collect();
        let mut grad: Vec<f64> = scaled.iter().copied().cycle().take(h * w * self.spec.width).collect();
        let mut grads = vec![Vec::new(); trace.pre.len()];
        for k in (0..trace.pre.len()).rev() {
            for (g, &z) in grad.iter_mut().zip(&trace.pre[k]) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
            grad = self.layers[first + k].backward(&grad, h, w);
            grads[k] = grad.clone();
        }
        grads
    }

    pub fn input_gradient(&self, trace: &Trace, grad_features: &[f64]) -> Vec<f64> {
        self.backward(trace, grad_features).swap_remove(0)
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straightforward 7-loop convolution over `[out][in][ky][kx]` weights.
    fn oracle_features(seed: u64, img: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<Vec<Vec<f64>>> = (0..c)
            .map(|ch| (0..h).map(|r| (0..w).map(|q| img[(r * w + q) * c + ch]).collect()).collect())
            .collect();
        let mut cin = c;
        for _ in 0..3 {
            let s = (1.0 / (9 * cin) as f64).sqrt();
            let mut k = vec![vec![[[0.0f64; 3]; 3]; cin]; 32];
            for ky in 0..3 {
                for kx in 0..3 {
                    for i in 0..cin {
                        for kernel in k.iter_mut() {
                            kernel[i][ky][kx] = rng.random_range(-s..=s);
                        }
                    }
                }
            }
            let mut y = vec![vec![vec![0.0f64; w]; h]; 32];
            for o in 0..32 {
                for r in 0..h as i64 {
                    for q in 0..w as i64 {
                        let mut acc = 0.0;
                        for i in 0..cin {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let (rr, qq) = (r + ky - 1, q + kx - 1);
                                    if rr >= 0 && qq >= 0 && rr < h as i64 && qq < w as i64 {
                                        acc += k[o][i][ky as usize][kx as usize] * x[i][rr as usize][qq as usize];
                                    }
                                }
                            }
                        }
                        y[o][r as usize][q as usize] = acc.max(0.0);
                    }
                }
            }
            x = y;
            cin = 32;
        }
        x.iter()
            .map(|plane| plane.iter().flatten().sum::<f64>() / (h * w) as f64)
            .collect()
    }

    fn probe(len: usize) -> Vec<f64> {
        (0..len).map(|i| ((i * 37 % 11) as f64 / 10.0) - 0.3).collect()
    }

    #[test]
    fn matches_independent_forward_pass() {
        let net = FeatureNet::new(FeatureNetSpec::new(1, 42)).unwrap();
        let img = probe(16);
        let got = net.forward(&img, 4, 4, 1).unwrap().features;
        let want = oracle_features(42, &img, 4, 4, 1);
        assert_eq!(got.len(), 32);
        assert!(want.iter().any(|&v| v > 0.0));
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1e-3), "{g} vs {w}");
        }

        let net3 = FeatureNet::new(FeatureNetSpec::new(3, 7)).unwrap();
        let img3 = probe(5 * 6 * 3);
        let got = net3.forward(&img3, 5, 6, 3).unwrap().features;
        let want = oracle_features(7, &img3, 5, 6, 3);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1e-3));
        }
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let net = FeatureNet::new(FeatureNetSpec::new(3, 1)).unwrap();
        let f = net.forward(&vec![0.0; 8 * 8 * 3], 8, 8, 3).unwrap().features;
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positive_homogeneity() {
        let net = FeatureNet::new(FeatureNetSpec::new(3, 9)).unwrap();
        let x = probe(6 * 6 * 3);
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let f = net.forward(&x, 6, 6, 3).unwrap().features;
        let f2 = net.forward(&x2, 6, 6, 3).unwrap().features;
        for (a, b) in f.iter().zip(&f2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn channel_mismatch() {
        let net = FeatureNet::new(FeatureNetSpec::new(3, 9)).unwrap();
        assert!(matches!(net.forward(&[0.0; 16], 4, 4, 1), Err(Error::FeatureSpec(_))));
    }

    #[test]
    fn deterministic_weights() {
        let a = FeatureNet::new(FeatureNetSpec::new(3, 5)).unwrap();
        let b = FeatureNet::new(FeatureNetSpec::new(3, 5)).unwrap();
        let c = FeatureNet::new(FeatureNetSpec::new(3, 6)).unwrap();
        assert_eq!(a.layers[2].weights, b.layers[2].weights);
        assert_ne!(a.layers[0].weights, c.layers[0].weights);
        let s = (1.0f64 / 27.0).sqrt();
        assert!(a.layers[0].weights.iter().all(|w| w.abs() <= s));
    }

    /// Central differences of `||f(x) - t||^2` w.r.t. every layer input.
    #[test]
    fn layer_gradients_match_finite_differences() {
        let net = FeatureNet::new(FeatureNetSpec::new(2, 3)).unwrap();
        let (h, w) = (5, 4);
        let x = probe(h * w * 2);
        let target: Vec<f64> = (0..32).map(|k| (k as f64 * 0.01).sin() * 0.05).collect();
        let trace = net.forward(&x, h, w, 2).unwrap();
        let gf: Vec<f64> = trace.features.iter().zip(&target).map(|(f, t)| 2.0 * (f - t)).collect();
        let grads = net.backward(&trace, &gf);
        assert_eq!(grads.len(), 3);
        let hstep = 1e-4;
        let mut checked = 0;
        for layer in 0..3 {
            let base = &trace.inputs[layer];
            for j in (0..base.len()).step_by(7) {
                let eval = |d: f64| {
                    let mut v = base.clone();
                    v[j] += d;
                    let t = net.forward_from(layer, v, h, w);
                    let pattern: Vec<bool> = t.pre.iter().flatten().map(|&z| z > 0.0).collect();
                    (squared_distance(&t.features, &target), pattern)
                };
                let (lp, pp) = eval(hstep);
                let (lm, pm) = eval(-hstep);
                if pp != pm {
                    continue;
                }
                let fd = (lp - lm) / (2.0 * hstep);
                let an = grads[layer][j];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-4, "layer {layer} coord {j}: {an} vs {fd}");
                checked += 1;
            }
        }
        assert!(checked > 20);
    }
}
