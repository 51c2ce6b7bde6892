//! Central finite differences for checking analytic gradients, and the
//! layer and model check suites built on them.

use crate::conv::ConvSpec;
use crate::error::Result;
use crate::layers::{softmax_cross_entropy, BatchNorm2d, Conv2d, GlobalAvgPool, HexConv2d, Layer, Linear, Mode, Relu};
use crate::resnet::{build_network, ArchConfig, Network, ShortcutMode};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-6;
/// Smaller step for the full network, where thousands of ReLUs make kink
/// crossings likely at the default step.
pub const MODEL_EPS: f64 = 1e-7;
pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// `∂f/∂t` at every element of `t` by central differences.
pub fn central_difference<T: Scalar>(
    t: &Tensor<T>,
    eps: f64,
    f: impl FnMut(&Tensor<T>) -> f64,
) -> Tensor<T> {
    let idx: Vec<usize> = (0..t.len()).collect();
    let vals = central_difference_at(t, &idx, eps, f);
    Tensor::from_vec(t.shape(), vals.into_iter().map(T::from_f64).collect())
        .expect("shape preserved")
}

/// `∂f/∂t` at the given flat indices only.
pub fn central_difference_at<T: Scalar>(
    t: &Tensor<T>,
    indices: &[usize],
    eps: f64,
    mut f: impl FnMut(&Tensor<T>) -> f64,
) -> Vec<f64> {
    let mut probe = t.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = T::from_f64(orig.as_f64() + eps);
            let plus = f(&probe);
            probe.data_mut()[i] = T::from_f64(orig.as_f64() - eps);
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vectors vanish.
pub fn relative_error<T: Scalar>(analytic: &[T], numeric: &[T]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[T]| v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub rel_error: f64,
    pub tolerance: f64,
    /// Probes dropped because the step straddled a ReLU kink.
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks the input and parameter gradients of `layer` under the scalar
/// objective `Σ y ⊙ R` for a fixed random `R`, over every element.
pub fn check_layer<L: Layer<f64>>(name: &str, layer: &mut L, x: &Tensor<f64>, rng: &mut Rng) -> Result<CheckResult> {
    let y = layer.forward(x, Mode::Train)?;
    let r = Tensor::randn(y.shape(), 1.0, rng);
    for (_, p) in layer.params_mut() {
        p.zero_grad();
    }
    let dx = layer.backward(&r)?;
    let mut analytic = dx.data().to_vec();
    for (_, p) in layer.params() {
        analytic.extend_from_slice(p.grad.data());
    }

    let objective = |layer: &mut L, x: &Tensor<f64>| -> Result<f64> { Ok(dot(&layer.forward(x, Mode::Train)?, &r)) };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + DEFAULT_EPS;
        let plus = objective(layer, &probe)?;
        probe.data_mut()[i] = orig - DEFAULT_EPS;
        let minus = objective(layer, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * DEFAULT_EPS));
    }
    let counts: Vec<usize> = layer.params().iter().map(|(_, p)| p.value.len()).collect();
    for (k, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let orig = layer.params_mut()[k].1.value.data()[i];
            layer.params_mut()[k].1.value.data_mut()[i] = orig + DEFAULT_EPS;
            let plus = objective(layer, x)?;
            layer.params_mut()[k].1.value.data_mut()[i] = orig - DEFAULT_EPS;
            let minus = objective(layer, x)?;
            layer.params_mut()[k].1.value.data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * DEFAULT_EPS));
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        rel_error: relative_error(&analytic, &numeric),
        tolerance: LAYER_TOLERANCE,
        skipped: 0,
    })
}

/// Every layer type on three shapes each, plus the loss.
pub fn layer_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let shapes = [[2, 3, 5, 5], [1, 2, 6, 7], [3, 4, 4, 3]];
    for (i, &shape) in shapes.iter().enumerate() {
        let [_, c, _, _] = shape;
        let x = Tensor::randn(shape, 1.0, &mut rng);
        let o = 2 + i;

        let mut spec = ConvSpec::square(c, o, 3, 1 + i % 2, 1);
        spec.bias = true;
        let mut conv = Conv2d::new(spec, &mut rng)?;
        out.push(check_layer(&format!("conv3x3 {shape:?} stride {}", spec.stride.0), &mut conv, &x, &mut rng)?);

        let mut proj = Conv2d::new(ConvSpec::square(c, o, 1, 2, 0), &mut rng)?;
        out.push(check_layer(&format!("conv1x1 {shape:?} stride 2"), &mut proj, &x, &mut rng)?);

        for stride in [1, 2] {
            let mut hex = HexConv2d::new(c, o, stride, i == 0, &mut rng)?;
            out.push(check_layer(&format!("hexconv {shape:?} stride {stride}"), &mut hex, &x, &mut rng)?);
        }

        let mut bn = BatchNorm2d::new(c);
        for (_, p) in bn.params_mut() {
            let noisy = Tensor::randn(p.value.shape(), 0.5, &mut rng);
            p.value.add_assign(&noisy)?;
        }
        out.push(check_layer(&format!("batchnorm {shape:?}"), &mut bn, &x, &mut rng)?);

        out.push(check_layer(&format!("relu {shape:?}"), &mut Relu::new(), &x, &mut rng)?);
        out.push(check_layer(&format!("global_avg_pool {shape:?}"), &mut GlobalAvgPool::default(), &x, &mut rng)?);

        let features = Tensor::randn([shape[0], c * 2, 1, 1], 1.0, &mut rng);
        let mut fc = Linear::new(c * 2, o, &mut rng)?;
        out.push(check_layer(&format!("linear {:?}", features.shape()), &mut fc, &features, &mut rng)?);

        let scores = Tensor::<f64>::randn([shape[0], 10, 1, 1], 2.0, &mut rng);
        let labels: Vec<usize> = (0..shape[0]).map(|_| rng.below(10)).collect();
        let (_, g) = softmax_cross_entropy(&scores, &labels)?;
        let numeric = central_difference(&scores, DEFAULT_EPS, |s| softmax_cross_entropy(s, &labels).unwrap().0);
        out.push(CheckResult {
            name: format!("softmax_cross_entropy {:?}", scores.shape()),
            rel_error: relative_error(g.data(), numeric.data()),
            tolerance: LAYER_TOLERANCE,
            skipped: 0,
        });
    }
    Ok(out)
}

/// Full-network check: cross-entropy of a batch of two random images,
/// `probes` random elements of every parameter tensor and of the input.
/// One result per tensor.
///
/// A probe whose one-sided differences disagree has stepped across a ReLU
/// kink, where the loss is not differentiable; such probes are skipped and
/// counted.
pub fn model_check(depth: usize, shortcut: ShortcutMode, seed: u64, probes: usize) -> Result<Vec<CheckResult>> {
    let cfg = ArchConfig::new(depth, shortcut)?;
    let mut rng = Rng::new(seed);
    let mut net = build_network::<f64>(&cfg, &mut rng)?;
    let x = Tensor::randn([2, 3, 32, 32], 1.0, &mut rng);
    let labels = [rng.below(10), rng.below(10)];

    net.zero_grads();
    let scores = net.forward(&x, Mode::Train)?;
    let (base, g) = softmax_cross_entropy(&scores, &labels)?;
    let dx = net.backward(&g)?;

    let loss = |net: &mut Network<f64>, x: &Tensor<f64>| -> Result<f64> {
        let s = net.forward(x, Mode::Train)?;
        Ok(softmax_cross_entropy(&s, &labels)?.0)
    };
    let pick = |n: usize, rng: &mut Rng| -> Vec<usize> { (0..probes.min(n)).map(|_| rng.below(n)).collect() };
    // (analytic, numeric) pairs and the number of kink-straddling probes
    let finish = |name: String, pairs: Vec<Option<(f64, f64)>>| -> CheckResult {
        let skipped = pairs.iter().filter(|p| p.is_none()).count();
        let (a, n): (Vec<f64>, Vec<f64>) = pairs.into_iter().flatten().unzip();
        CheckResult {
            name,
            rel_error: relative_error(&a, &n),
            tolerance: MODEL_TOLERANCE,
            skipped,
        }
    };
    let judge = |analytic: f64, plus: f64, minus: f64| -> Option<(f64, f64)> {
        let fwd = (plus - base) / MODEL_EPS;
        let bwd = (base - minus) / MODEL_EPS;
        let smooth = (fwd - bwd).abs() <= 1e-6 + 1e-4 * (fwd.abs() + bwd.abs());
        smooth.then_some((analytic, (plus - minus) / (2.0 * MODEL_EPS)))
    };

    let mut out = Vec::new();
    let mut probe = x.clone();
    let mut pairs = Vec::new();
    for i in pick(x.len(), &mut rng) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + MODEL_EPS;
        let plus = loss(&mut net, &probe)?;
        probe.data_mut()[i] = orig - MODEL_EPS;
        let minus = loss(&mut net, &probe)?;
        probe.data_mut()[i] = orig;
        pairs.push(judge(dx.data()[i], plus, minus));
    }
    out.push(finish("input".into(), pairs));

    let grads: Vec<(String, Tensor<f64>)> = net
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.clone()))
        .collect();
    for (k, (name, grad)) in grads.into_iter().enumerate() {
        let mut pairs = Vec::new();
        for i in pick(grad.len(), &mut rng) {
            let orig = net.named_params_mut()[k].1.value.data()[i];
            net.named_params_mut()[k].1.value.data_mut()[i] = orig + MODEL_EPS;
            let plus = loss(&mut net, &x)?;
            net.named_params_mut()[k].1.value.data_mut()[i] = orig - MODEL_EPS;
            let minus = loss(&mut net, &x)?;
            net.named_params_mut()[k].1.value.data_mut()[i] = orig;
            pairs.push(judge(grad.data()[i], plus, minus));
        }
        out.push(finish(name, pairs));
    }
    Ok(out)
}
