//! Wall-clock comparison of the hexagonal fast path against a square 3×3
//! convolution at matched shapes.

use std::fmt::Write as _;
use std::time::Instant;

use crate::conv::{conv2d_forward, ConvSpec};
use crate::error::{Error, Result};
use crate::hexconv::{hexconv_forward_fast, HexKernelWeights};
use crate::rng::Rng;
use crate::tensor::{kaiming_init, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub spatial: usize,
    pub batch: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            in_channels: 16,
            out_channels: 32,
            spatial: 32,
            batch: 16,
            repeats: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub cfg: BenchConfig,
    /// Per-repeat seconds.
    pub hex: Vec<f64>,
    pub square: Vec<f64>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn spread(v: &[f64]) -> (f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (mean, var.sqrt())
}

impl BenchReport {
    pub fn hex_median(&self) -> f64 {
        median(&self.hex)
    }

    pub fn square_median(&self) -> f64 {
        median(&self.square)
    }

    /// Hex median over square median.
    pub fn ratio(&self) -> f64 {
        self.hex_median() / self.square_median()
    }

    pub fn render(&self) -> String {
        let c = &self.cfg;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "shape: batch {} {}→{} channels {}×{}, {} repeat(s)",
            c.batch, c.in_channels, c.out_channels, c.spatial, c.spatial, c.repeats
        );
        for (name, samples) in [("hex (fast path)", &self.hex), ("square 3x3", &self.square)] {
            let _ = writeln!(out, "{name:>16}: median {:.3} ms", 1e3 * median(samples));
            if samples.len() > 1 {
                let (mean, sd) = spread(samples);
                let _ = writeln!(out, "{:>16}  mean {:.3} ms, sd {:.3} ms", "", 1e3 * mean, 1e3 * sd);
            }
        }
        let _ = writeln!(out, "ratio hex/square: {:.3}", self.ratio());
        out
    }
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.in_channels == 0 || cfg.out_channels == 0 || cfg.spatial == 0 || cfg.batch == 0 {
        return Err(Error::InvalidConfig("bench channels, spatial size and batch must be positive".into()));
    }
    if cfg.repeats == 0 {
        return Err(Error::InvalidConfig("bench needs at least one repeat".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let x = Tensor::<f32>::randn([cfg.batch, cfg.in_channels, cfg.spatial, cfg.spatial], 1.0, &mut rng);
    let hex_w = HexKernelWeights::<f32>::kaiming(cfg.out_channels, cfg.in_channels, &mut rng);
    let spec = ConvSpec::square(cfg.in_channels, cfg.out_channels, 3, 1, 1);
    let sq_w = kaiming_init::<f32>(&mut rng, spec.weight_shape(), cfg.in_channels * 9)?;

    let time = |f: &mut dyn FnMut() -> Result<Tensor<f32>>| -> Result<f64> {
        let start = Instant::now();
        std::hint::black_box(f()?);
        Ok(start.elapsed().as_secs_f64())
    };
    let mut hex_run = || hexconv_forward_fast(&x, &hex_w, None);
    let mut sq_run = || conv2d_forward(&x, &sq_w, None, &spec);
    time(&mut hex_run)?;
    time(&mut sq_run)?;
    let mut report = BenchReport {
        cfg: *cfg,
        hex: Vec::with_capacity(cfg.repeats),
        square: Vec::with_capacity(cfg.repeats),
    };
    for _ in 0..cfg.repeats {
        report.hex.push(time(&mut hex_run)?);
        report.square.push(time(&mut sq_run)?);
    }
    Ok(report)
}
