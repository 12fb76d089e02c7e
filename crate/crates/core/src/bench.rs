//! Inference timing of the selective scan, a Mamba+ branch and multi-head
//! attention over a range of sequence lengths.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::bimamba::{selective_scan, MambaPlus, SsmConfig};
use crate::nn::Ctx;
use crate::numerics::{no_grad, ParamStore, Rng, Tensor, TensorError};
use crate::seconformer::Mhsa;

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    /// Each cell repeats until this much time has been spent (at least once).
    pub budget: Duration,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { lengths: (6..=13).map(|p| 1 << p).collect(), d_model: 32, heads: 2, budget: Duration::from_millis(200), seed: 0 }
    }
}

/// Mean time per call in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub scan_ms: f64,
    pub mamba_ms: f64,
    pub mhsa_ms: f64,
}

fn time_per_call<F: FnMut() -> Result<(), TensorError>>(budget: Duration, mut f: F) -> Result<f64, TensorError> {
    f()?;
    let start = Instant::now();
    let mut calls = 0u32;
    while calls == 0 || start.elapsed() < budget {
        f()?;
        calls += 1;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / calls as f64)
}

pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>, TensorError> {
    let mut rng = Rng::labeled(cfg.seed, "bench");
    let mut store = ParamStore::new();
    let ssm = SsmConfig::new(cfg.d_model);
    let mamba = MambaPlus::new(&mut store, "mamba", ssm, &mut rng)?;
    let mhsa = Mhsa::new(&mut store, "mhsa", cfg.d_model, cfg.heads, &mut rng)?;
    let ctx = Ctx::eval(&store);
    let (e, n) = (ssm.inner(), ssm.state);
    no_grad(|| {
        cfg.lengths
            .iter()
            .map(|&l| {
                let abar = Tensor::new(&[l, e, n], rng.uniform_vec(l * e * n, 0.5, 0.99))?;
                let bbar = Tensor::new(&[l, e, n], rng.normal_vec(l * e * n, 0.1))?;
                let c = Tensor::new(&[l, n], rng.normal_vec(l * n, 1.0))?;
                let x = Tensor::new(&[l, e], rng.normal_vec(l * e, 1.0))?;
                let seq = Tensor::new(&[l, cfg.d_model], rng.normal_vec(l * cfg.d_model, 1.0))?;
                Ok(BenchRow {
                    len: l,
                    scan_ms: time_per_call(cfg.budget, || selective_scan(&abar, &bbar, &c, &x).map(drop))?,
                    mamba_ms: time_per_call(cfg.budget, || mamba.forward(&ctx, &seq).map(drop))?,
                    mhsa_ms: time_per_call(cfg.budget, || mhsa.forward(&ctx, &seq).map(drop))?,
                })
            })
            .collect()
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slopes {
    pub scan: f64,
    pub mamba: f64,
    pub mhsa: f64,
}

pub fn slopes(rows: &[BenchRow]) -> Slopes {
    let l: Vec<f64> = rows.iter().map(|r| r.len as f64).collect();
    let col = |f: fn(&BenchRow) -> f64| loglog_slope(&l, &rows.iter().map(f).collect::<Vec<_>>());
    Slopes { scan: col(|r| r.scan_ms), mamba: col(|r| r.mamba_ms), mhsa: col(|r| r.mhsa_ms) }
}

/// Comma-separated table followed by the fitted log-log slopes.
pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = String::from("len,scan_ms,mamba_ms,mhsa_ms\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.4},{:.4},{:.4}", r.len, r.scan_ms, r.mamba_ms, r.mhsa_ms);
    }
    if rows.len() >= 2 {
        let k = slopes(rows);
        let _ = writeln!(s, "# log-log slope: scan {:.3}, mamba {:.3}, mhsa {:.3}", k.scan, k.mamba, k.mhsa);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn tiny_bench_runs() {
        let cfg = BenchConfig { lengths: vec![8, 16], d_model: 8, heads: 2, budget: Duration::ZERO, seed: 1 };
        let rows = run_bench(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(bench_table(&rows).starts_with("len,scan_ms"));
    }
}
