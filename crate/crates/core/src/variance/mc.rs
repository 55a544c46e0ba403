//! Monte Carlo estimators.
//!
//! Work is cut into fixed chunks (weight draws for chains, blocks of trials
//! for maxima), each seeded from `(rng, chunk index)`. Chunks can run on any
//! number of workers and [`ChainMc::finish`] combines them in index order,
//! so results are bit-identical regardless of scheduling.

use alloc::vec;
use alloc::vec::Vec;

use super::{ChainMethod, VarChainSpec};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::SeededRng;

/// Summary of one Monte Carlo run. `standard_error` refers to `variance`
/// for the variance estimators and to `mean` for [`estimate_gain_mc`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub variance: f64,
    pub trials: usize,
    pub standard_error: f64,
}

/// Estimates the second-moment gain `E[f(Z)²] / E[Z²]`, `Z ~ N(0, 1)`.
pub fn estimate_gain_mc(
    f: impl Fn(f64) -> f64,
    trials: usize,
    rng: &SeededRng,
) -> Result<McEstimate> {
    if trials < 10_000 {
        return Err(Error::arg("gain estimation needs at least 10^4 trials"));
    }
    let mut r = rng.clone();
    let mut num = Vec::with_capacity(trials);
    let mut den = Vec::with_capacity(trials);
    for _ in 0..trials {
        let z = r.normal(1.0);
        let fz = f(z);
        num.push(fz * fz);
        den.push(z * z);
    }
    let n = trials as f64;
    let mean_den = den.iter().sum::<f64>() / n;
    let gain = num.iter().sum::<f64>() / n / mean_den;
    // delta method on the ratio of means
    let resid: Vec<f64> = num.iter().zip(&den).map(|(a, b)| a - gain * b).collect();
    let (_, resid_var) = math::mean_var(&resid);
    let (_, num_var) = math::mean_var(&num);
    Ok(McEstimate {
        mean: gain,
        variance: num_var,
        trials,
        standard_error: math::sqrt(resid_var / n) / mean_den,
    })
}

/// Trials per independently seeded block in [`max_gaussian_stats`].
pub const MAX_STATS_CHUNK: usize = 1024;

/// Power sums of `max − shift` over one block of trials.
#[derive(Debug, Clone, Copy, Default)]
struct PowerSums {
    n: f64,
    s: [f64; 4],
}

/// Empirical mean and variance of the maximum of `m` i.i.d. `N(0, σ²)`.
pub fn max_gaussian_stats(
    m: usize,
    sigma2: f64,
    trials: usize,
    rng: &SeededRng,
) -> Result<McEstimate> {
    if m == 0 || !(sigma2 > 0.0) {
        return Err(Error::arg("need m >= 1 and sigma2 > 0"));
    }
    if trials < 10_000 {
        return Err(Error::arg("maximum statistics need at least 10^4 trials"));
    }
    let chunks = trials.div_ceil(MAX_STATS_CHUNK);
    let sums: Vec<PowerSums> = (0..chunks)
        .map(|c| max_chunk(m, sigma2, trials, c, rng))
        .collect();
    Ok(combine_power_sums(m, sigma2, &sums))
}

/// Expected location of the maximum, used only to keep power sums small.
fn max_shift(m: usize, sigma2: f64) -> f64 {
    if m < 2 {
        return 0.0;
    }
    let l = 2.0 * math::ln(m as f64);
    let sl = math::sqrt(l);
    math::sqrt(sigma2)
        * (sl - (math::ln(math::ln(m as f64)) + math::ln(4.0 * math::PI)) / (2.0 * sl))
}

fn max_chunk(m: usize, sigma2: f64, trials: usize, chunk: usize, rng: &SeededRng) -> PowerSums {
    let start = chunk * MAX_STATS_CHUNK;
    let count = MAX_STATS_CHUNK.min(trials - start);
    let sigma = math::sqrt(sigma2);
    let shift = max_shift(m, sigma2);
    let mut r = rng.split(chunk as u64);
    let mut out = PowerSums {
        n: count as f64,
        s: [0.0; 4],
    };
    for _ in 0..count {
        let mut best = f64::NEG_INFINITY;
        for _ in 0..m {
            best = best.max(r.normal(sigma));
        }
        let d = best - shift;
        let d2 = d * d;
        out.s[0] += d;
        out.s[1] += d2;
        out.s[2] += d2 * d;
        out.s[3] += d2 * d2;
    }
    out
}

fn combine_power_sums(m: usize, sigma2: f64, parts: &[PowerSums]) -> McEstimate {
    let mut total = PowerSums::default();
    for p in parts {
        total.n += p.n;
        for k in 0..4 {
            total.s[k] += p.s[k];
        }
    }
    let n = total.n;
    let [m1, m2, m3, m4] = total.s.map(|s| s / n);
    let var_pop = m2 - m1 * m1;
    let mu4 = m4 - 4.0 * m1 * m3 + 6.0 * m1 * m1 * m2 - 3.0 * m1 * m1 * m1 * m1;
    let variance = var_pop * n / (n - 1.0);
    McEstimate {
        mean: m1 + max_shift(m, sigma2),
        variance,
        trials: n as usize,
        standard_error: math::sqrt(((mu4 - var_pop * var_pop) / n).max(0.0)),
    }
}

/// Sampling plan for [`mc_chain_variance`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    /// Total input draws propagated through the chain.
    pub trials: usize,
    /// Output units of the last layer; earlier layers output the next
    /// layer's fan-in.
    pub width: usize,
    /// Inputs propagated per fresh weight draw.
    pub inputs_per_draw: usize,
}

impl McConfig {
    pub fn new(trials: usize, width: usize) -> Self {
        Self {
            trials,
            width,
            inputs_per_draw: 50,
        }
    }
}

/// Per-unit first and second moment sums of one weight draw.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    count: usize,
    /// `[layer][unit]`
    s1: Vec<Vec<f64>>,
    s2: Vec<Vec<f64>>,
}

/// Chunked Monte Carlo propagation through a random chain.
#[derive(Debug, Clone)]
pub struct ChainMc {
    spec: VarChainSpec,
    cfg: McConfig,
    fan_outs: Vec<usize>,
}

impl ChainMc {
    pub fn new(spec: &VarChainSpec, cfg: McConfig) -> Result<Self> {
        spec.validate()?;
        if cfg.trials < 1000 {
            return Err(Error::arg("chain Monte Carlo needs at least 10^3 trials"));
        }
        if cfg.width < 64 {
            return Err(Error::arg("chain Monte Carlo needs width >= 64"));
        }
        if cfg.inputs_per_draw == 0 {
            return Err(Error::arg("inputs_per_draw must be positive"));
        }
        let mut fan_outs: Vec<usize> = spec.layers.iter().skip(1).map(|l| l.fan_in).collect();
        fan_outs.push(cfg.width);
        Ok(Self {
            spec: spec.clone(),
            cfg,
            fan_outs,
        })
    }

    pub fn groups(&self) -> usize {
        self.cfg.trials.div_ceil(self.cfg.inputs_per_draw)
    }

    /// Draws fresh weights and propagates one block of inputs.
    pub fn run_group(&self, group: usize, rng: &SeededRng) -> GroupStats {
        let start = group * self.cfg.inputs_per_draw;
        let batch = self.cfg.inputs_per_draw.min(self.cfg.trials - start);
        let g = rng.split(group as u64);
        let n1 = self.spec.layers[0].fan_in;
        let mut y = vec![0.0; batch * n1];
        g.split(u64::MAX)
            .fill_normal(&mut y, math::sqrt(self.spec.input_variance));
        let mut mask_rng = g.split(u64::MAX - 1);

        let mut stats = GroupStats {
            count: batch,
            s1: Vec::with_capacity(self.spec.layers.len()),
            s2: Vec::with_capacity(self.spec.layers.len()),
        };
        let mut y_in_dim = n1;
        for (li, layer) in self.spec.layers.iter().enumerate() {
            let fan_in = layer.fan_in;
            let fan_out = self.fan_outs[li];
            debug_assert_eq!(fan_in, y_in_dim);
            let x: Vec<f64> = y.iter().map(|&v| layer.activation.apply(v)).collect();
            let std_w = math::sqrt(layer.weight_variance);
            let m = layer.method.m();
            let mut out = vec![0.0; batch * fan_out];
            let mut resp = vec![0.0; batch * fan_out];
            // weights drawn in fan_in × fan_out layout so the product is a row axpy
            let mut wt = vec![0.0; fan_in * fan_out];
            for r in 0..m {
                g.split_path(&[li as u64, r as u64])
                    .fill_normal(&mut wt, std_w);
                resp.fill(0.0);
                for b in 0..batch {
                    let row = &mut resp[b * fan_out..(b + 1) * fan_out];
                    for (k, &xv) in x[b * fan_in..(b + 1) * fan_in].iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (o, &w) in row.iter_mut().zip(&wt[k * fan_out..(k + 1) * fan_out]) {
                            *o += xv * w;
                        }
                    }
                }
                match layer.method {
                    ChainMethod::Maxout(_) if r > 0 => {
                        for (o, &v) in out.iter_mut().zip(&resp) {
                            *o = f64::max(*o, v);
                        }
                    }
                    _ if r == 0 => out.copy_from_slice(&resp),
                    _ => {
                        for (o, &v) in out.iter_mut().zip(&resp) {
                            *o += v;
                        }
                    }
                }
            }
            match layer.method {
                ChainMethod::Ien(m) => {
                    let inv = 1.0 / m as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
                ChainMethod::Dropout(p) => {
                    for v in out.iter_mut() {
                        if !mask_rng.bernoulli(p) {
                            *v = 0.0;
                        }
                    }
                }
                _ => {}
            }
            let mut s1 = vec![0.0; fan_out];
            let mut s2 = vec![0.0; fan_out];
            for row in out.chunks_exact(fan_out) {
                for ((a, b), &v) in s1.iter_mut().zip(s2.iter_mut()).zip(row) {
                    *a += v;
                    *b += v * v;
                }
            }
            stats.s1.push(s1);
            stats.s2.push(s2);
            y = out;
            y_in_dim = fan_out;
        }
        stats
    }

    /// Per-layer estimates: per-unit variance across trials, averaged over
    /// units; the standard error comes from the spread of per-draw values.
    pub fn finish(&self, groups: &[GroupStats]) -> Vec<McEstimate> {
        let total: usize = groups.iter().map(|g| g.count).sum();
        let t = total as f64;
        (0..self.spec.layers.len())
            .map(|li| {
                let units = self.fan_outs[li];
                let mut mean_u = vec![0.0; units];
                for g in groups {
                    for (a, &v) in mean_u.iter_mut().zip(&g.s1[li]) {
                        *a += v;
                    }
                }
                mean_u.iter_mut().for_each(|v| *v /= t);
                let per_group: Vec<f64> = groups
                    .iter()
                    .map(|g| {
                        let b = g.count as f64;
                        let ss: f64 = (0..units)
                            .map(|u| {
                                g.s2[li][u] - 2.0 * mean_u[u] * g.s1[li][u]
                                    + b * mean_u[u] * mean_u[u]
                            })
                            .sum();
                        ss / units as f64
                    })
                    .collect();
                let variance = per_group.iter().sum::<f64>() / (t - 1.0);
                // per-draw variance estimates, weighted equally
                let rates: Vec<f64> = per_group
                    .iter()
                    .zip(groups)
                    .map(|(ss, g)| ss / g.count as f64 * t / (t - 1.0))
                    .collect();
                let (_, spread) = math::mean_var(&rates);
                McEstimate {
                    mean: mean_u.iter().sum::<f64>() / units as f64,
                    variance,
                    trials: total,
                    standard_error: math::sqrt(spread / rates.len() as f64),
                }
            })
            .collect()
    }
}

/// Sequential driver: per-layer response variance of a random chain.
pub fn mc_chain_variance(
    spec: &VarChainSpec,
    cfg: McConfig,
    rng: &SeededRng,
) -> Result<Vec<McEstimate>> {
    let mc = ChainMc::new(spec, cfg)?;
    let groups: Vec<GroupStats> = (0..mc.groups()).map(|g| mc.run_group(g, rng)).collect();
    Ok(mc.finish(&groups))
}
