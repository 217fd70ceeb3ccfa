//! Monotone logistic mappings from predictions to MOS, fitted by
//! multi-start Levenberg-Marquardt, and the PLCC that follows.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use super::stats::{mean, median, pearson, sample_std};
use crate::error::{Error, Result};

/// A parametric curve fitted by least squares.
pub trait LogisticMap: Send + Sync {
    fn name(&self) -> &'static str;

    fn n_params(&self) -> usize;

    fn eval(&self, p: &[f64], s: f64) -> f64;

    /// Partial derivatives of [`LogisticMap::eval`] in parameter order.
    fn grad(&self, p: &[f64], s: f64) -> Vec<f64>;

    /// Starting points; each one is run to convergence.
    fn starts(&self, pred: &[f64], mos: &[f64]) -> Vec<Vec<f64>>;
}

fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// Least-squares line `mos ~ a * pred + b`.
fn line_fit(pred: &[f64], mos: &[f64]) -> (f64, f64) {
    let (mp, mm) = (mean(pred), mean(mos));
    let sxy: f64 = pred.iter().zip(mos).map(|(p, m)| (p - mp) * (m - mm)).sum();
    let sxx: f64 = pred.iter().map(|p| (p - mp) * (p - mp)).sum();
    let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (a, mm - a * mp)
}

/// `b2 + (b1 - b2) / (1 + exp(-(s - b3) / |b4|))`.
pub struct Logistic4;

impl LogisticMap for Logistic4 {
    fn name(&self) -> &'static str {
        "logistic4"
    }

    fn n_params(&self) -> usize {
        4
    }

    fn eval(&self, p: &[f64], s: f64) -> f64 {
        p[1] + (p[0] - p[1]) / (1.0 + (-(s - p[2]) / p[3].abs()).exp())
    }

    fn grad(&self, p: &[f64], s: f64) -> Vec<f64> {
        let b4 = p[3].abs();
        let u = (s - p[2]) / b4;
        let g = 1.0 / (1.0 + (-u).exp());
        let dg = g * (1.0 - g);
        let amp = p[0] - p[1];
        vec![
            g,
            1.0 - g,
            -amp * dg / b4,
            -amp * dg * u / b4 * p[3].signum(),
        ]
    }

    /// Eight starts: a near-linear start matching the least-squares line,
    /// then rising and falling curves centred at the 25th, 50th and 75th
    /// percentiles with width `std / 2`, and one at the mean with width
    /// `2 std` in the direction of the linear trend.
    fn starts(&self, pred: &[f64], mos: &[f64]) -> Vec<Vec<f64>> {
        let (lo, hi) = mos.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let sd = sample_std(pred).max(1e-12);
        let (a, b) = line_fit(pred, mos);
        let (c, w) = (mean(pred), 20.0 * sd);
        let mid = a * c + b;
        let mut out = vec![vec![mid + 2.0 * a * w, mid - 2.0 * a * w, c, w]];
        for (top, bottom) in [(hi, lo), (lo, hi)] {
            for q in [0.25, 0.5, 0.75] {
                out.push(vec![top, bottom, quantile(pred, q), 0.5 * sd]);
            }
        }
        let (top, bottom) = if a >= 0.0 { (hi, lo) } else { (lo, hi) };
        out.push(vec![top, bottom, c, 2.0 * sd]);
        out
    }
}

/// `b1 (1/2 - 1 / (1 + exp(b2 (s - b3)))) + b4 s + b5`.
pub struct Logistic5;

impl LogisticMap for Logistic5 {
    fn name(&self) -> &'static str {
        "logistic5"
    }

    fn n_params(&self) -> usize {
        5
    }

    fn eval(&self, p: &[f64], s: f64) -> f64 {
        p[0] * (0.5 - 1.0 / (1.0 + (p[1] * (s - p[2])).exp())) + p[3] * s + p[4]
    }

    fn grad(&self, p: &[f64], s: f64) -> Vec<f64> {
        let e = (p[1] * (s - p[2])).exp();
        let inv = 1.0 / (1.0 + e);
        let d = if e.is_finite() { e * inv * inv } else { 0.0 };
        vec![0.5 - inv, p[0] * d * (s - p[2]), -p[0] * d * p[1], s, 1.0]
    }

    /// Eight starts: the least-squares line with a zero logistic term, then
    /// logistic terms of amplitude `+-` the MOS range at slopes
    /// `1/std` and `4/std` centred at the median, plus the same at the
    /// 25th and 75th percentiles with slope `1/std` in the trend
    /// direction.
    fn starts(&self, pred: &[f64], mos: &[f64]) -> Vec<Vec<f64>> {
        let (lo, hi) = mos.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let range = (hi - lo).max(1e-12);
        let sd = sample_std(pred).max(1e-12);
        let (a, b) = line_fit(pred, mos);
        let m = median(pred);
        let mm = mean(mos);
        let mut out = vec![vec![0.0, 1.0 / sd, m, a, b]];
        for amp in [range, -range] {
            for k in [1.0, 4.0] {
                out.push(vec![amp, k / sd, m, 0.0, mm]);
            }
        }
        let amp = if a >= 0.0 { range } else { -range };
        for q in [0.25, 0.75] {
            out.push(vec![amp, 1.0 / sd, quantile(pred, q), 0.0, mm]);
        }
        out.push(vec![amp, 1.0 / sd, m, 0.5 * a, mm]);
        out
    }
}

pub struct LogisticRegistry {
    maps: BTreeMap<&'static str, Arc<dyn LogisticMap>>,
}

impl LogisticRegistry {
    pub fn register(&mut self, m: Arc<dyn LogisticMap>) {
        self.maps.insert(m.name(), m);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn LogisticMap>> {
        self.maps.get(name).cloned().ok_or_else(|| Error::UnknownName {
            registry: "logistic mapping",
            name: name.to_string(),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.maps.keys().copied().collect()
    }

    pub fn builtin() -> &'static LogisticRegistry {
        static REG: OnceLock<LogisticRegistry> = OnceLock::new();
        REG.get_or_init(|| {
            let mut r = LogisticRegistry { maps: BTreeMap::new() };
            r.register(Arc::new(Logistic4));
            r.register(Arc::new(Logistic5));
            r
        })
    }
}

fn sse(map: &dyn LogisticMap, p: &[f64], pred: &[f64], mos: &[f64]) -> f64 {
    pred.iter().zip(mos).map(|(&s, &m)| (map.eval(p, s) - m).powi(2)).sum()
}

const MAX_ITERS: usize = 500;

/// Levenberg-Marquardt with diagonal (Marquardt) scaling. Returns the
/// parameters, their SSE and whether a stopping tolerance was reached.
fn levenberg_marquardt(map: &dyn LogisticMap, start: &[f64], pred: &[f64], mos: &[f64]) -> (Vec<f64>, f64, bool) {
    let k = map.n_params();
    let mut p = start.to_vec();
    let mut cost = sse(map, &p, pred, mos);
    if !cost.is_finite() {
        return (p, cost, false);
    }
    let mut lambda = 1e-3;
    for _ in 0..MAX_ITERS {
        let mut jtj = DMatrix::<f64>::zeros(k, k);
        let mut jtr = DVector::<f64>::zeros(k);
        for (&s, &m) in pred.iter().zip(mos) {
            let g = map.grad(&p, s);
            let r = map.eval(&p, s) - m;
            for a in 0..k {
                jtr[a] += g[a] * r;
                for b in 0..k {
                    jtj[(a, b)] += g[a] * g[b];
                }
            }
        }
        let floor = 1e-12 * jtj.trace().max(1e-300) / k as f64;
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj.clone();
            for i in 0..k {
                a[(i, i)] += lambda * jtj[(i, i)].max(floor);
            }
            let step = match a.lu().solve(&(-&jtr)) {
                Some(s) => s,
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let c = sse(map, &trial, pred, mos);
            if c.is_finite() && c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                let small_step = step.norm() <= 1e-12 * (1.0 + p.iter().map(|v| v * v).sum::<f64>().sqrt());
                p = trial;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel < 1e-12 || small_step || cost < 1e-24 {
                    return (p, cost, true);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No downhill step at any damping: a stationary point.
            return (p, cost, true);
        }
    }
    (p, cost, false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlccFit {
    pub plcc: f64,
    pub params: Vec<f64>,
    pub mapping: &'static str,
    /// False when no start converged; `plcc` is then the raw Pearson.
    pub converged: bool,
}

impl PlccFit {
    pub fn warning(&self) -> bool {
        !self.converged
    }
}

pub fn plcc_logistic(pred: &[f64], mos: &[f64], map: &dyn LogisticMap) -> Result<PlccFit> {
    if pred.len() != mos.len() {
        return Err(Error::DimensionMismatch(format!("{} predictions, {} scores", pred.len(), mos.len())));
    }
    if pred.len() < 5 {
        return Err(Error::InvalidParameter(format!("need at least 5 values, got {}", pred.len())));
    }
    if pred.iter().all(|&v| v == pred[0]) {
        return Err(Error::Degenerate("constant predictions".into()));
    }
    let raw = pearson(pred, mos)?;
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in map.starts(pred, mos) {
        let (p, c, ok) = levenberg_marquardt(map, &start, pred, mos);
        if ok && c.is_finite() && best.as_ref().is_none_or(|b| c < b.1) {
            best = Some((p, c));
        }
    }
    let Some((params, _)) = best else {
        log::warn!("{} fit did not converge; reporting raw Pearson", map.name());
        return Ok(PlccFit {
            plcc: raw,
            params: Vec::new(),
            mapping: map.name(),
            converged: false,
        });
    };
    let fitted: Vec<f64> = pred.iter().map(|&s| map.eval(&params, s)).collect();
    let plcc = match pearson(&fitted, mos) {
        Ok(v) => v,
        // A fit flattened to a constant carries no linear information.
        Err(Error::Degenerate(_)) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(PlccFit {
        plcc,
        params,
        mapping: map.name(),
        converged: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn exact_logistic_gives_one() {
        let pred = grid(40);
        let truth = [90.0, 10.0, 0.4, 0.8];
        let mos: Vec<f64> = pred.iter().map(|&s| Logistic4.eval(&truth, s)).collect();
        let fit = plcc_logistic(&pred, &mos, &Logistic4).unwrap();
        assert!(fit.converged);
        assert!((fit.plcc - 1.0).abs() < 1e-6, "{fit:?}");
    }

    #[test]
    fn affine_data_gives_one() {
        let pred = grid(30);
        let mos: Vec<f64> = pred.iter().map(|s| 7.5 * s + 40.0).collect();
        for map in [&Logistic4 as &dyn LogisticMap, &Logistic5] {
            let fit = plcc_logistic(&pred, &mos, map).unwrap();
            assert!(fit.plcc >= 1.0 - 1e-6, "{} {fit:?}", map.name());
        }
    }

    #[test]
    fn decreasing_relation_fits_negatively() {
        let pred = grid(30);
        let mos: Vec<f64> = pred.iter().map(|&s| Logistic4.eval(&[5.0, 95.0, 0.0, 0.5], s)).collect();
        let fit = plcc_logistic(&pred, &mos, &Logistic4).unwrap();
        assert!((fit.plcc - 1.0).abs() < 1e-6);
    }

    #[test]
    fn noisy_logistic_matches_generator() {
        let mut r = SeededRng::new(3);
        let pred: Vec<f64> = (0..200).map(|_| r.uniform_range(-3.0, 3.0)).collect();
        let truth = [95.0, 5.0, 0.2, 0.7];
        let clean: Vec<f64> = pred.iter().map(|&s| Logistic4.eval(&truth, s)).collect();
        let mos: Vec<f64> = clean.iter().map(|c| c + r.normal()).collect();
        let generative = pearson(&clean, &mos).unwrap();
        let fit = plcc_logistic(&pred, &mos, &Logistic4).unwrap();
        assert!((fit.plcc - generative).abs() < 0.02, "{} {generative}", fit.plcc);
    }

    #[test]
    fn affine_prediction_changes_do_not_matter() {
        let mut r = SeededRng::new(4);
        let pred: Vec<f64> = (0..60).map(|_| r.uniform_range(0.0, 10.0)).collect();
        let mos: Vec<f64> = pred
            .iter()
            .map(|&s| Logistic4.eval(&[80.0, 20.0, 5.0, 1.5], s) + 4.0 * r.normal())
            .collect();
        let base = plcc_logistic(&pred, &mos, &Logistic4).unwrap().plcc;
        for (a, b) in [(3.0, -2.0), (0.01, 100.0), (250.0, 7.0)] {
            let t: Vec<f64> = pred.iter().map(|p| a * p + b).collect();
            let v = plcc_logistic(&t, &mos, &Logistic4).unwrap().plcc;
            assert!((v - base).abs() < 1e-6, "{a} {b}: {v} {base}");
        }
    }

    #[test]
    fn gradients_match_differences() {
        let p4 = [70.0, 15.0, 0.3, -0.9];
        let p5 = [30.0, 1.3, 0.2, 2.0, 50.0];
        for (map, p) in [(&Logistic4 as &dyn LogisticMap, &p4[..]), (&Logistic5, &p5[..])] {
            for s in [-1.5, 0.1, 2.2] {
                let g = map.grad(p, s);
                for i in 0..p.len() {
                    let mut a = p.to_vec();
                    let mut b = p.to_vec();
                    a[i] += 1e-6;
                    b[i] -= 1e-6;
                    let fd = (map.eval(&a, s) - map.eval(&b, s)) / 2e-6;
                    assert!((fd - g[i]).abs() < 1e-5 * (1.0 + g[i].abs()), "{} {i}", map.name());
                }
            }
        }
    }

    #[test]
    fn input_checks() {
        assert!(plcc_logistic(&[1.0; 6], &grid(6), &Logistic4).is_err());
        assert!(plcc_logistic(&grid(4), &grid(4), &Logistic4).is_err());
        assert_eq!(LogisticRegistry::builtin().names(), vec!["logistic4", "logistic5"]);
        assert_eq!(Logistic4.starts(&grid(10), &grid(10)).len(), 8);
        assert_eq!(Logistic5.starts(&grid(10), &grid(10)).len(), 8);
    }
}
