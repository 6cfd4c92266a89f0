//! Standardised multinomial logistic-regression probe.
//!
//! The objective is mean cross-entropy plus `‖W‖² / (2·C·N)` (intercepts are
//! not penalised), which is the usual `C`-parameterised objective divided by
//! `C·N`. It is minimised in f64 by L-BFGS from a zero start until the largest
//! gradient entry is at most `tol` or `max_iter` iterations have run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub c: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_iter: 1000,
            tol: 1e-5,
        }
    }
}

/// Per-feature train mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += *v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                let c = *v as f64 - m;
                *s += c * c;
            }
        }
        let std = var.into_iter().map(|s| (s / n.max(1) as f64).sqrt()).collect();
        Self { mean, std }
    }

    /// Standardised copy; features with zero spread map to 0.
    pub fn apply(&self, x: &Tensor) -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|i| {
                x.row(i)
                    .iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(v, (m, s))| if *s > 0.0 { (*v as f64 - m) / s } else { 0.0 })
                    .collect()
            })
            .collect()
    }
}

/// A fitted probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    pub classes: Vec<i64>,
    scaler: Standardizer,
    /// `[D][C]` then `[C]` intercepts, flattened.
    theta: Vec<f64>,
    pub iterations: usize,
    /// Largest absolute gradient entry at the solution.
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub accuracy: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

struct Problem<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    d: usize,
    c: usize,
    lambda: f64,
}

impl Problem<'_> {
    /// Objective and gradient at `theta`.
    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (d, c) = (self.d, self.c);
        let n = self.x.len() as f64;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (w, b) = theta.split_at(d * c);
        let mut loss = 0.0;
        let mut logits = vec![0.0; c];
        for (xi, &yi) in self.x.iter().zip(self.y) {
            logits.copy_from_slice(b);
            for (j, &v) in xi.iter().enumerate() {
                if v != 0.0 {
                    for (l, wv) in logits.iter_mut().zip(&w[j * c..(j + 1) * c]) {
                        *l += v * wv;
                    }
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            loss += m + z.ln() - logits[yi];
            for (k, l) in logits.iter_mut().enumerate() {
                *l = (*l - m).exp() / z - if k == yi { 1.0 } else { 0.0 };
            }
            let (gw, gb) = grad.split_at_mut(d * c);
            for (j, &v) in xi.iter().enumerate() {
                if v != 0.0 {
                    for (g, p) in gw[j * c..(j + 1) * c].iter_mut().zip(&logits) {
                        *g += v * p;
                    }
                }
            }
            for (g, p) in gb.iter_mut().zip(&logits) {
                *g += p;
            }
        }
        grad.iter_mut().for_each(|g| *g /= n);
        let mut reg = 0.0;
        for (g, wv) in grad[..d * c].iter_mut().zip(w) {
            *g += self.lambda * wv;
            reg += wv * wv;
        }
        loss / n + 0.5 * self.lambda * reg
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Limited-memory BFGS with backtracking Armijo steps.
fn lbfgs(p: &Problem<'_>, theta: &mut [f64], max_iter: usize, tol: f64) -> (usize, f64) {
    const MEMORY: usize = 10;
    let n = theta.len();
    let mut g = vec![0.0; n];
    let mut f = p.eval(theta, &mut g);
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::with_capacity(MEMORY);
    let mut iter = 0;
    let mut trial = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    while iter < max_iter && inf_norm(&g) > tol {
        // Two-loop recursion for the search direction.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = hist
            .last()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or(1.0 / inf_norm(&g).max(1.0));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
            let bt = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - bt) * si);
        }
        let mut dir: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            trial
                .iter_mut()
                .zip(theta.iter().zip(&dir))
                .for_each(|(t, (x, d))| *t = x + step * d);
            let f_new = p.eval(&trial, &mut g_new);
            if f_new <= f + 1e-4 * step * slope {
                let s: Vec<f64> = trial.iter().zip(theta.iter()).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 {
                    if hist.len() == MEMORY {
                        hist.remove(0);
                    }
                    hist.push((s, y, 1.0 / sy));
                }
                theta.copy_from_slice(&trial);
                std::mem::swap(&mut g, &mut g_new);
                f = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iter += 1;
        if !accepted {
            break;
        }
    }
    (iter, inf_norm(&g))
}

impl ProbeFit {
    pub fn fit(x: &Tensor, y: &[i64], cfg: &ProbeConfig) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        let mut classes: Vec<i64> = y.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::invalid(
                "linear probe needs at least two classes in the training labels",
            ));
        }
        if !(cfg.c > 0.0) {
            return Err(Error::invalid("probe C must be positive"));
        }
        let index: BTreeMap<i64, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let yi: Vec<usize> = y.iter().map(|v| index[v]).collect();
        let scaler = Standardizer::fit(x);
        let xs = scaler.apply(x);
        let (d, c) = (x.cols(), classes.len());
        let problem = Problem {
            x: &xs,
            y: &yi,
            d,
            c,
            lambda: 1.0 / (cfg.c * y.len() as f64),
        };
        let mut theta = vec![0.0; d * c + c];
        let (iterations, grad_norm) = lbfgs(&problem, &mut theta, cfg.max_iter, cfg.tol);
        Ok(Self {
            classes,
            scaler,
            theta,
            iterations,
            grad_norm,
            converged: grad_norm <= cfg.tol,
        })
    }

    pub fn predict(&self, x: &Tensor) -> Vec<i64> {
        let c = self.classes.len();
        let d = self.theta.len() / c - 1;
        let (w, b) = self.theta.split_at(d * c);
        self.scaler
            .apply(x)
            .iter()
            .map(|xi| {
                let mut logits = b.to_vec();
                for (j, v) in xi.iter().enumerate() {
                    for (l, wv) in logits.iter_mut().zip(&w[j * c..(j + 1) * c]) {
                        *l += v * wv;
                    }
                }
                // First maximum wins, so ties resolve to the smaller label.
                let best = (0..c).fold(0, |b, k| if logits[k] > logits[b] { k } else { b });
                self.classes[best]
            })
            .collect()
    }

    pub fn accuracy(&self, x: &Tensor, y: &[i64]) -> f64 {
        let p = self.predict(x);
        let hits = p.iter().zip(y).filter(|(a, b)| a == b).count();
        hits as f64 / y.len().max(1) as f64
    }
}

/// Fit on the train split and score top-1 accuracy on the test split.
pub fn linear_probe(
    x_train: &Tensor,
    y_train: &[i64],
    x_test: &Tensor,
    y_test: &[i64],
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    if x_test.rows() != y_test.len() || x_test.cols() != x_train.cols() {
        return Err(Error::invalid("test features do not match labels or train width"));
    }
    let fit = ProbeFit::fit(x_train, y_train, cfg)?;
    Ok(ProbeOutcome {
        accuracy: fit.accuracy(x_test, y_test),
        iterations: fit.iterations,
        grad_norm: fit.grad_norm,
        converged: fit.converged,
    })
}

/// Cross-validated probe accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub target: String,
    /// Mean of the per-fold accuracies.
    pub accuracy: f64,
    pub folds: Vec<ProbeOutcome>,
}

impl ProbeResult {
    /// True when every fold either met the tolerance or used the full budget.
    pub fn solver_ok(&self, cfg: &ProbeConfig) -> bool {
        self.folds
            .iter()
            .all(|f| f.converged || f.iterations >= cfg.max_iter)
    }
}

pub(crate) fn select_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    crate::model::gather(x, idx)
}

/// Stratified cross-validation using precomputed fold ids (one per row).
pub fn cv_probe(
    x: &Tensor,
    y: &[i64],
    folds: &[usize],
    target: &str,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if folds.len() != y.len() || x.rows() != y.len() {
        return Err(Error::invalid("fold ids, labels and rows disagree in length"));
    }
    let n_folds = folds.iter().max().map_or(0, |m| m + 1);
    if n_folds < 2 {
        return Err(Error::invalid("cross-validation needs at least two folds"));
    }
    let mut out = Vec::with_capacity(n_folds);
    for f in 0..n_folds {
        let test: Vec<usize> = (0..y.len()).filter(|&i| folds[i] == f).collect();
        let train: Vec<usize> = (0..y.len()).filter(|&i| folds[i] != f).collect();
        if test.is_empty() {
            continue;
        }
        let pick = |idx: &[usize]| idx.iter().map(|&i| y[i]).collect::<Vec<_>>();
        out.push(linear_probe(
            &select_rows(x, &train),
            &pick(&train),
            &select_rows(x, &test),
            &pick(&test),
            cfg,
        )?);
    }
    let accuracy = out.iter().map(|o| o.accuracy).sum::<f64>() / out.len() as f64;
    Ok(ProbeResult {
        target: target.to_string(),
        accuracy,
        folds: out,
    })
}
