use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn centered(x: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    (0..n)
        .map(|i| x.row(i).iter().zip(&mean).map(|(v, m)| *v as f64 - m).collect())
        .collect()
}

/// Squared Frobenius norm of `aᵀb` for row-major `a` (`n×p`) and `b` (`n×q`).
fn cross_fro2(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (p, q) = (a[0].len(), b[0].len());
    let mut m = vec![0.0f64; p * q];
    for (ra, rb) in a.iter().zip(b) {
        for (i, va) in ra.iter().enumerate() {
            if *va == 0.0 {
                continue;
            }
            for (slot, vb) in m[i * q..(i + 1) * q].iter_mut().zip(rb) {
                *slot += va * vb;
            }
        }
    }
    m.iter().map(|v| v * v).sum()
}

/// Linear CKA between two clip-embedding matrices with the same rows.
pub fn cka(xa: &Tensor, xb: &Tensor) -> Result<f64> {
    if xa.rows() != xb.rows() {
        return Err(Error::invalid(format!(
            "CKA needs equal row counts, got {} and {}",
            xa.rows(),
            xb.rows()
        )));
    }
    if xa.rows() < 2 {
        return Err(Error::invalid("CKA needs at least two rows"));
    }
    let (a, b) = (centered(xa), centered(xb));
    let aa = cross_fro2(&a, &a).sqrt();
    let bb = cross_fro2(&b, &b).sqrt();
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::invalid("CKA undefined: a centred matrix is all zero"));
    }
    Ok(cross_fro2(&a, &b) / (aa * bb))
}

pub const CPS_LN_EPS: f64 = 1e-6;

/// CPS over a set of clips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpsResult {
    pub value: f64,
    pub clips: usize,
    /// Clips skipped because every token was constant.
    pub degenerate: usize,
}

/// Mean pairwise cosine similarity of distinct tokens of one clip, after a
/// parameter-free LayerNorm and ℓ2 normalisation. `None` if all tokens are
/// constant vectors.
pub fn cps_clip(tokens: &Tensor) -> Result<Option<f64>> {
    let (t, d) = (tokens.rows(), tokens.cols());
    if t < 2 {
        return Err(Error::invalid("CPS needs at least two tokens per clip"));
    }
    let mut sum = vec![0.0f64; d];
    let mut self_dot = 0.0;
    let mut live = 0;
    for i in 0..t {
        let r = tokens.row(i);
        let mean = r.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = r.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let denom = (var + CPS_LN_EPS).sqrt();
        let ln: Vec<f64> = r.iter().map(|&v| (v as f64 - mean) / denom).collect();
        let norm = ln.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        live += 1;
        for (s, v) in sum.iter_mut().zip(&ln) {
            *s += v / norm;
        }
        self_dot += 1.0;
    }
    if live == 0 {
        return Ok(None);
    }
    // Σ_{i≠j} u_i·u_j = ‖Σ u_i‖² − Σ ‖u_i‖²; constant tokens contribute zero vectors.
    let total: f64 = sum.iter().map(|v| v * v).sum();
    Ok(Some((total - self_dot) / (t * (t - 1)) as f64))
}

/// Average of [`cps_clip`] over clips.
pub fn cps<'a>(clips: impl IntoIterator<Item = &'a Tensor>) -> Result<CpsResult> {
    let (mut acc, mut n, mut degenerate) = (0.0, 0, 0);
    for c in clips {
        match cps_clip(c)? {
            Some(v) => {
                acc += v;
                n += 1;
            }
            None => degenerate += 1,
        }
    }
    if n == 0 {
        return Err(Error::invalid("CPS undefined: every clip is degenerate or the set is empty"));
    }
    Ok(CpsResult {
        value: acc / n as f64,
        clips: n,
        degenerate,
    })
}

/// One block transition `k → k+1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    /// 1-based source block.
    pub from: usize,
    pub to: usize,
    pub cka: f64,
    /// `mAP(k+1) − mAP(k)`.
    pub delta_map: f64,
}

/// Pair each inter-block CKA with the change in retrieval mAP.
pub fn pair_cka_dmap(cka: &[f64], map: &[f64]) -> Result<Vec<TransitionRow>> {
    if map.is_empty() || cka.len() + 1 != map.len() {
        return Err(Error::invalid(format!(
            "{} CKA transitions do not fit {} per-block mAP values",
            cka.len(),
            map.len()
        )));
    }
    Ok(cka
        .iter()
        .enumerate()
        .map(|(k, &c)| TransitionRow {
            from: k + 1,
            to: k + 2,
            cka: c,
            delta_map: map[k + 1] - map[k],
        })
        .collect())
}
