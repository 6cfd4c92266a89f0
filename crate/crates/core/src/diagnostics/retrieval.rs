use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn unit_rows(x: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            let r: Vec<f64> = x.row(i).iter().map(|&v| v as f64).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.into_iter().map(|v| v / n).collect()
            } else {
                r
            }
        })
        .collect()
}

/// Average precision of one ranked relevance list.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Mean average precision of leave-one-out cosine retrieval. Each row
/// queries all others; items sharing its label are relevant. Queries without
/// any relevant item are skipped. Similarity ties rank the lower index first.
pub fn knn_map(x: &Tensor, labels: &[i64]) -> Result<f64> {
    let n = x.rows();
    if labels.len() != n {
        return Err(Error::invalid(format!("{n} rows but {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::invalid("retrieval needs at least two items"));
    }
    let u = unit_rows(x);
    let mut total = 0.0;
    let mut used = 0usize;
    for q in 0..n {
        let mut gallery: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| (u[q].iter().zip(&u[j]).map(|(a, b)| a * b).sum::<f64>() + 0.0, j))
            .collect();
        // Adding 0.0 above folds -0.0 into 0.0 so signed zeros tie.
        gallery.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let rel: Vec<bool> = gallery.iter().map(|&(_, j)| labels[j] == labels[q]).collect();
        if let Some(ap) = average_precision(&rel) {
            total += ap;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::invalid("no evaluable queries: every label is unique"));
    }
    Ok(total / used as f64)
}
