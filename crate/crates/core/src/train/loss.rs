use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

fn check(logits: &FloatTensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, c) = match *logits.shape() {
        [n, c] => (n, c),
        _ => return Err(Error::dim("logits must be (batch, classes)")),
    };
    if labels.len() != n || n == 0 {
        return Err(Error::dim(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::dim(format!("label {bad} out of range for {c} classes")));
    }
    Ok((n, c))
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &FloatTensor, labels: &[usize]) -> Result<(f32, FloatTensor)> {
    let (n, c) = check(logits, labels)?;
    let mut grad = vec![0.0f32; n * c];
    let mut total = 0.0f64;
    for (i, row) in logits.data().chunks_exact(c).enumerate() {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[labels[i]] as f64;
        let g = &mut grad[i * c..(i + 1) * c];
        for (j, (gj, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v as f64 - log_z).exp();
            let target = if j == labels[i] { 1.0 } else { 0.0 };
            *gj = ((p - target) / n as f64) as f32;
        }
    }
    Ok(((total / n as f64) as f32, FloatTensor::from_vec(vec![n, c], grad)))
}

/// Number of rows whose label is among the `k` largest logits.
/// Ties are broken against the label.
pub fn topk_correct(logits: &FloatTensor, labels: &[usize], k: usize) -> Result<usize> {
    let (_, c) = check(logits, labels)?;
    Ok(logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &l)| {
            let target = row[l];
            let above = row.iter().enumerate().filter(|&(j, &v)| j != l && v >= target).count();
            above < k
        })
        .count())
}
