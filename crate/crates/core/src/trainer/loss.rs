//! Cosine similarity and the NT-Xent contrastive loss.

use super::TrainError;

const NORM_EPS: f64 = 1e-12;

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64, TrainError> {
    if a.len() != b.len() {
        return Err(TrainError::Shape(format!("{} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(TrainError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Index of the positive partner of row `i`: rows `2m` and `2m+1` are a pair.
pub fn partner(i: usize) -> usize {
    i ^ 1
}

/// NT-Xent over `rows = 2N` embeddings of width `dim`, stored row-major.
///
/// For every anchor `i` with partner `j`,
/// `l(i) = -log(exp(s_ij / tau) / sum_{k != i} exp(s_ik / tau))` with `s`
/// the cosine similarity; the loss is the mean over all `2N` anchors.
/// Returns the loss and its gradient with respect to the raw embeddings.
pub fn ntxent_loss(
    emb: &[f64],
    rows: usize,
    dim: usize,
    tau: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    if rows < 4 || rows % 2 != 0 || emb.len() != rows * dim || dim == 0 {
        return Err(TrainError::Shape(format!(
            "need an even number (>= 4) of rows of width {dim}, got {} values for {rows} rows",
            emb.len()
        )));
    }
    if tau <= 0.0 {
        return Err(TrainError::Shape(format!("temperature {tau} must be positive")));
    }
    let norms: Vec<f64> = emb
        .chunks_exact(dim)
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS))
        .collect();
    let unit: Vec<f64> = emb
        .chunks_exact(dim)
        .zip(&norms)
        .flat_map(|(r, n)| r.iter().map(move |x| x / n))
        .collect();
    let u = |i: usize| &unit[i * dim..(i + 1) * dim];

    let mut logits = vec![0.0; rows * rows];
    for i in 0..rows {
        for k in i..rows {
            let s: f64 = u(i).iter().zip(u(k)).map(|(a, b)| a * b).sum::<f64>() / tau;
            logits[i * rows + k] = s;
            logits[k * rows + i] = s;
        }
    }

    // d loss / d logits, with the 1/(2N) mean folded in
    let mut g = vec![0.0; rows * rows];
    let mut total = 0.0;
    let scale = 1.0 / rows as f64;
    for i in 0..rows {
        let row = &logits[i * rows..(i + 1) * rows];
        let max = (0..rows)
            .filter(|&k| k != i)
            .map(|k| row[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..rows)
            .filter(|&k| k != i)
            .map(|k| (row[k] - max).exp())
            .sum();
        let log_denom = max + denom.ln();
        let j = partner(i);
        total += log_denom - row[j];
        for k in 0..rows {
            if k != i {
                let p = (row[k] - log_denom).exp();
                g[i * rows + k] = scale * (p - if k == j { 1.0 } else { 0.0 });
            }
        }
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss(loss));
    }

    // logits[i][k] = u_i . u_k / tau, symmetric
    let mut du = vec![0.0; rows * dim];
    for i in 0..rows {
        let dui = &mut du[i * dim..(i + 1) * dim];
        for k in 0..rows {
            let w = (g[i * rows + k] + g[k * rows + i]) / tau;
            if w != 0.0 {
                for (d, x) in dui.iter_mut().zip(u(k)) {
                    *d += w * x;
                }
            }
        }
    }
    // through the normalization u = e / |e|
    let mut grad = vec![0.0; rows * dim];
    for i in 0..rows {
        let ui = u(i);
        let dui = &du[i * dim..(i + 1) * dim];
        let proj: f64 = ui.iter().zip(dui).map(|(a, b)| a * b).sum();
        for c in 0..dim {
            grad[i * dim + c] = (dui[c] - ui[c] * proj) / norms[i];
        }
    }
    Ok((loss, grad))
}
