//! Exact gradients of the mean next-token cross-entropy for fully valid,
//! contiguous training sequences.

use super::weights::Weights;
use crate::error::{Error, Result};
use crate::tensor::{
    add_bias, add_column_sums, add_matmul_at, gelu, gelu_grad, layer_norm, log_softmax, matmul, matmul_bt, Real,
};

struct LayerCache<F> {
    x_in: Vec<F>,
    a: Vec<F>,
    mean1: Vec<F>,
    rstd1: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// `[n_heads x T x T]`, zero above the diagonal.
    probs: Vec<F>,
    attn: Vec<F>,
    h_mid: Vec<F>,
    m: Vec<F>,
    mean2: Vec<F>,
    rstd2: Vec<F>,
    u: Vec<F>,
    g: Vec<F>,
}

/// Mean cross-entropy of `targets` given `input` at positions `1..`, with
/// gradients shaped like the weights.
pub fn loss_and_gradients<F: Real>(weights: &Weights<F>, input: &[u32], targets: &[u32]) -> Result<(F, Weights<F>)> {
    loss_and_gradients_at(weights, input, targets, 1)
}

/// As [`loss_and_gradients`] with the sequence placed at `start_position`.
pub fn loss_and_gradients_at<F: Real>(
    weights: &Weights<F>,
    input: &[u32],
    targets: &[u32],
    start_position: usize,
) -> Result<(F, Weights<F>)> {
    let mut grads = Weights::zeros(&weights.config);
    let loss = accumulate_gradients(weights, input, targets, start_position, F::one(), &mut grads)?;
    Ok((loss, grads))
}

/// Adds `weight * d(loss)/d(params)` into `grads` and returns the loss.
pub fn accumulate_gradients<F: Real>(
    weights: &Weights<F>,
    input: &[u32],
    targets: &[u32],
    start_position: usize,
    weight: F,
    grads: &mut Weights<F>,
) -> Result<F> {
    accumulate_weighted_gradients(weights, input, targets, None, start_position, weight, grads)
}

/// As [`accumulate_gradients`] for the loss `Σ w_i CE_i / Σ w_i`; `None`
/// weights every target equally.
pub fn accumulate_weighted_gradients<F: Real>(
    weights: &Weights<F>,
    input: &[u32],
    targets: &[u32],
    target_weights: Option<&[f64]>,
    start_position: usize,
    weight: F,
    grads: &mut Weights<F>,
) -> Result<F> {
    let cfg = &weights.config;
    let t_len = input.len();
    if t_len == 0 {
        return Err(Error::EmptySequence);
    }
    if targets.len() != t_len {
        return Err(Error::InvalidSequence(format!("{t_len} inputs but {} targets", targets.len())));
    }
    let uniform = vec![1.0; t_len];
    let target_weights = target_weights.unwrap_or(&uniform);
    if target_weights.len() != t_len {
        return Err(Error::InvalidSequence(format!("{t_len} targets but {} target weights", target_weights.len())));
    }
    let weight_sum: f64 = target_weights.iter().sum();
    if !(weight_sum > 0.0 && weight_sum.is_finite()) || target_weights.iter().any(|w| *w < 0.0) {
        return Err(Error::InvalidSequence("target weights must be non-negative with a positive sum".into()));
    }
    let last = start_position + t_len - 1;
    if start_position == 0 || last > cfg.max_positions {
        return Err(Error::PositionOverflow {
            position: if start_position == 0 { 0 } else { last },
            max_positions: cfg.max_positions,
        });
    }
    for &t in input.iter().chain(targets) {
        if t as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { token: t, vocab_size: cfg.vocab_size });
        }
    }

    let dm = cfg.d_model;
    let dh = cfg.d_head;
    let heads = cfg.n_heads;
    let dff = cfg.d_ff();
    let vocab = cfg.vocab_size;
    let inv_sqrt_d = F::one() / F::from_usize(dh).unwrap().sqrt();

    // forward with caches
    let mut h = vec![F::zero(); t_len * dm];
    for (i, &tok) in input.iter().enumerate() {
        let te = &weights.token_embedding[tok as usize * dm..][..dm];
        let pe = &weights.position_embedding[(start_position + i - 1) * dm..][..dm];
        for ((dst, a), b) in h[i * dm..][..dm].iter_mut().zip(te).zip(pe) {
            *dst = *a + *b;
        }
    }
    let mut caches = Vec::with_capacity(cfg.n_layers);
    for layer in &weights.layers {
        let x_in = h.clone();
        let (a, mean1, rstd1) = layer_norm(&h, &layer.ln1_gain, &layer.ln1_bias);
        let project = |w: &[F], b: &[F]| {
            let mut out = matmul(&a, w, t_len, dm, dm);
            add_bias(&mut out, b);
            out
        };
        let q = project(&layer.wq, &layer.bq);
        let k = project(&layer.wk, &layer.bk);
        let v = project(&layer.wv, &layer.bv);
        let mut probs = vec![F::zero(); heads * t_len * t_len];
        let mut attn = vec![F::zero(); t_len * dm];
        for hd in 0..heads {
            let c = hd * dh;
            for i in 0..t_len {
                let row = &mut probs[(hd * t_len + i) * t_len..][..t_len];
                let qi = &q[i * dm + c..][..dh];
                let mut max = F::neg_infinity();
                for j in 0..=i {
                    let s = crate::tensor::dot(qi, &k[j * dm + c..][..dh]) * inv_sqrt_d;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut total = F::zero();
                for p in row[..=i].iter_mut() {
                    *p = (*p - max).exp();
                    total += *p;
                }
                for p in row[..=i].iter_mut() {
                    *p /= total;
                }
                let out = &mut attn[i * dm + c..][..dh];
                for j in 0..=i {
                    let w = row[j];
                    for (o, x) in out.iter_mut().zip(&v[j * dm + c..][..dh]) {
                        *o += w * *x;
                    }
                }
            }
        }
        let mut proj = matmul(&attn, &layer.wo, t_len, dm, dm);
        add_bias(&mut proj, &layer.bo);
        for (x, p) in h.iter_mut().zip(&proj) {
            *x += *p;
        }
        let h_mid = h.clone();
        let (m, mean2, rstd2) = layer_norm(&h, &layer.ln2_gain, &layer.ln2_bias);
        let mut u = matmul(&m, &layer.w_up, t_len, dm, dff);
        add_bias(&mut u, &layer.b_up);
        let g: Vec<F> = u.iter().map(|&x| gelu(x)).collect();
        let mut down = matmul(&g, &layer.w_down, t_len, dff, dm);
        add_bias(&mut down, &layer.b_down);
        for (x, p) in h.iter_mut().zip(&down) {
            *x += *p;
        }
        caches.push(LayerCache { x_in, a, mean1, rstd1, q, k, v, probs, attn, h_mid, m, mean2, rstd2, u, g });
    }
    let (f, meanf, rstdf) = layer_norm(&h, &weights.final_gain, &weights.final_bias);
    let logits = matmul_bt(&f, &weights.token_embedding, t_len, dm, vocab);

    // loss and dlogits
    let mut loss = 0.0f64;
    let mut dlogits = vec![F::zero(); t_len * vocab];
    for (i, &target) in targets.iter().enumerate() {
        if target_weights[i] == 0.0 {
            continue;
        }
        let lp = log_softmax(&logits[i * vocab..][..vocab]);
        loss -= target_weights[i] * lp[target as usize];
        let scale = weight * F::from_f64_lossy(target_weights[i] / weight_sum);
        for (j, d) in dlogits[i * vocab..][..vocab].iter_mut().enumerate() {
            let p = F::from_f64_lossy(lp[j].exp());
            *d = if j == target as usize { p - F::one() } else { p } * scale;
        }
    }
    let loss = loss / weight_sum;
    if !loss.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }

    // backward
    add_matmul_at(&mut grads.token_embedding, &dlogits, &f, t_len, vocab, dm);
    let df = matmul(&dlogits, &weights.token_embedding, t_len, vocab, dm);
    let mut dh_buf =
        layer_norm_backward(&df, &h, &meanf, &rstdf, &weights.final_gain, &mut grads.final_gain, &mut grads.final_bias);

    for (l, layer) in weights.layers.iter().enumerate().rev() {
        let c = &caches[l];
        let gl = &mut grads.layers[l];

        // MLP branch
        add_matmul_at(&mut gl.w_down, &c.g, &dh_buf, t_len, dff, dm);
        add_column_sums(&mut gl.b_down, &dh_buf);
        let mut du = matmul_bt(&dh_buf, &layer.w_down, t_len, dm, dff);
        for (d, &x) in du.iter_mut().zip(&c.u) {
            *d *= gelu_grad(x);
        }
        add_matmul_at(&mut gl.w_up, &c.m, &du, t_len, dm, dff);
        add_column_sums(&mut gl.b_up, &du);
        let dm_ = matmul_bt(&du, &layer.w_up, t_len, dff, dm);
        let dx = layer_norm_backward(
            &dm_,
            &c.h_mid,
            &c.mean2,
            &c.rstd2,
            &layer.ln2_gain,
            &mut gl.ln2_gain,
            &mut gl.ln2_bias,
        );
        for (a, b) in dh_buf.iter_mut().zip(&dx) {
            *a += *b;
        }

        // attention branch
        add_matmul_at(&mut gl.wo, &c.attn, &dh_buf, t_len, dm, dm);
        add_column_sums(&mut gl.bo, &dh_buf);
        let dattn = matmul_bt(&dh_buf, &layer.wo, t_len, dm, dm);
        let mut dq = vec![F::zero(); t_len * dm];
        let mut dk = vec![F::zero(); t_len * dm];
        let mut dv = vec![F::zero(); t_len * dm];
        let mut dp = vec![F::zero(); t_len];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..t_len {
                let row = &c.probs[(hd * t_len + i) * t_len..][..t_len];
                let dout = &dattn[i * dm + off..][..dh];
                let mut weighted = F::zero();
                for j in 0..=i {
                    let vj = &c.v[j * dm + off..][..dh];
                    dp[j] = crate::tensor::dot(dout, vj);
                    weighted += row[j] * dp[j];
                    for (d, o) in dv[j * dm + off..][..dh].iter_mut().zip(dout) {
                        *d += row[j] * *o;
                    }
                }
                for j in 0..=i {
                    let ds = row[j] * (dp[j] - weighted) * inv_sqrt_d;
                    if ds == F::zero() {
                        continue;
                    }
                    for t in 0..dh {
                        dq[i * dm + off + t] += ds * c.k[j * dm + off + t];
                        dk[j * dm + off + t] += ds * c.q[i * dm + off + t];
                    }
                }
            }
        }
        add_matmul_at(&mut gl.wq, &c.a, &dq, t_len, dm, dm);
        add_matmul_at(&mut gl.wk, &c.a, &dk, t_len, dm, dm);
        add_matmul_at(&mut gl.wv, &c.a, &dv, t_len, dm, dm);
        add_column_sums(&mut gl.bq, &dq);
        add_column_sums(&mut gl.bk, &dk);
        add_column_sums(&mut gl.bv, &dv);
        let mut da = matmul_bt(&dq, &layer.wq, t_len, dm, dm);
        for (w, d) in [(&layer.wk, &dk), (&layer.wv, &dv)] {
            for (acc, x) in da.iter_mut().zip(matmul_bt(d, w, t_len, dm, dm)) {
                *acc += x;
            }
        }
        let dx =
            layer_norm_backward(&da, &c.x_in, &c.mean1, &c.rstd1, &layer.ln1_gain, &mut gl.ln1_gain, &mut gl.ln1_bias);
        for (a, b) in dh_buf.iter_mut().zip(&dx) {
            *a += *b;
        }
    }

    for (i, &tok) in input.iter().enumerate() {
        let src = &dh_buf[i * dm..][..dm];
        for (d, s) in grads.token_embedding[tok as usize * dm..][..dm].iter_mut().zip(src) {
            *d += *s;
        }
        let p = start_position + i - 1;
        for (d, s) in grads.position_embedding[p * dm..][..dm].iter_mut().zip(src) {
            *d += *s;
        }
    }
    Ok(F::from_f64_lossy(loss))
}

fn layer_norm_backward<F: Real>(
    dy: &[F],
    x: &[F],
    means: &[F],
    rstds: &[F],
    gain: &[F],
    dgain: &mut [F],
    dbias: &mut [F],
) -> Vec<F> {
    let width = gain.len();
    let inv_width = F::one() / F::from_usize(width).unwrap();
    let mut dx = vec![F::zero(); dy.len()];
    let mut xhat = vec![F::zero(); width];
    let mut dxhat = vec![F::zero(); width];
    for r in 0..means.len() {
        let row = r * width..(r + 1) * width;
        let (mean, rstd) = (means[r], rstds[r]);
        let mut mean_d = F::zero();
        let mut mean_dx = F::zero();
        for (i, (&xi, &dyi)) in x[row.clone()].iter().zip(&dy[row.clone()]).enumerate() {
            xhat[i] = (xi - mean) * rstd;
            dgain[i] += dyi * xhat[i];
            dbias[i] += dyi;
            dxhat[i] = dyi * gain[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xhat[i];
        }
        mean_d *= inv_width;
        mean_dx *= inv_width;
        for (i, d) in dx[row].iter_mut().enumerate() {
            *d = rstd * (dxhat[i] - mean_d - xhat[i] * mean_dx);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::model::forward::{forward, TokenSequence};

    fn cfg(vocab: usize) -> ModelConfig {
        ModelConfig { vocab_size: vocab, d_model: 8, n_heads: 2, d_head: 4, n_layers: 2, max_positions: 12, seed: 9 }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut w = Weights::<f64>::init_random(&cfg(4)).unwrap();
        w.token_embedding.fill(0.0);
        let (loss, _) = loss_and_gradients(&w, &[0, 1, 2], &[1, 2, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let w = Weights::<f64>::init_random(&cfg(4)).unwrap();
        assert!(matches!(loss_and_gradients(&w, &[], &[]), Err(Error::EmptySequence)));
        assert!(loss_and_gradients(&w, &[1], &[1, 2]).is_err());
    }

    #[test]
    fn loss_agrees_with_inference_forward() {
        let w = Weights::<f64>::init_random(&cfg(7)).unwrap();
        let input = [1, 5, 6, 2, 3];
        let targets = [5, 6, 2, 3, 4];
        let (loss, _) = loss_and_gradients_at(&w, &input, &targets, 3).unwrap();
        let out = forward(&w, &TokenSequence::contiguous(input.to_vec(), 3), None, 1.0).unwrap();
        let want: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -log_softmax(&out.logits[i * 7..(i + 1) * 7])[t as usize])
            .sum::<f64>()
            / 5.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_central_differences() {
        let w = Weights::<f32>::init_random(&cfg(6)).unwrap().cast::<f64>();
        // larger weights make the check sensitive to every term
        let mut w = w;
        for t in w.tensors_mut() {
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = *v * 20.0 + 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        let input = [1, 2, 3, 4];
        let targets = [2, 3, 4, 5];
        let (_, grads) = loss_and_gradients_at(&w, &input, &targets, 2).unwrap();
        let eps = 1e-4;
        let names: Vec<String> = w.tensors().into_iter().map(|t| t.name).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = w.tensors()[ti].data.len();
            for idx in (0..len).step_by(len.div_ceil(5).max(1)) {
                let mut plus = w.clone();
                plus.tensors_mut()[ti].data[idx] += eps;
                let mut minus = w.clone();
                minus.tensors_mut()[ti].data[idx] -= eps;
                let lp = loss_and_gradients_at(&plus, &input, &targets, 2).unwrap().0;
                let lm = loss_and_gradients_at(&minus, &input, &targets, 2).unwrap().0;
                let fd = (lp - lm) / (2.0 * eps);
                let an = grads.tensors()[ti].data[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{idx}]: analytic {an} vs fd {fd}");
            }
        }
    }
}
