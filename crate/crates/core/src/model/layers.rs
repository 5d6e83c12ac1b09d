//! Layer primitives on flat row-major buffers.
//!
//! Every reduction runs in a fixed order, independent of the rayon pool
//! size, so results are bit-reproducible.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Output of a square-kernel convolution with "same" padding, stride 1.
///
/// `input` is `[b, ci, h, w]`, `weight` is `[co, ci, k, k]` with odd `k`.
pub fn conv_forward(input: &[f64], dims: [usize; 4], weight: &[f64], bias: &[f64], k: usize) -> Result<Vec<f64>> {
    let [b, ci, h, w] = dims;
    let co = bias.len();
    check_conv(input, dims, weight, co, k)?;
    let plane = h * w;
    let mut out = vec![0.0; b * co * plane];
    if plane == 0 {
        return Ok(out);
    }
    let (hp, wp) = (h + k - 1, w + k - 1);
    out.par_chunks_mut(co * plane)
        .zip(input.par_chunks(ci * plane))
        .for_each(|(o, x)| {
            let padded = pad_planes(x, ci, h, w, k);
            for (oc, op) in o.chunks_mut(plane).enumerate() {
                op.fill(bias[oc]);
                for y in 0..h {
                    let row = &mut op[y * w..(y + 1) * w];
                    for ic in 0..ci {
                        let kern = &weight[(oc * ci + ic) * k * k..][..k * k];
                        for ky in 0..k {
                            let src = &padded[(ic * hp + y + ky) * wp..][..wp];
                            correlate_row(row, src, &kern[ky * k..(ky + 1) * k]);
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of a convolution given the upstream gradient `grad_out`
/// (`[b, co, h, w]`). Returns `(grad_input, grad_weight, grad_bias)`;
/// `grad_input` is skipped (empty) when `need_input` is false.
pub fn conv_backward(
    input: &[f64],
    dims: [usize; 4],
    weight: &[f64],
    co: usize,
    k: usize,
    grad_out: &[f64],
    need_input: bool,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let [b, ci, h, w] = dims;
    check_conv(input, dims, weight, co, k)?;
    let plane = h * w;
    if grad_out.len() != b * co * plane {
        return Err(Error::Shape(format!(
            "conv grad_out has {} elements, expected {}",
            grad_out.len(),
            b * co * plane
        )));
    }
    let kk = k * k;
    let (hp, wp) = (h + k - 1, w + k - 1);
    // per-sample partials, reduced below in sample order
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let g = &grad_out[bi * co * plane..(bi + 1) * co * plane];
            let mut gw = vec![0.0; co * ci * kk];
            let mut gb = vec![0.0; co];
            if plane == 0 {
                return (gw, gb);
            }
            let padded = pad_planes(&input[bi * ci * plane..(bi + 1) * ci * plane], ci, h, w, k);
            for oc in 0..co {
                let gp = &g[oc * plane..(oc + 1) * plane];
                gb[oc] = gp.iter().sum();
                for ic in 0..ci {
                    let acc = &mut gw[(oc * ci + ic) * kk..][..kk];
                    for y in 0..h {
                        let grow = &gp[y * w..(y + 1) * w];
                        for ky in 0..k {
                            let src = &padded[(ic * hp + y + ky) * wp..][..wp];
                            row_dots(&mut acc[ky * k..(ky + 1) * k], grow, src);
                        }
                    }
                }
            }
            (gw, gb)
        })
        .collect();

    let mut grad_w = vec![0.0; co * ci * kk];
    let mut grad_b = vec![0.0; co];
    for (gw, gb) in per_sample {
        add_assign(&mut grad_w, &gw);
        add_assign(&mut grad_b, &gb);
    }
    let grad_in = if need_input {
        // the input gradient is the "same" correlation of grad_out with the
        // flipped, channel-transposed kernel
        let mut flipped = vec![0.0; ci * co * kk];
        for oc in 0..co {
            for ic in 0..ci {
                for t in 0..kk {
                    flipped[(ic * co + oc) * kk + t] = weight[(oc * ci + ic) * kk + kk - 1 - t];
                }
            }
        }
        conv_forward(grad_out, [b, co, h, w], &flipped, &vec![0.0; ci], k)?
    } else {
        Vec::new()
    };
    Ok((grad_in, grad_w, grad_b))
}

/// Copies `[c, h, w]` planes into zero-padded `[c, h+k-1, w+k-1]` planes.
fn pad_planes(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let p = k / 2;
    let (hp, wp) = (h + k - 1, w + k - 1);
    let mut out = vec![0.0; c * hp * wp];
    for ic in 0..c {
        for y in 0..h {
            out[(ic * hp + y + p) * wp + p..][..w].copy_from_slice(&x[(ic * h + y) * w..][..w]);
        }
    }
    out
}

/// `row[x] += Σ_j kern[j] * src[x + j]`.
#[inline]
fn correlate_row(row: &mut [f64], src: &[f64], kern: &[f64]) {
    let w = row.len();
    if let [k0, k1, k2] = *kern {
        let (s0, s1, s2) = (&src[..w], &src[1..w + 1], &src[2..w + 2]);
        for x in 0..w {
            row[x] += k0 * s0[x] + k1 * s1[x] + k2 * s2[x];
        }
    } else {
        for (j, &kv) in kern.iter().enumerate() {
            for (d, &v) in row.iter_mut().zip(&src[j..j + w]) {
                *d += kv * v;
            }
        }
    }
}

/// `acc[j] += Σ_x g[x] * src[x + j]`.
#[inline]
fn row_dots(acc: &mut [f64], g: &[f64], src: &[f64]) {
    let w = g.len();
    if acc.len() == 3 {
        let (s0, s1, s2) = (&src[..w], &src[1..w + 1], &src[2..w + 2]);
        let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
        for x in 0..w {
            a0 += g[x] * s0[x];
            a1 += g[x] * s1[x];
            a2 += g[x] * s2[x];
        }
        acc[0] += a0;
        acc[1] += a1;
        acc[2] += a2;
    } else {
        for (j, a) in acc.iter_mut().enumerate() {
            *a += dot(g, &src[j..j + w]);
        }
    }
}

fn check_conv(input: &[f64], dims: [usize; 4], weight: &[f64], co: usize, k: usize) -> Result<()> {
    let [b, ci, h, w] = dims;
    if k.is_multiple_of(2) {
        return Err(Error::Shape(format!("kernel size {k} must be odd")));
    }
    if input.len() != b * ci * h * w {
        return Err(Error::Shape(format!(
            "conv input has {} elements, dims {:?}",
            input.len(),
            dims
        )));
    }
    if weight.len() != co * ci * k * k {
        return Err(Error::Shape(format!(
            "conv weight has {} elements, expected {}x{}x{}x{}",
            weight.len(),
            co,
            ci,
            k,
            k
        )));
    }
    Ok(())
}

pub fn relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` where the ReLU output was not positive.
pub fn relu_backward(grad: &mut [f64], output: &[f64]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 average pooling, stride 2. A trailing odd row or column is dropped.
pub fn avg_pool2_forward(input: &[f64], dims: [usize; 4]) -> Result<(Vec<f64>, [usize; 4])> {
    let [b, c, h, w] = dims;
    if input.len() != b * c * h * w {
        return Err(Error::Shape(format!("pool input has {} elements, dims {:?}", input.len(), dims)));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * ho * wo];
    for (p, op) in out.chunks_mut((ho * wo).max(1)).enumerate().take(b * c) {
        let ip = &input[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            let r0 = &ip[2 * y * w..];
            let r1 = &ip[(2 * y + 1) * w..];
            for x in 0..wo {
                op[y * wo + x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
    Ok((out, [b, c, ho, wo]))
}

pub fn avg_pool2_backward(grad_out: &[f64], in_dims: [usize; 4]) -> Result<Vec<f64>> {
    let [b, c, h, w] = in_dims;
    let (ho, wo) = (h / 2, w / 2);
    if grad_out.len() != b * c * ho * wo {
        return Err(Error::Shape(format!(
            "pool grad has {} elements, expected {}",
            grad_out.len(),
            b * c * ho * wo
        )));
    }
    let mut gin = vec![0.0; b * c * h * w];
    for p in 0..b * c {
        let gp = &grad_out[p * ho * wo..(p + 1) * ho * wo];
        let ip = &mut gin[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for x in 0..wo {
                let g = 0.25 * gp[y * wo + x];
                ip[2 * y * w + 2 * x] = g;
                ip[2 * y * w + 2 * x + 1] = g;
                ip[(2 * y + 1) * w + 2 * x] = g;
                ip[(2 * y + 1) * w + 2 * x + 1] = g;
            }
        }
    }
    Ok(gin)
}

/// `y[b] = W x[b] + bias` with `W` stored `[out, in]`.
pub fn dense_forward(x: &[f64], batch: usize, weight: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    let out = bias.len();
    let inp = check_dense(x, batch, weight, out)?;
    let mut y = vec![0.0; batch * out];
    if out == 0 {
        return Ok(y);
    }
    y.par_chunks_mut(out).enumerate().for_each(|(bi, yr)| {
        let xr = &x[bi * inp..(bi + 1) * inp];
        for (o, yv) in yr.iter_mut().enumerate() {
            *yv = bias[o] + dot(&weight[o * inp..(o + 1) * inp], xr);
        }
    });
    Ok(y)
}

/// Returns `(grad_x, grad_weight, grad_bias)` for [`dense_forward`].
pub fn dense_backward(
    x: &[f64],
    batch: usize,
    weight: &[f64],
    out: usize,
    grad_y: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let inp = check_dense(x, batch, weight, out)?;
    if grad_y.len() != batch * out {
        return Err(Error::Shape(format!(
            "dense grad has {} elements, expected {}",
            grad_y.len(),
            batch * out
        )));
    }
    let mut gw = vec![0.0; out * inp];
    let mut gb = vec![0.0; out];
    if inp > 0 {
        gw.par_chunks_mut(inp)
            .zip(gb.par_iter_mut())
            .enumerate()
            .for_each(|(o, (row, gbo))| {
                for bi in 0..batch {
                    let g = grad_y[bi * out + o];
                    *gbo += g;
                    for (r, &xv) in row.iter_mut().zip(&x[bi * inp..(bi + 1) * inp]) {
                        *r += g * xv;
                    }
                }
            });
    } else {
        for bi in 0..batch {
            add_assign(&mut gb, &grad_y[bi * out..(bi + 1) * out]);
        }
    }
    let mut gx = vec![0.0; batch * inp];
    if inp > 0 {
        gx.par_chunks_mut(inp).enumerate().for_each(|(bi, gr)| {
            for o in 0..out {
                let g = grad_y[bi * out + o];
                for (d, &wv) in gr.iter_mut().zip(&weight[o * inp..(o + 1) * inp]) {
                    *d += g * wv;
                }
            }
        });
    }
    Ok((gx, gw, gb))
}

fn check_dense(x: &[f64], batch: usize, weight: &[f64], out: usize) -> Result<usize> {
    if batch == 0 || !x.len().is_multiple_of(batch) {
        return Err(Error::Shape(format!("dense input of {} elements for batch {batch}", x.len())));
    }
    let inp = x.len() / batch;
    if weight.len() != out * inp {
        return Err(Error::Shape(format!(
            "dense weight has {} elements, expected {}x{}",
            weight.len(),
            out,
            inp
        )));
    }
    Ok(inp)
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits, `(softmax − onehot) / batch`.
pub fn softmax_cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let batch = labels.len();
    if batch == 0 || classes == 0 || logits.len() != batch * classes {
        return Err(Error::Shape(format!(
            "{} logits for {} labels and {} classes",
            logits.len(),
            batch,
            classes
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Index { index: bad, len: classes });
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    let inv = 1.0 / batch as f64;
    for (bi, &label) in labels.iter().enumerate() {
        let z = &logits[bi * classes..(bi + 1) * classes];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - z[label];
        let g = &mut grad[bi * classes..(bi + 1) * classes];
        for (gv, &v) in g.iter_mut().zip(z) {
            *gv = (v - lse).exp() * inv;
        }
        g[label] -= inv;
    }
    Ok((loss * inv, grad))
}

/// Index of the largest logit per row, ties to the lower index.
pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes.max(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Dot product with four interleaved partial sums.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a4, b4) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let (ra, rb) = (a4.remainder(), b4.remainder());
    let mut acc = [0.0; 4];
    for (x, y) in a4.zip(b4) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Direct definition of the same-padded convolution, one output at a time.
    fn conv_naive(x: &[f64], [b, ci, h, w]: [usize; 4], wt: &[f64], bias: &[f64], k: usize) -> Vec<f64> {
        let co = bias.len();
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; b * co * h * w];
        for bi in 0..b {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..w {
                        let mut s = bias[o];
                        for i in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    s += wt[((o * ci + i) * k + ky) * k + kx]
                                        * x[((bi * ci + i) * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                        out[((bi * co + o) * h + y) * w + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = crate::rng::stream(seed, 99);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_naive() {
        for (k, dims) in [(3, [2, 3, 5, 4]), (1, [1, 2, 3, 3]), (3, [1, 1, 1, 1]), (5, [1, 2, 4, 6])] {
            let co = 2;
            let x = rand_vec(dims.iter().product(), 1);
            let wt = rand_vec(co * dims[1] * k * k, 2);
            let bias = rand_vec(co, 3);
            let fast = conv_forward(&x, dims, &wt, &bias, k).unwrap();
            let slow = conv_naive(&x, dims, &wt, &bias, k);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and w, so the backward pass must
        // satisfy <grad_x, x> + <grad_w, w> + <grad_b, 1·..> = <y, g>.
        let dims = [2, 3, 4, 5];
        let (co, k) = (4, 3);
        let x = rand_vec(dims.iter().product(), 4);
        let wt = rand_vec(co * 3 * 9, 5);
        let bias = rand_vec(co, 6);
        let y = conv_forward(&x, dims, &wt, &bias, k).unwrap();
        let g = rand_vec(y.len(), 7);
        let (gx, gw, gb) = conv_backward(&x, dims, &wt, co, k, &g, true).unwrap();
        let lhs = dot(&y, &g);
        // y is bilinear in (x, w) plus bias, so <y,g> = <gx,x> = <gw,w> + <gb,bias>
        assert!((lhs - dot(&gx, &x) - dot(&gb, &bias)).abs() < 1e-10);
        assert!((lhs - dot(&gw, &wt) - dot(&gb, &bias)).abs() < 1e-10);
    }

    #[test]
    fn pool_examples() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let (y, d) = avg_pool2_forward(&x, [1, 1, 4, 4]).unwrap();
        assert_eq!(d, [1, 1, 2, 2]);
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
        let (y, d) = avg_pool2_forward(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [1, 1, 2, 3]).unwrap();
        assert_eq!((y, d), (vec![3.0], [1, 1, 1, 1]));
        let g = avg_pool2_backward(&[4.0], [1, 1, 2, 3]).unwrap();
        assert_eq!(g, vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn dense_examples() {
        // W = [[1,2],[3,4]], b = [0.5,-1]
        let y = dense_forward(&[1.0, 1.0, 0.0, 2.0], 2, &[1.0, 2.0, 3.0, 4.0], &[0.5, -1.0]).unwrap();
        assert_eq!(y, vec![3.5, 6.0, 4.5, 7.0]);
        let (gx, gw, gb) = dense_backward(&[1.0, 1.0, 0.0, 2.0], 2, &[1.0, 2.0, 3.0, 4.0], 2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(gx, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(gw, vec![1.0, 1.0, 0.0, 2.0]);
        assert_eq!(gb, vec![1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, grad) = softmax_cross_entropy(&[0.0; 10], 10, &[3]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-15);
        assert!((grad[3] - (0.1 - 1.0)).abs() < 1e-15);
        assert!((grad[0] - 0.1).abs() < 1e-15);
        assert!(softmax_cross_entropy(&[0.0; 3], 3, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = vec![0.3, -1.2, 2.0, 0.5, 0.5, -0.1];
        let labels = [2, 0];
        let (_, grad) = softmax_cross_entropy(&logits, 3, &labels).unwrap();
        for i in 0..logits.len() {
            let eps = 1e-5;
            let mut p = logits.clone();
            p[i] += eps;
            let mut m = logits.clone();
            m[i] -= eps;
            let fd = (softmax_cross_entropy(&p, 3, &labels).unwrap().0 - softmax_cross_entropy(&m, 3, &labels).unwrap().0)
                / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-9, "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax_rows(&[1.0, 3.0, 3.0, 0.0, 0.0, 0.0], 3), vec![1, 0]);
    }
}
