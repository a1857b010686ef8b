//! Raw f64 compute kernels behind the graph ops.
//!
//! Matrix products route through `matrixmultiply::dgemm` with explicit row
//! and column strides, which also covers transposed views without copies.
//! Convolution is im2col plus one dgemm per batch item.

use alloc::vec;
use alloc::vec::Vec;

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dgemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    debug_assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major `a(m x k) * b(k x n)` into a fresh buffer.
pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    dgemm_strided(m, k, n, 1.0, a, k, 1, b, n, 1, 0.0, &mut c, n, 1);
    c
}

/// Output spatial size for a square kernel with symmetric padding.
pub(crate) fn conv_out_dim(input: usize, ksize: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < ksize || stride == 0 {
        return None;
    }
    Some((span - ksize) / stride + 1)
}

/// Unfolds one `cin x h x w` image into an `(oh*ow) x (cin*k*k)` matrix.
/// Column index is `(ci*k + ky)*k + kx`, matching row-major kernel layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let kk = cin * ksize * ksize;
    debug_assert_eq!(cols.len(), oh * ow * kk);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * kk;
            for ci in 0..cin {
                let plane = ci * h * w;
                for ky in 0..ksize {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let base = row + (ci * ksize + ky) * ksize;
                    if iy < 0 || iy >= h as isize {
                        cols[base..base + ksize].fill(0.0);
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..ksize {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        cols[base + kx] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            input[plane + iy * w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds an `(oh*ow) x (cin*k*k)` gradient matrix back onto the image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dinput: &mut [f64],
) {
    let kk = cin * ksize * ksize;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * kk;
            for ci in 0..cin {
                let plane = ci * h * w;
                for ky in 0..ksize {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let base = row + (ci * ksize + ky) * ksize;
                    for kx in 0..ksize {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dinput[plane + iy * w + ix as usize] += cols[base + kx];
                    }
                }
            }
        }
    }
}

/// Batched conv forward. Input `batch x cin x h x w`, kernels
/// `cout x cin x k x k`, output `batch x cout x oh x ow`. Returns the output
/// and the stacked im2col matrices (reused by the backward pass).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_fwd(
    input: &[f64],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    kernels: &[f64],
    cout: usize,
    ksize: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<f64>, Vec<f64>) {
    let kk = cin * ksize * ksize;
    let ohw = oh * ow;
    let mut out = vec![0.0; batch * cout * ohw];
    let mut cols = vec![0.0; batch * ohw * kk];
    for b in 0..batch {
        let ccols = &mut cols[b * ohw * kk..(b + 1) * ohw * kk];
        im2col(&input[b * cin * h * w..(b + 1) * cin * h * w], cin, h, w, ksize, stride, pad, oh, ow, ccols);
        // out_b (cout x ohw) = kernels (cout x kk) * cols_b^T (kk x ohw)
        dgemm_strided(
            cout,
            kk,
            ohw,
            1.0,
            kernels,
            kk,
            1,
            ccols,
            1,
            kk,
            0.0,
            &mut out[b * cout * ohw..(b + 1) * cout * ohw],
            ohw,
            1,
        );
        if let Some(bias) = bias {
            let ob = &mut out[b * cout * ohw..(b + 1) * cout * ohw];
            for co in 0..cout {
                let v = bias[co];
                for x in &mut ob[co * ohw..(co + 1) * ohw] {
                    *x += v;
                }
            }
        }
    }
    (out, cols)
}

/// Batched conv backward. Accumulates into `dinput` (if given), `dkernels`,
/// and `dbias` (if given).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_bwd(
    dout: &[f64],
    cols: &[f64],
    kernels: &[f64],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    mut dinput: Option<&mut [f64]>,
    dkernels: &mut [f64],
    mut dbias: Option<&mut [f64]>,
) {
    let kk = cin * ksize * ksize;
    let ohw = oh * ow;
    let mut dcols = vec![0.0; ohw * kk];
    for b in 0..batch {
        let dob = &dout[b * cout * ohw..(b + 1) * cout * ohw];
        let ccols = &cols[b * ohw * kk..(b + 1) * ohw * kk];
        // dkernels (cout x kk) += dout_b (cout x ohw) * cols_b (ohw x kk)
        dgemm_strided(cout, ohw, kk, 1.0, dob, ohw, 1, ccols, kk, 1, 1.0, dkernels, kk, 1);
        if let Some(ref mut di) = dinput {
            // dcols (ohw x kk) = dout_b^T (ohw x cout) * kernels (cout x kk)
            dgemm_strided(ohw, cout, kk, 1.0, dob, 1, ohw, kernels, kk, 1, 0.0, &mut dcols, kk, 1);
            col2im(&dcols, cin, h, w, ksize, stride, pad, oh, ow, &mut di[b * cin * h * w..(b + 1) * cin * h * w]);
        }
        if let Some(ref mut db) = dbias {
            for co in 0..cout {
                let mut s = 0.0;
                for &g in &dob[co * ohw..(co + 1) * ohw] {
                    s += g;
                }
                db[co] += s;
            }
        }
    }
}

/// In-place softmax over contiguous lanes of length `lane` with stride
/// `stride` between consecutive lane elements; `lanes` lanes starting at
/// offsets produced by the caller. Used via [`softmax_axis`].
fn softmax_lane(x: &mut [f64], start: usize, lane: usize, stride: usize) {
    let mut mx = f64::NEG_INFINITY;
    for i in 0..lane {
        let v = x[start + i * stride];
        if v > mx {
            mx = v;
        }
    }
    let mut sum = 0.0;
    for i in 0..lane {
        let e = libm::exp(x[start + i * stride] - mx);
        x[start + i * stride] = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for i in 0..lane {
        x[start + i * stride] *= inv;
    }
}

/// Softmax along `axis` of a tensor with the given shape, in place.
pub(crate) fn softmax_axis(x: &mut [f64], shape: &[usize], axis: usize) {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            softmax_lane(x, o * lane * inner + i, lane, inner);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // ----- independent oracles -----

    /// Oracle: plain triple-loop matmul, no blocking, no strides.
    fn matmul_oracle(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    /// Oracle: direct 6-loop convolution over output position, channel, and
    /// kernel window, single image.
    #[allow(clippy::too_many_arguments)]
    fn conv_oracle(
        input: &[f64],
        cin: usize,
        h: usize,
        w: usize,
        kernels: &[f64],
        cout: usize,
        ksize: usize,
        bias: Option<&[f64]>,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = conv_out_dim(h, ksize, stride, pad).unwrap();
        let ow = conv_out_dim(w, ksize, stride, pad).unwrap();
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        for ky in 0..ksize {
                            for kx in 0..ksize {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                s += input[(ci * h + iy as usize) * w + ix as usize]
                                    * kernels[((co * cin + ci) * ksize + ky) * ksize + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = rng.random_range(1..8);
            let k = rng.random_range(1..8);
            let n = rng.random_range(1..8);
            let a = rand_vec(&mut rng, m * k);
            let b = rand_vec(&mut rng, k * n);
            let got = matmul(m, k, n, &a, &b);
            let want = matmul_oracle(m, k, n, &a, &b);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12, "matmul vs oracle: {g} vs {w}");
            }
        }
    }

    #[test]
    fn matmul_larger_shapes_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (m, k, n) = (49, 576, 64);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let got = matmul(m, k, n, &a, &b);
        let want = matmul_oracle(m, k, n, &a, &b);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-10 * (1.0 + w.abs()), "{g} vs {w}");
        }
    }

    #[test]
    fn conv2d_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for &(cin, h, w, cout, ksize, stride, pad) in &[
            (1usize, 5usize, 5usize, 2usize, 3usize, 1usize, 1usize),
            (3, 8, 8, 4, 3, 2, 1),
            (2, 7, 7, 3, 1, 1, 0),
            (4, 7, 7, 4, 3, 1, 1),
            (3, 9, 6, 2, 3, 2, 1),
        ] {
            let input = rand_vec(&mut rng, cin * h * w);
            let kernels = rand_vec(&mut rng, cout * cin * ksize * ksize);
            let bias = rand_vec(&mut rng, cout);
            let oh = conv_out_dim(h, ksize, stride, pad).unwrap();
            let ow = conv_out_dim(w, ksize, stride, pad).unwrap();
            let (got, _) =
                conv2d_fwd(&input, 1, cin, h, w, &kernels, cout, ksize, Some(&bias), stride, pad, oh, ow);
            let want = conv_oracle(&input, cin, h, w, &kernels, cout, ksize, Some(&bias), stride, pad);
            for (g, wv) in got.iter().zip(&want) {
                assert!((g - wv).abs() <= 1e-12, "conv vs oracle: {g} vs {wv}");
            }
        }
    }

    #[test]
    fn batched_conv_equals_per_image_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (batch, cin, h, w, cout, ksize, stride, pad) = (3, 2, 6, 6, 4, 3, 1, 1);
        let input = rand_vec(&mut rng, batch * cin * h * w);
        let kernels = rand_vec(&mut rng, cout * cin * ksize * ksize);
        let oh = conv_out_dim(h, ksize, stride, pad).unwrap();
        let ow = conv_out_dim(w, ksize, stride, pad).unwrap();
        let (got, _) = conv2d_fwd(&input, batch, cin, h, w, &kernels, cout, ksize, None, stride, pad, oh, ow);
        for b in 0..batch {
            let (one, _) = conv2d_fwd(
                &input[b * cin * h * w..(b + 1) * cin * h * w],
                1,
                cin,
                h,
                w,
                &kernels,
                cout,
                ksize,
                None,
                stride,
                pad,
                oh,
                ow,
            );
            assert_eq!(got[b * cout * oh * ow..(b + 1) * cout * oh * ow], one[..]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let shape = [3usize, 5, 4];
        let mut x = rand_vec(&mut rng, 60);
        for v in x.iter_mut() {
            *v *= 30.0; // exercise the max-subtraction path
        }
        softmax_axis(&mut x, &shape, 1);
        for o in 0..3 {
            for i in 0..4 {
                let mut s = 0.0;
                for l in 0..5 {
                    let v = x[(o * 5 + l) * 4 + i];
                    assert!(v >= 0.0 && v.is_finite());
                    s += v;
                }
                assert!((s - 1.0).abs() < 1e-12, "lane sum {s}");
            }
        }
    }

    #[test]
    fn softmax_single_element_lane_is_exactly_one() {
        let mut x = [3.7];
        softmax_axis(&mut x, &[1], 0);
        assert_eq!(x[0], 1.0);
    }
}
