//! Same-padded 2-D convolution via im2col and GEMM.

use num_traits::Float;
use std::fmt::Debug;

/// Scalar type the network can run in. `f32` for training and inference,
/// `f64` for gradient checking.
pub trait Real: Float + Debug + Default + Send + Sync + std::iter::Sum + 'static {
    /// `c = alpha * a·b + beta * c` for strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                let reach = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    (rows.saturating_sub(1)) * rs as usize + (cols.saturating_sub(1)) * cs as usize
                };
                assert!(m == 0 || k == 0 || reach(m, k, rsa, csa) < a.len());
                assert!(k == 0 || n == 0 || reach(k, n, rsb, csb) < b.len());
                assert!(m * n <= c.len());
                // SAFETY: bounds of every operand were checked above; c is row-major m×n.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Unfold a `channels × h × w` tensor into `(channels·k·k) × (h·w)` columns
/// with zero padding `(k - 1) / 2`.
pub fn im2col<T: Real>(input: &[T], channels: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k - 1) / 2;
    let hw = h * w;
    debug_assert_eq!(col.len(), channels * k * k * hw);
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let dst = &mut col[row..row + hw];
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    copy_shifted(src, out, shift);
                }
            }
        }
    }
}

/// `out[x] = src[x + shift]`, zero where out of range.
#[inline]
fn copy_shifted<T: Real>(src: &[T], out: &mut [T], shift: isize) {
    let w = src.len() as isize;
    let lo = (-shift).clamp(0, w) as usize;
    let hi = (w - shift).clamp(0, w) as usize;
    out[..lo].fill(T::zero());
    if hi > lo {
        out[lo..hi]
            .copy_from_slice(&src[(lo as isize + shift) as usize..(hi as isize + shift) as usize]);
    }
    out[hi.max(lo)..].fill(T::zero());
}

/// Adjoint of [`im2col`]: accumulate columns back into `channels × h × w`.
pub fn col2im<T: Real>(col: &[T], channels: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let pad = (k - 1) / 2;
    let hw = h * w;
    out.fill(T::zero());
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let src = &col[row..row + hw];
                let shift = kx as isize - pad as isize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s = &src[y * w..(y + 1) * w];
                    for x in 0..w {
                        let tx = x as isize + shift;
                        if tx >= 0 && tx < w as isize {
                            dst[tx as usize] = dst[tx as usize] + s[x];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution weights (`out × in × k × k`, row-major) and per-output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Convolve one sample; returns `out_channels × h × w`.
    pub fn forward(&self, input: &[T], h: usize, w: usize) -> Vec<T> {
        let hw = h * w;
        let kk = self.fan_in();
        let mut col = vec![T::zero(); kk * hw];
        im2col(input, self.in_channels, h, w, self.kernel, &mut col);
        let mut out = vec![T::zero(); self.out_channels * hw];
        for (o, b) in self.bias.iter().enumerate() {
            out[o * hw..(o + 1) * hw].fill(*b);
        }
        T::gemm(
            self.out_channels,
            kk,
            hw,
            &self.weight,
            kk as isize,
            1,
            &col,
            hw as isize,
            1,
            T::one(),
            &mut out,
        );
        out
    }

    /// Gradients for one sample given the upstream gradient `dout`.
    /// Accumulates into `dweight`/`dbias`; returns the input gradient when asked.
    pub fn backward(
        &self,
        input: &[T],
        dout: &[T],
        h: usize,
        w: usize,
        dweight: &mut [T],
        dbias: &mut [T],
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let hw = h * w;
        let kk = self.fan_in();
        let mut col = vec![T::zero(); kk * hw];
        im2col(input, self.in_channels, h, w, self.kernel, &mut col);
        // dW (out × kk) += dout (out × hw) · colᵀ (hw × kk)
        T::gemm(
            self.out_channels,
            hw,
            kk,
            dout,
            hw as isize,
            1,
            &col,
            1,
            hw as isize,
            T::one(),
            dweight,
        );
        for (o, db) in dbias.iter_mut().enumerate() {
            let s: f64 = dout[o * hw..(o + 1) * hw].iter().map(|v| v.as_f64()).sum();
            *db = *db + T::from_f64(s);
        }
        if !want_input_grad {
            return None;
        }
        // dcol (kk × hw) = Wᵀ (kk × out) · dout (out × hw)
        T::gemm(
            kk,
            self.out_channels,
            hw,
            &self.weight,
            1,
            kk as isize,
            dout,
            hw as isize,
            1,
            T::zero(),
            &mut col,
        );
        let mut dinput = vec![T::zero(); self.in_channels * hw];
        col2im(&col, self.in_channels, h, w, self.kernel, &mut dinput);
        Some(dinput)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution with zero padding.
    fn naive(conv: &Conv2d<f64>, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = conv.kernel as isize;
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; conv.out_channels * h * w];
        for o in 0..conv.out_channels {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = conv.bias[o];
                    for c in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky - pad, x + kx - pad);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wi = ((o * conv.in_channels + c) * conv.kernel + ky as usize)
                                    * conv.kernel
                                    + kx as usize;
                                acc += conv.weight[wi]
                                    * input[(c * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(o * h + y as usize) * w + x as usize] = acc;
                }
            }
        }
        out
    }

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut conv = Conv2d::<f32>::zeros(1, 1, 3);
        conv.weight[4] = 1.0;
        let input: Vec<f32> = (0..9).map(|v| v as f32).collect();
        assert_eq!(conv.forward(&input, 3, 3), input);
    }

    #[test]
    fn hand_computed_box_filter() {
        let mut conv = Conv2d::<f32>::zeros(1, 1, 3);
        conv.weight.fill(1.0);
        let input: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        // corners see 4 pixels, center sees all 9
        let out = conv.forward(&input, 3, 3);
        assert_eq!(out[0], 1.0 + 2.0 + 4.0 + 5.0);
        assert_eq!(out[4], 45.0);
        assert_eq!(out[8], 5.0 + 6.0 + 8.0 + 9.0);
    }

    #[test]
    fn matches_naive_convolution() {
        for (cin, cout, h, w, k) in [(1, 3, 5, 7, 3), (4, 2, 6, 4, 3), (2, 2, 9, 9, 5)] {
            let mut conv = Conv2d::<f64>::zeros(cin, cout, k);
            conv.weight = lcg(conv.weight.len(), 1);
            conv.bias = lcg(cout, 2);
            let input = lcg(cin * h * w, 3);
            let got = conv.forward(&input, h, w);
            let want = naive(&conv, &input, h, w);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k) = (3, 5, 6, 3);
        let x = lcg(c * h * w, 4);
        let y = lcg(c * k * k * h * w, 5);
        let mut col = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (cin, cout, h, w) = (2, 3, 4, 5);
        let mut conv = Conv2d::<f64>::zeros(cin, cout, 3);
        conv.weight = lcg(conv.weight.len(), 6);
        conv.bias = lcg(cout, 7);
        let input = lcg(cin * h * w, 8);
        let upstream = lcg(cout * h * w, 9);
        let loss = |c: &Conv2d<f64>, x: &[f64]| -> f64 {
            c.forward(x, h, w)
                .iter()
                .zip(&upstream)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut dw = vec![0.0; conv.weight.len()];
        let mut db = vec![0.0; cout];
        let dx = conv
            .backward(&input, &upstream, h, w, &mut dw, &mut db, true)
            .unwrap();
        let eps = 1e-6;
        for i in 0..conv.weight.len() {
            let mut p = conv.clone();
            p.weight[i] += eps;
            let mut m = conv.clone();
            m.weight[i] -= eps;
            let fd = (loss(&p, &input) - loss(&m, &input)) / (2.0 * eps);
            assert!((fd - dw[i]).abs() < 1e-7);
        }
        for i in 0..cout {
            let mut p = conv.clone();
            p.bias[i] += eps;
            let mut m = conv.clone();
            m.bias[i] -= eps;
            let fd = (loss(&p, &input) - loss(&m, &input)) / (2.0 * eps);
            assert!((fd - db[i]).abs() < 1e-7);
        }
        for i in 0..input.len() {
            let mut p = input.clone();
            p[i] += eps;
            let mut m = input.clone();
            m[i] -= eps;
            let fd = (loss(&conv, &p) - loss(&conv, &m)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-7);
        }
    }
}
