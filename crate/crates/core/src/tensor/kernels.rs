//! Slice-level forward and backward kernels used by the tape.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

/// `[C, H, W]` image to `[C*k*k, OH*OW]` patch matrix, zero padded.
pub(crate) fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.padding as isize);
    let npix = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_height {
                    let iy = oy as isize * s - p + ky as isize;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.padding as isize);
    let npix = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_height {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_width {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] +=
                                src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (pl, np) = (g.patch_len(), g.out_pixels());
    let mut out = vec![T::zero(); g.batch * g.out_channels * np];
    let mut cols = vec![T::zero(); pl * np];
    for b in 0..g.batch {
        im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut cols);
        let dst = &mut out[b * g.out_channels * np..(b + 1) * g.out_channels * np];
        if let Some(bias) = bias {
            for (d, chunk) in dst.chunks_mut(np).enumerate() {
                chunk.fill(bias[d]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.out_channels,
            pl,
            np,
            w,
            (pl, 1),
            &cols,
            (np, 1),
            beta,
            dst,
            (np, 1),
        );
    }
    out
}

/// Accumulates gradients of a convolution into whichever buffers are given.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let (pl, np, d) = (g.patch_len(), g.out_pixels(), g.out_channels);
    let mut cols = vec![T::zero(); pl * np];
    let mut dcols = vec![T::zero(); pl * np];
    for b in 0..g.batch {
        let go = &dout[b * d * np..(b + 1) * d * np];
        if let Some(db) = dbias.as_deref_mut() {
            for (ch, chunk) in go.chunks(np).enumerate() {
                db[ch] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut cols);
            // dW += dOut * cols^T
            T::gemm(
                d,
                np,
                pl,
                go,
                (np, 1),
                &cols,
                (1, np),
                T::one(),
                dw,
                (pl, 1),
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols = W^T * dOut
            T::gemm(
                pl,
                d,
                np,
                w,
                (1, pl),
                go,
                (np, 1),
                T::zero(),
                &mut dcols,
                (np, 1),
            );
            col2im_add(&dcols, g, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
        }
    }
}

/// Max pooling over `[N, H, W]` planes. Returns the output and, per output
/// element, the flat input index of the first maximum in row-major order.
pub(crate) fn maxpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + oy * stride * w + ox * stride;
                let mut best = x[best_i];
                for ky in 0..window {
                    for kx in 0..window {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg, oh, ow)
}

pub(crate) fn softmax_forward<T: Scalar>(
    x: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.max(x[at(j)]);
            }
            let mut z = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - m).exp();
                y[at(j)] = e;
                z += e;
            }
            for j in 0..len {
                y[at(j)] /= z;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    dx: &mut [T],
    outer: usize,
    len: usize,
    inner: usize,
) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: T = (0..len).map(|j| y[at(j)] * dy[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] += y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Row strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output position of `permute(x, perm)`, the flat input index.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let src: usize = counter
            .iter()
            .zip(perm)
            .map(|(&c, &p)| c * in_strides[p])
            .sum();
        idx.push(src);
        for ax in (0..counter.len()).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    idx
}
