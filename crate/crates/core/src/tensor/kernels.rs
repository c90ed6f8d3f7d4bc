//! Raw forward/backward kernels over NCHW slices.
//!
//! These know nothing about the graph; [`super::Graph`] validates shapes and
//! calls in here.

use super::Real;

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    /// 1×1, unit stride, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Real>(g: &ConvGeometry, input: &[T], col: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.padding as isize);
    let (h, w) = (g.height as isize, g.width as isize);
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let src = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = oy as isize * s + ky as isize - p;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *v = if ix < 0 || ix >= w { T::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeometry, col: &[T], dinput: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.padding as isize);
    let (h, w) = (g.height as isize, g.width as isize);
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let dst = &mut dinput[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w {
                            dst_row[ix as usize] = dst_row[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation; `weight` is `[out, in, k, k]`.
pub fn conv2d_forward<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let in_sz = g.in_channels * g.height * g.width;
    let out_sz = g.out_channels * g.out_plane();
    let patch = g.patch_len();
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.batch * out_sz];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * plane] };
    for n in 0..g.batch {
        let x = &input[n * in_sz..(n + 1) * in_sz];
        let y = &mut out[n * out_sz..(n + 1) * out_sz];
        for (o, row) in y.chunks_mut(plane).enumerate() {
            row.fill(bias[o]);
        }
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut col);
            &col
        };
        T::gemm(
            g.out_channels,
            patch,
            plane,
            T::one(),
            weight,
            patch as isize,
            1,
            cols,
            plane as isize,
            1,
            T::one(),
            y,
        );
    }
    out
}

/// Gradients of [`conv2d_forward`]; each output is produced only when requested.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    dout: &[T],
    want: [bool; 3],
) -> ConvGrads<T> {
    let in_sz = g.in_channels * g.height * g.width;
    let out_sz = g.out_channels * g.out_plane();
    let patch = g.patch_len();
    let plane = g.out_plane();
    let [want_in, want_w, want_b] = want;

    let mut dinput = want_in.then(|| vec![T::zero(); g.batch * in_sz]);
    let mut dweight = want_w.then(|| vec![T::zero(); g.out_channels * patch]);
    let mut dbias = want_b.then(|| vec![T::zero(); g.out_channels]);
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * plane }];
    let mut dcol = vec![T::zero(); if want_in && !g.is_pointwise() { patch * plane } else { 0 }];

    for n in 0..g.batch {
        let dy = &dout[n * out_sz..(n + 1) * out_sz];
        if let Some(db) = dbias.as_mut() {
            for (o, row) in dy.chunks(plane).enumerate() {
                db[o] = db[o] + row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dweight.as_mut() {
            let x = &input[n * in_sz..(n + 1) * in_sz];
            let cols: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut col);
                &col
            };
            // dW[o, p] += sum_j dy[o, j] * col[p, j]
            T::gemm(
                g.out_channels,
                plane,
                patch,
                T::one(),
                dy,
                plane as isize,
                1,
                cols,
                1,
                plane as isize,
                T::one(),
                dw,
            );
        }
        if let Some(dx) = dinput.as_mut() {
            let dx = &mut dx[n * in_sz..(n + 1) * in_sz];
            // dcol[p, j] = sum_o W[o, p] * dy[o, j]
            if g.is_pointwise() {
                T::gemm(
                    patch,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight,
                    1,
                    patch as isize,
                    dy,
                    plane as isize,
                    1,
                    T::zero(),
                    dx,
                );
            } else {
                T::gemm(
                    patch,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight,
                    1,
                    patch as isize,
                    dy,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                );
                col2im_add(g, &dcol, dx);
            }
        }
    }
    ConvGrads { input: dinput, weight: dweight, bias: dbias }
}

/// 2×2 / stride-2 max pooling over `planes` planes of `h×w`.
///
/// Returns the pooled values and, per output, the flat input index of the
/// winning element (first in row-major order on ties).
pub fn max_pool2x2_forward<T: Real>(input: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Two-tap interpolation weights for a 2× bilinear upsample along one axis
/// (half-pixel centers, source coordinate clamped at the borders).
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Bilinear 2× upsampling of `planes` planes of `h×w`, done as a row pass then a column pass.
pub fn upsample2x_forward<T: Real>(input: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let tx: Vec<_> = upsample_taps(w).into_iter().map(|(a, b, wa, wb)| (a, b, T::lit(wa), T::lit(wb))).collect();
    let ty: Vec<_> = upsample_taps(h).into_iter().map(|(a, b, wa, wb)| (a, b, T::lit(wa), T::lit(wb))).collect();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (ox, &(a, b, wa, wb)) in tx.iter().enumerate() {
                tmp[y * ow + ox] = wa * row[a] + wb * row[b];
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(a, b, wa, wb)) in ty.iter().enumerate() {
            for ox in 0..ow {
                dst[oy * ow + ox] = wa * tmp[a * ow + ox] + wb * tmp[b * ow + ox];
            }
        }
    }
    out
}

/// Transpose of [`upsample2x_forward`].
pub fn upsample2x_backward<T: Real>(dout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let tx: Vec<_> = upsample_taps(w).into_iter().map(|(a, b, wa, wb)| (a, b, T::lit(wa), T::lit(wb))).collect();
    let ty: Vec<_> = upsample_taps(h).into_iter().map(|(a, b, wa, wb)| (a, b, T::lit(wa), T::lit(wb))).collect();
    let (oh, ow) = (2 * h, 2 * w);
    let mut din = vec![T::zero(); planes * h * w];
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        tmp.fill(T::zero());
        for (oy, &(a, b, wa, wb)) in ty.iter().enumerate() {
            for ox in 0..ow {
                let g = src[oy * ow + ox];
                tmp[a * ow + ox] = tmp[a * ow + ox] + wa * g;
                tmp[b * ow + ox] = tmp[b * ow + ox] + wb * g;
            }
        }
        let dst = &mut din[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, &(a, b, wa, wb)) in tx.iter().enumerate() {
                let g = tmp[y * ow + ox];
                dst[y * w + a] = dst[y * w + a] + wa * g;
                dst[y * w + b] = dst[y * w + b] + wb * g;
            }
        }
    }
    din
}
