//! Forward/backward kernels on raw tensors. The tape in `graph` wires these
//! together; they are exposed for benchmarks and direct testing.

use super::scalar::{gemm, MatRef};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Samples per parallel work item in batched kernels. Fixed so that the
/// reduction order (and therefore every bit of the result) does not depend
/// on the thread count.
const SAMPLE_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k: usize,
    pub padding: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], padding: usize, stride: usize) -> Result<Self> {
        let &[batch, in_ch, in_h, in_w] = input else {
            return Err(Error::shape(format!("conv2d input must be 4-d, got {input:?}")));
        };
        let &[out_ch, k_in, kh, kw] = kernel else {
            return Err(Error::shape(format!("conv2d kernel must be 4-d, got {kernel:?}")));
        };
        if k_in != in_ch {
            return Err(Error::shape(format!("conv2d kernel expects {k_in} input channels, input has {in_ch}")));
        }
        if kh != kw {
            return Err(Error::shape(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let k = kh;
        let (ph, pw) = (in_h + 2 * padding, in_w + 2 * padding);
        if k > ph || k > pw {
            return Err(Error::shape(format!("kernel {k} larger than padded input {ph}x{pw}")));
        }
        if (ph - k) % stride != 0 || (pw - k) % stride != 0 {
            return Err(Error::shape(format!(
                "conv2d output extent not exact: ({ph}-{k})/{stride} for input {in_h}x{in_w}"
            )));
        }
        Ok(ConvGeom {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            k,
            padding,
            stride,
            out_h: (ph - k) / stride + 1,
            out_w: (pw - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    /// Multiply-accumulates of one forward pass over the whole batch.
    pub fn macs(&self) -> u64 {
        (self.batch * self.out_ch * self.out_area() * self.patch_len()) as u64
    }
}

/// Gathers input patches of one sample into `cols[C·K·K, Ho·Wo]`.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let area = g.out_area();
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds `cols` back into one sample's input gradient.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let area = g.out_area();
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
    stride: usize,
) -> Result<(Tensor<T>, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), padding, stride)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_ch] {
            return Err(Error::shape(format!("conv2d bias {:?} for {} channels", b.shape(), g.out_ch)));
        }
    }
    let mut out = Tensor::zeros(&[g.batch, g.out_ch, g.out_h, g.out_w]);
    let per_out = g.out_ch * g.out_area();
    let w = MatRef::row_major(kernel.data(), g.out_ch, g.patch_len());
    let xs = x.data();
    par::for_each_chunk_mut(out.data_mut(), per_out, |n, y| {
        let mut cols = vec![T::zero(); g.patch_len() * g.out_area()];
        im2col(&g, &xs[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
        gemm(T::one(), w, MatRef::row_major(&cols, g.patch_len(), g.out_area()), T::zero(), y);
        if let Some(b) = bias {
            for (o, plane) in y.chunks_mut(g.out_area()).enumerate() {
                let bo = b.data()[o];
                plane.iter_mut().for_each(|v| *v += bo);
            }
        }
    });
    Ok((out, g))
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dkernel: Tensor<T>,
    pub dbias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> ConvGrads<T> {
    let plen = g.patch_len();
    let area = g.out_area();
    let per_out = g.out_ch * area;
    let w = MatRef::row_major(kernel.data(), g.out_ch, plen);
    let n_chunks = g.batch.div_ceil(SAMPLE_CHUNK);
    let partials = par::map_indexed(n_chunks, |ci| {
        let lo = ci * SAMPLE_CHUNK;
        let hi = (lo + SAMPLE_CHUNK).min(g.batch);
        let mut dw = vec![T::zero(); g.out_ch * plen];
        let mut db = vec![T::zero(); g.out_ch];
        let mut dx = if need_dx { vec![T::zero(); (hi - lo) * g.in_len()] } else { Vec::new() };
        let mut cols = vec![T::zero(); plen * area];
        let mut dcols = vec![T::zero(); plen * area];
        for n in lo..hi {
            let dyn_ = &dy.data()[n * per_out..(n + 1) * per_out];
            im2col(g, &x.data()[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
            // dW += dy_n · cols_nᵀ
            gemm(
                T::one(),
                MatRef::row_major(dyn_, g.out_ch, area),
                MatRef::row_major(&cols, plen, area).t(),
                T::one(),
                &mut dw,
            );
            for (o, plane) in dyn_.chunks(area).enumerate() {
                db[o] += plane.iter().copied().sum::<T>();
            }
            if need_dx {
                gemm(T::one(), w.t(), MatRef::row_major(dyn_, g.out_ch, area), T::zero(), &mut dcols);
                let off = (n - lo) * g.in_len();
                col2im(g, &dcols, &mut dx[off..off + g.in_len()]);
            }
        }
        (dw, db, dx)
    });
    let mut dkernel = Tensor::zeros(kernel.shape());
    let mut dbias = Tensor::zeros(&[g.out_ch]);
    let mut dx = if need_dx { Some(Vec::with_capacity(g.batch * g.in_len())) } else { None };
    for (dw, db, dxc) in partials {
        for (a, b) in dkernel.data_mut().iter_mut().zip(dw) {
            *a += b;
        }
        for (a, b) in dbias.data_mut().iter_mut().zip(db) {
            *a += b;
        }
        if let Some(dx) = dx.as_mut() {
            dx.extend(dxc);
        }
    }
    ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("dx shape")),
        dkernel,
        dbias,
    }
}

pub fn linear_forward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let &[n, f] = x.shape() else {
        return Err(Error::shape(format!("linear input must be 2-d, got {:?}", x.shape())));
    };
    let &[u, wf] = weight.shape() else {
        return Err(Error::shape(format!("linear weight must be 2-d, got {:?}", weight.shape())));
    };
    if wf != f {
        return Err(Error::shape(format!("linear weight expects {wf} features, input has {f}")));
    }
    if let Some(b) = bias {
        if b.shape() != [u] {
            return Err(Error::shape(format!("linear bias {:?} for {u} units", b.shape())));
        }
    }
    let mut out = Tensor::zeros(&[n, u]);
    gemm(
        T::one(),
        MatRef::row_major(x.data(), n, f),
        MatRef::row_major(weight.data(), u, f).t(),
        T::zero(),
        out.data_mut(),
    );
    if let Some(b) = bias {
        for row in out.data_mut().chunks_mut(u) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(out)
}

/// Returns (dx, dweight, dbias).
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let u = weight.shape()[0];
    let dym = MatRef::row_major(dy.data(), n, u);
    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(&[n, f]);
        gemm(T::one(), dym, MatRef::row_major(weight.data(), u, f), T::zero(), dx.data_mut());
        dx
    });
    let mut dw = Tensor::zeros(&[u, f]);
    gemm(T::one(), dym.t(), MatRef::row_major(x.data(), n, f), T::zero(), dw.data_mut());
    let mut db = Tensor::zeros(&[u]);
    for row in dy.data().chunks(u) {
        for (a, &b) in db.data_mut().iter_mut().zip(row) {
            *a += b;
        }
    }
    (dx, dw, db)
}

/// Per-channel statistics of an NCHW (or NC) tensor: (mean, biased variance).
pub fn channel_moments<T: Real>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let inner: usize = x.shape()[2..].iter().product();
    let count = T::lit((n * inner) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * inner;
            s += x.data()[base..base + inner].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * inner;
            for &e in &x.data()[base..base + inner] {
                v += (e - m) * (e - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

/// 2×2 max pooling with stride 2. Returns output and the flat input index of
/// each output's maximum (first in row-major scan order on ties).
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::shape(format!("maxpool input must be 4-d, got {:?}", x.shape())));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("maxpool 2x2 needs even spatial extent, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let xs = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xs[idx] > xs[best] {
                        best = idx;
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                out.data_mut()[o] = xs[best];
                arg[o] = best as u32;
            }
        }
    }
    Ok((out, arg))
}

/// Adaptive average pooling to `(oh, ow)`; spatial extents must divide evenly.
pub fn avgpool_forward<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::shape(format!("avgpool input must be 4-d, got {:?}", x.shape())));
    };
    if oh == 0 || ow == 0 || h % oh != 0 || w % ow != 0 {
        return Err(Error::shape(format!("avgpool to {oh}x{ow} needs divisible extent, got {h}x{w}")));
    }
    let (wh, ww) = (h / oh, w / ow);
    let inv = T::one() / T::lit((wh * ww) as f64);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for dy in 0..wh {
                    let row = plane * h * w + (oy * wh + dy) * w + ox * ww;
                    s += x.data()[row..row + ww].iter().copied().sum::<T>();
                }
                out.data_mut()[plane * oh * ow + oy * ow + ox] = s * inv;
            }
        }
    }
    Ok(out)
}

pub fn avgpool_backward<T: Real>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    let (wh, ww) = (h / oh, w / ow);
    let inv = T::one() / T::lit((wh * ww) as f64);
    let mut dx = Tensor::zeros(in_shape);
    let planes = in_shape[0] * in_shape[1];
    for plane in 0..planes {
        for y in 0..h {
            for x in 0..w {
                dx.data_mut()[plane * h * w + y * w + x] = dy.data()[plane * oh * ow + (y / wh) * ow + x / ww] * inv;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_of_ones_sums_window() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let k = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1]);
        let (y, g) = conv2d_forward(&x, &k, Some(&b), 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
        assert_eq!(g.macs(), 9);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let x = Tensor::<f64>::full(&[2, 3, 5, 5], 0.7);
        let k = Tensor::<f64>::zeros(&[4, 3, 3, 3]);
        let b = Tensor::<f64>::from_f64(&[4], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let (y, _) = conv2d_forward(&x, &k, Some(&b), 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 5]);
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, b.data()[(i / 25) % 4]);
        }
    }

    #[test]
    fn conv_rejects_inexact_extent_and_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &k, None, 0, 2), Err(Error::Shape(_))));
        let k2 = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &k2, None, 1, 1), Err(Error::Shape(_))));
        let big = Tensor::<f32>::zeros(&[1, 1, 7, 7]);
        assert!(conv2d_forward(&x, &big, None, 1, 1).is_err());
    }

    #[test]
    fn strided_conv_matches_direct_sum() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 5, 5], &(0..25).map(|v| v as f64).collect::<Vec<_>>()).unwrap();
        let k = Tensor::<f64>::from_f64(&[1, 1, 3, 3], &[1.0, 0.0, -1.0, 2.0, 0.0, -2.0, 1.0, 0.0, -1.0]).unwrap();
        let (y, g) = conv2d_forward(&x, &k, None, 1, 2).unwrap();
        assert_eq!((g.out_h, g.out_w), (3, 3));
        for oy in 0..3 {
            for ox in 0..3 {
                let mut s = 0.0;
                for ki in 0..3 {
                    for kj in 0..3 {
                        let iy = (oy * 2 + ki) as isize - 1;
                        let ix = (ox * 2 + kj) as isize - 1;
                        if (0..5).contains(&iy) && (0..5).contains(&ix) {
                            s += x.data()[(iy * 5 + ix) as usize] * k.data()[ki * 3 + kj];
                        }
                    }
                }
                assert_eq!(y.data()[oy * 3 + ox], s);
            }
        }
    }

    #[test]
    fn maxpool_routes_to_first_max() {
        let x = Tensor::<f32>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let tied = Tensor::<f32>::from_f64(&[1, 1, 2, 2], &[5.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(maxpool2_forward(&tied).unwrap().1, vec![0]);
        let odd = Tensor::<f32>::zeros(&[1, 1, 3, 2]);
        assert!(maxpool2_forward(&odd).is_err());
    }

    #[test]
    fn avgpool_backward_is_uniform() {
        let dy = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let dx = avgpool_backward(&[1, 1, 4, 4], &dy);
        assert!(dx.data().iter().all(|&v| v == 0.25));
    }
}
