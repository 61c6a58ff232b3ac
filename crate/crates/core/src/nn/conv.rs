//! 2D convolution and transposed convolution via im2col + GEMM.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{Gradients, Real};

/// Gather patches: `cols[b*gh*gw + gy*gw + gx, (c*k + ky)*k + kx] =
/// x[b, c, gy*s + ky - p, gx*s + kx - p]` (zero outside).
fn im2col<T: Real>(
    x: &Array4<T>,
    k: usize,
    s: usize,
    p: usize,
    grid: (usize, usize),
) -> Array2<T> {
    let (b, c, h, w) = x.dim();
    let (gh, gw) = grid;
    let mut cols = Array2::<T>::zeros((b * gh * gw, c * k * k));
    let xs = x.as_slice().expect("contiguous input");
    let cs = cols.as_slice_mut().expect("contiguous cols");
    let row_len = c * k * k;
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let row = ((bi * gh + gy) * gw + gx) * row_len;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = gy * s + ky;
                        if iy < p || iy - p >= h {
                            continue;
                        }
                        let iy = iy - p;
                        let xbase = ((bi * c + ci) * h + iy) * w;
                        let cbase = row + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ix = gx * s + kx;
                            if ix < p || ix - p >= w {
                                continue;
                            }
                            cs[cbase + kx] = xs[xbase + (ix - p)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add: the adjoint of [`im2col`] with the same geometry.
fn col2im<T: Real>(
    cols: &Array2<T>,
    img_shape: (usize, usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
    grid: (usize, usize),
) -> Array4<T> {
    let (b, c, h, w) = img_shape;
    let (gh, gw) = grid;
    let mut img = Array4::<T>::zeros(img_shape);
    let is = img.as_slice_mut().expect("contiguous image");
    let cs = cols.as_slice().expect("contiguous cols");
    let row_len = c * k * k;
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let row = ((bi * gh + gy) * gw + gx) * row_len;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = gy * s + ky;
                        if iy < p || iy - p >= h {
                            continue;
                        }
                        let iy = iy - p;
                        let ibase = ((bi * c + ci) * h + iy) * w;
                        let cbase = row + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ix = gx * s + kx;
                            if ix < p || ix - p >= w {
                                continue;
                            }
                            is[ibase + (ix - p)] += cs[cbase + kx];
                        }
                    }
                }
            }
        }
    }
    img
}

pub(crate) fn to_channel_last<T: Real>(x: &Array4<T>) -> Array2<T> {
    let (b, c, h, w) = x.dim();
    let moved = x.view().permuted_axes([0, 2, 3, 1]);
    let owned = moved.as_standard_layout().into_owned();
    owned
        .into_shape_with_order((b * h * w, c))
        .expect("channel-last reshape")
}

pub(crate) fn from_channel_last<T: Real>(x2: Array2<T>, b: usize, h: usize, w: usize) -> Array4<T> {
    let c = x2.ncols();
    let x4 = x2
        .into_shape_with_order((b, h, w, c))
        .expect("channel-last reshape");
    let moved = x4.permuted_axes([0, 3, 1, 2]);
    moved.as_standard_layout().into_owned()
}

/// Standard convolution; weight layout (out, in, k, k).
#[derive(Debug, Clone)]
pub struct Conv2d<T: Real> {
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub stride: usize,
    pub padding: usize,
}

pub struct Conv2dCache<T: Real> {
    cols: Array2<T>,
    in_shape: (usize, usize, usize, usize),
    out_grid: (usize, usize),
}

impl<T: Real> Conv2d<T> {
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut weight = Array4::zeros((out_ch, in_ch, kernel, kernel));
        for v in weight.iter_mut() {
            *v = T::from_f64(rng.random_range(-bound..bound));
        }
        let mut bias = Array1::zeros(out_ch);
        for v in bias.iter_mut() {
            *v = T::from_f64(rng.random_range(-bound..bound));
        }
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, Conv2dCache<T>) {
        let (b, _c, h, w) = x.dim();
        let (o, i, k, _) = self.weight.dim();
        let (oh, ow) = self.out_size(h, w);
        let cols = im2col(x, k, self.stride, self.padding, (oh, ow));
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("weight reshape");
        let mut y2 = cols.dot(&w_mat.t());
        y2 += &self.bias;
        let y = from_channel_last(y2, b, oh, ow);
        (
            y,
            Conv2dCache {
                cols,
                in_shape: x.dim(),
                out_grid: (oh, ow),
            },
        )
    }

    pub fn forward_nocache(&self, x: &Array4<T>) -> Array4<T> {
        self.forward(x).0
    }

    pub fn backward(
        &self,
        prefix: &str,
        cache: &Conv2dCache<T>,
        dy: &Array4<T>,
        grads: &mut Gradients<T>,
    ) -> Array4<T> {
        let (o, i, k, _) = self.weight.dim();
        let dy2 = to_channel_last(dy); // (B*oh*ow, O)
        let dw_mat = dy2.t().dot(&cache.cols); // (O, I*k*k)
        let dw = dw_mat
            .into_shape_with_order((o, i, k, k))
            .expect("dw reshape");
        let db = dy2.sum_axis(Axis(0));
        grads.add(&format!("{prefix}.weight"), dw.into_dyn());
        grads.add(&format!("{prefix}.bias"), db.into_dyn());
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("weight reshape");
        let dcols = dy2.dot(&w_mat);
        col2im(
            &dcols,
            cache.in_shape,
            k,
            self.stride,
            self.padding,
            cache.out_grid,
        )
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Transposed convolution; weight layout (in, out, k, k).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T: Real> {
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub stride: usize,
    pub padding: usize,
}

pub struct ConvTranspose2dCache<T: Real> {
    x2: Array2<T>, // (B*ih*iw, I)
    in_grid: (usize, usize),
    batch: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        // fan-in per output element is in_ch * k^2 / s^2
        let fan = (in_ch * kernel * kernel) / (stride * stride);
        let bound = 1.0 / (fan.max(1) as f64).sqrt();
        let mut weight = Array4::zeros((in_ch, out_ch, kernel, kernel));
        for v in weight.iter_mut() {
            *v = T::from_f64(rng.random_range(-bound..bound));
        }
        let mut bias = Array1::zeros(out_ch);
        for v in bias.iter_mut() {
            *v = T::from_f64(rng.random_range(-bound..bound));
        }
        ConvTranspose2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    /// Zero-initialized variant (output head).
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvTranspose2d {
            weight: Array4::zeros((in_ch, out_ch, kernel, kernel)),
            bias: Array1::zeros(out_ch),
            stride,
            padding,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.weight.dim().1
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h - 1) * self.stride + k - 2 * self.padding,
            (w - 1) * self.stride + k - 2 * self.padding,
        )
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, ConvTranspose2dCache<T>) {
        let (b, _i, ih, iw) = x.dim();
        let (i, o, k, _) = self.weight.dim();
        let (oh, ow) = self.out_size(ih, iw);
        let x2 = to_channel_last(x); // (B*ih*iw, I)
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((i, o * k * k))
            .expect("weight reshape");
        let cols = x2.dot(&w_mat); // (B*ih*iw, O*k*k)
        let mut y = col2im(&cols, (b, o, oh, ow), k, self.stride, self.padding, (ih, iw));
        for (ci, &bv) in self.bias.iter().enumerate() {
            y.slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|v| v + bv);
        }
        (
            y,
            ConvTranspose2dCache {
                x2,
                in_grid: (ih, iw),
                batch: b,
            },
        )
    }

    pub fn forward_nocache(&self, x: &Array4<T>) -> Array4<T> {
        self.forward(x).0
    }

    pub fn backward(
        &self,
        prefix: &str,
        cache: &ConvTranspose2dCache<T>,
        dy: &Array4<T>,
        grads: &mut Gradients<T>,
    ) -> Array4<T> {
        let (i, o, k, _) = self.weight.dim();
        let (ih, iw) = cache.in_grid;
        let dcols = im2col(dy, k, self.stride, self.padding, (ih, iw)); // (B*ih*iw, O*k*k)
        let dw_mat = cache.x2.t().dot(&dcols); // (I, O*k*k)
        let dw = dw_mat
            .into_shape_with_order((i, o, k, k))
            .expect("dw reshape");
        let mut db = Array1::<T>::zeros(o);
        for (ci, dbv) in db.iter_mut().enumerate() {
            *dbv = dy.slice(ndarray::s![.., ci, .., ..]).sum();
        }
        grads.add(&format!("{prefix}.weight"), dw.into_dyn());
        grads.add(&format!("{prefix}.bias"), db.into_dyn());
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((i, o * k * k))
            .expect("weight reshape");
        let dx2 = dcols.dot(&w_mat.t()); // (B*ih*iw, I)
        from_channel_last(dx2, cache.batch, ih, iw)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}
