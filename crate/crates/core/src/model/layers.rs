//! Layer kernels over `(channels, height, width)` tensors.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};

/// Location of one convolution's parameters inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Conv {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, offset: &mut usize) -> Conv {
        let w_off = *offset;
        let b_off = w_off + out_ch * in_ch * k * k;
        *offset = b_off + out_ch;
        Conv { in_ch, out_ch, k, w_off, b_off }
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    pub fn weight<'a>(&self, theta: &'a [f64]) -> ArrayView2<'a, f64> {
        let n = self.out_ch * self.fan_in();
        ArrayView2::from_shape((self.out_ch, self.fan_in()), &theta[self.w_off..self.w_off + n])
            .expect("layout matches")
    }

    pub fn bias<'a>(&self, theta: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&theta[self.b_off..self.b_off + self.out_ch])
    }

    pub fn forward(&self, theta: &[f64], x: ArrayView3<'_, f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let cols = im2col(x, self.k);
        let mut out = self.weight(theta).dot(&cols);
        out += &self.bias(theta).insert_axis(Axis(1));
        let out = out.into_shape_with_order((self.out_ch, h, w)).expect("conv output shape");
        (out, cols)
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient when asked.
    pub fn backward(
        &self,
        theta: &[f64],
        cols: &Array2<f64>,
        dout: ArrayView3<'_, f64>,
        grad: &mut [f64],
        input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (_, h, w) = dout.dim();
        let d2 = dout
            .to_shape((self.out_ch, h * w))
            .expect("contiguous gradient");
        let dw = d2.dot(&cols.t());
        let nw = dw.len();
        for (g, v) in grad[self.w_off..self.w_off + nw].iter_mut().zip(dw.iter()) {
            *g += v;
        }
        for (o, g) in grad[self.b_off..self.b_off + self.out_ch].iter_mut().enumerate() {
            *g += d2.row(o).sum();
        }
        if !input_grad {
            return None;
        }
        let dcols = self.weight(theta).t().dot(&d2);
        Some(col2im(&dcols, self.in_ch, h, w, self.k))
    }
}

/// Columns of zero-padded `k x k` neighbourhoods, one row per `(channel, ky, kx)`.
pub(crate) fn im2col(x: ArrayView3<'_, f64>, k: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    if k == 1 {
        return x.to_shape((c, h * w)).expect("reshape").into_owned();
    }
    let pad = (k / 2) as isize;
    let mut cols = Array2::zeros((c * k * k, h * w));
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let mut row = cols.row_mut((ci * k + ky) * k + kx);
                let dst = row.as_slice_mut().expect("row slice");
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    for xx in x0..x1 {
                        drow[xx] = srow[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, k: usize) -> Array3<f64> {
    if k == 1 {
        return cols.to_shape((c, h, w)).expect("reshape").into_owned();
    }
    let pad = (k / 2) as isize;
    let mut out = Array3::zeros((c, h, w));
    let dst = out.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ci * k + ky) * k + kx);
                let src = row.as_slice().expect("row slice");
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[y * w..(y + 1) * w];
                    let drow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    for xx in x0..x1 {
                        drow[(xx as isize + dx) as usize] += srow[xx];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes the gradient where the activation was clipped.
pub(crate) fn relu_backward(activated: &Array3<f64>, dout: &mut Array3<f64>) {
    ndarray::Zip::from(dout).and(activated).for_each(|d, &a| {
        if a <= 0.0 {
            *d = 0.0;
        }
    });
}

/// 2x2 max pooling; also returns the winning offset (0..4) of each window.
pub(crate) fn maxpool2(x: &Array3<f64>) -> (Array3<f64>, Array3<u8>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, oh, ow));
    let mut arg = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                let mut best = x[[ch, 2 * r, 2 * col]];
                let mut bi = 0u8;
                for (i, (dr, dc)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let v = x[[ch, 2 * r + dr, 2 * col + dc]];
                    if v > best {
                        best = v;
                        bi = i as u8 + 1;
                    }
                }
                out[[ch, r, col]] = best;
                arg[[ch, r, col]] = bi;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward(dout: &Array3<f64>, arg: &Array3<u8>) -> Array3<f64> {
    let (c, oh, ow) = dout.dim();
    let mut dx = Array3::zeros((c, 2 * oh, 2 * ow));
    for ((ch, r, col), &g) in dout.indexed_iter() {
        let a = arg[[ch, r, col]] as usize;
        dx[[ch, 2 * r + a / 2, 2 * col + a % 2]] = g;
    }
    dx
}

pub(crate) fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, r, col)| x[[ch, r / 2, col / 2]])
}

pub(crate) fn upsample2_backward(dout: ArrayView3<'_, f64>) -> Array3<f64> {
    let (c, h, w) = dout.dim();
    let mut dx = Array3::zeros((c, h / 2, w / 2));
    for ((ch, r, col), &g) in dout.indexed_iter() {
        dx[[ch, r / 2, col / 2]] += g;
    }
    dx
}
