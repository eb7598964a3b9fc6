//! Dense signals on the discrete 2D torus.
//!
//! Every spatial index is taken modulo the field extent. All operations are
//! pure and come with a hand-written vector-Jacobian product (`*_vjp`), which
//! the training code composes explicitly through the unrolled recurrence.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{shape_err, Error, Result};

/// A `channels × height × width` real signal stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::constant(channels, height, width, 0.0)
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return shape_err(format!(
                "{} values for a {channels}x{height}x{width} field",
                data.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn random_uniform<R: Rng + ?Sized>(
        channels: usize,
        height: usize,
        width: usize,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let data = (0..channels * height * width)
            .map(|_| rng.gen_range(lo..hi))
            .collect();
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    /// Value at a possibly out-of-range position, wrapped onto the torus.
    pub fn at_wrapped(&self, c: usize, y: isize, x: isize) -> f64 {
        let y = y.rem_euclid(self.height as isize) as usize;
        let x = x.rem_euclid(self.width as isize) as usize;
        self.at(c, y, x)
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Field) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Field) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!("add {:?} to {:?}", other.shape(), self.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Stacks the channels of several equally sized fields.
    pub fn concat_channels(parts: &[&Field]) -> Result<Field> {
        let Some(first) = parts.first() else {
            return shape_err("concatenating zero fields");
        };
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if (p.height, p.width) != (h, w) {
                return shape_err(format!(
                    "concat {}x{} with {}x{}",
                    p.height, p.width, h, w
                ));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Field::from_vec(channels, h, w, data)
    }

    /// The first `channels` channels.
    pub fn leading_channels(&self, channels: usize) -> Field {
        let n = self.height * self.width;
        Field {
            channels,
            height: self.height,
            width: self.width,
            data: self.data[..channels * n].to_vec(),
        }
    }
}

/// A bank of centered `kh × kw` filters, stored `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    weights: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl Kernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if kh % 2 == 0 || kw % 2 == 0 {
            return shape_err(format!("kernel {kh}x{kw} must have odd extents"));
        }
        if weights.len() != out_channels * in_channels * kh * kw {
            return shape_err(format!(
                "{} weights for a {out_channels}x{in_channels}x{kh}x{kw} kernel",
                weights.len()
            ));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return shape_err(format!("{} biases for {out_channels} outputs", b.len()));
            }
        }
        Ok(Self {
            out_channels,
            in_channels,
            kh,
            kw,
            weights,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize, bias: bool) -> Self {
        Self {
            out_channels,
            in_channels,
            kh,
            kw,
            weights: vec![0.0; out_channels * in_channels * kh * kw],
            bias: bias.then(|| vec![0.0; out_channels]),
        }
    }

    /// Identity map: a single 1 at the spatial center of each diagonal channel pair.
    pub fn delta(channels: usize, kh: usize, kw: usize) -> Self {
        let mut k = Self::zeros(channels, channels, kh, kw, false);
        for c in 0..channels {
            let idx = k.index(c, c, kh / 2, kw / 2);
            k.weights[idx] = 1.0;
        }
        k
    }

    /// Uniform in `±1/sqrt(fan_in)`, fan_in = in_channels·kh·kw.
    pub fn init_uniform<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kh * kw) as f64).sqrt();
        let weights = (0..out_channels * in_channels * kh * kw)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let bias = bias.then(|| {
            (0..out_channels)
                .map(|_| rng.gen_range(-bound..bound))
                .collect()
        });
        Self {
            out_channels,
            in_channels,
            kh,
            kw,
            weights,
            bias,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.out_channels,
            self.in_channels,
            self.kh,
            self.kw,
            self.bias.is_some(),
        )
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kh(&self) -> usize {
        self.kh
    }

    pub fn kw(&self) -> usize {
        self.kw
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kh + ky) * self.kw + kx
    }

    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[self.index(o, i, ky, kx)]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    pub fn has_bias(&self) -> bool {
        self.bias.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Weights followed by bias, in storage order.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter().flatten())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut().flatten())
    }

    /// Row-major `out × (ky, kx, in)` matrix used by the im2col product.
    fn gemm_matrix(&self) -> Vec<f64> {
        let k = self.in_channels * self.kh * self.kw;
        let mut a = vec![0.0; self.out_channels * k];
        for o in 0..self.out_channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    for i in 0..self.in_channels {
                        a[o * k + (ky * self.kw + kx) * self.in_channels + i] =
                            self.weight(o, i, ky, kx);
                    }
                }
            }
        }
        a
    }

    fn from_gemm_matrix(&self, a: &[f64], bias: Option<Vec<f64>>) -> Kernel {
        let k = self.in_channels * self.kh * self.kw;
        let mut out = self.zeros_like();
        for o in 0..self.out_channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    for i in 0..self.in_channels {
                        let idx = out.index(o, i, ky, kx);
                        out.weights[idx] = a[o * k + (ky * self.kw + kx) * self.in_channels + i];
                    }
                }
            }
        }
        out.bias = bias;
        out
    }
}

/// A field replicated over a velocity index; slice `i` belongs to velocity `i`
/// of the accompanying velocity set.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityStack {
    slices: Vec<Field>,
}

impl VelocityStack {
    pub fn new(slices: Vec<Field>) -> Result<Self> {
        if let Some(first) = slices.first() {
            if slices.iter().any(|s| s.shape() != first.shape()) {
                return shape_err("velocity slices differ in shape");
            }
        }
        Ok(Self { slices })
    }

    pub fn zeros(velocities: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            slices: vec![Field::zeros(channels, height, width); velocities],
        }
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slice(&self, v: usize) -> &Field {
        &self.slices[v]
    }

    pub fn slice_mut(&mut self, v: usize) -> &mut Field {
        &mut self.slices[v]
    }

    pub fn slices(&self) -> &[Field] {
        &self.slices
    }

    pub fn into_slices(self) -> Vec<Field> {
        self.slices
    }

    pub fn slice_shape(&self) -> Option<(usize, usize, usize)> {
        self.slices.first().map(Field::shape)
    }

    pub fn max_abs_diff(&self, other: &VelocityStack) -> f64 {
        if self.len() != other.len() {
            return f64::INFINITY;
        }
        self.slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Left action of a translation: `out[c, y, x] = in[c, y - dy, x - dx]` (mod extent).
pub fn roll(f: &Field, dx: i64, dy: i64) -> Field {
    let (c, h, w) = f.shape();
    let mut out = Field::zeros(c, h, w);
    if f.is_empty() {
        return out;
    }
    let sx = dx.rem_euclid(w as i64) as usize;
    let sy = dy.rem_euclid(h as i64) as usize;
    for ch in 0..c {
        let src = f.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            let ys = (y + h - sy) % h;
            let s = &src[ys * w..(ys + 1) * w];
            let d = &mut dst[y * w..(y + 1) * w];
            d[sx..].copy_from_slice(&s[..w - sx]);
            d[..sx].copy_from_slice(&s[w - sx..]);
        }
    }
    out
}

pub fn roll_vjp(cotangent: &Field, dx: i64, dy: i64) -> Field {
    roll(cotangent, -dx, -dy)
}

/// Boundary handling for [`conv2d`]. Only `Circular` is translation
/// equivariant; `Zero` exists for negative controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Circular,
    Zero,
}

thread_local! {
    static COLUMNS: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fills `cols` with the `(ky, kx, in) × (y, x)` patch matrix of `f`.
fn im2col(f: &Field, kh: usize, kw: usize, padding: Padding, cols: &mut Vec<f64>) {
    let (c, h, w) = f.shape();
    let n = h * w;
    cols.clear();
    cols.resize(kh * kw * c * n, 0.0);
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    for ky in 0..kh {
        for kx in 0..kw {
            let oy = ky as isize - ry;
            let ox = kx as isize - rx;
            for i in 0..c {
                let row = ((ky * kw + kx) * c + i) * n;
                let src = f.plane(i);
                let dst = &mut cols[row..row + n];
                for y in 0..h {
                    let ys = y as isize + oy;
                    let d = &mut dst[y * w..(y + 1) * w];
                    match padding {
                        Padding::Circular => {
                            let ys = ys.rem_euclid(h as isize) as usize;
                            let s = &src[ys * w..(ys + 1) * w];
                            // d[x] = s[(x + ox) mod w]
                            let sh = ox.rem_euclid(w as isize) as usize;
                            d[..w - sh].copy_from_slice(&s[sh..]);
                            d[w - sh..].copy_from_slice(&s[..sh]);
                        }
                        Padding::Zero => {
                            if ys < 0 || ys >= h as isize {
                                continue;
                            }
                            let s = &src[ys as usize * w..(ys as usize + 1) * w];
                            for (x, dv) in d.iter_mut().enumerate() {
                                let xs = x as isize + ox;
                                if xs >= 0 && xs < w as isize {
                                    *dv = s[xs as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix cotangents back onto the field.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, padding: Padding) -> Field {
    let n = h * w;
    let mut out = Field::zeros(c, h, w);
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    for ky in 0..kh {
        for kx in 0..kw {
            let oy = ky as isize - ry;
            let ox = kx as isize - rx;
            for i in 0..c {
                let row = ((ky * kw + kx) * c + i) * n;
                let src = &cols[row..row + n];
                let dst = out.plane_mut(i);
                for y in 0..h {
                    let ys = y as isize + oy;
                    let s = &src[y * w..(y + 1) * w];
                    match padding {
                        Padding::Circular => {
                            let ys = ys.rem_euclid(h as isize) as usize;
                            let d = &mut dst[ys * w..(ys + 1) * w];
                            let sh = ox.rem_euclid(w as isize) as usize;
                            for (dv, sv) in d[sh..].iter_mut().zip(&s[..w - sh]) {
                                *dv += sv;
                            }
                            for (dv, sv) in d[..sh].iter_mut().zip(&s[w - sh..]) {
                                *dv += sv;
                            }
                        }
                        Padding::Zero => {
                            if ys < 0 || ys >= h as isize {
                                continue;
                            }
                            let d = &mut dst[ys as usize * w..(ys as usize + 1) * w];
                            for (x, sv) in s.iter().enumerate() {
                                let xs = x as isize + ox;
                                if xs >= 0 && xs < w as isize {
                                    d[xs as usize] += sv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation `out[o,y,x] = b[o] + Σ_{ky,kx,i} k[o,i,ky,kx]·f[i, y+ky-ry, x+kx-rx]`.
///
/// The per-pixel reduction always runs over the same `(ky, kx, i)` sequence,
/// so circular convolution commutes with [`roll`] bit for bit.
pub fn conv2d(f: &Field, k: &Kernel, padding: Padding) -> Result<Field> {
    if k.in_channels != f.channels {
        return shape_err(format!(
            "kernel expects {} input channels, field has {}",
            k.in_channels, f.channels
        ));
    }
    let (_, h, w) = f.shape();
    let n = h * w;
    let kdim = k.in_channels * k.kh * k.kw;
    let a = k.gemm_matrix();
    let mut out = Field::zeros(k.out_channels, h, w);
    COLUMNS.with(|cols| {
        let mut cols = cols.borrow_mut();
        im2col(f, k.kh, k.kw, padding, &mut cols);
        gemm(
            k.out_channels,
            kdim,
            n,
            &a,
            (kdim, 1),
            &cols,
            (n, 1),
            0.0,
            out.as_mut_slice(),
        );
    });
    if let Some(bias) = &k.bias {
        for (o, b) in bias.iter().enumerate() {
            out.plane_mut(o).iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(out)
}

pub fn conv2d_circular(f: &Field, k: &Kernel) -> Result<Field> {
    conv2d(f, k, Padding::Circular)
}

/// Returns `(∂/∂input, ∂/∂kernel)` of `⟨cotangent, conv2d(f, k)⟩`.
pub fn conv2d_vjp(f: &Field, k: &Kernel, padding: Padding, cotangent: &Field) -> Result<(Field, Kernel)> {
    let grad_kernel = conv2d_kernel_vjp(f, k, padding, cotangent)?;
    let grad_input = conv2d_input_vjp(k, padding, cotangent, f.height, f.width)?;
    Ok((grad_input, grad_kernel))
}

fn check_cotangent(k: &Kernel, cotangent: &Field, h: usize, w: usize) -> Result<()> {
    if cotangent.shape() != (k.out_channels, h, w) {
        return shape_err(format!(
            "conv cotangent {:?}, expected {:?}",
            cotangent.shape(),
            (k.out_channels, h, w)
        ));
    }
    Ok(())
}

/// Input half of [`conv2d_vjp`]: correlation of the cotangent with the flipped kernel.
pub fn conv2d_input_vjp(k: &Kernel, padding: Padding, cotangent: &Field, h: usize, w: usize) -> Result<Field> {
    check_cotangent(k, cotangent, h, w)?;
    let n = h * w;
    let kdim = k.in_channels * k.kh * k.kw;
    let a = k.gemm_matrix();
    let mut dcols = vec![0.0; kdim * n];
    // dcols[kdim×n] = aᵀ · g
    gemm(
        kdim,
        k.out_channels,
        n,
        &a,
        (1, kdim),
        cotangent.as_slice(),
        (n, 1),
        0.0,
        &mut dcols,
    );
    Ok(col2im(&dcols, k.in_channels, h, w, k.kh, k.kw, padding))
}

/// Kernel half of [`conv2d_vjp`].
pub fn conv2d_kernel_vjp(f: &Field, k: &Kernel, padding: Padding, cotangent: &Field) -> Result<Kernel> {
    if k.in_channels != f.channels {
        return shape_err(format!(
            "kernel expects {} input channels, field has {}",
            k.in_channels, f.channels
        ));
    }
    let mut grad = k.zeros_like();
    conv2d_kernel_vjp_acc(f, padding, cotangent, &mut grad)?;
    Ok(grad)
}

/// Accumulates the kernel gradient into `grad` (which also fixes the kernel shape).
pub fn conv2d_kernel_vjp_acc(f: &Field, padding: Padding, cotangent: &Field, grad: &mut Kernel) -> Result<()> {
    let (_, h, w) = f.shape();
    check_cotangent(grad, cotangent, h, w)?;
    if grad.in_channels != f.channels {
        return shape_err("kernel gradient does not match input channels");
    }
    let n = h * w;
    let kdim = grad.in_channels * grad.kh * grad.kw;
    let mut da = vec![0.0; grad.out_channels * kdim];
    COLUMNS.with(|cols| {
        let mut cols = cols.borrow_mut();
        im2col(f, grad.kh, grad.kw, padding, &mut cols);
        // da[out×kdim] = g · colsᵀ
        gemm(
            grad.out_channels,
            n,
            kdim,
            cotangent.as_slice(),
            (n, 1),
            &cols,
            (1, n),
            0.0,
            &mut da,
        );
    });
    let bias = grad.bias.as_ref().map(|b| {
        b.iter()
            .enumerate()
            .map(|(o, prev)| prev + cotangent.plane(o).iter().sum::<f64>())
            .collect()
    });
    let fresh = grad.from_gemm_matrix(&da, bias);
    for (g, d) in grad.weights.iter_mut().zip(&fresh.weights) {
        *g += d;
    }
    grad.bias = fresh.bias;
    Ok(())
}

/// Top-left corner of a centered `inner` block inside `outer`.
pub fn centered_offset(outer: usize, inner: usize) -> usize {
    (outer - inner) / 2
}

fn crop(f: &Field, h: usize, w: usize) -> Field {
    let (c, fh, fw) = f.shape();
    let (oy, ox) = (centered_offset(fh, h), centered_offset(fw, w));
    let mut out = Field::zeros(c, h, w);
    for ch in 0..c {
        let src = f.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            let s = (oy + y) * fw + ox;
            dst[y * w..(y + 1) * w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

fn embed(f: &Field, h: usize, w: usize) -> Field {
    let (c, fh, fw) = f.shape();
    let (oy, ox) = (centered_offset(h, fh), centered_offset(w, fw));
    let mut out = Field::zeros(c, h, w);
    for ch in 0..c {
        let src = f.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..fh {
            let d = (oy + y) * w + ox;
            dst[d..d + fw].copy_from_slice(&src[y * fw..(y + 1) * fw]);
        }
    }
    out
}

/// Centered `size × size` crop.
pub fn window(f: &Field, size: usize) -> Result<Field> {
    if size > f.height || size > f.width {
        return shape_err(format!(
            "window {size} larger than field {}x{}",
            f.height, f.width
        ));
    }
    Ok(crop(f, size, size))
}

/// Cotangent of [`window`]: zero-fill back to the source extent.
pub fn window_vjp(cotangent: &Field, height: usize, width: usize) -> Result<Field> {
    let (_, h, w) = cotangent.shape();
    if h > height || w > width {
        return shape_err("window cotangent larger than its source");
    }
    Ok(embed(cotangent, height, width))
}

/// Zero-fills `f` to `world × world`, placing it in the centered block.
pub fn pad(f: &Field, world: usize) -> Result<Field> {
    let (_, h, w) = f.shape();
    if world < h || world < w {
        return shape_err(format!("cannot pad {h}x{w} into world {world}"));
    }
    if (world - h) % 2 != 0 || (world - w) % 2 != 0 {
        return shape_err(format!(
            "padding {h}x{w} into {world} cannot be centered (odd margin)"
        ));
    }
    Ok(embed(f, world, world))
}

/// Cotangent of [`pad`]: the centered block.
pub fn pad_vjp(cotangent: &Field, height: usize, width: usize) -> Result<Field> {
    if height > cotangent.height || width > cotangent.width {
        return shape_err("pad cotangent smaller than its source");
    }
    Ok(crop(cotangent, height, width))
}

/// Per-element maximum over velocity slices plus the winning slice index.
/// Ties go to the lowest index.
pub fn maxpool_velocity(h: &VelocityStack) -> Result<(Field, Vec<u16>)> {
    let Some(first) = h.slices.first() else {
        return shape_err("max-pool over an empty velocity stack");
    };
    let mut out = first.clone();
    let mut arg = vec![0u16; first.len()];
    for (v, s) in h.slices.iter().enumerate().skip(1) {
        for ((o, a), &x) in out.data.iter_mut().zip(arg.iter_mut()).zip(&s.data) {
            if x > *o {
                *o = x;
                *a = v as u16;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool_velocity_vjp(cotangent: &Field, argmax: &[u16], velocities: usize) -> Result<VelocityStack> {
    if cotangent.len() != argmax.len() {
        return shape_err("max-pool cotangent does not match recorded argmax");
    }
    let (c, h, w) = cotangent.shape();
    let mut out = VelocityStack::zeros(velocities, c, h, w);
    for (i, (&g, &v)) in cotangent.data.iter().zip(argmax).enumerate() {
        out.slices[v as usize].data[i] = g;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    /// Derivative at the primal input `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = self.apply(x);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    /// Derivative expressed through the output `y = apply(x)`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Activation::Relu, Activation::Sigmoid, Activation::Identity]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown activation `{s}` (relu|sigmoid|identity)")))
    }
}

pub fn pointwise(f: &Field, act: Activation) -> Field {
    match act {
        Activation::Identity => f.clone(),
        _ => f.map(|x| act.apply(x)),
    }
}

pub fn pointwise_vjp(f: &Field, act: Activation, cotangent: &Field) -> Result<Field> {
    if f.shape() != cotangent.shape() {
        return shape_err("activation cotangent shape differs from input");
    }
    Ok(Field {
        data: f
            .data
            .iter()
            .zip(&cotangent.data)
            .map(|(&x, &g)| g * act.derivative(x))
            .collect(),
        ..*f
    })
}
