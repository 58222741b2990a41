use rand::Rng;

use super::{gemm, map_chunks, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Images per im2col block. Fixed so gradient reductions are reproducible.
const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Window {
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Window {
    fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Unfolds one `c×h×w` image into rows `(ci, ki, kj)` of `cols`, writing
    /// the `ho·wo` output positions starting at column `col0` of a matrix with
    /// leading dimension `ld`. `cols` must be zeroed beforehand.
    #[allow(clippy::too_many_arguments)]
    fn im2col<T: Real>(
        &self,
        img: &[T],
        c: usize,
        h: usize,
        w: usize,
        cols: &mut [T],
        ld: usize,
        col0: usize,
    ) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (ho, wo) = (self.out_len(h), self.out_len(w));
        for ci in 0..c {
            let plane = &img[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let base = ((ci * k + ki) * k + kj) * ld + col0;
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut cols[base + oy * wo..base + (oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatters-adds columns back into an image.
    #[allow(clippy::too_many_arguments)]
    fn col2im<T: Real>(
        &self,
        cols: &[T],
        c: usize,
        h: usize,
        w: usize,
        ld: usize,
        col0: usize,
        img: &mut [T],
    ) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (ho, wo) = (self.out_len(h), self.out_len(w));
        for ci in 0..c {
            let plane = &mut img[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let base = ((ci * k + ki) * k + kj) * ld + col0;
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src = &cols[base + oy * wo..base + (oy + 1) * wo];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn uniform_tensor<T: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

fn check_4d<T: Real>(layer: &str, x: &Tensor<T>, channels: usize) -> Result<(usize, usize, usize)> {
    if x.shape().len() != 4 || x.dim(1) != channels {
        return Err(Error::dim(
            layer,
            format!("[batch, {channels}, h, w]"),
            format!("{:?}", x.shape()),
        ));
    }
    Ok((x.dim(0), x.dim(2), x.dim(3)))
}

/// Strided 2-D convolution, weight layout `[c_out, c_in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    name: String,
    weight: ParamId,
    bias: ParamId,
    c_in: usize,
    c_out: usize,
    window: Window,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform_tensor(&[c_out, c_in, kernel, kernel], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), uniform_tensor(&[c_out], bound, rng));
        Conv2d {
            name: name.to_string(),
            weight,
            bias,
            c_in,
            c_out,
            window: Window {
                kernel,
                stride,
                padding,
            },
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (self.window.out_len(h), self.window.out_len(w))
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, h, w) = check_4d(&self.name, x, self.c_in)?;
        let (ho, wo) = self.output_hw(h, w);
        let (hw_in, hw_out) = (h * w, ho * wo);
        let ckk = self.c_in * self.window.kernel * self.window.kernel;
        let wt = store.value(self.weight).data();
        let bias = store.value(self.bias).data();
        let xs = x.data();
        let blocks = map_chunks(batch, CHUNK, |range| {
            let nb = range.len();
            let ld = nb * hw_out;
            let mut cols = vec![T::zero(); ckk * ld];
            for (j, b) in range.clone().enumerate() {
                let img = &xs[b * self.c_in * hw_in..(b + 1) * self.c_in * hw_in];
                self.window
                    .im2col(img, self.c_in, h, w, &mut cols, ld, j * hw_out);
            }
            let mut prod = vec![T::zero(); self.c_out * ld];
            gemm(
                false,
                false,
                self.c_out,
                ld,
                ckk,
                wt,
                &cols,
                T::zero(),
                &mut prod,
            );
            let mut out = vec![T::zero(); nb * self.c_out * hw_out];
            for j in 0..nb {
                for o in 0..self.c_out {
                    let src = &prod[o * ld + j * hw_out..o * ld + (j + 1) * hw_out];
                    let dst =
                        &mut out[(j * self.c_out + o) * hw_out..(j * self.c_out + o + 1) * hw_out];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bias[o];
                    }
                }
            }
            out
        });
        Tensor::from_vec(&[batch, self.c_out, ho, wo], blocks.concat())
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `input_grad` is set.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let (batch, h, w) = check_4d(&self.name, x, self.c_in)?;
        let (ho, wo) = self.output_hw(h, w);
        if grad_out.shape() != [batch, self.c_out, ho, wo] {
            return Err(Error::dim(
                &self.name,
                format!("grad {:?}", [batch, self.c_out, ho, wo]),
                format!("{:?}", grad_out.shape()),
            ));
        }
        let (hw_in, hw_out) = (h * w, ho * wo);
        let ckk = self.c_in * self.window.kernel * self.window.kernel;
        let wt = store.value(self.weight).data();
        let (xs, gs) = (x.data(), grad_out.data());
        let parts = map_chunks(batch, CHUNK, |range| {
            let nb = range.len();
            let ld = nb * hw_out;
            let mut cols = vec![T::zero(); ckk * ld];
            let mut g = vec![T::zero(); self.c_out * ld];
            for (j, b) in range.clone().enumerate() {
                let img = &xs[b * self.c_in * hw_in..(b + 1) * self.c_in * hw_in];
                self.window
                    .im2col(img, self.c_in, h, w, &mut cols, ld, j * hw_out);
                for o in 0..self.c_out {
                    let src = &gs[(b * self.c_out + o) * hw_out..(b * self.c_out + o + 1) * hw_out];
                    g[o * ld + j * hw_out..o * ld + (j + 1) * hw_out].copy_from_slice(src);
                }
            }
            let mut dw = vec![T::zero(); self.c_out * ckk];
            gemm(
                false,
                true,
                self.c_out,
                ckk,
                ld,
                &g,
                &cols,
                T::zero(),
                &mut dw,
            );
            let db: Vec<T> = (0..self.c_out)
                .map(|o| g[o * ld..(o + 1) * ld].iter().copied().sum())
                .collect();
            let dx = input_grad.then(|| {
                gemm(
                    true,
                    false,
                    ckk,
                    ld,
                    self.c_out,
                    wt,
                    &g,
                    T::zero(),
                    &mut cols,
                );
                let mut dx = vec![T::zero(); nb * self.c_in * hw_in];
                for j in 0..nb {
                    let img = &mut dx[j * self.c_in * hw_in..(j + 1) * self.c_in * hw_in];
                    self.window
                        .col2im(&cols, self.c_in, h, w, ld, j * hw_out, img);
                }
                dx
            });
            (dw, db, dx)
        });
        let mut dx_all = Vec::with_capacity(if input_grad { xs.len() } else { 0 });
        for (dw, db, dx) in parts {
            store.accumulate(self.weight, &dw);
            store.accumulate(self.bias, &db);
            if let Some(dx) = dx {
                dx_all.extend(dx);
            }
        }
        if input_grad {
            Ok(Some(Tensor::from_vec(x.shape(), dx_all)?))
        } else {
            Ok(None)
        }
    }
}

/// Strided transposed convolution (adjoint of [`Conv2d`]), weight layout
/// `[c_in, c_out, k, k]`; output side is `(n − 1)·stride − 2·padding + k`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    name: String,
    weight: ParamId,
    bias: ParamId,
    c_in: usize,
    c_out: usize,
    window: Window,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((c_out * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform_tensor(&[c_in, c_out, kernel, kernel], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), uniform_tensor(&[c_out], bound, rng));
        ConvTranspose2d {
            name: name.to_string(),
            weight,
            bias,
            c_in,
            c_out,
            window: Window {
                kernel,
                stride,
                padding,
            },
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let Window {
            kernel,
            stride,
            padding,
        } = self.window;
        (
            (h - 1) * stride + kernel - 2 * padding,
            (w - 1) * stride + kernel - 2 * padding,
        )
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, h, w) = check_4d(&self.name, x, self.c_in)?;
        let (ho, wo) = self.output_hw(h, w);
        let (hw_in, hw_out) = (h * w, ho * wo);
        let ckk = self.c_out * self.window.kernel * self.window.kernel;
        let wt = store.value(self.weight).data();
        let bias = store.value(self.bias).data();
        let xs = x.data();
        let blocks = map_chunks(batch, CHUNK, |range| {
            let nb = range.len();
            let ld = nb * hw_in;
            let mut xm = vec![T::zero(); self.c_in * ld];
            for (j, b) in range.clone().enumerate() {
                for c in 0..self.c_in {
                    let src = &xs[(b * self.c_in + c) * hw_in..(b * self.c_in + c + 1) * hw_in];
                    xm[c * ld + j * hw_in..c * ld + (j + 1) * hw_in].copy_from_slice(src);
                }
            }
            let mut cols = vec![T::zero(); ckk * ld];
            gemm(
                true,
                false,
                ckk,
                ld,
                self.c_in,
                wt,
                &xm,
                T::zero(),
                &mut cols,
            );
            let mut out = vec![T::zero(); nb * self.c_out * hw_out];
            for j in 0..nb {
                let img = &mut out[j * self.c_out * hw_out..(j + 1) * self.c_out * hw_out];
                self.window
                    .col2im(&cols, self.c_out, ho, wo, ld, j * hw_in, img);
                for o in 0..self.c_out {
                    img[o * hw_out..(o + 1) * hw_out]
                        .iter_mut()
                        .for_each(|v| *v += bias[o]);
                }
            }
            out
        });
        Tensor::from_vec(&[batch, self.c_out, ho, wo], blocks.concat())
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let (batch, h, w) = check_4d(&self.name, x, self.c_in)?;
        let (ho, wo) = self.output_hw(h, w);
        if grad_out.shape() != [batch, self.c_out, ho, wo] {
            return Err(Error::dim(
                &self.name,
                format!("grad {:?}", [batch, self.c_out, ho, wo]),
                format!("{:?}", grad_out.shape()),
            ));
        }
        let (hw_in, hw_out) = (h * w, ho * wo);
        let ckk = self.c_out * self.window.kernel * self.window.kernel;
        let wt = store.value(self.weight).data();
        let (xs, gs) = (x.data(), grad_out.data());
        let parts = map_chunks(batch, CHUNK, |range| {
            let nb = range.len();
            let ld = nb * hw_in;
            let mut xm = vec![T::zero(); self.c_in * ld];
            let mut gcols = vec![T::zero(); ckk * ld];
            let mut db = vec![T::zero(); self.c_out];
            for (j, b) in range.clone().enumerate() {
                for c in 0..self.c_in {
                    let src = &xs[(b * self.c_in + c) * hw_in..(b * self.c_in + c + 1) * hw_in];
                    xm[c * ld + j * hw_in..c * ld + (j + 1) * hw_in].copy_from_slice(src);
                }
                let gimg = &gs[b * self.c_out * hw_out..(b + 1) * self.c_out * hw_out];
                self.window
                    .im2col(gimg, self.c_out, ho, wo, &mut gcols, ld, j * hw_in);
                for (o, d) in db.iter_mut().enumerate() {
                    *d += gimg[o * hw_out..(o + 1) * hw_out]
                        .iter()
                        .copied()
                        .sum::<T>();
                }
            }
            let mut dw = vec![T::zero(); self.c_in * ckk];
            gemm(
                false,
                true,
                self.c_in,
                ckk,
                ld,
                &xm,
                &gcols,
                T::zero(),
                &mut dw,
            );
            let dx = input_grad.then(|| {
                let mut dxm = vec![T::zero(); self.c_in * ld];
                gemm(
                    false,
                    false,
                    self.c_in,
                    ld,
                    ckk,
                    wt,
                    &gcols,
                    T::zero(),
                    &mut dxm,
                );
                let mut dx = vec![T::zero(); nb * self.c_in * hw_in];
                for j in 0..nb {
                    for c in 0..self.c_in {
                        dx[(j * self.c_in + c) * hw_in..(j * self.c_in + c + 1) * hw_in]
                            .copy_from_slice(&dxm[c * ld + j * hw_in..c * ld + (j + 1) * hw_in]);
                    }
                }
                dx
            });
            (dw, db, dx)
        });
        let mut dx_all = Vec::with_capacity(if input_grad { xs.len() } else { 0 });
        for (dw, db, dx) in parts {
            store.accumulate(self.weight, &dw);
            store.accumulate(self.bias, &db);
            if let Some(dx) = dx {
                dx_all.extend(dx);
            }
        }
        if input_grad {
            Ok(Some(Tensor::from_vec(x.shape(), dx_all)?))
        } else {
            Ok(None)
        }
    }
}

/// Fully connected layer `y = x·Wᵀ + b`, weight layout `[out, in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    name: String,
    weight: ParamId,
    bias: ParamId,
    d_in: usize,
    d_out: usize,
}

impl Dense {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform_tensor(&[d_out, d_in], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), uniform_tensor(&[d_out], bound, rng));
        Dense {
            name: name.to_string(),
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    fn check<T: Real>(&self, x: &Tensor<T>) -> Result<usize> {
        if x.shape().len() != 2 || x.dim(1) != self.d_in {
            return Err(Error::dim(
                &self.name,
                format!("[batch, {}]", self.d_in),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(x.dim(0))
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check(x)?;
        let mut y = vec![T::zero(); batch * self.d_out];
        for row in y.chunks_mut(self.d_out) {
            row.copy_from_slice(store.value(self.bias).data());
        }
        gemm(
            false,
            true,
            batch,
            self.d_out,
            self.d_in,
            x.data(),
            store.value(self.weight).data(),
            T::one(),
            &mut y,
        );
        Tensor::from_vec(&[batch, self.d_out], y)
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let batch = self.check(x)?;
        if grad_out.shape() != [batch, self.d_out] {
            return Err(Error::dim(
                &self.name,
                format!("grad [{batch}, {}]", self.d_out),
                format!("{:?}", grad_out.shape()),
            ));
        }
        let g = grad_out.data();
        gemm(
            true,
            false,
            self.d_out,
            self.d_in,
            batch,
            g,
            x.data(),
            T::one(),
            store.grad_mut(self.weight),
        );
        let mut db = vec![T::zero(); self.d_out];
        for row in g.chunks(self.d_out) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        store.accumulate(self.bias, &db);
        if !input_grad {
            return Ok(None);
        }
        let mut dx = vec![T::zero(); batch * self.d_in];
        gemm(
            false,
            false,
            batch,
            self.d_in,
            self.d_out,
            g,
            store.value(self.weight).data(),
            T::zero(),
            &mut dx,
        );
        Ok(Some(Tensor::from_vec(x.shape(), dx)?))
    }
}

pub fn relu_forward<T: Real>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Masks `grad` in place by the relu output `y` (derivative 1 where `y > 0`).
pub fn relu_backward<T: Real>(y: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &v) in grad.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn sigmoid_forward<T: Real>(x: &mut Tensor<T>) {
    x.data_mut()
        .iter_mut()
        .for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
}

/// Chains `grad` through the logistic output `y`: `dy/dx = y(1 − y)`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &v) in grad.data_mut().iter_mut().zip(y.data()) {
        *g *= v * (T::one() - v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
        uniform_tensor(shape, 1.0, r)
    }

    fn set(store: &mut ParamStore<f64>, id: ParamId, v: &[f64]) {
        store.param_mut(id).value.data_mut().copy_from_slice(v);
    }

    /// Direct-definition convolution: `y[b,o,i,j] = bias[o] + Σ w[o,c,ki,kj]·x[b,c,i·s+ki−p, j·s+kj−p]`.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: &[f64],
        s: usize,
        p: usize,
    ) -> Tensor<f64> {
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, k) = (w.dim(0), w.dim(2));
        let (ho, wo) = ((h + 2 * p - k) / s + 1, (wd + 2 * p - k) / s + 1);
        let mut y = Tensor::zeros(&[n, o, ho, wo]);
        for b in 0..n {
            for oc in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = bias[oc];
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let (yy, xx) = (
                                        (i * s + ki) as isize - p as isize,
                                        (j * s + kj) as isize - p as isize,
                                    );
                                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd
                                    {
                                        acc += w.data()[((oc * c + ic) * k + ki) * k + kj]
                                            * x.data()[((b * c + ic) * h + yy as usize) * wd
                                                + xx as usize];
                                    }
                                }
                            }
                        }
                        y.data_mut()[((b * o + oc) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        y
    }

    /// Direct-definition transposed convolution: every input pixel scatters
    /// `x·w[c,o,:,:]` onto the output at offset `(i·s − p, j·s − p)`.
    fn naive_deconv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: &[f64],
        s: usize,
        p: usize,
    ) -> Tensor<f64> {
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, k) = (w.dim(1), w.dim(2));
        let (ho, wo) = ((h - 1) * s + k - 2 * p, (wd - 1) * s + k - 2 * p);
        let mut y = Tensor::zeros(&[n, o, ho, wo]);
        for b in 0..n {
            for oc in 0..o {
                for v in &mut y.data_mut()[(b * o + oc) * ho * wo..(b * o + oc + 1) * ho * wo] {
                    *v = bias[oc];
                }
                for ic in 0..c {
                    for i in 0..h {
                        for j in 0..wd {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let (yy, xx) = (
                                        (i * s + ki) as isize - p as isize,
                                        (j * s + kj) as isize - p as isize,
                                    );
                                    if yy >= 0
                                        && xx >= 0
                                        && (yy as usize) < ho
                                        && (xx as usize) < wo
                                    {
                                        y.data_mut()[((b * o + oc) * ho + yy as usize) * wo
                                            + xx as usize] += x.data()
                                            [((b * c + ic) * h + i) * wd + j]
                                            * w.data()[((ic * o + oc) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn relu_reference_values() {
        let mut y = Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        relu_forward(&mut y);
        assert_eq!(y.data(), &[0.0, 2.0]);
        let mut g = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        relu_backward(&y, &mut g);
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn sigmoid_reference_values() {
        let mut y = Tensor::from_vec(&[2], vec![0.0, 2f64.ln()]).unwrap();
        sigmoid_forward(&mut y);
        assert!((y.data()[0] - 0.5).abs() < 1e-15 && (y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let mut g = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        sigmoid_backward(&y, &mut g);
        assert!((g.data()[0] - 0.25).abs() < 1e-15 && (g.data()[1] - 2.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut store = ParamStore::<f64>::new();
        let d = Dense::new(&mut store, "fc", 3, 3, &mut rng(0));
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        set(&mut store, d.weight(), &eye);
        set(&mut store, d.bias(), &[0.0; 3]);
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(d.forward(&store, &x).unwrap(), x);
    }

    #[test]
    fn unit_one_by_one_conv_passes_input_through() {
        let mut store = ParamStore::<f64>::new();
        let c = Conv2d::new(&mut store, "conv", 1, 1, 1, 1, 0, &mut rng(0));
        set(&mut store, c.weight(), &[1.0]);
        set(&mut store, c.bias(), &[0.0]);
        let x = random(&[3, 1, 5, 4], &mut rng(1));
        assert_eq!(c.forward(&store, &x).unwrap(), x);
    }

    #[test]
    fn conv_matches_direct_definition() {
        for (seed, (n, ci, co, h, k, s, p)) in [
            (2, 3, 4, 8, 4, 2, 1),
            (11, 2, 3, 7, 3, 1, 1),
            (1, 1, 2, 6, 4, 2, 1),
        ]
        .into_iter()
        .enumerate()
        {
            let mut r = rng(seed as u64);
            let mut store = ParamStore::<f64>::new();
            let c = Conv2d::new(&mut store, "conv", ci, co, k, s, p, &mut r);
            let x = random(&[n, ci, h, h], &mut r);
            let want = naive_conv(
                &x,
                store.value(c.weight()),
                store.value(c.bias()).data(),
                s,
                p,
            );
            assert!(max_diff(&c.forward(&store, &x).unwrap(), &want) < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_matches_direct_definition() {
        for (seed, (n, ci, co, h, k, s, p)) in [
            (2, 3, 4, 4, 4, 2, 1),
            (11, 2, 3, 5, 3, 1, 1),
            (1, 4, 1, 2, 4, 2, 1),
        ]
        .into_iter()
        .enumerate()
        {
            let mut r = rng(seed as u64);
            let mut store = ParamStore::<f64>::new();
            let c = ConvTranspose2d::new(&mut store, "deconv", ci, co, k, s, p, &mut r);
            let x = random(&[n, ci, h, h], &mut r);
            let want = naive_deconv(
                &x,
                store.value(c.weight()),
                store.value(c.bias()).data(),
                s,
                p,
            );
            assert!(max_diff(&c.forward(&store, &x).unwrap(), &want) < 1e-12);
        }
    }

    #[test]
    fn stride_two_conv_and_transpose_invert_spatial_size() {
        let mut store = ParamStore::<f64>::new();
        let c = Conv2d::new(&mut store, "conv", 1, 2, 4, 2, 1, &mut rng(0));
        let d = ConvTranspose2d::new(&mut store, "deconv", 2, 1, 4, 2, 1, &mut rng(0));
        for side in [64, 32, 8] {
            assert_eq!(c.output_hw(side, side), (side / 2, side / 2));
            assert_eq!(d.output_hw(side / 2, side / 2), (side, side));
        }
    }

    #[test]
    fn shape_mismatch_names_the_layer() {
        let mut store = ParamStore::<f64>::new();
        let c = Conv2d::new(&mut store, "encoder.conv7", 3, 2, 4, 2, 1, &mut rng(0));
        let err = c
            .forward(&store, &Tensor::zeros(&[1, 2, 8, 8]))
            .unwrap_err();
        assert!(err.to_string().contains("encoder.conv7"), "{err}");
        let d = Dense::new(&mut store, "head", 4, 2, &mut rng(0));
        assert!(d
            .forward(&store, &Tensor::zeros(&[1, 5]))
            .unwrap_err()
            .to_string()
            .contains("head"));
    }

    #[test]
    fn batched_forward_equals_per_image_forward() {
        let mut r = rng(5);
        let mut store = ParamStore::<f64>::new();
        let c = Conv2d::new(&mut store, "conv", 2, 3, 4, 2, 1, &mut r);
        let x = random(&[CHUNK + 3, 2, 8, 8], &mut r);
        let all = c.forward(&store, &x).unwrap();
        let per = all.len() / x.dim(0);
        for b in 0..x.dim(0) {
            let one = c.forward(&store, &x.rows(b..b + 1)).unwrap();
            assert_eq!(one.data(), &all.data()[b * per..(b + 1) * per]);
        }
        assert_eq!(c.forward(&store, &x).unwrap(), all);
    }

    /// Gradient check of `Σ c ⊙ layer(x)` with respect to parameters and the
    /// input. The input is registered as an extra parameter so its gradient
    /// is checked by the same machinery. The loss is linear in every
    /// coordinate so no stencil straddles a kink.
    fn check_layer<F, B>(
        n_in: &[usize],
        n_out_of: impl Fn(&Tensor<f64>) -> Vec<usize>,
        mut build: B,
        seed: u64,
    ) -> f64
    where
        B: FnMut(&mut ParamStore<f64>, &mut ChaCha8Rng) -> F,
        F: Fn(&mut ParamStore<f64>, &Tensor<f64>, &Tensor<f64>, bool) -> Tensor<f64>,
    {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let layer = build(&mut store, &mut r);
        let x_id = store.add("input", random(n_in, &mut r));
        let weights = random(&n_out_of(store.value(x_id)), &mut r);
        let report = grad_check(&mut store, 1e-6, 10, seed, |s| {
            let x = s.value(x_id).clone();
            let y = layer(s, &x, &weights, false);
            let loss = y
                .data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum();
            let dx = layer(s, &x, &weights, true);
            s.accumulate(x_id, dx.data());
            Ok(loss)
        })
        .unwrap();
        assert_eq!(report.skipped, 0, "{report:?}");
        assert!(report.unchecked_params.is_empty());
        report.max_rel_error
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for (seed, (n, ci, co, h)) in [(1, 2, 3, 6), (10, 1, 2, 4), (3, 3, 2, 8)]
            .into_iter()
            .enumerate()
        {
            let err = check_layer(
                &[n, ci, h, h],
                |x| vec![x.dim(0), co, x.dim(2) / 2, x.dim(3) / 2],
                |store, r| {
                    let c = Conv2d::new(store, "conv", ci, co, 4, 2, 1, r);
                    move |s: &mut ParamStore<f64>, x: &Tensor<f64>, g: &Tensor<f64>, back: bool| {
                        if back {
                            c.backward(s, x, g, true).unwrap().unwrap()
                        } else {
                            c.forward(s, x).unwrap()
                        }
                    }
                },
                seed as u64,
            );
            assert!(err < 1e-6, "conv case {seed}: {err}");
        }
    }

    #[test]
    fn transposed_conv_gradients_match_finite_differences() {
        for (seed, (n, ci, co, h)) in [(1, 2, 3, 3), (10, 1, 2, 2), (3, 3, 2, 4)]
            .into_iter()
            .enumerate()
        {
            let err = check_layer(
                &[n, ci, h, h],
                |x| vec![x.dim(0), co, x.dim(2) * 2, x.dim(3) * 2],
                |store, r| {
                    let c = ConvTranspose2d::new(store, "deconv", ci, co, 4, 2, 1, r);
                    move |s: &mut ParamStore<f64>, x: &Tensor<f64>, g: &Tensor<f64>, back: bool| {
                        if back {
                            c.backward(s, x, g, true).unwrap().unwrap()
                        } else {
                            c.forward(s, x).unwrap()
                        }
                    }
                },
                seed as u64,
            );
            assert!(err < 1e-6, "deconv case {seed}: {err}");
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        for (seed, (n, di, d_out)) in [(1, 5, 3), (12, 2, 7)].into_iter().enumerate() {
            let err = check_layer(
                &[n, di],
                |x| vec![x.dim(0), d_out],
                |store, r| {
                    let d = Dense::new(store, "fc", di, d_out, r);
                    move |s: &mut ParamStore<f64>, x: &Tensor<f64>, g: &Tensor<f64>, back: bool| {
                        if back {
                            d.backward(s, x, g, true).unwrap().unwrap()
                        } else {
                            d.forward(s, x).unwrap()
                        }
                    }
                },
                seed as u64,
            );
            assert!(err < 1e-6, "dense case {seed}: {err}");
        }
    }
}
