//! 2-D convolution and transposed convolution over NCHW batches, lowered to
//! GEMM through im2col.

use rand::Rng;

use super::params::{Gradients, Init, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_len(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Spatial size produced by the transposed convolution.
    pub fn transposed_output_len(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.kernel - 2 * self.padding
    }
}

/// Output columns `lo..hi` whose input column `o*stride + k - pad` lies in `0..w`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // one past the largest o with o*stride + k - pad <= w - 1
    let hi = if w + pad > k {
        ((w + pad - k - 1) / stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one `channels×h×w` image into a `(channels·k·k) × (oh·ow)` block
/// of `cols`, whose rows are `ld` apart.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<S: Scalar>(
    img: &[S],
    channels: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    oh: usize,
    ow: usize,
    cols: &mut [S],
    ld: usize,
) {
    let k = g.kernel;
    let plane = oh * ow;
    let (s, pad) = (g.stride, g.padding);
    for c in 0..channels {
        let src = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            let (ylo, yhi) = valid_range(ki, pad, s, h, oh);
            for kj in 0..k {
                let (xlo, xhi) = valid_range(kj, pad, s, w, ow);
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld..row * ld + plane];
                dst[..ylo * ow].fill(S::zero());
                dst[yhi * ow..].fill(S::zero());
                for oy in ylo..yhi {
                    let iy = oy * s + ki - pad;
                    let line = &src[iy * w..(iy + 1) * w];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    out[..xlo].fill(S::zero());
                    out[xhi..].fill(S::zero());
                    if xhi > xlo {
                        let ix0 = xlo * s + kj - pad;
                        if s == 1 {
                            out[xlo..xhi].copy_from_slice(&line[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for (o, &v) in
                                out[xlo..xhi].iter_mut().zip(line[ix0..].iter().step_by(s))
                            {
                                *o = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: overwrites `img` with the scatter-sum of the
/// column block.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<S: Scalar>(
    cols: &[S],
    ld: usize,
    channels: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    oh: usize,
    ow: usize,
    img: &mut [S],
) {
    let k = g.kernel;
    let (s, pad) = (g.stride, g.padding);
    img.fill(S::zero());
    for c in 0..channels {
        let dst = &mut img[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            let (ylo, yhi) = valid_range(ki, pad, s, h, oh);
            for kj in 0..k {
                let (xlo, xhi) = valid_range(kj, pad, s, w, ow);
                if xhi <= xlo {
                    continue;
                }
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld..];
                for oy in ylo..yhi {
                    let iy = oy * s + ki - pad;
                    let ix0 = xlo * s + kj - pad;
                    let line = &mut dst[iy * w + ix0..(iy + 1) * w];
                    let vals = &src[oy * ow + xlo..oy * ow + xhi];
                    if s == 1 {
                        for (o, &v) in line.iter_mut().zip(vals) {
                            *o = *o + v;
                        }
                    } else {
                        for (o, &v) in line.iter_mut().step_by(s).zip(vals) {
                            *o = *o + v;
                        }
                    }
                }
            }
        }
    }
}

/// Upper bound on the elements of one batched column buffer. Items are
/// processed in groups small enough to stay under it.
const COL_BUDGET: usize = 1 << 18;

fn group_size(n: usize, per_item: usize) -> usize {
    (COL_BUDGET / per_item.max(1)).clamp(1, n.max(1))
}

/// Copies items `start..start+g` of an NCHW tensor into a `c × (g·plane)`
/// matrix, item blocks side by side.
fn gather<S: Scalar>(t: &Tensor<S>, start: usize, g: usize, c: usize, plane: usize, out: &mut [S]) {
    let ld = g * plane;
    debug_assert_eq!(t.item(start).len(), c * plane);
    for j in 0..g {
        for (ch, chunk) in t.item(start + j).chunks(plane).enumerate() {
            out[ch * ld + j * plane..ch * ld + (j + 1) * plane].copy_from_slice(chunk);
        }
    }
}

/// Inverse of [`gather`].
fn scatter<S: Scalar>(m: &[S], start: usize, g: usize, c: usize, plane: usize, t: &mut Tensor<S>) {
    let ld = g * plane;
    for j in 0..g {
        let item = t.item_mut(start + j);
        for ch in 0..c {
            item[ch * plane..(ch + 1) * plane]
                .copy_from_slice(&m[ch * ld + j * plane..ch * ld + (j + 1) * plane]);
        }
    }
}

fn bias_grad<S: Scalar>(dy: &Tensor<S>, plane: usize, db: &mut [S]) {
    for i in 0..dy.shape()[0] {
        for (o, chunk) in dy.item(i).chunks(plane).enumerate() {
            db[o] = db[o] + chunk.iter().copied().sum::<S>();
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    weight: ParamId,
    bias: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct ConvTrace<S> {
    input: Tensor<S>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        bias: bool,
        init: fn(usize) -> Init,
        rng: &mut impl Rng,
    ) -> Self {
        let k = geometry.kernel;
        let fan_in = in_channels * k * k;
        let weight = store.add(
            format!("{name}.weight"),
            &[out_channels, in_channels, k, k],
            ParamKind::Trainable,
            init(fan_in),
            rng,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                &[out_channels],
                ParamKind::Trainable,
                Init::FanInUniform { fan_in },
                rng,
            )
        });
        Self {
            in_channels,
            out_channels,
            geometry,
            weight,
            bias,
        }
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }

    fn k_dim(&self) -> usize {
        self.in_channels * self.geometry.kernel * self.geometry.kernel
    }

    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor<S>,
    ) -> (Tensor<S>, ConvTrace<S>) {
        assert_eq!(x.dims4().1, self.in_channels, "conv input channels");
        let weight = store.get(self.weight).data();
        let bias = self.bias.map(|b| store.get(b).data());
        let out = conv_forward(
            x,
            weight,
            self.k_dim(),
            self.out_channels,
            self.geometry,
            bias,
        );
        (out, ConvTrace { input: x.clone() })
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns
    /// the input gradient when `input_grad` is set.
    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        trace: &ConvTrace<S>,
        dy: &Tensor<S>,
        grads: Option<&mut Gradients<S>>,
        input_grad: bool,
    ) -> Option<Tensor<S>> {
        let co = self.out_channels;
        let k = self.geometry.kernel;
        let weight = store.get(self.weight).data();
        let dw = grads.map(|grads| {
            if let Some(b) = self.bias {
                bias_grad(dy, dy.dims4().2 * dy.dims4().3, grads.slot(b, &[co]));
            }
            grads.slot(self.weight, &[co, self.in_channels, k, k])
        });
        conv_backward(
            &trace.input,
            weight,
            self.k_dim(),
            dy,
            self.geometry,
            dw,
            input_grad,
        )
    }
}

/// Convolution of every channel of `x` with the leading `c·k·k` columns of
/// each `weight` row, rows being `w_ld` apart.
pub(crate) fn conv_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &[S],
    w_ld: usize,
    co: usize,
    g: ConvGeometry,
    bias: Option<&[S]>,
) -> Tensor<S> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (g.output_len(h), g.output_len(w));
    let (kd, plane) = (c * g.kernel * g.kernel, oh * ow);
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    let gs = group_size(n, kd * plane);
    let mut cols = vec![S::zero(); kd * gs * plane];
    let mut y = vec![S::zero(); co * gs * plane];
    for start in (0..n).step_by(gs) {
        let m = gs.min(n - start);
        let ld = m * plane;
        for j in 0..m {
            im2col(
                x.item(start + j),
                c,
                h,
                w,
                g,
                oh,
                ow,
                &mut cols[j * plane..],
                ld,
            );
        }
        if let Some(b) = bias {
            for (o, row) in y[..co * ld].chunks_mut(ld).enumerate() {
                row.fill(b[o]);
            }
        }
        let beta = if bias.is_some() { S::one() } else { S::zero() };
        S::gemm(
            co,
            kd,
            ld,
            S::one(),
            weight,
            (w_ld as isize, 1),
            &cols[..kd * ld],
            (ld as isize, 1),
            beta,
            &mut y[..co * ld],
            ld as isize,
        );
        scatter(&y[..co * ld], start, m, co, plane, &mut out);
    }
    out
}

/// Backward of [`conv_forward`]. `dw`, laid out like `weight`, accumulates
/// the weight gradient when given.
pub(crate) fn conv_backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &[S],
    w_ld: usize,
    dy: &Tensor<S>,
    g: ConvGeometry,
    mut dw: Option<&mut [S]>,
    input_grad: bool,
) -> Option<Tensor<S>> {
    let (n, c, h, w) = x.dims4();
    let (_, co, oh, ow) = dy.dims4();
    let (kd, plane) = (c * g.kernel * g.kernel, oh * ow);
    let mut dx = input_grad.then(|| Tensor::zeros(&[n, c, h, w]));
    let gs = group_size(n, kd * plane);
    let mut cols = vec![S::zero(); kd * gs * plane];
    let mut dyg = vec![S::zero(); co * gs * plane];
    for start in (0..n).step_by(gs) {
        let m = gs.min(n - start);
        let ld = m * plane;
        gather(dy, start, m, co, plane, &mut dyg);
        if let Some(dw) = dw.as_deref_mut() {
            for j in 0..m {
                im2col(
                    x.item(start + j),
                    c,
                    h,
                    w,
                    g,
                    oh,
                    ow,
                    &mut cols[j * plane..],
                    ld,
                );
            }
            // dW += dY · colsᵀ
            S::gemm(
                co,
                ld,
                kd,
                S::one(),
                &dyg[..co * ld],
                (ld as isize, 1),
                &cols[..kd * ld],
                (1, ld as isize),
                S::one(),
                dw,
                w_ld as isize,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · dY
            S::gemm(
                kd,
                co,
                ld,
                S::one(),
                weight,
                (1, w_ld as isize),
                &dyg[..co * ld],
                (ld as isize, 1),
                S::zero(),
                &mut cols[..kd * ld],
                ld as isize,
            );
            for j in 0..m {
                col2im(
                    &cols[j * plane..],
                    ld,
                    c,
                    h,
                    w,
                    g,
                    oh,
                    ow,
                    dx.item_mut(start + j),
                );
            }
        }
    }
    dx
}

/// Convolution over an image concatenated with `C` one-hot label planes.
/// The label planes are never materialized: their contribution to the
/// output depends only on the label and the output position, so it is added
/// as a per-label map.
#[derive(Clone, Debug)]
pub struct ConditionedConv2d {
    pub image_channels: usize,
    pub num_classes: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    /// `[out, image_channels + num_classes, k, k]`, the same layout as a
    /// [`Conv2d`] over the concatenated input.
    weight: ParamId,
    bias: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct ConditionedTrace<S> {
    input: Tensor<S>,
    labels: Vec<usize>,
}

impl ConditionedConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        image_channels: usize,
        num_classes: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        bias: bool,
        init: fn(usize) -> Init,
        rng: &mut impl Rng,
    ) -> Self {
        let inner = Conv2d::new(
            store,
            name,
            image_channels + num_classes,
            out_channels,
            geometry,
            bias,
            init,
            rng,
        );
        Self {
            image_channels,
            num_classes,
            out_channels,
            geometry,
            weight: inner.weight,
            bias: inner.bias,
        }
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }

    fn row_len(&self) -> usize {
        (self.image_channels + self.num_classes) * self.geometry.kernel * self.geometry.kernel
    }

    /// `[out, oh, ow]` contribution of the all-ones plane for `label`.
    fn label_map<S: Scalar>(&self, weight: &[S], label: usize, h: usize, w: usize) -> Vec<S> {
        let g = self.geometry;
        let (k, s, pad) = (g.kernel, g.stride, g.padding);
        let (oh, ow) = (g.output_len(h), g.output_len(w));
        let plane = oh * ow;
        let ch = self.image_channels + label;
        let mut m = vec![S::zero(); self.out_channels * plane];
        for (o, out) in m.chunks_mut(plane).enumerate() {
            let wrow = &weight[o * self.row_len() + ch * k * k..];
            for ki in 0..k {
                let (ylo, yhi) = valid_range(ki, pad, s, h, oh);
                for kj in 0..k {
                    let (xlo, xhi) = valid_range(kj, pad, s, w, ow);
                    let wv = wrow[ki * k + kj];
                    for oy in ylo..yhi {
                        for v in &mut out[oy * ow + xlo..oy * ow + xhi] {
                            *v = *v + wv;
                        }
                    }
                }
            }
        }
        m
    }

    /// `x` holds only the image channels; `labels` selects the hot plane of
    /// each item.
    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor<S>,
        labels: &[usize],
    ) -> (Tensor<S>, ConditionedTrace<S>) {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.image_channels, "conditioned conv image channels");
        assert_eq!(labels.len(), n, "one label per item");
        assert!(
            labels.iter().all(|&l| l < self.num_classes),
            "label out of range"
        );
        let weight = store.get(self.weight).data();
        let bias = self.bias.map(|b| store.get(b).data());
        let mut out = conv_forward(
            x,
            weight,
            self.row_len(),
            self.out_channels,
            self.geometry,
            bias,
        );
        let mut maps: Vec<Option<Vec<S>>> = vec![None; self.num_classes];
        for (i, &l) in labels.iter().enumerate() {
            let m = maps[l].get_or_insert_with(|| self.label_map(weight, l, h, w));
            for (v, &a) in out.item_mut(i).iter_mut().zip(m.iter()) {
                *v = *v + a;
            }
        }
        (
            out,
            ConditionedTrace {
                input: x.clone(),
                labels: labels.to_vec(),
            },
        )
    }

    /// The returned input gradient covers the image channels only.
    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        trace: &ConditionedTrace<S>,
        dy: &Tensor<S>,
        grads: Option<&mut Gradients<S>>,
        input_grad: bool,
    ) -> Option<Tensor<S>> {
        let weight = store.get(self.weight).data();
        let (_, co, oh, ow) = dy.dims4();
        let (h, w) = (trace.input.dims4().2, trace.input.dims4().3);
        let g = self.geometry;
        let k = g.kernel;
        let Some(grads) = grads else {
            return conv_backward(
                &trace.input,
                weight,
                self.row_len(),
                dy,
                g,
                None,
                input_grad,
            );
        };
        if let Some(b) = self.bias {
            bias_grad(dy, oh * ow, grads.slot(b, &[co]));
        }
        let total = self.image_channels + self.num_classes;
        let dw = grads.slot(self.weight, &[co, total, k, k]);
        let dx = conv_backward(
            &trace.input,
            weight,
            self.row_len(),
            dy,
            g,
            Some(&mut *dw),
            input_grad,
        );

        // Label planes: dW[o, label, ki, kj] is the sum of dy over the output
        // rectangle whose receptive field tap (ki, kj) lands inside the image.
        let plane = oh * ow;
        let mut per_label: Vec<Option<Vec<S>>> = vec![None; self.num_classes];
        for (i, &l) in trace.labels.iter().enumerate() {
            let acc = per_label[l].get_or_insert_with(|| vec![S::zero(); co * plane]);
            for (a, &d) in acc.iter_mut().zip(dy.item(i)) {
                *a = *a + d;
            }
        }
        let (s, pad) = (g.stride, g.padding);
        let sw = ow + 1;
        let mut sat = vec![S::zero(); (oh + 1) * sw];
        for (l, acc) in per_label.iter().enumerate() {
            let Some(acc) = acc else { continue };
            for o in 0..co {
                let d = &acc[o * plane..(o + 1) * plane];
                for y in 0..oh {
                    let mut row = S::zero();
                    for x in 0..ow {
                        row = row + d[y * ow + x];
                        sat[(y + 1) * sw + x + 1] = sat[y * sw + x + 1] + row;
                    }
                }
                let base = o * self.row_len() + (self.image_channels + l) * k * k;
                for ki in 0..k {
                    let (y0, y1) = valid_range(ki, pad, s, h, oh);
                    for kj in 0..k {
                        let (x0, x1) = valid_range(kj, pad, s, w, ow);
                        let rect = sat[y1 * sw + x1] - sat[y0 * sw + x1] - sat[y1 * sw + x0]
                            + sat[y0 * sw + x0];
                        dw[base + ki * k + kj] = dw[base + ki * k + kj] + rect;
                    }
                }
            }
        }
        dx
    }
}

/// Transposed convolution with weight laid out `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let k = geometry.kernel;
        let fan_in = out_channels * k * k;
        let weight = store.add(
            format!("{name}.weight"),
            &[in_channels, out_channels, k, k],
            ParamKind::Trainable,
            Init::FanInUniform { fan_in },
            rng,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                &[out_channels],
                ParamKind::Trainable,
                Init::FanInUniform { fan_in },
                rng,
            )
        });
        Self {
            in_channels,
            out_channels,
            geometry,
            weight,
            bias,
        }
    }

    fn col_rows(&self) -> usize {
        self.out_channels * self.geometry.kernel * self.geometry.kernel
    }

    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor<S>,
    ) -> (Tensor<S>, ConvTrace<S>) {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_channels, "transposed conv input channels");
        let g = self.geometry;
        let (oh, ow) = (g.transposed_output_len(h), g.transposed_output_len(w));
        let (rows, plane_in, co) = (self.col_rows(), h * w, self.out_channels);
        let weight = store.get(self.weight).data();
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        let gs = group_size(n, rows * plane_in);
        let mut xg = vec![S::zero(); c * gs * plane_in];
        let mut cols = vec![S::zero(); rows * gs * plane_in];
        for start in (0..n).step_by(gs) {
            let m = gs.min(n - start);
            let ld = m * plane_in;
            gather(x, start, m, c, plane_in, &mut xg);
            // cols = Wᵀ · x
            S::gemm(
                rows,
                c,
                ld,
                S::one(),
                weight,
                (1, rows as isize),
                &xg[..c * ld],
                (ld as isize, 1),
                S::zero(),
                &mut cols[..rows * ld],
                ld as isize,
            );
            for j in 0..m {
                col2im(
                    &cols[j * plane_in..],
                    ld,
                    co,
                    oh,
                    ow,
                    g,
                    h,
                    w,
                    out.item_mut(start + j),
                );
            }
        }
        if let Some(b) = self.bias {
            let b = store.get(b).data();
            for i in 0..n {
                for (o, chunk) in out.item_mut(i).chunks_mut(oh * ow).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = *v + b[o]);
                }
            }
        }
        (out, ConvTrace { input: x.clone() })
    }

    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        trace: &ConvTrace<S>,
        dy: &Tensor<S>,
        mut grads: Option<&mut Gradients<S>>,
        input_grad: bool,
    ) -> Option<Tensor<S>> {
        let x = &trace.input;
        let (n, c, h, w) = x.dims4();
        let (_, co, oh, ow) = dy.dims4();
        let g = self.geometry;
        let (rows, plane_in) = (self.col_rows(), h * w);
        let weight = store.get(self.weight).data();
        let mut dx = input_grad.then(|| Tensor::zeros(&[n, c, h, w]));
        if let (Some(grads), Some(b)) = (grads.as_deref_mut(), self.bias) {
            bias_grad(dy, oh * ow, grads.slot(b, &[co]));
        }
        let gs = group_size(n, rows * plane_in);
        let mut cols = vec![S::zero(); rows * gs * plane_in];
        let mut xg = vec![S::zero(); c * gs * plane_in];
        for start in (0..n).step_by(gs) {
            let m = gs.min(n - start);
            let ld = m * plane_in;
            for j in 0..m {
                im2col(
                    dy.item(start + j),
                    co,
                    oh,
                    ow,
                    g,
                    h,
                    w,
                    &mut cols[j * plane_in..],
                    ld,
                );
            }
            if let Some(grads) = grads.as_deref_mut() {
                gather(x, start, m, c, plane_in, &mut xg);
                let dw = grads.slot(self.weight, &[c, co, g.kernel, g.kernel]);
                // dW += x · colsᵀ
                S::gemm(
                    c,
                    ld,
                    rows,
                    S::one(),
                    &xg[..c * ld],
                    (ld as isize, 1),
                    &cols[..rows * ld],
                    (1, ld as isize),
                    S::one(),
                    dw,
                    rows as isize,
                );
            }
            if let Some(dx) = dx.as_mut() {
                S::gemm(
                    c,
                    rows,
                    ld,
                    S::one(),
                    weight,
                    (rows as isize, 1),
                    &cols[..rows * ld],
                    (ld as isize, 1),
                    S::zero(),
                    &mut xg[..c * ld],
                    ld as isize,
                );
                scatter(&xg[..c * ld], start, m, c, plane_in, dx);
            }
        }
        dx
    }
}
