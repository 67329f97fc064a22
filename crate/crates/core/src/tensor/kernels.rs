//! Forward and backward kernels for the spatial operators. All loops run in
//! a fixed order so results are bit-reproducible.

use super::{Float, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, weight: Shape, stride: usize, pad: usize) -> Self {
        let k = weight.height();
        let out_h = (input.height() + 2 * pad - k) / stride + 1;
        let out_w = (input.width() + 2 * pad - k) / stride + 1;
        ConvGeom {
            in_ch: input.channels(),
            out_ch: weight.batch(),
            k,
            stride,
            pad,
            in_h: input.height(),
            in_w: input.width(),
            out_h,
            out_w,
        }
    }

    fn cols_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    /// Maps output coordinate `o` and kernel tap `t` to the input index, if
    /// it falls inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// Writes the patch matrix of one image into columns `off..off + plane` of
/// `cols`, whose rows are `ld` long.
fn im2col<T: Float>(g: &ConvGeom, img: &[T], cols: &mut [T], ld: usize, off: usize) {
    let plane = g.out_h * g.out_w;
    for c in 0..g.in_ch {
        let src = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ld + off..row * ld + off + plane];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.src(oy, ky, g.in_h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let srow = &src[iy * g.in_w..(iy + 1) * g.in_w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.src(ox, kx, g.in_w) {
                                    Some(ix) => srow[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`].
fn col2im<T: Float>(g: &ConvGeom, cols: &[T], ld: usize, off: usize, img: &mut [T]) {
    let plane = g.out_h * g.out_w;
    for c in 0..g.in_ch {
        let dst = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ld + off..row * ld + off + plane];
                for oy in 0..g.out_h {
                    let Some(iy) = g.src(oy, ky, g.in_h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.src(ox, kx, g.in_w) {
                            dst[iy * g.in_w + ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `a * b + c`, as one fused operation when `FUSED`.
#[inline(always)]
fn madd<T: Float, const FUSED: bool>(a: T, b: T, c: T) -> T {
    if FUSED {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// Kernel size handled by the direct kernels.
const DIRECT_K: usize = 3;

/// Output columns per register tile of the direct kernels.
const TILE_W: usize = 8;
/// Output channels per register tile of the direct kernels.
const TILE_O: usize = 8;

/// Copies each `h x w` channel into a zero-bordered `(h + 2p) x (w + 2p)` plane.
fn pad_planes<T: Float>(src: &[T], ch: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); ch * ph * pw];
    for c in 0..ch {
        for y in 0..h {
            let d = (c * ph + y + p) * pw + p;
            out[d..d + w].copy_from_slice(&src[(c * h + y) * w..(c * h + y + 1) * w]);
        }
    }
    out
}

/// Rearranges `w[o, c, ky, kx]` into blocks of `TILE_O` output channels with
/// the block index innermost; missing channels are zero. With `flip`, the
/// roles of `o` and `c` swap and the taps are rotated by 180 degrees, which
/// turns the forward kernel into its input-gradient kernel.
fn pack_weights<T: Float>(w: &[T], out_ch: usize, in_ch: usize, k: usize, flip: bool) -> Vec<T> {
    let (n_o, n_c) = if flip {
        (in_ch, out_ch)
    } else {
        (out_ch, in_ch)
    };
    let blocks = n_o.div_ceil(TILE_O);
    let mut packed = vec![T::zero(); blocks * n_c * k * k * TILE_O];
    for o in 0..n_o {
        for c in 0..n_c {
            for ky in 0..k {
                for kx in 0..k {
                    let v = if flip {
                        w[((c * in_ch + o) * k + (k - 1 - ky)) * k + (k - 1 - kx)]
                    } else {
                        w[((o * in_ch + c) * k + ky) * k + kx]
                    };
                    let (blk, lane) = (o / TILE_O, o % TILE_O);
                    packed[(((blk * n_c + c) * k + ky) * k + kx) * TILE_O + lane] = v;
                }
            }
        }
    }
    packed
}

/// Geometry of one direct correlation: `in_ch` zero-padded planes of
/// `ph x pw` produce `out_ch` planes of `oh x ow`, with `ph = oh + k - 1`.
#[derive(Clone, Copy)]
struct DirectGeom {
    in_ch: usize,
    out_ch: usize,
    k: usize,
    pw: usize,
    ph: usize,
    oh: usize,
    ow: usize,
}

#[inline(always)]
fn direct_forward_body<T: Float, const FUSED: bool>(
    g: DirectGeom,
    pad: &[T],
    packed: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let DirectGeom {
        in_ch,
        out_ch,
        k,
        pw,
        ph,
        oh,
        ow,
    } = g;
    debug_assert_eq!(k, DIRECT_K);
    let plane = oh * ow;
    let taps = k * k;
    let row_offsets: Vec<usize> = (0..in_ch * k)
        .map(|r| ((r / k) * ph + r % k) * pw)
        .collect();
    for blk in 0..out_ch.div_ceil(TILE_O) {
        let o0 = blk * TILE_O;
        let on = TILE_O.min(out_ch - o0);
        let wb = &packed[blk * in_ch * taps * TILE_O..(blk + 1) * in_ch * taps * TILE_O];
        let mut init = [T::zero(); TILE_O];
        if let Some(b) = bias {
            init[..on].copy_from_slice(&b[o0..o0 + on]);
        }
        for y in 0..oh {
            let mut x0 = 0;
            while x0 + TILE_W <= ow {
                let mut acc = [[T::zero(); TILE_W]; TILE_O];
                for (a, &b) in acc.iter_mut().zip(&init) {
                    *a = [b; TILE_W];
                }
                // one flat loop over (channel, kernel row) keeps the tile in registers
                let base = y * pw + x0;
                for (&off, wr) in row_offsets.iter().zip(wb.chunks_exact(DIRECT_K * TILE_O)) {
                    let row: &[T; TILE_W + DIRECT_K - 1] = pad
                        [off + base..off + base + TILE_W + DIRECT_K - 1]
                        .try_into()
                        .unwrap();
                    for kx in 0..DIRECT_K {
                        for ob in 0..TILE_O {
                            let wv = wr[kx * TILE_O + ob];
                            for i in 0..TILE_W {
                                acc[ob][i] = madd::<T, FUSED>(wv, row[kx + i], acc[ob][i]);
                            }
                        }
                    }
                }
                for (ob, a) in acc.iter().take(on).enumerate() {
                    let d = (o0 + ob) * plane + y * ow + x0;
                    out[d..d + TILE_W].copy_from_slice(a);
                }
                x0 += TILE_W;
            }
            for x in x0..ow {
                let mut acc = init;
                for c in 0..in_ch {
                    for ky in 0..k {
                        for kx in 0..k {
                            let s = pad[(c * ph + y + ky) * pw + x + kx];
                            let t = ((c * k + ky) * k + kx) * TILE_O;
                            for (a, &wo) in acc.iter_mut().zip(&wb[t..t + TILE_O]) {
                                *a = madd::<T, FUSED>(wo, s, *a);
                            }
                        }
                    }
                }
                for (ob, &a) in acc.iter().take(on).enumerate() {
                    out[(o0 + ob) * plane + y * ow + x] = a;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn direct_forward_avx2<T: Float>(
    g: DirectGeom,
    pad: &[T],
    packed: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    direct_forward_body::<T, true>(g, pad, packed, bias, out)
}

#[cfg(target_arch = "x86_64")]
fn has_avx2_fma() -> bool {
    std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
}

// The accelerated variants fuse multiply-adds, so their last bits differ
// from the portable bodies; a given machine always takes the same path.
fn direct_forward<T: Float>(
    g: DirectGeom,
    pad: &[T],
    packed: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { direct_forward_avx2(g, pad, packed, bias, out) };
    }
    direct_forward_body::<T, false>(g, pad, packed, bias, out)
}

/// Output channels sharing one pass over the input in the weight gradient.
const GRAD_O: usize = 4;

/// Dot products of four gradient runs with one input run.
#[inline(always)]
fn dot4<T: Float, const FUSED: bool>(g: [&[T]; GRAD_O], s: &[T]) -> [T; GRAD_O] {
    let mut acc = [[T::zero(); TILE_W]; GRAD_O];
    let lanes = s
        .chunks_exact(TILE_W)
        .zip(g[0].chunks_exact(TILE_W))
        .zip(g[1].chunks_exact(TILE_W))
        .zip(g[2].chunks_exact(TILE_W))
        .zip(g[3].chunks_exact(TILE_W));
    for ((((sv, g0), g1), g2), g3) in lanes {
        for i in 0..TILE_W {
            acc[0][i] = madd::<T, FUSED>(g0[i], sv[i], acc[0][i]);
            acc[1][i] = madd::<T, FUSED>(g1[i], sv[i], acc[1][i]);
            acc[2][i] = madd::<T, FUSED>(g2[i], sv[i], acc[2][i]);
            acc[3][i] = madd::<T, FUSED>(g3[i], sv[i], acc[3][i]);
        }
    }
    let full = s.len() - s.len() % TILE_W;
    let mut out = [T::zero(); GRAD_O];
    for o in 0..GRAD_O {
        let mut t = T::zero();
        for i in full..s.len() {
            t = madd::<T, FUSED>(g[o][i], s[i], t);
        }
        for v in acc[o] {
            t += v;
        }
        out[o] = t;
    }
    out
}

/// `dw[o, c, ky, kx] += sum_{y, x} grad[o, y, x] * pad[c, y + ky, x + kx]`.
///
/// `wide` holds the gradient rows widened to the padded width with zeros
/// and `out_ch` rounded up to a multiple of `GRAD_O`, so every tap is a
/// dot product of contiguous runs. `pad` carries `k - 1` trailing zeros.
#[inline(always)]
fn direct_weight_grad_body<T: Float, const FUSED: bool>(
    g: DirectGeom,
    pad: &[T],
    wide: &[T],
    dw: &mut [T],
) {
    let DirectGeom {
        in_ch,
        out_ch,
        k,
        pw,
        ph,
        oh,
        ..
    } = g;
    let run = oh * pw;
    for o0 in (0..out_ch).step_by(GRAD_O) {
        let rows: [&[T]; GRAD_O] =
            std::array::from_fn(|i| &wide[(o0 + i) * run..(o0 + i + 1) * run]);
        for c in 0..in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let start = c * ph * pw + ky * pw + kx;
                    let sums = dot4::<T, FUSED>(rows, &pad[start..start + run]);
                    for (i, v) in sums.into_iter().enumerate().take(out_ch - o0) {
                        dw[(((o0 + i) * in_ch + c) * k + ky) * k + kx] += v;
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn direct_weight_grad_avx2<T: Float>(g: DirectGeom, pad: &[T], wide: &[T], dw: &mut [T]) {
    direct_weight_grad_body::<T, true>(g, pad, wide, dw)
}

fn direct_weight_grad<T: Float>(g: DirectGeom, pad: &[T], grad: &[T], dw: &mut [T]) {
    let run = g.oh * g.pw;
    let mut wide = vec![T::zero(); g.out_ch.div_ceil(GRAD_O) * GRAD_O * run];
    for (dst, src) in wide.chunks_exact_mut(g.pw).zip(grad.chunks_exact(g.ow)) {
        dst[..g.ow].copy_from_slice(src);
    }
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { direct_weight_grad_avx2(g, pad, &wide, dw) };
    }
    direct_weight_grad_body::<T, false>(g, pad, &wide, dw)
}

/// Narrower outputs go through im2col and gemm, which amortize better over
/// many channels on small planes.
const DIRECT_MIN_WIDTH: usize = 32;

impl ConvGeom {
    /// Same-size stride-1 convolutions on wide planes use the direct kernels.
    fn is_direct(&self) -> bool {
        self.stride == 1 && self.k == DIRECT_K && self.pad == 1 && self.out_w >= DIRECT_MIN_WIDTH
    }

    fn direct(&self, transposed: bool) -> DirectGeom {
        let (in_ch, out_ch) = if transposed {
            (self.out_ch, self.in_ch)
        } else {
            (self.in_ch, self.out_ch)
        };
        DirectGeom {
            in_ch,
            out_ch,
            k: self.k,
            pw: self.in_w + 2 * self.pad,
            ph: self.in_h + 2 * self.pad,
            oh: self.out_h,
            ow: self.out_w,
        }
    }
}

fn forward_direct<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
    out: &mut [T],
) {
    let in_per = g.in_ch * g.in_h * g.in_w;
    let out_per = g.out_ch * g.out_h * g.out_w;
    let dg = g.direct(false);
    let packed = pack_weights(weight.data(), g.out_ch, g.in_ch, g.k, false);
    for (b, dst) in out.chunks_exact_mut(out_per).enumerate() {
        let pad = pad_planes(
            &input.data()[b * in_per..(b + 1) * in_per],
            g.in_ch,
            g.in_h,
            g.in_w,
            g.pad,
        );
        direct_forward(dg, &pad, &packed, bias.map(|b| b.data()), dst);
    }
}

fn backward_direct<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
    g: &ConvGeom,
    mut d_in: Option<&mut [T]>,
    mut d_w: Option<&mut [T]>,
) {
    let in_per = g.in_ch * g.in_h * g.in_w;
    let out_per = g.out_ch * g.out_h * g.out_w;
    let packed = d_in
        .is_some()
        .then(|| pack_weights(weight.data(), g.out_ch, g.in_ch, g.k, true));
    for (b, go) in grad_out.chunks_exact(out_per).enumerate() {
        if let Some(dw) = d_w.as_deref_mut() {
            let mut pad = pad_planes(
                &input.data()[b * in_per..(b + 1) * in_per],
                g.in_ch,
                g.in_h,
                g.in_w,
                g.pad,
            );
            pad.resize(pad.len() + g.k - 1, T::zero());
            direct_weight_grad(g.direct(false), &pad, go, dw);
        }
        if let (Some(di), Some(packed)) = (d_in.as_deref_mut(), packed.as_ref()) {
            let gpad = pad_planes(go, g.out_ch, g.out_h, g.out_w, g.pad);
            direct_forward(
                g.direct(true),
                &gpad,
                packed,
                None,
                &mut di[b * in_per..(b + 1) * in_per],
            );
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let batch = input.shape().batch();
    let out_shape = Shape::new(batch, g.out_ch, g.out_h, g.out_w);
    let mut out = Tensor::zeros(out_shape);
    let plane = g.out_h * g.out_w;
    let in_per = g.in_ch * g.in_h * g.in_w;
    let out_per = g.out_ch * plane;
    if g.is_direct() {
        forward_direct(input, weight, bias, g, out.data_mut());
        return out;
    }
    // all batch items share one product so the weights are packed once
    let ld = batch * plane;
    let mut cols = vec![T::zero(); g.cols_rows() * ld];
    for b in 0..batch {
        im2col(
            g,
            &input.data()[b * in_per..(b + 1) * in_per],
            &mut cols,
            ld,
            b * plane,
        );
    }
    let mut prod = vec![T::zero(); g.out_ch * ld];
    T::gemm(
        g.out_ch,
        g.cols_rows(),
        ld,
        T::one(),
        weight.data(),
        false,
        &cols,
        false,
        T::zero(),
        &mut prod,
    );
    for (b, dst) in out.data_mut().chunks_exact_mut(out_per).enumerate() {
        for (o, chunk) in dst.chunks_exact_mut(plane).enumerate() {
            let src = &prod[o * ld + b * plane..o * ld + (b + 1) * plane];
            let bias = bias.map_or(T::zero(), |t| t.data()[o]);
            for (d, &v) in chunk.iter_mut().zip(src) {
                *d = v + bias;
            }
        }
    }
    out
}

/// Returns (d_input, d_weight, d_bias); each is computed only when requested.
pub(crate) fn conv2d_backward<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let batch = input.shape().batch();
    let plane = g.out_h * g.out_w;
    let in_per = g.in_ch * g.in_h * g.in_w;
    let out_per = g.out_ch * plane;
    let krows = g.cols_rows();

    let mut d_in = need[0].then(|| vec![T::zero(); input.numel()]);
    let mut d_w = need[1].then(|| vec![T::zero(); weight.numel()]);
    let d_b = need[2].then(|| {
        let mut db = vec![T::zero(); g.out_ch];
        for b in 0..batch {
            let go = &grad_out[b * out_per..(b + 1) * out_per];
            for (o, chunk) in go.chunks(plane).enumerate() {
                db[o] += chunk.iter().copied().sum::<T>();
            }
        }
        db
    });

    if g.is_direct() {
        backward_direct(
            input,
            weight,
            grad_out,
            g,
            d_in.as_deref_mut(),
            d_w.as_deref_mut(),
        );
        return (d_in, d_w, d_b);
    }
    let ld = batch * plane;
    let mut go = vec![T::zero(); g.out_ch * ld];
    for (b, src) in grad_out.chunks_exact(out_per).enumerate() {
        for (o, chunk) in src.chunks_exact(plane).enumerate() {
            go[o * ld + b * plane..o * ld + (b + 1) * plane].copy_from_slice(chunk);
        }
    }
    let mut cols = vec![T::zero(); krows * ld];
    if let Some(dw) = d_w.as_mut() {
        for b in 0..batch {
            im2col(
                g,
                &input.data()[b * in_per..(b + 1) * in_per],
                &mut cols,
                ld,
                b * plane,
            );
        }
        // dW (out x krows) = dOut (out x ld) * cols^T (ld x krows)
        T::gemm(
            g.out_ch,
            ld,
            krows,
            T::one(),
            &go,
            false,
            &cols,
            true,
            T::zero(),
            dw,
        );
    }
    if let Some(di) = d_in.as_mut() {
        // dcols (krows x ld) = W^T (krows x out) * dOut (out x ld)
        T::gemm(
            krows,
            g.out_ch,
            ld,
            T::one(),
            weight.data(),
            true,
            &go,
            false,
            T::zero(),
            &mut cols,
        );
        for b in 0..batch {
            col2im(
                g,
                &cols,
                ld,
                b * plane,
                &mut di[b * in_per..(b + 1) * in_per],
            );
        }
    }
    (d_in, d_w, d_b)
}

/// Window sums are taken separably: along rows first, then down columns.
pub(crate) fn avg_pool_forward<T: Float>(input: &Tensor<T>, k: usize, stride: usize) -> Tensor<T> {
    let [n, c, h, w] = input.shape().0;
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let inv = T::one() / T::of((k * k) as f64);
    let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
    let mut rows = vec![T::zero(); h * ow];
    for (src, dst) in input
        .data()
        .chunks_exact(h * w)
        .zip(out.data_mut().chunks_exact_mut(oh * ow))
    {
        for (srow, hrow) in src.chunks_exact(w).zip(rows.chunks_exact_mut(ow)) {
            for (x, v) in hrow.iter_mut().enumerate() {
                let win = &srow[x * stride..x * stride + k];
                let mut acc = win[0];
                for &t in &win[1..] {
                    acc += t;
                }
                *v = acc;
            }
        }
        for (y, drow) in dst.chunks_exact_mut(ow).enumerate() {
            let top = y * stride * ow;
            drow.copy_from_slice(&rows[top..top + ow]);
            for ky in 1..k {
                let r = &rows[top + ky * ow..top + (ky + 1) * ow];
                for (d, &v) in drow.iter_mut().zip(r) {
                    *d += v;
                }
            }
            for d in drow.iter_mut() {
                *d *= inv;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Float>(
    in_shape: Shape,
    grad_out: &[T],
    k: usize,
    stride: usize,
) -> Vec<T> {
    let [_, _, h, w] = in_shape.0;
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let inv = T::one() / T::of((k * k) as f64);
    let mut d = vec![T::zero(); in_shape.numel()];
    let mut rows = vec![T::zero(); h * ow];
    for (go, di) in grad_out
        .chunks_exact(oh * ow)
        .zip(d.chunks_exact_mut(h * w))
    {
        rows.fill(T::zero());
        for (y, grow) in go.chunks_exact(ow).enumerate() {
            for ky in 0..k {
                let r = &mut rows[(y * stride + ky) * ow..(y * stride + ky + 1) * ow];
                for (v, &g) in r.iter_mut().zip(grow) {
                    *v += g * inv;
                }
            }
        }
        for (hrow, drow) in rows.chunks_exact(ow).zip(di.chunks_exact_mut(w)) {
            for (x, &v) in hrow.iter().enumerate() {
                for t in &mut drow[x * stride..x * stride + k] {
                    *t += v;
                }
            }
        }
    }
    d
}

/// Source taps for one output coordinate of a x2 bilinear upsample with
/// half-pixel centres: (index0, index1, weight of index1).
#[inline]
fn bilinear_taps(o: usize, extent: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(extent - 1);
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, src - i0 as f64)
}

pub(crate) fn upsample_nearest_forward<T: Float>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input.shape().0;
    Tensor::from_fn(Shape::new(n, c, 2 * h, 2 * w), |[b, ch, y, x]| {
        input.at([b, ch, y / 2, x / 2])
    })
}

pub(crate) fn upsample_nearest_backward<T: Float>(in_shape: Shape, grad_out: &[T]) -> Vec<T> {
    let [n, c, h, w] = in_shape.0;
    let ow = 2 * w;
    let mut d = vec![T::zero(); in_shape.numel()];
    for p in 0..n * c {
        let go = &grad_out[p * 4 * h * w..(p + 1) * 4 * h * w];
        let di = &mut d[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for x in 0..ow {
                di[(y / 2) * w + x / 2] += go[y * ow + x];
            }
        }
    }
    d
}

pub(crate) fn upsample_bilinear_forward<T: Float>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input.shape().0;
    Tensor::from_fn(Shape::new(n, c, 2 * h, 2 * w), |[b, ch, y, x]| {
        let (y0, y1, ly) = bilinear_taps(y, h);
        let (x0, x1, lx) = bilinear_taps(x, w);
        let (ly, lx) = (T::of(ly), T::of(lx));
        let one = T::one();
        let top = input.at([b, ch, y0, x0]) * (one - lx) + input.at([b, ch, y0, x1]) * lx;
        let bot = input.at([b, ch, y1, x0]) * (one - lx) + input.at([b, ch, y1, x1]) * lx;
        top * (one - ly) + bot * ly
    })
}

pub(crate) fn upsample_bilinear_backward<T: Float>(in_shape: Shape, grad_out: &[T]) -> Vec<T> {
    let [n, c, h, w] = in_shape.0;
    let (oh, ow) = (2 * h, 2 * w);
    let one = T::one();
    let mut d = vec![T::zero(); in_shape.numel()];
    for p in 0..n * c {
        let go = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let di = &mut d[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, ly) = bilinear_taps(y, h);
            let ly = T::of(ly);
            for x in 0..ow {
                let (x0, x1, lx) = bilinear_taps(x, w);
                let lx = T::of(lx);
                let g = go[y * ow + x];
                di[y0 * w + x0] += g * (one - ly) * (one - lx);
                di[y0 * w + x1] += g * (one - ly) * lx;
                di[y1 * w + x0] += g * ly * (one - lx);
                di[y1 * w + x1] += g * ly * lx;
            }
        }
    }
    d
}

/// Horizontal sample position for the warp, clamped to the row. Returns
/// (x0, x1, frac, inside) where `inside` is false when clamping kicked in.
#[inline]
fn warp_taps<T: Float>(j: usize, disp: T, sign: T, width: usize) -> (usize, usize, T, bool) {
    let pos = T::of(j as f64) + sign * disp;
    let hi = T::of((width - 1) as f64);
    let clamped = pos.max(T::zero()).min(hi);
    let inside = pos >= T::zero() && pos <= hi;
    let x0 = clamped.floor().to_usize().unwrap_or(0).min(width - 1);
    let x1 = (x0 + 1).min(width - 1);
    (x0, x1, clamped - T::of(x0 as f64), inside)
}

pub(crate) fn warp_forward<T: Float>(source: &Tensor<T>, disp: &Tensor<T>, sign: T) -> Tensor<T> {
    let [n, c, h, w] = source.shape().0;
    let mut out = Tensor::zeros(source.shape());
    let src = source.data();
    let dd = disp.data();
    let od = out.data_mut();
    let one = T::one();
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let (x0, x1, a, _) = warp_taps(x, dd[(b * h + y) * w + x], sign, w);
                for ch in 0..c {
                    let row = ((b * c + ch) * h + y) * w;
                    od[row + x] = src[row + x0] * (one - a) + src[row + x1] * a;
                }
            }
        }
    }
    out
}

/// Returns (d_source, d_disparity) as requested.
pub(crate) fn warp_backward<T: Float>(
    source: &Tensor<T>,
    disp: &Tensor<T>,
    sign: T,
    grad_out: &[T],
    need: [bool; 2],
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let [n, c, h, w] = source.shape().0;
    let src = source.data();
    let dd = disp.data();
    let one = T::one();
    let mut d_src = need[0].then(|| vec![T::zero(); source.numel()]);
    let mut d_disp = need[1].then(|| vec![T::zero(); disp.numel()]);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let di = (b * h + y) * w + x;
                let (x0, x1, a, inside) = warp_taps(x, dd[di], sign, w);
                let mut acc = T::zero();
                for ch in 0..c {
                    let row = ((b * c + ch) * h + y) * w;
                    let g = grad_out[row + x];
                    if let Some(ds) = d_src.as_mut() {
                        ds[row + x0] += g * (one - a);
                        ds[row + x1] += g * a;
                    }
                    acc += g * (src[row + x1] - src[row + x0]);
                }
                if let Some(dd) = d_disp.as_mut() {
                    if inside && x1 != x0 {
                        dd[di] = acc * sign;
                    }
                }
            }
        }
    }
    (d_src, d_disp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: Shape, salt: u64) -> Tensor<f64> {
        let mut s = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        let data = (0..shape.numel())
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Straight nested-loop correlation with zero padding.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], g: &ConvGeom) -> Tensor<f64> {
        let n = x.shape().batch();
        Tensor::from_fn(
            Shape::new(n, g.out_ch, g.out_h, g.out_w),
            |[bi, o, y, xo]| {
                let mut s = b[o];
                for c in 0..g.in_ch {
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            if let (Some(iy), Some(ix)) =
                                (g.src(y, ky, g.in_h), g.src(xo, kx, g.in_w))
                            {
                                s += w.at([o, c, ky, kx]) * x.at([bi, c, iy, ix]);
                            }
                        }
                    }
                }
                s
            },
        )
    }

    /// Checks one geometry against the nested-loop oracle; gradients are
    /// those of `sum(y * r)`, which the oracle gives by linearity.
    fn check_against_oracle(
        dims: (usize, usize, usize, usize, usize),
        stride: usize,
        direct: bool,
    ) {
        let (n, ci, co, h, w) = dims;
        let xs = Shape::new(n, ci, h, w);
        let ws = Shape::new(co, ci, 3, 3);
        let x = pseudo(xs, 1);
        let wt = pseudo(ws, 2);
        let bias = pseudo(Shape::new(1, co, 1, 1), 3);
        let g = ConvGeom::new(xs, ws, stride, 1);
        let r = pseudo(Shape::new(n, co, g.out_h, g.out_w), 4);
        let (y, di, dw) = if direct {
            let mut y = Tensor::zeros(r.shape());
            forward_direct(&x, &wt, Some(&bias), &g, y.data_mut());
            let (mut di, mut dw) = (vec![0.0; xs.numel()], vec![0.0; ws.numel()]);
            backward_direct(&x, &wt, r.data(), &g, Some(&mut di), Some(&mut dw));
            (y, di, dw)
        } else {
            let y = conv2d_forward(&x, &wt, Some(&bias), &g);
            let (di, dw, _) = conv2d_backward(&x, &wt, r.data(), &g, [true, true, false]);
            (y, di.unwrap(), dw.unwrap())
        };
        let want = naive(&x, &wt, bias.data(), &g);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let zero = vec![0.0; co];
        let dot = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            naive(x, w, &zero, &g)
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        for (i, &d) in di.iter().enumerate() {
            let mut e = Tensor::zeros(xs);
            e.data_mut()[i] = 1.0;
            assert!((d - dot(&e, &wt)).abs() < 1e-12);
        }
        for (i, &d) in dw.iter().enumerate() {
            let mut e = Tensor::zeros(ws);
            e.data_mut()[i] = 1.0;
            assert!((d - dot(&x, &e)).abs() < 1e-12);
        }
        let (_, _, db) = conv2d_backward(&x, &wt, r.data(), &g, [false, false, true]);
        let plane = g.out_h * g.out_w;
        for (o, &d) in db.unwrap().iter().enumerate() {
            let s: f64 = (0..n)
                .map(|b| {
                    r.data()[(b * co + o) * plane..(b * co + o + 1) * plane]
                        .iter()
                        .sum::<f64>()
                })
                .sum();
            assert!((d - s).abs() < 1e-12);
        }
    }

    // channel counts straddle the tile sizes; widths exercise the tail paths
    const GEOMETRIES: [(usize, usize, usize, usize, usize); 5] = [
        (2, 3, 5, 5, 11),
        (1, 9, 17, 4, 16),
        (2, 2, 1, 3, 3),
        (1, 16, 8, 2, 4),
        (1, 2, 3, 3, 45),
    ];

    #[test]
    fn direct_kernels_match_nested_loops() {
        for dims in GEOMETRIES {
            check_against_oracle(dims, 1, true);
        }
    }

    #[test]
    fn dispatched_kernels_match_nested_loops() {
        for dims in GEOMETRIES {
            for stride in [1, 2] {
                check_against_oracle(dims, stride, false);
            }
        }
    }
}
