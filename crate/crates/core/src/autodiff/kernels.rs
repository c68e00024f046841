//! Forward and backward arithmetic for the tape's operators. Everything here
//! works on raw row-major slices; shape validation happens in the tape.

/// Zero padding applied by a convolution, in samples on each side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pad2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

/// `[n, c, h, w]` extents of a 4-D activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn from_shape(shape: &[usize]) -> Self {
        Self {
            n: shape[0],
            c: shape[1],
            h: shape[2],
            w: shape[3],
        }
    }

    pub fn to_shape(self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub input: Dims4,
    pub output: Dims4,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
    pub pad: Pad2d,
}

impl ConvGeom {
    fn cin_per_group(&self) -> usize {
        self.input.c / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.output.c / self.groups
    }

    /// Output columns `ow` for kernel column `kj` whose input column
    /// `ow + kj - left` falls inside the input.
    #[inline]
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.left.saturating_sub(kj);
        let hi = (self.input.w + self.pad.left)
            .saturating_sub(kj)
            .min(self.output.w);
        (lo, hi.max(lo))
    }

    #[inline]
    fn input_row(&self, oh: usize, ki: usize) -> Option<usize> {
        let ih = oh + ki;
        if ih < self.pad.top || ih - self.pad.top >= self.input.h {
            None
        } else {
            Some(ih - self.pad.top)
        }
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    if g.groups == 1 {
        conv2d_forward_gemm(g, x, w, bias, out)
    } else {
        conv2d_forward_direct(g, x, w, bias, out)
    }
}

/// Rows of the unrolled input: one per `(ic, ki, kj)` kernel tap.
fn col_rows(g: &ConvGeom) -> usize {
    g.input.c * g.kh * g.kw
}

/// Unrolls one sample into a `[cin * kh * kw, oh * ow]` matrix so an
/// ungrouped convolution becomes a single matrix product.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (ip, op) = (g.input.plane(), g.output.plane());
    let (iw, ow_n) = (g.input.w, g.output.w);
    for ic in 0..g.input.c {
        let xin = &x[ic * ip..(ic + 1) * ip];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((ic * g.kh + ki) * g.kw + kj) * op..][..op];
                let (lo, hi) = g.col_range(kj);
                for oh in 0..g.output.h {
                    let out_row = &mut row[oh * ow_n..(oh + 1) * ow_n];
                    match g.input_row(oh, ki) {
                        Some(ih) if lo < hi => {
                            out_row[..lo].fill(0.0);
                            out_row[hi..].fill(0.0);
                            let start = ih * iw + lo + kj - g.pad.left;
                            out_row[lo..hi].copy_from_slice(&xin[start..start + hi - lo]);
                        }
                        _ => out_row.fill(0.0),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto one sample.
fn col2im_add(g: &ConvGeom, cols: &[f64], gx: &mut [f64]) {
    let (ip, op) = (g.input.plane(), g.output.plane());
    let (iw, ow_n) = (g.input.w, g.output.w);
    for ic in 0..g.input.c {
        let gin = &mut gx[ic * ip..(ic + 1) * ip];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((ic * g.kh + ki) * g.kw + kj) * op..][..op];
                let (lo, hi) = g.col_range(kj);
                if lo >= hi {
                    continue;
                }
                for oh in 0..g.output.h {
                    let Some(ih) = g.input_row(oh, ki) else { continue };
                    let dst = &mut gin[ih * iw + lo + kj - g.pad.left..ih * iw + hi + kj - g.pad.left];
                    for (d, s) in dst.iter_mut().zip(&row[oh * ow_n + lo..oh * ow_n + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Strided view of a row-major or transposed matrix for [`gemm`].
#[derive(Clone, Copy)]
struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a> MatRef<'a> {
    fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            transposed: !self.transposed,
            ..self
        }
    }

    /// (row stride, column stride) of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a * b + beta * c` with `c` row-major `[a.rows, b.cols]`.
fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert!(c.len() >= a.rows * b.cols);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

thread_local! {
    /// Reused unrolled-input buffer; large convolutions would otherwise map
    /// and unmap fresh pages on every call.
    static COLS: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn with_cols<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    COLS.with(|c| {
        let mut buf = c.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

fn conv2d_forward_gemm(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let (ip, op, k) = (g.input.len() / g.input.n.max(1), g.output.c * g.output.plane(), col_rows(g));
    with_cols(k * g.output.plane(), |cols| conv2d_forward_gemm_into(g, x, w, bias, out, cols, ip, op, k))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward_gemm_into(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
    cols: &mut [f64],
    ip: usize,
    op: usize,
    k: usize,
) {
    let wm = MatRef::new(w, g.output.c, k);
    for n in 0..g.input.n {
        im2col(g, &x[n * ip..(n + 1) * ip], cols);
        let o = &mut out[n * op..(n + 1) * op];
        match bias {
            Some(b) => {
                for (oc, row) in o.chunks_mut(g.output.plane()).enumerate() {
                    row.fill(b[oc]);
                }
            }
            None => o.fill(0.0),
        }
        gemm(wm, MatRef::new(cols, k, g.output.plane()), 1.0, o);
    }
}

/// Direct loops over kernel taps; used for grouped convolutions and as the
/// reference for the matrix-product path.
pub fn conv2d_forward_direct(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let (cin_g, cout_g) = (g.cin_per_group(), g.cout_per_group());
    let (ip, op) = (g.input.plane(), g.output.plane());
    let (iw, ow_n) = (g.input.w, g.output.w);
    for n in 0..g.input.n {
        for oc in 0..g.output.c {
            let group = oc / cout_g;
            let obase = (n * g.output.c + oc) * op;
            let o = &mut out[obase..obase + op];
            o.fill(bias.map_or(0.0, |b| b[oc]));
            for icg in 0..cin_g {
                let ic = group * cin_g + icg;
                let ibase = (n * g.input.c + ic) * ip;
                let xin = &x[ibase..ibase + ip];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = w[((oc * cin_g + icg) * g.kh + ki) * g.kw + kj];
                        let (lo, hi) = g.col_range(kj);
                        if lo >= hi {
                            continue;
                        }
                        for oh in 0..g.output.h {
                            let Some(ih) = g.input_row(oh, ki) else { continue };
                            let src = &xin[ih * iw + lo + kj - g.pad.left..ih * iw + hi + kj - g.pad.left];
                            let dst = &mut o[oh * ow_n + lo..oh * ow_n + hi];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with four independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Accumulates gradients of a convolution into `gx` (if any), `gw` and `gb`.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    if g.groups == 1 {
        conv2d_backward_gemm(g, x, w, gout, gx, gw, gb)
    } else {
        conv2d_backward_direct(g, x, w, gout, gx, gw, gb)
    }
}

fn bias_grad(g: &ConvGeom, gout: &[f64], gb: &mut [f64]) {
    let op = g.output.plane();
    for n in 0..g.input.n {
        for (oc, b) in gb.iter_mut().enumerate() {
            let obase = (n * g.output.c + oc) * op;
            *b += gout[obase..obase + op].iter().sum::<f64>();
        }
    }
}

fn conv2d_backward_gemm(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    if let Some(gb) = gb {
        bias_grad(g, gout, gb);
    }
    let (ip, op, k, p) = (
        g.input.len() / g.input.n.max(1),
        g.output.c * g.output.plane(),
        col_rows(g),
        g.output.plane(),
    );
    let wm = MatRef::new(w, g.output.c, k);
    with_cols(k * p, |cols| {
        for n in 0..g.input.n {
            let go = MatRef::new(&gout[n * op..(n + 1) * op], g.output.c, p);
            if let Some(gw) = gw.as_deref_mut() {
                im2col(g, &x[n * ip..(n + 1) * ip], cols);
                gemm(go, MatRef::new(cols, k, p).t(), 1.0, gw);
            }
            if let Some(gx) = gx.as_deref_mut() {
                gemm(wm.t(), go, 0.0, cols);
                col2im_add(g, cols, &mut gx[n * ip..(n + 1) * ip]);
            }
        }
    })
}

/// Direct-loop counterpart of [`conv2d_backward`].
pub fn conv2d_backward_direct(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (cin_g, cout_g) = (g.cin_per_group(), g.cout_per_group());
    let (ip, op) = (g.input.plane(), g.output.plane());
    let (iw, ow_n) = (g.input.w, g.output.w);
    if let Some(gb) = gb {
        bias_grad(g, gout, gb);
    }
    let mut gw = gw;
    for n in 0..g.input.n {
        for oc in 0..g.output.c {
            let group = oc / cout_g;
            let obase = (n * g.output.c + oc) * op;
            let go = &gout[obase..obase + op];
            for icg in 0..cin_g {
                let ic = group * cin_g + icg;
                let ibase = (n * g.input.c + ic) * ip;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let widx = ((oc * cin_g + icg) * g.kh + ki) * g.kw + kj;
                        let wv = w[widx];
                        let (lo, hi) = g.col_range(kj);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oh in 0..g.output.h {
                            let Some(ih) = g.input_row(oh, ki) else { continue };
                            let start = ibase + ih * iw + lo + kj - g.pad.left;
                            let end = start + (hi - lo);
                            let grow = &go[oh * ow_n + lo..oh * ow_n + hi];
                            if gw.is_some() {
                                let xrow = &x[start..end];
                                acc += dot(xrow, grow);
                            }
                            if let Some(gx) = gx.as_deref_mut() {
                                let dst = &mut gx[start..end];
                                for (d, s) in dst.iter_mut().zip(grow) {
                                    *d += wv * s;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel statistics saved by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Training-mode batch norm. Returns saved values plus per-channel batch mean
/// and biased variance.
pub fn batch_norm_train(
    d: Dims4,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
) -> (BnSaved, Vec<f64>, Vec<f64>) {
    let p = d.plane();
    let m = (d.n * p) as f64;
    let mut mean = vec![0.0; d.c];
    let mut var = vec![0.0; d.c];
    for c in 0..d.c {
        let mut s = 0.0;
        for n in 0..d.n {
            let base = (n * d.c + c) * p;
            s += x[base..base + p].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for n in 0..d.n {
            let base = (n * d.c + c) * p;
            v += x[base..base + p].iter().map(|&a| (a - mu) * (a - mu)).sum::<f64>();
        }
        mean[c] = mu;
        var[c] = v / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    for n in 0..d.n {
        for c in 0..d.c {
            let base = (n * d.c + c) * p;
            for i in base..base + p {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (BnSaved { xhat, inv_std }, mean, var)
}

pub fn batch_norm_train_backward(
    d: Dims4,
    saved: &BnSaved,
    gamma: &[f64],
    gout: &[f64],
    gx: Option<&mut [f64]>,
    ggamma: Option<&mut [f64]>,
    gbeta: Option<&mut [f64]>,
) {
    let p = d.plane();
    let m = (d.n * p) as f64;
    let mut sum_g = vec![0.0; d.c];
    let mut sum_gx = vec![0.0; d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let base = (n * d.c + c) * p;
            for i in base..base + p {
                sum_g[c] += gout[i];
                sum_gx[c] += gout[i] * saved.xhat[i];
            }
        }
    }
    if let Some(gg) = ggamma {
        for c in 0..d.c {
            gg[c] += sum_gx[c];
        }
    }
    if let Some(gb) = gbeta {
        for c in 0..d.c {
            gb[c] += sum_g[c];
        }
    }
    if let Some(gx) = gx {
        for n in 0..d.n {
            for c in 0..d.c {
                let base = (n * d.c + c) * p;
                let k = gamma[c] * saved.inv_std[c] / m;
                for i in base..base + p {
                    gx[i] += k * (m * gout[i] - sum_g[c] - saved.xhat[i] * sum_gx[c]);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PoolGeom {
    pub input: Dims4,
    pub output: Dims4,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
}

pub fn avg_pool_forward(g: &PoolGeom, x: &[f64], out: &mut [f64]) {
    let scale = 1.0 / (g.kh * g.kw) as f64;
    let (ip, op) = (g.input.plane(), g.output.plane());
    for nc in 0..g.input.n * g.input.c {
        let xin = &x[nc * ip..(nc + 1) * ip];
        let o = &mut out[nc * op..(nc + 1) * op];
        for oh in 0..g.output.h {
            for ow in 0..g.output.w {
                let mut s = 0.0;
                for ki in 0..g.kh {
                    let row = (oh * g.sh + ki) * g.input.w + ow * g.sw;
                    s += xin[row..row + g.kw].iter().sum::<f64>();
                }
                o[oh * g.output.w + ow] = s * scale;
            }
        }
    }
}

pub fn avg_pool_backward(g: &PoolGeom, gout: &[f64], gx: &mut [f64]) {
    let scale = 1.0 / (g.kh * g.kw) as f64;
    let (ip, op) = (g.input.plane(), g.output.plane());
    for nc in 0..g.input.n * g.input.c {
        let gi = &mut gx[nc * ip..(nc + 1) * ip];
        let go = &gout[nc * op..(nc + 1) * op];
        for oh in 0..g.output.h {
            for ow in 0..g.output.w {
                let v = go[oh * g.output.w + ow] * scale;
                for ki in 0..g.kh {
                    let row = (oh * g.sh + ki) * g.input.w + ow * g.sw;
                    for d in &mut gi[row..row + g.kw] {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `out[n, o] = b[o] + sum_i x[n, i] * w[o, i]`.
pub fn dense_forward(n: usize, fin: usize, fout: usize, x: &[f64], w: &[f64], b: Option<&[f64]>, out: &mut [f64]) {
    for r in 0..n {
        let xr = &x[r * fin..(r + 1) * fin];
        for o in 0..fout {
            let wr = &w[o * fin..(o + 1) * fin];
            let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            out[r * fout + o] = dot + b.map_or(0.0, |b| b[o]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    n: usize,
    fin: usize,
    fout: usize,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    for r in 0..n {
        let xr = &x[r * fin..(r + 1) * fin];
        for o in 0..fout {
            let g = gout[r * fout + o];
            if let Some(gw) = gw.as_deref_mut() {
                for (d, a) in gw[o * fin..(o + 1) * fin].iter_mut().zip(xr) {
                    *d += g * a;
                }
            }
            if let Some(gx) = gx.as_deref_mut() {
                let wr = &w[o * fin..(o + 1) * fin];
                for (d, a) in gx[r * fin..(r + 1) * fin].iter_mut().zip(wr) {
                    *d += g * a;
                }
            }
        }
    }
    if let Some(gb) = gb {
        for r in 0..n {
            for o in 0..fout {
                gb[o] += gout[r * fout + o];
            }
        }
    }
}

pub fn log_softmax_rows(rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
}

pub fn log_softmax_backward(rows: usize, cols: usize, y: &[f64], gout: &[f64], gx: &mut [f64]) {
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let gr = &gout[r * cols..(r + 1) * cols];
        let s: f64 = gr.iter().sum();
        for ((d, g), yv) in gx[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(yr) {
            *d += g - yv.exp() * s;
        }
    }
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian kernel averaged over a bandwidth family, `sigma2` holding the
/// variances: `k(d2) = mean_k exp(-d2 / (2 sigma2_k))`.
#[inline]
pub fn gauss_kernel(d2: f64, sigma2: &[f64]) -> f64 {
    sigma2.iter().map(|s| (-d2 / (2.0 * s)).exp()).sum::<f64>() / sigma2.len() as f64
}

/// `dk/d(d2)`.
#[inline]
pub fn gauss_kernel_deriv(d2: f64, sigma2: &[f64]) -> f64 {
    sigma2
        .iter()
        .map(|s| -(-d2 / (2.0 * s)).exp() / (2.0 * s))
        .sum::<f64>()
        / sigma2.len() as f64
}

/// Biased (V-statistic) squared MMD between the rows of `s` and `t`.
pub fn mmd_forward(ns: usize, nt: usize, dim: usize, s: &[f64], t: &[f64], sigma2: &[f64]) -> f64 {
    let mean_block = |a: &[f64], na: usize, b: &[f64], nb: usize| {
        let mut acc = 0.0;
        for i in 0..na {
            for j in 0..nb {
                acc += gauss_kernel(sq_dist(&a[i * dim..(i + 1) * dim], &b[j * dim..(j + 1) * dim]), sigma2);
            }
        }
        acc / (na * nb) as f64
    };
    mean_block(s, ns, s, ns) + mean_block(t, nt, t, nt) - 2.0 * mean_block(s, ns, t, nt)
}

/// Gradient of [`mmd_forward`] scaled by `g`, accumulated into `gs` / `gt`.
///
/// With `k'` the derivative in the squared distance:
/// `d/ds_m = 4/ns^2 sum_j k'(s_m,s_j)(s_m - s_j) - 4/(ns nt) sum_j k'(s_m,t_j)(s_m - t_j)`
/// and symmetrically for `t`.
#[allow(clippy::too_many_arguments)]
pub fn mmd_backward(
    ns: usize,
    nt: usize,
    dim: usize,
    s: &[f64],
    t: &[f64],
    sigma2: &[f64],
    g: f64,
    gs: Option<&mut [f64]>,
    gt: Option<&mut [f64]>,
) {
    fn row(a: &[f64], i: usize, dim: usize) -> &[f64] {
        &a[i * dim..(i + 1) * dim]
    }
    let within = |a: &[f64], na: usize, other: &[f64], no: usize, ga: &mut [f64]| {
        let c_self = 4.0 * g / (na * na) as f64;
        let c_cross = -4.0 * g / (na * no) as f64;
        for m in 0..na {
            let am = row(a, m, dim);
            let gm = &mut ga[m * dim..(m + 1) * dim];
            for j in 0..na {
                let aj = row(a, j, dim);
                let k = c_self * gauss_kernel_deriv(sq_dist(am, aj), sigma2);
                for (d, (x, y)) in gm.iter_mut().zip(am.iter().zip(aj)) {
                    *d += k * (x - y);
                }
            }
            for j in 0..no {
                let oj = row(other, j, dim);
                let k = c_cross * gauss_kernel_deriv(sq_dist(am, oj), sigma2);
                for (d, (x, y)) in gm.iter_mut().zip(am.iter().zip(oj)) {
                    *d += k * (x - y);
                }
            }
        }
    };
    if let Some(gs) = gs {
        within(s, ns, t, nt, gs);
    }
    if let Some(gt) = gt {
        within(t, nt, s, ns, gt);
    }
}
