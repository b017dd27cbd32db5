//! Raw compute loops behind the taped operations.
//!
//! Everything here works on flat row-major slices. Summation order is fixed
//! so results are bit-reproducible run to run.

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product over sixteen interleaved lanes, folded pairwise at the end.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    const L: usize = 16;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; L];
    let mut ca = a.chunks_exact(L);
    let mut cb = b.chunks_exact(L);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..L {
            acc[l] += x[l] * y[l];
        }
    }
    let mut width = L;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    let mut s = acc[0];
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// Column block width for the streaming GEMM loops; keeps the touched
/// slices of `b` and `c` cache resident.
const COL_BLOCK: usize = 256;

/// `c[m,p] += a[m,k] * b[k,p]`
///
/// Four rows of `c` are updated per pass over a row of `b`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for j0 in (0..p).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(p);
        let wdt = j1 - j0;
        let mut i = 0;
        while i + 4 <= m {
            let (c0, rest) = c[i * p..].split_at_mut(p);
            let (c1, rest) = rest.split_at_mut(p);
            let (c2, c3) = rest.split_at_mut(p);
            let (c0, c1, c2, c3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
            for kk in 0..k {
                let brow = &b[kk * p + j0..kk * p + j1];
                let (a0, a1, a2, a3) = (a[i * k + kk], a[(i + 1) * k + kk], a[(i + 2) * k + kk], a[(i + 3) * k + kk]);
                for j in 0..wdt {
                    let bv = brow[j];
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
            i += 4;
        }
        for i in i..m {
            let crow = &mut c[i * p + j0..i * p + j1];
            for kk in 0..k {
                axpy(a[i * k + kk], &b[kk * p + j0..kk * p + j1], crow);
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub(crate) fn gemm_abt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            c[i * k + kk] += dot(arow, &b[kk * n..(kk + 1) * n]);
        }
    }
}

/// `c[k,p] += a[m,k]^T * b[m,p]`
///
/// Four rows of `b` are folded into each row of `c` per pass.
pub(crate) fn gemm_atb_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for j0 in (0..p).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(p);
        let wdt = j1 - j0;
        let mut i = 0;
        while i + 4 <= m {
            let b0 = &b[i * p + j0..i * p + j1];
            let b1 = &b[(i + 1) * p + j0..(i + 1) * p + j1];
            let b2 = &b[(i + 2) * p + j0..(i + 2) * p + j1];
            let b3 = &b[(i + 3) * p + j0..(i + 3) * p + j1];
            for kk in 0..k {
                let (a0, a1, a2, a3) = (a[i * k + kk], a[(i + 1) * k + kk], a[(i + 2) * k + kk], a[(i + 3) * k + kk]);
                let crow = &mut c[kk * p + j0..kk * p + j1];
                for j in 0..wdt {
                    crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
                }
            }
            i += 4;
        }
        for i in i..m {
            let brow = &b[i * p + j0..i * p + j1];
            for kk in 0..k {
                axpy(a[i * k + kk], brow, &mut c[kk * p + j0..kk * p + j1]);
            }
        }
    }
}

/// Runs a batch-major convolution over chunks of `chunk` samples so the
/// im2col buffers stay cache sized.
struct Chunked {
    batch: usize,
    chunk: usize,
    in_len: usize,
    out_len: usize,
}

impl Chunked {
    fn forward(&self, x: &[f64], mut f: impl FnMut(usize, &[f64]) -> Vec<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.batch * self.out_len);
        for b0 in (0..self.batch).step_by(self.chunk) {
            let nb = self.chunk.min(self.batch - b0);
            out.extend(f(nb, &x[b0 * self.in_len..(b0 + nb) * self.in_len]));
        }
        out
    }

    #[allow(clippy::type_complexity)]
    fn backward(
        &self,
        x: &[f64],
        g: &[f64],
        need_x: bool,
        mut f: impl FnMut(usize, &[f64], &[f64]) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>),
    ) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let mut gx = need_x.then(|| Vec::with_capacity(x.len()));
        let mut gw: Vec<f64> = Vec::new();
        let mut gb: Vec<f64> = Vec::new();
        for b0 in (0..self.batch).step_by(self.chunk) {
            let nb = self.chunk.min(self.batch - b0);
            let (cx, cw, cb) = f(
                nb,
                &x[b0 * self.in_len..(b0 + nb) * self.in_len],
                &g[b0 * self.out_len..(b0 + nb) * self.out_len],
            );
            if let (Some(gx), Some(cx)) = (gx.as_mut(), cx) {
                gx.extend(cx);
            }
            if gw.is_empty() {
                gw = cw;
                gb = cb;
            } else {
                gw.iter_mut().zip(&cw).for_each(|(a, b)| *a += b);
                gb.iter_mut().zip(&cb).for_each(|(a, b)| *a += b);
            }
        }
        (gx, gw, gb)
    }
}

/// Samples per chunk so that one chunk spans roughly this many output columns.
const CHUNK_COLS: usize = 1024;

/// Geometry of a same-padded 1-D convolution over `[batch, cin, len]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv1dGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub len: usize,
    pub k: usize,
    pub dilation: usize,
}

impl Conv1dGeom {
    fn chunked(&self) -> Chunked {
        Chunked {
            batch: self.batch,
            chunk: (CHUNK_COLS / self.len.max(1)).max(1),
            in_len: self.cin * self.len,
            out_len: self.cout * self.len,
        }
    }

    /// Output `[batch, cout, len]`.
    pub fn forward(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        self.chunked().forward(x, |nb, xc| Self { batch: nb, ..*self }.forward_block(xc, w, bias))
    }

    /// Returns `(grad_x, grad_w, grad_bias)`; `grad_x` only when asked for.
    pub fn backward(&self, x: &[f64], w: &[f64], g: &[f64], need_x: bool) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
        self.chunked()
            .backward(x, g, need_x, |nb, xc, gc| Self { batch: nb, ..*self }.backward_block(xc, w, gc, need_x))
    }

    fn cols(&self) -> usize {
        self.batch * self.len
    }

    fn tap_shift(&self, j: usize) -> isize {
        (j as isize - (self.k / 2) as isize) * self.dilation as isize
    }

    /// `cols[ci*k + j, b*len + t] = x[b, ci, t + shift(j)]` (zero outside).
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.cols();
        let mut cols = vec![0.0; self.cin * self.k * n];
        for ci in 0..self.cin {
            for j in 0..self.k {
                let row = &mut cols[(ci * self.k + j) * n..(ci * self.k + j + 1) * n];
                let shift = self.tap_shift(j);
                for b in 0..self.batch {
                    let src = &x[(b * self.cin + ci) * self.len..(b * self.cin + ci + 1) * self.len];
                    let dst = &mut row[b * self.len..(b + 1) * self.len];
                    let (lo, hi) = valid_range(self.len, shift);
                    for t in lo..hi {
                        dst[t] = src[(t as isize + shift) as usize];
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let n = self.cols();
        for ci in 0..self.cin {
            for j in 0..self.k {
                let row = &cols[(ci * self.k + j) * n..(ci * self.k + j + 1) * n];
                let shift = self.tap_shift(j);
                for b in 0..self.batch {
                    let dst = &mut gx[(b * self.cin + ci) * self.len..(b * self.cin + ci + 1) * self.len];
                    let src = &row[b * self.len..(b + 1) * self.len];
                    let (lo, hi) = valid_range(self.len, shift);
                    for t in lo..hi {
                        dst[(t as isize + shift) as usize] += src[t];
                    }
                }
            }
        }
    }

    fn forward_block(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let n = self.cols();
        let cols = self.im2col(x);
        let mut out_cm = vec![0.0; self.cout * n];
        if let Some(bias) = bias {
            for co in 0..self.cout {
                out_cm[co * n..(co + 1) * n].fill(bias[co]);
            }
        }
        gemm_acc(w, &cols, &mut out_cm, self.cout, self.cin * self.k, n);
        // [cout, batch*len] -> [batch, cout, len]
        let mut out = vec![0.0; self.batch * self.cout * self.len];
        for co in 0..self.cout {
            for b in 0..self.batch {
                out[(b * self.cout + co) * self.len..(b * self.cout + co + 1) * self.len]
                    .copy_from_slice(&out_cm[co * n + b * self.len..co * n + (b + 1) * self.len]);
            }
        }
        out
    }

    fn backward_block(&self, x: &[f64], w: &[f64], g: &[f64], need_x: bool) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let n = self.cols();
        let kk = self.cin * self.k;
        let mut g_cm = vec![0.0; self.cout * n];
        for co in 0..self.cout {
            for b in 0..self.batch {
                g_cm[co * n + b * self.len..co * n + (b + 1) * self.len]
                    .copy_from_slice(&g[(b * self.cout + co) * self.len..(b * self.cout + co + 1) * self.len]);
            }
        }
        let gb: Vec<f64> = (0..self.cout).map(|co| g_cm[co * n..(co + 1) * n].iter().sum()).collect();
        let cols = self.im2col(x);
        let mut gw = vec![0.0; self.cout * kk];
        gemm_abt_acc(&g_cm, &cols, &mut gw, self.cout, n, kk);
        let gx = need_x.then(|| {
            let mut gcols = vec![0.0; kk * n];
            gemm_atb_acc(w, &g_cm, &mut gcols, self.cout, kk, n);
            let mut gx = vec![0.0; x.len()];
            self.col2im(&gcols, &mut gx);
            gx
        });
        (gx, gw, gb)
    }
}

/// Range of `t` in `0..len` for which `t + shift` is also in `0..len`.
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// Geometry of a strided 2-D convolution with `k/2` zero padding over
/// `[batch, cin, h, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl Conv2dGeom {
    fn chunked(&self) -> Chunked {
        let (ho, wo) = self.out_hw();
        Chunked {
            batch: self.batch,
            chunk: (CHUNK_COLS / (ho * wo).max(1)).max(1),
            in_len: self.cin * self.h * self.w,
            out_len: self.cout * ho * wo,
        }
    }

    pub fn forward(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        self.chunked().forward(x, |nb, xc| Self { batch: nb, ..*self }.forward_block(xc, w, bias))
    }

    pub fn backward(&self, x: &[f64], w: &[f64], g: &[f64], need_x: bool) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
        self.chunked()
            .backward(x, g, need_x, |nb, xc, gc| Self { batch: nb, ..*self }.backward_block(xc, w, gc, need_x))
    }

    pub fn out_hw(&self) -> (usize, usize) {
        let ho = (self.h + 2 * (self.kh / 2) - self.kh) / self.stride + 1;
        let wo = (self.w + 2 * (self.kw / 2) - self.kw) / self.stride + 1;
        (ho, wo)
    }

    /// Calls `visit(col_row_slice_start, src_start, count)` for every
    /// contiguous-in-output run of in-bounds taps; source elements of a run
    /// are `stride` apart.
    fn for_each_run(&self, mut visit: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let n = self.batch * ho * wo;
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let s = self.stride;
        for ci in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ci * self.kh + i) * self.kw + j) * n;
                    // ox range with 0 <= ox*s + j - pw < w
                    let ox_lo = (pw.saturating_sub(j)).div_ceil(s);
                    let ox_hi = ((self.w + pw - j - 1) / s + 1).min(wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for b in 0..self.batch {
                        let plane = (b * self.cin + ci) * self.h * self.w;
                        for oy in 0..ho {
                            let y = oy * s + i;
                            if y < ph || y - ph >= self.h {
                                continue;
                            }
                            let col = row + (b * ho + oy) * wo + ox_lo;
                            let src = plane + (y - ph) * self.w + ox_lo * s + j - pw;
                            visit(col, src, ox_hi - ox_lo);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let s = self.stride;
        self.for_each_run(|col, src, cnt| {
            for (k, c) in cols[col..col + cnt].iter_mut().enumerate() {
                *c = x[src + k * s];
            }
        });
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let s = self.stride;
        self.for_each_run(|col, src, cnt| {
            for (k, c) in cols[col..col + cnt].iter().enumerate() {
                gx[src + k * s] += c;
            }
        });
    }

    fn to_batch_major(&self, cm: &[f64]) -> Vec<f64> {
        let (ho, wo) = self.out_hw();
        let plane = ho * wo;
        let n = self.batch * plane;
        let mut out = vec![0.0; self.batch * self.cout * plane];
        for co in 0..self.cout {
            for b in 0..self.batch {
                out[(b * self.cout + co) * plane..(b * self.cout + co + 1) * plane]
                    .copy_from_slice(&cm[co * n + b * plane..co * n + (b + 1) * plane]);
            }
        }
        out
    }

    fn forward_block(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let (ho, wo) = self.out_hw();
        let n = self.batch * ho * wo;
        let kk = self.cin * self.kh * self.kw;
        let mut cols = vec![0.0; kk * n];
        self.im2col(x, &mut cols);
        let mut out_cm = vec![0.0; self.cout * n];
        if let Some(bias) = bias {
            for co in 0..self.cout {
                out_cm[co * n..(co + 1) * n].fill(bias[co]);
            }
        }
        gemm_acc(w, &cols, &mut out_cm, self.cout, kk, n);
        self.to_batch_major(&out_cm)
    }

    fn backward_block(&self, x: &[f64], w: &[f64], g: &[f64], need_x: bool) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let (ho, wo) = self.out_hw();
        let plane = ho * wo;
        let n = self.batch * plane;
        let kk = self.cin * self.kh * self.kw;
        let mut g_cm = vec![0.0; self.cout * n];
        for co in 0..self.cout {
            for b in 0..self.batch {
                g_cm[co * n + b * plane..co * n + (b + 1) * plane]
                    .copy_from_slice(&g[(b * self.cout + co) * plane..(b * self.cout + co + 1) * plane]);
            }
        }
        let gb: Vec<f64> = (0..self.cout).map(|co| g_cm[co * n..(co + 1) * n].iter().sum()).collect();
        let mut cols = vec![0.0; kk * n];
        self.im2col(x, &mut cols);
        let mut gw = vec![0.0; self.cout * kk];
        gemm_abt_acc(&g_cm, &cols, &mut gw, self.cout, n, kk);
        let gx = need_x.then(|| {
            cols.fill(0.0);
            gemm_atb_acc(w, &g_cm, &mut cols, self.cout, kk, n);
            let mut gx = vec![0.0; x.len()];
            self.col2im(&cols, &mut gx);
            gx
        });
        (gx, gw, gb)
    }
}

/// Geometry of a stride-1, same-padded 3-D convolution over
/// `[batch, cin, t, h, w]`.
///
/// Each input plane stack is copied into a zero-padded volume; output is
/// accumulated in the padded row pitch so every tap becomes one contiguous
/// multiply-add per frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv3dGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Conv3dGeom {
    fn padded_dims(&self) -> (usize, usize, usize) {
        (self.t + self.kt - 1, self.h + self.kh - 1, self.w + self.kw - 1)
    }

    fn padded_len(&self) -> usize {
        let (tp, hp, wp) = self.padded_dims();
        // tail slack so the last row of the last tap never reads past the end
        tp * hp * wp + wp
    }

    /// Zero-padded copy of one `[t, h, w]` volume.
    fn pad(&self, src: &[f64]) -> Vec<f64> {
        let (_, hp, wp) = self.padded_dims();
        let (ot, oh, ow) = (self.kt / 2, self.kh / 2, self.kw / 2);
        let mut p = vec![0.0; self.padded_len()];
        for t in 0..self.t {
            for y in 0..self.h {
                let dst = ((t + ot) * hp + y + oh) * wp + ow;
                p[dst..dst + self.w].copy_from_slice(&src[(t * self.h + y) * self.w..(t * self.h + y + 1) * self.w]);
            }
        }
        p
    }

    fn taps(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let (kt, kh, kw) = (self.kt, self.kh, self.kw);
        (0..kt).flat_map(move |a| (0..kh).flat_map(move |b| (0..kw).map(move |c| (a, b, c, (a * kh + b) * kw + c))))
    }

    /// Copies one pitched row block `[h, wp]` back into a dense `[h, w]` slice.
    fn unpitch(&self, src: &[f64], dst: &mut [f64]) {
        let (_, _, wp) = self.padded_dims();
        for y in 0..self.h {
            dst[y * self.w..(y + 1) * self.w].copy_from_slice(&src[y * wp..y * wp + self.w]);
        }
    }

    // Both passes walk one output frame at a time so the per-channel row
    // blocks stay in L1 while every tap streams over them.
    pub fn forward(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let (_, hp, wp) = self.padded_dims();
        let vol = self.t * self.h * self.w;
        let plane = self.h * self.w;
        let ktaps = self.kt * self.kh * self.kw;
        let row_len = self.h * wp;
        let mut out = vec![0.0; self.batch * self.cout * vol];
        let mut acc = vec![0.0; self.cout * row_len];
        for b in 0..self.batch {
            let padded: Vec<Vec<f64>> = (0..self.cin)
                .map(|ci| self.pad(&x[(b * self.cin + ci) * vol..(b * self.cin + ci + 1) * vol]))
                .collect();
            for t in 0..self.t {
                for co in 0..self.cout {
                    acc[co * row_len..(co + 1) * row_len].fill(bias.map_or(0.0, |bs| bs[co]));
                }
                for (ci, p) in padded.iter().enumerate() {
                    for (dt, dy, dx, tap) in self.taps() {
                        let src = ((t + dt) * hp + dy) * wp + dx;
                        let prow = &p[src..src + row_len];
                        for co in 0..self.cout {
                            let wv = w[(co * self.cin + ci) * ktaps + tap];
                            axpy(wv, prow, &mut acc[co * row_len..(co + 1) * row_len]);
                        }
                    }
                }
                for co in 0..self.cout {
                    let d = (b * self.cout + co) * vol + t * plane;
                    self.unpitch(&acc[co * row_len..(co + 1) * row_len], &mut out[d..d + plane]);
                }
            }
        }
        out
    }

    pub fn backward(&self, x: &[f64], w: &[f64], g: &[f64], need_x: bool) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let (_, hp, wp) = self.padded_dims();
        let (ot, oh, ow) = (self.kt / 2, self.kh / 2, self.kw / 2);
        let vol = self.t * self.h * self.w;
        let plane = self.h * self.w;
        let ktaps = self.kt * self.kh * self.kw;
        let row_len = self.h * wp;
        let mut gw = vec![0.0; self.cout * self.cin * ktaps];
        let mut gb = vec![0.0; self.cout];
        let mut gx = need_x.then(|| vec![0.0; x.len()]);
        // upstream grad of one frame in pitched layout, zero in the pad columns
        let mut gpitch = vec![0.0; self.cout * row_len];
        for b in 0..self.batch {
            let padded: Vec<Vec<f64>> = (0..self.cin)
                .map(|ci| self.pad(&x[(b * self.cin + ci) * vol..(b * self.cin + ci + 1) * vol]))
                .collect();
            let mut gpad: Vec<Vec<f64>> = if need_x {
                vec![vec![0.0; self.padded_len()]; self.cin]
            } else {
                Vec::new()
            };
            for t in 0..self.t {
                for co in 0..self.cout {
                    let gsrc = &g[(b * self.cout + co) * vol + t * plane..(b * self.cout + co) * vol + (t + 1) * plane];
                    gb[co] += gsrc.iter().sum::<f64>();
                    let gp = &mut gpitch[co * row_len..(co + 1) * row_len];
                    for y in 0..self.h {
                        gp[y * wp..y * wp + self.w].copy_from_slice(&gsrc[y * self.w..(y + 1) * self.w]);
                    }
                }
                for ci in 0..self.cin {
                    let p = &padded[ci];
                    for (dt, dy, dx, tap) in self.taps() {
                        let src = ((t + dt) * hp + dy) * wp + dx;
                        let prow = &p[src..src + row_len];
                        for co in 0..self.cout {
                            let grow = &gpitch[co * row_len..(co + 1) * row_len];
                            let k = (co * self.cin + ci) * ktaps + tap;
                            gw[k] += dot(grow, prow);
                            if need_x {
                                axpy(w[k], grow, &mut gpad[ci][src..src + row_len]);
                            }
                        }
                    }
                }
            }
            if let Some(gx) = gx.as_mut() {
                for (ci, gp) in gpad.iter().enumerate() {
                    let dst = &mut gx[(b * self.cin + ci) * vol..(b * self.cin + ci + 1) * vol];
                    for t in 0..self.t {
                        for y in 0..self.h {
                            let s = ((t + ot) * hp + y + oh) * wp + ow;
                            dst[(t * self.h + y) * self.w..(t * self.h + y + 1) * self.w].copy_from_slice(&gp[s..s + self.w]);
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}
