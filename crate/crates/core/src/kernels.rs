//! Hand-written CPU ops with explicit backward passes: patch extraction
//! for convolution lowering, and fused normalize-and-scale.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType};
use gemm::Parallelism;

type CResult<T> = candle_core::Result<T>;

fn contiguous<'a, T>(v: &'a [T], layout: &Layout, what: &str) -> CResult<&'a [T]> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg(format!("{what}: input must be contiguous")))?;
    Ok(&v[start..end])
}

fn dims4(layout: &Layout, what: &str) -> CResult<(usize, usize, usize, usize)> {
    match layout.dims() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        d => Err(candle_core::Error::Msg(format!("{what}: expected 4 dims, got {d:?}"))),
    }
}

macro_rules! dispatch {
    ($storage:expr, $layout:expr, $name:expr, $x:ident => $body:expr) => {
        match $storage {
            CpuStorage::F32(v) => {
                let $x = contiguous(v, $layout, $name)?;
                let (out, shape) = $body;
                Ok((CpuStorage::F32(out), shape))
            }
            CpuStorage::F64(v) => {
                let $x = contiguous(v, $layout, $name)?;
                let (out, shape) = $body;
                Ok((CpuStorage::F64(out), shape))
            }
            _ => Err(candle_core::Error::Msg(format!("{}: only f32/f64 supported", $name))),
        }
    };
}

/// Convolution window geometry.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl Window {
    pub fn out(&self) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.pad - self.k) / self.stride + 1;
        (o(self.h), o(self.w))
    }

    /// Input index for output position `o` and tap `d`, if inside the image.
    #[inline]
    fn src(&self, o: usize, d: usize, n: usize) -> Option<usize> {
        let i = (o * self.stride + d) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    }

    /// Output positions `lo..hi` whose tap-`d` source lies inside `0..n`.
    fn valid(&self, d: usize, n: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(d).div_ceil(s);
        // o·s + d − pad ≤ n − 1
        let hi = if n + self.pad > d { ((n + self.pad - d - 1) / s + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// `(B, C, H, W)` → `(B, C·k², OH·OW)`; row `c·k² + dy·k + dx`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Im2Col(pub Window);

/// Adjoint of [`Im2Col`]: scatter-adds columns back onto the image.
#[derive(Debug, Clone, Copy)]
struct Col2Im(Window);

impl Im2Col {
    fn run<T: WithDType>(&self, x: &[T], b: usize, c: usize) -> (Vec<T>, Shape) {
        let g = self.0;
        let (oh, ow) = g.out();
        let (k, plane) = (g.k, g.h * g.w);
        let mut out = vec![T::zero(); b * c * k * k * oh * ow];
        let mut rows = out.chunks_exact_mut(oh * ow);
        for img in x.chunks_exact(plane).take(b * c) {
            for dy in 0..k {
                for dx in 0..k {
                    let row = rows.next().expect("sized above");
                    let (x0, x1) = g.valid(dx, g.w, ow);
                    for oy in 0..oh {
                        let Some(iy) = g.src(oy, dy, g.h) else { continue };
                        let src = &img[iy * g.w..(iy + 1) * g.w];
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let off = x0 + dx - g.pad;
                            dst[x0..x1].copy_from_slice(&src[off..off + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                dst[ox] = src[ox * g.stride + dx - g.pad];
                            }
                        }
                    }
                }
            }
        }
        (out, Shape::from((b, c * k * k, oh * ow)))
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(layout, "im2col")?;
        if (h, w) != (self.0.h, self.0.w) {
            return Err(candle_core::Error::Msg(format!("im2col: built for {}x{}", self.0.h, self.0.w)));
        }
        dispatch!(storage, layout, "im2col", x => self.run(x, b, c))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl Col2Im {
    fn run<T: WithDType>(&self, col: &[T], b: usize, rows: usize) -> (Vec<T>, Shape) {
        let g = self.0;
        let (oh, ow) = g.out();
        let k = g.k;
        let c = rows / (k * k);
        let plane = g.h * g.w;
        let mut out = vec![T::zero(); b * c * plane];
        let mut src_rows = col.chunks_exact(oh * ow);
        for img in out.chunks_exact_mut(plane) {
            for dy in 0..k {
                for dx in 0..k {
                    let row = src_rows.next().expect("sized by caller");
                    let (x0, x1) = g.valid(dx, g.w, ow);
                    for oy in 0..oh {
                        let Some(iy) = g.src(oy, dy, g.h) else { continue };
                        let dst = &mut img[iy * g.w..(iy + 1) * g.w];
                        let src = &row[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let off = x0 + dx - g.pad;
                            for (d, v) in dst[off..off + (x1 - x0)].iter_mut().zip(&src[x0..x1]) {
                                *d += *v;
                            }
                        } else {
                            for ox in x0..x1 {
                                dst[ox * g.stride + dx - g.pad] += src[ox];
                            }
                        }
                    }
                }
            }
        }
        (out, Shape::from((b, c, g.h, g.w)))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, rows) = match layout.dims() {
            &[b, r, _] => (b, r),
            d => return Err(candle_core::Error::Msg(format!("col2im: expected 3 dims, got {d:?}"))),
        };
        dispatch!(storage, layout, "col2im", x => self.run(x, b, rows))
    }
}

/// `(B, k²·O, HP, WP)` → `(B, O, HP−k+1, WP−k+1)`:
/// `y[o, i, j] = Σ_t u[t·O + o, i + dy_t, j + dx_t]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ShiftSum {
    pub k: usize,
    pub out_ch: usize,
}

/// Adjoint of [`ShiftSum`].
#[derive(Debug, Clone, Copy)]
struct ShiftSpread {
    k: usize,
    out_ch: usize,
}

impl ShiftSum {
    fn run<T: WithDType>(&self, u: &[T], b: usize, hp: usize, wp: usize) -> (Vec<T>, Shape) {
        let (k, o) = (self.k, self.out_ch);
        let (oh, ow) = (hp + 1 - k, wp + 1 - k);
        let mut out = vec![T::zero(); b * o * oh * ow];
        for bi in 0..b {
            for t in 0..k * k {
                let (dy, dx) = (t / k, t % k);
                for oc in 0..o {
                    let src = &u[((bi * k * k + t) * o + oc) * hp * wp..][..hp * wp];
                    let dst = &mut out[(bi * o + oc) * oh * ow..][..oh * ow];
                    for y in 0..oh {
                        let s = &src[(y + dy) * wp + dx..][..ow];
                        for (d, v) in dst[y * ow..(y + 1) * ow].iter_mut().zip(s) {
                            *d += *v;
                        }
                    }
                }
            }
        }
        (out, Shape::from((b, o, oh, ow)))
    }
}

impl CustomOp1 for ShiftSum {
    fn name(&self) -> &'static str {
        "shift-sum"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, ch, hp, wp) = dims4(layout, "shift-sum")?;
        if ch != self.k * self.k * self.out_ch || hp < self.k || wp < self.k {
            return Err(candle_core::Error::Msg(format!("shift-sum: bad input {:?}", layout.dims())));
        }
        dispatch!(storage, layout, "shift-sum", x => self.run(x, b, hp, wp))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let op = ShiftSpread {
            k: self.k,
            out_ch: self.out_ch,
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl ShiftSpread {
    fn run<T: WithDType>(&self, g: &[T], b: usize, oh: usize, ow: usize) -> (Vec<T>, Shape) {
        let (k, o) = (self.k, self.out_ch);
        let (hp, wp) = (oh + k - 1, ow + k - 1);
        let mut out = vec![T::zero(); b * k * k * o * hp * wp];
        for bi in 0..b {
            for t in 0..k * k {
                let (dy, dx) = (t / k, t % k);
                for oc in 0..o {
                    let src = &g[(bi * o + oc) * oh * ow..][..oh * ow];
                    let dst = &mut out[((bi * k * k + t) * o + oc) * hp * wp..][..hp * wp];
                    for y in 0..oh {
                        dst[(y + dy) * wp + dx..][..ow].copy_from_slice(&src[y * ow..(y + 1) * ow]);
                    }
                }
            }
        }
        (out, Shape::from((b, k * k * o, hp, wp)))
    }
}

impl CustomOp1 for ShiftSpread {
    fn name(&self) -> &'static str {
        "shift-spread"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, _, oh, ow) = dims4(layout, "shift-spread")?;
        dispatch!(storage, layout, "shift-spread", x => self.run(x, b, oh, ow))
    }
}

/// `y = (x − μ) / sqrt(σ² + ε) · scale + shift`, with μ and σ² (population)
/// taken over each `(b, c)` plane when `per_sample` (instance norm) or over
/// every plane of channel `c` otherwise (batch norm). `scale` and `shift`
/// are `(B, C)` or `(C,)` to match.
#[derive(Debug, Clone, Copy)]
pub(crate) struct NormAffine {
    pub eps: f64,
    pub per_sample: bool,
}

/// Geometry of one normalization: `groups` of `planes` planes of `hw` pixels.
struct Groups {
    b: usize,
    c: usize,
    hw: usize,
    per_sample: bool,
}

impl Groups {
    fn count(&self) -> usize {
        if self.per_sample {
            self.b * self.c
        } else {
            self.c
        }
    }

    /// Plane offsets (in elements) belonging to group `g`.
    fn planes(&self, g: usize) -> impl Iterator<Item = usize> + '_ {
        let (first, n, step) = if self.per_sample { (g, 1, 1) } else { (g, self.b, self.c) };
        (0..n).map(move |i| (first + i * step) * self.hw)
    }

    fn len(&self) -> usize {
        self.hw * if self.per_sample { 1 } else { self.b }
    }

    fn stats<T: WithDType>(&self, x: &[T], g: usize, eps: f64) -> (f64, f64) {
        let n = self.len() as f64;
        let mut sum = 0.0;
        for p in self.planes(g) {
            sum += x[p..p + self.hw].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let mean = sum / n;
        let mut ss = 0.0;
        for p in self.planes(g) {
            ss += x[p..p + self.hw].iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>();
        }
        (mean, 1.0 / (ss / n + eps).sqrt())
    }
}

fn norm_forward<T: WithDType>(x: &[T], scale: &[T], shift: &[T], g: &Groups, eps: f64) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for gi in 0..g.count() {
        let (mean, inv) = g.stats(x, gi, eps);
        let (a, s) = (scale[gi].to_f64() * inv, shift[gi].to_f64());
        for p in g.planes(gi) {
            for (o, v) in out[p..p + g.hw].iter_mut().zip(&x[p..p + g.hw]) {
                *o = T::from_f64((v.to_f64() - mean) * a + s);
            }
        }
    }
    out
}

/// Returns `(dx, dscale, dshift)`.
fn norm_backward<T: WithDType>(
    x: &[T],
    scale: &[T],
    dy: &[T],
    g: &Groups,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dscale = vec![T::zero(); g.count()];
    let mut dshift = vec![T::zero(); g.count()];
    let n = g.len() as f64;
    for gi in 0..g.count() {
        let (mean, inv) = g.stats(x, gi, eps);
        let (mut sdy, mut sdyx) = (0.0, 0.0);
        for p in g.planes(gi) {
            for (v, d) in x[p..p + g.hw].iter().zip(&dy[p..p + g.hw]) {
                let d = d.to_f64();
                sdy += d;
                sdyx += d * (v.to_f64() - mean) * inv;
            }
        }
        dshift[gi] = T::from_f64(sdy);
        dscale[gi] = T::from_f64(sdyx);
        let a = scale[gi].to_f64() * inv;
        let (mdy, mdyx) = (sdy / n, sdyx / n);
        for p in g.planes(gi) {
            let rows = dx[p..p + g.hw].iter_mut().zip(&x[p..p + g.hw]).zip(&dy[p..p + g.hw]);
            for ((o, v), d) in rows {
                let xh = (v.to_f64() - mean) * inv;
                *o = T::from_f64(a * (d.to_f64() - mdy - xh * mdyx));
            }
        }
    }
    (dx, dscale, dshift)
}

impl NormAffine {
    fn groups(&self, dims: &[usize], param: &[usize]) -> CResult<Groups> {
        let &[b, c, h, w] = dims else {
            return Err(candle_core::Error::Msg(format!("norm: expected 4 dims, got {dims:?}")));
        };
        let want: &[usize] = if self.per_sample { &[b, c] } else { &[c] };
        if param != want {
            return Err(candle_core::Error::Msg(format!("norm: parameter shape {param:?}, expected {want:?}")));
        }
        Ok(Groups {
            b,
            c,
            hw: h * w,
            per_sample: self.per_sample,
        })
    }
}

impl CustomOp3 for NormAffine {
    fn name(&self) -> &'static str {
        "norm-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let g = self.groups(l1.dims(), l2.dims())?;
        if l2.dims() != l3.dims() {
            return Err(candle_core::Error::Msg("norm: scale and shift shapes differ".into()));
        }
        let shape = l1.shape().clone();
        match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(a), CpuStorage::F32(s)) => {
                let (x, a, s) = (contiguous(x, l1, "norm")?, contiguous(a, l2, "norm")?, contiguous(s, l3, "norm")?);
                Ok((CpuStorage::F32(norm_forward(x, a, s, &g, self.eps)), shape))
            }
            (CpuStorage::F64(x), CpuStorage::F64(a), CpuStorage::F64(s)) => {
                let (x, a, s) = (contiguous(x, l1, "norm")?, contiguous(a, l2, "norm")?, contiguous(s, l3, "norm")?);
                Ok((CpuStorage::F64(norm_forward(x, a, s, &g, self.eps)), shape))
            }
            _ => Err(candle_core::Error::Msg("norm: inputs must all be f32 or all f64".into())),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        _shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = self.groups(x.dims(), scale.dims())?;
        let dev = x.device();
        macro_rules! run {
            ($t:ty) => {{
                let xv = x.flatten_all()?.to_vec1::<$t>()?;
                let av = scale.flatten_all()?.to_vec1::<$t>()?;
                let dv = grad.flatten_all()?.to_vec1::<$t>()?;
                let (dx, da, ds) = norm_backward(&xv, &av, &dv, &g, self.eps);
                (
                    Tensor::from_vec(dx, x.shape(), dev)?,
                    Tensor::from_vec(da, scale.shape(), dev)?,
                    Tensor::from_vec(ds, scale.shape(), dev)?,
                )
            }};
        }
        let (dx, da, ds) = match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            dt => return Err(candle_core::Error::Msg(format!("norm: unsupported dtype {dt:?}"))),
        };
        Ok((Some(dx), Some(da), Some(ds)))
    }
}

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy)]
struct Strides {
    rs: isize,
    cs: isize,
}

impl Strides {
    fn row_major(cols: usize) -> Self {
        Self { rs: cols as isize, cs: 1 }
    }

    fn transposed(cols_of_stored: usize) -> Self {
        Self {
            rs: 1,
            cs: cols_of_stored as isize,
        }
    }
}

fn parallelism() -> Parallelism {
    match candle_core::utils::get_num_threads() {
        0 | 1 => Parallelism::None,
        n => Parallelism::Rayon(n),
    }
}

/// `dst (m×n) = [dst +] lhs (m×k) · rhs (k×n)` over slices, with bounds
/// checked against the strides.
fn matmul<T: WithDType>(
    dims: (usize, usize, usize),
    dst: &mut [T],
    lhs: &[T],
    ls: Strides,
    rhs: &[T],
    rs: Strides,
    accumulate: bool,
) {
    matmul_strided(dims, dst, Strides::row_major(dims.1), lhs, ls, rhs, rs, accumulate)
}

/// [`matmul`] with an explicit destination row stride (column stride 1).
#[allow(clippy::too_many_arguments)]
fn matmul_strided<T: WithDType>(
    (m, n, k): (usize, usize, usize),
    dst: &mut [T],
    ds: Strides,
    lhs: &[T],
    ls: Strides,
    rhs: &[T],
    rs: Strides,
    accumulate: bool,
) {
    let span = |s: Strides, r: usize, c: usize| {
        if r == 0 || c == 0 {
            0
        } else {
            (s.rs as usize) * (r - 1) + (s.cs as usize) * (c - 1) + 1
        }
    };
    assert!(ds.cs == 1 && ds.rs as usize >= n);
    assert!(dst.len() >= span(ds, m, n) && lhs.len() >= span(ls, m, k) && rhs.len() >= span(rs, k, n));
    // SAFETY: every operand's extent was checked above; dst rows do not
    // overlap (row stride ≥ n) and dst does not alias the inputs.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            ds.rs,
            accumulate,
            lhs.as_ptr(),
            ls.cs,
            ls.rs,
            rhs.as_ptr(),
            rs.cs,
            rs.rs,
            T::from_f64(1.0),
            T::from_f64(1.0),
            false,
            false,
            false,
            parallelism(),
        )
    }
}

/// Cross-correlation of `(B, C, H, W)` with `(O, C, k, k)` weights, with
/// columns recomputed per image so only the inputs are kept for backward.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dOp {
    pub stride: usize,
    pub pad: usize,
}

struct ConvDims {
    b: usize,
    c: usize,
    o: usize,
    window: Window,
}

impl ConvDims {
    fn rows(&self) -> usize {
        self.c * self.window.k * self.window.k
    }

    fn pixels(&self) -> usize {
        let (oh, ow) = self.window.out();
        oh * ow
    }

    fn plane(&self) -> usize {
        self.window.h * self.window.w
    }

    fn identity_cols(&self) -> bool {
        self.window.k == 1 && self.window.stride == 1 && self.window.pad == 0
    }

    fn implicit(&self) -> bool {
        self.window.stride == 1 && self.window.k > 1
    }
}

/// Stride-1 layout: each channel is zero-padded to `hp × wp` and followed by
/// `k` spare elements, so tap `(dy, dx)` of every output row reads the
/// contiguous run starting at `dy·wp + dx`. Outputs are computed on a
/// `oh × wp` grid whose last `wp − ow` columns are discarded.
struct Padded {
    k: usize,
    pad: usize,
    h: usize,
    w: usize,
    wp: usize,
    oh: usize,
    ow: usize,
    /// Distance between channels in the padded buffer.
    cs: usize,
}

impl Padded {
    fn new(win: &Window) -> Self {
        let (hp, wp) = (win.h + 2 * win.pad, win.w + 2 * win.pad);
        let (oh, ow) = win.out();
        Self {
            k: win.k,
            pad: win.pad,
            h: win.h,
            w: win.w,
            wp,
            oh,
            ow,
            cs: hp * wp + win.k,
        }
    }

    /// Length of one output row block on the wide grid.
    fn n(&self) -> usize {
        self.oh * self.wp
    }

    fn tap(&self, t: usize) -> usize {
        (t / self.k) * self.wp + t % self.k
    }

    fn pad_image<T: WithDType>(&self, img: &[T], c: usize) -> Vec<T> {
        let mut xp = vec![T::zero(); c * self.cs];
        for ch in 0..c {
            for r in 0..self.h {
                let src = &img[(ch * self.h + r) * self.w..][..self.w];
                let at = ch * self.cs + (r + self.pad) * self.wp + self.pad;
                xp[at..at + self.w].copy_from_slice(src);
            }
        }
        xp
    }

    fn unpad_image<T: WithDType>(&self, xp: &[T], out: &mut [T], c: usize) {
        for ch in 0..c {
            for r in 0..self.h {
                let at = ch * self.cs + (r + self.pad) * self.wp + self.pad;
                out[(ch * self.h + r) * self.w..][..self.w].copy_from_slice(&xp[at..at + self.w]);
            }
        }
    }

    /// `(o, oh·ow)` → `(o, oh·wp)` with zeros in the spare columns.
    fn widen<T: WithDType>(&self, y: &[T], o: usize) -> Vec<T> {
        let mut yw = vec![T::zero(); o * self.n()];
        for ch in 0..o {
            for r in 0..self.oh {
                yw[ch * self.n() + r * self.wp..][..self.ow].copy_from_slice(&y[(ch * self.oh + r) * self.ow..][..self.ow]);
            }
        }
        yw
    }

    fn narrow<T: WithDType>(&self, yw: &[T], out: &mut [T], o: usize) {
        for ch in 0..o {
            for r in 0..self.oh {
                out[(ch * self.oh + r) * self.ow..][..self.ow].copy_from_slice(&yw[ch * self.n() + r * self.wp..][..self.ow]);
            }
        }
    }
}

impl Conv2dOp {
    fn dims(&self, x: &[usize], w: &[usize]) -> CResult<ConvDims> {
        let (&[b, c, h, wd], &[o, ci, k, k2]) = (x, w) else {
            return Err(candle_core::Error::Msg(format!("conv: bad shapes {x:?} and {w:?}")));
        };
        if ci != c || k != k2 || h + 2 * self.pad < k || wd + 2 * self.pad < k {
            return Err(candle_core::Error::Msg(format!("conv: input {x:?} incompatible with weight {w:?}")));
        }
        Ok(ConvDims {
            b,
            c,
            o,
            window: Window {
                k,
                stride: self.stride,
                pad: self.pad,
                h,
                w: wd,
            },
        })
    }

    fn forward_implicit<T: WithDType>(&self, x: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
        let g = Padded::new(&d.window);
        let (kk, n) = (g.k * g.k, g.n());
        let mut out = vec![T::zero(); d.b * d.o * d.pixels()];
        let mut yw = vec![T::zero(); d.o * n];
        for (img, y) in x.chunks_exact(d.c * d.plane()).zip(out.chunks_exact_mut(d.o * d.pixels())) {
            let xp = g.pad_image(img, d.c);
            for t in 0..kk {
                let lhs = Strides { rs: (d.c * kk) as isize, cs: kk as isize };
                let rhs = Strides { rs: g.cs as isize, cs: 1 };
                matmul((d.o, n, d.c), &mut yw, &w[t..], lhs, &xp[g.tap(t)..], rhs, t > 0);
            }
            g.narrow(&yw, y, d.o);
        }
        out
    }

    fn backward_implicit<T: WithDType>(&self, x: &[T], w: &[T], dy: &[T], d: &ConvDims) -> (Vec<T>, Vec<T>) {
        let g = Padded::new(&d.window);
        let (kk, n) = (g.k * g.k, g.n());
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); w.len()];
        let mut dwt = vec![T::zero(); d.o * d.c];
        let per_in = d.c * d.plane();
        let per_out = d.o * d.pixels();
        for ((img, gy), dimg) in x.chunks_exact(per_in).zip(dy.chunks_exact(per_out)).zip(dx.chunks_exact_mut(per_in)) {
            let xp = g.pad_image(img, d.c);
            let dyw = g.widen(gy, d.o);
            let mut dxp = vec![T::zero(); d.c * g.cs];
            for t in 0..kk {
                let off = g.tap(t);
                // dW_t = dY · X_tᵀ; spare columns of dY are zero.
                let xt = Strides { rs: 1, cs: g.cs as isize };
                matmul((d.o, d.c, n), &mut dwt, &dyw, Strides::row_major(n), &xp[off..], xt, false);
                for (i, v) in dwt.iter().enumerate() {
                    dw[i * kk + t] += *v;
                }
                // dX_t += W_tᵀ · dY
                let wt = Strides { rs: kk as isize, cs: (d.c * kk) as isize };
                let ds = Strides { rs: g.cs as isize, cs: 1 };
                matmul_strided((d.c, n, d.o), &mut dxp[off..], ds, &w[t..], wt, &dyw, Strides::row_major(n), true);
            }
            g.unpad_image(&dxp, dimg, d.c);
        }
        (dx, dw)
    }

    fn forward<T: WithDType>(&self, x: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
        if d.implicit() {
            return self.forward_implicit(x, w, d);
        }
        let (rows, p) = (d.rows(), d.pixels());
        let mut out = vec![T::zero(); d.b * d.o * p];
        for (img, y) in x.chunks_exact(d.c * d.plane()).zip(out.chunks_exact_mut(d.o * p)) {
            let col;
            let cols: &[T] = if d.identity_cols() {
                img
            } else {
                col = Im2Col(d.window).run(img, 1, d.c).0;
                &col
            };
            matmul((d.o, p, rows), y, w, Strides::row_major(rows), cols, Strides::row_major(p), false);
        }
        out
    }

    /// Returns `(dx, dw)`.
    fn backward<T: WithDType>(&self, x: &[T], w: &[T], dy: &[T], d: &ConvDims) -> (Vec<T>, Vec<T>) {
        if d.implicit() {
            return self.backward_implicit(x, w, dy, d);
        }
        let (rows, p) = (d.rows(), d.pixels());
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); w.len()];
        let mut dcol = vec![T::zero(); rows * p];
        let per_in = d.c * d.plane();
        for ((img, g), dimg) in x.chunks_exact(per_in).zip(dy.chunks_exact(d.o * p)).zip(dx.chunks_exact_mut(per_in)) {
            let col;
            let cols: &[T] = if d.identity_cols() {
                img
            } else {
                col = Im2Col(d.window).run(img, 1, d.c).0;
                &col
            };
            // dW += dY · colsᵀ
            matmul((d.o, rows, p), &mut dw, g, Strides::row_major(p), cols, Strides::transposed(p), true);
            // dcols = Wᵀ · dY
            let target: &mut [T] = if d.identity_cols() { dimg } else { &mut dcol };
            matmul((rows, p, d.o), target, w, Strides::transposed(rows), g, Strides::row_major(p), false);
            if !d.identity_cols() {
                let (back, _) = Col2Im(d.window).run(&dcol, 1, rows);
                dimg.copy_from_slice(&back);
            }
        }
        (dx, dw)
    }
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let d = self.dims(l1.dims(), l2.dims())?;
        let (oh, ow) = d.window.out();
        let shape = Shape::from((d.b, d.o, oh, ow));
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                let (x, w) = (contiguous(x, l1, "conv")?, contiguous(w, l2, "conv")?);
                Ok((CpuStorage::F32(self.forward(x, w, &d)), shape))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                let (x, w) = (contiguous(x, l1, "conv")?, contiguous(w, l2, "conv")?);
                Ok((CpuStorage::F64(self.forward(x, w, &d)), shape))
            }
            _ => Err(candle_core::Error::Msg("conv: inputs must both be f32 or f64".into())),
        }
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let d = self.dims(x.dims(), w.dims())?;
        let dev = x.device();
        macro_rules! run {
            ($t:ty) => {{
                let xv = x.flatten_all()?.to_vec1::<$t>()?;
                let wv = w.flatten_all()?.to_vec1::<$t>()?;
                let gv = grad.flatten_all()?.to_vec1::<$t>()?;
                let (dx, dw) = self.backward(&xv, &wv, &gv, &d);
                (Tensor::from_vec(dx, x.shape(), dev)?, Tensor::from_vec(dw, w.shape(), dev)?)
            }};
        }
        let (dx, dw) = match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            dt => return Err(candle_core::Error::Msg(format!("conv: unsupported dtype {dt:?}"))),
        };
        Ok((Some(dx), Some(dw)))
    }
}
