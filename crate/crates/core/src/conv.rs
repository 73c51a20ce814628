//! Stride-1 2D convolution as a candle custom op.
//!
//! Forward and both backward products go through im2col + GEMM on a single
//! thread, so results are bit-reproducible run to run. Column buffers are
//! tiled over output rows to bound memory for wide kernels.

use candle_core::{bail, CpuStorage, CustomOp2, Layout, Shape, Tensor};

const TILE_ELEMS: usize = 1 << 22;

trait Scalar: Copy + Default + Send + Sync + std::ops::AddAssign + 'static {
    const ZERO: Self;
    const ONE: Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn new(n: usize, c: usize, h: usize, w: usize, o: usize, k: usize, pad: usize) -> candle_core::Result<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            bail!("conv2d: kernel {k} larger than padded input {h}x{w} (pad {pad})");
        }
        Ok(Self { n, c, h, w, o, k, pad, oh: h + 2 * pad - k + 1, ow: w + 2 * pad - k + 1 })
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }

    fn rows_per_tile(&self) -> usize {
        (TILE_ELEMS / (self.ckk() * self.ow).max(1)).clamp(1, self.oh)
    }
}

/// Fill `col` (ckk x len, row-major) with the receptive fields of output rows
/// `y0..y1` of one sample.
fn im2col<T: Scalar>(x: &[T], g: &Geom, y0: usize, y1: usize, col: &mut [T]) {
    let len = (y1 - y0) * g.ow;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * len..(row + 1) * len];
                for oy in y0..y1 {
                    let out = &mut dst[(oy - y0) * g.ow..(oy - y0 + 1) * g.ow];
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out.iter_mut().enumerate() {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::ZERO } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add `col` back onto the input gradient of one sample.
fn col2im<T: Scalar>(col: &[T], g: &Geom, y0: usize, y1: usize, dx: &mut [T]) {
    let len = (y1 - y0) * g.ow;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * len..(row + 1) * len];
                for oy in y0..y1 {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let vals = &src[(oy - y0) * g.ow..(oy - y0 + 1) * g.ow];
                    for (ox, &v) in vals.iter().enumerate() {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// dst(m x n) = [dst +] lhs(m x k) * rhs(k x n), strides given as (row, col).
#[allow(clippy::too_many_arguments)]
unsafe fn matmul<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    dst: *mut T,
    dst_rs: usize,
    accumulate: bool,
    lhs: *const T,
    lhs_rs: usize,
    lhs_cs: usize,
    rhs: *const T,
    rhs_rs: usize,
    rhs_cs: usize,
) {
    gemm::gemm(
        m,
        n,
        k,
        dst,
        1,
        dst_rs as isize,
        accumulate,
        lhs,
        lhs_cs as isize,
        lhs_rs as isize,
        rhs,
        rhs_cs as isize,
        rhs_rs as isize,
        if accumulate { T::ONE } else { T::ZERO },
        T::ONE,
        false,
        false,
        false,
        gemm::Parallelism::None,
    )
}

fn forward<T: Scalar>(x: &[T], w: &[T], g: &Geom) -> Vec<T> {
    let (ckk, hw) = (g.ckk(), g.out_hw());
    let mut out = vec![T::ZERO; g.n * g.o * hw];
    let rows = g.rows_per_tile();
    let mut col = vec![T::ZERO; ckk * rows * g.ow];
    for b in 0..g.n {
        let xb = &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
        let ob = &mut out[b * g.o * hw..(b + 1) * g.o * hw];
        let mut y0 = 0;
        while y0 < g.oh {
            let y1 = (y0 + rows).min(g.oh);
            let len = (y1 - y0) * g.ow;
            im2col(xb, g, y0, y1, &mut col);
            // SAFETY: all pointers cover the addressed (m, n, k) extents.
            unsafe {
                matmul(g.o, len, ckk, ob.as_mut_ptr().add(y0 * g.ow), hw, false, w.as_ptr(), ckk, 1, col.as_ptr(), len, 1);
            }
            y0 = y1;
        }
    }
    out
}

fn input_grad<T: Scalar>(dy: &[T], w: &[T], g: &Geom) -> Vec<T> {
    let (ckk, hw) = (g.ckk(), g.out_hw());
    let mut dx = vec![T::ZERO; g.n * g.c * g.h * g.w];
    let rows = g.rows_per_tile();
    let mut col = vec![T::ZERO; ckk * rows * g.ow];
    for b in 0..g.n {
        let dyb = &dy[b * g.o * hw..(b + 1) * g.o * hw];
        let dxb = &mut dx[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
        let mut y0 = 0;
        while y0 < g.oh {
            let y1 = (y0 + rows).min(g.oh);
            let len = (y1 - y0) * g.ow;
            // SAFETY: as in `forward`; the weight is read transposed.
            unsafe {
                matmul(ckk, len, g.o, col.as_mut_ptr(), len, false, w.as_ptr(), 1, ckk, dyb.as_ptr().add(y0 * g.ow), hw, 1);
            }
            col2im(&col, g, y0, y1, dxb);
            y0 = y1;
        }
    }
    dx
}

fn kernel_grad<T: Scalar>(x: &[T], dy: &[T], g: &Geom) -> Vec<T> {
    let (ckk, hw) = (g.ckk(), g.out_hw());
    let mut dw = vec![T::ZERO; g.o * ckk];
    let rows = g.rows_per_tile();
    let mut col = vec![T::ZERO; ckk * rows * g.ow];
    for b in 0..g.n {
        let xb = &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
        let dyb = &dy[b * g.o * hw..(b + 1) * g.o * hw];
        let mut y0 = 0;
        while y0 < g.oh {
            let y1 = (y0 + rows).min(g.oh);
            let len = (y1 - y0) * g.ow;
            im2col(xb, g, y0, y1, &mut col);
            // SAFETY: as in `forward`; the column buffer is read transposed.
            unsafe {
                matmul(g.o, ckk, len, dw.as_mut_ptr(), ckk, true, dyb.as_ptr().add(y0 * g.ow), hw, 1, col.as_ptr(), 1, len);
            }
            y0 = y1;
        }
    }
    dw
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("conv2d: {what} must be contiguous"),
    }
}

fn dims4(layout: &Layout, what: &str) -> candle_core::Result<(usize, usize, usize, usize)> {
    match layout.shape().dims() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        dims => bail!("conv2d: {what} must be rank 4, got {dims:?}"),
    }
}

struct Conv2d {
    pad: usize,
}

impl CustomOp2 for Conv2d {
    fn name(&self) -> &'static str {
        "segdec-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l1, "input")?;
        let (o, c2, k, k2) = dims4(l2, "kernel")?;
        if c != c2 || k != k2 {
            bail!("conv2d: input {:?} incompatible with kernel {:?}", l1.dims(), l2.dims());
        }
        let g = Geom::new(n, c, h, w, o, k, self.pad)?;
        let storage = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(wt)) => {
                CpuStorage::F32(forward(contiguous(x, l1, "input")?, contiguous(wt, l2, "kernel")?, &g))
            }
            (CpuStorage::F64(x), CpuStorage::F64(wt)) => {
                CpuStorage::F64(forward(contiguous(x, l1, "input")?, contiguous(wt, l2, "kernel")?, &g))
            }
            _ => bail!("conv2d: only matching f32/f64 operands are supported"),
        };
        Ok((storage, Shape::from((n, o, g.oh, g.ow))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let dx = grad.apply_op2_no_bwd(w, &InputGrad { pad: self.pad, h, w: wd })?;
        let dw = x.apply_op2_no_bwd(&grad, &KernelGrad { pad: self.pad, k: w.dim(2)? })?;
        Ok((Some(dx), Some(dw)))
    }
}

struct InputGrad {
    pad: usize,
    h: usize,
    w: usize,
}

impl CustomOp2 for InputGrad {
    fn name(&self) -> &'static str {
        "segdec-conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, o, _, _) = dims4(l1, "grad")?;
        let (_, c, k, _) = dims4(l2, "kernel")?;
        let g = Geom::new(n, c, self.h, self.w, o, k, self.pad)?;
        let storage = match (s1, s2) {
            (CpuStorage::F32(dy), CpuStorage::F32(wt)) => {
                CpuStorage::F32(input_grad(contiguous(dy, l1, "grad")?, contiguous(wt, l2, "kernel")?, &g))
            }
            (CpuStorage::F64(dy), CpuStorage::F64(wt)) => {
                CpuStorage::F64(input_grad(contiguous(dy, l1, "grad")?, contiguous(wt, l2, "kernel")?, &g))
            }
            _ => bail!("conv2d: only matching f32/f64 operands are supported"),
        };
        Ok((storage, Shape::from((n, c, self.h, self.w))))
    }
}

struct KernelGrad {
    pad: usize,
    k: usize,
}

impl CustomOp2 for KernelGrad {
    fn name(&self) -> &'static str {
        "segdec-conv2d-kernel-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l1, "input")?;
        let (_, o, _, _) = dims4(l2, "grad")?;
        let g = Geom::new(n, c, h, w, o, self.k, self.pad)?;
        let storage = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(dy)) => {
                CpuStorage::F32(kernel_grad(contiguous(x, l1, "input")?, contiguous(dy, l2, "grad")?, &g))
            }
            (CpuStorage::F64(x), CpuStorage::F64(dy)) => {
                CpuStorage::F64(kernel_grad(contiguous(x, l1, "input")?, contiguous(dy, l2, "grad")?, &g))
            }
            _ => bail!("conv2d: only matching f32/f64 operands are supported"),
        };
        Ok((storage, Shape::from((o, c, self.k, self.k))))
    }
}

/// Stride-1 convolution of `x` (N, C, H, W) with `kernel` (O, C, k, k) and
/// symmetric zero padding `pad`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, pad: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&kernel.contiguous()?, Conv2d { pad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand_tensor(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    // candle's reference conv2d/conv_transpose2d path is the oracle here.
    #[test]
    fn matches_reference_forward_and_backward() {
        for (shape, o, k, pad) in [((2, 3, 9, 7), 4, 3, 1), ((1, 2, 6, 6), 3, 5, 2), ((2, 1, 4, 5), 2, 5, 2), ((1, 2, 8, 8), 2, 3, 0)] {
            let x = Var::from_tensor(&rand_tensor(shape, 1)).unwrap();
            let w = Var::from_tensor(&rand_tensor((o, shape.1, k, k), 2)).unwrap();
            let ours = conv2d(x.as_tensor(), w.as_tensor(), pad).unwrap();
            let reference = x.as_tensor().conv2d(w.as_tensor(), pad, 1, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_abs_diff(&ours, &reference) < 1e-12);

            let probe = rand_tensor(ours.dims4().unwrap(), 3);
            let g_ours = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g_ref = (&reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w] {
                let a = g_ours.get(v.as_tensor()).unwrap();
                let b = g_ref.get(v.as_tensor()).unwrap();
                assert!(max_abs_diff(a, b) < 1e-10, "grad mismatch for {shape:?} k={k}");
            }
        }
    }

    #[test]
    fn tiling_does_not_change_results() {
        // 15x15 kernel over many channels forces several row tiles.
        let x = rand_tensor((1, 160, 16, 16), 4).to_dtype(DType::F32).unwrap();
        let w = rand_tensor((2, 160, 15, 15), 5).to_dtype(DType::F32).unwrap();
        let g = Geom::new(1, 160, 16, 16, 2, 15, 7).unwrap();
        assert!(g.rows_per_tile() < 16);
        let ours = conv2d(&x, &w, 7).unwrap().to_dtype(DType::F64).unwrap();
        let reference = x.conv2d(&w, 7, 1, 1, 1).unwrap().to_dtype(DType::F64).unwrap();
        assert!(max_abs_diff(&ours, &reference) < 1e-3);
    }

    #[test]
    fn rejects_mismatched_channels() {
        let x = rand_tensor((1, 2, 4, 4), 1);
        let w = rand_tensor((1, 3, 3, 3), 1);
        assert!(conv2d(&x, &w, 1).is_err());
    }
}
