//! 2x2 / stride-2 max pooling as a candle custom op. The backward pass
//! routes each output gradient to the first maximal element of its window.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

fn dims(layout: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    match layout.shape().dims() {
        &[n, c, h, w] if h >= 2 && w >= 2 => Ok((n, c, h, w)),
        d => bail!("max_pool2x2: expected (N, C, H>=2, W>=2), got {d:?}"),
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("max_pool2x2: input must be contiguous"),
    }
}

/// Flat input index of the first maximum of each output window.
fn argmax<T: PartialOrd + Copy>(x: &[T], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

struct MaxPool;

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "segdec-maxpool2x2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d @ (n, c, h, w) = dims(l)?;
        let out = match s {
            CpuStorage::F32(x) => {
                let x = contiguous(x, l)?;
                CpuStorage::F32(argmax(x, d).into_iter().map(|i| x[i]).collect())
            }
            CpuStorage::F64(x) => {
                let x = contiguous(x, l)?;
                CpuStorage::F64(argmax(x, d).into_iter().map(|i| x[i]).collect())
            }
            _ => bail!("max_pool2x2: only f32/f64 are supported"),
        };
        Ok((out, Shape::from((n, c, h / 2, w / 2))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &MaxPoolGrad)?))
    }
}

struct MaxPoolGrad;

impl CustomOp2 for MaxPoolGrad {
    fn name(&self) -> &'static str {
        "segdec-maxpool2x2-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d @ (n, c, h, w) = dims(l1)?;
        fn scatter<T: PartialOrd + Copy + Default + std::ops::AddAssign>(
            x: &[T],
            g: &[T],
            d: (usize, usize, usize, usize),
        ) -> Vec<T> {
            let mut dx = vec![T::default(); x.len()];
            for (i, &gv) in argmax(x, d).into_iter().zip(g) {
                dx[i] += gv;
            }
            dx
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(scatter(contiguous(x, l1)?, contiguous(g, l2)?, d)),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(scatter(contiguous(x, l1)?, contiguous(g, l2)?, d)),
            _ => bail!("max_pool2x2: only matching f32/f64 operands are supported"),
        };
        Ok((out, Shape::from((n, c, h, w))))
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn max_pool2x2(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(MaxPool)
}
