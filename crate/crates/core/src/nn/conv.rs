//! Convolution as im2col + one large GEMM.
//!
//! candle's CPU convolution backward runs through a naive transposed
//! convolution; routing both passes through matmul is several times faster
//! for the small feature maps used here.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad_h - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad_w - self.kw) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.n * ho * wo
    }
}

fn im2col<T: Copy + Default>(src: &[T], g: &Geometry) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let cols = g.cols();
    let mut out = vec![T::default(); g.rows() * cols];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane = &src[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = (n * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad_w as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(src: &[T], g: &Geometry) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let cols = g.cols();
    let mut out = vec![T::default(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &src[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane_off = (n * g.c + c) * g.h * g.w;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (n * ho + oy) * wo;
                        let dst_off = plane_off + iy as usize * g.w;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad_w as isize;
                            if ix >= 0 && ix < g.w as isize {
                                out[dst_off + ix as usize] += src_row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

struct Im2Col(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.rows(), g.cols()));
        let out = match s {
            CpuStorage::F32(d) => CpuStorage::F32(im2col(contiguous_slice(d, l)?, g)),
            CpuStorage::F64(d) => CpuStorage::F64(im2col(contiguous_slice(d, l)?, g)),
            _ => candle_core::bail!("im2col: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

struct Col2Im(Geometry);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.n, g.c, g.h, g.w));
        let out = match s {
            CpuStorage::F32(d) => CpuStorage::F32(col2im(contiguous_slice(d, l)?, g)),
            CpuStorage::F64(d) => CpuStorage::F64(col2im(contiguous_slice(d, l)?, g)),
            _ => candle_core::bail!("col2im: unsupported dtype"),
        };
        Ok((out, shape))
    }
}

/// 2-D convolution. `x`: `[N, C, H, W]`, `weight`: `[O, C, kh, kw]` → `[N, O, Ho, Wo]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: (usize, usize)) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(crate::Error::shape("conv2d", c, wc));
    }
    let g = Geometry {
        n,
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad_h: pad.0,
        pad_w: pad.1,
    };
    let (ho, wo) = g.out_hw();
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let y = weight.reshape((o, c * kh * kw))?.matmul(&cols)?;
    Ok(y.reshape((o, n, ho, wo))?.transpose(0, 1)?.contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_abs_diff, randn};
    use candle_core::{DType, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_candle_conv_forward_and_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
            let x = Var::from_tensor(&randn(&mut rng, &[2, 3, 6, 6], DType::F64).unwrap()).unwrap();
            let w = Var::from_tensor(&randn(&mut rng, &[4, 3, k, k], DType::F64).unwrap()).unwrap();
            let ours = conv2d(x.as_tensor(), w.as_tensor(), stride, (pad, pad)).unwrap();
            let theirs = x.as_tensor().conv2d(w.as_tensor(), pad, stride, 1, 1).unwrap();
            assert!(max_abs_diff(&ours, &theirs).unwrap() < 1e-12);
            let probe = randn(&mut rng, ours.dims(), DType::F64).unwrap();
            let ga = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let gb = (&theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w] {
                let d = max_abs_diff(ga.get(v.as_tensor()).unwrap(), gb.get(v.as_tensor()).unwrap()).unwrap();
                assert!(d < 1e-10, "grad mismatch {d}");
            }
        }
    }

    #[test]
    fn rectangular_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, &[1, 2, 5, 4], DType::F64).unwrap();
        let w = randn(&mut rng, &[3, 2, 3, 1], DType::F64).unwrap();
        let ours = conv2d(&x, &w, 1, (1, 0)).unwrap();
        let theirs = x.conv2d(&w.pad_with_zeros(3, 1, 1).unwrap(), 1, 1, 1, 1).unwrap();
        assert!(max_abs_diff(&ours, &theirs).unwrap() < 1e-12);
    }
}
