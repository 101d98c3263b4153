//! 2-D convolution as an autodiff-aware custom op.
//!
//! The forward pass and both gradients are lowered to im2col + GEMM. Every
//! network in the crate goes through [`conv2d`]; candle's built-in conv is
//! only used by the benchmarks for comparison.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};

/// Square-kernel convolution without bias. `x` is `(B, Cin, H, W)`, `w` is
/// `(Cout, Cin, K, K)`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let x = x.contiguous()?;
    let w = w.contiguous()?;
    x.apply_op2(&w, Conv2d { stride, padding })
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn new(
        x: (usize, usize, usize, usize),
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> candle_core::Result<Self> {
        let (batch, c_in, h, w) = x;
        if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            candle_core::bail!("conv2d: kernel {k} does not fit input {h}x{w} with padding {padding}");
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (w + 2 * padding - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Fills `cols` (patch_len x out_pixels, row-major) from one image.
    fn im2col<T: Copy + Default>(&self, image: &[T], cols: &mut [T]) {
        let p = self.out_pixels();
        for ci in 0..self.c_in {
            let plane = &image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.w_out..(oy + 1) * self.w_out];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::default());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::default()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into one image gradient.
    fn col2im<T: Copy + std::ops::AddAssign>(&self, cols: &[T], image: &mut [T]) {
        let p = self.out_pixels();
        for ci in 0..self.c_in {
            let plane = &mut image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

trait Gemm: WithDType + Default + std::ops::AddAssign {
    /// c = a . b + beta * c with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

impl Gemm for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
    ) {
        debug_assert!(c.len() >= m * n);
        // SAFETY: slice lengths cover the strided extents computed by the callers.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

impl Gemm for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
    ) {
        debug_assert!(c.len() >= m * n);
        // SAFETY: slice lengths cover the strided extents computed by the callers.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d expects contiguous inputs"),
    }
}

fn dims4(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

fn forward<T: Gemm>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let (ck, p) = (g.patch_len(), g.out_pixels());
    let mut cols = vec![T::default(); ck * p];
    let mut out = vec![T::default(); g.batch * g.c_out * p];
    let image_len = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        g.im2col(&x[b * image_len..(b + 1) * image_len], &mut cols);
        let dst = &mut out[b * g.c_out * p..(b + 1) * g.c_out * p];
        T::gemm(
            g.c_out,
            ck,
            p,
            w,
            ck as isize,
            1,
            &cols,
            p as isize,
            1,
            T::default(),
            dst,
        );
    }
    out
}

fn input_grad<T: Gemm>(g: &Geometry, grad: &[T], w: &[T]) -> Vec<T> {
    let (ck, p) = (g.patch_len(), g.out_pixels());
    let mut cols = vec![T::default(); ck * p];
    let image_len = g.c_in * g.h * g.w;
    let mut dx = vec![T::default(); g.batch * image_len];
    for b in 0..g.batch {
        let gb = &grad[b * g.c_out * p..(b + 1) * g.c_out * p];
        // cols = w^T (ck x c_out) . grad_b (c_out x p)
        T::gemm(
            ck,
            g.c_out,
            p,
            w,
            1,
            ck as isize,
            gb,
            p as isize,
            1,
            T::default(),
            &mut cols,
        );
        g.col2im(&cols, &mut dx[b * image_len..(b + 1) * image_len]);
    }
    dx
}

fn kernel_grad<T: Gemm>(g: &Geometry, x: &[T], grad: &[T]) -> Vec<T> {
    let (ck, p) = (g.patch_len(), g.out_pixels());
    let mut cols = vec![T::default(); ck * p];
    let mut dw = vec![T::default(); g.c_out * ck];
    let image_len = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        g.im2col(&x[b * image_len..(b + 1) * image_len], &mut cols);
        let gb = &grad[b * g.c_out * p..(b + 1) * g.c_out * p];
        // dw += grad_b (c_out x p) . cols^T (p x ck)
        let beta = if b == 0 { T::default() } else { T::from_f64(1.0) };
        T::gemm(
            g.c_out, p, ck, gb, p as isize, 1, &cols, 1, p as isize, beta, &mut dw,
        );
    }
    dw
}

struct Conv2d {
    stride: usize,
    padding: usize,
}

impl CustomOp2 for Conv2d {
    fn name(&self) -> &'static str {
        "nowcast-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (c_out, c_in_w, k, k2) = dims4(l2)?;
        let xd = dims4(l1)?;
        if k != k2 || c_in_w != xd.1 {
            candle_core::bail!("conv2d: kernel {:?} incompatible with input {:?}", l2.dims(), l1.dims());
        }
        let g = Geometry::new(xd, c_out, k, self.stride, self.padding)?;
        let shape = Shape::from((g.batch, g.c_out, g.h_out, g.w_out));
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(forward(&g, contiguous::<f32>(s1, l1)?, contiguous::<f32>(s2, l2)?))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(forward(&g, contiguous::<f64>(s1, l1)?, contiguous::<f64>(s2, l2)?))
            }
            _ => candle_core::bail!("conv2d supports matching f32 or f64 inputs"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let dx = grad.apply_op2_no_bwd(
            w,
            &InputGrad {
                stride: self.stride,
                padding: self.padding,
                h,
                w: wd,
            },
        )?;
        let (_, _, k, _) = w.dims4()?;
        let dw = x.apply_op2_no_bwd(
            &grad,
            &KernelGrad {
                stride: self.stride,
                padding: self.padding,
                k,
            },
        )?;
        Ok((Some(dx), Some(dw)))
    }
}

struct InputGrad {
    stride: usize,
    padding: usize,
    h: usize,
    w: usize,
}

impl CustomOp2 for InputGrad {
    fn name(&self) -> &'static str {
        "nowcast-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (batch, c_out, _, _) = dims4(l1)?;
        let (_, c_in, k, _) = dims4(l2)?;
        let g = Geometry::new((batch, c_in, self.h, self.w), c_out, k, self.stride, self.padding)?;
        let shape = Shape::from((batch, c_in, self.h, self.w));
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(input_grad(
                &g,
                contiguous::<f32>(s1, l1)?,
                contiguous::<f32>(s2, l2)?,
            )),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(input_grad(
                &g,
                contiguous::<f64>(s1, l1)?,
                contiguous::<f64>(s2, l2)?,
            )),
            _ => candle_core::bail!("conv2d supports matching f32 or f64 inputs"),
        };
        Ok((out, shape))
    }
}

struct KernelGrad {
    stride: usize,
    padding: usize,
    k: usize,
}

impl CustomOp2 for KernelGrad {
    fn name(&self) -> &'static str {
        "nowcast-conv2d-kernel-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let xd = dims4(l1)?;
        let (_, c_out, _, _) = dims4(l2)?;
        let g = Geometry::new(xd, c_out, self.k, self.stride, self.padding)?;
        let shape = Shape::from((c_out, g.c_in, self.k, self.k));
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(kernel_grad(
                &g,
                contiguous::<f32>(s1, l1)?,
                contiguous::<f32>(s2, l2)?,
            )),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(kernel_grad(
                &g,
                contiguous::<f64>(s1, l1)?,
                contiguous::<f64>(s2, l2)?,
            )),
            _ => candle_core::bail!("conv2d supports matching f32 or f64 inputs"),
        };
        Ok((out, shape))
    }
}
