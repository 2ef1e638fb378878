//! 2D convolution kernels (im2col + GEMM) with exact backward passes.
//!
//! Weights are laid out `(C_out, C_in, k_h, k_w)`. Padding is zero-padding;
//! per-sample work is independent, so batch-parallel execution is bit-exact
//! for any thread count (see `parallel`).

use crate::parallel;
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvSpec {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad_h - self.kh) / self.stride + 1;
        let ow = (w + 2 * self.pad_w - self.kw) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

/// Output columns whose source pixel is in-bounds for kernel offset `kj`:
/// `0 <= ox*stride + kj - pad < w`. Returns `(ox_start, ox_end)`.
#[inline]
fn valid_ox(w: usize, ow: usize, stride: usize, kj: usize, pad: usize) -> (usize, usize) {
    let start = pad.saturating_sub(kj).div_ceil(stride).min(ow);
    let mut end = ow;
    // largest ox with ox*stride + kj - pad <= w - 1
    if w + pad > kj {
        end = end.min((w + pad - kj - 1) / stride + 1);
    } else {
        end = start;
    }
    (start, end.max(start))
}

/// Gather one sample into the `(C_in*kh*kw, oh*ow)` im2col matrix.
fn im2col<E: Elem>(x: &[E], h: usize, w: usize, spec: &ConvSpec, col: &mut [E]) {
    let (oh, ow) = spec.out_hw(h, w);
    let ohw = oh * ow;
    debug_assert_eq!(col.len(), spec.in_ch * spec.kh * spec.kw * ohw);
    let mut row = 0;
    for c in 0..spec.in_ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..spec.kh {
            for kj in 0..spec.kw {
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                row += 1;
                let (ox0, ox1) = valid_ox(w, ow, spec.stride, kj, spec.pad_w);
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad_h as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst_row.fill(E::ZERO);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst_row[..ox0].fill(E::ZERO);
                    dst_row[ox1..].fill(E::ZERO);
                    if ox1 > ox0 {
                        if spec.stride == 1 {
                            let ix0 = ox0 + kj - spec.pad_w;
                            dst_row[ox0..ox1].copy_from_slice(&src_row[ix0..ix0 + ox1 - ox0]);
                        } else {
                            for (ox, v) in dst_row[ox0..ox1].iter_mut().enumerate() {
                                *v = src_row[(ox + ox0) * spec.stride + kj - spec.pad_w];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the im2col gradient back into the input gradient of one sample.
fn col2im_accumulate<E: Elem>(dcol: &[E], h: usize, w: usize, spec: &ConvSpec, dx: &mut [E]) {
    let (oh, ow) = spec.out_hw(h, w);
    let ohw = oh * ow;
    let mut row = 0;
    for c in 0..spec.in_ch {
        for ki in 0..spec.kh {
            for kj in 0..spec.kw {
                let src = &dcol[row * ohw..(row + 1) * ohw];
                row += 1;
                let (ox0, ox1) = valid_ox(w, ow, spec.stride, kj, spec.pad_w);
                if ox1 <= ox0 {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    let dst_row = &mut dx[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    if spec.stride == 1 {
                        let ix0 = ox0 + kj - spec.pad_w;
                        for (d, s) in dst_row[ix0..ix0 + ox1 - ox0]
                            .iter_mut()
                            .zip(&src_row[ox0..ox1])
                        {
                            *d += *s;
                        }
                    } else {
                        for (ox, s) in src_row[ox0..ox1].iter().enumerate() {
                            dst_row[(ox + ox0) * spec.stride + kj - spec.pad_w] += *s;
                        }
                    }
                }
            }
        }
    }
}

/// Per-sample im2col matrices kept alive for the backward pass; empty for
/// pointwise convolutions, which read the input directly.
pub type ColCache<E> = Vec<Vec<E>>;

pub fn conv2d_forward<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
    spec: &ConvSpec,
    threads: usize,
) -> Tensor<E> {
    conv2d_forward_cached(x, w, b, spec, threads, false).0
}

/// Forward pass, optionally returning the im2col buffers so backward can
/// skip recomputing them.
pub fn conv2d_forward_cached<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
    spec: &ConvSpec,
    threads: usize,
    keep_cols: bool,
) -> (Tensor<E>, Option<ColCache<E>>) {
    let (n, cin, h, width) = x.dims4();
    assert_eq!(cin, spec.in_ch, "conv input channels");
    assert_eq!(w.shape(), [spec.out_ch, spec.in_ch, spec.kh, spec.kw]);
    let (oh, ow) = spec.out_hw(h, width);
    let ohw = oh * ow;
    let k = spec.in_ch * spec.kh * spec.kw;
    let sample_in = cin * h * width;
    let sample_out = spec.out_ch * ohw;
    let pointwise = spec.is_pointwise();
    let keep_cols = keep_cols && !pointwise;

    let mut out = Tensor::zeros(&[n, spec.out_ch, oh, ow]);
    let xdata = x.data();
    let wdata = w.data();
    let run = |x_i: &[E], out_i: &mut [E], col_out: Option<&mut Vec<E>>| {
        let local_col;
        let col_ptr = if pointwise {
            x_i.as_ptr()
        } else if let Some(col) = col_out {
            col.resize(k * ohw, E::ZERO);
            im2col(x_i, h, width, spec, col);
            col.as_ptr()
        } else {
            local_col = {
                let mut c = vec![E::ZERO; k * ohw];
                im2col(x_i, h, width, spec, &mut c);
                c
            };
            local_col.as_ptr()
        };
        unsafe {
            E::gemm(
                spec.out_ch,
                k,
                ohw,
                E::ONE,
                wdata.as_ptr(),
                k as isize,
                1,
                col_ptr,
                ohw as isize,
                1,
                E::ZERO,
                out_i.as_mut_ptr(),
                ohw as isize,
                1,
            );
        }
        if let Some(bias) = b {
            for (c, bv) in bias.data().iter().enumerate().take(spec.out_ch) {
                for v in out_i[c * ohw..(c + 1) * ohw].iter_mut() {
                    *v += *bv;
                }
            }
        }
    };

    let cols = if keep_cols {
        let mut cols: ColCache<E> = (0..n).map(|_| Vec::new()).collect();
        let tasks: Vec<(usize, &mut [E], &mut Vec<E>)> = out
            .data_mut()
            .chunks_mut(sample_out)
            .zip(cols.iter_mut())
            .enumerate()
            .map(|(i, (out_i, col))| (i, out_i, col))
            .collect();
        parallel::for_each_task(tasks, threads, |(i, out_i, col)| {
            run(&xdata[i * sample_in..(i + 1) * sample_in], out_i, Some(col));
        });
        Some(cols)
    } else {
        let chunks: Vec<(usize, &mut [E])> =
            out.data_mut().chunks_mut(sample_out).enumerate().collect();
        parallel::for_each_chunk(chunks, threads, |i, out_i| {
            run(&xdata[i * sample_in..(i + 1) * sample_in], out_i, None);
        });
        None
    };
    (out, cols)
}

pub struct ConvGrads<E> {
    pub dx: Option<Tensor<E>>,
    pub dw: Tensor<E>,
    pub db: Option<Tensor<E>>,
}

pub fn conv2d_backward<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    gy: &Tensor<E>,
    spec: &ConvSpec,
    need_dx: bool,
    need_db: bool,
    threads: usize,
) -> ConvGrads<E> {
    conv2d_backward_cached(x, w, gy, spec, None, need_dx, need_db, threads)
}

/// Backward pass; `cols` are the forward im2col buffers when they were kept.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_cached<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    gy: &Tensor<E>,
    spec: &ConvSpec,
    cols: Option<&ColCache<E>>,
    need_dx: bool,
    need_db: bool,
    threads: usize,
) -> ConvGrads<E> {
    let (n, cin, h, width) = x.dims4();
    let (oh, ow) = spec.out_hw(h, width);
    let ohw = oh * ow;
    let k = spec.in_ch * spec.kh * spec.kw;
    let sample_in = cin * h * width;
    let sample_out = spec.out_ch * ohw;
    assert_eq!(gy.shape(), [n, spec.out_ch, oh, ow]);

    let xdata = x.data();
    let wdata = w.data();
    let gydata = gy.data();

    // Per-sample partial dw (and the sample's dx), combined afterwards in
    // fixed batch order so the sum is identical for any thread count.
    struct Part<E> {
        dw: Vec<E>,
        dx: Option<Vec<E>>,
    }
    let parts: Vec<Part<E>> = parallel::map_indexed(n, threads, |i| {
        let x_i = &xdata[i * sample_in..(i + 1) * sample_in];
        let gy_i = &gydata[i * sample_out..(i + 1) * sample_out];
        let mut dw = vec![E::ZERO; spec.out_ch * k];
        let mut dx = None;

        if spec.is_pointwise() {
            // dw = gy (out_ch, hw) x x^T (hw, k)
            unsafe {
                E::gemm(
                    spec.out_ch,
                    ohw,
                    k,
                    E::ONE,
                    gy_i.as_ptr(),
                    ohw as isize,
                    1,
                    x_i.as_ptr(),
                    1,
                    ohw as isize,
                    E::ZERO,
                    dw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            if need_dx {
                let mut dx_i = vec![E::ZERO; sample_in];
                // dx = w^T (k, out_ch) x gy (out_ch, hw)
                unsafe {
                    E::gemm(
                        k,
                        spec.out_ch,
                        ohw,
                        E::ONE,
                        wdata.as_ptr(),
                        1,
                        k as isize,
                        gy_i.as_ptr(),
                        ohw as isize,
                        1,
                        E::ZERO,
                        dx_i.as_mut_ptr(),
                        ohw as isize,
                        1,
                    );
                }
                dx = Some(dx_i);
            }
        } else {
            let recomputed;
            let col: &[E] = match cols {
                Some(cache) => &cache[i],
                None => {
                    recomputed = {
                        let mut c = vec![E::ZERO; k * ohw];
                        im2col(x_i, h, width, spec, &mut c);
                        c
                    };
                    &recomputed
                }
            };
            // dw = gy (out_ch, hw) x col^T (hw, k)
            unsafe {
                E::gemm(
                    spec.out_ch,
                    ohw,
                    k,
                    E::ONE,
                    gy_i.as_ptr(),
                    ohw as isize,
                    1,
                    col.as_ptr(),
                    1,
                    ohw as isize,
                    E::ZERO,
                    dw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            if need_dx {
                let mut dcol = vec![E::ZERO; k * ohw];
                // dcol = w^T (k, out_ch) x gy (out_ch, hw)
                unsafe {
                    E::gemm(
                        k,
                        spec.out_ch,
                        ohw,
                        E::ONE,
                        wdata.as_ptr(),
                        1,
                        k as isize,
                        gy_i.as_ptr(),
                        ohw as isize,
                        1,
                        E::ZERO,
                        dcol.as_mut_ptr(),
                        ohw as isize,
                        1,
                    );
                }
                let mut dx_i = vec![E::ZERO; sample_in];
                col2im_accumulate(&dcol, h, width, spec, &mut dx_i);
                dx = Some(dx_i);
            }
        }
        Part { dw, dx }
    });

    let mut dw = Tensor::zeros(&[spec.out_ch, spec.in_ch, spec.kh, spec.kw]);
    for part in &parts {
        for (acc, v) in dw.data_mut().iter_mut().zip(&part.dw) {
            *acc += *v;
        }
    }

    let dx = if need_dx {
        let mut dx = Tensor::zeros(&[n, cin, h, width]);
        for (i, part) in parts.into_iter().enumerate() {
            let dst = &mut dx.data_mut()[i * sample_in..(i + 1) * sample_in];
            dst.copy_from_slice(&part.dx.expect("dx requested"));
        }
        Some(dx)
    } else {
        None
    };

    let db = if need_db {
        let mut db = Tensor::zeros(&[spec.out_ch]);
        for i in 0..n {
            for c in 0..spec.out_ch {
                let mut s = E::ZERO;
                for &g in &gydata[i * sample_out + c * ohw..i * sample_out + (c + 1) * ohw] {
                    s += g;
                }
                db.data_mut()[c] += s;
            }
        }
        Some(db)
    } else {
        None
    };

    ConvGrads { dx, dw, db }
}
