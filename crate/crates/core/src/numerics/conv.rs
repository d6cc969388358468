//! Direct 2-D cross-correlation kernels on NCHW buffers.
//!
//! Summation order is fixed, so results are bitwise reproducible.

use super::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.out_h(), self.out_w()]
    }
}

/// Output positions `[start, end)` for which `out * stride + k - padding`
/// lands inside `[0, len_in)`.
fn valid_range(len_in: usize, len_out: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let start = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    let last = len_in as isize - 1 + padding as isize - k as isize;
    if last < 0 {
        return (0, 0);
    }
    let end = len_out.min(last as usize / stride + 1);
    (start.min(end), end)
}

pub(crate) fn forward<T: Real>(g: &ConvGeometry, input: &[T], kernel: &[T]) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); g.n * g.o * ho * wo];
    let in_plane = g.h * g.w;
    let out_plane = ho * wo;
    for n in 0..g.n {
        for o in 0..g.o {
            let dst = &mut out[(n * g.o + o) * out_plane..][..out_plane];
            for c in 0..g.c {
                let src = &input[(n * g.c + c) * in_plane..][..in_plane];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(g.h, ho, ky, g.stride, g.padding);
                    for kx in 0..g.kw {
                        let wv = kernel[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = valid_range(g.w, wo, kx, g.stride, g.padding);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let in_row = &src[iy * g.w..][..g.w];
                            let out_row = &mut dst[oy * wo..][..wo];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.padding;
                                let len = ox1 - ox0;
                                for (d, &s) in out_row[ox0..ox1].iter_mut().zip(&in_row[ix0..ix0 + len]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    out_row[ox] += wv * in_row[ox * g.stride + kx - g.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn backward_input<T: Real>(g: &ConvGeometry, grad_out: &[T], kernel: &[T]) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let in_plane = g.h * g.w;
    let out_plane = ho * wo;
    let mut grad_in = vec![T::zero(); g.n * g.c * in_plane];
    for n in 0..g.n {
        for c in 0..g.c {
            let dst = &mut grad_in[(n * g.c + c) * in_plane..][..in_plane];
            for o in 0..g.o {
                let src = &grad_out[(n * g.o + o) * out_plane..][..out_plane];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(g.h, ho, ky, g.stride, g.padding);
                    for kx in 0..g.kw {
                        let wv = kernel[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = valid_range(g.w, wo, kx, g.stride, g.padding);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let go_row = &src[oy * wo..][..wo];
                            let gi_row = &mut dst[iy * g.w..][..g.w];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.padding;
                                let len = ox1 - ox0;
                                for (d, &s) in gi_row[ix0..ix0 + len].iter_mut().zip(&go_row[ox0..ox1]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    gi_row[ox * g.stride + kx - g.padding] += wv * go_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

pub(crate) fn backward_kernel<T: Real>(g: &ConvGeometry, grad_out: &[T], input: &[T]) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let in_plane = g.h * g.w;
    let out_plane = ho * wo;
    let mut grad_k = vec![T::zero(); g.o * g.c * g.kh * g.kw];
    for o in 0..g.o {
        for c in 0..g.c {
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(g.h, ho, ky, g.stride, g.padding);
                for kx in 0..g.kw {
                    let (ox0, ox1) = valid_range(g.w, wo, kx, g.stride, g.padding);
                    let mut acc = T::zero();
                    if ox0 < ox1 {
                        for n in 0..g.n {
                            let go = &grad_out[(n * g.o + o) * out_plane..][..out_plane];
                            let src = &input[(n * g.c + c) * in_plane..][..in_plane];
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.padding;
                                let go_row = &go[oy * wo..][..wo];
                                let in_row = &src[iy * g.w..][..g.w];
                                if g.stride == 1 {
                                    let ix0 = ox0 + kx - g.padding;
                                    let len = ox1 - ox0;
                                    acc += go_row[ox0..ox1]
                                        .iter()
                                        .zip(&in_row[ix0..ix0 + len])
                                        .map(|(&a, &b)| a * b)
                                        .sum::<T>();
                                } else {
                                    for ox in ox0..ox1 {
                                        acc += go_row[ox] * in_row[ox * g.stride + kx - g.padding];
                                    }
                                }
                            }
                        }
                    }
                    grad_k[((o * g.c + c) * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    }
    grad_k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for len_in in 1..9 {
            for k in 0..5 {
                for stride in 1..4 {
                    for padding in 0..3 {
                        let kh = k + 1;
                        if len_in + 2 * padding < kh {
                            continue;
                        }
                        let len_out = (len_in + 2 * padding - kh) / stride + 1;
                        let brute: Vec<usize> = (0..len_out)
                            .filter(|&o| {
                                let i = (o * stride + k) as isize - padding as isize;
                                i >= 0 && (i as usize) < len_in
                            })
                            .collect();
                        let (s, e) = valid_range(len_in, len_out, k, stride, padding);
                        assert_eq!(brute, (s..e).collect::<Vec<_>>(), "{len_in} {k} {stride} {padding}");
                    }
                }
            }
        }
    }
}
