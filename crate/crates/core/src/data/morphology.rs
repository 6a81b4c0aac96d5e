//! Binary morphology with all-ones square kernels.
//!
//! A `k×k` kernel is anchored at `(k/2, k/2)`, so its footprint around a pixel
//! `p` covers offsets `-k/2 ..= k-1-k/2` on each axis. Dilation is the
//! Minkowski sum with that footprint; erosion keeps `p` only if the footprint
//! placed at `p` lies entirely inside the mask. Pixels outside the image count
//! as background for both operations.
//!
//! Both operations are evaluated separably (rows, then columns), which is exact
//! for rectangular all-ones kernels.

use super::Mask;
use crate::Result;

pub const BENCH_KERNEL: usize = 8;
pub const BENCH_ITERATIONS: usize = 2;

#[derive(Clone, Copy)]
enum Op {
    Dilate,
    Erode,
}

/// Offsets `[lo, hi]` of input pixels inspected for one output pixel.
fn window(op: Op, kernel: usize) -> (isize, isize) {
    let a = (kernel / 2) as isize;
    let last = kernel as isize - 1 - a;
    match op {
        // p ∈ q + B  ⇔  q ∈ p − B
        Op::Dilate => (-last, a),
        Op::Erode => (-a, last),
    }
}

fn pass_1d(src: &[u8], dst: &mut [u8], len: usize, stride: usize, count: usize, step: usize, op: Op, kernel: usize) {
    let (lo, hi) = window(op, kernel);
    for line in 0..count {
        let base = line * step;
        for i in 0..len {
            let mut acc = matches!(op, Op::Erode);
            for o in lo..=hi {
                let j = i as isize + o;
                let v = if j < 0 || j >= len as isize { 0 } else { src[base + j as usize * stride] };
                match op {
                    Op::Dilate => {
                        if v != 0 {
                            acc = true;
                            break;
                        }
                    }
                    Op::Erode => {
                        if v == 0 {
                            acc = false;
                            break;
                        }
                    }
                }
            }
            dst[base + i * stride] = acc as u8;
        }
    }
}

fn apply(mask: &Mask, kernel: usize, iterations: usize, op: Op) -> Result<Mask> {
    mask.check_binary()?;
    let (h, w) = (mask.height(), mask.width());
    let mut cur = mask.data().to_vec();
    let mut tmp = vec![0u8; cur.len()];
    for _ in 0..iterations {
        pass_1d(&cur, &mut tmp, w, 1, h, w, op, kernel);
        pass_1d(&tmp, &mut cur, h, w, w, 1, op, kernel);
    }
    Ok(Mask::from_vec(h, w, cur))
}

pub fn dilate(mask: &Mask, kernel: usize, iterations: usize) -> Result<Mask> {
    apply(mask, kernel, iterations, Op::Dilate)
}

pub fn erode(mask: &Mask, kernel: usize, iterations: usize) -> Result<Mask> {
    apply(mask, kernel, iterations, Op::Erode)
}

/// Roughened benchmark mask: erosion then dilation, two iterations each with an
/// 8×8 kernel. Falls back to plain dilation when erosion removes everything.
pub fn make_bench_mask(seg: &Mask) -> Result<Mask> {
    let opened = dilate(&erode(seg, BENCH_KERNEL, BENCH_ITERATIONS)?, BENCH_KERNEL, BENCH_ITERATIONS)?;
    if opened.count() > 0 {
        Ok(opened)
    } else {
        dilate(seg, BENCH_KERNEL, BENCH_ITERATIONS)
    }
}

/// Whether [`make_bench_mask`] takes the fallback path for `seg`.
pub fn bench_uses_fallback(seg: &Mask) -> Result<bool> {
    Ok(erode(seg, BENCH_KERNEL, BENCH_ITERATIONS)?.count() == 0)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Straight double loops over kernel offsets.
    use super::super::Mask;

    pub fn dilate_once(m: &Mask, k: usize) -> Mask {
        let a = (k / 2) as isize;
        let (h, w) = (m.height() as isize, m.width() as isize);
        let mut out = vec![0u8; m.data().len()];
        for qy in 0..h {
            for qx in 0..w {
                if m.get(qy as usize, qx as usize) == 0 {
                    continue;
                }
                for i in 0..k as isize {
                    for j in 0..k as isize {
                        let (py, px) = (qy + i - a, qx + j - a);
                        if py >= 0 && py < h && px >= 0 && px < w {
                            out[(py * w + px) as usize] = 1;
                        }
                    }
                }
            }
        }
        Mask::from_vec(m.height(), m.width(), out)
    }

    pub fn erode_once(m: &Mask, k: usize) -> Mask {
        let a = (k / 2) as isize;
        let (h, w) = (m.height() as isize, m.width() as isize);
        let mut out = vec![0u8; m.data().len()];
        for py in 0..h {
            for px in 0..w {
                let mut inside = true;
                for i in 0..k as isize {
                    for j in 0..k as isize {
                        let (qy, qx) = (py + i - a, px + j - a);
                        if qy < 0 || qy >= h || qx < 0 || qx >= w || m.get(qy as usize, qx as usize) == 0 {
                            inside = false;
                        }
                    }
                }
                out[(py * w + px) as usize] = inside as u8;
            }
        }
        Mask::from_vec(m.height(), m.width(), out)
    }

    pub fn repeat(m: &Mask, k: usize, n: usize, f: fn(&Mask, usize) -> Mask) -> Mask {
        (0..n).fold(m.clone(), |acc, _| f(&acc, k))
    }
}
