//! Dense kernels for the learned operators: 3x3 same-padding convolutions
//! and fully connected layers, forward and backward.

use crate::tensor::RTensor;

/// `x [ci,h,w]`, `w [co,ci,3,3]`, `b [co]` -> `[co,h,w]`, zero padding.
pub fn conv2d_fwd(x: &RTensor, w: &RTensor, b: &RTensor) -> RTensor {
    let (ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let co = w.shape[0];
    assert_eq!(w.shape, [co, ci, 3, 3]);
    assert_eq!(b.shape, [co]);
    let plane = h * wd;
    let mut out = RTensor::zeros(&[co, h, wd]);
    for o in 0..co {
        let ob = &mut out.data[o * plane..(o + 1) * plane];
        ob.iter_mut().for_each(|v| *v = b.data[o]);
        for i in 0..ci {
            let xp = &x.data[i * plane..(i + 1) * plane];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = w.data[((o * ci + i) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    accumulate_shifted(ob, xp, h, wd, dy, dx, wv);
                }
            }
        }
    }
    out
}

/// `out[y][x] += s * inp[y+dy][x+dx]` where the source index is in bounds.
fn accumulate_shifted(
    out: &mut [f64],
    inp: &[f64],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    s: f64,
) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy.max(0)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)) as usize;
    for y in y0..y1 {
        let src_start = ((y as isize + dy) * w as isize + dx + x0 as isize) as usize;
        let dst_row = y * w;
        let src = &inp[src_start..src_start + (x1 - x0)];
        let dst = &mut out[dst_row + x0..dst_row + x1];
        for (d, s_val) in dst.iter_mut().zip(src) {
            *d += s * s_val;
        }
    }
}

/// Gradient w.r.t. the convolution input: correlation with flipped kernels.
pub fn conv2d_bwd_input(g: &RTensor, w: &RTensor, x_shape: &[usize]) -> RTensor {
    let (co, h, wd) = (g.shape[0], g.shape[1], g.shape[2]);
    let ci = x_shape[0];
    let plane = h * wd;
    let mut dx = RTensor::zeros(x_shape);
    for o in 0..co {
        let gp = &g.data[o * plane..(o + 1) * plane];
        for i in 0..ci {
            let dxi = &mut dx.data[i * plane..(i + 1) * plane];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = w.data[((o * ci + i) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    // dx[u,v] += w[ky,kx] * g[u-ky+1, v-kx+1]
                    let dy = 1 - ky as isize;
                    let dx_ = 1 - kx as isize;
                    accumulate_shifted(dxi, gp, h, wd, dy, dx_, wv);
                }
            }
        }
    }
    dx
}

/// Gradient w.r.t. the convolution weights.
pub fn conv2d_bwd_weight(g: &RTensor, x: &RTensor, w_shape: &[usize]) -> RTensor {
    let (co, h, wd) = (g.shape[0], g.shape[1], g.shape[2]);
    let ci = x.shape[0];
    let plane = h * wd;
    let mut dw = RTensor::zeros(w_shape);
    for o in 0..co {
        let gp = &g.data[o * plane..(o + 1) * plane];
        for i in 0..ci {
            let xp = &x.data[i * plane..(i + 1) * plane];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let dy = ky as isize - 1;
                    let dxs = kx as isize - 1;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy.max(0)) as usize;
                    let x0 = (-dxs).max(0) as usize;
                    let x1 = (wd as isize - dxs.max(0)) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let srow = (y as isize + dy) * wd as isize + dxs;
                        let grow = y * wd;
                        for xx in x0..x1 {
                            acc += gp[grow + xx] * xp[(srow + xx as isize) as usize];
                        }
                    }
                    dw.data[((o * ci + i) * 3 + ky) * 3 + kx] = acc;
                }
            }
        }
    }
    dw
}

pub fn conv2d_bwd_bias(g: &RTensor) -> RTensor {
    let (co, h, wd) = (g.shape[0], g.shape[1], g.shape[2]);
    let plane = h * wd;
    let data = (0..co)
        .map(|o| g.data[o * plane..(o + 1) * plane].iter().sum())
        .collect();
    RTensor::from_vec(&[co], data)
}

/// `x [n,di] * w [di,do] + b [do]` -> `[n,do]`.
pub fn linear_fwd(x: &RTensor, w: &RTensor, b: &RTensor) -> RTensor {
    let (n, di) = (x.shape[0], x.shape[1]);
    let dout = w.shape[1];
    assert_eq!(w.shape[0], di);
    assert_eq!(b.shape, [dout]);
    let mut out = RTensor::zeros(&[n, dout]);
    for r in 0..n {
        let orow = &mut out.data[r * dout..(r + 1) * dout];
        orow.copy_from_slice(&b.data);
        for k in 0..di {
            let xv = x.data[r * di + k];
            if xv == 0.0 {
                continue;
            }
            let wrow = &w.data[k * dout..(k + 1) * dout];
            for c in 0..dout {
                orow[c] += xv * wrow[c];
            }
        }
    }
    out
}

pub fn linear_bwd_input(g: &RTensor, w: &RTensor) -> RTensor {
    let (n, dout) = (g.shape[0], g.shape[1]);
    let di = w.shape[0];
    let mut dx = RTensor::zeros(&[n, di]);
    for r in 0..n {
        let grow = &g.data[r * dout..(r + 1) * dout];
        let xrow = &mut dx.data[r * di..(r + 1) * di];
        for (k, xv) in xrow.iter_mut().enumerate() {
            let wrow = &w.data[k * dout..(k + 1) * dout];
            let mut acc = 0.0;
            for c in 0..dout {
                acc += grow[c] * wrow[c];
            }
            *xv = acc;
        }
    }
    dx
}

pub fn linear_bwd_weight(g: &RTensor, x: &RTensor) -> RTensor {
    let (n, dout) = (g.shape[0], g.shape[1]);
    let di = x.shape[1];
    let mut dw = RTensor::zeros(&[di, dout]);
    for r in 0..n {
        let grow = &g.data[r * dout..(r + 1) * dout];
        for k in 0..di {
            let xv = x.data[r * di + k];
            if xv == 0.0 {
                continue;
            }
            let wrow = &mut dw.data[k * dout..(k + 1) * dout];
            for c in 0..dout {
                wrow[c] += xv * grow[c];
            }
        }
    }
    dw
}

pub fn linear_bwd_bias(g: &RTensor) -> RTensor {
    let (n, dout) = (g.shape[0], g.shape[1]);
    let mut db = RTensor::zeros(&[dout]);
    for r in 0..n {
        for c in 0..dout {
            db.data[c] += g.data[r * dout + c];
        }
    }
    db
}
