//! Direct-loop oracles for the optimized kernels.
//!
//! Error is `max|fast - naive| / max|naive|`, so entries that cancel to
//! near zero do not inflate it.

use cgrseg::rng::Rng;
use cgrseg::tensor::conv::{conv2d, conv2d_backward, ConvSpec};
use cgrseg::tensor::ops;
use cgrseg::Tensor;

pub const TOL: f64 = 1e-9;

fn rel_err(fast: &[f64], naive: &[f64]) -> f64 {
    assert_eq!(fast.len(), naive.len());
    let scale = naive.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    fast.iter().zip(naive).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

fn random(dims: [usize; 4], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.uniform(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy)]
struct Case {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    bias: bool,
}

fn naive_conv(x: &Tensor, wt: &Tensor, b: Option<&Tensor>, c: Case) -> (Vec<f64>, [usize; 4]) {
    let (sh, sw) = c.spec.stride;
    let (ph, pw) = c.spec.pad;
    let g = c.spec.groups;
    let (cin_g, cout_g) = (c.cin / g, c.cout / g);
    let oh = (c.h + 2 * ph - c.kh) / sh + 1;
    let ow = (c.w + 2 * pw - c.kw) / sw + 1;
    let mut out = vec![0.0; c.n * c.cout * oh * ow];
    for n in 0..c.n {
        for co in 0..c.cout {
            let grp = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin_g {
                        for ky in 0..c.kh {
                            for kx in 0..c.kw {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= c.h as isize || ix >= c.w as isize {
                                    continue;
                                }
                                acc += x.at(n, grp * cin_g + ci, iy as usize, ix as usize) * wt.at(co, ci, ky, kx);
                            }
                        }
                    }
                    out[((n * c.cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [c.n, c.cout, oh, ow])
}

/// Input and weight gradients of `sum(out ⊙ grad)` by direct scatter.
fn naive_conv_backward(x: &Tensor, wt: &Tensor, c: Case, grad: &[f64], od: [usize; 4]) -> (Vec<f64>, Vec<f64>) {
    let (sh, sw) = c.spec.stride;
    let (ph, pw) = c.spec.pad;
    let g = c.spec.groups;
    let (cin_g, cout_g) = (c.cin / g, c.cout / g);
    let [_, _, oh, ow] = od;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    for n in 0..c.n {
        for co in 0..c.cout {
            let grp = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = grad[((n * c.cout + co) * oh + oy) * ow + ox];
                    for ci in 0..cin_g {
                        for ky in 0..c.kh {
                            for kx in 0..c.kw {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= c.h as isize || ix >= c.w as isize {
                                    continue;
                                }
                                let xi = x.offset(n, grp * cin_g + ci, iy as usize, ix as usize);
                                let wi = wt.offset(co, ci, ky, kx);
                                gx[xi] += go * wt.data()[wi];
                                gw[wi] += go * x.data()[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

fn random_case(kind: usize, rng: &mut Rng) -> Case {
    let n = rng.range(1, 3);
    let h = rng.range(5, 14);
    let w = rng.range(5, 14);
    let c = rng.range(1, 7);
    let bias = rng.next_f64() < 0.5;
    match kind {
        // depthwise 3x3 or 5x5
        0 => {
            let k = [3, 5][rng.range(0, 2)];
            Case { n, cin: c, cout: c, h, w, kh: k, kw: k, spec: ConvSpec::same(k, k, c), bias }
        }
        // horizontal strip 1x11, depthwise
        1 => Case { n, cin: c, cout: c, h, w: w + 6, kh: 1, kw: 11, spec: ConvSpec::same(1, 11, c), bias },
        // vertical strip 11x1, depthwise
        2 => Case { n, cin: c, cout: c, h: h + 6, w, kh: 11, kw: 1, spec: ConvSpec::same(11, 1, c), bias },
        // pointwise
        3 => {
            let cout = rng.range(1, 9);
            Case { n, cin: c, cout, h, w, kh: 1, kw: 1, spec: ConvSpec::same(1, 1, 1), bias }
        }
        // grouped, strided, asymmetric padding
        _ => {
            let g = [1, 2][rng.range(0, 2)];
            let cin = g * rng.range(1, 4);
            let cout = g * rng.range(1, 4);
            let kh = rng.range(1, 4);
            let kw = rng.range(1, 4);
            let spec = ConvSpec::new((rng.range(1, 3), rng.range(1, 3)), (rng.range(0, kh), rng.range(0, kw)), g);
            Case { n, cin, cout, h, w, kh, kw, spec, bias }
        }
    }
}

/// Worst relative error over a batch of randomized cases.
#[derive(Debug, Clone, Copy, Default)]
pub struct Stats {
    pub cases: usize,
    pub worst: f64,
}

impl Stats {
    fn record(&mut self, e: f64) {
        self.worst = self.worst.max(e);
    }
}

/// Forward, input, weight and bias gradients of `cases` convolutions cycling
/// through depthwise, 1x11, 11x1, pointwise and grouped/strided kinds.
pub fn conv_suite(seed: u64, cases: usize) -> (Stats, [usize; 5]) {
    let mut rng = Rng::new(seed);
    let mut stats = Stats::default();
    let mut per_kind = [0usize; 5];
    for i in 0..cases {
        let kind = i % 5;
        let c = random_case(kind, &mut rng);
        let x = random([c.n, c.cin, c.h, c.w], &mut rng);
        let wt = random([c.cout, c.cin / c.spec.groups, c.kh, c.kw], &mut rng);
        let b = c.bias.then(|| random([1, c.cout, 1, 1], &mut rng));
        let fast = conv2d(&x, &wt, b.as_ref(), c.spec).unwrap();
        let (naive, od) = naive_conv(&x, &wt, b.as_ref(), c);
        assert_eq!(fast.dims(), od, "{c:?}");
        stats.record(rel_err(fast.data(), &naive));

        let grad = random(od, &mut rng);
        let g = conv2d_backward(&x, &wt, c.bias, c.spec, grad.data()).unwrap();
        let (gx, gw) = naive_conv_backward(&x, &wt, c, grad.data(), od);
        stats.record(rel_err(&g.input, &gx));
        stats.record(rel_err(&g.weight, &gw));
        if let Some(gb) = &g.bias {
            let mut want = vec![0.0; c.cout];
            for (i, v) in grad.data().iter().enumerate() {
                want[(i / (od[2] * od[3])) % c.cout] += v;
            }
            stats.record(rel_err(gb, &want));
        }
        stats.cases += 1;
        per_kind[kind] += 1;
    }
    (stats, per_kind)
}

/// Matrix products, their gradients, and transposes.
pub fn matmul_suite(seed: u64, cases: usize) -> Stats {
    let mut rng = Rng::new(seed);
    let mut stats = Stats::default();
    for _ in 0..cases {
        let (m, k, p) = (rng.range(1, 17), rng.range(1, 33), rng.range(1, 17));
        let a = random([1, m, k, 1], &mut rng);
        let b = random([1, k, p, 1], &mut rng);
        let fast = ops::matmul(&a, &b).unwrap();
        let mut naive = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                naive[i * p + j] = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * p + j]).sum();
            }
        }
        assert_eq!(fast.dims(), [1, m, p, 1]);
        stats.record(rel_err(fast.data(), &naive));

        let grad = random([1, m, p, 1], &mut rng);
        let (ga, gb) = ops::matmul_backward(&a, &b, grad.data());
        let mut na = vec![0.0; m * k];
        let mut nb = vec![0.0; k * p];
        for i in 0..m {
            for j in 0..p {
                for t in 0..k {
                    na[i * k + t] += grad.data()[i * p + j] * b.data()[t * p + j];
                    nb[t * p + j] += grad.data()[i * p + j] * a.data()[i * k + t];
                }
            }
        }
        stats.record(rel_err(&ga, &na));
        stats.record(rel_err(&gb, &nb));

        let t = ops::transpose(&a).unwrap();
        for i in 0..m {
            for j in 0..k {
                assert_eq!(t.data()[j * m + i], a.data()[i * k + j]);
            }
        }
        stats.cases += 1;
    }
    stats
}

fn random_broadcast_pair(rng: &mut Rng) -> ([usize; 4], [usize; 4]) {
    let full: [usize; 4] = [rng.range(1, 3), rng.range(1, 5), rng.range(1, 6), rng.range(1, 6)];
    let mut a = full;
    let mut b = full;
    for i in 0..4 {
        match rng.range(0, 3) {
            0 => a[i] = 1,
            1 => b[i] = 1,
            _ => {}
        }
    }
    (a, b)
}

fn pick_offset(t: &Tensor, d: [usize; 4], i: [usize; 4]) -> usize {
    let at = |k: usize| if d[k] == 1 { 0 } else { i[k] };
    t.offset(at(0), at(1), at(2), at(3))
}

/// Broadcast add and multiply, and the multiply gradient reduced back onto
/// each operand's shape.
pub fn broadcast_suite(seed: u64, cases: usize) -> Stats {
    let mut rng = Rng::new(seed);
    let mut stats = Stats::default();
    for _ in 0..cases {
        let (da, db) = random_broadcast_pair(&mut rng);
        let a = random(da, &mut rng);
        let b = random(db, &mut rng);
        let out = ops::broadcast_dims("test", da, db).unwrap();
        let va = |i| a.data()[pick_offset(&a, da, i)];
        let vb = |i| b.data()[pick_offset(&b, db, i)];
        let naive_add = Tensor::from_fn(out, |i| va(i) + vb(i));
        let naive_mul = Tensor::from_fn(out, |i| va(i) * vb(i));
        stats.record(rel_err(ops::add(&a, &b).unwrap().data(), naive_add.data()));
        stats.record(rel_err(ops::mul(&a, &b).unwrap().data(), naive_mul.data()));

        let grad = random(out, &mut rng);
        let (ga, gb) = ops::mul_backward(&a, &b, grad.data(), out);
        let mut na = vec![0.0; a.len()];
        let mut nb = vec![0.0; b.len()];
        for (flat, g) in grad.data().iter().enumerate() {
            let i = [
                flat / (out[1] * out[2] * out[3]),
                flat / (out[2] * out[3]) % out[1],
                flat / out[3] % out[2],
                flat % out[3],
            ];
            let (ia, ib) = (pick_offset(&a, da, i), pick_offset(&b, db, i));
            na[ia] += g * b.data()[ib];
            nb[ib] += g * a.data()[ia];
        }
        stats.record(rel_err(&ga, &na));
        stats.record(rel_err(&gb, &nb));
        stats.cases += 1;
    }
    stats
}
