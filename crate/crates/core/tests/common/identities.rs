//! Structural identities, each returning the largest observed deviation.

use cgrseg::analysis::gradcheck::randomize_store;
use cgrseg::blocks::rcm::axial_context;
use cgrseg::blocks::{dpg_class_embed, dpg_prototype, rcm_forward, DpgParams, DpgShape, RcaVariant, RcmParams, RcmShape};
use cgrseg::rng::Rng;
use cgrseg::{Graph, NormMode, ParamStore, Tensor};

pub fn rand(dims: [usize; 4], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(dims, |_| rng.uniform(-1.0, 1.0))
}

pub fn rcm(c: usize, seed: u64) -> (ParamStore, RcmParams) {
    let mut store = ParamStore::new();
    let shape = RcmShape {
        channels: c,
        strip_kernel: 11,
        fusion_kernel: 3,
        mlp_ratio: 4,
    };
    let p = RcmParams::init(&mut store, "r", shape, &mut Rng::new(seed)).unwrap();
    (store, p)
}

/// `rcm_forward(x) - x` with every other weight random and the last MLP layer zero.
pub fn rcm_identity(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for variant in [RcaVariant::Add, RcaVariant::Mul] {
        let (mut store, p) = rcm(6, seed);
        randomize_store(&mut store, &mut Rng::new(seed + 1));
        for id in [p.mlp_w2, p.mlp_b2] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let x = rand([2, 6, 9, 13], seed + 2);
        let mut g = Graph::new(&store, NormMode::Eval);
        let xv = g.input(x.clone());
        let out = rcm_forward(&mut g, &p, xv, variant).unwrap();
        worst = worst.max(g.value(out.out).max_abs_diff(&x));
    }
    worst
}

/// Residual of `A[h,w] = A[h,0] + A[0,w] - A[0,0]` on the uncalibrated map.
pub fn separability(seed: u64) -> f64 {
    let (store, _) = rcm(4, seed);
    let mut g = Graph::new(&store, NormMode::Eval);
    let xv = g.input(rand([2, 4, 7, 9], seed + 1));
    let a = axial_context(&mut g, xv, RcaVariant::Add).unwrap();
    let a = g.value(a);
    let [n, c, h, w] = a.dims();
    let mut worst = 0.0f64;
    for n in 0..n {
        for c in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let rebuilt = a.at(n, c, y, 0) + a.at(n, c, 0, x) - a.at(n, c, 0, 0);
                    worst = worst.max((a.at(n, c, y, x) - rebuilt).abs());
                }
            }
        }
    }
    worst
}

/// `|sum(F_gp) - 1|` for random heads, plus whether every entry is positive.
pub fn class_embed_sum(seed: u64) -> (f64, bool) {
    let mut worst = 0.0f64;
    let mut positive = true;
    for (i, classes) in [2, 5, 19].into_iter().enumerate() {
        let s = seed + 10 * i as u64;
        let mut store = ParamStore::new();
        let shape = DpgShape {
            width: 12,
            hidden: 3,
            classes,
        };
        let p = DpgParams::init(&mut store, "head", shape, &mut Rng::new(s)).unwrap();
        randomize_store(&mut store, &mut Rng::new(s + 1));
        let mut g = Graph::new(&store, NormMode::Eval);
        let x = g.input(rand([1, 12, 6, 5], s + 2));
        let fp = dpg_prototype(&mut g, &p, x).unwrap();
        let e = dpg_class_embed(&mut g, &p, fp).unwrap();
        let e = g.value(e);
        assert_eq!(e.dims(), [1, classes, 1, 1]);
        worst = worst.max((e.sum() - 1.0).abs());
        positive &= e.data().iter().all(|&v| v > 0.0);
    }
    (worst, positive)
}

/// Whether concatenating a channel split gives back the input bit for bit.
pub fn split_concat_exact(seed: u64) -> bool {
    let x = rand([2, 9, 3, 4], seed);
    let mut g = Graph::new(&ParamStore::new(), NormMode::Eval);
    let xv = g.input(x.clone());
    let parts = g.tape.split_channels(xv, &[2, 3, 4]).unwrap();
    let back = g.tape.concat_channels(&parts).unwrap();
    g.value(back) == &x
}
