//! Every primitive's reverse-mode gradient against central differences.

use diet_autograd::{
    gradient_check, GradCheckOptions, Graph, ParamId, ParamStore, Result, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// A fixed random projection to a scalar so every output coordinate matters.
fn project(g: &mut Graph<'_>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let t = g.value(v).clone();
    let w = g.constant(random(&mut rng, t.shape()));
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn check<F>(store: &ParamStore, f: F)
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let report = gradient_check(store, f, GradCheckOptions::default()).unwrap();
    assert!(report.passed, "{:?}", report.worst);
}

fn two(seed: u64, a: &[usize], b: &[usize]) -> (ParamStore, ParamId, ParamId) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let x = s.insert("a", random(&mut rng, a));
    let y = s.insert("b", random(&mut rng, b));
    (s, x, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn matmul_and_transpose(seed in 0u64..1000, m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let (s, a, b) = two(seed, &[m, k], &[n, k]);
        check(&s, |g| {
            let (a, b) = (g.param(a), g.param(b));
            let bt = g.transpose(b)?;
            let c = g.matmul(a, bt)?;
            project(g, c, seed)
        });
    }

    #[test]
    fn elementwise(seed in 0u64..1000, m in 1usize..4, n in 1usize..4) {
        let (s, a, b) = two(seed, &[m, n], &[m, n]);
        check(&s, |g| {
            let (a, b) = (g.param(a), g.param(b));
            let x = g.add(a, b)?;
            let y = g.mul(x, a)?;
            let z = g.sub(y, b)?;
            let e = g.exp(z)?;
            let q = g.mul(b, b)?;
            let one = g.constant(Tensor::full(&[m, n], 1.0));
            let q1 = g.add(q, one)?;
            let l = g.log(q1)?;
            let sc = g.scale(l, -0.7)?;
            let tot = g.add_n(&[e, sc, z])?;
            project(g, tot, seed)
        });
    }

    #[test]
    fn activations(seed in 0u64..1000, n in 1usize..8) {
        let (s, a, _) = two(seed, &[2, n], &[1]);
        check(&s, |g| {
            let a = g.param(a);
            let r = g.relu(a)?;
            let ge = g.gelu(a)?;
            let t = g.add(r, ge)?;
            project(g, t, seed)
        });
    }

    #[test]
    fn softmax_and_logsumexp(seed in 0u64..1000, m in 1usize..4, n in 1usize..6) {
        let (s, a, _) = two(seed, &[m, n], &[1]);
        check(&s, |g| {
            let a = g.param(a);
            let p = g.softmax(a)?;
            let l = g.logsumexp(a)?;
            let pp = project(g, p, seed)?;
            let lp = project(g, l, seed + 1)?;
            g.add(pp, lp)
        });
    }

    #[test]
    fn layer_norm_and_bias(seed in 0u64..1000, m in 1usize..4, n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let x = s.insert("x", random(&mut rng, &[m, n]));
        let gamma = s.insert("gamma", random(&mut rng, &[n]));
        let beta = s.insert("beta", random(&mut rng, &[n]));
        check(&s, |g| {
            let (x, ga, be) = (g.param(x), g.param(gamma), g.param(beta));
            let y = g.layer_norm(x, ga, be, 1e-5)?;
            let z = g.add_row(y, be)?;
            project(g, z, seed)
        });
    }

    #[test]
    fn structural(seed in 0u64..1000, m in 2usize..5, n in 2usize..5) {
        let (s, a, b) = two(seed, &[m, n], &[m, 3]);
        check(&s, |g| {
            let (a, b) = (g.param(a), g.param(b));
            let c = g.concat_cols(&[a, b])?;
            let r = g.concat_rows(&[c, c])?;
            let sl = g.slice_rows(r, 1, m + 1)?;
            let sc = g.slice_cols(sl, 1, n + 2)?;
            let ga = g.gather_rows(sc, &[0, m - 1, 0])?;
            let flat = g.reshape(ga, &[3 * (n + 1)])?;
            let se = g.select(flat, &[0, 2, 2, 3 * (n + 1) - 1])?;
            let p1 = project(g, se, seed)?;
            let mean = g.mean(sc)?;
            g.add(p1, mean)
        });
    }

    #[test]
    fn sparse_matmul(seed in 0u64..1000, vocab in 3usize..8, dim in 1usize..4) {
        let (s, w, _) = two(seed, &[vocab, dim], &[1]);
        let rows = vec![vec![(0, 1.0), (vocab - 1, 2.0)], vec![], vec![(1, 0.5), (1, 0.5)]];
        check(&s, |g| {
            let w = g.param(w);
            let y = g.sparse_matmul(rows.clone(), w)?;
            project(g, y, seed)
        });
    }
}

#[test]
fn dropout_with_fixed_mask_is_differentiable() {
    let (s, a, _) = two(3, &[3, 4], &[1]);
    check(&s, |g| {
        let a = g.param(a);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = g.dropout(a, 0.3, &mut rng)?;
        project(g, d, 5)
    });
}

#[test]
fn small_mlp_matches_finite_differences() {
    // 5 parameter tensors: two weight matrices, two biases, one output row
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut s = ParamStore::new();
    let w1 = s.insert("w1", random(&mut rng, &[4, 6]));
    let b1 = s.insert("b1", random(&mut rng, &[6]));
    let w2 = s.insert("w2", random(&mut rng, &[6, 3]));
    let b2 = s.insert("b2", random(&mut rng, &[3]));
    let out = s.insert("out", random(&mut rng, &[3, 1]));
    let x = random(&mut rng, &[5, 4]);
    let report = gradient_check(
        &s,
        |g| {
            let xv = g.constant(x.clone());
            let (w1, b1, w2, b2, out) = (
                g.param(w1),
                g.param(b1),
                g.param(w2),
                g.param(b2),
                g.param(out),
            );
            let h = g.matmul(xv, w1)?;
            let h = g.add_row(h, b1)?;
            let h = g.gelu(h)?;
            let h = g.matmul(h, w2)?;
            let h = g.add_row(h, b2)?;
            let h = g.relu(h)?;
            let y = g.matmul(h, out)?;
            let y = g.reshape(y, &[5])?;
            g.logsumexp(y)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{:?}", report.worst);
    assert_eq!(report.coords_checked, 24 + 6 + 18 + 3 + 3);
}

#[test]
fn logsumexp_is_stable_at_extremes() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::vector(vec![1e6, -1e6, 1e6 - 1.0]));
    let l = g.logsumexp(x).unwrap();
    assert!(g.value(l).item().is_finite());
    let y = g.constant(Tensor::vector(vec![-1e6, -1e6]));
    let l = g.logsumexp(y).unwrap();
    assert!((g.value(l).item() - (-1e6 + 2f64.ln())).abs() < 1e-6);
}
