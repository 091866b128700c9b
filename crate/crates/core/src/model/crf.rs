//! Linear-chain CRF over per-token emission scores.
//!
//! A path `y` over `T` positions scores
//! `sum_t E[t, y_t] + sum_{t>0} A[y_{t-1}, y_t]`. There are no start or end
//! transitions.

use diet_autograd::{logsumexp, CustomOp, Graph, Tensor, Var};

use super::attention::Segment;
use crate::{DietError, Result};

fn check(emissions: &Tensor, transitions: &Tensor) -> Result<(usize, usize)> {
    let k = transitions.rows();
    if emissions.shape().len() != 2 || emissions.cols() != k || transitions.shape() != [k, k] {
        return Err(diet_autograd::Error::Shape {
            op: "crf",
            left: emissions.shape().to_vec(),
            right: transitions.shape().to_vec(),
        }
        .into());
    }
    Ok((emissions.rows(), k))
}

fn check_tags(tags: &[usize], t: usize, k: usize) -> Result<()> {
    if tags.len() != t {
        return Err(DietError::Invalid(format!(
            "{} tags for {t} emission rows",
            tags.len()
        )));
    }
    if let Some(bad) = tags.iter().find(|&&y| y >= k) {
        return Err(DietError::UnknownTag(format!(
            "index {bad} (tag set has {k} tags)"
        )));
    }
    Ok(())
}

/// Unnormalized score of one tag path.
pub fn path_score(emissions: &Tensor, transitions: &Tensor, tags: &[usize]) -> Result<f64> {
    let (t, k) = check(emissions, transitions)?;
    check_tags(tags, t, k)?;
    let mut s = 0.0;
    for (i, &y) in tags.iter().enumerate() {
        s += emissions.get(i, y);
        if i > 0 {
            s += transitions.get(tags[i - 1], y);
        }
    }
    Ok(s)
}

/// Forward-backward restricted to paths through `allowed` (one optional
/// fixed tag per position). Returns the log partition, the per-position
/// tag marginals and the expected transition counts.
fn forward_backward(
    em: &Tensor,
    tr: &Tensor,
    allowed: &[Option<usize>],
) -> (f64, Vec<f64>, Vec<f64>) {
    let (t, k) = (em.rows(), em.cols());
    let open = |i: usize, y: usize| allowed[i].is_none_or(|a| a == y);
    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t * k];
    let mut beta = vec![ninf; t * k];
    let mut buf = vec![0.0; k];
    for y in 0..k {
        if open(0, y) {
            alpha[y] = em.get(0, y);
        }
    }
    for i in 1..t {
        for y in 0..k {
            if !open(i, y) {
                continue;
            }
            for (p, b) in buf.iter_mut().enumerate() {
                *b = alpha[(i - 1) * k + p] + tr.get(p, y);
            }
            alpha[i * k + y] = logsumexp(&buf) + em.get(i, y);
        }
    }
    for y in 0..k {
        if open(t - 1, y) {
            beta[(t - 1) * k + y] = 0.0;
        }
    }
    for i in (0..t - 1).rev() {
        for y in 0..k {
            if !open(i, y) {
                continue;
            }
            for (n, b) in buf.iter_mut().enumerate() {
                *b = tr.get(y, n) + em.get(i + 1, n) + beta[(i + 1) * k + n];
            }
            beta[i * k + y] = logsumexp(&buf);
        }
    }
    let log_z = logsumexp(&alpha[(t - 1) * k..]);
    let unary: Vec<f64> = alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| (a + b - log_z).exp())
        .collect();
    let mut pair = vec![0.0; k * k];
    for i in 1..t {
        for p in 0..k {
            let a = alpha[(i - 1) * k + p];
            if a == ninf {
                continue;
            }
            for n in 0..k {
                let b = beta[i * k + n];
                if b == ninf {
                    continue;
                }
                pair[p * k + n] += (a + tr.get(p, n) + em.get(i, n) + b - log_z).exp();
            }
        }
    }
    (log_z, unary, pair)
}

/// `log Z`, the log-sum-exp of every path score.
pub fn log_partition(emissions: &Tensor, transitions: &Tensor) -> Result<f64> {
    let (t, _) = check(emissions, transitions)?;
    if t == 0 {
        return Ok(0.0);
    }
    Ok(forward_backward(emissions, transitions, &vec![None; t]).0)
}

/// Negative log-likelihood `log Z - score(tags)`.
pub fn crf_nll(emissions: &Tensor, transitions: &Tensor, tags: &[usize]) -> Result<f64> {
    if tags.is_empty() {
        return Err(DietError::Invalid(
            "crf_nll needs at least one position".into(),
        ));
    }
    Ok(log_partition(emissions, transitions)? - path_score(emissions, transitions, tags)?)
}

/// Highest-scoring path and its score. Ties go to the lowest tag index.
pub fn crf_viterbi(emissions: &Tensor, transitions: &Tensor) -> Result<(Vec<usize>, f64)> {
    let (t, k) = check(emissions, transitions)?;
    if t == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let mut score: Vec<f64> = emissions.row(0).to_vec();
    let mut back = vec![0usize; t * k];
    let mut next = vec![0.0; k];
    for i in 1..t {
        for y in 0..k {
            let mut best = 0;
            for p in 1..k {
                if score[p] + transitions.get(p, y) > score[best] + transitions.get(best, y) {
                    best = p;
                }
            }
            back[i * k + y] = best;
            next[y] = score[best] + transitions.get(best, y) + emissions.get(i, y);
        }
        std::mem::swap(&mut score, &mut next);
    }
    let mut last = 0;
    for y in 1..k {
        if score[y] > score[last] {
            last = y;
        }
    }
    let best = score[last];
    let mut path = vec![last; t];
    for i in (1..t).rev() {
        path[i - 1] = back[i * k + path[i]];
    }
    Ok((path, best))
}

struct CrfNllOp {
    /// Emission-row ranges of each sequence.
    segments: Vec<Segment>,
    /// `d loss / d emissions` and `d loss / d transitions`, computed in the
    /// forward pass.
    grad_emissions: Vec<f64>,
    grad_transitions: Vec<f64>,
}

impl CustomOp for CrfNllOp {
    fn name(&self) -> &'static str {
        "crf_nll"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.item();
        let scaled = |shape: &[usize], d: &[f64]| {
            Some(
                Tensor::new(shape.to_vec(), d.iter().map(|x| x * g).collect())
                    .expect("gradient shape"),
            )
        };
        debug_assert_eq!(
            self.segments.iter().map(|s| s.len).sum::<usize>(),
            inputs[0].rows()
        );
        vec![
            scaled(inputs[0].shape(), &self.grad_emissions),
            scaled(inputs[1].shape(), &self.grad_transitions),
        ]
    }
}

/// Summed CRF negative log-likelihood of several sequences whose emission
/// rows are stacked in `emissions` (`[sum of lengths, num_tags]`).
///
/// `gold[s][t]` is the tag of position `t` of sequence `s`; `None`
/// marginalizes that position out of the likelihood.
pub fn crf_nll_batch(
    g: &mut Graph<'_>,
    emissions: Var,
    transitions: Var,
    gold: &[Vec<Option<usize>>],
) -> Result<Var> {
    let (em, tr) = (g.value(emissions), g.value(transitions));
    let (rows, k) = check(em, tr)?;
    let total: usize = gold.iter().map(Vec::len).sum();
    if total != rows {
        return Err(DietError::Invalid(format!(
            "{total} gold tags for {rows} emission rows"
        )));
    }
    let mut grad_em = vec![0.0; em.len()];
    let mut grad_tr = vec![0.0; tr.len()];
    let mut segments = Vec::with_capacity(gold.len());
    let mut loss = 0.0;
    let mut start = 0;
    for tags in gold {
        let len = tags.len();
        segments.push(Segment { start, len });
        if len == 0 {
            continue;
        }
        if let Some(bad) = tags.iter().flatten().find(|&&y| y >= k) {
            return Err(DietError::UnknownTag(format!(
                "index {bad} (tag set has {k} tags)"
            )));
        }
        let seq = Tensor::new(
            vec![len, k],
            em.data()[start * k..(start + len) * k].to_vec(),
        )?;
        let (log_z, p_all, pair_all) = forward_backward(&seq, tr, &vec![None; len]);
        let (log_z_gold, p_gold, pair_gold) = forward_backward(&seq, tr, tags);
        loss += log_z - log_z_gold;
        let dst = &mut grad_em[start * k..(start + len) * k];
        for ((d, a), b) in dst.iter_mut().zip(&p_all).zip(&p_gold) {
            *d = a - b;
        }
        for ((d, a), b) in grad_tr.iter_mut().zip(&pair_all).zip(&pair_gold) {
            *d += a - b;
        }
        start += len;
    }
    let op = CrfNllOp {
        segments,
        grad_emissions: grad_em,
        grad_transitions: grad_tr,
    };
    Ok(g.custom(
        &[emissions, transitions],
        Tensor::scalar(loss),
        Box::new(op),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use diet_autograd::{gradient_check, GradCheckOptions, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(
            vec![r, c],
            (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    fn all_paths(t: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..t {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..k).map(move |y| {
                        let mut q = p.clone();
                        q.push(y);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn zero_transitions_factorize() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let em = random(&mut rng, 4, 3);
        let tr = Tensor::zeros(&[3, 3]);
        let tags = [2, 0, 1, 1];
        let expected: f64 = tags
            .iter()
            .enumerate()
            .map(|(i, &y)| logsumexp(em.row(i)) - em.get(i, y))
            .sum();
        assert!((crf_nll(&em, &tr, &tags).unwrap() - expected).abs() < 1e-12);
        let (path, _) = crf_viterbi(&em, &tr).unwrap();
        let argmax: Vec<usize> = (0..4)
            .map(|i| (0..3).fold(0, |b, y| if em.get(i, y) > em.get(i, b) { y } else { b }))
            .collect();
        assert_eq!(path, argmax);
    }

    #[test]
    fn two_by_two_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (em, tr) = (random(&mut rng, 2, 2), random(&mut rng, 2, 2));
        let scores: Vec<f64> = all_paths(2, 2)
            .iter()
            .map(|p| path_score(&em, &tr, p).unwrap())
            .collect();
        let log_z = logsumexp(&scores);
        for (p, s) in all_paths(2, 2).iter().zip(&scores) {
            assert!((crf_nll(&em, &tr, p).unwrap() - (log_z - s)).abs() < 1e-9);
        }
    }

    #[test]
    fn likelihoods_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (em, tr) = (random(&mut rng, 3, 3), random(&mut rng, 3, 3));
        let total: f64 = all_paths(3, 3)
            .iter()
            .map(|p| (-crf_nll(&em, &tr, p).unwrap()).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn viterbi_is_brute_force_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (em, tr) = (random(&mut rng, 3, 3), random(&mut rng, 3, 3));
            let best = all_paths(3, 3)
                .into_iter()
                .map(|p| (path_score(&em, &tr, &p).unwrap(), p))
                .fold(None, |acc: Option<(f64, Vec<usize>)>, x| match acc {
                    Some(a) if a.0 >= x.0 => Some(a),
                    _ => Some(x),
                })
                .unwrap();
            let (path, score) = crf_viterbi(&em, &tr).unwrap();
            assert_eq!(path, best.1);
            assert_eq!(score, path_score(&em, &tr, &path).unwrap());
        }
    }

    #[test]
    fn viterbi_ties_go_low() {
        let em = Tensor::zeros(&[3, 4]);
        let tr = Tensor::zeros(&[4, 4]);
        assert_eq!(crf_viterbi(&em, &tr).unwrap().0, [0, 0, 0]);
    }

    #[test]
    fn rejects_unknown_tags() {
        let em = Tensor::zeros(&[2, 2]);
        let tr = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            crf_nll(&em, &tr, &[0, 5]),
            Err(DietError::UnknownTag(_))
        ));
    }

    #[test]
    fn batched_op_matches_scalar_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let em = store.insert("em", random(&mut rng, 7, 4));
        let tr = store.insert("tr", random(&mut rng, 4, 4));
        let gold = vec![
            vec![Some(1), Some(3), Some(0)],
            vec![Some(2), None, Some(2), Some(1)],
        ];
        let report = gradient_check::<_, crate::DietError>(
            &store,
            |g| {
                let (e, t) = (g.param(em), g.param(tr));
                crf_nll_batch(g, e, t, &gold)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.worst);

        let mut g = Graph::new(&store);
        let (e, t) = (g.param(em), g.param(tr));
        let fixed = vec![vec![Some(1), Some(3), Some(0)]];
        let e3 = g.slice_rows(e, 0, 3).unwrap();
        let v = crf_nll_batch(&mut g, e3, t, &fixed).unwrap();
        let first = Tensor::new(vec![3, 4], store.get(em).data()[..12].to_vec()).unwrap();
        let want = crf_nll(&first, store.get(tr), &[1, 3, 0]).unwrap();
        assert!((g.value(v).item() - want).abs() < 1e-12);
    }
}
