//! Multi-head self-attention with clipped relative position embeddings on
//! the key path.
//!
//! Sequences of a batch are packed row-wise into one `[N, D]` matrix and
//! attention is restricted to each sequence's own rows. For query `i` and
//! key `j` of one sequence and one head,
//! `logit(i, j) = q_i . (k_j + r[clamp(j - i, -k, k)]) / sqrt(head_dim)`,
//! where `r` is shared across heads.

use diet_autograd::{CustomOp, Graph, Tensor, Var};
use rand::Rng;

use crate::Result;

/// A contiguous run of rows forming one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub heads: usize,
    pub head_dim: usize,
    pub clip: usize,
}

impl AttentionShape {
    fn rel_index(&self, i: usize, j: usize) -> usize {
        let d = j as isize - i as isize;
        let k = self.clip as isize;
        (d.clamp(-k, k) + k) as usize
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Attention probabilities for every (segment, head), each `len x len`.
fn probabilities(
    q: &Tensor,
    k: &Tensor,
    rel: &Tensor,
    segments: &[Segment],
    shape: AttentionShape,
) -> Vec<f64> {
    let dh = shape.head_dim;
    let d_model = q.cols();
    let scale = shape.scale();
    let total: usize = segments.iter().map(|s| s.len * s.len * shape.heads).sum();
    let mut probs = Vec::with_capacity(total);
    let mut row = Vec::new();
    for seg in segments {
        for h in 0..shape.heads {
            let off = h * dh;
            for i in 0..seg.len {
                let qi = &q.data()[(seg.start + i) * d_model + off..][..dh];
                row.clear();
                for j in 0..seg.len {
                    let kj = &k.data()[(seg.start + j) * d_model + off..][..dh];
                    let rj = rel.row(shape.rel_index(i, j));
                    let s: f64 = qi
                        .iter()
                        .zip(kj)
                        .zip(rj)
                        .map(|((a, b), r)| a * (b + r))
                        .sum();
                    row.push(s * scale);
                }
                diet_autograd::softmax_in_place(&mut row);
                probs.extend_from_slice(&row);
            }
        }
    }
    probs
}

/// Per-(segment, head) attention weight matrices, in segment-major order.
pub fn attention_weights(
    q: &Tensor,
    k: &Tensor,
    rel: &Tensor,
    segments: &[Segment],
    shape: AttentionShape,
) -> Vec<Tensor> {
    let probs = probabilities(q, k, rel, segments, shape);
    let mut out = Vec::new();
    let mut at = 0;
    for seg in segments {
        for _ in 0..shape.heads {
            let n = seg.len * seg.len;
            out.push(
                Tensor::new(vec![seg.len, seg.len], probs[at..at + n].to_vec()).expect("square"),
            );
            at += n;
        }
    }
    out
}

struct RelativeAttentionOp {
    segments: Vec<Segment>,
    shape: AttentionShape,
    probs: Vec<f64>,
    /// Inverted-dropout factors on the probabilities; empty when disabled.
    mask: Vec<f64>,
}

impl RelativeAttentionOp {
    fn weight(&self, at: usize) -> f64 {
        if self.mask.is_empty() {
            self.probs[at]
        } else {
            self.probs[at] * self.mask[at]
        }
    }

    fn forward(&self, v: &Tensor) -> Tensor {
        let d_model = v.cols();
        let dh = self.shape.head_dim;
        let mut out = vec![0.0; v.len()];
        let mut at = 0;
        for seg in &self.segments {
            for h in 0..self.shape.heads {
                let off = h * dh;
                for i in 0..seg.len {
                    let dst = (seg.start + i) * d_model + off;
                    for j in 0..seg.len {
                        let p = self.weight(at);
                        at += 1;
                        let src = (seg.start + j) * d_model + off;
                        for d in 0..dh {
                            out[dst + d] += p * v.data()[src + d];
                        }
                    }
                }
            }
        }
        Tensor::new(v.shape().to_vec(), out).expect("same shape as values")
    }
}

impl CustomOp for RelativeAttentionOp {
    fn name(&self) -> &'static str {
        "relative_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (q, k, v, rel) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let d_model = q.cols();
        let dh = self.shape.head_dim;
        let scale = self.shape.scale();
        let mut dq = vec![0.0; q.len()];
        let mut dk = vec![0.0; k.len()];
        let mut dv = vec![0.0; v.len()];
        let mut drel = vec![0.0; rel.len()];
        let g = grad.data();
        let mut at = 0;
        let mut dp = Vec::new();
        for seg in &self.segments {
            for h in 0..self.shape.heads {
                let off = h * dh;
                for i in 0..seg.len {
                    let qi_at = (seg.start + i) * d_model + off;
                    let gi = &g[qi_at..qi_at + dh];
                    dp.clear();
                    for j in 0..seg.len {
                        let vj_at = (seg.start + j) * d_model + off;
                        let m = if self.mask.is_empty() {
                            1.0
                        } else {
                            self.mask[at + j]
                        };
                        let w = self.probs[at + j] * m;
                        let mut s = 0.0;
                        for d in 0..dh {
                            s += gi[d] * v.data()[vj_at + d];
                            dv[vj_at + d] += w * gi[d];
                        }
                        dp.push(s * m);
                    }
                    let p = &self.probs[at..at + seg.len];
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..seg.len {
                        let coef = scale * p[j] * (dp[j] - dot);
                        if coef == 0.0 {
                            continue;
                        }
                        let kj_at = (seg.start + j) * d_model + off;
                        let r = self.shape.rel_index(i, j);
                        for d in 0..dh {
                            let qd = q.data()[qi_at + d];
                            dq[qi_at + d] += coef * (k.data()[kj_at + d] + rel.data()[r * dh + d]);
                            dk[kj_at + d] += coef * qd;
                            drel[r * dh + d] += coef * qd;
                        }
                    }
                    at += seg.len;
                }
            }
        }
        let t = |shape: &[usize], data| {
            Some(Tensor::new(shape.to_vec(), data).expect("gradient shape"))
        };
        vec![
            t(q.shape(), dq),
            t(k.shape(), dk),
            t(v.shape(), dv),
            t(rel.shape(), drel),
        ]
    }
}

/// Attended values `[N, D]` (heads concatenated, before the output
/// projection). `q`, `k` and `v` are `[N, D]`; `rel` is
/// `[2 * clip + 1, head_dim]`.
#[allow(clippy::too_many_arguments)]
pub fn relative_attention<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    rel: Var,
    segments: &[Segment],
    shape: AttentionShape,
    dropout: f64,
    rng: &mut R,
) -> Result<Var> {
    let (tq, tk, tv, tr) = (g.value(q), g.value(k), g.value(v), g.value(rel));
    let d_model = shape.heads * shape.head_dim;
    for t in [tq, tk, tv] {
        if t.shape().len() != 2 || t.cols() != d_model || t.rows() != tq.rows() {
            return Err(diet_autograd::Error::Shape {
                op: "relative_attention",
                left: tq.shape().to_vec(),
                right: t.shape().to_vec(),
            }
            .into());
        }
    }
    if tr.shape() != [2 * shape.clip + 1, shape.head_dim] {
        return Err(diet_autograd::Error::Shape {
            op: "relative_attention",
            left: vec![2 * shape.clip + 1, shape.head_dim],
            right: tr.shape().to_vec(),
        }
        .into());
    }
    let covered: usize = segments.iter().map(|s| s.len).sum();
    if segments.iter().any(|s| s.start + s.len > tq.rows()) || covered > tq.rows() {
        return Err(crate::DietError::Invalid(
            "attention segments exceed the packed rows".into(),
        ));
    }
    let probs = probabilities(tq, tk, tr, segments, shape);
    let mask = if dropout > 0.0 {
        let keep = 1.0 / (1.0 - dropout);
        (0..probs.len())
            .map(|_| {
                if rng.random::<f64>() < dropout {
                    0.0
                } else {
                    keep
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let op = RelativeAttentionOp {
        segments: segments.to_vec(),
        shape,
        probs,
        mask,
    };
    let out = op.forward(tv);
    Ok(g.custom(&[q, k, v, rel], out, Box::new(op)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use diet_autograd::{gradient_check, GradCheckOptions, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    const SHAPE: AttentionShape = AttentionShape {
        heads: 2,
        head_dim: 3,
        clip: 2,
    };

    #[test]
    fn rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, r) = (
            random(&mut rng, &[9, 6]),
            random(&mut rng, &[9, 6]),
            random(&mut rng, &[5, 3]),
        );
        let segs = [Segment { start: 0, len: 4 }, Segment { start: 4, len: 5 }];
        for w in attention_weights(&q, &k, &r, &segs, SHAPE) {
            for i in 0..w.rows() {
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(w.row(i).iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn single_position_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let ids: Vec<_> = ["q", "k", "v"]
            .iter()
            .map(|n| store.insert(*n, random(&mut rng, &[1, 6])))
            .collect();
        let rel = store.insert("rel", random(&mut rng, &[5, 3]));
        let w = attention_weights(
            store.get(ids[0]),
            store.get(ids[1]),
            store.get(rel),
            &[Segment { start: 0, len: 1 }],
            SHAPE,
        );
        assert_eq!(w[0].data(), &[1.0]);
        let mut g = Graph::new(&store);
        let (q, k, v, r) = (
            g.param(ids[0]),
            g.param(ids[1]),
            g.param(ids[2]),
            g.param(rel),
        );
        let out = relative_attention(
            &mut g,
            q,
            k,
            v,
            r,
            &[Segment { start: 0, len: 1 }],
            SHAPE,
            0.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(g.value(out), store.get(ids[2]));
    }

    #[test]
    fn zero_relative_embeddings_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k) = (random(&mut rng, &[4, 6]), random(&mut rng, &[4, 6]));
        let zero = Tensor::zeros(&[5, 3]);
        let seg = [Segment { start: 0, len: 4 }];
        let w = attention_weights(&q, &k, &zero, &seg, SHAPE);
        for h in 0..2 {
            for i in 0..4 {
                let mut logits: Vec<f64> = (0..4)
                    .map(|j| {
                        (0..3)
                            .map(|d| q.get(i, h * 3 + d) * k.get(j, h * 3 + d))
                            .sum::<f64>()
                            / 3f64.sqrt()
                    })
                    .collect();
                diet_autograd::softmax_in_place(&mut logits);
                for j in 0..4 {
                    assert!((w[h].get(i, j) - logits[j]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn segments_do_not_attend_across() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let names = ["q", "k", "v"];
        let ids: Vec<_> = names
            .iter()
            .map(|n| store.insert(*n, random(&mut rng, &[5, 6])))
            .collect();
        let rel = store.insert("rel", random(&mut rng, &[5, 3]));
        let segs = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 3 }];
        let run = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let (q, k, v, r) = (
                g.param(ids[0]),
                g.param(ids[1]),
                g.param(ids[2]),
                g.param(rel),
            );
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let o = relative_attention(&mut g, q, k, v, r, &segs, SHAPE, 0.0, &mut rng).unwrap();
            g.value(o).clone()
        };
        let before = run(&store);
        store.get_mut(ids[2]).data_mut()[4 * 6] += 10.0; // value of row 4 (second segment)
        let after = run(&store);
        assert_eq!(before.row(0), after.row(0));
        assert_eq!(before.row(1), after.row(1));
        assert_ne!(before.row(2), after.row(2));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let ids: Vec<_> = ["q", "k", "v"]
            .iter()
            .map(|n| store.insert(*n, random(&mut rng, &[7, 6])))
            .collect();
        let rel = store.insert("rel", random(&mut rng, &[5, 3]));
        let proj = random(&mut rng, &[7, 6]);
        let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
        for dropout in [0.0, 0.3] {
            let report = gradient_check::<_, crate::DietError>(
                &store,
                |g| {
                    let (q, k, v, r) = (
                        g.param(ids[0]),
                        g.param(ids[1]),
                        g.param(ids[2]),
                        g.param(rel),
                    );
                    let mut rng = ChaCha8Rng::seed_from_u64(99);
                    let o = relative_attention(g, q, k, v, r, &segs, SHAPE, dropout, &mut rng)?;
                    let p = g.constant(proj.clone());
                    let m = g.mul(o, p)?;
                    Ok(g.sum(m)?)
                },
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed, "dropout {dropout}: {:?}", report.worst);
        }
    }
}
