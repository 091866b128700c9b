//! Dot-product similarity losses, masked-token corruption and the total
//! training objective.

use std::collections::HashMap;

use diet_autograd::{Graph, Tensor, Var};
use rand::seq::index;
use rand::Rng;

use crate::featurizer::TokenFeatures;
use crate::model::{crf_nll_batch, DietModel, LossToggles, LossWeights, MaskConfig, Mode, Packed};
use crate::{DietError, Result};

/// `logsumexp([S+, S-...]) - S+` for one anchor. `negatives` is `[n, dim]`
/// and may be `None` for an empty negative set.
pub fn dot_product_loss(
    g: &mut Graph<'_>,
    anchor: Var,
    positive: Var,
    negatives: Option<Var>,
) -> Result<Var> {
    let dim = g.value(anchor).len();
    let a = g.reshape(anchor, &[1, dim])?;
    let p = g.reshape(positive, &[1, dim])?;
    let mut candidates = vec![p];
    if let Some(n) = negatives {
        candidates.push(n);
    }
    let c = if candidates.len() == 1 {
        p
    } else {
        g.concat_rows(&candidates)?
    };
    let ct = g.transpose(c)?;
    let scores = g.matmul(a, ct)?;
    let lse = g.logsumexp(scores)?;
    let lse = g.reshape(lse, &[])?;
    let pos = g.select(scores, &[0])?;
    let pos = g.reshape(pos, &[])?;
    Ok(g.sub(lse, pos)?)
}

/// Mean over rows of `logsumexp(scores[b, [pos, negs...]]) - scores[b, pos]`.
pub fn ranking_loss(
    g: &mut Graph<'_>,
    scores: Var,
    positives: &[usize],
    negatives: &[Vec<usize>],
) -> Result<Var> {
    let t = g.value(scores);
    let (rows, cols) = (t.rows(), t.cols());
    if positives.len() != rows || negatives.len() != rows {
        return Err(DietError::Invalid(format!(
            "{} positives and {} negative sets for {rows} score rows",
            positives.len(),
            negatives.len()
        )));
    }
    if rows == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    if let Some(bad) = positives
        .iter()
        .chain(negatives.iter().flatten())
        .find(|&&c| c >= cols)
    {
        return Err(DietError::Invalid(format!(
            "candidate {bad} outside {cols} columns"
        )));
    }
    let per_row = |g: &mut Graph<'_>, group: &[usize]| -> Result<Var> {
        let width = 1 + negatives[group[0]].len();
        let mut flat = Vec::with_capacity(group.len() * width);
        for &b in group {
            flat.push(b * cols + positives[b]);
            flat.extend(negatives[b].iter().map(|&n| b * cols + n));
        }
        let picked = g.select(scores, &flat)?;
        let picked = g.reshape(picked, &[group.len(), width])?;
        let lse = g.logsumexp(picked)?;
        let pos_idx: Vec<usize> = (0..group.len()).map(|i| i * width).collect();
        let pos = g.select(picked, &pos_idx)?;
        let diff = g.sub(lse, pos)?;
        Ok(g.sum(diff)?)
    };
    // Rows are grouped by negative-set size so each group is one rectangular block.
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (b, n) in negatives.iter().enumerate() {
        match groups.iter_mut().find(|(len, _)| *len == n.len()) {
            Some((_, members)) => members.push(b),
            None => groups.push((n.len(), vec![b])),
        }
    }
    let mut sums = Vec::with_capacity(groups.len());
    for (_, members) in &groups {
        sums.push(per_row(g, members)?);
    }
    let total = if sums.len() == 1 {
        sums[0]
    } else {
        g.add_n(&sums)?
    };
    Ok(g.scale(total, 1.0 / rows as f64)?)
}

/// Up to `n` distinct candidates drawn uniformly from `0..count`, never
/// `exclude`.
pub fn sample_negatives<R: Rng + ?Sized>(
    count: usize,
    exclude: usize,
    n: usize,
    rng: &mut R,
) -> Vec<usize> {
    let pool = count.saturating_sub(usize::from(exclude < count));
    let take = n.min(pool);
    if take == 0 {
        return Vec::new();
    }
    index::sample(rng, pool, take)
        .into_iter()
        .map(|i| if i >= exclude { i + 1 } else { i })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    /// Replaced by the learned `__MASK__` vector.
    Mask,
    /// Replaced by another token's merged features from the batch.
    Random,
    /// Left unchanged but still predicted.
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedPosition {
    /// Row in the packed batch.
    pub row: usize,
    pub sequence: usize,
    /// Token index within its sequence.
    pub position: usize,
    pub action: MaskAction,
    /// The original token string.
    pub original: String,
    /// Row whose features were substituted, for [`MaskAction::Random`].
    pub substitute: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskPlan {
    pub positions: Vec<MaskedPosition>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// Whether token `position` of `sequence` is selected.
    pub fn contains(&self, sequence: usize, position: usize) -> bool {
        self.positions
            .iter()
            .any(|p| p.sequence == sequence && p.position == position)
    }
}

/// Number of positions to select out of `n`: `rate * n` rounded
/// stochastically so its expectation is exact, and at least one.
fn selection_count<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> usize {
    if n == 0 || rate <= 0.0 {
        return 0;
    }
    let want = rate * n as f64;
    let mut k = want.floor() as usize;
    if rng.random::<f64>() < want - want.floor() {
        k += 1;
    }
    k.clamp(1, n)
}

/// Chooses positions and actions for a packed batch. `tokens[s]` are the
/// token strings of sequence `s` with `__CLS__` last; `__CLS__` is never
/// selected.
pub fn plan_masking<R: Rng + ?Sized>(
    packed: &Packed,
    tokens: &[&[String]],
    config: &MaskConfig,
    rng: &mut R,
) -> MaskPlan {
    let mut plan = MaskPlan::default();
    let pool: Vec<(usize, &str)> = packed
        .segments
        .iter()
        .zip(tokens)
        .flat_map(|(seg, toks)| (0..seg.len - 1).map(move |i| (seg.start + i, toks[i].as_str())))
        .collect();
    for (s, (seg, toks)) in packed.segments.iter().zip(tokens).enumerate() {
        let n = seg.len - 1;
        let k = selection_count(n, config.select_rate, rng);
        let mut chosen: Vec<usize> = index::sample(rng, n, k).into_vec();
        chosen.sort_unstable();
        for position in chosen {
            let original = toks[position].clone();
            let u: f64 = rng.random();
            let (action, substitute) = if u < config.mask_prob {
                (MaskAction::Mask, None)
            } else if u < config.mask_prob + config.random_prob {
                let others: Vec<usize> = pool
                    .iter()
                    .filter(|(_, t)| *t != original)
                    .map(|(r, _)| *r)
                    .collect();
                let sub = (!others.is_empty()).then(|| others[rng.random_range(0..others.len())]);
                (MaskAction::Random, sub)
            } else {
                (MaskAction::Keep, None)
            };
            plan.positions.push(MaskedPosition {
                row: seg.start + position,
                sequence: s,
                position,
                action,
                original,
                substitute,
            });
        }
    }
    plan
}

/// Applies a plan to merged features `[N, D]`: masked rows become the
/// `__MASK__` vector and random rows copy their substitute.
pub fn mask_corrupt(
    g: &mut Graph<'_>,
    model: &DietModel,
    merged: Var,
    plan: &MaskPlan,
) -> Result<Var> {
    if plan.is_empty() {
        return Ok(merged);
    }
    let n = g.value(merged).rows();
    let mut rows: Vec<usize> = (0..n).collect();
    for p in &plan.positions {
        match (p.action, p.substitute) {
            (MaskAction::Mask, _) => rows[p.row] = n,
            (MaskAction::Random, Some(s)) => rows[p.row] = s,
            _ => {}
        }
    }
    let mask = g.param(model.mask_vector_id());
    let stacked = g.concat_rows(&[merged, mask])?;
    Ok(g.gather_rows(stacked, &rows)?)
}

/// Intent loss over a batch of `__CLS__` outputs.
pub fn intent_loss<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    model: &DietModel,
    cls: Var,
    gold: &[usize],
    num_negatives: usize,
    rng: &mut R,
) -> Result<Var> {
    let num_intents = model.dims().num_intents;
    if let Some(bad) = gold.iter().find(|&&y| y >= num_intents) {
        return Err(DietError::UnknownLabels {
            kind: "intent",
            labels: vec![format!("index {bad}")],
        });
    }
    let scores = model.intent_scores(g, cls)?;
    let negatives: Vec<Vec<usize>> = gold
        .iter()
        .map(|&y| sample_negatives(num_intents, y, num_negatives, rng))
        .collect();
    ranking_loss(g, scores, gold, &negatives)
}

/// Masked-token loss. Targets are `E_token` of the uncorrupted merged
/// features; negatives are other distinct token strings of the batch.
#[allow(clippy::too_many_arguments)]
pub fn mask_loss<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    model: &DietModel,
    sequence: Var,
    clean_merged: Var,
    packed: &Packed,
    tokens: &[&[String]],
    plan: &MaskPlan,
    num_negatives: usize,
    rng: &mut R,
) -> Result<Var> {
    if plan.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut reps: Vec<usize> = Vec::new();
    let mut ids: HashMap<&str, usize> = HashMap::new();
    for (seg, toks) in packed.segments.iter().zip(tokens) {
        for (i, t) in toks[..seg.len - 1].iter().enumerate() {
            ids.entry(t.as_str()).or_insert_with(|| {
                reps.push(seg.start + i);
                reps.len() - 1
            });
        }
    }
    let selected: Vec<usize> = plan.positions.iter().map(|p| p.row).collect();
    let outputs = g.gather_rows(sequence, &selected)?;
    let anchors = model.embed_mask_output(g, outputs)?;
    let targets = g.gather_rows(clean_merged, &reps)?;
    let targets = model.embed_token(g, targets)?;
    let tt = g.transpose(targets)?;
    let scores = g.matmul(anchors, tt)?;
    let positives: Vec<usize> = plan
        .positions
        .iter()
        .map(|p| ids[p.original.as_str()])
        .collect();
    let negatives: Vec<Vec<usize>> = positives
        .iter()
        .map(|&y| sample_negatives(reps.len(), y, num_negatives, rng))
        .collect();
    ranking_loss(g, scores, &positives, &negatives)
}

/// `L_I + L_E + L_M` over plain numbers, honouring toggles.
pub fn total_loss(intent: f64, entity: f64, mask: f64, toggles: LossToggles) -> Result<f64> {
    if !toggles.any() {
        return Err(DietError::Config("all losses are disabled".into()));
    }
    let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
    Ok(on(toggles.intent, intent) + on(toggles.entity, entity) + on(toggles.mask, mask))
}

/// One training example in model-ready form.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: TokenFeatures,
    pub intent: usize,
    /// Tag index for every non-`__CLS__` token.
    pub tags: Vec<usize>,
}

/// Loss node of a batch plus the value of each enabled term.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub intent: Option<f64>,
    pub entity: Option<f64>,
    pub mask: Option<f64>,
}

/// Records the full objective for `batch`. Masking only happens in
/// training mode with the mask loss enabled.
pub fn batch_loss<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    model: &DietModel,
    batch: &[&Example],
    mode: Mode,
    rng: &mut R,
) -> Result<BatchLoss> {
    let config = model.config();
    let toggles = config.losses;
    if !toggles.any() {
        return Err(DietError::Config("all losses are disabled".into()));
    }
    if batch.is_empty() {
        return Err(DietError::EmptyDataset("empty batch".into()));
    }
    let features: Vec<TokenFeatures> = batch.iter().map(|e| e.features.clone()).collect();
    let tokens: Vec<&[String]> = batch.iter().map(|e| e.features.tokens.as_slice()).collect();
    let (merged, packed) = model.embed(g, &features, mode, rng)?;
    let plan = if mode.is_train() && toggles.mask {
        plan_masking(&packed, &tokens, &config.masking, rng)
    } else {
        MaskPlan::default()
    };
    let corrupted = mask_corrupt(g, model, merged, &plan)?;
    let out = model.forward_from(g, corrupted, packed, mode, rng)?;
    let w: LossWeights = config.loss_weights;
    let mut terms = Vec::new();
    let (mut intent, mut entity, mut mask) = (None, None, None);
    if toggles.intent {
        let gold: Vec<usize> = batch.iter().map(|e| e.intent).collect();
        let l = intent_loss(g, model, out.cls, &gold, config.num_negatives, rng)?;
        intent = Some(g.value(l).item());
        terms.push(g.scale(l, w.intent)?);
    }
    if toggles.entity {
        let mut gold = Vec::with_capacity(batch.len());
        for (s, e) in batch.iter().enumerate() {
            if e.tags.len() != out.packed.tokens_in(s) {
                return Err(DietError::Invalid(format!(
                    "{} tags for {} tokens",
                    e.tags.len(),
                    out.packed.tokens_in(s)
                )));
            }
            let exclude = config.masking.exclude_from_crf;
            gold.push(
                e.tags
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| (!(exclude && plan.contains(s, i))).then_some(t))
                    .collect(),
            );
        }
        let t = g.param(model.transitions_id());
        let nll = crf_nll_batch(g, out.emissions, t, &gold)?;
        let l = g.scale(nll, 1.0 / batch.len() as f64)?;
        entity = Some(g.value(l).item());
        terms.push(g.scale(l, w.entity)?);
    }
    if toggles.mask {
        let l = mask_loss(
            g,
            model,
            out.sequence,
            merged,
            &out.packed,
            &tokens,
            &plan,
            config.num_negatives,
            rng,
        )?;
        mask = Some(g.value(l).item());
        terms.push(g.scale(l, w.mask)?);
    }
    let total = if terms.len() == 1 {
        terms[0]
    } else {
        g.add_n(&terms)?
    };
    Ok(BatchLoss {
        total,
        intent,
        entity,
        mask,
    })
}
