//! The DIET network.
//!
//! Sparse features pass through a projection shared across positions, are
//! concatenated with dense features and merged to the transformer width.
//! Two post-norm transformer layers with relative position attention
//! produce the sequence `a`; the transformer output at `__CLS__` feeds the
//! intent similarity head and the token outputs feed the CRF.
//!
//! A batch is packed into one `[N, D]` matrix where `N` counts every
//! position of every sequence, `__CLS__` included.

mod attention;
mod config;
mod crf;

pub use attention::{attention_weights, relative_attention, AttentionShape, Segment};
pub use config::{Activation, LossToggles, LossWeights, MaskConfig, ModelConfig, ModelDims};
pub use crf::{crf_nll, crf_nll_batch, crf_viterbi, log_partition, path_score};

use diet_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::featurizer::{sparse_activations, TokenFeatures};
use crate::{DietError, Result};

const DEFAULT_SPARSE_PROJECTION: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Layer {
    query: Affine,
    key: Affine,
    value: Affine,
    out: Affine,
    relative: ParamId,
    norm1: (ParamId, ParamId),
    ffn1: Affine,
    ffn2: Affine,
    norm2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Ids {
    sparse: Option<Affine>,
    merge: Affine,
    mask: ParamId,
    layers: Vec<Layer>,
    emission: Affine,
    transitions: ParamId,
    cls_embed: Affine,
    intent_table: ParamId,
    mask_embed: Affine,
    token_embed: Affine,
}

/// Creates parameters on a fresh store, or finds and shape-checks them on
/// a loaded one.
struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: Option<ChaCha8Rng>,
}

enum Init {
    Glorot,
    Zeros,
    Ones,
}

impl Builder<'_> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let Some(rng) = self.rng.as_mut() else {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| DietError::Checkpoint(format!("missing parameter {name}")))?;
            if self.store.get(id).shape() != shape {
                return Err(DietError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    self.store.get(id).shape()
                )));
            }
            return Ok(id);
        };
        let n: usize = shape.iter().product();
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Glorot => {
                let (fan_in, fan_out) = match shape {
                    [a, b] => (*a, *b),
                    _ => (n, n),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::new(
                    shape.to_vec(),
                    (0..n).map(|_| rng.random_range(-limit..limit)).collect(),
                )?
            }
        };
        Ok(self.store.insert(name, t))
    }

    fn affine(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Affine> {
        Ok(Affine {
            w: self.param(&format!("{name}.weight"), &[fan_in, fan_out], Init::Glorot)?,
            b: self.param(&format!("{name}.bias"), &[fan_out], Init::Zeros)?,
        })
    }

    fn norm(&mut self, name: &str, dim: usize) -> Result<(ParamId, ParamId)> {
        Ok((
            self.param(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            self.param(&format!("{name}.beta"), &[dim], Init::Zeros)?,
        ))
    }
}

/// Row layout of a packed batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packed {
    /// One segment per sequence, `__CLS__` included.
    pub segments: Vec<Segment>,
    /// Row of each sequence's `__CLS__` position.
    pub cls_rows: Vec<usize>,
    /// Rows of every non-`__CLS__` position, sequence by sequence.
    pub token_rows: Vec<usize>,
}

impl Packed {
    pub fn new(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut segments = Vec::new();
        let mut cls_rows = Vec::new();
        let mut token_rows = Vec::new();
        let mut start = 0;
        for len in lengths {
            segments.push(Segment { start, len });
            token_rows.extend(start..start + len - 1);
            cls_rows.push(start + len - 1);
            start += len;
        }
        Self {
            segments,
            cls_rows,
            token_rows,
        }
    }

    pub fn rows(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    /// Number of non-`__CLS__` positions of sequence `i`.
    pub fn tokens_in(&self, i: usize) -> usize {
        self.segments[i].len - 1
    }
}

/// Result of a forward pass over a packed batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Transformer outputs `[N, D]`.
    pub sequence: Var,
    /// Outputs at `__CLS__`, `[batch, D]`.
    pub cls: Var,
    /// CRF emission scores of the non-`__CLS__` positions, `[N - batch, num_tags]`.
    pub emissions: Var,
    pub packed: Packed,
}

#[derive(Debug, Clone)]
pub struct DietModel {
    config: ModelConfig,
    dims: ModelDims,
    params: ParamStore,
    ids: Ids,
}

impl DietModel {
    /// A freshly initialized model. CRF transitions start at zero.
    pub fn new(config: ModelConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let ids = Self::layout(
            &config,
            &dims,
            &mut params,
            Some(ChaCha8Rng::seed_from_u64(seed)),
        )?;
        Ok(Self {
            config,
            dims,
            params,
            ids,
        })
    }

    /// Rebuilds a model around saved parameters, checking every name and shape.
    pub fn from_params(
        config: ModelConfig,
        dims: ModelDims,
        mut params: ParamStore,
    ) -> Result<Self> {
        let ids = Self::layout(&config, &dims, &mut params, None)?;
        if params.len() != count_params(&config, &dims) {
            return Err(DietError::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                count_params(&config, &dims),
                params.len()
            )));
        }
        Ok(Self {
            config,
            dims,
            params,
            ids,
        })
    }

    fn layout(
        config: &ModelConfig,
        dims: &ModelDims,
        store: &mut ParamStore,
        rng: Option<ChaCha8Rng>,
    ) -> Result<Ids> {
        config.validate()?;
        let sparse_dim = dims.sparse_dim.filter(|_| config.use_sparse);
        if sparse_dim.is_none() && dims.dense_dim.is_none() {
            return Err(DietError::Config(
                "the model has neither sparse nor dense inputs".into(),
            ));
        }
        if dims.num_intents == 0 {
            return Err(DietError::Config("empty intent inventory".into()));
        }
        let d = config.transformer_dim;
        let e = config.embed_dim;
        let mut b = Builder { store, rng };
        let proj = projection_dim(config, dims);
        let sparse = sparse_dim
            .map(|s| b.affine("sparse_projection", s, proj))
            .transpose()?;
        let merged_in = sparse.map_or(0, |_| proj) + dims.dense_dim.unwrap_or(0);
        let merge = b.affine("merge", merged_in, d)?;
        let mask = b.param("mask_vector", &[1, d], Init::Glorot)?;
        let mut layers = Vec::new();
        for l in 0..config.num_layers {
            let p = |n: &str| format!("layer{l}.{n}");
            layers.push(Layer {
                query: b.affine(&p("query"), d, d)?,
                key: b.affine(&p("key"), d, d)?,
                value: b.affine(&p("value"), d, d)?,
                out: b.affine(&p("attention_out"), d, d)?,
                relative: b.param(
                    &p("relative_keys"),
                    &[2 * config.max_relative_position + 1, config.head_dim()],
                    Init::Glorot,
                )?,
                norm1: b.norm(&p("norm1"), d)?,
                ffn1: b.affine(&p("ffn1"), d, config.ffn_dim)?,
                ffn2: b.affine(&p("ffn2"), config.ffn_dim, d)?,
                norm2: b.norm(&p("norm2"), d)?,
            });
        }
        Ok(Ids {
            sparse,
            merge,
            mask,
            layers,
            emission: b.affine("emission", d, dims.num_tags)?,
            transitions: b.param(
                "crf_transitions",
                &[dims.num_tags, dims.num_tags],
                Init::Zeros,
            )?,
            cls_embed: b.affine("embed_cls", d, e)?,
            intent_table: b.param("embed_intent", &[dims.num_intents, e], Init::Glorot)?,
            mask_embed: b.affine("embed_mask_output", d, e)?,
            token_embed: b.affine("embed_token", d, e)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn transitions_id(&self) -> ParamId {
        self.ids.transitions
    }

    pub fn mask_vector_id(&self) -> ParamId {
        self.ids.mask
    }

    pub fn intent_table_id(&self) -> ParamId {
        self.ids.intent_table
    }

    /// Ids of parameters used only by the entity head.
    pub fn entity_head_ids(&self) -> Vec<ParamId> {
        vec![
            self.ids.emission.w,
            self.ids.emission.b,
            self.ids.transitions,
        ]
    }

    /// Ids of parameters used only by the intent head.
    pub fn intent_head_ids(&self) -> Vec<ParamId> {
        vec![
            self.ids.cls_embed.w,
            self.ids.cls_embed.b,
            self.ids.intent_table,
        ]
    }

    /// Ids of parameters used only by the mask head.
    pub fn mask_head_ids(&self) -> Vec<ParamId> {
        let (m, t) = (self.ids.mask_embed, self.ids.token_embed);
        vec![self.ids.mask, m.w, m.b, t.w, t.b]
    }

    fn affine(g: &mut Graph<'_>, x: Var, a: Affine) -> Result<Var> {
        let w = g.param(a.w);
        let b = g.param(a.b);
        let m = g.matmul(x, w)?;
        Ok(g.add_row(m, b)?)
    }

    /// Merged pre-transformer features `[N, D]` of a packed batch.
    pub fn embed<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        batch: &[TokenFeatures],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Packed)> {
        if batch.iter().any(|f| f.is_empty()) {
            return Err(DietError::Invalid(
                "feature sequence without a __CLS__ position".into(),
            ));
        }
        let packed = Packed::new(batch.iter().map(TokenFeatures::len));
        let mut parts = Vec::new();
        if let Some(proj) = self.ids.sparse {
            let mut rows = Vec::with_capacity(packed.rows());
            for f in batch {
                let sets = f
                    .sparse
                    .as_ref()
                    .ok_or_else(|| DietError::Invalid("model expects sparse features".into()))?;
                if sets.len() != f.len() {
                    return Err(DietError::Invalid(
                        "sparse feature rows do not match tokens".into(),
                    ));
                }
                rows.extend(sparse_activations(
                    sets,
                    self.config.sparse_dropout,
                    mode.is_train(),
                    rng,
                ));
            }
            let w = g.param(proj.w);
            let b = g.param(proj.b);
            let m = g.sparse_matmul(rows, w)?;
            parts.push(g.add_row(m, b)?);
        }
        if let Some(dim) = self.dims.dense_dim {
            let mut data = Vec::with_capacity(packed.rows() * dim);
            for f in batch {
                let dense = f
                    .dense
                    .as_ref()
                    .ok_or_else(|| DietError::Invalid("model expects dense features".into()))?;
                if dense.len() != f.len() {
                    return Err(DietError::Invalid(
                        "dense feature rows do not match tokens".into(),
                    ));
                }
                for v in dense {
                    if v.len() != dim {
                        return Err(diet_autograd::Error::Shape {
                            op: "dense_features",
                            left: vec![dim],
                            right: vec![v.len()],
                        }
                        .into());
                    }
                    data.extend_from_slice(v);
                }
            }
            parts.push(g.constant(Tensor::new(vec![packed.rows(), dim], data)?));
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_cols(&parts)?
        };
        let merged = Self::affine(g, x, self.ids.merge)?;
        Ok((merged, packed))
    }

    /// Runs the transformer stack over merged features.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        packed: &Packed,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let c = &self.config;
        let drop = if mode.is_train() {
            c.transformer_dropout
        } else {
            0.0
        };
        let att_drop = if mode.is_train() {
            c.attention_dropout
        } else {
            0.0
        };
        let shape = AttentionShape {
            heads: c.num_heads,
            head_dim: c.head_dim(),
            clip: c.max_relative_position,
        };
        let mut h = x;
        for layer in &self.ids.layers {
            let q = Self::affine(g, h, layer.query)?;
            let k = Self::affine(g, h, layer.key)?;
            let v = Self::affine(g, h, layer.value)?;
            let rel = g.param(layer.relative);
            let ctx = relative_attention(g, q, k, v, rel, &packed.segments, shape, att_drop, rng)?;
            let att = Self::affine(g, ctx, layer.out)?;
            let att = g.dropout(att, drop, rng)?;
            let res = g.add(h, att)?;
            let (gamma, beta) = (g.param(layer.norm1.0), g.param(layer.norm1.1));
            let h1 = g.layer_norm(res, gamma, beta, c.layer_norm_eps)?;
            let f = Self::affine(g, h1, layer.ffn1)?;
            let f = match c.ffn_activation {
                Activation::Relu => g.relu(f)?,
                Activation::Gelu => g.gelu(f)?,
            };
            let f = Self::affine(g, f, layer.ffn2)?;
            let f = g.dropout(f, drop, rng)?;
            let res = g.add(h1, f)?;
            let (gamma, beta) = (g.param(layer.norm2.0), g.param(layer.norm2.1));
            h = g.layer_norm(res, gamma, beta, c.layer_norm_eps)?;
        }
        Ok(h)
    }

    /// CRF emission scores for the non-`__CLS__` rows.
    pub fn emissions(&self, g: &mut Graph<'_>, sequence: Var, packed: &Packed) -> Result<Var> {
        let tokens = g.gather_rows(sequence, &packed.token_rows)?;
        Self::affine(g, tokens, self.ids.emission)
    }

    /// Transformer outputs, `__CLS__` outputs and emissions, without masking.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        batch: &[TokenFeatures],
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let (merged, packed) = self.embed(g, batch, mode, rng)?;
        self.forward_from(g, merged, packed, mode, rng)
    }

    /// Forward pass starting from (possibly corrupted) merged features.
    pub fn forward_from<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        merged: Var,
        packed: Packed,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let sequence = self.encode(g, merged, &packed, mode, rng)?;
        let cls = g.gather_rows(sequence, &packed.cls_rows)?;
        let emissions = self.emissions(g, sequence, &packed)?;
        Ok(ForwardOutput {
            sequence,
            cls,
            emissions,
            packed,
        })
    }

    /// `E_cls(a_cls)`, `[batch, embed_dim]`.
    pub fn embed_cls(&self, g: &mut Graph<'_>, cls: Var) -> Result<Var> {
        Self::affine(g, cls, self.ids.cls_embed)
    }

    /// `E_intent` rows for the given intent indices.
    pub fn embed_intents(&self, g: &mut Graph<'_>, intents: &[usize]) -> Result<Var> {
        let table = g.param(self.ids.intent_table);
        Ok(g.gather_rows(table, intents)?)
    }

    /// `E_maskout` of transformer outputs.
    pub fn embed_mask_output(&self, g: &mut Graph<'_>, outputs: Var) -> Result<Var> {
        Self::affine(g, outputs, self.ids.mask_embed)
    }

    /// `E_token` of merged input features.
    pub fn embed_token(&self, g: &mut Graph<'_>, merged: Var) -> Result<Var> {
        Self::affine(g, merged, self.ids.token_embed)
    }

    /// Similarities between every `__CLS__` output and every intent,
    /// `[batch, num_intents]`.
    pub fn intent_scores(&self, g: &mut Graph<'_>, cls: Var) -> Result<Var> {
        let h = self.embed_cls(g, cls)?;
        let table = g.param(self.ids.intent_table);
        let t = g.transpose(table)?;
        Ok(g.matmul(h, t)?)
    }
}

fn projection_dim(config: &ModelConfig, dims: &ModelDims) -> usize {
    config
        .sparse_projection_dim
        .or(dims.dense_dim)
        .unwrap_or(DEFAULT_SPARSE_PROJECTION)
}

fn count_params(config: &ModelConfig, dims: &ModelDims) -> usize {
    let sparse = usize::from(config.use_sparse && dims.sparse_dim.is_some());
    2 * sparse + 2 + 1 + config.num_layers * 17 + 2 + 1 + 2 + 1 + 2 + 2
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
