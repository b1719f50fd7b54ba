//! The scoring network: embeddings, stacked BiLSTM, four MLP projections
//! and the ARC / REL biaffine scorers.

mod embedding;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{DatasetProfile, LabelId};
use crate::tensor::{Graph, Mode, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

pub use embedding::{EmbeddingMode, ExternalVectors, Vocab, UNK};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("cannot encode an empty token sequence")]
    EmptyInput,
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("external vectors: {0}")]
    Vectors(String),
}

/// Network shape and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Hidden size per LSTM direction.
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub mlp_dim: usize,
    pub dropout: f64,
    pub embedding: EmbeddingMode,
    /// Replace both biaffine scorers with plain affine maps over the
    /// concatenated pair features.
    pub use_biaffine: bool,
    /// Disable the ARC scorer and treat NONE as an ordinary REL label.
    pub use_arc_module: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 100,
            lstm_hidden: 400,
            lstm_layers: 2,
            mlp_dim: 300,
            dropout: 0.33,
            embedding: EmbeddingMode::Lookup,
            use_biaffine: true,
            use_arc_module: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.embed_dim == 0 || self.lstm_hidden == 0 || self.mlp_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.lstm_layers == 0 {
            return bad("at least one LSTM layer is required");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Width of the REL label axis for a profile.
    pub fn rel_label_count(&self, profile: &DatasetProfile) -> usize {
        if self.use_arc_module {
            profile.relation_count()
        } else {
            profile.len()
        }
    }
}

/// Scores for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet<F> {
    pub n: usize,
    /// Arc logits, row-major `n x n`; absent when the ARC module is disabled.
    pub s_arc: Option<Vec<F>>,
    /// Label logits, `n x n x labels`.
    pub s_rel: Vec<F>,
    pub labels: usize,
    /// Whether REL slot 0 is NONE (no-ARC ablation).
    pub includes_none: bool,
}

impl<F: Scalar> ScoreSet<F> {
    pub fn arc(&self, i: usize, j: usize) -> Option<F> {
        self.s_arc.as_ref().map(|s| s[i * self.n + j])
    }

    pub fn rel(&self, i: usize, j: usize) -> &[F] {
        let base = (i * self.n + j) * self.labels;
        &self.s_rel[base..base + self.labels]
    }

    /// Profile label id of REL slot `k`.
    pub fn label_of_slot(&self, k: usize) -> LabelId {
        if self.includes_none {
            LabelId(k as u8)
        } else {
            LabelId(k as u8 + 1)
        }
    }

    /// REL slot of a profile label id, if it has one.
    pub fn slot_of_label(&self, id: LabelId) -> Option<usize> {
        if self.includes_none {
            Some(id.index())
        } else {
            id.index().checked_sub(1)
        }
    }
}

/// Graph handles for the two score tensors.
#[derive(Debug, Clone, Copy)]
pub struct ScoreVars {
    pub n: usize,
    /// `n x n`
    pub arc: Option<Var>,
    /// `n x n x L`
    pub rel: Var,
}

#[derive(Debug, Clone)]
struct LstmParams {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct AffineParams {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct PairScorerParams {
    u: Option<ParamId>,
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Option<ParamId>,
    /// `[layer][direction]`
    lstm: Vec<[LstmParams; 2]>,
    arc_dep: AffineParams,
    arc_head: AffineParams,
    rel_dep: AffineParams,
    rel_head: AffineParams,
    arc: Option<PairScorerParams>,
    rel: PairScorerParams,
}

/// Projections feeding the two scorers, each `n x mlp_dim`.
#[derive(Debug, Clone, Copy)]
pub struct Projections {
    pub arc_dep: Var,
    pub arc_head: Var,
    pub rel_dep: Var,
    pub rel_head: Var,
}

#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    config: ModelConfig,
    profile: DatasetProfile,
    vocab: Vocab,
    external: Option<ExternalVectors>,
    params: ParamStore<F>,
    layout: Layout,
}

/// Parameter names in registration order for a given config.
fn expected_shapes(
    config: &ModelConfig,
    profile: &DatasetProfile,
    vocab_len: usize,
) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let h = config.lstm_hidden;
    if config.embedding == EmbeddingMode::Lookup {
        out.push(("embed.table".to_string(), vec![vocab_len, config.embed_dim]));
    }
    for layer in 0..config.lstm_layers {
        let input = if layer == 0 { config.embed_dim } else { 2 * h };
        for dir in ["fwd", "bwd"] {
            let p = format!("lstm.{layer}.{dir}");
            out.push((format!("{p}.w_ih"), vec![input, 4 * h]));
            out.push((format!("{p}.w_hh"), vec![h, 4 * h]));
            out.push((format!("{p}.bias"), vec![4 * h]));
        }
    }
    for name in ["arc_dep", "arc_head", "rel_dep", "rel_head"] {
        out.push((format!("mlp.{name}.w"), vec![2 * h, config.mlp_dim]));
        out.push((format!("mlp.{name}.b"), vec![config.mlp_dim]));
    }
    let d = config.mlp_dim;
    let mut scorer = |name: &str, labels: usize| {
        if config.use_biaffine {
            out.push((format!("{name}.u"), vec![d, labels, d]));
        }
        out.push((format!("{name}.w"), vec![labels, 2 * d]));
        out.push((format!("{name}.b"), vec![labels]));
    };
    if config.use_arc_module {
        scorer("arc", 1);
    }
    scorer("rel", config.rel_label_count(profile));
    out
}

fn glorot<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<F> {
    let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.gen_range(-limit..limit))).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

impl<F: Scalar> Model<F> {
    /// Fresh model with seeded initialization.
    pub fn new(
        config: ModelConfig,
        profile: DatasetProfile,
        vocab: Vocab,
        external: Option<ExternalVectors>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if let EmbeddingMode::External { .. } = config.embedding {
            match &external {
                Some(v) if v.dim() == config.embed_dim => {}
                Some(v) => {
                    return Err(ModelError::Vectors(format!(
                        "vectors have {} dims, config expects {}",
                        v.dim(),
                        config.embed_dim
                    )))
                }
                None => return Err(ModelError::Vectors("no vectors supplied".into())),
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("normal");
        let mut params = ParamStore::new();
        for (name, shape) in expected_shapes(&config, &profile, vocab.len()) {
            let t = if name.ends_with(".b") || name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name.ends_with(".u") {
                let n = shape.iter().product();
                let data = (0..n).map(|_| F::of(normal.sample(&mut rng))).collect();
                Tensor::from_vec(&shape, data).expect("shape")
            } else if name == "embed.table" {
                let n = shape.iter().product();
                let data = (0..n).map(|_| F::of(normal.sample(&mut rng) * 10.0)).collect();
                Tensor::from_vec(&shape, data).expect("shape")
            } else {
                glorot(&mut rng, &shape)
            };
            params.add(&name, t);
        }
        Self::assemble(config, profile, vocab, external, params)
    }

    /// Wraps existing parameters, checking every name and shape.
    pub fn from_params(
        config: ModelConfig,
        profile: DatasetProfile,
        vocab: Vocab,
        external: Option<ExternalVectors>,
        params: ParamStore<F>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = expected_shapes(&config, &profile, vocab.len());
        if expected.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (_, got_name, t)) in expected.iter().zip(params.iter()) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Self::assemble(config, profile, vocab, external, params)
    }

    fn assemble(
        config: ModelConfig,
        profile: DatasetProfile,
        vocab: Vocab,
        external: Option<ExternalVectors>,
        params: ParamStore<F>,
    ) -> Result<Self, ModelError> {
        let id = |n: &str| params.id(n);
        let affine = |n: &str| -> Result<AffineParams, TensorError> {
            Ok(AffineParams {
                w: id(&format!("mlp.{n}.w"))?,
                b: id(&format!("mlp.{n}.b"))?,
            })
        };
        let scorer = |n: &str| -> Result<PairScorerParams, TensorError> {
            Ok(PairScorerParams {
                u: if config.use_biaffine {
                    Some(id(&format!("{n}.u"))?)
                } else {
                    None
                },
                w: id(&format!("{n}.w"))?,
                b: id(&format!("{n}.b"))?,
            })
        };
        let mut lstm = Vec::new();
        for layer in 0..config.lstm_layers {
            let dir = |d: &str| -> Result<LstmParams, TensorError> {
                let p = format!("lstm.{layer}.{d}");
                Ok(LstmParams {
                    w_ih: id(&format!("{p}.w_ih"))?,
                    w_hh: id(&format!("{p}.w_hh"))?,
                    bias: id(&format!("{p}.bias"))?,
                })
            };
            lstm.push([dir("fwd")?, dir("bwd")?]);
        }
        let layout = Layout {
            embed: if config.embedding == EmbeddingMode::Lookup {
                Some(id("embed.table")?)
            } else {
                None
            },
            lstm,
            arc_dep: affine("arc_dep")?,
            arc_head: affine("arc_head")?,
            rel_dep: affine("rel_dep")?,
            rel_head: affine("rel_head")?,
            arc: if config.use_arc_module {
                Some(scorer("arc")?)
            } else {
                None
            },
            rel: scorer("rel")?,
        };
        Ok(Model {
            config,
            profile,
            vocab,
            external,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn profile(&self) -> &DatasetProfile {
        &self.profile
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn external(&self) -> Option<&ExternalVectors> {
        self.external.as_ref()
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn rel_labels(&self) -> usize {
        self.config.rel_label_count(&self.profile)
    }

    /// Converts the parameters to another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            profile: self.profile.clone(),
            vocab: self.vocab.clone(),
            external: self.external.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn dropout<R: Rng>(&self, g: &mut Graph<'_, F>, x: Var, rng: &mut R) -> Result<Var, ModelError> {
        Ok(g.dropout(x, self.config.dropout, rng)?)
    }

    /// Token embeddings, `n x embed_dim`.
    pub fn embed(&self, g: &mut Graph<'_, F>, tokens: &[String]) -> Result<Var, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        match (self.layout.embed, &self.external) {
            (Some(table), _) => {
                let ids: Vec<usize> = tokens.iter().map(|t| self.vocab.id(t)).collect();
                let table = g.param(table);
                Ok(g.gather(table, &ids)?)
            }
            (None, Some(vectors)) => {
                let d = vectors.dim();
                let mut data = Vec::with_capacity(tokens.len() * d);
                for t in tokens {
                    data.extend(vectors.get(t).iter().map(|&x| F::of(x as f64)));
                }
                Ok(g.constant(Tensor::from_vec(&[tokens.len(), d], data)?))
            }
            (None, None) => Err(ModelError::Vectors("no vectors supplied".into())),
        }
    }

    fn lstm_direction(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        p: &LstmParams,
        reverse: bool,
    ) -> Result<Var, ModelError> {
        let w_ih = g.param(p.w_ih);
        let w_hh = g.param(p.w_hh);
        let bias = g.param(p.bias);
        let xp = g.matmul(x, w_ih)?;
        let xp = g.add_row(xp, bias)?;

        Ok(g.lstm_seq(xp, w_hh, reverse)?)
    }

    /// Stacked BiLSTM encoding of a token sequence, `n x 2·lstm_hidden`.
    pub fn encode<R: Rng>(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &[String],
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        let x = self.embed(g, tokens)?;
        self.encode_embedded(g, x, rng)
    }

    /// Encodes precomputed `n x embed_dim` inputs (e.g. contextual vectors).
    pub fn encode_embedded<R: Rng>(
        &self,
        g: &mut Graph<'_, F>,
        embedded: Var,
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        let shape = g.shape(embedded);
        if shape.len() != 2 || shape[1] != self.config.embed_dim {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "encode",
                left: shape.to_vec(),
                right: vec![self.config.embed_dim],
            }));
        }
        if shape[0] == 0 {
            return Err(ModelError::EmptyInput);
        }
        let mut x = embedded;
        for layer in &self.layout.lstm {
            x = self.dropout(g, x, rng)?;
            let fwd = self.lstm_direction(g, x, &layer[0], false)?;
            let bwd = self.lstm_direction(g, x, &layer[1], true)?;
            x = g.concat_cols(fwd, bwd)?;
        }
        self.dropout(g, x, rng)
    }

    fn mlp<R: Rng>(
        &self,
        g: &mut Graph<'_, F>,
        h: Var,
        p: &AffineParams,
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        let w = g.param(p.w);
        let b = g.param(p.b);
        let z = g.matmul(h, w)?;
        let z = g.add_row(z, b)?;
        let a = g.tanh(z)?;
        self.dropout(g, a, rng)
    }

    /// The four independent MLP projections of the encoder output.
    pub fn project<R: Rng>(
        &self,
        g: &mut Graph<'_, F>,
        h: Var,
        rng: &mut R,
    ) -> Result<Projections, ModelError> {
        Ok(Projections {
            arc_dep: self.mlp(g, h, &self.layout.arc_dep, rng)?,
            arc_head: self.mlp(g, h, &self.layout.arc_head, rng)?,
            rel_dep: self.mlp(g, h, &self.layout.rel_dep, rng)?,
            rel_head: self.mlp(g, h, &self.layout.rel_head, rng)?,
        })
    }

    fn pair_scores(
        &self,
        g: &mut Graph<'_, F>,
        dep: Var,
        head: Var,
        p: &PairScorerParams,
    ) -> Result<Var, ModelError> {
        let w = g.param(p.w);
        let b = g.param(p.b);
        let linear = g.concat_linear(dep, head, w, b)?;
        match p.u {
            Some(u) => {
                let u = g.param(u);
                let bil = g.bilinear(dep, u, head)?;
                Ok(g.add(bil, linear)?)
            }
            None => Ok(linear),
        }
    }

    /// Arc logits `n x n`: entry (i, j) scores an arc from token i to j.
    /// `None` when the ARC module is disabled.
    pub fn score_arc(
        &self,
        g: &mut Graph<'_, F>,
        dep: Var,
        head: Var,
    ) -> Result<Option<Var>, ModelError> {
        let Some(p) = &self.layout.arc else {
            return Ok(None);
        };
        let s = self.pair_scores(g, dep, head, p)?;
        let n = g.shape(s)[0];
        Ok(Some(g.reshape(s, &[n, n])?))
    }

    /// Label logits `n x n x L`.
    pub fn score_rel(&self, g: &mut Graph<'_, F>, dep: Var, head: Var) -> Result<Var, ModelError> {
        self.pair_scores(g, dep, head, &self.layout.rel)
    }

    /// encode → project → score.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &[String],
        rng: &mut R,
    ) -> Result<ScoreVars, ModelError> {
        let h = self.encode(g, tokens, rng)?;
        let p = self.project(g, h, rng)?;
        let arc = self.score_arc(g, p.arc_dep, p.arc_head)?;
        let rel = self.score_rel(g, p.rel_dep, p.rel_head)?;
        Ok(ScoreVars {
            n: tokens.len(),
            arc,
            rel,
        })
    }

    /// Eval-mode scores for one window.
    pub fn score(&self, tokens: &[String]) -> Result<ScoreSet<F>, ModelError> {
        let mut g = Graph::new(&self.params, Mode::Eval);
        // Eval mode never draws from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vars = self.forward(&mut g, tokens, &mut rng)?;
        Ok(ScoreSet {
            n: vars.n,
            s_arc: vars.arc.map(|a| g.value(a).to_vec()),
            s_rel: g.value(vars.rel).to_vec(),
            labels: self.rel_labels(),
            includes_none: !self.config.use_arc_module,
        })
    }
}
