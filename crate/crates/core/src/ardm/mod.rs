//! The toy autoregressive diffusion model.
//!
//! A causal context encoder reads the prompt and the clean history and
//! produces one context vector per position; a small denoiser head maps
//! `(context, noisy token, time)` to a velocity prediction. Row `n - 1` of
//! the encoder output is the context for token `n`: row 0 is the prompt
//! embedding (or the learned null embedding), row `m` embeds token `m`.

mod export;
mod loss;
mod sampler;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{forward, gaussian, Axis, Graph, GraphBuilder, NodeId, ParamSet, Rng, Tensor};

pub use export::{read_sequences, write_sequences, SequenceRecord};
pub use loss::{draw_token_noise, pretrain_loss, pretrain_loss_value, TokenNoise};
pub use sampler::{sample_batch, sample_sequence, sample_sequence_traced, ChainState, SAMPLING_CHUNK};
pub use train::{pretrain, DataSource, PretrainConfig, PretrainReport};

/// A prompt and its `N x d` matrix of clean tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub prompt: Vec<f64>,
    pub tokens: Tensor,
}

impl Sequence {
    pub fn new(prompt: Vec<f64>, tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(Error::shape(
                "sequence",
                format!("tokens must be N x d, got {:?}", tokens.shape()),
            ));
        }
        if !tokens.all_finite() || prompt.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sequence contains non-finite values"));
        }
        Ok(Self { prompt, tokens })
    }

    pub fn from_rows(prompt: Vec<f64>, rows: &[Vec<f64>], dim: usize) -> Result<Self> {
        Self::new(prompt, Tensor::from_rows(rows, dim)?)
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Token `n`, zero-based.
    pub fn token(&self, n: usize) -> &[f64] {
        self.tokens.row(n)
    }

    pub fn validate(&self, max_len: usize) -> Result<()> {
        if self.is_empty() || self.len() > max_len {
            return Err(Error::invalid(format!(
                "sequence length {} outside [1, {max_len}]",
                self.len()
            )));
        }
        Ok(())
    }

    /// All tokens but the last, as the encoder's history input.
    pub(crate) fn history(&self) -> Tensor {
        let n = self.len().saturating_sub(1);
        let d = self.dim();
        Tensor::matrix(n, d, self.tokens.data()[..n * d].to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArdmArch {
    /// Token dimension.
    pub d: usize,
    /// Prompt dimension.
    pub d_c: usize,
    /// Hidden width of encoder and head.
    pub d_h: usize,
    pub encoder_depth: usize,
    pub head_depth: usize,
    pub time_dim: usize,
    pub max_len: usize,
}

impl Default for ArdmArch {
    fn default() -> Self {
        Self {
            d: 2,
            d_c: 4,
            d_h: 64,
            encoder_depth: 2,
            head_depth: 3,
            time_dim: 16,
            max_len: 64,
        }
    }
}

impl ArdmArch {
    /// Token width 256 with otherwise default sizes.
    pub fn wide_tokens() -> Self {
        Self {
            d: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_c == 0 || self.d_h == 0 || self.head_depth == 0 || self.max_len == 0 {
            return Err(Error::invalid(format!("degenerate architecture {self:?}")));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::invalid("time embedding width must be even and positive"));
        }
        Ok(())
    }
}

/// Input slots of the encoder and the full training graph.
pub(crate) const SLOT_PROMPT: usize = 0;
pub(crate) const SLOT_HISTORY: usize = 1;
pub(crate) const SLOT_XT: usize = 2;
pub(crate) const SLOT_T: usize = 3;

#[derive(Clone, Debug)]
struct Graphs {
    encoder: [Graph; 2],
    full: [Graph; 2],
    head: Graph,
}

fn build_encoder(b: &mut GraphBuilder, arch: &ArdmArch, conditioned: bool) -> NodeId {
    b.push_scope("encoder");
    let prompt_row = if conditioned {
        let c = b.input("prompt_in", SLOT_PROMPT, arch.d_c);
        b.affine("prompt", c)
    } else {
        b.param("null")
    };
    let hist = b.input("history_in", SLOT_HISTORY, arch.d);
    let tok = b.affine("token", hist);
    let mut h = b.concat("rows", &[prompt_row, tok], Axis::Rows);
    for i in 0..arch.encoder_depth {
        b.push_scope(&format!("block{i}"));
        let a = b.causal_attention("attn", h);
        let cat = b.concat("skip", &[h, a], Axis::Cols);
        let m = b.affine("mix", cat);
        let s = b.silu("act", m);
        h = b.layer_norm("norm", s);
        b.pop_scope();
    }
    b.pop_scope();
    h
}

fn build_head(b: &mut GraphBuilder, arch: &ArdmArch, context: NodeId, xt_slot: usize, t_slot: usize) -> NodeId {
    b.push_scope("head");
    let xt = b.input("xt_in", xt_slot, arch.d);
    let t = b.input("t_in", t_slot, 1);
    let te = b.time_embedding("time", t, arch.time_dim);
    let mut z = b.concat("features", &[context, xt, te], Axis::Cols);
    for i in 0..arch.head_depth {
        z = b.affine(&format!("layer{i}"), z);
        if i + 1 < arch.head_depth {
            z = b.silu(&format!("act{i}"), z);
        }
    }
    b.pop_scope();
    z
}

impl Graphs {
    fn new(arch: &ArdmArch) -> Self {
        let encoder = [true, false].map(|cond| {
            let mut b = GraphBuilder::new();
            let h = build_encoder(&mut b, arch, cond);
            b.finish(h, arch.d_h)
        });
        let full = [true, false].map(|cond| {
            let mut b = GraphBuilder::new();
            let h = build_encoder(&mut b, arch, cond);
            let v = build_head(&mut b, arch, h, SLOT_XT, SLOT_T);
            b.finish(v, arch.d)
        });
        let head = {
            let mut b = GraphBuilder::new();
            let ctx = b.input("context_in", 0, arch.d_h);
            let v = build_head(&mut b, arch, ctx, 1, 2);
            b.finish(v, arch.d)
        };
        Self { encoder, full, head }
    }
}

fn index(conditioned: bool) -> usize {
    if conditioned {
        0
    } else {
        1
    }
}

/// Parameters, architecture and conditioning-dropout rate of one model.
#[derive(Clone, Debug)]
pub struct ArdmModel {
    pub params: ParamSet,
    pub arch: ArdmArch,
    pub cond_dropout_p: f64,
    graphs: Graphs,
}

impl ArdmModel {
    /// Fresh model with LeCun-normal weights, zero biases and unit norm gains.
    pub fn init(arch: ArdmArch, cond_dropout_p: f64, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::new();
        let dense =
            |p: &mut ParamSet, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, scale: f64| -> Result<()> {
                let mut w = gaussian(rng, &[fan_in, fan_out]);
                w.scale(scale / (fan_in as f64).sqrt());
                p.insert(format!("{name}.weight"), w)?;
                p.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))
            };
        let (d, dc, dh) = (arch.d, arch.d_c, arch.d_h);
        dense(&mut params, rng, "encoder.prompt", dc, dh, 1.0)?;
        dense(&mut params, rng, "encoder.token", d, dh, 1.0)?;
        for i in 0..arch.encoder_depth {
            let base = format!("encoder.block{i}");
            for proj in ["query", "key", "value"] {
                let mut w = gaussian(rng, &[dh, dh]);
                w.scale(1.0 / (dh as f64).sqrt());
                params.insert(format!("{base}.attn.{proj}"), w)?;
            }
            dense(&mut params, rng, &format!("{base}.mix"), 2 * dh, dh, 1.0)?;
            params.insert(format!("{base}.norm.gain"), Tensor::filled(&[dh], 1.0))?;
            params.insert(format!("{base}.norm.shift"), Tensor::zeros(&[dh]))?;
        }
        params.insert("encoder.null", gaussian(rng, &[1, dh]))?;
        let mut fan_in = dh + d + arch.time_dim;
        for i in 0..arch.head_depth {
            let last = i + 1 == arch.head_depth;
            let out = if last { d } else { dh };
            dense(
                &mut params,
                rng,
                &format!("head.layer{i}"),
                fan_in,
                out,
                if last { 0.1 } else { 1.0 },
            )?;
            fan_in = out;
        }
        Self::from_params(params, arch, cond_dropout_p)
    }

    /// Wraps existing parameters, checking they match `arch`.
    pub fn from_params(params: ParamSet, arch: ArdmArch, cond_dropout_p: f64) -> Result<Self> {
        arch.validate()?;
        if !(0.0..=1.0).contains(&cond_dropout_p) {
            return Err(Error::invalid(format!(
                "dropout probability {cond_dropout_p} outside [0, 1]"
            )));
        }
        let graphs = Graphs::new(&arch);
        let mut needed: Vec<String> = graphs.full.iter().flat_map(|g| g.param_paths()).collect();
        needed.sort();
        needed.dedup();
        let have: Vec<String> = params.paths().map(str::to_string).collect();
        if needed != have {
            return Err(Error::shape("model", "parameter paths do not match the architecture"));
        }
        Ok(Self {
            params,
            arch,
            cond_dropout_p,
            graphs,
        })
    }

    /// Frozen deep copy, used as the reference policy.
    pub fn frozen_copy(&self) -> Self {
        Self {
            params: self.params.frozen_copy(),
            ..self.clone()
        }
    }

    pub fn same_architecture(&self, other: &ArdmModel) -> bool {
        self.arch == other.arch && self.params.same_layout(&other.params)
    }

    pub fn encoder_graph(&self, conditioned: bool) -> &Graph {
        &self.graphs.encoder[index(conditioned)]
    }

    /// Encoder followed by the head: inputs `[prompt, history, x_t, t]`.
    pub fn full_graph(&self, conditioned: bool) -> &Graph {
        &self.graphs.full[index(conditioned)]
    }

    pub fn head_graph(&self) -> &Graph {
        &self.graphs.head
    }

    pub(crate) fn check_prompt(&self, prompt: &[f64], conditioned: bool) -> Result<()> {
        if conditioned && prompt.len() != self.arch.d_c {
            return Err(Error::invalid(format!(
                "prompt has {} values, model expects {}",
                prompt.len(),
                self.arch.d_c
            )));
        }
        Ok(())
    }

    pub(crate) fn prompt_tensor(&self, prompt: &[f64]) -> Tensor {
        if prompt.len() == self.arch.d_c {
            Tensor::matrix(1, self.arch.d_c, prompt.to_vec())
        } else {
            Tensor::zeros(&[1, self.arch.d_c])
        }
    }

    /// Context vectors for every position: row `n - 1` conditions token `n`
    /// and depends only on the prompt and tokens before `n`.
    pub fn encode_context(&self, seq: &Sequence, conditioned: bool) -> Result<Tensor> {
        self.check_prompt(&seq.prompt, conditioned)?;
        let inputs = [self.prompt_tensor(&seq.prompt), seq.history()];
        let (h, _) = forward(&self.params, self.encoder_graph(conditioned), &inputs)?;
        Ok(h)
    }

    /// Context for the next token after `history` (`k x d`, possibly empty).
    pub(crate) fn next_context(&self, prompt: &[f64], history: &[f64], conditioned: bool) -> Result<Vec<f64>> {
        self.check_prompt(prompt, conditioned)?;
        let k = history.len() / self.arch.d;
        let inputs = [
            self.prompt_tensor(prompt),
            Tensor::matrix(k, self.arch.d, history.to_vec()),
        ];
        let (h, _) = forward(&self.params, self.encoder_graph(conditioned), &inputs)?;
        Ok(h.row(h.rows() - 1).to_vec())
    }

    /// Velocity predictions for rows of `(context, x_t, t)`.
    pub fn denoise_v(&self, context: &Tensor, xt: &Tensor, t: &[f64]) -> Result<Tensor> {
        if t.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("diffusion time outside [0, 1]"));
        }
        let tt = Tensor::matrix(t.len(), 1, t.to_vec());
        let (v, _) = forward(&self.params, self.head_graph(), &[context.clone(), xt.clone(), tt])?;
        Ok(v)
    }

    pub(crate) fn full_inputs(&self, seq: &Sequence, xt: &Tensor, t: &[f64]) -> [Tensor; 4] {
        [
            self.prompt_tensor(&seq.prompt),
            seq.history(),
            xt.clone(),
            Tensor::matrix(t.len(), 1, t.to_vec()),
        ]
    }
}

/// Teacher-forced velocity predictions for every token of a sequence.
pub trait VelocityModel: Sync {
    fn token_dim(&self) -> usize;

    /// `xt` is `N x d`, `t` has one time per token; row `n` is predicted from
    /// the prompt, the clean tokens before `n`, and `xt[n]`.
    fn predict(&self, seq: &Sequence, xt: &Tensor, t: &[f64], conditioned: bool) -> Result<Tensor>;
}

impl VelocityModel for ArdmModel {
    fn token_dim(&self) -> usize {
        self.arch.d
    }

    fn predict(&self, seq: &Sequence, xt: &Tensor, t: &[f64], conditioned: bool) -> Result<Tensor> {
        self.check_prompt(&seq.prompt, conditioned)?;
        let (v, _) = forward(
            &self.params,
            self.full_graph(conditioned),
            &self.full_inputs(seq, xt, t),
        )?;
        Ok(v)
    }
}

/// Interface used by the sampling chain.
pub trait Denoiser: Sync {
    type Context: Send + Sync;

    fn token_dim(&self) -> usize;

    /// Context for the next token given the prompt and the flattened clean
    /// history (`k x d` values).
    fn context(&self, prompt: &[f64], history: &[f64], conditioned: bool) -> Result<Self::Context>;

    /// Velocities for a batch sharing one time: row `i` of the `B x d` result
    /// uses `contexts[i]` and row `i` of `xt`.
    fn velocities(&self, contexts: &[&Self::Context], xt: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl Denoiser for ArdmModel {
    type Context = Vec<f64>;

    fn token_dim(&self) -> usize {
        self.arch.d
    }

    fn context(&self, prompt: &[f64], history: &[f64], conditioned: bool) -> Result<Vec<f64>> {
        self.next_context(prompt, history, conditioned)
    }

    fn velocities(&self, contexts: &[&Vec<f64>], xt: &[f64], t: f64) -> Result<Vec<f64>> {
        let rows = contexts.len();
        let flat: Vec<f64> = contexts.iter().flat_map(|c| c.iter().copied()).collect();
        let c = Tensor::matrix(rows, self.arch.d_h, flat);
        let x = Tensor::matrix(rows, self.arch.d, xt.to_vec());
        Ok(self.denoise_v(&c, &x, &vec![t; rows])?.into_data())
    }
}
