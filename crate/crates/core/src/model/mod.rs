//! The query-based entity-object network.

mod config;
mod encoders;
mod fusion;
mod heads;
mod layers;
mod output;

pub use config::ModelConfig;
pub use encoders::{resample_matrix, sinusoid_1d, sinusoid_2d, ImageEncoder, TextEncoder};
pub use fusion::{selective_attention, GatedFusion, SelectiveOutput};
pub use heads::{EntityHead, EntityScores, RelationBoxHead, RelationBoxes};
pub use layers::{head_mean, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use output::ModelOutput;

use crate::autodiff::{Init, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Transformer encoder over the fused image memory and decoder over the learned queries.
#[derive(Debug, Clone)]
pub struct QueryTransformer {
    pub queries: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
}

pub struct TransformerVars {
    pub hq: Var,
    pub memory: Var,
    pub enc_attn: Vec<Var>,
    pub dec_self_attn: Vec<Var>,
    pub dec_cross_attn: Vec<Var>,
}

impl QueryTransformer {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let encoder = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::new(store, &format!("enc.{i}"), d, cfg.heads, cfg.ffn_dim, cfg.ln_eps, cfg.weight_init()))
            .collect::<Result<_>>()?;
        let enc_norm = LayerNorm::new(store, "enc.norm", d, cfg.ln_eps)?;
        let decoder = (0..cfg.dec_layers)
            .map(|i| DecoderLayer::new(store, &format!("dec.{i}"), d, cfg.heads, cfg.ffn_dim, cfg.ln_eps, cfg.weight_init()))
            .collect::<Result<_>>()?;
        let dec_norm = LayerNorm::new(store, "dec.norm", d, cfg.ln_eps)?;
        let queries = store.add("queries", &[cfg.queries, d], Init::Normal(cfg.query_init_std))?;
        Ok(Self {
            queries,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, memory_in: Var) -> Result<TransformerVars> {
        let mut x = memory_in;
        let mut enc_attn = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (nx, a) = layer.forward(tape, store, x)?;
            x = nx;
            enc_attn.push(a);
        }
        let memory = self.enc_norm.forward(tape, store, x)?;

        let mut y = tape.param(store, self.queries);
        let mut dec_self_attn = Vec::with_capacity(self.decoder.len());
        let mut dec_cross_attn = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (ny, maps) = layer.forward(tape, store, y, memory)?;
            y = ny;
            dec_self_attn.push(maps.self_attn);
            dec_cross_attn.push(maps.cross_attn);
        }
        let hq = self.dec_norm.forward(tape, store, y)?;
        Ok(TransformerVars {
            hq,
            memory,
            enc_attn,
            dec_self_attn,
            dec_cross_attn,
        })
    }
}

/// Tape handles for everything the loss and the inspectors need from one forward pass.
pub struct ForwardVars {
    pub h_text: Var,
    pub h_img: Var,
    pub text_out: Var,
    pub img_out: Var,
    pub hq: Var,
    pub start_scores: Var,
    pub end_scores: Var,
    pub start_logp: Var,
    pub end_logp: Var,
    pub start_dist: Var,
    pub end_dist: Var,
    pub rel_logits: Var,
    pub boxes: Var,
    pub text_block_attn: Var,
    pub selective: SelectiveOutput,
    pub gate_text: Var,
    pub gate_img: Var,
    pub transformer: TransformerVars,
    pos_img: Tensor,
}

impl ForwardVars {
    pub fn output(&self, tape: &Tape) -> ModelOutput {
        ModelOutput {
            start_dist: tape.value(self.start_dist).clone(),
            end_dist: tape.value(self.end_dist).clone(),
            rel_logits: tape.value(self.rel_logits).clone(),
            boxes: tape.value(self.boxes).clone(),
        }
    }

    pub fn state(&self, tape: &Tape) -> FusionState {
        let v = |x: Var| tape.value(x).clone();
        let text_out = v(self.text_out);
        let img_out = v(self.img_out);
        let maps = |xs: &[Var]| xs.iter().map(|&x| head_mean(tape.value(x))).collect();
        FusionState {
            text_self_attn: v(self.selective.text_weights),
            img_self_attn: v(self.selective.img_weights),
            img_to_text_cross: cross_similarity(tape.value(self.h_text), tape.value(self.h_img), &self.pos_img),
            gate_text: v(self.gate_text),
            gate_img: v(self.gate_img),
            text_block_attn: head_mean(tape.value(self.text_block_attn)),
            enc_attn: maps(&self.transformer.enc_attn),
            dec_self_attn: maps(&self.transformer.dec_self_attn),
            dec_cross_attn: maps(&self.transformer.dec_cross_attn),
            text_out,
            img_out,
            hq: v(self.hq),
            pos_img: self.pos_img.clone(),
        }
    }
}

/// Inspection snapshot of one forward pass. Multi-head maps are averaged over heads.
#[derive(Debug, Clone)]
pub struct FusionState {
    /// `(L, L)` text self-similarity weights used to read the image.
    pub text_self_attn: Tensor,
    /// `(L, L)` image self-similarity weights used to read the text.
    pub img_self_attn: Tensor,
    /// `(L, L)` image-position to text-token cross-similarity, for comparison only.
    pub img_to_text_cross: Tensor,
    pub gate_text: Tensor,
    pub gate_img: Tensor,
    pub text_block_attn: Tensor,
    pub enc_attn: Vec<Tensor>,
    pub dec_self_attn: Vec<Tensor>,
    /// Per decoder layer, `(Q, L)` query attention over memory positions.
    pub dec_cross_attn: Vec<Tensor>,
    pub text_out: Tensor,
    pub img_out: Tensor,
    pub hq: Tensor,
    pub pos_img: Tensor,
}

/// One input: `L` token ids and a `(G, G, c)` feature grid.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub tokens: &'a [usize],
    pub grid: &'a Tensor,
}

#[derive(Debug, Clone)]
pub struct Qeot {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub fuse_text: GatedFusion,
    pub fuse_img: GatedFusion,
    pub transformer: QueryTransformer,
    pub entity: EntityHead,
    pub relation: RelationBoxHead,
}

impl Qeot {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamStore::new(config.seed);
        let text = TextEncoder::new(&mut params, &config)?;
        let image = ImageEncoder::new(&mut params, &config)?;
        let fuse_text = GatedFusion::new(&mut params, "fusion.text", d, config.weight_init())?;
        let fuse_img = GatedFusion::new(&mut params, "fusion.img", d, config.weight_init())?;
        let transformer = QueryTransformer::new(&mut params, &config)?;
        let entity = EntityHead::new(&mut params, &config)?;
        let relation = RelationBoxHead::new(&mut params, &config)?;
        Ok(Self {
            config,
            params,
            text,
            image,
            fuse_text,
            fuse_img,
            transformer,
            entity,
            relation,
        })
    }

    /// Records the full forward pass on `tape` using the model's own parameters.
    pub fn forward_on(&self, tape: &mut Tape, input: ModelInput<'_>) -> Result<ForwardVars> {
        forward_with(self, &self.params, tape, input)
    }

    /// Forward pass returning plain tensors.
    pub fn forward(&self, input: ModelInput<'_>) -> Result<(ModelOutput, FusionState)> {
        let mut tape = Tape::new();
        let vars = self.forward_on(&mut tape, input)?;
        Ok((vars.output(&tape), vars.state(&tape)))
    }

    pub fn predict(&self, input: ModelInput<'_>) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let vars = self.forward_on(&mut tape, input)?;
        Ok(vars.output(&tape))
    }
}

/// Row-softmax of `(H_img + Pos) H_textᵀ / √d`: image positions scored against text tokens.
fn cross_similarity(ht: &Tensor, hi: &Tensor, pos: &Tensor) -> Tensor {
    let (l, d) = (ht.shape()[0], ht.shape()[1]);
    let inv = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(&[l, l]);
    for i in 0..l {
        let qi: Vec<f64> = (0..d).map(|c| hi.get(&[i, c]) + pos.get(&[i, c])).collect();
        let scores: Vec<f64> = (0..l)
            .map(|t| qi.iter().zip(ht.row(t)).map(|(a, b)| a * b).sum::<f64>() * inv)
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for t in 0..l {
            out.data_mut()[i * l + t] = exps[t] / z;
        }
    }
    out
}

/// Forward pass against an arbitrary parameter store with the model's layout;
/// gradient checks perturb a cloned store through this.
pub fn forward_with(model: &Qeot, store: &ParamStore, tape: &mut Tape, input: ModelInput<'_>) -> Result<ForwardVars> {
    let cfg = &model.config;
    let (h_text, text_block_attn) = model.text.forward(tape, store, input.tokens)?;
    let h_img = model.image.forward(tape, store, input.grid)?;
    let pos_img = model.image.position_encoding().clone();
    let pos = tape.constant(pos_img.clone());
    let selective = selective_attention(tape, h_text, h_img, pos)?;
    let (text_out, gate_text) = model.fuse_text.forward(tape, store, h_text, selective.text_attn)?;
    let (img_out, gate_img) = model.fuse_img.forward(tape, store, h_img, selective.img_attn)?;

    let memory_in = tape.add(img_out, pos)?;
    let transformer = model.transformer.forward(tape, store, memory_in)?;
    let hq = transformer.hq;

    let ent = model.entity.forward(tape, store, hq, text_out)?;
    let start_logp = tape.log_softmax(ent.start, 1)?;
    let end_logp = tape.log_softmax(ent.end, 1)?;
    let start_dist = tape.softmax(ent.start, 1)?;
    let end_dist = tape.softmax(ent.end, 1)?;
    let rb = model.relation.forward(tape, store, hq, text_out, img_out)?;
    if tape.shape(rb.rel_logits) != [cfg.queries, cfg.relations + 1] {
        return Err(Error::Contract("relation head produced the wrong shape".into()));
    }
    Ok(ForwardVars {
        h_text,
        h_img,
        text_out,
        img_out,
        hq,
        start_scores: ent.start,
        end_scores: ent.end,
        start_logp,
        end_logp,
        start_dist,
        end_dist,
        rel_logits: rb.rel_logits,
        boxes: rb.boxes,
        text_block_attn,
        selective,
        gate_text,
        gate_img,
        transformer,
        pos_img,
    })
}
