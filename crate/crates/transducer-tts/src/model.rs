//! Network wiring: text encoder, autoregressive prediction network, joint
//! network, residual codebook head (RCH), and the GST speaker module.
//!
//! Every forward pass runs on a [`Tape`] so one `backward` call covers the
//! whole system; inference reuses the same code and simply never calls
//! `backward`. The predictor additionally has an incremental step path with
//! per-block KV caches for the decode loop.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::FeatureSeq;
use crate::error::{Error, Result};
use crate::numerics::layers::{
    positional_encoding, BlockCache, CondLayerNorm, GruCell, LayerNorm, Linear,
    MultiHeadAttention, TransformerBlock,
};
use crate::numerics::params::{init_embedding, zeros, ParamId, ParamSet};
use crate::numerics::tape::{log_softmax_row, NodeId, Tape};

/// One transformer stack (encoder, predictor, or RCH).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GstConfig {
    pub num_tokens: usize,
    pub token_dim: usize,
    /// Output channels of the strided reference-encoder convolutions.
    pub conv_channels: Vec<usize>,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: StackConfig,
    pub predictor: StackConfig,
    /// Shared joint dimension d_j both e_i and p_j are projected to.
    pub joint_dim: usize,
    pub rch: StackConfig,
    pub gst: GstConfig,
    /// Text vocabulary V_t (includes the tokenizer's padding id).
    pub text_vocab: usize,
    /// Entries per codebook V_c.
    pub code_vocab: usize,
    /// Codebooks K; the transducer owns level 0, the RCH levels 1..K-1.
    pub num_codebooks: usize,
    /// Codec feature dimension d_f (GST reference input).
    pub feature_dim: usize,
    pub max_symbols_per_step: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk_default() -> Self {
        ModelConfig {
            encoder: StackConfig { layers: 4, dim: 128, heads: 4, ff_dim: 512 },
            predictor: StackConfig { layers: 2, dim: 128, heads: 4, ff_dim: 512 },
            joint_dim: 128,
            rch: StackConfig { layers: 4, dim: 128, heads: 4, ff_dim: 512 },
            gst: GstConfig { num_tokens: 32, token_dim: 128, conv_channels: vec![64, 128], heads: 4 },
            text_vocab: 256,
            code_vocab: 64,
            num_codebooks: 4,
            feature_dim: 8,
            max_symbols_per_step: 32,
            seed: 1234,
        }
    }

    /// Full-scale preset. Never instantiated in tests; exists so
    /// [`param_count`] can be sanity-checked against a realistic budget.
    pub fn paper_scale() -> Self {
        ModelConfig {
            encoder: StackConfig { layers: 12, dim: 640, heads: 8, ff_dim: 2560 },
            predictor: StackConfig { layers: 6, dim: 512, heads: 8, ff_dim: 2048 },
            joint_dim: 640,
            rch: StackConfig { layers: 12, dim: 640, heads: 8, ff_dim: 2560 },
            gst: GstConfig {
                num_tokens: 1024,
                token_dim: 640,
                conv_channels: vec![256, 640],
                heads: 8,
            },
            text_vocab: 12_000,
            code_vocab: 1024,
            num_codebooks: 8,
            feature_dim: 128,
            max_symbols_per_step: 32,
            seed: 1234,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stacks =
            [("encoder", &self.encoder), ("predictor", &self.predictor), ("rch", &self.rch)];
        for (name, s) in stacks {
            if s.layers == 0 || s.dim == 0 || s.heads == 0 || s.ff_dim == 0 {
                return Err(Error::Config(format!("{name}: all dims must be positive")));
            }
            if s.dim % s.heads != 0 {
                return Err(Error::Config(format!(
                    "{name}: heads {} must divide dim {}",
                    s.heads, s.dim
                )));
            }
        }
        if self.joint_dim == 0 {
            return Err(Error::Config("joint_dim must be positive".into()));
        }
        let g = &self.gst;
        if g.num_tokens == 0 || g.token_dim == 0 || g.heads == 0 || g.conv_channels.is_empty() {
            return Err(Error::Config("gst: all dims must be positive".into()));
        }
        if g.token_dim % g.heads != 0 {
            return Err(Error::Config(format!(
                "gst: heads {} must divide token_dim {}",
                g.heads, g.token_dim
            )));
        }
        if g.conv_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("gst: conv channels must be positive".into()));
        }
        if self.text_vocab == 0 || self.code_vocab == 0 || self.feature_dim == 0 {
            return Err(Error::Config("vocab and feature dims must be positive".into()));
        }
        if self.num_codebooks < 2 {
            return Err(Error::Config(
                "num_codebooks must be at least 2 (transducer level + one residual level)".into(),
            ));
        }
        if self.max_symbols_per_step == 0 {
            return Err(Error::Config("max_symbols_per_step must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder output e: N×d_e; row i is e_i (e_k when indexed through an
/// alignment's frame map).
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub node: NodeId,
    pub n: usize,
}

/// Predictor output p: (T+1)×d_p; row 0 is the ⟨SOS⟩ state, row j depends
/// only on codes before j.
#[derive(Debug, Clone, Copy)]
pub struct PredictorOutput {
    pub node: NodeId,
    pub rows: usize,
}

/// Incremental predictor state: one KV cache per block plus the position.
pub struct PredictorState {
    caches: Vec<BlockCache>,
    pos: usize,
}

impl PredictorState {
    pub fn pos(&self) -> usize {
        self.pos
    }
}

#[derive(Debug, Clone)]
pub struct TtsModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    enc_embed: ParamId,
    enc_blocks: Vec<TransformerBlock>,
    enc_final: CondLayerNorm,
    pred_embed: ParamId,
    pred_blocks: Vec<TransformerBlock>,
    pred_final: LayerNorm,
    joint_e: Linear,
    joint_p: Linear,
    joint_out: Linear,
    rch_embeds: Vec<ParamId>,
    rch_level: ParamId,
    rch_proj: Linear,
    rch_blocks: Vec<TransformerBlock>,
    rch_final: CondLayerNorm,
    rch_out: Linear,
    gst_tokens: ParamId,
    gst_convs: Vec<Linear>,
    gst_gru: GruCell,
    gst_attn: MultiHeadAttention,
    gst_out: Linear,
}

impl TtsModel {
    /// Builds and initializes all parameters from `config.seed`. The joint
    /// and RCH output layers start at zero so both distributions are exactly
    /// uniform before training.
    pub fn new(config: ModelConfig) -> Result<TtsModel> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(config.seed);
        let (d_e, d_p, d_r, d_j) =
            (config.encoder.dim, config.predictor.dim, config.rch.dim, config.joint_dim);
        let v_c = config.code_vocab;

        let enc_embed = ps.register("enc.embed", init_embedding(rng, config.text_vocab, d_e));
        let enc_blocks = (0..config.encoder.layers)
            .map(|i| {
                TransformerBlock::new(
                    &mut ps,
                    rng,
                    &format!("enc.blk{i}"),
                    d_e,
                    config.encoder.ff_dim,
                    config.encoder.heads,
                    Some(d_e),
                )
            })
            .collect();
        let enc_final = CondLayerNorm::new(&mut ps, "enc.final", d_e, d_e);

        // Row v_c of the predictor embedding is the ⟨SOS⟩ state.
        let pred_embed = ps.register("pred.embed", init_embedding(rng, v_c + 1, d_p));
        let pred_blocks = (0..config.predictor.layers)
            .map(|i| {
                TransformerBlock::new(
                    &mut ps,
                    rng,
                    &format!("pred.blk{i}"),
                    d_p,
                    config.predictor.ff_dim,
                    config.predictor.heads,
                    None,
                )
            })
            .collect();
        let pred_final = LayerNorm::new(&mut ps, "pred.final", d_p);

        let joint_e = Linear::new(&mut ps, rng, "joint.e", d_e, d_j);
        let joint_p = Linear::new(&mut ps, rng, "joint.p", d_p, d_j);
        let joint_out = Linear::zeroed(&mut ps, "joint.out", d_j, v_c + 1);

        let rch_embeds = (0..config.num_codebooks - 1)
            .map(|m| ps.register(format!("rch.embed{m}"), init_embedding(rng, v_c, d_r)))
            .collect();
        let rch_level =
            ps.register("rch.level", init_embedding(rng, config.num_codebooks, d_r));
        let rch_proj = Linear::new(&mut ps, rng, "rch.proj", d_r + d_e, d_r);
        let rch_blocks = (0..config.rch.layers)
            .map(|i| {
                TransformerBlock::new(
                    &mut ps,
                    rng,
                    &format!("rch.blk{i}"),
                    d_r,
                    config.rch.ff_dim,
                    config.rch.heads,
                    Some(d_e),
                )
            })
            .collect();
        let rch_final = CondLayerNorm::new(&mut ps, "rch.final", d_r, d_e);
        let rch_out = Linear::zeroed(&mut ps, "rch.out", d_r, v_c);

        let g = &config.gst;
        let gst_tokens =
            ps.register("gst.tokens", init_embedding(rng, g.num_tokens, g.token_dim));
        let mut c_in = config.feature_dim;
        let mut gst_convs = Vec::new();
        for (i, &c_out) in g.conv_channels.iter().enumerate() {
            gst_convs.push(Linear::new(&mut ps, rng, &format!("gst.conv{i}"), 3 * c_in, c_out));
            c_in = c_out;
        }
        let gst_gru = GruCell::new(&mut ps, rng, "gst.gru", c_in, g.token_dim);
        let gst_attn = MultiHeadAttention::new(&mut ps, rng, "gst.attn", g.token_dim, g.heads);
        let gst_out = Linear::new(&mut ps, rng, "gst.out", g.token_dim, d_e);

        // Parameters live on the f32 grid from birth, so checkpoints written
        // in f32 reload bit-exactly even before the first optimizer step.
        ps.quantize_values_f32();

        Ok(TtsModel {
            config,
            params: ps,
            enc_embed,
            enc_blocks,
            enc_final,
            pred_embed,
            pred_blocks,
            pred_final,
            joint_e,
            joint_p,
            joint_out,
            rch_embeds,
            rch_level,
            rch_proj,
            rch_blocks,
            rch_final,
            rch_out,
            gst_tokens,
            gst_convs,
            gst_gru,
            gst_attn,
            gst_out,
        })
    }

    /// Bidirectional transformer over token embeddings + positional encoding,
    /// speaker-conditioned through every LayerNorm.
    pub fn encode_text(
        &self,
        t: &mut Tape,
        tokens: &[u32],
        speaker: NodeId,
    ) -> Result<EncoderOutput> {
        if tokens.is_empty() {
            return Err(Error::Input("encode_text needs at least one token".into()));
        }
        let mut ids = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            if tok as usize >= self.config.text_vocab {
                return Err(Error::Index {
                    op: "encode_text",
                    detail: format!("token {tok} outside vocabulary {}", self.config.text_vocab),
                });
            }
            ids.push(tok as usize);
        }
        let table = t.param(self.enc_embed);
        let mut x = t.gather(table, &ids);
        x = t.add_const(x, &positional_encoding(ids.len(), self.config.encoder.dim));
        for blk in &self.enc_blocks {
            x = blk.fwd(t, x, Some(speaker), false);
        }
        let node = self.enc_final.fwd(t, x, speaker);
        Ok(EncoderOutput { node, n: ids.len() })
    }

    /// Causal transformer over ⟨SOS⟩-prepended first-codebook codes; row j of
    /// the output depends only on `prefix[..j]`.
    pub fn predict_codes(&self, t: &mut Tape, prefix: &[u16]) -> Result<PredictorOutput> {
        let v_c = self.config.code_vocab;
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(v_c); // ⟨SOS⟩ row
        for &c in prefix {
            if c as usize >= v_c {
                return Err(Error::Index {
                    op: "predict_codes",
                    detail: format!("code {c} outside codebook {v_c}"),
                });
            }
            ids.push(c as usize);
        }
        let table = t.param(self.pred_embed);
        let mut x = t.gather(table, &ids);
        x = t.add_const(x, &positional_encoding(ids.len(), self.config.predictor.dim));
        for blk in &self.pred_blocks {
            x = blk.fwd(t, x, None, true);
        }
        let node = self.pred_final.fwd(t, x);
        Ok(PredictorOutput { node, rows: ids.len() })
    }

    pub fn predictor_state(&self) -> PredictorState {
        PredictorState {
            caches: (0..self.pred_blocks.len()).map(|_| BlockCache::default()).collect(),
            pos: 0,
        }
    }

    /// One incremental predictor position: ⟨SOS⟩ when `prev` is `None`,
    /// otherwise the given code. Matches `predict_codes` row `state.pos`.
    pub fn predict_step(
        &self,
        state: &mut PredictorState,
        prev: Option<u16>,
    ) -> Result<Array2<f64>> {
        let v_c = self.config.code_vocab;
        let id = match prev {
            None => v_c,
            Some(c) if (c as usize) < v_c => c as usize,
            Some(c) => {
                return Err(Error::Index {
                    op: "predict_step",
                    detail: format!("code {c} outside codebook {v_c}"),
                })
            }
        };
        let d = self.config.predictor.dim;
        let emb = self.params.value(self.pred_embed).row(id).to_owned();
        let pe = positional_encoding(state.pos + 1, d);
        let mut x = (emb + pe.row(state.pos)).insert_axis(Axis(0));
        for (blk, cache) in self.pred_blocks.iter().zip(&mut state.caches) {
            x = blk.step(&self.params, cache, &x.view());
        }
        state.pos += 1;
        Ok(self.pred_final.apply(&self.params, &x.view()))
    }

    /// Full joint lattice: logits row i·(T+1)+j holds the fused (e_i, p_j)
    /// cell, ready for [`crate::rnnt::JointLogProbGrid::from_logits`].
    pub fn joint_grid(&self, t: &mut Tape, enc: NodeId, pred: NodeId) -> NodeId {
        let e = self.joint_e.fwd(t, enc);
        let p = self.joint_p.fwd(t, pred);
        let s = t.pair_sum(e, p);
        let h = t.relu(s);
        self.joint_out.fwd(t, h)
    }

    /// Single lattice cell for decoding: log-probabilities over V_c+1 with
    /// ⟨blank⟩ last. Bit-for-bit the same arithmetic as one `joint_grid` row.
    pub fn joint_single(&self, e_row: &ArrayView1<f64>, p_row: &ArrayView1<f64>) -> Array1<f64> {
        let ps = &self.params;
        let e = self.joint_e.apply(ps, &e_row.insert_axis(Axis(0)));
        let p = self.joint_p.apply(ps, &p_row.insert_axis(Axis(0)));
        let h = (e + p).mapv(|v| v.max(0.0));
        let logits = self.joint_out.apply(ps, &h.view());
        log_softmax_row(&logits.row(0).to_owned())
    }

    /// Non-autoregressive level-k head: per frame, the summed embeddings of
    /// codes below k plus a level embedding, concatenated with the aligned
    /// encoder vector e_{f(j)}.
    pub fn rch_forward(
        &self,
        t: &mut Tape,
        codes_below: &ArrayView2<u16>,
        aligned_enc: NodeId,
        k: usize,
        speaker: NodeId,
    ) -> Result<NodeId> {
        let big_k = self.config.num_codebooks;
        if k == 0 || k >= big_k {
            return Err(Error::Validation(format!(
                "rch level {k} outside 1..={} (the transducer owns level 0)",
                big_k - 1
            )));
        }
        if codes_below.ncols() != k {
            return Err(Error::Shape {
                op: "rch_forward",
                detail: format!("codes_below has {} columns, level {k} needs {k}", codes_below.ncols()),
            });
        }
        let frames = codes_below.nrows();
        if t.value(aligned_enc).nrows() != frames {
            return Err(Error::Shape {
                op: "rch_forward",
                detail: format!(
                    "aligned encoder rows {} vs {frames} frames",
                    t.value(aligned_enc).nrows()
                ),
            });
        }
        if frames == 0 {
            return Err(Error::Input("rch_forward needs at least one frame".into()));
        }
        let v_c = self.config.code_vocab;
        let mut sum: Option<NodeId> = None;
        for m in 0..k {
            let mut ids = Vec::with_capacity(frames);
            for j in 0..frames {
                let c = codes_below[[j, m]] as usize;
                if c >= v_c {
                    return Err(Error::Index {
                        op: "rch_forward",
                        detail: format!("code {c} outside codebook {v_c} at frame {j} level {m}"),
                    });
                }
                ids.push(c);
            }
            let table = t.param(self.rch_embeds[m]);
            let g = t.gather(table, &ids);
            sum = Some(match sum {
                Some(s) => t.add(s, g),
                None => g,
            });
        }
        let level_table = t.param(self.rch_level);
        let level_row = t.gather(level_table, &[k]);
        let summed = t.add_row(sum.expect("k >= 1"), level_row);
        let joined = t.concat_cols(summed, aligned_enc);
        let mut x = self.rch_proj.fwd(t, joined);
        x = t.add_const(x, &positional_encoding(frames, self.config.rch.dim));
        for blk in &self.rch_blocks {
            x = blk.fwd(t, x, Some(speaker), false);
        }
        let x = self.rch_final.fwd(t, x, speaker);
        Ok(self.rch_out.fwd(t, x))
    }

    /// Reference encoder: strided convolutions over time, a GRU whose final
    /// state queries the style-token bank through multi-head attention, then
    /// a projection to d_e. Returns a 1×d_e node.
    pub fn gst_embed(&self, t: &mut Tape, reference: &FeatureSeq) -> Result<NodeId> {
        if reference.t() < 4 {
            return Err(Error::Input(format!(
                "gst reference needs at least 4 frames, got {}",
                reference.t()
            )));
        }
        if reference.dim() != self.config.feature_dim {
            return Err(Error::Shape {
                op: "gst_embed",
                detail: format!(
                    "reference dim {} vs configured {}",
                    reference.dim(),
                    self.config.feature_dim
                ),
            });
        }
        let mut x = t.input(reference.data.clone());
        for conv in &self.gst_convs {
            // kernel 3, stride 2, one zero frame of padding on each side
            let padded = t.pad_rows(x, 1, 1);
            let t_in = t.value(padded).nrows();
            let t_out = (t_in - 3) / 2 + 1;
            let ids = |off: usize| (0..t_out).map(|o| 2 * o + off).collect::<Vec<_>>();
            let w0 = t.gather(padded, &ids(0));
            let w1 = t.gather(padded, &ids(1));
            let w2 = t.gather(padded, &ids(2));
            let stacked = t.concat_cols(w0, w1);
            let stacked = t.concat_cols(stacked, w2);
            x = conv.fwd(t, stacked);
            x = t.relu(x);
        }
        let rows = t.value(x).nrows();
        let mut h = t.input(zeros(1, self.config.gst.token_dim));
        for j in 0..rows {
            let row = t.gather(x, &[j]);
            h = self.gst_gru.fwd_step(t, row, h);
        }
        let tokens = t.param(self.gst_tokens);
        let a = self.gst_attn.fwd(t, h, tokens, false);
        Ok(self.gst_out.fwd(t, a))
    }

    /// Test-only: fresh model with non-degenerate output heads. `new` zeroes
    /// them, which makes every joint/RCH distribution exactly uniform.
    #[cfg(test)]
    pub(crate) fn new_randomized_for_tests(config: ModelConfig, seed: u64) -> Self {
        use rand::Rng;
        let mut m = TtsModel::new(config).expect("test config must validate");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in ["joint.out.w", "joint.out.b", "rch.out.w", "rch.out.b"] {
            let id = m.params.lookup(name).unwrap();
            m.params.value_mut(id).mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        m.params.quantize_values_f32();
        m
    }
}

fn affine(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

fn cond_norm(d_speaker: usize, d: usize) -> usize {
    2 * affine(d_speaker, d)
}

fn block(d: usize, ff: usize, d_speaker: Option<usize>) -> usize {
    let norms = match d_speaker {
        Some(ds) => 2 * cond_norm(ds, d),
        None => 2 * (2 * d),
    };
    4 * affine(d, d) + affine(d, ff) + affine(ff, d) + norms
}

/// Exact scalar-parameter count for a config, without instantiating it.
pub fn param_count(config: &ModelConfig) -> usize {
    let (d_e, d_p, d_r, d_j) =
        (config.encoder.dim, config.predictor.dim, config.rch.dim, config.joint_dim);
    let v_c = config.code_vocab;
    let k = config.num_codebooks;
    let g = &config.gst;

    let encoder = config.text_vocab * d_e
        + config.encoder.layers * block(d_e, config.encoder.ff_dim, Some(d_e))
        + cond_norm(d_e, d_e);
    let predictor = (v_c + 1) * d_p
        + config.predictor.layers * block(d_p, config.predictor.ff_dim, None)
        + 2 * d_p;
    let joint = affine(d_e, d_j) + affine(d_p, d_j) + affine(d_j, v_c + 1);
    let rch = (k - 1) * v_c * d_r
        + k * d_r
        + affine(d_r + d_e, d_r)
        + config.rch.layers * block(d_r, config.rch.ff_dim, Some(d_e))
        + cond_norm(d_e, d_r)
        + affine(d_r, v_c);
    let mut gst = g.num_tokens * g.token_dim;
    let mut c_in = config.feature_dim;
    for &c_out in &g.conv_channels {
        gst += affine(3 * c_in, c_out);
        c_in = c_out;
    }
    gst += 3 * (affine(c_in, g.token_dim) + g.token_dim * g.token_dim); // GRU gates
    gst += 4 * affine(g.token_dim, g.token_dim); // attention projections
    gst += affine(g.token_dim, d_e);

    encoder + predictor + joint + rch + gst
}
