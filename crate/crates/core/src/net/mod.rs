//! The Temporal U-Transformer.
//!
//! A stage is `input projection → N encoder layers → N decoder layers →
//! classifier`. Encoder layer `l` halves the temporal length (nearest
//! neighbour), attends locally, and applies two residual blocks with instance
//! normalisation. Decoder layer `l` doubles the length back and cross-attends
//! to the encoder output that has the same length. One generation stage and
//! `M` refinement stages are chained; a refinement stage reads the previous
//! stage's class probabilities.

pub mod checkpoint;
mod config;
mod params;

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

pub use config::{Architecture, ModelConfig, RefineInput};
pub use params::ParamStore;

use crate::attention::{
    attend, rpe_table_name, sinusoidal_encoding, AttentionRecord, Coder, PeMode,
};
use crate::error::{Error, Result};
use crate::tensor::{DropoutStreams, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Nearest-neighbour downsampling: output row `k` is input row `2k`.
pub fn downsample_nearest(tape: &mut Tape, x: Var) -> Result<Var> {
    let t = tape.value(x).rows();
    if t == 0 {
        return Err(Error::EmptyInput(
            "cannot downsample an empty sequence".into(),
        ));
    }
    let idx = (0..t.div_ceil(2)).map(|k| 2 * k).collect();
    tape.gather_rows(x, idx)
}

/// Nearest-neighbour upsampling to `target` rows: output row `t` is input row `⌊t/2⌋`.
pub fn upsample_nearest(tape: &mut Tape, x: Var, target: usize) -> Result<Var> {
    let t = tape.value(x).rows();
    if t != target.div_ceil(2) {
        return Err(Error::dim(format!(
            "cannot upsample {t} rows to {target}: expected {} source rows",
            target.div_ceil(2)
        )));
    }
    let idx = (0..target).map(|i| i / 2).collect();
    tape.gather_rows(x, idx)
}

/// Per-call switches of the forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Dropout streams; `None` runs in evaluation mode.
    pub dropout: Option<DropoutStreams>,
    /// Treat instance-norm statistics as constants in the backward pass.
    /// Only used by receptive-field probes.
    pub freeze_norm_stats: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions::default()
    }

    pub fn train(streams: DropoutStreams) -> Self {
        ForwardOptions {
            dropout: Some(streams),
            freeze_norm_stats: false,
        }
    }

    fn rng(&self, stream: u64) -> Option<ChaCha8Rng> {
        self.dropout.map(|s| s.stream(stream))
    }
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub logits: Var,
    pub probs: Var,
    /// Attention of encoder layer 1.
    pub enc_first: AttentionRecord,
    /// Attention of decoder layer N.
    pub dec_last: AttentionRecord,
    /// Lengths of the stage input and every encoder layer output.
    pub lengths: Vec<usize>,
    /// Score entries retained by all attention layers of the stage.
    pub attention_entries: usize,
}

pub struct ModelOutput {
    pub stages: Vec<StageOutput>,
    /// Tape leaf of every parameter, by name.
    pub params: BTreeMap<String, Var>,
}

impl ModelOutput {
    pub fn last(&self) -> &StageOutput {
        self.stages.last().expect("at least one stage")
    }

    pub fn attention_entries(&self) -> usize {
        self.stages.iter().map(|s| s.attention_entries).sum()
    }
}

/// Lengths of the stage input and of each encoder layer output.
pub fn encoder_lengths(cfg: &ModelConfig, len: usize) -> Vec<usize> {
    let mut lengths = vec![len];
    for _ in 0..cfg.layers {
        let last = *lengths.last().unwrap();
        lengths.push(match cfg.architecture {
            Architecture::UTrans => last.div_ceil(2),
            Architecture::Standard => last,
        });
    }
    lengths
}

/// Retained attention score entries of one forward pass at length `len`,
/// counted from the attention patterns without running the model.
pub fn attention_entry_count(cfg: &ModelConfig, len: usize) -> usize {
    let lengths = encoder_lengths(cfg, len);
    let a = &cfg.attention;
    let per_layer =
        |l: usize| a.heads * crate::attention::build_pattern(a.pattern, l, a.window).nnz();
    let enc: usize = lengths[1..].iter().map(|&l| per_layer(l)).sum();
    let dec: usize = (1..=cfg.layers)
        .map(|l| per_layer(lengths[cfg.decoder_peer(l)]))
        .sum();
    (enc + dec) * cfg.num_stages()
}

struct LayerVars {
    qkv_w: Var,
    qkv_b: Var,
    ffn1_w: Var,
    ffn1_b: Var,
    ffn2_w: Var,
    ffn2_b: Var,
    norm1_w: Var,
    norm1_b: Var,
    norm2_w: Var,
    norm2_b: Var,
    rpe: Option<Var>,
}

/// Stream ids for dropout masks, fixed per (stage, coder, layer, site).
fn stream_id(stage: usize, coder: Option<Coder>, layer: usize, site: u64) -> u64 {
    let coder = match coder {
        None => 0,
        Some(Coder::Encoder) => 1,
        Some(Coder::Decoder) => 2,
    };
    ((stage as u64) << 24) | (coder << 16) | ((layer as u64) << 4) | site
}

const SITE_INPUT: u64 = 0;
const SITE_ATTN: u64 = 1;
const SITE_FFN: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn deterministically from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config, seed);
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = ParamStore::shapes(&config);
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::config(format!(
                        "parameter {name} has shape {:?}, model expects {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::config(format!("missing parameter {name}"))),
            }
        }
        if let Some(extra) = params.names().find(|n| !expected.contains_key(*n)) {
            return Err(Error::config(format!("unexpected parameter {extra}")));
        }
        Ok(Model { config, params })
    }

    fn layer_vars(
        &self,
        bound: &BTreeMap<String, Var>,
        stage: usize,
        coder: Coder,
        layer: usize,
    ) -> LayerVars {
        let tag = match coder {
            Coder::Encoder => "enc",
            Coder::Decoder => "dec",
        };
        let p = |part: &str| bound[&format!("stage{stage}.{tag}{layer}.{part}")];
        let rpe = (self.config.attention.pe_mode == PeMode::Relative).then(|| {
            let scale = self.config.layer_scale(coder, layer);
            bound[&rpe_table_name(
                self.config.attention.rpe_share,
                self.config.rpe_split_coder,
                stage,
                coder,
                layer,
                scale,
            )]
        });
        LayerVars {
            qkv_w: p("qkv.w"),
            qkv_b: p("qkv.b"),
            ffn1_w: p("ffn1.w"),
            ffn1_b: p("ffn1.b"),
            ffn2_w: p("ffn2.w"),
            ffn2_b: p("ffn2.b"),
            norm1_w: p("norm1.w"),
            norm1_b: p("norm1.b"),
            norm2_w: p("norm2.w"),
            norm2_b: p("norm2.b"),
            rpe,
        }
    }

    /// Residual attention block followed by the residual FFN block.
    fn attention_block(
        &self,
        tape: &mut Tape,
        query_in: Var,
        kv_in: Var,
        lv: &LayerVars,
        dim: usize,
        opts: &ForwardOptions,
        streams: (u64, u64),
    ) -> Result<(Var, AttentionRecord)> {
        let wq = tape.slice_cols(lv.qkv_w, 0, dim)?;
        let wk = tape.slice_cols(lv.qkv_w, dim, dim)?;
        let wv = tape.slice_cols(lv.qkv_w, 2 * dim, dim)?;
        let bq = tape.gather_elems(lv.qkv_b, (0..dim).collect())?;
        let bk = tape.gather_elems(lv.qkv_b, (dim..2 * dim).collect())?;
        let bv = tape.gather_elems(lv.qkv_b, (2 * dim..3 * dim).collect())?;
        let q = tape.linear(query_in, wq, bq)?;
        let k = tape.linear(kv_in, wk, bk)?;
        let v = tape.linear(kv_in, wv, bv)?;
        let mut attn_rng = opts.rng(streams.0);
        let (a, record) = attend(
            tape,
            q,
            k,
            v,
            &self.config.attention,
            lv.rpe,
            attn_rng.as_mut(),
        )?;
        let r1 = tape.add(a, query_in)?;
        let h2 = tape.instance_norm_temporal(
            r1,
            lv.norm1_w,
            lv.norm1_b,
            NORM_EPS,
            opts.freeze_norm_stats,
        )?;
        let f = tape.linear(h2, lv.ffn1_w, lv.ffn1_b)?;
        let f = tape.relu(f);
        let f = match opts.rng(streams.1) {
            Some(mut rng) if self.config.ffn_dropout > 0.0 => {
                tape.dropout(f, self.config.ffn_dropout, &mut rng)?
            }
            _ => f,
        };
        let f = tape.linear(f, lv.ffn2_w, lv.ffn2_b)?;
        let r2 = tape.add(f, h2)?;
        let out = tape.instance_norm_temporal(
            r2,
            lv.norm2_w,
            lv.norm2_b,
            NORM_EPS,
            opts.freeze_norm_stats,
        )?;
        Ok((out, record))
    }

    fn encoder_layer(
        &self,
        tape: &mut Tape,
        prev: Var,
        lv: &LayerVars,
        dim: usize,
        opts: &ForwardOptions,
        stage: usize,
        layer: usize,
    ) -> Result<(Var, AttentionRecord, usize)> {
        let len = tape.value(prev).rows();
        let h1 = match self.config.architecture {
            Architecture::UTrans => {
                if len < 2 {
                    return Err(Error::config("too many layers for sequence length"));
                }
                downsample_nearest(tape, prev)?
            }
            Architecture::Standard => prev,
        };
        let streams = (
            stream_id(stage, Some(Coder::Encoder), layer, SITE_ATTN),
            stream_id(stage, Some(Coder::Encoder), layer, SITE_FFN),
        );
        let (out, rec) = self.attention_block(tape, h1, h1, lv, dim, opts, streams)?;
        Ok((out, rec, len))
    }

    fn decoder_layer(
        &self,
        tape: &mut Tape,
        prev: Var,
        peer: Var,
        lv: &LayerVars,
        dim: usize,
        opts: &ForwardOptions,
        stage: usize,
        layer: usize,
    ) -> Result<(Var, AttentionRecord)> {
        let peer_len = tape.value(peer).rows();
        let g1 = match self.config.architecture {
            Architecture::UTrans => upsample_nearest(tape, prev, peer_len)?,
            Architecture::Standard => prev,
        };
        if tape.value(g1).rows() != peer_len {
            return Err(Error::dim(format!(
                "decoder query length {} differs from encoder peer length {peer_len}",
                tape.value(g1).rows()
            )));
        }
        let streams = (
            stream_id(stage, Some(Coder::Decoder), layer, SITE_ATTN),
            stream_id(stage, Some(Coder::Decoder), layer, SITE_FFN),
        );
        self.attention_block(tape, g1, peer, lv, dim, opts, streams)
    }

    fn stage_forward(
        &self,
        tape: &mut Tape,
        bound: &BTreeMap<String, Var>,
        input: Var,
        stage: usize,
        opts: &ForwardOptions,
    ) -> Result<StageOutput> {
        let cfg = &self.config;
        let len = tape.value(input).rows();
        cfg.check_length(len)?;
        let dim = cfg.stage_hidden(stage);
        let x = match opts.rng(stream_id(stage, None, 0, SITE_INPUT)) {
            Some(mut rng) if cfg.input_dropout > 0.0 => {
                tape.dropout(input, cfg.input_dropout, &mut rng)?
            }
            _ => input,
        };
        let mut h = tape.linear(
            x,
            bound[&format!("stage{stage}.proj.w")],
            bound[&format!("stage{stage}.proj.b")],
        )?;
        match cfg.attention.pe_mode {
            PeMode::AbsSinusoidal => {
                let pe = tape.constant(sinusoidal_encoding(len, dim));
                h = tape.add(h, pe)?;
            }
            PeMode::AbsLearnable => {
                let pe =
                    tape.gather_rows(bound[&format!("stage{stage}.pos.w")], (0..len).collect())?;
                h = tape.add(h, pe)?;
            }
            PeMode::None | PeMode::Relative => {}
        }

        let mut enc_outs = vec![h];
        let mut lengths = vec![len];
        let mut entries = 0;
        let mut enc_first = None;
        for l in 1..=cfg.layers {
            let lv = self.layer_vars(bound, stage, Coder::Encoder, l);
            let (out, rec, _) = self.encoder_layer(tape, h, &lv, dim, opts, stage, l)?;
            entries += rec.entry_count();
            lengths.push(tape.value(out).rows());
            if l == 1 {
                enc_first = Some(rec);
            }
            enc_outs.push(out);
            h = out;
        }

        let mut g = h;
        let mut dec_last = None;
        for l in 1..=cfg.layers {
            let lv = self.layer_vars(bound, stage, Coder::Decoder, l);
            let peer = enc_outs[cfg.decoder_peer(l)];
            let (out, rec) = self.decoder_layer(tape, g, peer, &lv, dim, opts, stage, l)?;
            entries += rec.entry_count();
            if l == cfg.layers {
                dec_last = Some(rec);
            }
            g = out;
        }

        let logits = tape.linear(
            g,
            bound[&format!("stage{stage}.cls.w")],
            bound[&format!("stage{stage}.cls.b")],
        )?;
        if !tape.value(logits).is_finite() {
            return Err(Error::Numeric(format!(
                "stage {stage} produced non-finite logits"
            )));
        }
        let probs = tape.softmax_lastdim(logits)?;
        Ok(StageOutput {
            logits,
            probs,
            enc_first: enc_first.expect("layers >= 1"),
            dec_last: dec_last.expect("layers >= 1"),
            lengths,
            attention_entries: entries,
        })
    }

    /// Runs every stage on `features` (`T × input_dim`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        opts: ForwardOptions,
    ) -> Result<ModelOutput> {
        let bound = self.bind(tape, true);
        self.forward_bound(tape, &bound, features, opts)
    }

    /// Places every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), trainable)))
            .collect()
    }

    /// One encoder layer of `stage` applied to `prev`; returns the output,
    /// its attention record and the pre-downsample length.
    pub fn run_encoder_layer(
        &self,
        tape: &mut Tape,
        bound: &BTreeMap<String, Var>,
        stage: usize,
        layer: usize,
        prev: Var,
        opts: ForwardOptions,
    ) -> Result<(Var, AttentionRecord, usize)> {
        let lv = self.layer_vars(bound, stage, Coder::Encoder, layer);
        self.encoder_layer(
            tape,
            prev,
            &lv,
            self.config.stage_hidden(stage),
            &opts,
            stage,
            layer,
        )
    }

    /// One decoder layer of `stage`: queries from `prev`, keys and values from `peer`.
    pub fn run_decoder_layer(
        &self,
        tape: &mut Tape,
        bound: &BTreeMap<String, Var>,
        stage: usize,
        layer: usize,
        prev: Var,
        peer: Var,
        opts: ForwardOptions,
    ) -> Result<(Var, AttentionRecord)> {
        let lv = self.layer_vars(bound, stage, Coder::Decoder, layer);
        self.decoder_layer(
            tape,
            prev,
            peer,
            &lv,
            self.config.stage_hidden(stage),
            &opts,
            stage,
            layer,
        )
    }

    /// Like [`Model::forward`] with the input registered as a differentiable
    /// leaf; returns the input's tape handle as well.
    pub fn forward_with_input_grad(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        opts: ForwardOptions,
    ) -> Result<(ModelOutput, Var)> {
        let bound = self.bind(tape, false);
        let x = tape.param(features.clone());
        let out = self.forward_from(tape, &bound, x, opts)?;
        Ok((out, x))
    }

    /// Forward pass with parameters already placed on the tape.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        bound: &BTreeMap<String, Var>,
        features: &Tensor,
        opts: ForwardOptions,
    ) -> Result<ModelOutput> {
        if features.shape().len() != 2 || features.cols() != self.config.input_dim {
            return Err(Error::dim(format!(
                "features {:?} do not match input dimension {}",
                features.shape(),
                self.config.input_dim
            )));
        }
        let x = tape.constant(features.clone());
        self.forward_from(tape, bound, x, opts)
    }

    fn forward_from(
        &self,
        tape: &mut Tape,
        bound: &BTreeMap<String, Var>,
        x: Var,
        opts: ForwardOptions,
    ) -> Result<ModelOutput> {
        let mut stages = Vec::with_capacity(self.config.num_stages());
        let mut input = x;
        for s in 0..self.config.num_stages() {
            let out = self.stage_forward(tape, bound, input, s, &opts)?;
            input = match self.config.refine_input {
                RefineInput::Probs => out.probs,
                RefineInput::Logits => out.logits,
            };
            stages.push(out);
        }
        Ok(ModelOutput {
            stages,
            params: bound.clone(),
        })
    }

    /// Frame labels from the last stage, in evaluation mode.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward_bound(&mut tape, &bound, features, ForwardOptions::eval())?;
        Ok(tape.value(out.last().logits).argmax_rows())
    }
}
