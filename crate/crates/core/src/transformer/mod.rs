//! Shared-stack seq2seq transformer controlled entirely by its attention
//! mask.
//!
//! One encoder stack serves both sides of the sequence: source positions
//! attend bidirectionally among themselves, target positions attend to the
//! full source and causally to earlier targets. Post-softmax attention of a
//! chosen layer is captured on every forward pass; it is the state the mask
//! policy acts on.

mod mask;

pub use mask::{ApplyLayers, AttentionMask, DynamicOverlay, MaskSet, MASKED};

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::numerics::{
    load_into_store, write_store, Graph, NodeId, NumericsError, ParamId, ParameterStore,
};
use crate::tokenizer::{self, Segment, TokenSequence, Vocab, EOS};

#[derive(Debug, Error)]
pub enum TransformerError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("mask is {mask} long but the sequence is {seq}")]
    MaskMismatch { mask: usize, seq: usize },
    #[error("capture layer {layer} out of range ({num_layers} layers)")]
    CaptureLayerOutOfRange { layer: usize, num_layers: usize },
    #[error("sequence has no target positions to train on")]
    NoTargetPositions,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            d_model: 64,
            d_ff: 128,
            vocab_size: 200,
            max_seq_len: 64,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TransformerError> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(TransformerError::BadConfig(format!(
                "d_model {} must be divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.max_seq_len < 8 {
            return Err(TransformerError::BadConfig(format!(
                "max_seq_len {} must be at least 8",
                self.max_seq_len
            )));
        }
        if self.num_layers == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return Err(TransformerError::BadConfig(
                "num_layers, d_ff and vocab_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(TransformerError::BadConfig(format!(
                "dropout_rate {} must be in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Default layer whose attention becomes the agent state.
    pub fn default_capture_layer(&self) -> usize {
        self.num_layers / 2
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    attn_ln_gain: ParamId,
    attn_ln_bias: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ff_ln_gain: ParamId,
    ff_ln_bias: ParamId,
}

#[derive(Debug, Clone)]
struct ModelParams {
    tok_emb: ParamId,
    pos_emb: ParamId,
    seg_emb: ParamId,
    emb_ln_gain: ParamId,
    emb_ln_bias: ParamId,
    layers: Vec<LayerParams>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Post-softmax attention of one layer, per head, captured during a forward
/// pass. Row = query position, column = key position.
#[derive(Debug, Clone)]
pub struct AttentionScores {
    pub layer: usize,
    pub seq_len: usize,
    /// One `seq_len x seq_len` row-major matrix per head.
    pub heads: Vec<Vec<f64>>,
}

impl AttentionScores {
    /// Head-averaged attention matrix.
    pub fn head_mean(&self) -> Vec<f64> {
        let n = self.seq_len * self.seq_len;
        let mut out = vec![0.0; n];
        for head in &self.heads {
            for (o, v) in out.iter_mut().zip(head) {
                *o += v;
            }
        }
        let h = self.heads.len() as f64;
        for o in &mut out {
            *o /= h;
        }
        out
    }
}

pub struct ForwardPass {
    pub graph: Graph,
    pub logits: NodeId,
    pub scores: AttentionScores,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParameterStore,
    params: ModelParams,
}

fn normal(rng: &mut ChaCha20Rng, std: f64) -> f64 {
    // Box-Muller; two uniforms in (0, 1]
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn init_matrix(
    store: &mut ParameterStore,
    name: String,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha20Rng,
) -> ParamId {
    let data: Vec<f64> = (0..rows * cols).map(|_| normal(rng, 0.02)).collect();
    store.add(
        name,
        crate::numerics::Tensor::new(vec![rows, cols], data).expect("sized data"),
    )
}

fn init_zeros(store: &mut ParameterStore, name: String, n: usize) -> ParamId {
    store.add(name, crate::numerics::Tensor::vector(&vec![0.0; n]))
}

fn init_ones(store: &mut ParameterStore, name: String, n: usize) -> ParamId {
    store.add(name, crate::numerics::Tensor::vector(&vec![1.0; n]))
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut ChaCha20Rng) -> Result<Self, TransformerError> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let d = cfg.d_model;
        let tok_emb = init_matrix(&mut store, "tok_emb".into(), cfg.vocab_size, d, rng);
        let pos_emb = init_matrix(&mut store, "pos_emb".into(), cfg.max_seq_len, d, rng);
        let seg_emb = init_matrix(&mut store, "seg_emb".into(), 2, d, rng);
        let emb_ln_gain = init_ones(&mut store, "emb_ln.gain".into(), d);
        let emb_ln_bias = init_zeros(&mut store, "emb_ln.bias".into(), d);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerParams {
                wq: init_matrix(&mut store, p("wq"), d, d, rng),
                bq: init_zeros(&mut store, p("bq"), d),
                wk: init_matrix(&mut store, p("wk"), d, d, rng),
                bk: init_zeros(&mut store, p("bk"), d),
                wv: init_matrix(&mut store, p("wv"), d, d, rng),
                bv: init_zeros(&mut store, p("bv"), d),
                wo: init_matrix(&mut store, p("wo"), d, d, rng),
                bo: init_zeros(&mut store, p("bo"), d),
                attn_ln_gain: init_ones(&mut store, p("attn_ln.gain"), d),
                attn_ln_bias: init_zeros(&mut store, p("attn_ln.bias"), d),
                ff1_w: init_matrix(&mut store, p("ff1.w"), d, cfg.d_ff, rng),
                ff1_b: init_zeros(&mut store, p("ff1.b"), cfg.d_ff),
                ff2_w: init_matrix(&mut store, p("ff2.w"), cfg.d_ff, d, rng),
                ff2_b: init_zeros(&mut store, p("ff2.b"), d),
                ff_ln_gain: init_ones(&mut store, p("ff_ln.gain"), d),
                ff_ln_bias: init_zeros(&mut store, p("ff_ln.bias"), d),
            });
        }
        let out_w = init_matrix(&mut store, "out.w".into(), d, cfg.vocab_size, rng);
        let out_b = init_zeros(&mut store, "out.b".into(), cfg.vocab_size);
        Ok(Model {
            cfg,
            store,
            params: ModelParams {
                tok_emb,
                pos_emb,
                seg_emb,
                emb_ln_gain,
                emb_ln_bias,
                layers,
                out_w,
                out_b,
            },
        })
    }

    /// Full forward pass: logits for every position plus the captured
    /// attention of `capture_layer`. `dropout` is only used in training.
    pub fn forward(
        &self,
        seq: &TokenSequence,
        masks: &MaskSet,
        capture_layer: usize,
        mut dropout: Option<(f64, &mut ChaCha20Rng)>,
    ) -> Result<ForwardPass, TransformerError> {
        let len = seq.len();
        if len > self.cfg.max_seq_len {
            return Err(TransformerError::SequenceTooLong {
                len,
                max: self.cfg.max_seq_len,
            });
        }
        if masks.seq_len() != len {
            return Err(TransformerError::MaskMismatch {
                mask: masks.seq_len(),
                seq: len,
            });
        }
        if capture_layer >= self.cfg.num_layers {
            return Err(TransformerError::CaptureLayerOutOfRange {
                layer: capture_layer,
                num_layers: self.cfg.num_layers,
            });
        }

        let mut g = Graph::new();
        let s = &self.store;
        let p = &self.params;
        let dk = self.cfg.d_model / self.cfg.num_heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let tok_table = g.param(s, p.tok_emb);
        let tok = g.embedding(tok_table, &seq.ids)?;
        let pos_table = g.param(s, p.pos_emb);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.embedding(pos_table, &positions)?;
        let seg_table = g.param(s, p.seg_emb);
        let seg_ids: Vec<usize> = seq
            .segment
            .iter()
            .map(|&sg| if sg == Segment::Source { 0 } else { 1 })
            .collect();
        let seg = g.embedding(seg_table, &seg_ids)?;
        let sum = g.add(tok, pos)?;
        let sum = g.add(sum, seg)?;
        let gain = g.param(s, p.emb_ln_gain);
        let bias = g.param(s, p.emb_ln_bias);
        let mut x = g.layernorm(sum, gain, bias)?;
        if let Some((rate, rng)) = dropout.as_mut() {
            x = g.dropout(x, *rate, *rng);
        }

        let mut captured: Vec<Vec<f64>> = Vec::new();
        for (l, layer) in p.layers.iter().enumerate() {
            let mask_node = {
                let m = masks.for_layer(l, capture_layer);
                g.constant(
                    crate::numerics::Tensor::new(vec![len, len], m.entries().to_vec())
                        .expect("mask is square"),
                )
            };

            let wq = g.param(s, layer.wq);
            let bq = g.param(s, layer.bq);
            let wk = g.param(s, layer.wk);
            let bk = g.param(s, layer.bk);
            let wv = g.param(s, layer.wv);
            let bv = g.param(s, layer.bv);
            let q = g.matmul(x, wq)?;
            let q = g.add_bias(q, bq)?;
            let k = g.matmul(x, wk)?;
            let k = g.add_bias(k, bk)?;
            let v = g.matmul(x, wv)?;
            let v = g.add_bias(v, bv)?;

            let mut head_ctx = Vec::with_capacity(self.cfg.num_heads);
            for h in 0..self.cfg.num_heads {
                let (lo, hi) = (h * dk, (h + 1) * dk);
                let qh = g.slice_cols(q, lo, hi)?;
                let kh = g.slice_cols(k, lo, hi)?;
                let vh = g.slice_cols(v, lo, hi)?;
                let kt = g.transpose(kh)?;
                let raw = g.matmul(qh, kt)?;
                let scaled = g.scale(raw, scale);
                let masked = g.add(scaled, mask_node)?;
                let attn = g.softmax_lastdim(masked)?;
                if l == capture_layer {
                    captured.push(g.data(attn).to_vec());
                }
                head_ctx.push(g.matmul(attn, vh)?);
            }
            let mut ctx = head_ctx[0];
            for &h in &head_ctx[1..] {
                ctx = g.concat_cols(ctx, h)?;
            }
            let wo = g.param(s, layer.wo);
            let bo = g.param(s, layer.bo);
            let proj = g.matmul(ctx, wo)?;
            let mut proj = g.add_bias(proj, bo)?;
            if let Some((rate, rng)) = dropout.as_mut() {
                proj = g.dropout(proj, *rate, *rng);
            }
            let res = g.add(x, proj)?;
            let gain = g.param(s, layer.attn_ln_gain);
            let bias = g.param(s, layer.attn_ln_bias);
            x = g.layernorm(res, gain, bias)?;

            let w1 = g.param(s, layer.ff1_w);
            let b1 = g.param(s, layer.ff1_b);
            let w2 = g.param(s, layer.ff2_w);
            let b2 = g.param(s, layer.ff2_b);
            let ff = g.matmul(x, w1)?;
            let ff = g.add_bias(ff, b1)?;
            let ff = g.gelu(ff);
            let ff = g.matmul(ff, w2)?;
            let mut ff = g.add_bias(ff, b2)?;
            if let Some((rate, rng)) = dropout.as_mut() {
                ff = g.dropout(ff, *rate, *rng);
            }
            let res = g.add(x, ff)?;
            let gain = g.param(s, layer.ff_ln_gain);
            let bias = g.param(s, layer.ff_ln_bias);
            x = g.layernorm(res, gain, bias)?;
        }

        let out_w = g.param(s, p.out_w);
        let out_b = g.param(s, p.out_b);
        let logits = g.matmul(x, out_w)?;
        let logits = g.add_bias(logits, out_b)?;

        Ok(ForwardPass {
            graph: g,
            logits,
            scores: AttentionScores {
                layer: capture_layer,
                seq_len: len,
                heads: captured,
            },
        })
    }

    /// Mean teacher-forced cross-entropy over target positions. Position `p`
    /// predicts token `p + 1`; only positions whose successor is
    /// target-flagged (and not PAD) count.
    pub fn supervised_loss(
        &self,
        seq: &TokenSequence,
        masks: &MaskSet,
        capture_layer: usize,
        dropout: Option<(f64, &mut ChaCha20Rng)>,
    ) -> Result<(ForwardPass, NodeId), TransformerError> {
        let targets = teacher_targets(seq);
        if targets.iter().all(|&t| t == IGNORE) {
            return Err(TransformerError::NoTargetPositions);
        }
        let mut pass = self.forward(seq, masks, capture_layer, dropout)?;
        let loss = pass.graph.cross_entropy(pass.logits, &targets, IGNORE)?;
        Ok((pass, loss))
    }

    /// State forward on a source-only sequence under the static mask.
    pub fn source_state(
        &self,
        seq: &TokenSequence,
        capture_layer: usize,
    ) -> Result<AttentionScores, TransformerError> {
        let masks = MaskSet::static_only(seq);
        let pass = self.forward(seq, &masks, capture_layer, None)?;
        Ok(pass.scores)
    }

    /// Greedily appends argmax tokens (ties to the lowest id) after SEP until
    /// EOS or `max_tgt` tokens. The overlay, when given, is held fixed for
    /// the whole episode.
    pub fn greedy_decode(
        &self,
        vocab: &Vocab,
        source: &str,
        overlay: Option<&DynamicOverlay>,
        apply: ApplyLayers,
        capture_layer: usize,
        max_tgt: usize,
    ) -> Result<String, TransformerError> {
        let budget = self
            .cfg
            .max_seq_len
            .saturating_sub(2 + max_tgt);
        let mut seq = tokenizer::encode_source(source, vocab, budget);
        let mut generated = Vec::new();
        for _ in 0..max_tgt {
            let masks = match overlay {
                Some(o) => MaskSet::with_overlay(&seq, o, apply),
                None => MaskSet::static_only(&seq),
            };
            let pass = self.forward(&seq, &masks, capture_layer, None)?;
            let row = &pass.graph.data(pass.logits)
                [(seq.len() - 1) * self.cfg.vocab_size..seq.len() * self.cfg.vocab_size];
            let next = argmax_lowest(row);
            seq.ids.push(next);
            seq.segment.push(Segment::Target);
            if next == EOS {
                break;
            }
            generated.push(next);
        }
        Ok(vocab.decode(&generated).join(" "))
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    // ── Checkpointing ───────────────────────────────────────────────

    /// Key=value config header, a `[params]` divider, then the binary
    /// parameter records.
    pub fn save(&self, path: &Path) -> Result<(), TransformerError> {
        let ferr = |e: io::Error| TransformerError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut f = io::BufWriter::new(fs::File::create(path).map_err(ferr)?);
        write!(f, "{}", self.config_header()).map_err(ferr)?;
        write_store(&mut f, &self.store).map_err(ferr)?;
        f.flush().map_err(ferr)?;
        Ok(())
    }

    fn config_header(&self) -> String {
        let c = &self.cfg;
        format!(
            "num_layers={}\nnum_heads={}\nd_model={}\nd_ff={}\nvocab_size={}\nmax_seq_len={}\ndropout_rate={}\n[params]\n",
            c.num_layers, c.num_heads, c.d_model, c.d_ff, c.vocab_size, c.max_seq_len, c.dropout_rate
        )
    }

    pub fn load(path: &Path) -> Result<Self, TransformerError> {
        let cerr = |message: String| TransformerError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let f = fs::File::open(path).map_err(|e| cerr(e.to_string()))?;
        let mut r = BufReader::new(f);
        let mut cfg = ModelConfig::default();
        loop {
            let mut line = Vec::new();
            r.read_until(b'\n', &mut line)
                .map_err(|e| cerr(e.to_string()))?;
            let text = String::from_utf8(line).map_err(|e| cerr(e.to_string()))?;
            let text = text.trim_end_matches('\n');
            if text == "[params]" {
                break;
            }
            let (key, value) = text
                .split_once('=')
                .ok_or_else(|| cerr(format!("bad header line: {text}")))?;
            let parse_usize =
                |v: &str| v.parse::<usize>().map_err(|e| cerr(format!("{key}: {e}")));
            match key {
                "num_layers" => cfg.num_layers = parse_usize(value)?,
                "num_heads" => cfg.num_heads = parse_usize(value)?,
                "d_model" => cfg.d_model = parse_usize(value)?,
                "d_ff" => cfg.d_ff = parse_usize(value)?,
                "vocab_size" => cfg.vocab_size = parse_usize(value)?,
                "max_seq_len" => cfg.max_seq_len = parse_usize(value)?,
                "dropout_rate" => {
                    cfg.dropout_rate = value
                        .parse::<f64>()
                        .map_err(|e| cerr(format!("dropout_rate: {e}")))?
                }
                other => return Err(cerr(format!("unknown header key {other}"))),
            }
        }
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut model = Model::new(cfg, &mut rng)?;
        load_params(&mut r, &mut model.store).map_err(|e| cerr(e.to_string()))?;
        Ok(model)
    }
}

use rand::SeedableRng;

fn load_params(r: &mut impl Read, store: &mut ParameterStore) -> io::Result<()> {
    load_into_store(r, store)
}

pub const IGNORE: usize = usize::MAX;

/// Next-token targets for teacher forcing: `targets[p] = ids[p + 1]` when
/// position `p + 1` is a non-PAD target, IGNORE otherwise.
pub fn teacher_targets(seq: &TokenSequence) -> Vec<usize> {
    let mut targets = vec![IGNORE; seq.len()];
    for p in 0..seq.len().saturating_sub(1) {
        if seq.segment[p + 1] == Segment::Target && seq.ids[p + 1] != tokenizer::PAD {
            targets[p] = seq.ids[p + 1];
        }
    }
    targets
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-source-token state rows: head-averaged attention received (column
/// mean over all query rows) followed by the token's own attention row
/// pooled into `buckets` contiguous buckets. `state_dim = buckets + 1`.
pub fn state_vector(scores: &AttentionScores, n_src: usize, buckets: usize) -> Vec<Vec<f64>> {
    let n = scores.seq_len;
    let mean = scores.head_mean();
    let mut out = Vec::with_capacity(n_src);
    for j in 0..n_src.min(n) {
        let received = (0..n).map(|i| mean[i * n + j]).sum::<f64>() / n as f64;
        let row = &mean[j * n..(j + 1) * n];
        let mut state = Vec::with_capacity(buckets + 1);
        state.push(received);
        state.extend(pool_buckets(row, buckets));
        out.push(state);
    }
    out
}

fn pool_buckets(row: &[f64], buckets: usize) -> Vec<f64> {
    let n = row.len();
    let mut out = vec![0.0; buckets];
    for (b, slot) in out.iter_mut().enumerate() {
        let lo = b * n / buckets;
        let hi = (b + 1) * n / buckets;
        *slot = row[lo..hi].iter().sum();
    }
    out
}

#[cfg(test)]
mod tests;
