use rand::Rng;
use serde::{Deserialize, Serialize};
use tdsv_nn::layers::{sinusoidal_positions, BatchNorm1d, Conv1d, LayerNorm, Linear};
use tdsv_nn::{AttnLayout, Graph, Mode, ParamStore, Segments, Tensor, Var};

use super::ctc::ctc_loss_batch;
use super::tokens::{TextLabel, TokenSeq, BLANK_ID, CTC_VOCAB, DECODER_VOCAB};
use crate::audio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::pooling::{Asp, FrameStates};

/// Which transcript the decoder is taught to produce.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderTargets {
    /// Canonical sequence of the label the classifier currently predicts.
    #[default]
    Predicted,
    /// Canonical sequence of the true label.
    GroundTruth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.6,
            beta: 0.2,
            gamma: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(l1: f64, l2: f64, l3: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            l1,
            l2,
            l3,
            total: w.alpha * l1 + w.beta * l2 + w.gamma * l3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextExtractorConfig {
    pub input_dim: usize,
    /// Consecutive feature frames concatenated into one encoder step.
    pub frame_stack: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub d_k: usize,
    pub ff_dim: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub conv_kernel: usize,
    pub attn_hidden: usize,
    pub loss_weights: LossWeights,
    pub decoder_targets: DecoderTargets,
}

impl TextExtractorConfig {
    /// 4 + 4 blocks, 4 heads of width 64, feed-forward 1024.
    pub fn paper() -> Self {
        TextExtractorConfig {
            input_dim: 20,
            frame_stack: 1,
            encoder_blocks: 4,
            decoder_blocks: 4,
            heads: 4,
            d_k: 64,
            ff_dim: 1024,
            embed_dim: 192,
            n_classes: 6,
            conv_kernel: 3,
            attn_hidden: 128,
            loss_weights: LossWeights::default(),
            decoder_targets: DecoderTargets::Predicted,
        }
    }

    pub fn d_model(&self) -> usize {
        self.heads * self.d_k
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_k == 0 || self.d_model() % 2 != 0 {
            return Err(Error::Domain("model width must be positive and even".into()));
        }
        if self.frame_stack == 0 || self.conv_kernel % 2 == 0 || self.n_classes < 2 {
            return Err(Error::Domain("frame_stack >= 1, odd conv kernel and >= 2 classes required".into()));
        }
        Ok(())
    }
}

/// Same block counts and head count as [`TextExtractorConfig::paper`] at a
/// narrower width, with four-frame stacking.
impl Default for TextExtractorConfig {
    fn default() -> Self {
        TextExtractorConfig {
            frame_stack: 4,
            d_k: 16,
            ff_dim: 256,
            ..TextExtractorConfig::paper()
        }
    }
}

#[derive(Clone, Debug)]
struct MultiHead {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl MultiHead {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        MultiHead {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, xq: Var, xkv: Var, layout: AttnLayout) -> Result<Var> {
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xkv)?;
        let v = self.v.forward(g, store, xkv)?;
        let a = g.attention(q, k, v, layout)?;
        Ok(self.o.forward(g, store, a)?)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, ff: usize) -> Self {
        FeedForward {
            l1: Linear::new(store, rng, &format!("{name}.ff1"), d, ff),
            l2: Linear::new(store, rng, &format!("{name}.ff2"), ff, d),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.relu(h);
        Ok(self.l2.forward(g, store, h)?)
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHead,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: MultiHead,
    ln2: LayerNorm,
    cross_attn: MultiHead,
    ln3: LayerNorm,
    ff: FeedForward,
}

/// Everything the three heads produce for one packed batch.
#[derive(Clone, Debug)]
pub struct TextForward {
    /// Encoder output `[rows, d_model]`.
    pub encoded: Var,
    pub segs: Segments,
    /// `[batch, embed_dim]`
    pub e_text: Var,
    /// `[batch, n_classes]`
    pub logits: Var,
    /// `[rows, CTC_VOCAB]`
    pub ctc_log_probs: Var,
}

/// One training example for the text branch.
#[derive(Clone, Debug)]
pub struct TextExample {
    pub utt_id: String,
    pub feats: FeatureMatrix,
    pub label: TextLabel,
    pub transcript: TokenSeq,
}

/// Scalar loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct TextLossVars {
    pub l1: Var,
    pub l2: Var,
    pub l3: Var,
    pub total: Var,
}

/// Transformer encoder-decoder with classification, CTC and decoder heads.
#[derive(Clone, Debug)]
pub struct TextExtractor {
    pub cfg: TextExtractorConfig,
    in_proj: Linear,
    enc_blocks: Vec<EncoderBlock>,
    enc_ln: LayerNorm,
    cls_conv: Conv1d,
    cls_bn: BatchNorm1d,
    cls_asp: Asp,
    cls_embed: Linear,
    cls_fc: Linear,
    cls_bn_out: BatchNorm1d,
    ctc_blocks: Vec<(Conv1d, BatchNorm1d)>,
    ctc_out: Linear,
    tok_embed: String,
    dec_blocks: Vec<DecoderBlock>,
    dec_ln: LayerNorm,
    dec_out: Linear,
}

impl TextExtractor {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: TextExtractorConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model();
        let ff = cfg.ff_dim;
        let k = cfg.conv_kernel;
        let in_proj = Linear::new(store, rng, "text.in_proj", cfg.input_dim * cfg.frame_stack, d);
        let enc_blocks = (0..cfg.encoder_blocks)
            .map(|i| {
                let n = format!("text.enc{i}");
                EncoderBlock {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), d),
                    attn: MultiHead::new(store, rng, &format!("{n}.attn"), d),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), d),
                    ff: FeedForward::new(store, rng, &n, d, ff),
                }
            })
            .collect();
        let enc_ln = LayerNorm::new(store, "text.enc_ln", d);
        let cls_conv = Conv1d::new(store, rng, "text.cls.conv", d, d, k, 1);
        let cls_bn = BatchNorm1d::new(store, "text.cls.bn", d);
        let cls_asp = Asp::new(store, rng, "text.cls.asp", d, cfg.attn_hidden);
        let cls_embed = Linear::new(store, rng, "text.cls.embed", 2 * d, cfg.embed_dim);
        let cls_fc = Linear::new(store, rng, "text.cls.fc", cfg.embed_dim, cfg.n_classes);
        let cls_bn_out = BatchNorm1d::new(store, "text.cls.bn_out", cfg.n_classes);
        let ctc_blocks = (0..3)
            .map(|i| {
                (
                    Conv1d::new(store, rng, &format!("text.ctc{i}.conv"), d, d, k, 1),
                    BatchNorm1d::new(store, &format!("text.ctc{i}.bn"), d),
                )
            })
            .collect();
        let ctc_out = Linear::new(store, rng, "text.ctc.out", d, CTC_VOCAB);
        let tok_embed = "text.dec.embed".to_string();
        store.init_xavier(rng, &tok_embed, &[DECODER_VOCAB, d], DECODER_VOCAB, d);
        let dec_blocks = (0..cfg.decoder_blocks)
            .map(|i| {
                let n = format!("text.dec{i}");
                DecoderBlock {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), d),
                    self_attn: MultiHead::new(store, rng, &format!("{n}.self"), d),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), d),
                    cross_attn: MultiHead::new(store, rng, &format!("{n}.cross"), d),
                    ln3: LayerNorm::new(store, &format!("{n}.ln3"), d),
                    ff: FeedForward::new(store, rng, &n, d, ff),
                }
            })
            .collect();
        let dec_ln = LayerNorm::new(store, "text.dec_ln", d);
        let dec_out = Linear::new(store, rng, "text.dec.out", d, DECODER_VOCAB);
        Ok(TextExtractor {
            cfg,
            in_proj,
            enc_blocks,
            enc_ln,
            cls_conv,
            cls_bn,
            cls_asp,
            cls_embed,
            cls_fc,
            cls_bn_out,
            ctc_blocks,
            ctc_out,
            tok_embed,
            dec_blocks,
            dec_ln,
            dec_out,
        })
    }

    /// Encoder steps for `t` feature frames.
    pub fn encoded_len(&self, t: usize) -> usize {
        t.div_ceil(self.cfg.frame_stack)
    }

    /// Packs feature matrices into `[rows, input_dim * frame_stack]`,
    /// repeating the last frame to fill a partial stack.
    pub fn pack(&self, feats: &[&FeatureMatrix]) -> Result<(Tensor, Segments)> {
        let k = self.cfg.frame_stack;
        let dim = self.cfg.input_dim;
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(feats.len());
        for f in feats {
            if f.dim() != dim {
                return Err(Error::shape(format!("features have {} coefficients, model expects {}", f.dim(), dim)));
            }
            let t = f.num_frames();
            let steps = self.encoded_len(t);
            for s in 0..steps {
                for j in 0..k {
                    data.extend_from_slice(f.frame((s * k + j).min(t - 1)));
                }
            }
            lens.push(steps);
        }
        let segs = Segments::from_lengths(&lens);
        Ok((Tensor::new(&[segs.total(), dim * k], data)?, segs))
    }

    fn positions(&self, segs: &Segments) -> Result<Tensor> {
        let d = self.cfg.d_model();
        let mut data = Vec::with_capacity(segs.total() * d);
        for len in segs.lengths() {
            data.extend_from_slice(sinusoidal_positions(len, d)?.data());
        }
        Ok(Tensor::new(&[segs.total(), d], data)?)
    }

    /// Encoder over packed input rows.
    pub fn encode_packed(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments) -> Result<Var> {
        let h = self.in_proj.forward(g, store, x)?;
        let pe = g.input(self.positions(segs)?);
        let mut h = g.add(h, pe)?;
        let layout = AttnLayout::self_attention(segs, self.cfg.heads);
        for b in &self.enc_blocks {
            let n = b.ln1.forward(g, store, h)?;
            let a = b.attn.forward(g, store, n, n, layout.clone())?;
            h = g.add(h, a)?;
            let n = b.ln2.forward(g, store, h)?;
            let f = b.ff.forward(g, store, n)?;
            h = g.add(h, f)?;
        }
        Ok(self.enc_ln.forward(g, store, h)?)
    }

    /// `(E_text, logits)` from encoder rows.
    pub fn classify(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments, mode: Mode) -> Result<(Var, Var)> {
        let h = self.cls_conv.forward(g, store, x, segs)?;
        let h = g.relu(h);
        let h = self.cls_bn.forward(g, store, h, mode)?;
        let pooled = self.cls_asp.forward(g, store, h, segs)?.pooled(g)?;
        let e = self.cls_embed.forward(g, store, pooled)?;
        let z = self.cls_fc.forward(g, store, e)?;
        let logits = self.cls_bn_out.forward(g, store, z, mode)?;
        Ok((e, logits))
    }

    /// Per-frame CTC log-probabilities `[rows, CTC_VOCAB]`.
    pub fn ctc_log_probs(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments, mode: Mode) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in &self.ctc_blocks {
            h = conv.forward(g, store, h, segs)?;
            h = g.relu(h);
            h = bn.forward(g, store, h, mode)?;
        }
        let z = self.ctc_out.forward(g, store, h)?;
        Ok(g.log_softmax_rows(z))
    }

    /// Teacher-forced decoder logits `[Σ L, DECODER_VOCAB]` for decoder
    /// inputs `inputs` (each starting with SOS), attending to `memory`.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory: Var,
        mem_segs: &Segments,
        inputs: &[Vec<usize>],
    ) -> Result<Var> {
        if inputs.iter().any(|s| s.is_empty()) {
            return Err(Error::Domain("empty decoder target".into()));
        }
        let lens: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let segs = Segments::from_lengths(&lens);
        let emb = g.param(store, &self.tok_embed)?;
        let ids: Vec<usize> = inputs.iter().flatten().copied().collect();
        let x = g.gather_rows(emb, ids)?;
        let pe = g.input(self.positions(&segs)?);
        let mut h = g.add(x, pe)?;
        let self_layout = AttnLayout {
            causal: true,
            ..AttnLayout::self_attention(&segs, self.cfg.heads)
        };
        let cross_layout = AttnLayout {
            q_segs: segs.clone(),
            kv_segs: mem_segs.clone(),
            heads: self.cfg.heads,
            causal: false,
        };
        for b in &self.dec_blocks {
            let n = b.ln1.forward(g, store, h)?;
            let a = b.self_attn.forward(g, store, n, n, self_layout.clone())?;
            h = g.add(h, a)?;
            let n = b.ln2.forward(g, store, h)?;
            let a = b.cross_attn.forward(g, store, n, memory, cross_layout.clone())?;
            h = g.add(h, a)?;
            let n = b.ln3.forward(g, store, h)?;
            let f = b.ff.forward(g, store, n)?;
            h = g.add(h, f)?;
        }
        let h = self.dec_ln.forward(g, store, h)?;
        Ok(self.dec_out.forward(g, store, h)?)
    }

    /// Encoder and the classification and CTC heads over a batch.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feats: &[&FeatureMatrix], mode: Mode) -> Result<TextForward> {
        let (x, segs) = self.pack(feats)?;
        let x = g.input(x);
        let encoded = self.encode_packed(g, store, x, &segs)?;
        let (e_text, logits) = self.classify(g, store, encoded, &segs, mode)?;
        let ctc_log_probs = self.ctc_log_probs(g, store, encoded, &segs, mode)?;
        Ok(TextForward {
            encoded,
            segs,
            e_text,
            logits,
            ctc_log_probs,
        })
    }

    /// Labels whose canonical sequences the decoder should produce.
    pub fn decoder_labels(&self, g: &Graph, fwd: &TextForward, truth: &[TextLabel]) -> Vec<TextLabel> {
        match self.cfg.decoder_targets {
            DecoderTargets::GroundTruth => truth.to_vec(),
            DecoderTargets::Predicted => argmax_rows(g.value(fwd.logits))
                .into_iter()
                .map(|i| TextLabel::from_index(i).unwrap_or(TextLabel::D001))
                .collect(),
        }
    }

    /// The three losses and their weighted total for one batch.
    pub fn losses(&self, g: &mut Graph, store: &ParamStore, batch: &[&TextExample], mode: Mode) -> Result<(TextForward, TextLossVars)> {
        let feats: Vec<&FeatureMatrix> = batch.iter().map(|e| &e.feats).collect();
        let fwd = self.forward(g, store, &feats, mode)?;
        let truth: Vec<TextLabel> = batch.iter().map(|e| e.label).collect();
        let classes: Vec<usize> = truth.iter().map(|l| l.index()).collect();
        let l1 = g.cross_entropy(fwd.logits, &classes)?;
        let targets: Vec<Vec<usize>> = batch.iter().map(|e| e.transcript.ids()).collect();
        let l2 = ctc_loss_batch(g, fwd.ctc_log_probs, &fwd.segs, &targets, BLANK_ID).map_err(|e| match e {
            Error::Infeasible(m) => {
                let idx = m
                    .strip_prefix("batch item ")
                    .and_then(|r| r.split(':').next())
                    .and_then(|s| s.parse::<usize>().ok());
                let utt = idx.map(|i| batch[i].utt_id.as_str()).unwrap_or("?");
                Error::Infeasible(format!("utterance {}: {}", utt, m))
            }
            other => other,
        })?;
        let dec_labels = self.decoder_labels(g, &fwd, &truth);
        let (inputs, labels): (Vec<Vec<usize>>, Vec<Vec<usize>>) =
            dec_labels.iter().map(|l| l.canonical().decoder_io()).unzip();
        let y = self.decode(g, store, fwd.encoded, &fwd.segs, &inputs)?;
        let flat: Vec<usize> = labels.into_iter().flatten().collect();
        let l3 = g.cross_entropy(y, &flat)?;
        let w = self.cfg.loss_weights;
        let a = g.scale(l1, w.alpha);
        let b = g.scale(l2, w.beta);
        let c = g.scale(l3, w.gamma);
        let ab = g.add(a, b)?;
        let total = g.add(ab, c)?;
        Ok((fwd, TextLossVars { l1, l2, l3, total }))
    }

    /// Encoder output of one utterance, `[T', d_model]` time-major.
    pub fn encode(&self, store: &ParamStore, feats: &FeatureMatrix) -> Result<FrameStates> {
        let mut g = Graph::new();
        let (x, segs) = self.pack(&[feats])?;
        let x = g.input(x);
        let h = self.encode_packed(&mut g, store, x, &segs)?;
        FrameStates::from_time_major(g.value(h).clone())
    }

    /// Eval-mode text embeddings, one row per input.
    pub fn embed_batch(&self, store: &ParamStore, feats: &[&FeatureMatrix]) -> Result<Tensor> {
        let mut g = Graph::new();
        let (x, segs) = self.pack(feats)?;
        let x = g.input(x);
        let h = self.encode_packed(&mut g, store, x, &segs)?;
        let (e, _) = self.classify(&mut g, store, h, &segs, Mode::Eval)?;
        Ok(g.value(e).clone())
    }

    /// Eval-mode class predictions.
    pub fn predict(&self, store: &ParamStore, feats: &[&FeatureMatrix]) -> Result<Vec<TextLabel>> {
        let mut g = Graph::new();
        let (x, segs) = self.pack(feats)?;
        let x = g.input(x);
        let h = self.encode_packed(&mut g, store, x, &segs)?;
        let (_, logits) = self.classify(&mut g, store, h, &segs, Mode::Eval)?;
        Ok(argmax_rows(g.value(logits))
            .into_iter()
            .map(|i| TextLabel::from_index(i).unwrap_or(TextLabel::D001))
            .collect())
    }
}

pub(crate) fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            t.row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
