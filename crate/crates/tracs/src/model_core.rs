//! Encoder interface, multi-task classification head, and the joint loss.
//!
//! The production-scale pretrained encoder is out of scope; the crate
//! ships a small trainable attention-pooling encoder behind the same
//! interface. All arithmetic is f64 for exact reproducibility.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunker::Chunk;
use crate::error::{Error, Result};

/// Whether encoder parameters receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Frozen,
    Trainable,
}

/// Pooled-representation text encoder.
///
/// The pooled output is the representation at the leading token position
/// (index 0 of every stored chunk).
pub trait Encoder {
    fn hidden_size(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn mode(&self) -> EncoderMode;
    /// Deterministic in evaluation mode for fixed weights and input.
    fn encode_pooled(&self, tokens: &[u32]) -> Result<Vec<f64>>;
    /// Identifier persisted into checkpoint manifests.
    fn identifier(&self) -> String;
}

/// Small attention-pooling encoder.
///
/// The leading token's embedding forms the query; all positions provide
/// keys and values. The attention context is projected and squashed to
/// give the pooled representation, so position 0 carries the document
/// summary just like a transformer [CLS] slot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TinyEncoder {
    pub vocab_size: usize,
    pub hidden: usize,
    pub mode: EncoderMode,
    pub params: Vec<f64>,
}

// Flat parameter layout: emb | w_q | w_k | w_v | w_o | b_o.
impl TinyEncoder {
    pub fn new(vocab_size: usize, hidden: usize, seed: u64) -> Self {
        let n = vocab_size * hidden + 4 * hidden * hidden + hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 0.1;
        let mut params: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        // b_o starts at zero.
        let b_o = n - hidden;
        params[b_o..].fill(0.0);
        TinyEncoder {
            vocab_size,
            hidden,
            mode: EncoderMode::Trainable,
            params,
        }
    }

    pub fn with_mode(mut self, mode: EncoderMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn off_emb(&self) -> usize {
        0
    }
    fn off_wq(&self) -> usize {
        self.vocab_size * self.hidden
    }
    fn off_wk(&self) -> usize {
        self.off_wq() + self.hidden * self.hidden
    }
    fn off_wv(&self) -> usize {
        self.off_wk() + self.hidden * self.hidden
    }
    fn off_wo(&self) -> usize {
        self.off_wv() + self.hidden * self.hidden
    }
    fn off_bo(&self) -> usize {
        self.off_wo() + self.hidden * self.hidden
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} outside tokenizer vocabulary (size {})",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Forward pass keeping the intermediates needed for backprop.
    pub fn forward_cached(&self, tokens: &[u32]) -> Result<(Vec<f64>, EncoderCache)> {
        self.check_tokens(tokens)?;
        let h = self.hidden;
        let p = &self.params;
        let n = tokens.len();

        let emb_row = |t: u32| &p[self.off_emb() + t as usize * h..self.off_emb() + (t as usize + 1) * h];
        let matvec = |off: usize, x: &[f64]| -> Vec<f64> {
            (0..h)
                .map(|r| {
                    let row = &p[off + r * h..off + (r + 1) * h];
                    row.iter().zip(x).map(|(a, b)| a * b).sum()
                })
                .collect()
        };

        let query = matvec(self.off_wq(), emb_row(tokens[0]));
        let mut keys = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        for &t in tokens {
            let e = emb_row(t);
            keys.push(matvec(self.off_wk(), e));
            values.push(matvec(self.off_wv(), e));
        }

        let scale = 1.0 / (h as f64).sqrt();
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| k.iter().zip(&query).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let attn = softmax(&scores);

        let mut context = vec![0.0; h];
        for (a, v) in attn.iter().zip(&values) {
            for (c, vi) in context.iter_mut().zip(v) {
                *c += a * vi;
            }
        }

        let pre: Vec<f64> = matvec(self.off_wo(), &context)
            .iter()
            .zip(&p[self.off_bo()..self.off_bo() + h])
            .map(|(a, b)| a + b)
            .collect();
        let pooled: Vec<f64> = pre.iter().map(|x| x.tanh()).collect();
        if pooled.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("encoder pooled output".into()));
        }

        Ok((
            pooled.clone(),
            EncoderCache {
                query,
                keys,
                values,
                attn,
                context,
                pooled,
            },
        ))
    }

    /// Accumulate parameter gradients for one sequence given the gradient
    /// of the loss with respect to the pooled output.
    pub fn backward(
        &self,
        tokens: &[u32],
        cache: &EncoderCache,
        d_pooled: &[f64],
        grads: &mut [f64],
    ) {
        let h = self.hidden;
        let p = &self.params;
        let n = tokens.len();
        let scale = 1.0 / (h as f64).sqrt();

        let emb_row = |t: u32| &p[self.off_emb() + t as usize * h..self.off_emb() + (t as usize + 1) * h];
        // y = W x accumulation helpers.
        let matvec_t = |off: usize, x: &[f64]| -> Vec<f64> {
            // W^T x
            let mut out = vec![0.0; h];
            for (r, xr) in x.iter().enumerate() {
                let row = &p[off + r * h..off + (r + 1) * h];
                for (o, w) in out.iter_mut().zip(row) {
                    *o += w * xr;
                }
            }
            out
        };

        // tanh backward.
        let d_pre: Vec<f64> = d_pooled
            .iter()
            .zip(&cache.pooled)
            .map(|(d, y)| d * (1.0 - y * y))
            .collect();

        // pre = W_o context + b_o
        for (r, dr) in d_pre.iter().enumerate() {
            let g = &mut grads[self.off_wo() + r * h..self.off_wo() + (r + 1) * h];
            for (gi, c) in g.iter_mut().zip(&cache.context) {
                *gi += dr * c;
            }
        }
        for (g, d) in grads[self.off_bo()..self.off_bo() + h].iter_mut().zip(&d_pre) {
            *g += d;
        }
        let d_context = matvec_t(self.off_wo(), &d_pre);

        // context = sum_i attn_i * values_i
        let mut d_scores = vec![0.0; n];
        let mut d_values: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            d_values.push(d_context.iter().map(|d| d * cache.attn[i]).collect());
            d_scores[i] = d_context
                .iter()
                .zip(&cache.values[i])
                .map(|(d, v)| d * v)
                .sum();
        }
        // softmax backward
        let dot: f64 = d_scores.iter().zip(&cache.attn).map(|(d, a)| d * a).sum();
        for (ds, a) in d_scores.iter_mut().zip(&cache.attn) {
            *ds = a * (*ds - dot);
        }

        // scores_i = scale * q . k_i
        let mut d_query = vec![0.0; h];
        let mut d_keys: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let ds = d_scores[i] * scale;
            for (dq, k) in d_query.iter_mut().zip(&cache.keys[i]) {
                *dq += ds * k;
            }
            d_keys.push(cache.query.iter().map(|q| ds * q).collect());
        }

        // Per-position embedding gradients via the k/v projections.
        let mut d_emb: Vec<Vec<f64>> = vec![vec![0.0; h]; n];
        for i in 0..n {
            let e = emb_row(tokens[i]);
            for (r, dr) in d_keys[i].iter().enumerate() {
                let g = &mut grads[self.off_wk() + r * h..self.off_wk() + (r + 1) * h];
                for (gi, ei) in g.iter_mut().zip(e) {
                    *gi += dr * ei;
                }
            }
            for (r, dr) in d_values[i].iter().enumerate() {
                let g = &mut grads[self.off_wv() + r * h..self.off_wv() + (r + 1) * h];
                for (gi, ei) in g.iter_mut().zip(e) {
                    *gi += dr * ei;
                }
            }
            let dk = matvec_t(self.off_wk(), &d_keys[i]);
            let dv = matvec_t(self.off_wv(), &d_values[i]);
            for ((de, a), b) in d_emb[i].iter_mut().zip(&dk).zip(&dv) {
                *de += a + b;
            }
        }
        // Query path touches position 0 only.
        {
            let e0 = emb_row(tokens[0]);
            for (r, dr) in d_query.iter().enumerate() {
                let g = &mut grads[self.off_wq() + r * h..self.off_wq() + (r + 1) * h];
                for (gi, ei) in g.iter_mut().zip(e0) {
                    *gi += dr * ei;
                }
            }
            let dq_e = matvec_t(self.off_wq(), &d_query);
            for (de, d) in d_emb[0].iter_mut().zip(&dq_e) {
                *de += d;
            }
        }
        for (i, &t) in tokens.iter().enumerate() {
            let g = &mut grads[self.off_emb() + t as usize * h..self.off_emb() + (t as usize + 1) * h];
            for (gi, d) in g.iter_mut().zip(&d_emb[i]) {
                *gi += d;
            }
        }
    }
}

impl Encoder for TinyEncoder {
    fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn mode(&self) -> EncoderMode {
        self.mode
    }

    fn encode_pooled(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.forward_cached(tokens).map(|(pooled, _)| pooled)
    }

    fn identifier(&self) -> String {
        format!("tiny-attn-v1:h{}:v{}", self.hidden, self.vocab_size)
    }
}

/// Intermediates of one encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    query: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    attn: Vec<f64>,
    context: Vec<f64>,
    pooled: Vec<f64>,
}

/// Number of boolean attribute heads.
pub const NUM_BOOLEAN_LABELS: usize = 4;

/// Linear projections from the pooled vector to K telescope logits and
/// 4 boolean logits (order: science, instrumentation, mention,
/// not_telescope).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiTaskHead {
    pub hidden: usize,
    pub num_classes: usize,
    pub params: Vec<f64>,
}

// Layout: w_t (K x H) | b_t (K) | w_b (4 x H) | b_b (4).
impl MultiTaskHead {
    /// Zero biases, small uniform weights from the documented seed.
    pub fn new(hidden: usize, num_classes: usize, seed: u64) -> Self {
        let n = num_classes * hidden + num_classes + NUM_BOOLEAN_LABELS * hidden + NUM_BOOLEAN_LABELS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let (bt0, bt1) = (num_classes * hidden, num_classes * hidden + num_classes);
        params[bt0..bt1].fill(0.0);
        let bb0 = n - NUM_BOOLEAN_LABELS;
        params[bb0..].fill(0.0);
        MultiTaskHead {
            hidden,
            num_classes,
            params,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn off_wt(&self) -> usize {
        0
    }
    fn off_bt(&self) -> usize {
        self.num_classes * self.hidden
    }
    fn off_wb(&self) -> usize {
        self.off_bt() + self.num_classes
    }
    fn off_bb(&self) -> usize {
        self.off_wb() + NUM_BOOLEAN_LABELS * self.hidden
    }

    /// Project one pooled vector to (K telescope logits, 4 boolean logits).
    pub fn forward(&self, pooled: &[f64]) -> Result<(Vec<f64>, [f64; NUM_BOOLEAN_LABELS])> {
        if pooled.len() != self.hidden {
            return Err(Error::Shape(format!(
                "pooled vector has length {}, head expects {}",
                pooled.len(),
                self.hidden
            )));
        }
        let h = self.hidden;
        let tel: Vec<f64> = (0..self.num_classes)
            .map(|r| {
                let row = &self.params[self.off_wt() + r * h..self.off_wt() + (r + 1) * h];
                row.iter().zip(pooled).map(|(a, b)| a * b).sum::<f64>()
                    + self.params[self.off_bt() + r]
            })
            .collect();
        let mut boolean = [0.0; NUM_BOOLEAN_LABELS];
        for (r, out) in boolean.iter_mut().enumerate() {
            let row = &self.params[self.off_wb() + r * h..self.off_wb() + (r + 1) * h];
            *out = row.iter().zip(pooled).map(|(a, b)| a * b).sum::<f64>()
                + self.params[self.off_bb() + r];
        }
        Ok((tel, boolean))
    }

    /// Accumulate head gradients and return the gradient w.r.t. pooled.
    pub fn backward(
        &self,
        pooled: &[f64],
        d_tel: &[f64],
        d_bool: &[f64; NUM_BOOLEAN_LABELS],
        grads: &mut [f64],
    ) -> Vec<f64> {
        let h = self.hidden;
        let mut d_pooled = vec![0.0; h];
        for (r, dr) in d_tel.iter().enumerate() {
            let wrow = &self.params[self.off_wt() + r * h..self.off_wt() + (r + 1) * h];
            let grow = &mut grads[self.off_wt() + r * h..self.off_wt() + (r + 1) * h];
            for ((g, p), (dp, w)) in grow.iter_mut().zip(pooled).zip(d_pooled.iter_mut().zip(wrow)) {
                *g += dr * p;
                *dp += dr * w;
            }
            grads[self.off_bt() + r] += dr;
        }
        for (r, dr) in d_bool.iter().enumerate() {
            let wrow = &self.params[self.off_wb() + r * h..self.off_wb() + (r + 1) * h];
            let grow = &mut grads[self.off_wb() + r * h..self.off_wb() + (r + 1) * h];
            for ((g, p), (dp, w)) in grow.iter_mut().zip(pooled).zip(d_pooled.iter_mut().zip(wrow)) {
                *g += dr * p;
                *dp += dr * w;
            }
            grads[self.off_bb() + r] += dr;
        }
        d_pooled
    }
}

/// Per-chunk logits for both tasks. Construction rejects non-finite values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkPrediction {
    pub bibcode: String,
    pub chunk_index: usize,
    pub telescope_logits: Vec<f64>,
    pub boolean_logits: [f64; NUM_BOOLEAN_LABELS],
}

impl ChunkPrediction {
    pub fn new(
        bibcode: String,
        chunk_index: usize,
        telescope_logits: Vec<f64>,
        boolean_logits: [f64; NUM_BOOLEAN_LABELS],
    ) -> Result<Self> {
        if telescope_logits.iter().any(|x| !x.is_finite())
            || boolean_logits.iter().any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite(format!(
                "logits for {bibcode} chunk {chunk_index}"
            )));
        }
        Ok(ChunkPrediction {
            bibcode,
            chunk_index,
            telescope_logits,
            boolean_logits,
        })
    }
}

/// Run encoder and head on one chunk.
pub fn forward_chunk<E: Encoder>(
    encoder: &E,
    head: &MultiTaskHead,
    chunk: &Chunk,
) -> Result<ChunkPrediction> {
    let pooled = encoder.encode_pooled(&chunk.tokens)?;
    let (tel, boolean) = head.forward(&pooled)?;
    ChunkPrediction::new(chunk.bibcode.clone(), chunk.chunk_index, tel, boolean)
}

/// Reduction over the four boolean BCE terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoolReduction {
    #[default]
    Mean,
    Sum,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Stable softmax over arbitrary logits (public for aggregation).
pub fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}

/// Numerically stable sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// BCE-with-logits for one label: max(x,0) - x*y + ln(1 + e^{-|x|}).
fn bce_with_logits(logit: f64, target: bool) -> f64 {
    let y = f64::from(target);
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

fn validate_joint_inputs(
    telescope_logits: &[f64],
    telescope_target: usize,
    boolean_logits: &[f64; NUM_BOOLEAN_LABELS],
) -> Result<()> {
    if telescope_target >= telescope_logits.len() {
        return Err(Error::Validation(format!(
            "telescope target {telescope_target} out of range for {} classes",
            telescope_logits.len()
        )));
    }
    if telescope_logits.iter().any(|x| !x.is_finite())
        || boolean_logits.iter().any(|x| !x.is_finite())
    {
        return Err(Error::NonFinite("joint loss logits".into()));
    }
    Ok(())
}

/// Softmax cross-entropy on the telescope logits plus BCE-with-logits on
/// the four boolean logits (mean over labels by default).
pub fn joint_loss(
    telescope_logits: &[f64],
    telescope_target: usize,
    boolean_logits: &[f64; NUM_BOOLEAN_LABELS],
    boolean_targets: &[bool; NUM_BOOLEAN_LABELS],
    reduction: BoolReduction,
) -> Result<f64> {
    validate_joint_inputs(telescope_logits, telescope_target, boolean_logits)?;
    let ce = log_sum_exp(telescope_logits) - telescope_logits[telescope_target];
    let bce_sum: f64 = boolean_logits
        .iter()
        .zip(boolean_targets)
        .map(|(&x, &y)| bce_with_logits(x, y))
        .sum();
    let bce = match reduction {
        BoolReduction::Mean => bce_sum / NUM_BOOLEAN_LABELS as f64,
        BoolReduction::Sum => bce_sum,
    };
    Ok(ce + bce)
}

/// Joint loss with analytic gradients w.r.t. both logit vectors.
pub fn joint_loss_with_grad(
    telescope_logits: &[f64],
    telescope_target: usize,
    boolean_logits: &[f64; NUM_BOOLEAN_LABELS],
    boolean_targets: &[bool; NUM_BOOLEAN_LABELS],
    reduction: BoolReduction,
) -> Result<(f64, Vec<f64>, [f64; NUM_BOOLEAN_LABELS])> {
    let loss = joint_loss(
        telescope_logits,
        telescope_target,
        boolean_logits,
        boolean_targets,
        reduction,
    )?;
    let mut d_tel = softmax(telescope_logits);
    d_tel[telescope_target] -= 1.0;
    let factor = match reduction {
        BoolReduction::Mean => 1.0 / NUM_BOOLEAN_LABELS as f64,
        BoolReduction::Sum => 1.0,
    };
    let mut d_bool = [0.0; NUM_BOOLEAN_LABELS];
    for i in 0..NUM_BOOLEAN_LABELS {
        d_bool[i] = (sigmoid(boolean_logits[i]) - f64::from(boolean_targets[i])) * factor;
    }
    Ok((loss, d_tel, d_bool))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::{CLS_ID, SEP_ID};
    use rand::Rng;

    fn chunk_with(tokens: Vec<u32>) -> Chunk {
        Chunk {
            bibcode: "b1".into(),
            telescope: Some("HST".into()),
            chunk_index: 0,
            n_chunks: 1,
            tokens,
            labels: None,
        }
    }

    #[test]
    fn forward_chunk_shapes_and_determinism() {
        let encoder = TinyEncoder::new(50, 16, 1);
        let head = MultiTaskHead::new(16, 3, 2);
        let chunk = chunk_with(vec![CLS_ID, 10, 11, 12, SEP_ID]);
        let a = forward_chunk(&encoder, &head, &chunk).unwrap();
        let b = forward_chunk(&encoder, &head, &chunk).unwrap();
        assert_eq!(a.telescope_logits.len(), 3);
        assert_eq!(a.boolean_logits.len(), 4);
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_vocabulary_token_rejected() {
        let encoder = TinyEncoder::new(50, 16, 1);
        let head = MultiTaskHead::new(16, 3, 2);
        let chunk = chunk_with(vec![CLS_ID, 99, SEP_ID]);
        assert!(forward_chunk(&encoder, &head, &chunk).is_err());
    }

    #[test]
    fn hand_computed_forward_pass() {
        // H=2, V=4; set weights so the whole pass is checkable by hand.
        let mut encoder = TinyEncoder::new(4, 2, 0);
        encoder.params.fill(0.0);
        // Embeddings: token 1 (CLS) -> [1, 0]; token 3 -> [0, 2].
        let h = 2;
        encoder.params[1 * h] = 1.0;
        encoder.params[3 * h + 1] = 2.0;
        // W_q = W_k = identity; W_v = identity; W_o = identity; b_o = 0.
        let eye = |params: &mut [f64], off: usize| {
            params[off] = 1.0;
            params[off + 3] = 1.0;
        };
        let (wq, wk, wv, wo) = (
            encoder.off_wq(),
            encoder.off_wk(),
            encoder.off_wv(),
            encoder.off_wo(),
        );
        eye(&mut encoder.params, wq);
        eye(&mut encoder.params, wk);
        eye(&mut encoder.params, wv);
        eye(&mut encoder.params, wo);

        // Tokens [1, 3]: q = [1,0]; k0=[1,0], k1=[0,2]; scores = [1,0]/sqrt(2).
        let pooled = encoder.encode_pooled(&[1, 3]).unwrap();
        let s0 = 1.0 / 2.0f64.sqrt();
        let a0 = s0.exp() / (s0.exp() + 1.0);
        let expected = [(a0 * 1.0).tanh(), ((1.0 - a0) * 2.0).tanh()];
        assert!((pooled[0] - expected[0]).abs() < 1e-12);
        assert!((pooled[1] - expected[1]).abs() < 1e-12);

        // Head with hand-set weights on the pooled vector.
        let mut head = MultiTaskHead::new(2, 2, 0);
        head.params.fill(0.0);
        head.params[0] = 1.0; // w_t row 0 = [1, 0]
        head.params[3] = -1.0; // w_t row 1 = [0, -1]
        head.params[4] = 0.5; // b_t[0]
        let (tel, boolean) = head.forward(&pooled).unwrap();
        assert!((tel[0] - (expected[0] + 0.5)).abs() < 1e-12);
        assert!((tel[1] + expected[1]).abs() < 1e-12);
        assert_eq!(boolean, [0.0; 4]);
    }

    #[test]
    fn uniform_logits_loss_is_ln3_plus_ln2() {
        let loss = joint_loss(
            &[0.0, 0.0, 0.0],
            0,
            &[0.0; 4],
            &[true, false, true, false],
            BoolReduction::Mean,
        )
        .unwrap();
        assert!((loss - (3.0f64.ln() + 2.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn near_perfect_prediction_loss_is_tiny() {
        let loss = joint_loss(
            &[20.0, 0.0, 0.0],
            0,
            &[20.0, -20.0, 20.0, -20.0],
            &[true, false, true, false],
            BoolReduction::Mean,
        )
        .unwrap();
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn loss_is_sum_of_its_two_terms() {
        let tel = [0.3, -1.2, 0.7];
        let booleans = [0.5, -0.5, 2.0, -3.0];
        let targets = [true, true, false, false];
        let ce = log_sum_exp(&tel) - tel[2];
        let bce: f64 = booleans
            .iter()
            .zip(&targets)
            .map(|(&x, &y)| bce_with_logits(x, y))
            .sum::<f64>()
            / 4.0;
        let loss = joint_loss(&tel, 2, &booleans, &targets, BoolReduction::Mean).unwrap();
        assert!((loss - (ce + bce)).abs() < 1e-12);
        let loss_sum = joint_loss(&tel, 2, &booleans, &targets, BoolReduction::Sum).unwrap();
        assert!((loss_sum - (ce + bce * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn ce_term_is_shift_invariant() {
        let tel = [0.3, -1.2, 0.7];
        let shifted: Vec<f64> = tel.iter().map(|x| x + 5.5).collect();
        let booleans = [0.0; 4];
        let targets = [false; 4];
        let a = joint_loss(&tel, 1, &booleans, &targets, BoolReduction::Mean).unwrap();
        let b = joint_loss(&shifted, 1, &booleans, &targets, BoolReduction::Mean).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn bce_term_is_monotone_toward_target() {
        let targets = [true, false, false, false];
        let mut prev = f64::INFINITY;
        for step in 0..20 {
            let x = -5.0 + step as f64;
            let loss = joint_loss(&[0.0, 0.0], 0, &[x, 0.0, 0.0, 0.0], &targets, BoolReduction::Mean)
                .unwrap();
            assert!(loss <= prev + 1e-12);
            prev = loss;
        }
    }

    #[test]
    fn boolean_label_permutation_leaves_loss_unchanged() {
        let booleans = [0.5, -0.5, 2.0, -3.0];
        let targets = [true, false, true, false];
        let a = joint_loss(&[0.1, 0.2], 0, &booleans, &targets, BoolReduction::Mean).unwrap();
        let perm = [2usize, 0, 3, 1];
        let pb = [booleans[perm[0]], booleans[perm[1]], booleans[perm[2]], booleans[perm[3]]];
        let pt = [targets[perm[0]], targets[perm[1]], targets[perm[2]], targets[perm[3]]];
        let b = joint_loss(&[0.1, 0.2], 0, &pb, &pt, BoolReduction::Mean).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn target_out_of_range_rejected() {
        assert!(joint_loss(&[0.0, 0.0], 2, &[0.0; 4], &[false; 4], BoolReduction::Mean).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let eps = 1e-6;
        for _ in 0..100 {
            let k = rng.gen_range(2..6);
            let tel: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut booleans = [0.0; 4];
            for b in &mut booleans {
                *b = rng.gen_range(-3.0..3.0);
            }
            let target = rng.gen_range(0..k);
            let bt = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
            let (_, d_tel, d_bool) =
                joint_loss_with_grad(&tel, target, &booleans, &bt, BoolReduction::Mean).unwrap();

            for i in 0..k {
                let mut plus = tel.clone();
                let mut minus = tel.clone();
                plus[i] += eps;
                minus[i] -= eps;
                let lp = joint_loss(&plus, target, &booleans, &bt, BoolReduction::Mean).unwrap();
                let lm = joint_loss(&minus, target, &booleans, &bt, BoolReduction::Mean).unwrap();
                let fd = (lp - lm) / (2.0 * eps);
                let denom = fd.abs().max(d_tel[i].abs()).max(1e-8);
                assert!((fd - d_tel[i]).abs() / denom < 1e-4, "tel grad {i}");
            }
            for i in 0..4 {
                let mut plus = booleans;
                let mut minus = booleans;
                plus[i] += eps;
                minus[i] -= eps;
                let lp = joint_loss(&tel, target, &plus, &bt, BoolReduction::Mean).unwrap();
                let lm = joint_loss(&tel, target, &minus, &bt, BoolReduction::Mean).unwrap();
                let fd = (lp - lm) / (2.0 * eps);
                let denom = fd.abs().max(d_bool[i].abs()).max(1e-8);
                assert!((fd - d_bool[i]).abs() / denom < 1e-4, "bool grad {i}");
            }
        }
    }

    #[test]
    fn encoder_and_head_gradients_match_finite_differences() {
        let mut encoder = TinyEncoder::new(12, 6, 5);
        let head = MultiTaskHead::new(6, 3, 6);
        let tokens = vec![CLS_ID, 4, 9, 7, SEP_ID];
        let targets = [true, false, true, true];

        let loss_of = |enc: &TinyEncoder, hd: &MultiTaskHead| -> f64 {
            let pooled = enc.encode_pooled(&tokens).unwrap();
            let (tel, boolean) = hd.forward(&pooled).unwrap();
            joint_loss(&tel, 1, &boolean, &targets, BoolReduction::Mean).unwrap()
        };

        let (pooled, cache) = encoder.forward_cached(&tokens).unwrap();
        let (tel, boolean) = head.forward(&pooled).unwrap();
        let (_, d_tel, d_bool) =
            joint_loss_with_grad(&tel, 1, &boolean, &targets, BoolReduction::Mean).unwrap();
        let mut head_grads = vec![0.0; head.num_params()];
        let d_pooled = head.backward(&pooled, &d_tel, &d_bool, &mut head_grads);
        let mut enc_grads = vec![0.0; encoder.num_params()];
        encoder.backward(&tokens, &cache, &d_pooled, &mut enc_grads);

        let eps = 1e-6;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        // Spot-check a sample of encoder parameters (all used token rows
        // plus the projection blocks) and all head parameters.
        let mut indices: Vec<usize> = (0..40)
            .map(|_| rng.gen_range(encoder.off_wq()..encoder.num_params()))
            .collect();
        for &t in &tokens {
            indices.push(t as usize * encoder.hidden);
        }
        for idx in indices {
            let orig = encoder.params[idx];
            encoder.params[idx] = orig + eps;
            let lp = loss_of(&encoder, &head);
            encoder.params[idx] = orig - eps;
            let lm = loss_of(&encoder, &head);
            encoder.params[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let denom = fd.abs().max(enc_grads[idx].abs()).max(1e-6);
            assert!(
                (fd - enc_grads[idx]).abs() / denom < 1e-3,
                "encoder param {idx}: fd={fd} grad={}",
                enc_grads[idx]
            );
        }
        let mut head_clone = head.clone();
        for idx in 0..head.num_params() {
            let orig = head_clone.params[idx];
            head_clone.params[idx] = orig + eps;
            let lp = loss_of(&encoder, &head_clone);
            head_clone.params[idx] = orig - eps;
            let lm = loss_of(&encoder, &head_clone);
            head_clone.params[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let denom = fd.abs().max(head_grads[idx].abs()).max(1e-6);
            assert!(
                (fd - head_grads[idx]).abs() / denom < 1e-3,
                "head param {idx}"
            );
        }
    }
}
