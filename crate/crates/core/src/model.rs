//! Decoder-only transformer with a language-model head and an optional
//! classification head.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{init_normal, ParamId, ParamStore, Scalar, SeqLayout, Tape, Tensor, Var};
use crate::tokenizer::{TokenId, Vocabulary};

const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub num_classes: Option<usize>,
    pub mlp_multiplier: usize,
    /// Share the LM head with the token embedding table.
    pub tie_head: bool,
    pub dropout: f64,
}

impl ModelConfig {
    /// 4 layers, 4 heads, hidden 128.
    pub fn desk(vocab: &Vocabulary) -> Self {
        Self {
            layers: 4,
            heads: 4,
            hidden: 128,
            max_seq_len: 512,
            vocab_size: vocab.size(),
            num_classes: None,
            mlp_multiplier: 4,
            tie_head: true,
            dropout: 0.1,
        }
    }

    /// 8 layers, 8 heads, hidden 512.
    pub fn large(vocab: &Vocabulary) -> Self {
        Self {
            layers: 8,
            heads: 8,
            hidden: 512,
            ..Self::desk(vocab)
        }
    }

    pub fn preset(name: &str, vocab: &Vocabulary) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(vocab)),
            "large" => Ok(Self::large(vocab)),
            other => Err(Error::Config(format!(
                "unknown model preset `{other}` (expected desk or large)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("heads", self.heads),
            ("hidden", self.hidden),
            ("vocab_size", self.vocab_size),
            ("mlp_multiplier", self.mlp_multiplier),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.max_seq_len < 3 {
            return Err(Error::Config(format!("max_seq_len {} is below 3", self.max_seq_len)));
        }
        if self.num_classes == Some(0) {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Exact number of learnable scalars for `config`.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let h = config.hidden;
    let inner = config.mlp_multiplier * h;
    let embeddings = (config.vocab_size + config.max_seq_len) * h;
    let block = 2 * h + 4 * h * h + 2 * h + (h * inner + inner) + (inner * h + h);
    let head = if config.tie_head { 0 } else { config.vocab_size * h };
    let classifier = config.num_classes.map_or(0, |c| h * c + c);
    embeddings + config.layers * block + 2 * h + head + classifier
}

/// Parameters of the four attention projections in one layer.
pub fn attention_projection_parameters(config: &ModelConfig) -> usize {
    4 * config.hidden * config.hidden
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    fc: ParamId,
    fc_bias: ParamId,
    proj: ParamId,
    proj_bias: ParamId,
}

#[derive(Debug, Clone)]
struct ParamIds {
    token_embedding: ParamId,
    position_embedding: ParamId,
    blocks: Vec<BlockIds>,
    final_gain: ParamId,
    final_bias: ParamId,
    lm_head: Option<ParamId>,
    classifier: Option<(ParamId, ParamId)>,
}

/// Which positions may attend to which: causal within each sequence, never
/// across sequences, and never to PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalMask {
    layout: SeqLayout,
}

impl CausalMask {
    pub fn new(sequences: &[&[TokenId]], pad: TokenId) -> Result<Self> {
        let lengths: Vec<usize> = sequences.iter().map(|s| s.len()).collect();
        let valid = sequences.iter().flat_map(|s| s.iter().map(|&t| t != pad)).collect();
        Ok(Self {
            layout: SeqLayout::with_key_mask(&lengths, valid)?,
        })
    }

    /// Entry `(i, j)` of sequence `seq`: true iff `i` may attend to `j`.
    pub fn allows(&self, seq: usize, i: usize, j: usize) -> bool {
        let (start, _) = self.layout.segments()[seq];
        self.layout.allowed(start, i, j)
    }

    pub fn layout(&self) -> &SeqLayout {
        &self.layout
    }
}

/// Token sequences packed row-wise for one forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    ids: Vec<usize>,
    positions: Vec<usize>,
    mask: CausalMask,
    starts: Vec<usize>,
}

impl Batch {
    pub fn new(sequences: &[&[TokenId]], vocab: &Vocabulary, max_seq_len: usize) -> Result<Self> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut starts = Vec::with_capacity(sequences.len());
        for seq in sequences {
            if seq.len() > max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: seq.len(),
                    max: max_seq_len,
                });
            }
            if seq.is_empty() {
                return Err(Error::Data("empty token sequence".into()));
            }
            starts.push(ids.len());
            for (p, &t) in seq.iter().enumerate() {
                if t as usize >= vocab.size() {
                    return Err(Error::Config(format!(
                        "token id {t} outside the model vocabulary of {}",
                        vocab.size()
                    )));
                }
                ids.push(t as usize);
                positions.push(p);
            }
        }
        Ok(Self {
            ids,
            positions,
            mask: CausalMask::new(sequences, vocab.pad())?,
            starts,
        })
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn sequences(&self) -> usize {
        self.starts.len()
    }

    /// First row of sequence `i`.
    pub fn start(&self, i: usize) -> usize {
        self.starts[i]
    }

    pub fn len_of(&self, i: usize) -> usize {
        self.mask.layout.segments()[i].1
    }

    pub fn token(&self, row: usize) -> usize {
        self.ids[row]
    }

    pub fn mask(&self) -> &CausalMask {
        &self.mask
    }
}

/// Transformer weights plus their configuration.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: ParamIds,
}

fn block_name(layer: usize, part: &str) -> String {
    format!("blocks.{layer}.{part}")
}

impl<T: Scalar> Model<T> {
    /// Fresh weights: N(0, 0.02) matrices, zero biases, unit norm gains and
    /// a zero classification head.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let inner = config.mlp_multiplier * h;
        store.add(
            "token_embedding",
            init_normal(&[config.vocab_size, h], INIT_STD, &mut rng),
        );
        store.add(
            "position_embedding",
            init_normal(&[config.max_seq_len, h], INIT_STD, &mut rng),
        );
        for l in 0..config.layers {
            store.add(block_name(l, "ln1.gain"), Tensor::filled(&[h], T::one()));
            store.add(block_name(l, "ln1.bias"), Tensor::zeros(&[h]));
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                store.add(block_name(l, w), init_normal(&[h, h], INIT_STD, &mut rng));
            }
            store.add(block_name(l, "ln2.gain"), Tensor::filled(&[h], T::one()));
            store.add(block_name(l, "ln2.bias"), Tensor::zeros(&[h]));
            store.add(block_name(l, "mlp.fc"), init_normal(&[h, inner], INIT_STD, &mut rng));
            store.add(block_name(l, "mlp.fc_bias"), Tensor::zeros(&[inner]));
            store.add(block_name(l, "mlp.proj"), init_normal(&[inner, h], INIT_STD, &mut rng));
            store.add(block_name(l, "mlp.proj_bias"), Tensor::zeros(&[h]));
        }
        store.add("final_norm.gain", Tensor::filled(&[h], T::one()));
        store.add("final_norm.bias", Tensor::zeros(&[h]));
        if !config.tie_head {
            store.add("lm_head", init_normal(&[config.vocab_size, h], INIT_STD, &mut rng));
        }
        if let Some(c) = config.num_classes {
            store.add("classifier.weight", Tensor::zeros(&[h, c]));
            store.add("classifier.bias", Tensor::zeros(&[c]));
        }
        Self::from_params(config, store)
    }

    /// Binds a parameter store to `config`, checking every name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let inner = config.mlp_multiplier * h;
        let lookup = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .find(name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
            let found = params.get(id).value.shape();
            if found != shape {
                return Err(Error::CheckpointMismatch {
                    field: name.to_string(),
                    found: format!("{found:?}"),
                    expected: format!("{shape:?}"),
                });
            }
            Ok(id)
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let get = |part: &str, shape: &[usize]| lookup(&block_name(l, part), shape);
            blocks.push(BlockIds {
                ln1_gain: get("ln1.gain", &[h])?,
                ln1_bias: get("ln1.bias", &[h])?,
                wq: get("attn.wq", &[h, h])?,
                wk: get("attn.wk", &[h, h])?,
                wv: get("attn.wv", &[h, h])?,
                wo: get("attn.wo", &[h, h])?,
                ln2_gain: get("ln2.gain", &[h])?,
                ln2_bias: get("ln2.bias", &[h])?,
                fc: get("mlp.fc", &[h, inner])?,
                fc_bias: get("mlp.fc_bias", &[inner])?,
                proj: get("mlp.proj", &[inner, h])?,
                proj_bias: get("mlp.proj_bias", &[h])?,
            });
        }
        let ids = ParamIds {
            token_embedding: lookup("token_embedding", &[config.vocab_size, h])?,
            position_embedding: lookup("position_embedding", &[config.max_seq_len, h])?,
            blocks,
            final_gain: lookup("final_norm.gain", &[h])?,
            final_bias: lookup("final_norm.bias", &[h])?,
            lm_head: if config.tie_head {
                None
            } else {
                Some(lookup("lm_head", &[config.vocab_size, h])?)
            },
            classifier: match config.num_classes {
                Some(c) => Some((lookup("classifier.weight", &[h, c])?, lookup("classifier.bias", &[c])?)),
                None => None,
            },
        };
        if params.len() != count_tensors(&config) {
            return Err(Error::Config(format!(
                "parameter store holds {} tensors, config expects {}",
                params.len(),
                count_tensors(&config)
            )));
        }
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.config.vocab_size - 4)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Adds (or replaces) a zero-initialized classification head.
    pub fn with_classifier(mut self, num_classes: usize) -> Result<Self> {
        let mut config = self.config.clone();
        config.num_classes = Some(num_classes);
        config.validate()?;
        let mut store = ParamStore::new();
        for (_, p) in self.params.iter() {
            if !p.name.starts_with("classifier.") {
                let id = store.add(p.name.clone(), p.value.clone());
                store.get_mut(id).trainable = p.trainable;
            }
        }
        store.add("classifier.weight", Tensor::zeros(&[config.hidden, num_classes]));
        store.add("classifier.bias", Tensor::zeros(&[num_classes]));
        self.params = store;
        Self::from_params(config, self.params)
    }

    /// Keeps only the classification head trainable when `frozen` is true.
    pub fn freeze_backbone(&mut self, frozen: bool) {
        self.params
            .set_trainable(|name| !frozen || name.starts_with("classifier."));
    }

    /// Masked multi-head attention for one layer, including the output
    /// projection.
    pub fn masked_attention(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        layer: usize,
        mask: &CausalMask,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let b = self.ids.blocks.get(layer).ok_or(Error::IndexOutOfRange {
            index: layer,
            extent: self.config.layers,
        })?;
        let wq = tape.param(&self.params, b.wq);
        let wk = tape.param(&self.params, b.wk);
        let wv = tape.param(&self.params, b.wv);
        let wo = tape.param(&self.params, b.wo);
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let p = self.config.dropout;
        let heads = tape.attention(q, k, v, mask.layout(), self.config.heads, dropout.map(|r| (p, r)))?;
        tape.matmul(heads, wo)
    }

    /// Final-norm hidden states `[rows×H]`. Dropout is applied only when an
    /// RNG is supplied.
    pub fn hidden(&self, tape: &mut Tape<T>, batch: &Batch, mut dropout: Option<&mut dyn RngCore>) -> Result<Var> {
        if let Some(&p) = batch.positions.iter().max() {
            if p >= self.config.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: p + 1,
                    max: self.config.max_seq_len,
                });
            }
        }
        let p = self.config.dropout;
        let tok = tape.param(&self.params, self.ids.token_embedding);
        let pos = tape.param(&self.params, self.ids.position_embedding);
        let te = tape.embedding(tok, &batch.ids)?;
        let pe = tape.embedding(pos, &batch.positions)?;
        let mut x = tape.add(te, pe)?;
        if let Some(rng) = reborrow(&mut dropout) {
            x = tape.dropout(x, p, rng);
        }
        for (l, b) in self.ids.blocks.iter().enumerate() {
            let g = tape.param(&self.params, b.ln1_gain);
            let bias = tape.param(&self.params, b.ln1_bias);
            let n = tape.layer_norm(x, g, bias, NORM_EPS)?;
            let mut a = self.masked_attention(tape, n, l, batch.mask(), reborrow(&mut dropout))?;
            if let Some(rng) = reborrow(&mut dropout) {
                a = tape.dropout(a, p, rng);
            }
            x = tape.add(x, a)?;

            let g = tape.param(&self.params, b.ln2_gain);
            let bias = tape.param(&self.params, b.ln2_bias);
            let n = tape.layer_norm(x, g, bias, NORM_EPS)?;
            let fc = tape.param(&self.params, b.fc);
            let fc_bias = tape.param(&self.params, b.fc_bias);
            let proj = tape.param(&self.params, b.proj);
            let proj_bias = tape.param(&self.params, b.proj_bias);
            let up = tape.matmul(n, fc)?;
            let up = tape.add_bias(up, fc_bias)?;
            let act = tape.gelu(up);
            let down = tape.matmul(act, proj)?;
            let mut m = tape.add_bias(down, proj_bias)?;
            if let Some(rng) = reborrow(&mut dropout) {
                m = tape.dropout(m, p, rng);
            }
            x = tape.add(x, m)?;
        }
        let g = tape.param(&self.params, self.ids.final_gain);
        let bias = tape.param(&self.params, self.ids.final_bias);
        tape.layer_norm(x, g, bias, NORM_EPS)
    }

    /// Next-token logits `[rows×vocab]` from hidden states.
    pub fn lm_logits(&self, tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
        let head = tape.param(&self.params, self.ids.lm_head.unwrap_or(self.ids.token_embedding));
        tape.matmul_nt(hidden, head)
    }

    /// Class logits `[batch×classes]` read at each sequence's EOS row.
    pub fn class_logits(&self, tape: &mut Tape<T>, hidden: Var, batch: &Batch, vocab: &Vocabulary) -> Result<Var> {
        let (w, b) = self
            .ids
            .classifier
            .ok_or_else(|| Error::Config("model has no classification head".into()))?;
        let rows = eos_rows(batch, vocab)?;
        let picked = tape.gather_rows(hidden, &rows)?;
        let w = tape.param(&self.params, w);
        let b = tape.param(&self.params, b);
        let z = tape.matmul(picked, w)?;
        tape.add_bias(z, b)
    }

    pub fn batch(&self, sequences: &[&[TokenId]]) -> Result<Batch> {
        Batch::new(sequences, &self.vocabulary(), self.config.max_seq_len)
    }

    /// Inference logits `[T×vocab]` for one sequence.
    pub fn forward_lm(&self, tokens: &[TokenId]) -> Result<Tensor<T>> {
        let batch = self.batch(&[tokens])?;
        self.forward_lm_batch(&batch)
    }

    /// Inference logits for a packed batch, rows in batch order.
    pub fn forward_lm_batch(&self, batch: &Batch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let h = self.hidden(&mut tape, batch, None)?;
        let logits = self.lm_logits(&mut tape, h)?;
        Ok(tape.value(logits).clone())
    }

    /// Inference class logits for one sequence containing EOS.
    pub fn forward_classify(&self, tokens: &[TokenId]) -> Result<Vec<T>> {
        let batch = self.batch(&[tokens])?;
        Ok(self.forward_classify_batch(&batch)?.into_data())
    }

    pub fn forward_classify_batch(&self, batch: &Batch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let h = self.hidden(&mut tape, batch, None)?;
        let z = self.class_logits(&mut tape, h, batch, &self.vocabulary())?;
        Ok(tape.value(z).clone())
    }
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

fn count_tensors(config: &ModelConfig) -> usize {
    2 + 12 * config.layers + 2 + usize::from(!config.tie_head) + if config.num_classes.is_some() { 2 } else { 0 }
}

/// Row of the first EOS in every sequence of the batch.
pub fn eos_rows(batch: &Batch, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let eos = vocab.eos() as usize;
    (0..batch.sequences())
        .map(|i| {
            let start = batch.start(i);
            (start..start + batch.len_of(i))
                .find(|&r| batch.token(r) == eos)
                .ok_or(Error::Token {
                    position: batch.len_of(i),
                    kind: crate::error::TokenErrorKind::MissingEos,
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(layers: usize, heads: usize, hidden: usize) -> ModelConfig {
        ModelConfig {
            layers,
            heads,
            hidden,
            max_seq_len: 24,
            vocab_size: 12,
            num_classes: Some(3),
            mlp_multiplier: 4,
            tie_head: true,
            dropout: 0.1,
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(8)
    }

    #[test]
    fn config_validation() {
        let mut c = toy(2, 3, 16);
        assert!(c.validate().is_err());
        c.heads = 4;
        assert!(c.validate().is_ok());
        c.max_seq_len = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_count_matches_allocation() {
        for tie in [true, false] {
            for classes in [None, Some(5)] {
                let mut c = toy(3, 2, 8);
                c.tie_head = tie;
                c.num_classes = classes;
                let m = Model::<f32>::new(c.clone(), 0).unwrap();
                assert_eq!(count_parameters(&c), m.params().scalar_count());
            }
        }
    }

    #[test]
    fn zero_layers_is_embeddings_and_heads() {
        let c = toy(0, 2, 8);
        let expected = (12 + 24) * 8 + 2 * 8 + 8 * 3 + 3;
        assert_eq!(count_parameters(&c), expected);
        let m = Model::<f64>::new(c, 1).unwrap();
        assert_eq!(m.forward_lm(&[8, 0, 1, 10]).unwrap().shape(), [4, 12]);
    }

    #[test]
    fn doubling_hidden_quadruples_projections() {
        let small = toy(2, 2, 16);
        let big = toy(2, 2, 32);
        assert_eq!(
            attention_projection_parameters(&big),
            4 * attention_projection_parameters(&small)
        );
    }

    #[test]
    fn single_position_attention_is_projected_value() {
        let c = toy(1, 2, 8);
        let m = Model::<f64>::new(c, 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(init_normal(&[1, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(9)));
        let mask = CausalMask::new(&[&[0]], vocab().pad()).unwrap();
        let out = m.masked_attention(&mut tape, x, 0, &mask, None).unwrap();
        let b = m.ids.blocks[0];
        let wv = tape.param(m.params(), b.wv);
        let wo = tape.param(m.params(), b.wo);
        let v = tape.matmul(x, wv).unwrap();
        let want = tape.matmul(v, wo).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(tape.value(want).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_token_hand_computed_attention() {
        let c = ModelConfig {
            layers: 1,
            heads: 1,
            hidden: 2,
            max_seq_len: 4,
            vocab_size: 12,
            num_classes: None,
            mlp_multiplier: 1,
            tie_head: true,
            dropout: 0.0,
        };
        let mut m = Model::<f64>::new(c, 0).unwrap();
        let b = m.ids.blocks[0];
        let set = |m: &mut Model<f64>, id, v: [f64; 4]| {
            m.params
                .replace_value(id, Tensor::new(vec![2, 2], v.to_vec()).unwrap())
                .unwrap();
        };
        set(&mut m, b.wq, [1.0, 0.0, 0.0, 1.0]);
        set(&mut m, b.wk, [0.5, 0.0, 0.0, 0.5]);
        set(&mut m, b.wv, [1.0, 2.0, 0.0, 1.0]);
        set(&mut m, b.wo, [1.0, 0.0, 0.0, -1.0]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]).unwrap());
        let mask = CausalMask::new(&[&[0, 1]], vocab().pad()).unwrap();
        let out = m.masked_attention(&mut tape, x, 0, &mask, None).unwrap();
        // q = x, k = x/2, v rows = [1,2] and [0,2]
        // row 1 scores: q1·k0 = 0, q1·k1 = 2, scaled by 1/√2
        let s = 2.0 / 2f64.sqrt();
        let w1 = s.exp() / (1.0 + s.exp());
        let w0 = 1.0 - w1;
        let o1 = [w0 * 1.0 + w1 * 0.0, w0 * 2.0 + w1 * 2.0];
        let want = [1.0, -2.0, o1[0], -o1[1]];
        for (a, b) in tape.value(out).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn init_entropy_near_uniform() {
        let m = Model::<f32>::new(toy(2, 2, 16), 5).unwrap();
        let logits = m.forward_lm(&[8, 0, 3, 3, 9, 5, 10]).unwrap();
        let ln_v = (12f64).ln();
        for row in logits.data().chunks(12) {
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let h: f64 = row
                .iter()
                .map(|&v| {
                    let p = (v as f64 - max).exp() / z;
                    -p * p.ln()
                })
                .sum();
            assert!((h - ln_v).abs() <= 0.1 * ln_v);
        }
    }

    #[test]
    fn classifier_reads_eos_and_ignores_padding() {
        let m = Model::<f64>::new(toy(2, 2, 16), 8).unwrap();
        let untrained = m.forward_classify(&[8, 1, 2, 10]).unwrap();
        assert!(untrained.iter().all(|&z| z == 0.0));
        let mut m = m;
        let (w, _) = m.ids.classifier.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        m.params.replace_value(w, init_normal(&[16, 3], 1.0, &mut rng)).unwrap();
        let base = m.forward_classify(&[8, 1, 2, 10]).unwrap();
        let padded = m.forward_classify(&[8, 1, 2, 10, 11, 11, 11]).unwrap();
        for (a, b) in base.iter().zip(&padded) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(matches!(
            m.forward_classify(&[8, 1, 2]),
            Err(Error::Token {
                kind: crate::error::TokenErrorKind::MissingEos,
                ..
            })
        ));
    }

    #[test]
    fn rejects_long_and_foreign_sequences() {
        let m = Model::<f32>::new(toy(1, 2, 8), 0).unwrap();
        assert!(matches!(
            m.forward_lm(&[0; 25]),
            Err(Error::SequenceTooLong { len: 25, max: 24 })
        ));
        assert!(m.forward_lm(&[8, 12]).is_err());
    }

    #[test]
    fn mask_entries() {
        let pad = vocab().pad();
        let mask = CausalMask::new(&[&[8, 1, pad], &[8, 2]], pad).unwrap();
        assert!(mask.allows(0, 1, 0) && mask.allows(0, 1, 1));
        assert!(!mask.allows(0, 0, 1));
        assert!(!mask.allows(0, 2, 2));
        assert!(mask.allows(1, 1, 0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn future_tokens_never_change_past_logits(
            tokens in prop::collection::vec(0u32..11, 2..12),
            cut in 1usize..11,
            replacement in prop::collection::vec(0u32..11, 12),
        ) {
            let cut = cut.min(tokens.len() - 1);
            let m = Model::<f64>::new(toy(2, 2, 8), 11).unwrap();
            let base = m.forward_lm(&tokens).unwrap();
            let mut changed = tokens.clone();
            for (i, t) in changed.iter_mut().enumerate().skip(cut) {
                *t = replacement[i];
            }
            let other = m.forward_lm(&changed).unwrap();
            for i in 0..cut {
                for (a, b) in base.row(i).iter().zip(other.row(i)) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn padding_leaves_lm_logits_unchanged(
            tokens in prop::collection::vec(0u32..10, 1..10),
            pads in 1usize..6,
        ) {
            let m = Model::<f64>::new(toy(2, 2, 8), 12).unwrap();
            let base = m.forward_lm(&tokens).unwrap();
            let mut padded = tokens.clone();
            padded.extend(std::iter::repeat_n(11, pads));
            let other = m.forward_lm(&padded).unwrap();
            for i in 0..tokens.len() {
                for (a, b) in base.row(i).iter().zip(other.row(i)) {
                    prop_assert!((a - b).abs() <= 1e-9);
                }
            }
        }
    }
}
