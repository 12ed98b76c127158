//! Temperature sampling for generation and prefix completion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Scalar;
use crate::tokenizer::{decode, TokenId, TokenSequence, Vocabulary};

/// Temperatures of the standard sweep.
pub const TEMPERATURE_SWEEP: [f64; 7] = [0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 2.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub num_samples: usize,
    /// Keep only the `k` most likely tokens.
    pub top_k: Option<usize>,
    /// Keep the smallest set of tokens whose mass reaches `p`.
    pub top_p: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_new_tokens: 512,
            seed: 0,
            num_samples: 1,
            top_k: None,
            top_p: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if self.max_new_tokens < 1 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if self.num_samples < 1 {
            return Err(Error::Config("num_samples must be at least 1".into()));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("top_p {p} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Eos,
    Length,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<TokenId>,
    pub stop_reason: StopReason,
    /// Whether the tokens decode under strict tokenizer rules.
    pub valid: bool,
    /// Entropy in nats of each step's sampling distribution.
    pub entropy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub samples: Vec<Sample>,
    pub prefix_len: usize,
    pub seed: u64,
}

/// Probabilities of `softmax(logits / t)` with BOS and PAD removed, then the
/// optional top-k / top-p filters.
pub fn sampling_distribution(
    logits: &[f64],
    temperature: f64,
    vocab: &Vocabulary,
    config: &SamplerConfig,
) -> Result<Vec<f64>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!("temperature {temperature} must be > 0")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let banned = |i: usize| i == vocab.bos() as usize || i == vocab.pad() as usize;
    let scaled: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| if banned(i) { f64::NEG_INFINITY } else { z / temperature })
        .collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    if config.top_k.is_some() || config.top_p.is_some() {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut keep = order.len();
        if let Some(k) = config.top_k {
            keep = keep.min(k);
        }
        if let Some(p) = config.top_p {
            let mut mass = 0.0;
            let mut n = 0;
            for &i in &order[..keep] {
                mass += probs[i];
                n += 1;
                if mass >= p {
                    break;
                }
            }
            keep = n;
        }
        for &i in &order[keep..] {
            probs[i] = 0.0;
        }
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
    }
    Ok(probs)
}

pub fn entropy(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Draws one token from `softmax(logits / t)`; BOS and PAD are never drawn.
pub fn sample_next<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<TokenId> {
    let probs = sampling_distribution(logits, temperature, vocab, &SamplerConfig::default())?;
    Ok(draw(&probs, rng))
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i as TokenId;
        }
    }
    last as TokenId
}

/// Independent RNG of sample `index` under `seed`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Unconditional generation from BOS.
pub fn generate<T: Scalar>(model: &Model<T>, sampler: &SamplerConfig) -> Result<GenerationResult> {
    complete(model, &[model.vocabulary().bos()], sampler)
}

/// Samples continuations of `prefix`, which must start with BOS and carry no
/// EOS or PAD. Every returned sequence begins with the prefix.
pub fn complete<T: Scalar>(model: &Model<T>, prefix: &[TokenId], sampler: &SamplerConfig) -> Result<GenerationResult> {
    sampler.validate()?;
    let vocab = model.vocabulary();
    let max_len = model.config().max_seq_len;
    if prefix.first() != Some(&vocab.bos()) {
        return Err(Error::Token {
            position: 0,
            kind: crate::error::TokenErrorKind::MissingBos,
        });
    }
    if let Some(pos) = prefix.iter().position(|&t| t == vocab.eos() || t == vocab.pad()) {
        return Err(Error::Data(format!("prefix holds EOS or PAD at position {pos}")));
    }
    if prefix.len() >= max_len {
        return Err(Error::SequenceTooLong {
            len: prefix.len(),
            max: max_len - 1,
        });
    }
    let limit = (prefix.len() + sampler.max_new_tokens).min(max_len);
    let mut seqs: Vec<Vec<TokenId>> = vec![prefix.to_vec(); sampler.num_samples];
    let mut rngs: Vec<ChaCha8Rng> = (0..sampler.num_samples).map(|i| sample_rng(sampler.seed, i)).collect();
    let mut entropies: Vec<Vec<f64>> = vec![Vec::new(); sampler.num_samples];
    let mut stop: Vec<Option<StopReason>> = vec![None; sampler.num_samples];
    loop {
        for (i, s) in seqs.iter().enumerate() {
            if stop[i].is_none() && s.len() >= limit {
                stop[i] = Some(StopReason::Length);
            }
        }
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| stop[i].is_none()).collect();
        if active.is_empty() {
            break;
        }
        let views: Vec<&[TokenId]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let batch = model.batch(&views)?;
        let logits = model.forward_lm_batch(&batch)?;
        for (b, &i) in active.iter().enumerate() {
            let row = batch.start(b) + batch.len_of(b) - 1;
            let z: Vec<f64> = logits.row(row).iter().map(|v| v.to_f64().unwrap()).collect();
            let probs = sampling_distribution(&z, sampler.temperature, &vocab, sampler)?;
            entropies[i].push(entropy(&probs));
            let token = draw(&probs, &mut rngs[i]);
            seqs[i].push(token);
            if token == vocab.eos() {
                stop[i] = Some(StopReason::Eos);
            }
        }
    }
    let samples = seqs
        .into_iter()
        .zip(stop)
        .zip(entropies)
        .map(|((tokens, reason), entropy)| Sample {
            valid: decode(&tokens, &vocab).is_ok(),
            tokens,
            stop_reason: reason.expect("every sample stopped"),
            entropy,
        })
        .collect();
    Ok(GenerationResult {
        samples,
        prefix_len: prefix.len(),
        seed: sampler.seed,
    })
}

/// Prefix tokens for completion: BOS through the last content token.
pub fn completion_prefix(tokens: &TokenSequence, vocab: &Vocabulary) -> Vec<TokenId> {
    let end = tokens.eos_position(vocab).unwrap_or(tokens.attention_length());
    let mut ids = tokens.ids()[..end].to_vec();
    while ids.last() == Some(&vocab.pad()) {
        ids.pop();
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(8)
    }

    #[test]
    fn bos_and_pad_never_drawn() {
        let v = vocab();
        let mut logits = vec![0.0; v.size()];
        logits[v.bos() as usize] = 50.0;
        logits[v.pad() as usize] = 50.0;
        let mut rng = sample_rng(1, 0);
        for _ in 0..500 {
            let t = sample_next(&logits, 1.0, &v, &mut rng).unwrap();
            assert!(t != v.bos() && t != v.pad());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let v = vocab();
        let mut rng = sample_rng(1, 0);
        assert!(sample_next(&[0.0; 12], 0.0, &v, &mut rng).is_err());
        let mut z = vec![0.0; 12];
        z[3] = f64::NAN;
        assert!(matches!(sample_next(&z, 1.0, &v, &mut rng), Err(Error::NonFinite(_))));
    }

    #[test]
    fn low_temperature_picks_argmax() {
        let v = vocab();
        let mut z = vec![0.0; v.size()];
        z[4] = 5.0;
        let mut rng = sample_rng(3, 0);
        let hits = (0..1000)
            .filter(|_| sample_next(&z, 0.01, &v, &mut rng).unwrap() == 4)
            .count();
        assert!(hits >= 999);
    }

    #[test]
    fn unit_temperature_is_plain_softmax() {
        let v = vocab();
        let z: Vec<f64> = (0..v.size()).map(|i| (i as f64 * 0.37).sin()).collect();
        let p = sampling_distribution(&z, 1.0, &v, &SamplerConfig::default()).unwrap();
        let allowed: Vec<usize> = (0..v.size())
            .filter(|&i| i != v.bos() as usize && i != v.pad() as usize)
            .collect();
        let total: f64 = allowed.iter().map(|&i| z[i].exp()).sum();
        for &i in &allowed {
            assert!((p[i] - z[i].exp() / total).abs() < 1e-12);
        }
    }

    #[test]
    fn filters_restrict_support() {
        let v = vocab();
        let z: Vec<f64> = (0..v.size()).map(|i| i as f64).collect();
        let cfg = SamplerConfig {
            top_k: Some(2),
            ..SamplerConfig::default()
        };
        let p = sampling_distribution(&z, 1.0, &v, &cfg).unwrap();
        assert_eq!(p.iter().filter(|&&x| x > 0.0).count(), 2);
        let cfg = SamplerConfig {
            top_p: Some(1e-9),
            ..SamplerConfig::default()
        };
        let p = sampling_distribution(&z, 1.0, &v, &cfg).unwrap();
        assert_eq!(p.iter().filter(|&&x| x > 0.0).count(), 1);
    }

    proptest! {
        #[test]
        fn argmax_and_entropy_order_across_sweep(z in prop::collection::vec(-8.0f64..8.0, 12)) {
            let v = vocab();
            let allowed = |i: &usize| *i != v.bos() as usize && *i != v.pad() as usize;
            let argmax = (0..12).filter(allowed).max_by(|&a, &b| z[a].total_cmp(&z[b]).then(b.cmp(&a))).unwrap();
            let mut last = -1.0;
            for t in [0.6, 1.0, 1.4, 2.0] {
                let p = sampling_distribution(&z, t, &v, &SamplerConfig::default()).unwrap();
                let pm = (0..12).max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a))).unwrap();
                prop_assert_eq!(pm, argmax);
                let h = entropy(&p);
                prop_assert!(h >= last - 1e-12);
                last = h;
            }
        }
    }

    fn toy_model() -> Model<f32> {
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            max_seq_len: 16,
            vocab_size: 12,
            num_classes: None,
            mlp_multiplier: 2,
            tie_head: true,
            dropout: 0.0,
        };
        Model::new(cfg, 2).unwrap()
    }

    #[test]
    fn generation_contract() {
        let m = toy_model();
        let v = m.vocabulary();
        let cfg = SamplerConfig {
            num_samples: 4,
            seed: 9,
            max_new_tokens: 40,
            ..SamplerConfig::default()
        };
        let a = generate(&m, &cfg).unwrap();
        let b = generate(&m, &cfg).unwrap();
        assert_eq!(a, b);
        let c = complete(&m, &[v.bos()], &cfg).unwrap();
        assert_eq!(a, c);
        for s in &a.samples {
            assert!(s.tokens.len() <= 16);
            assert!(!s.tokens[1..].iter().any(|&t| t == v.bos() || t == v.pad()));
            assert!(s.tokens.iter().filter(|&&t| t == v.eos()).count() <= 1);
            match s.stop_reason {
                StopReason::Eos => assert_eq!(*s.tokens.last().unwrap(), v.eos()),
                StopReason::Length => assert_eq!(s.tokens.len(), 16),
            }
        }
        let prefix = [v.bos(), 0, 0, v.sep(), 3];
        let r = complete(&m, &prefix, &cfg).unwrap();
        assert!(r.samples.iter().all(|s| s.tokens.starts_with(&prefix)));
        assert!(complete(&m, &[v.bos(); 16], &cfg).is_err());
        assert!(complete(&m, &[0, 1], &cfg).is_err());
    }

    #[test]
    fn completion_prefix_strips_eos_and_padding() {
        let v = vocab();
        let seq = TokenSequence::from_ids(vec![v.bos(), 1, 2, v.eos(), v.pad()], v.pad());
        assert_eq!(completion_prefix(&seq, &v), vec![v.bos(), 1, 2]);
    }
}
