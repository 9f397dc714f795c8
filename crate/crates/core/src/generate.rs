//! Autoregressive sampling with a per-layer key/value cache, plus retrieval
//! augmentation of prompts.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{logits, sinusoid, ModelParameters, PosEncoding, RotationTable};
use crate::tensor::ops::{gelu_scalar, layer_norm_slice, matvec};
use crate::tensor::{softmax_in_place, Scalar};
use crate::tokenizer::{TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub max_new_tokens: usize,
    /// Stop after sampling this token.
    pub eos: Option<usize>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            max_new_tokens: 64,
            eos: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > vocab_size {
                return Err(Error::Config(format!("top_k {k} outside 1..={vocab_size}")));
            }
        }
        if let Some(e) = self.eos {
            if e >= vocab_size {
                return Err(Error::Config(format!("eos token {e} outside the vocabulary")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    MaxLength,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Eos => "eos",
            StopReason::MaxLength => "max_length",
        }
    }
}

/// Keep entries `≥` the k-th largest logit (ties at the threshold survive);
/// the rest become `−∞`.
pub fn top_k_truncate(logits: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > logits.len() {
        return Err(Error::Config(format!("top_k {k} outside 1..={}", logits.len())));
    }
    let mut sorted = logits.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[k - 1];
    Ok(logits
        .iter()
        .map(|&z| if z >= threshold { z } else { f64::NEG_INFINITY })
        .collect())
}

/// `softmax(top_k(z) / τ)`.
pub fn sampling_distribution(logits: &[f64], temperature: f64, top_k: Option<usize>) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut z = match top_k {
        Some(k) => top_k_truncate(logits, k)?,
        None => logits.to_vec(),
    };
    z.iter_mut().for_each(|x| *x /= temperature);
    softmax_in_place(&mut z)?;
    Ok(z)
}

fn sample(probs: &[f64], rng: &mut ChaCha8Rng) -> Result<usize> {
    let dist = WeightedIndex::new(probs).map_err(|e| Error::Numeric(format!("cannot sample: {e}")))?;
    Ok(dist.sample(rng))
}

struct HeadCache<T> {
    keys: VecDeque<Vec<T>>,
    values: VecDeque<Vec<T>>,
}

/// Per-layer, per-head keys (already rotated) and values for the visible
/// window. Entries are only appended, or dropped from the front once the
/// window is full.
pub struct KvCache<T> {
    heads: Vec<Vec<HeadCache<T>>>,
    window: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(n_layer: usize, n_head: usize, window: usize) -> Self {
        let heads = (0..n_layer)
            .map(|_| {
                (0..n_head)
                    .map(|_| HeadCache {
                        keys: VecDeque::with_capacity(window),
                        values: VecDeque::with_capacity(window),
                    })
                    .collect()
            })
            .collect();
        Self { heads, window }
    }

    /// Entries currently held; equal across layers and heads.
    pub fn len(&self) -> usize {
        self.heads.first().and_then(|l| l.first()).map_or(0, |h| h.keys.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer_lens(&self) -> Vec<usize> {
        self.heads
            .iter()
            .map(|l| l.first().map_or(0, |h| h.keys.len()))
            .collect()
    }

    /// Number of scalars stored.
    pub fn footprint(&self) -> usize {
        self.heads
            .iter()
            .flatten()
            .map(|h| h.keys.iter().chain(&h.values).map(Vec::len).sum::<usize>())
            .sum()
    }

    fn push(&mut self, layer: usize, head: usize, key: Vec<T>, value: Vec<T>) {
        let h = &mut self.heads[layer][head];
        if h.keys.len() == self.window {
            h.keys.pop_front();
            h.values.pop_front();
        }
        h.keys.push_back(key);
        h.values.push_back(value);
    }
}

/// Incremental decoding state for one sequence.
pub struct GenerationSession<'p, T: Scalar> {
    params: &'p ModelParameters<T>,
    rope: Option<RotationTable>,
    cache: KvCache<T>,
    tokens: Vec<usize>,
    prompt_len: usize,
    sampler: SamplerConfig,
    rng: ChaCha8Rng,
    stop: Option<StopReason>,
    logits: Vec<T>,
}

impl<'p, T: Scalar> GenerationSession<'p, T> {
    /// Prefill the cache with `prompt`.
    pub fn new(params: &'p ModelParameters<T>, prompt: &[usize], sampler: SamplerConfig) -> Result<Self> {
        let cfg = &params.config;
        if prompt.is_empty() {
            return Err(Error::Contract("generation needs a non-empty prompt".into()));
        }
        sampler.validate(cfg.vocab_size)?;
        let rope = match cfg.pos_encoding {
            PosEncoding::Rope => Some(RotationTable::new(cfg.head_dim(), cfg.context)?),
            _ => None,
        };
        let mut s = Self {
            params,
            rope,
            cache: KvCache::new(cfg.n_layer, cfg.n_head, cfg.context),
            tokens: Vec::with_capacity(prompt.len() + sampler.max_new_tokens),
            prompt_len: prompt.len(),
            rng: ChaCha8Rng::seed_from_u64(sampler.seed),
            sampler,
            stop: None,
            logits: Vec::new(),
        };
        for &t in prompt {
            s.advance(t)?;
        }
        s.stop = s.limit_reached();
        Ok(s)
    }

    fn limit_reached(&self) -> Option<StopReason> {
        let generated = self.tokens.len() - self.prompt_len;
        let learned_full =
            self.params.config.pos_encoding == PosEncoding::Learned && self.tokens.len() >= self.params.config.context;
        (generated >= self.sampler.max_new_tokens || learned_full).then_some(StopReason::MaxLength)
    }

    /// Feed one token through every layer, appending to the cache.
    fn advance(&mut self, token: usize) -> Result<()> {
        let p = self.params;
        let cfg = &p.config;
        if token >= cfg.vocab_size {
            return Err(Error::Index {
                what: "token",
                index: token,
                size: cfg.vocab_size,
            });
        }
        let (d, dh, f) = (cfg.d_model, cfg.head_dim(), cfg.ffn_hidden());
        let u = self.tokens.len();
        let mut h = p.wte.column(token);
        match cfg.pos_encoding {
            PosEncoding::Rope => {}
            PosEncoding::Sinusoidal => {
                for (x, s) in h.iter_mut().zip(sinusoid(d, u)) {
                    *x += T::from_f64(s);
                }
            }
            PosEncoding::Learned => {
                let wpe = p.wpe.as_ref().expect("learned table present");
                if u >= cfg.context {
                    return Err(Error::Contract(format!(
                        "learned positions cover {} tokens",
                        cfg.context
                    )));
                }
                for (x, s) in h.iter_mut().zip(wpe.column(u)) {
                    *x += s;
                }
            }
        }
        let scale = if cfg.attn_scale {
            T::one() / T::from_f64(dh as f64).sqrt()
        } else {
            T::one()
        };
        for (l, layer) in p.layers.iter().enumerate() {
            let a = if cfg.layer_norm {
                layer_norm_slice(&h, layer.ln1_gamma.data(), layer.ln1_beta.data(), cfg.ln_eps).0
            } else {
                h.clone()
            };
            let mut cat = Vec::with_capacity(d);
            for (k, head) in layer.heads.iter().enumerate() {
                let mut q = matvec(head.wq.data(), &a, dh, d);
                let mut key = matvec(head.wk.data(), &a, dh, d);
                let value = matvec(head.wv.data(), &a, dh, d);
                if let Some(r) = &self.rope {
                    q = r.rotate(&q, u)?;
                    key = r.rotate(&key, u)?;
                }
                self.cache.push(l, k, key, value);
                let hc = &self.cache.heads[l][k];
                let mut w: Vec<T> = hc
                    .keys
                    .iter()
                    .map(|key| key.iter().zip(&q).map(|(&x, &y)| x * y).sum::<T>() * scale)
                    .collect();
                softmax_in_place(&mut w)?;
                let mut out = vec![T::zero(); dh];
                for (&ws, v) in w.iter().zip(&hc.values) {
                    for (o, &x) in out.iter_mut().zip(v) {
                        *o += ws * x;
                    }
                }
                cat.extend(out);
            }
            for (x, o) in h.iter_mut().zip(matvec(layer.wo.data(), &cat, d, d)) {
                *x += o;
            }
            let b = if cfg.layer_norm {
                layer_norm_slice(&h, layer.ln2_gamma.data(), layer.ln2_beta.data(), cfg.ln_eps).0
            } else {
                h.clone()
            };
            let mut hidden = matvec(layer.w1.data(), &b, f, d);
            for (x, &bias) in hidden.iter_mut().zip(layer.b1.data()) {
                *x = gelu_scalar(*x + bias);
            }
            let out = matvec(layer.w2.data(), &hidden, d, f);
            for ((x, o), &bias) in h.iter_mut().zip(out).zip(layer.b2.data()) {
                *x += o + bias;
            }
        }
        self.logits = logits(&h, p)?;
        self.tokens.push(token);
        Ok(())
    }

    /// Logits for the next token given everything fed so far.
    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn generated(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }

    pub fn cache(&self) -> &KvCache<T> {
        &self.cache
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.stop
    }

    pub fn is_finished(&self) -> bool {
        self.stop.is_some()
    }

    pub fn next_token_dist(&self) -> Result<Vec<f64>> {
        if self.is_finished() {
            return Err(Error::State("generation already finished".into()));
        }
        let z: Vec<f64> = self.logits.iter().map(|&x| Scalar::to_f64(x)).collect();
        sampling_distribution(&z, self.sampler.temperature, self.sampler.top_k)
    }

    /// Sample, append and (unless stopping) feed the next token.
    pub fn step(&mut self) -> Result<usize> {
        let probs = self.next_token_dist()?;
        let token = sample(&probs, &mut self.rng)?;
        if Some(token) == self.sampler.eos {
            self.tokens.push(token);
            self.stop = Some(StopReason::Eos);
            return Ok(token);
        }
        self.advance(token)?;
        self.stop = self.limit_reached();
        Ok(token)
    }
}

/// A finished rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Prompt followed by the generated tokens.
    pub tokens: TokenSequence,
    pub prompt_len: usize,
    pub stop: StopReason,
}

impl Generation {
    pub fn completion(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }
}

/// Cached sampling; `on_token` sees every generated token as it is drawn.
pub fn generate_with<T: Scalar>(
    params: &ModelParameters<T>,
    prompt: &[usize],
    sampler: &SamplerConfig,
    mut on_token: impl FnMut(usize) -> Result<()>,
) -> Result<Generation> {
    let mut s = GenerationSession::new(params, prompt, sampler.clone())?;
    while !s.is_finished() {
        let t = s.step()?;
        on_token(t)?;
    }
    Ok(Generation {
        tokens: s.tokens,
        prompt_len: s.prompt_len,
        stop: s.stop.expect("finished"),
    })
}

pub fn generate<T: Scalar>(
    params: &ModelParameters<T>,
    prompt: &[usize],
    sampler: &SamplerConfig,
) -> Result<Generation> {
    generate_with(params, prompt, sampler, |_| Ok(()))
}

/// How a reference generator rebuilds logits each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recompute {
    /// Forward the whole sequence.
    Full,
    /// Forward only the last `Δ` tokens, positions starting at 0.
    Window,
}

/// Sampling without a cache, re-running the forward pass every step. Returns
/// the rollout and the logits used at each step.
pub fn generate_recompute<T: Scalar>(
    params: &ModelParameters<T>,
    prompt: &[usize],
    sampler: &SamplerConfig,
    mode: Recompute,
) -> Result<(Generation, Vec<Vec<T>>)> {
    let cfg = &params.config;
    if prompt.is_empty() {
        return Err(Error::Contract("generation needs a non-empty prompt".into()));
    }
    sampler.validate(cfg.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut tokens = prompt.to_vec();
    let mut trajectory = Vec::new();
    let limit = |tokens: &Vec<usize>| {
        tokens.len() - prompt.len() >= sampler.max_new_tokens
            || (cfg.pos_encoding == PosEncoding::Learned && tokens.len() >= cfg.context)
    };
    let mut stop = limit(&tokens).then_some(StopReason::MaxLength);
    while stop.is_none() {
        let start = match mode {
            Recompute::Full => 0,
            Recompute::Window => tokens.len().saturating_sub(cfg.context),
        };
        let (_, z) = params.evaluate(&tokens[start..])?;
        let last = z.column(z.cols() - 1);
        let zf: Vec<f64> = last.iter().map(|&x| Scalar::to_f64(x)).collect();
        trajectory.push(last);
        let probs = sampling_distribution(&zf, sampler.temperature, sampler.top_k)?;
        let token = sample(&probs, &mut rng)?;
        tokens.push(token);
        if Some(token) == sampler.eos {
            stop = Some(StopReason::Eos);
        } else if limit(&tokens) {
            stop = Some(StopReason::MaxLength);
        }
    }
    Ok((
        Generation {
            tokens,
            prompt_len: prompt.len(),
            stop: stop.expect("loop exits on stop"),
        },
        trajectory,
    ))
}

/// `chunk₁ ⊕ … ⊕ chunk_m ⊕ prompt`, dropping the oldest chunk tokens first
/// when the result would exceed `context`.
pub fn augment_context(prompt: &[usize], chunks: &[TokenSequence], context: usize) -> Result<TokenSequence> {
    if prompt.len() > context {
        return Err(Error::Contract(format!(
            "prompt of {} tokens exceeds the context window {context}",
            prompt.len()
        )));
    }
    let evidence: Vec<usize> = chunks.concat();
    let room = context - prompt.len();
    let keep = evidence.len().min(room);
    let mut out = evidence[evidence.len() - keep..].to_vec();
    out.extend_from_slice(prompt);
    Ok(out)
}

/// Retrieval corpus: one chunk per paragraph.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkStore {
    pub texts: Vec<String>,
    pub chunks: Vec<TokenSequence>,
}

impl ChunkStore {
    pub fn from_texts<S: AsRef<str>>(texts: &[S], vocab: &Vocabulary) -> Self {
        let texts: Vec<String> = texts.iter().map(|t| t.as_ref().to_string()).collect();
        let chunks = texts.iter().map(|t| vocab.encode_str(t)).collect();
        Self { texts, chunks }
    }

    /// Every file under `dir` (sorted), split on blank lines.
    pub fn from_dir(dir: &Path, vocab: &Vocabulary) -> Result<Self> {
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut texts = Vec::new();
        for f in files {
            let raw = fs::read(&f).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
            let text = String::from_utf8_lossy(&raw).replace("\r\n", "\n");
            texts.extend(
                text.split("\n\n")
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(str::to_string),
            );
        }
        if texts.is_empty() {
            return Err(Error::Data(format!("no chunks found in {}", dir.display())));
        }
        Ok(Self::from_texts(&texts, vocab))
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Mean of the embedding columns of `tokens` (zero vector when empty).
pub fn mean_embedding<T: Scalar>(params: &ModelParameters<T>, tokens: &[usize]) -> Vec<f64> {
    let d = params.config.d_model;
    let mut out = vec![0.0; d];
    for &t in tokens {
        for (o, x) in out.iter_mut().zip(params.wte.column(t)) {
            *o += Scalar::to_f64(x);
        }
    }
    if !tokens.is_empty() {
        out.iter_mut().for_each(|x| *x /= tokens.len() as f64);
    }
    out
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Indices and scores of the `m` most similar items, best first, ties by index.
pub fn rank_by_cosine(query: &[f64], items: &[Vec<f64>], m: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = items.iter().enumerate().map(|(i, e)| (i, cosine(query, e))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(m);
    scored
}

/// Top-`m` chunks by cosine similarity of mean-pooled token embeddings.
pub fn retrieve<T: Scalar>(
    params: &ModelParameters<T>,
    query: &[usize],
    store: &ChunkStore,
    m: usize,
) -> Result<Vec<(usize, f64)>> {
    if store.is_empty() {
        return Err(Error::Data("retrieval store is empty".into()));
    }
    params.config.validate()?;
    let v = params.config.vocab_size;
    for &t in query.iter().chain(store.chunks.iter().flatten()) {
        if t >= v {
            return Err(Error::Index {
                what: "token",
                index: t,
                size: v,
            });
        }
    }
    let q = mean_embedding(params, query);
    let items: Vec<Vec<f64>> = store.chunks.iter().map(|c| mean_embedding(params, c)).collect();
    Ok(rank_by_cosine(&q, &items, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    const TOY: [f64; 3] = [2.0, 1.0, 0.1];

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn random_model(seed: u64, d: usize, layers: usize, context: usize, pos: PosEncoding) -> ModelParameters<f64> {
        let mut c = ModelConfig::new(d, 17, layers, 2, context);
        c.pos_encoding = pos;
        let mut p = ModelParameters::<f64>::init(&c, seed).unwrap();
        for (_, t) in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= 15.0);
        }
        p
    }

    #[test]
    fn temperature_one_matches_softmax() {
        let p = sampling_distribution(&TOY, 1.0, None).unwrap();
        assert!(close(&p, &[0.659, 0.242, 0.099], 1e-3));
    }

    #[test]
    fn temperature_sharpens_and_flattens() {
        // independent evaluation of exp(z/τ)/Σ exp(z/τ)
        for tau in [0.5, 2.0] {
            let e: Vec<f64> = TOY.iter().map(|z| (z / tau).exp()).collect();
            let s: f64 = e.iter().sum();
            let want: Vec<f64> = e.iter().map(|x| x / s).collect();
            assert!(close(&sampling_distribution(&TOY, tau, None).unwrap(), &want, 1e-12));
        }
        let cold = sampling_distribution(&TOY, 0.5, None).unwrap();
        let hot = sampling_distribution(&TOY, 2.0, None).unwrap();
        assert!(cold[0] > 0.86 && hot[0] < 0.51);
    }

    #[test]
    fn invalid_temperature_is_config_error() {
        assert!(matches!(sampling_distribution(&TOY, 0.0, None), Err(Error::Config(_))));
        assert!(matches!(
            sampling_distribution(&TOY, f64::NAN, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn top_k_cases() {
        assert_eq!(top_k_truncate(&TOY, 3).unwrap(), TOY.to_vec());
        let one = top_k_truncate(&TOY, 1).unwrap();
        assert_eq!(one.iter().filter(|x| x.is_finite()).count(), 1);
        let p = sampling_distribution(&TOY, 1.0, Some(2)).unwrap();
        assert!(close(&p, &[0.731, 0.269, 0.0], 1e-3));
        assert_eq!(p[2], 0.0);
        assert!(matches!(top_k_truncate(&TOY, 0), Err(Error::Config(_))));
        assert!(matches!(top_k_truncate(&TOY, 4), Err(Error::Config(_))));
        let ties = top_k_truncate(&[1.0, 3.0, 1.0, 0.0], 2).unwrap();
        assert_eq!(ties, vec![1.0, 3.0, 1.0, f64::NEG_INFINITY]);
    }

    #[test]
    fn single_token_prompt_is_bit_exact() {
        for pos in [PosEncoding::Rope, PosEncoding::Sinusoidal, PosEncoding::Learned] {
            let p = random_model(3, 16, 2, 8, pos);
            let s = GenerationSession::new(&p, &[5], SamplerConfig::default()).unwrap();
            let (_, z) = p.evaluate(&[5]).unwrap();
            assert_eq!(s.logits(), z.column(0).as_slice(), "{pos}");
        }
    }

    #[test]
    fn cached_rollout_matches_full_recompute() {
        for seed in 0..5 {
            for pos in [PosEncoding::Rope, PosEncoding::Sinusoidal] {
                let p = random_model(seed, 16, 2, 12, pos);
                let sampler = SamplerConfig {
                    max_new_tokens: 20,
                    seed,
                    ..SamplerConfig::default()
                };
                let mut s = GenerationSession::new(&p, &[1, 2, 3], sampler.clone()).unwrap();
                let (reference, traj) = generate_recompute(&p, &[1, 2, 3], &sampler, Recompute::Full).unwrap();
                let mut step = 0;
                while !s.is_finished() {
                    assert!(close(s.logits(), &traj[step], 1e-9), "seed {seed} {pos} step {step}");
                    s.step().unwrap();
                    step += 1;
                }
                assert_eq!(s.tokens(), reference.tokens.as_slice());
            }
        }
    }

    #[test]
    fn single_layer_window_equivalence() {
        // re-forwarding only the last Δ tokens agrees with the sliding cache
        // when one layer bounds the receptive field and rotary scores depend
        // only on offsets
        for seed in 0..5 {
            let p = random_model(seed, 16, 1, 6, PosEncoding::Rope);
            let sampler = SamplerConfig {
                max_new_tokens: 20,
                seed,
                ..SamplerConfig::default()
            };
            let mut s = GenerationSession::new(&p, &[4, 4, 9], sampler.clone()).unwrap();
            let (reference, traj) = generate_recompute(&p, &[4, 4, 9], &sampler, Recompute::Window).unwrap();
            let mut step = 0;
            while !s.is_finished() {
                assert!(close(s.logits(), &traj[step], 1e-9), "seed {seed} step {step}");
                s.step().unwrap();
                step += 1;
            }
            assert_eq!(s.tokens(), reference.tokens.as_slice());
        }
    }

    #[test]
    fn cache_grows_then_saturates() {
        let p = random_model(1, 8, 3, 4, PosEncoding::Rope);
        let sampler = SamplerConfig {
            max_new_tokens: 10,
            ..SamplerConfig::default()
        };
        let mut s = GenerationSession::new(&p, &[1], sampler).unwrap();
        let mut lens = vec![s.cache().len()];
        while !s.is_finished() {
            s.step().unwrap();
            let ll = s.cache().layer_lens();
            assert!(ll.iter().all(|&l| l == ll[0]));
            lens.push(ll[0]);
        }
        assert_eq!(lens, vec![1, 2, 3, 4, 4, 4, 4, 4, 4, 4, 4]);
        assert_eq!(s.cache().footprint(), 3 * 2 * 4 * 8);
    }

    #[test]
    fn stopping_rules() {
        let p = random_model(1, 8, 1, 16, PosEncoding::Rope);
        let none = SamplerConfig {
            max_new_tokens: 0,
            ..SamplerConfig::default()
        };
        let g = generate(&p, &[3, 4], &none).unwrap();
        assert_eq!(g.tokens, vec![3, 4]);
        assert_eq!(g.stop, StopReason::MaxLength);

        // force EOS by making token 7 dominant
        let mut q = p.clone();
        q.b_out = Tensor::from_vec(&[17], (0..17).map(|i| if i == 7 { 1e3 } else { 0.0 }).collect()).unwrap();
        let sampler = SamplerConfig {
            eos: Some(7),
            max_new_tokens: 5,
            ..SamplerConfig::default()
        };
        let mut s = GenerationSession::new(&q, &[3], sampler).unwrap();
        assert_eq!(s.step().unwrap(), 7);
        assert_eq!(s.stop_reason(), Some(StopReason::Eos));
        assert!(matches!(s.step(), Err(Error::State(_))));
        assert!(matches!(s.next_token_dist(), Err(Error::State(_))));

        assert!(matches!(generate(&p, &[], &none), Err(Error::Contract(_))));
    }

    #[test]
    fn learned_positions_stop_at_window() {
        let p = random_model(1, 8, 1, 5, PosEncoding::Learned);
        let sampler = SamplerConfig {
            max_new_tokens: 50,
            ..SamplerConfig::default()
        };
        let g = generate(&p, &[1, 2], &sampler).unwrap();
        assert_eq!(g.tokens.len(), 5);
        assert_eq!(g.stop, StopReason::MaxLength);
    }

    #[test]
    fn greedy_ignores_seed_and_sampling_is_seeded() {
        let p = random_model(2, 8, 2, 16, PosEncoding::Rope);
        let greedy = |seed| {
            let s = SamplerConfig {
                top_k: Some(1),
                max_new_tokens: 12,
                seed,
                ..SamplerConfig::default()
            };
            generate(&p, &[1, 2], &s).unwrap().tokens
        };
        assert_eq!(greedy(1), greedy(99));
        let sampled = |seed| {
            let s = SamplerConfig {
                max_new_tokens: 12,
                seed,
                ..SamplerConfig::default()
            };
            generate(&p, &[1, 2], &s).unwrap().tokens
        };
        assert_eq!(sampled(5), sampled(5));
    }

    #[test]
    fn empirical_frequencies_match() {
        let probs = sampling_distribution(&TOY, 1.0, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample(&probs, &mut rng).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn augmentation() {
        let prompt = vec![9, 9];
        assert_eq!(augment_context(&prompt, &[], 10).unwrap(), prompt);
        assert_eq!(augment_context(&prompt, &[vec![1, 2]], 10).unwrap(), vec![1, 2, 9, 9]);
        let chunks = vec![vec![1, 2, 3], vec![4, 5]];
        let out = augment_context(&prompt, &chunks, 5).unwrap();
        assert_eq!(out, vec![3, 4, 5, 9, 9]);
        assert!(matches!(augment_context(&[1, 2, 3], &[], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn cosine_ranking() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
        let items = vec![vec![1.0, 0.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let q = [1.0, 0.5, 0.0];
        let ranked = rank_by_cosine(&q, &items, 3);
        // brute force over all orderings
        let score = |i: usize| {
            let dot: f64 = q.iter().zip(&items[i]).map(|(a, b)| a * b).sum();
            dot / (q.iter().map(|x| x * x).sum::<f64>().sqrt() * items[i].iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mut best = (0..3).collect::<Vec<_>>();
        best.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).unwrap());
        assert_eq!(ranked.iter().map(|r| r.0).collect::<Vec<_>>(), best);
        assert_eq!(rank_by_cosine(&q, &items, 10).len(), 3);
        let tie = rank_by_cosine(&[1.0], &[vec![2.0], vec![1.0]], 2);
        assert_eq!(tie.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn query_in_store_ranks_first() {
        let v = Vocabulary::byte_level();
        let p = ModelParameters::<f32>::init(&ModelConfig::new(16, v.size(), 1, 2, 16), 3).unwrap();
        let store = ChunkStore::from_texts(&["alpha beta", "the sky is blue", "gamma"], &v);
        let r = retrieve(&p, &v.encode_str("the sky is blue"), &store, 1).unwrap();
        assert_eq!(r[0].0, 1);
        assert!((r[0].1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn store_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "first para\n\nsecond para\n\n\n").unwrap();
        fs::write(dir.path().join("b.txt"), "third").unwrap();
        let s = ChunkStore::from_dir(dir.path(), &Vocabulary::byte_level()).unwrap();
        assert_eq!(s.texts, vec!["first para", "second para", "third"]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn lower_temperature_sharpens(
            z in proptest::collection::vec(-5.0f64..5.0, 2..10),
            t1 in 0.05f64..3.0,
            dt in 0.01f64..3.0,
        ) {
            let a = sampling_distribution(&z, t1, None).unwrap();
            let b = sampling_distribution(&z, t1 + dt, None).unwrap();
            let max = |p: &[f64]| p.iter().copied().fold(0.0, f64::max);
            prop_assert!(max(&a) >= max(&b) - 1e-12);
        }
    }
}
