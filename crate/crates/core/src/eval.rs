//! Measurement: verifier-based hallucination rates, retrieval comparison,
//! perplexity, and a conformance suite of fixed worked examples.

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{dpo_loss, extract_final_answer, PreferenceTriple, ReferencePolicy, RewardFunction, VerifierReward};
use crate::error::{Error, Result};
use crate::generate::{augment_context, generate, retrieve, sampling_distribution, ChunkStore, SamplerConfig};
use crate::model::{logits, ModelConfig, ModelParameters, PosEncoding};
use crate::pretrain::evaluate_loss;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::Vocabulary;

/// Truth score `V(c) ∈ [0, 1]` of a completion.
pub trait Verifier {
    fn verify(&self, prompt: &str, completion: &str) -> Result<f64>;
}

/// Checks integer arithmetic prompts ending in `a+b=`, `a-b=` or `a*b=`
/// against the completion's final integer.
#[derive(Debug, Clone, Copy, Default)]
pub struct ArithmeticVerifier;

/// Ground truth of the last `a op b =` expression at the end of `prompt`.
pub fn arithmetic_truth(prompt: &str) -> Option<i64> {
    let body = prompt.trim_end().strip_suffix('=')?.trim_end();
    let digits_from_end = |s: &str| s.len() - s.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    let nb = digits_from_end(body);
    if nb == 0 {
        return None;
    }
    let b: i64 = body[body.len() - nb..].parse().ok()?;
    let rest = body[..body.len() - nb].trim_end();
    let op = rest.chars().last()?;
    let rest = rest[..rest.len() - op.len_utf8()].trim_end();
    let na = digits_from_end(rest);
    if na == 0 {
        return None;
    }
    let mut a: i64 = rest[rest.len() - na..].parse().ok()?;
    let before = rest[..rest.len() - na].trim_end();
    if before.ends_with('-') && !before[..before.len() - 1].ends_with(|c: char| c.is_ascii_digit()) {
        a = -a;
    }
    match op {
        '+' => a.checked_add(b),
        '-' => a.checked_sub(b),
        '*' => a.checked_mul(b),
        _ => None,
    }
}

impl Verifier for ArithmeticVerifier {
    fn verify(&self, prompt: &str, completion: &str) -> Result<f64> {
        let truth =
            arithmetic_truth(prompt).ok_or_else(|| Error::Data(format!("not an arithmetic prompt: {prompt:?}")))?;
        Ok(if extract_final_answer(completion) == Some(truth) {
            1.0
        } else {
            0.0
        })
    }
}

/// Scores every completion the same.
#[derive(Debug, Clone, Copy)]
pub struct ConstantVerifier(pub f64);

impl Verifier for ConstantVerifier {
    fn verify(&self, _: &str, _: &str) -> Result<f64> {
        Ok(self.0)
    }
}

/// Wraps a closure `(prompt, completion) → score`.
pub struct FnVerifier<F>(pub F);

impl<F: Fn(&str, &str) -> f64> Verifier for FnVerifier<F> {
    fn verify(&self, prompt: &str, completion: &str) -> Result<f64> {
        Ok((self.0)(prompt, completion))
    }
}

impl<V: Verifier + ?Sized> Verifier for &V {
    fn verify(&self, prompt: &str, completion: &str) -> Result<f64> {
        (**self).verify(prompt, completion)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBreakdown {
    pub prompt: String,
    pub rate: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of the expected `1 − V(c(y))`.
#[derive(Debug, Clone, PartialEq)]
pub struct HallucinationReport {
    pub rate: f64,
    pub samples: usize,
    /// `sd(H) / √n`; reduces to the binomial form for 0/1 scores.
    pub std_error: f64,
    pub per_prompt: Vec<PromptBreakdown>,
}

impl HallucinationReport {
    /// Build from per-prompt lists of `H(y)` values.
    pub fn from_scores(prompts: &[String], scores: &[Vec<f64>]) -> Result<Self> {
        let all: Vec<f64> = scores.iter().flatten().copied().collect();
        if all.is_empty() {
            return Err(Error::Data("no samples to report".into()));
        }
        let n = all.len() as f64;
        let rate = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|h| (h - rate).powi(2)).sum::<f64>() / n;
        let per_prompt = prompts
            .iter()
            .zip(scores)
            .map(|(p, s)| PromptBreakdown {
                prompt: p.clone(),
                rate: s.iter().sum::<f64>() / s.len().max(1) as f64,
                samples: s.len(),
            })
            .collect();
        Ok(Self {
            rate,
            samples: all.len(),
            std_error: (var / n).sqrt(),
            per_prompt,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "hallucination rate {:.4} (se {:.4}, n = {})\n",
            self.rate, self.std_error, self.samples
        );
        for p in &self.per_prompt {
            let _ = writeln!(s, "  {:.4}  {:?} ({} samples)", p.rate, p.prompt, p.samples);
        }
        s
    }

    pub fn to_key_values(&self, prefix: &str) -> String {
        format!(
            "{prefix}rate={}\n{prefix}samples={}\n{prefix}std_error={}\n",
            self.rate, self.samples, self.std_error
        )
    }
}

fn clamp_score(v: Result<f64>) -> f64 {
    match v {
        Ok(x) if x.is_finite() => x.clamp(0.0, 1.0),
        Ok(x) => {
            log::warn!("verifier returned {x}; treating as 0");
            0.0
        }
        Err(e) => {
            log::warn!("verifier failed: {e}; treating as 0");
            0.0
        }
    }
}

/// Sample `samples_per_prompt` completions of every prompt (optionally
/// rewritten by `prepare`) and score each with `verifier`.
fn sample_scores<T: Scalar, V: Verifier + ?Sized>(
    params: &ModelParameters<T>,
    vocab: &Vocabulary,
    prompts: &[String],
    verifier: &V,
    sampler: &SamplerConfig,
    samples_per_prompt: usize,
    mut prepare: impl FnMut(&[usize]) -> Result<Vec<usize>>,
) -> Result<Vec<Vec<f64>>> {
    if samples_per_prompt == 0 {
        return Err(Error::Config("samples per prompt must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut out = Vec::with_capacity(prompts.len());
    for p in prompts {
        let tokens = prepare(&vocab.encode_str(p))?;
        let mut hs = Vec::with_capacity(samples_per_prompt);
        for _ in 0..samples_per_prompt {
            let s = SamplerConfig {
                seed: rng.next_u64(),
                ..sampler.clone()
            };
            let g = generate(params, &tokens, &s)?;
            let text = vocab.decode_lossy(g.completion())?;
            hs.push(1.0 - clamp_score(verifier.verify(p, &text)));
        }
        out.push(hs);
    }
    Ok(out)
}

pub fn hallucination_rate<T: Scalar, V: Verifier + ?Sized>(
    params: &ModelParameters<T>,
    vocab: &Vocabulary,
    prompts: &[String],
    verifier: &V,
    sampler: &SamplerConfig,
    samples_per_prompt: usize,
) -> Result<HallucinationReport> {
    let scores = sample_scores(params, vocab, prompts, verifier, sampler, samples_per_prompt, |t| {
        Ok(t.to_vec())
    })?;
    HallucinationReport::from_scores(prompts, &scores)
}

/// Rates with and without retrieved context, on identical sampler seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RagComparison {
    pub plain: HallucinationReport,
    pub augmented: HallucinationReport,
    /// `augmented.rate − plain.rate`.
    pub difference: f64,
    /// Standard error of the difference, treating the two runs as independent.
    pub difference_se: f64,
}

impl RagComparison {
    pub fn to_key_values(&self) -> String {
        format!(
            "{}{}rag.difference={}\nrag.difference_se={}\n",
            self.plain.to_key_values("plain."),
            self.augmented.to_key_values("augmented."),
            self.difference,
            self.difference_se
        )
    }
}

#[allow(clippy::too_many_arguments)]
pub fn rag_comparison<T: Scalar, V: Verifier + ?Sized>(
    params: &ModelParameters<T>,
    vocab: &Vocabulary,
    prompts: &[String],
    store: &ChunkStore,
    top_m: usize,
    verifier: &V,
    sampler: &SamplerConfig,
    samples_per_prompt: usize,
) -> Result<RagComparison> {
    let plain = hallucination_rate(params, vocab, prompts, verifier, sampler, samples_per_prompt)?;
    let context = params.config.context;
    let scores = sample_scores(params, vocab, prompts, verifier, sampler, samples_per_prompt, |t| {
        if store.is_empty() || top_m == 0 {
            return Ok(t.to_vec());
        }
        let hits = retrieve(params, t, store, top_m)?;
        let chunks: Vec<Vec<usize>> = hits.iter().map(|&(i, _)| store.chunks[i].clone()).collect();
        augment_context(t, &chunks, context)
    })?;
    let augmented = HallucinationReport::from_scores(prompts, &scores)?;
    Ok(RagComparison {
        difference: augmented.rate - plain.rate,
        difference_se: (plain.std_error.powi(2) + augmented.std_error.powi(2)).sqrt(),
        plain,
        augmented,
    })
}

/// `exp` of the mean next-token loss over `tokens`.
pub fn perplexity<T: Scalar>(params: &ModelParameters<T>, tokens: &[usize], seq_len: usize) -> Result<f64> {
    Ok(evaluate_loss(params, tokens, seq_len)?.to_f64().exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformanceCase {
    pub name: &'static str,
    pub expected: Vec<f64>,
    pub actual: Vec<f64>,
    pub tolerance: f64,
}

impl ConformanceCase {
    pub fn max_delta(&self) -> f64 {
        if self.expected.len() != self.actual.len() {
            return f64::INFINITY;
        }
        self.expected
            .iter()
            .zip(&self.actual)
            .map(|(e, a)| (e - a).abs())
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_delta() <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformanceReport {
    pub cases: Vec<ConformanceCase>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(ConformanceCase::passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{} {:<28} max_delta={:.3e} tol={:.0e} expected={:?} actual={:?}",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.max_delta(),
                c.tolerance,
                c.expected,
                c.actual.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>()
            );
        }
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            let _ = writeln!(s, "conformance.{}.pass={}", c.name, c.passed());
            let _ = writeln!(s, "conformance.{}.max_delta={}", c.name, c.max_delta());
        }
        let _ = writeln!(s, "conformance.passed={}", self.passed());
        s
    }
}

const TEMPERATURE_LOGITS: [f64; 3] = [2.0, 1.0, 0.1];

/// The two-dimensional single-head toy: three hidden states, `W_Q =
/// diag(2, 1)`, `W_K = W_V = I`, no scaling or rotations.
pub fn attention_toy() -> Result<(ModelParameters<f64>, Tensor<f64>)> {
    let mut c = ModelConfig::new(2, 3, 1, 1, 8);
    c.attn_scale = false;
    c.layer_norm = false;
    c.pos_encoding = PosEncoding::Learned;
    let mut p = ModelParameters::<f64>::zeros(&c)?;
    p.layers[0].heads[0].wq = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 1.0]])?;
    p.layers[0].heads[0].wk = Tensor::eye(2);
    p.layers[0].heads[0].wv = Tensor::eye(2);
    let h = Tensor::from_rows(&[&[1.0, 0.0, 1.0], &[0.0, 1.0, 1.0]])?;
    Ok((p, h))
}

/// Every fixed worked example, independent of any trained weights.
pub fn conformance_suite() -> Result<ConformanceReport> {
    let mut cases = Vec::new();
    let temp = |tau| sampling_distribution(&TEMPERATURE_LOGITS, tau, None);
    cases.push(ConformanceCase {
        name: "temperature_1",
        expected: vec![0.659, 0.242, 0.099],
        actual: temp(1.0)?,
        tolerance: 1e-3,
    });
    cases.push(ConformanceCase {
        name: "temperature_0.5_p_cat",
        expected: vec![0.90],
        actual: vec![temp(0.5)?[0]],
        tolerance: 1e-2,
    });
    cases.push(ConformanceCase {
        name: "temperature_2",
        expected: vec![0.46, 0.28, 0.26],
        actual: temp(2.0)?,
        tolerance: 1e-2,
    });

    let (p, h) = attention_toy()?;
    let scores = p.attention_scores(&h, 0, 0, 2)?;
    let weights = crate::model::attention_weights(&scores)?;
    let output = p.attention_head_output(&h, 0, 0, 2)?;
    cases.push(ConformanceCase {
        name: "attention_scores",
        expected: vec![2.0, 1.0, 3.0],
        actual: scores,
        tolerance: 1e-12,
    });
    cases.push(ConformanceCase {
        name: "attention_weights",
        expected: vec![0.245, 0.090, 0.665],
        actual: weights,
        tolerance: 1e-3,
    });
    cases.push(ConformanceCase {
        name: "attention_output",
        expected: vec![0.910, 0.755],
        actual: output,
        tolerance: 2e-3,
    });

    // a final state and head that produce the worked-example logits
    let mut c = ModelConfig::new(2, 3, 0, 1, 4);
    c.pos_encoding = PosEncoding::Sinusoidal;
    let mut head = ModelParameters::<f64>::zeros(&c)?;
    head.w_out = Some(Tensor::from_rows(&[&[1.5, 0.5], &[1.0, 0.0], &[0.0, 0.1]])?);
    head.b_out = Tensor::vector(&[0.0, 0.0, 0.0]);
    cases.push(ConformanceCase {
        name: "toy_logits",
        expected: TEMPERATURE_LOGITS.to_vec(),
        actual: logits(&[1.0, 1.0], &head)?,
        tolerance: 1e-12,
    });

    let vocab = Vocabulary::byte_level();
    let reward = VerifierReward {
        verifier: FnVerifier(|_: &str, c: &str| if extract_final_answer(c) == Some(42) { 1.0 } else { 0.0 }),
        vocab: vocab.clone(),
    };
    cases.push(ConformanceCase {
        name: "verifier_reward_42",
        expected: vec![1.0],
        actual: vec![reward.reward(&vocab.encode_str("17+25="), &vocab.encode_str("... = 42"))?],
        tolerance: 0.0,
    });
    cases.push(ConformanceCase {
        name: "final_answer_extraction",
        expected: vec![42.0],
        actual: vec![extract_final_answer("17+25 = (10+20)+(7+5)=30+12=42").map_or(f64::NAN, |x| x as f64)],
        tolerance: 0.0,
    });

    let mut mc = ModelConfig::new(4, 5, 1, 1, 8);
    mc.pos_encoding = PosEncoding::Rope;
    let m = ModelParameters::<f64>::init(&mc, 0)?;
    let r = ReferencePolicy::new(&m);
    let t = PreferenceTriple::new(vec![1, 2], vec![3], vec![4, 0])?;
    cases.push(ConformanceCase {
        name: "dpo_reference_ln2",
        expected: vec![std::f64::consts::LN_2],
        actual: vec![dpo_loss(&m, &r, &t, 0.1)?],
        tolerance: 1e-9,
    });
    Ok(ConformanceReport { cases })
}
