//! Preference and reward-driven fine-tuning: DPO, a Bradley–Terry reward
//! head, best-of-N rejection sampling (RSFT), and group-relative policy
//! gradient with a programmatic verifier (RLVR).

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::Verifier;
use crate::generate::{generate, Generation, SamplerConfig};
use crate::model::{BoundParams, ModelParameters};
use crate::pretrain::{adamw_update, gradients, OptimConfig, OptimizerState};
use crate::tensor::{lit, log_softmax, Scalar, Tensor, Var};
use crate::tokenizer::{TokenSequence, Vocabulary};

/// One comparison `(x, y⁺, y⁻)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceTriple {
    pub prompt: TokenSequence,
    pub chosen: TokenSequence,
    pub rejected: TokenSequence,
}

impl PreferenceTriple {
    pub fn new(prompt: TokenSequence, chosen: TokenSequence, rejected: TokenSequence) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::Contract("preference prompt is empty".into()));
        }
        if chosen == rejected {
            return Err(Error::Contract(
                "preferred and rejected completions are identical".into(),
            ));
        }
        Ok(Self {
            prompt,
            chosen,
            rejected,
        })
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for &t in self.prompt.iter().chain(&self.chosen).chain(&self.rejected) {
            if t >= vocab_size {
                return Err(Error::Index {
                    what: "token",
                    index: t,
                    size: vocab_size,
                });
            }
        }
        Ok(())
    }
}

fn unescape(field: &str) -> String {
    let mut out = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

/// Parse `prompt<TAB>preferred<TAB>rejected` lines; `\n`, `\t` and `\\`
/// escapes are expanded, blank lines and `#` comments skipped.
pub fn parse_triples(text: &str, vocab: &Vocabulary) -> Result<Vec<PreferenceTriple>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "line {}: expected 3 tab-separated fields, found {}",
                i + 1,
                fields.len()
            )));
        }
        let enc = |s: &str| vocab.encode_str(&unescape(s));
        let t = PreferenceTriple::new(enc(fields[0]), enc(fields[1]), enc(fields[2]))
            .map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        out.push(t);
    }
    if out.is_empty() {
        return Err(Error::Data("no preference triples found".into()));
    }
    Ok(out)
}

/// Frozen copy of the parameters taken when alignment starts.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy<T = f32> {
    params: ModelParameters<T>,
}

impl<T: Scalar> ReferencePolicy<T> {
    pub fn new(params: &ModelParameters<T>) -> Self {
        Self { params: params.clone() }
    }

    pub fn params(&self) -> &ModelParameters<T> {
        &self.params
    }

    pub fn logprob(&self, prompt: &[usize], completion: &[usize]) -> Result<f64> {
        sequence_logprob(&self.params, prompt, completion)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    /// DPO inverse temperature `β`.
    pub beta: f64,
    /// Completions sampled per prompt.
    pub samples: usize,
    /// Rollout temperature.
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub max_new_tokens: usize,
    pub eos: Option<usize>,
    pub optim: OptimConfig,
    pub steps: u64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            samples: 4,
            temperature: 1.0,
            top_k: None,
            max_new_tokens: 16,
            eos: None,
            optim: OptimConfig {
                weight_decay: 0.0,
                ..OptimConfig::default()
            },
            steps: 100,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples per prompt must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        self.optim.validate()
    }

    fn sampler(&self, seed: u64, max_new_tokens: usize) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            max_new_tokens,
            eos: self.eos,
            seed,
        }
    }
}

fn check_fits<T: Scalar>(params: &ModelParameters<T>, prompt: &[usize], completion: &[usize]) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Contract("log-probability needs a non-empty prompt".into()));
    }
    let n = prompt.len() + completion.len();
    if n > params.config.context {
        return Err(Error::Contract(format!(
            "prompt plus completion ({n} tokens) exceeds the context window {}",
            params.config.context
        )));
    }
    Ok(())
}

/// Input tokens and the logit columns that predict each completion token.
fn completion_inputs(prompt: &[usize], completion: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = prompt.to_vec();
    inputs.extend_from_slice(&completion[..completion.len() - 1]);
    let cols = (prompt.len() - 1..prompt.len() - 1 + completion.len()).collect();
    (inputs, cols)
}

/// `Σ_t ln π(y_t | x, y_{<t})` as a scalar on the tape. Only columns that
/// predict completion tokens enter the sum.
pub fn sequence_logprob_var<'t, T: Scalar>(
    params: &ModelParameters<T>,
    bound: &BoundParams<'t, T>,
    prompt: &[usize],
    completion: &[usize],
) -> Result<Var<'t, T>> {
    check_fits(params, prompt, completion)?;
    if completion.is_empty() {
        return Ok(bound.b_out.tape().leaf(Tensor::scalar(T::zero())));
    }
    let (inputs, cols) = completion_inputs(prompt, completion);
    let pass = params.forward(bound, &inputs)?;
    Ok(pass.logits.log_softmax_gather(&cols, completion)?.sum())
}

/// Per-token `ln π(y_t | x, y_{<t})`.
pub fn token_logprobs<T: Scalar>(
    params: &ModelParameters<T>,
    prompt: &[usize],
    completion: &[usize],
) -> Result<Vec<f64>> {
    check_fits(params, prompt, completion)?;
    if completion.is_empty() {
        return Ok(Vec::new());
    }
    let (inputs, cols) = completion_inputs(prompt, completion);
    let (_, logits) = params.evaluate(&inputs)?;
    cols.iter()
        .zip(completion)
        .map(|(&c, &y)| {
            let z: Vec<f64> = logits.column(c).iter().map(|&x| Scalar::to_f64(x)).collect();
            Ok(log_softmax(&z)[y])
        })
        .collect()
}

/// `ln π(y | x)`; zero for an empty completion.
pub fn sequence_logprob<T: Scalar>(params: &ModelParameters<T>, prompt: &[usize], completion: &[usize]) -> Result<f64> {
    Ok(token_logprobs(params, prompt, completion)?.iter().sum())
}

fn log_sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `ln π_θ(y⁺|x) − ln π_θ(y⁻|x) − (ln π_ref(y⁺|x) − ln π_ref(y⁻|x))`.
pub fn dpo_margin<T: Scalar>(
    params: &ModelParameters<T>,
    reference: &ReferencePolicy<T>,
    t: &PreferenceTriple,
) -> Result<f64> {
    let policy = sequence_logprob(params, &t.prompt, &t.chosen)? - sequence_logprob(params, &t.prompt, &t.rejected)?;
    Ok(policy - reference_margin(reference, t)?)
}

fn reference_margin<T: Scalar>(reference: &ReferencePolicy<T>, t: &PreferenceTriple) -> Result<f64> {
    Ok(reference.logprob(&t.prompt, &t.chosen)? - reference.logprob(&t.prompt, &t.rejected)?)
}

/// `−ln σ(β · margin)`.
pub fn dpo_loss<T: Scalar>(
    params: &ModelParameters<T>,
    reference: &ReferencePolicy<T>,
    triple: &PreferenceTriple,
    beta: f64,
) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    Ok(-log_sigmoid_f64(beta * dpo_margin(params, reference, triple)?))
}

/// Mean DPO loss over `triples` on the tape; reference log-ratios enter as
/// constants so gradients flow to the policy only.
pub fn dpo_loss_var<'t, T: Scalar>(
    params: &ModelParameters<T>,
    bound: &BoundParams<'t, T>,
    reference: &ReferencePolicy<T>,
    triples: &[PreferenceTriple],
    beta: f64,
) -> Result<Var<'t, T>> {
    if triples.is_empty() {
        return Err(Error::Data("no preference triples".into()));
    }
    let tape = bound.b_out.tape();
    let mut total: Option<Var<'t, T>> = None;
    for t in triples {
        let chosen = sequence_logprob_var(params, bound, &t.prompt, &t.chosen)?;
        let rejected = sequence_logprob_var(params, bound, &t.prompt, &t.rejected)?;
        let ref_margin = tape.leaf(Tensor::scalar(T::from_f64(reference_margin(reference, t)?)));
        let loss = chosen
            .sub(rejected)?
            .sub(ref_margin)?
            .scale(T::from_f64(beta))
            .log_sigmoid()
            .neg();
        total = Some(match total {
            Some(acc) => acc.add(loss)?,
            None => loss,
        });
    }
    Ok(total
        .expect("non-empty")
        .scale(T::one() / lit::<T>(triples.len() as f64)))
}

/// Full-batch DPO. `on_step(step, mean_loss, params)` runs after every update.
pub fn train_dpo<T: Scalar>(
    params: &mut ModelParameters<T>,
    reference: &ReferencePolicy<T>,
    triples: &[PreferenceTriple],
    cfg: &AlignConfig,
    mut on_step: impl FnMut(u64, f64, &ModelParameters<T>) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if triples.is_empty() {
        return Err(Error::Data("no preference triples".into()));
    }
    for t in triples {
        t.validate(params.config.vocab_size)?;
    }
    let mut state = OptimizerState::new(params);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let snapshot: &ModelParameters<T> = params;
        let (loss, grads) = gradients(snapshot, |b| dpo_loss_var(snapshot, b, reference, triples, cfg.beta))?;
        adamw_update(params, &mut state, &grads, &cfg.optim)?;
        losses.push(loss.to_f64());
        on_step(state.step, loss.to_f64(), params)?;
    }
    Ok(losses)
}

/// Scores a `(prompt, completion)` pair.
pub trait RewardFunction {
    fn reward(&self, prompt: &[usize], completion: &[usize]) -> Result<f64>;
}

impl<F: Fn(&[usize], &[usize]) -> f64> RewardFunction for F {
    fn reward(&self, prompt: &[usize], completion: &[usize]) -> Result<f64> {
        Ok(self(prompt, completion))
    }
}

/// A verifier applied to the decoded prompt and completion.
pub struct VerifierReward<V> {
    pub verifier: V,
    pub vocab: Vocabulary,
}

impl<V: Verifier> RewardFunction for VerifierReward<V> {
    fn reward(&self, prompt: &[usize], completion: &[usize]) -> Result<f64> {
        let p = self.vocab.decode_lossy(prompt)?;
        let c = self.vocab.decode_lossy(completion)?;
        self.verifier.verify(&p, &c)
    }
}

/// Scalar head `r(x, y) = w · s_last + b` on a frozen backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedReward<T = f32> {
    backbone: ModelParameters<T>,
    pub w: Vec<f64>,
    pub b: f64,
}

impl<T: Scalar> LearnedReward<T> {
    /// Zero head: every pair scores 0.
    pub fn new(backbone: &ModelParameters<T>) -> Self {
        Self {
            backbone: backbone.clone(),
            w: vec![0.0; backbone.config.d_model],
            b: 0.0,
        }
    }

    /// Final hidden state at the last token of `x ⊕ y`.
    pub fn features(&self, prompt: &[usize], completion: &[usize]) -> Result<Vec<f64>> {
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(completion);
        let (hidden, _) = self.backbone.evaluate(&tokens)?;
        let s = hidden.output().column(tokens.len() - 1);
        Ok(s.iter().map(|&x| Scalar::to_f64(x)).collect())
    }

    fn score_features(&self, phi: &[f64]) -> f64 {
        self.w.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>() + self.b
    }
}

impl<T: Scalar> RewardFunction for LearnedReward<T> {
    fn reward(&self, prompt: &[usize], completion: &[usize]) -> Result<f64> {
        Ok(self.score_features(&self.features(prompt, completion)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardTrainConfig {
    pub lr: f64,
    pub steps: usize,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self { lr: 0.5, steps: 300 }
    }
}

/// Mean `−ln σ(r(x,y⁺) − r(x,y⁻))`.
pub fn reward_model_loss<T: Scalar>(model: &LearnedReward<T>, comparisons: &[PreferenceTriple]) -> Result<f64> {
    let mut total = 0.0;
    for t in comparisons {
        let d = model.reward(&t.prompt, &t.chosen)? - model.reward(&t.prompt, &t.rejected)?;
        total += -log_sigmoid_f64(d);
    }
    Ok(total / comparisons.len() as f64)
}

/// Fit the head by full-batch gradient descent on the Bradley–Terry loss.
/// The bias cancels in every score difference and stays at 0. Returns the
/// model and the loss before each step.
pub fn train_reward_model<T: Scalar>(
    backbone: &ModelParameters<T>,
    comparisons: &[PreferenceTriple],
    cfg: &RewardTrainConfig,
) -> Result<(LearnedReward<T>, Vec<f64>)> {
    if comparisons.is_empty() {
        return Err(Error::Data("no comparisons to fit".into()));
    }
    let mut model = LearnedReward::new(backbone);
    let diffs: Vec<Vec<f64>> = comparisons
        .iter()
        .map(|t| {
            let a = model.features(&t.prompt, &t.chosen)?;
            let b = model.features(&t.prompt, &t.rejected)?;
            Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
        })
        .collect::<Result<_>>()?;
    let n = diffs.len() as f64;
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut grad = vec![0.0; model.w.len()];
        let mut loss = 0.0;
        for phi in &diffs {
            let m: f64 = model.w.iter().zip(phi).map(|(a, b)| a * b).sum();
            loss -= log_sigmoid_f64(m);
            // d/dm −ln σ(m) = −σ(−m)
            let g = -1.0 / (1.0 + m.exp());
            for (gi, p) in grad.iter_mut().zip(phi) {
                *gi += g * p / n;
            }
        }
        losses.push(loss / n);
        for (w, g) in model.w.iter_mut().zip(&grad) {
            *w -= cfg.lr * g;
        }
    }
    Ok((model, losses))
}

/// Fraction of comparisons with `r(x,y⁺) > r(x,y⁻)`.
pub fn pairwise_accuracy<R: RewardFunction + ?Sized>(reward: &R, comparisons: &[PreferenceTriple]) -> Result<f64> {
    let mut correct = 0usize;
    for t in comparisons {
        if reward.reward(&t.prompt, &t.chosen)? > reward.reward(&t.prompt, &t.rejected)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / comparisons.len() as f64)
}

/// Rewards that fail to evaluate count as 0.
fn safe_reward<R: RewardFunction + ?Sized>(reward: &R, prompt: &[usize], completion: &[usize]) -> f64 {
    match reward.reward(prompt, completion) {
        Ok(r) if r.is_finite() => r,
        Ok(r) => {
            log::warn!("non-finite reward {r}; scoring as 0");
            0.0
        }
        Err(e) => {
            log::warn!("reward evaluation failed: {e}; scoring as 0");
            0.0
        }
    }
}

/// Index of the largest reward, lowest index on ties.
pub fn argmax_first(rewards: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &r) in rewards.iter().enumerate() {
        if best.is_none_or(|b| r > rewards[b]) {
            best = Some(i);
        }
    }
    best
}

/// Per-sample sampler seeds drawn from one stream.
fn sample_seeds(rng: &mut ChaCha8Rng, n: usize) -> Vec<u64> {
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Longest completion that keeps `prompt ⊕ completion` inside the window.
fn rollout_budget<T: Scalar>(params: &ModelParameters<T>, prompt: &[usize], wanted: usize) -> Result<usize> {
    let room = params.config.context.saturating_sub(prompt.len());
    if room == 0 {
        return Err(Error::Contract(format!(
            "prompt of {} tokens leaves no room in the context window {}",
            prompt.len(),
            params.config.context
        )));
    }
    Ok(wanted.min(room))
}

/// The `N` rollouts of one prompt and their rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGroup {
    pub prompt: TokenSequence,
    pub completions: Vec<TokenSequence>,
    pub rewards: Vec<f64>,
    /// Sampler seed of each rollout.
    pub seeds: Vec<u64>,
}

impl SampleGroup {
    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }

    /// `r_i − mean(r)`.
    pub fn advantages(&self) -> Vec<f64> {
        let m = self.mean_reward();
        self.rewards.iter().map(|r| r - m).collect()
    }
}

/// Sample `cfg.samples` completions of `prompt` and score each one.
pub fn sample_group<T: Scalar, R: RewardFunction + ?Sized>(
    params: &ModelParameters<T>,
    prompt: &[usize],
    reward: &R,
    cfg: &AlignConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SampleGroup> {
    let budget = rollout_budget(params, prompt, cfg.max_new_tokens)?;
    let seeds = sample_seeds(rng, cfg.samples);
    let mut completions = Vec::with_capacity(seeds.len());
    let mut rewards = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let g: Generation = generate(params, prompt, &cfg.sampler(seed, budget))?;
        let c = g.completion().to_vec();
        rewards.push(safe_reward(reward, prompt, &c));
        completions.push(c);
    }
    Ok(SampleGroup {
        prompt: prompt.to_vec(),
        completions,
        rewards,
        seeds,
    })
}

/// Best-of-N: the group and the index of its highest-reward completion.
pub fn rsft_select<T: Scalar, R: RewardFunction + ?Sized>(
    params: &ModelParameters<T>,
    prompt: &[usize],
    reward: &R,
    cfg: &AlignConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(SampleGroup, usize)> {
    cfg.validate()?;
    let group = sample_group(params, prompt, reward, cfg, rng)?;
    let best = argmax_first(&group.rewards).expect("at least one sample");
    Ok((group, best))
}

/// Mean next-token loss over completion tokens only; prompt positions never
/// enter the objective.
pub fn completion_loss_var<'t, T: Scalar>(
    params: &ModelParameters<T>,
    bound: &BoundParams<'t, T>,
    pairs: &[(TokenSequence, TokenSequence)],
) -> Result<Var<'t, T>> {
    let mut total: Option<Var<'t, T>> = None;
    let mut n = 0usize;
    for (x, y) in pairs {
        if y.is_empty() {
            continue;
        }
        let lp = sequence_logprob_var(params, bound, x, y)?;
        n += y.len();
        total = Some(match total {
            Some(acc) => acc.add(lp)?,
            None => lp,
        });
    }
    let total = total.ok_or_else(|| Error::Data("no completion tokens to fine-tune on".into()))?;
    Ok(total.scale(-T::one() / lit::<T>(n as f64)))
}

/// Supervised fine-tuning on `(prompt, completion)` pairs.
pub fn rsft_finetune<T: Scalar>(
    params: &mut ModelParameters<T>,
    pairs: &[(TokenSequence, TokenSequence)],
    cfg: &AlignConfig,
    mut on_step: impl FnMut(u64, f64, &ModelParameters<T>) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.optim.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("no fine-tuning pairs".into()));
    }
    let mut state = OptimizerState::new(params);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let snapshot: &ModelParameters<T> = params;
        let (loss, grads) = gradients(snapshot, |b| completion_loss_var(snapshot, b, pairs))?;
        adamw_update(params, &mut state, &grads, &cfg.optim)?;
        losses.push(loss.to_f64());
        on_step(state.step, loss.to_f64(), params)?;
    }
    Ok(losses)
}

/// One RSFT round: best-of-N selection on every prompt, then fine-tuning on
/// the winners. Returns the selected pairs and the mean selected reward.
pub fn rsft_round<T: Scalar, R: RewardFunction + ?Sized>(
    params: &mut ModelParameters<T>,
    prompts: &[TokenSequence],
    reward: &R,
    cfg: &AlignConfig,
    mut on_step: impl FnMut(u64, f64, &ModelParameters<T>) -> Result<()>,
) -> Result<(Vec<(TokenSequence, TokenSequence)>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::with_capacity(prompts.len());
    let mut total = 0.0;
    for p in prompts {
        let (group, best) = rsft_select(params, p, reward, cfg, &mut rng)?;
        total += group.rewards[best];
        pairs.push((p.clone(), group.completions[best].clone()));
    }
    rsft_finetune(params, &pairs, cfg, &mut on_step)?;
    Ok((pairs, total / prompts.len().max(1) as f64))
}

/// `−(1/N_tok) Σ_i A_i Σ_t ln π(y_{i,t} | x, y_{i,<t})`, with `N_tok` the
/// number of completion tokens across all groups.
pub fn policy_gradient_loss_var<'t, T: Scalar>(
    params: &ModelParameters<T>,
    bound: &BoundParams<'t, T>,
    groups: &[SampleGroup],
) -> Result<Var<'t, T>> {
    let n: usize = groups.iter().flat_map(|g| g.completions.iter().map(Vec::len)).sum();
    if n == 0 {
        return Err(Error::Data("no completion tokens in the rollouts".into()));
    }
    let mut total: Option<Var<'t, T>> = None;
    for g in groups {
        for (c, a) in g.completions.iter().zip(g.advantages()) {
            if a == 0.0 || c.is_empty() {
                continue;
            }
            let term = sequence_logprob_var(params, bound, &g.prompt, c)?.scale(T::from_f64(a));
            total = Some(match total {
                Some(acc) => acc.add(term)?,
                None => term,
            });
        }
    }
    let total = total.unwrap_or_else(|| bound.b_out.tape().leaf(Tensor::scalar(T::zero())));
    Ok(total.scale(-T::one() / lit::<T>(n as f64)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlvrStats {
    pub mean_reward: f64,
    pub loss: f64,
    /// False when every advantage was zero and no update ran.
    pub updated: bool,
}

/// Policy-gradient update from already-scored groups. When every advantage
/// is zero the gradient vanishes and the optimizer is not stepped, so the
/// parameters stay bit-identical.
pub fn rlvr_update<T: Scalar>(
    params: &mut ModelParameters<T>,
    state: &mut OptimizerState<T>,
    groups: &[SampleGroup],
    optim: &OptimConfig,
) -> Result<RlvrStats> {
    if groups.is_empty() {
        return Err(Error::Data("no rollout groups".into()));
    }
    let mean_reward = groups.iter().map(SampleGroup::mean_reward).sum::<f64>() / groups.len() as f64;
    if groups.iter().all(|g| g.advantages().iter().all(|&a| a == 0.0)) {
        return Ok(RlvrStats {
            mean_reward,
            loss: 0.0,
            updated: false,
        });
    }
    let snapshot: &ModelParameters<T> = params;
    let (loss, grads) = gradients(snapshot, |b| policy_gradient_loss_var(snapshot, b, groups))?;
    adamw_update(params, state, &grads, optim)?;
    Ok(RlvrStats {
        mean_reward,
        loss: loss.to_f64(),
        updated: true,
    })
}

/// Sample, score and update once over `prompts`.
pub fn rlvr_step<T: Scalar, R: RewardFunction + ?Sized>(
    params: &mut ModelParameters<T>,
    state: &mut OptimizerState<T>,
    prompts: &[TokenSequence],
    reward: &R,
    cfg: &AlignConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RlvrStats> {
    cfg.validate()?;
    if cfg.samples < 2 {
        return Err(Error::Config("RLVR needs at least 2 samples per prompt".into()));
    }
    let groups = prompts
        .iter()
        .map(|p| sample_group(params, p, reward, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    rlvr_update(params, state, &groups, &cfg.optim)
}

/// Integer answer of a completion: the last integer after the final `=`
/// when there is one, otherwise the last integer anywhere. A `+`/`-` counts
/// as a sign only when not preceded by a digit.
pub fn extract_final_answer(completion: &str) -> Option<i64> {
    let tail = match completion.rfind('=') {
        Some(i) => &completion[i + 1..],
        None => completion,
    };
    let bytes = tail.as_bytes();
    let mut end = bytes.len();
    while end > 0 && !bytes[end - 1].is_ascii_digit() {
        end -= 1;
    }
    if end == 0 {
        return None;
    }
    let mut start = end;
    while start > 0 && bytes[start - 1].is_ascii_digit() {
        start -= 1;
    }
    if start > 0
        && (bytes[start - 1] == b'-' || bytes[start - 1] == b'+')
        && (start < 2 || !bytes[start - 2].is_ascii_digit())
    {
        start -= 1;
    }
    tail[start..end].parse().ok()
}

/// Every single-digit addition prompt `"a+b="` with its answer.
pub fn addition_prompts() -> Vec<(String, i64)> {
    (0..10)
        .flat_map(|a| (0..10).map(move |b| (format!("{a}+{b}="), a + b)))
        .collect()
}

/// `Σ_i p_i ln(p_i / q_i)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// `Σ_t KL(π_θ(·|x,y_{<t}) ‖ π_ref(·|x,y_{<t}))` over completion positions.
pub fn token_kl<T: Scalar>(
    params: &ModelParameters<T>,
    reference: &ReferencePolicy<T>,
    prompt: &[usize],
    completion: &[usize],
) -> Result<f64> {
    check_fits(params, prompt, completion)?;
    if completion.is_empty() {
        return Ok(0.0);
    }
    let (inputs, cols) = completion_inputs(prompt, completion);
    let (_, zp) = params.evaluate(&inputs)?;
    let (_, zr) = reference.params().evaluate(&inputs)?;
    let probs = |z: &Tensor<T>, c: usize| -> Result<Vec<f64>> {
        let col: Vec<f64> = z.column(c).iter().map(|&x| Scalar::to_f64(x)).collect();
        Ok(log_softmax(&col).iter().map(|l| l.exp()).collect())
    };
    let mut total = 0.0;
    for &c in &cols {
        let (p, q) = (probs(&zp, c)?, probs(&zr, c)?);
        total += kl_divergence(&p, &q).max(0.0);
    }
    Ok(total)
}

/// `step<TAB>loss<TAB>mean_reward` lines.
pub struct AlignLog<W: Write> {
    out: W,
}

impl<W: Write> AlignLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, step: u64, loss: f64, mean_reward: f64) -> Result<()> {
        writeln!(self.out, "{step}\t{loss}\t{mean_reward}")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
