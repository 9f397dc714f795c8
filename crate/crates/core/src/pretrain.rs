//! Next-token maximum-likelihood training.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{BoundParams, ModelParameters};
use crate::tensor::{lit, Scalar, Tape, Tensor, Var};
use crate::tokenizer::{TokenSequence, Vocabulary};

/// Training documents, each ending in EOS, and their concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    documents: Vec<TokenSequence>,
    stream: Vec<usize>,
}

/// How a text file is cut into documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocSplit {
    /// The whole file is one document.
    File,
    /// Every non-empty line is a document.
    Line,
    /// Blocks separated by blank lines.
    Paragraph,
}

impl FromStr for DocSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "file" => Ok(DocSplit::File),
            "line" => Ok(DocSplit::Line),
            "paragraph" => Ok(DocSplit::Paragraph),
            other => Err(Error::Config(format!("unknown document split {other:?}"))),
        }
    }
}

impl Corpus {
    /// Documents are taken as given; none may be empty.
    pub fn new(documents: Vec<TokenSequence>) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::Data("corpus has no documents".into()));
        }
        if let Some(i) = documents.iter().position(|d| d.is_empty()) {
            return Err(Error::Data(format!("document {i} is empty")));
        }
        let stream = documents.concat();
        Ok(Self { documents, stream })
    }

    /// Encode each text and append EOS.
    pub fn from_texts<S: AsRef<[u8]>>(texts: &[S], vocab: &Vocabulary) -> Result<Self> {
        let docs = texts
            .iter()
            .map(|t| {
                let mut d = vocab.encode(t.as_ref());
                d.push(vocab.eos());
                d
            })
            .collect();
        Self::new(docs)
    }

    /// Read a file, or every regular file in a directory (sorted by name).
    pub fn from_path(path: &Path, vocab: &Vocabulary, split: DocSplit) -> Result<Self> {
        let mut files = Vec::new();
        if path.is_dir() {
            for entry in fs::read_dir(path)? {
                let p = entry?.path();
                if p.is_file() {
                    files.push(p);
                }
            }
            files.sort();
        } else {
            files.push(path.to_path_buf());
        }
        let mut texts: Vec<Vec<u8>> = Vec::new();
        for f in &files {
            let bytes = fs::read(f).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
            match split {
                DocSplit::File => texts.push(bytes),
                DocSplit::Line => texts.extend(
                    bytes
                        .split(|&b| b == b'\n')
                        .filter(|l| !l.iter().all(u8::is_ascii_whitespace))
                        .map(<[u8]>::to_vec),
                ),
                DocSplit::Paragraph => {
                    let text = String::from_utf8_lossy(&bytes).replace("\r\n", "\n");
                    texts.extend(
                        text.split("\n\n")
                            .map(str::trim)
                            .filter(|p| !p.is_empty())
                            .map(|p| p.as_bytes().to_vec()),
                    );
                }
            }
        }
        texts.retain(|t| !t.is_empty());
        if texts.is_empty() {
            return Err(Error::Data(format!("no text found under {}", path.display())));
        }
        Self::from_texts(&texts, vocab)
    }

    pub fn documents(&self) -> &[TokenSequence] {
        &self.documents
    }

    /// Documents packed end to end; EOS tokens separate them.
    pub fn stream(&self) -> &[usize] {
        &self.stream
    }

    pub fn total_tokens(&self) -> usize {
        self.stream.len()
    }
}

/// `B` rows of inputs and their left-shifted targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<TokenSequence>,
    pub targets: Vec<TokenSequence>,
}

impl Batch {
    /// A single row from one sequence: inputs `x[..n−1]`, targets `x[1..]`.
    pub fn from_sequence(tokens: &[usize]) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Data("a training sequence needs at least two tokens".into()));
        }
        Ok(Self {
            inputs: vec![tokens[..tokens.len() - 1].to_vec()],
            targets: vec![tokens[1..].to_vec()],
        })
    }

    pub fn positions(&self) -> usize {
        self.inputs.iter().map(Vec::len).sum()
    }
}

/// Endless stream of uniformly sampled windows.
pub struct BatchStream<'c> {
    stream: &'c [usize],
    batch_size: usize,
    seq_len: usize,
    rng: ChaCha8Rng,
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let t = self.seq_len;
        let last_start = self.stream.len() - t - 1;
        let mut batch = Batch {
            inputs: Vec::with_capacity(self.batch_size),
            targets: Vec::with_capacity(self.batch_size),
        };
        for _ in 0..self.batch_size {
            let s = self.rng.gen_range(0..=last_start);
            batch.inputs.push(self.stream[s..s + t].to_vec());
            batch.targets.push(self.stream[s + 1..s + t + 1].to_vec());
        }
        Some(batch)
    }
}

pub fn make_batches(corpus: &Corpus, batch_size: usize, seq_len: usize, seed: u64) -> Result<BatchStream<'_>> {
    if batch_size == 0 || seq_len == 0 {
        return Err(Error::Config("batch size and sequence length must be positive".into()));
    }
    if corpus.total_tokens() <= seq_len {
        return Err(Error::Data(format!(
            "corpus has {} tokens; sequence length {seq_len} needs at least {}",
            corpus.total_tokens(),
            seq_len + 1
        )));
    }
    Ok(BatchStream {
        stream: corpus.stream(),
        batch_size,
        seq_len,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

fn check_row(inputs: &[usize], targets: &[usize], context: usize) -> Result<()> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::Shape {
            op: "batch row",
            left: vec![inputs.len()],
            right: vec![targets.len()],
        });
    }
    if inputs.len() > context {
        return Err(Error::Contract(format!(
            "sequence length {} exceeds the context window {context}",
            inputs.len()
        )));
    }
    Ok(())
}

/// Mean next-token cross-entropy over every position of the batch, on a tape.
pub fn batch_loss<'t, T: Scalar>(
    params: &ModelParameters<T>,
    bound: &BoundParams<'t, T>,
    batch: &Batch,
) -> Result<Var<'t, T>> {
    let mut total: Option<Var<'t, T>> = None;
    for (x, y) in batch.inputs.iter().zip(&batch.targets) {
        check_row(x, y, params.config.context)?;
        let pass = params.forward(bound, x)?;
        let cols: Vec<usize> = (0..x.len()).collect();
        let s = pass.logits.log_softmax_gather(&cols, y)?.sum();
        total = Some(match total {
            Some(t) => t.add(s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::Data("empty batch".into()))?;
    Ok(total.scale(-T::one() / lit::<T>(batch.positions() as f64)))
}

pub fn next_token_loss<T: Scalar>(params: &ModelParameters<T>, batch: &Batch) -> Result<T> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    Ok(batch_loss(params, &bound, batch)?.item())
}

/// Per-position losses `−ln π(y_t | x_{≤t})` from one forward pass.
pub fn position_losses<T: Scalar>(params: &ModelParameters<T>, inputs: &[usize], targets: &[usize]) -> Result<Vec<T>> {
    check_row(inputs, targets, params.config.context)?;
    let (_, logits) = params.evaluate(inputs)?;
    (0..inputs.len())
        .map(|t| crate::tensor::cross_entropy(&Tensor::from_vec(&[logits.rows()], logits.column(t))?, targets[t]))
        .collect()
}

/// Mean next-token loss over consecutive non-overlapping windows of
/// `seq_len` covering the whole token stream.
pub fn evaluate_loss<T: Scalar>(params: &ModelParameters<T>, tokens: &[usize], seq_len: usize) -> Result<T> {
    if tokens.len() < 2 {
        return Err(Error::Data("need at least two tokens to evaluate".into()));
    }
    let seq_len = seq_len.clamp(1, params.config.context);
    let (mut sum, mut n) = (0.0f64, 0usize);
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + seq_len).min(tokens.len() - 1);
        for l in position_losses(params, &tokens[start..end], &tokens[start + 1..end + 1])? {
            sum += l.to_f64();
            n += 1;
        }
        start = end;
    }
    Ok(T::from_f64(sum / n as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to 2-D weight matrices only.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Linear ramp from 0 to `lr` over this many steps.
    pub warmup_steps: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: Some(1.0),
            warmup_steps: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "eps must be positive and weight decay non-negative".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Learning rate at 1-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, context: usize) -> Result<()> {
        self.optim.validate()?;
        if self.seq_len == 0 || self.seq_len > context {
            return Err(Error::Config(format!(
                "sequence length {} must be in 1..={context}",
                self.seq_len
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// AdamW moments in [`ModelParameters::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParameters<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Check that moment shapes mirror `params`.
    pub fn matches(&self, params: &ModelParameters<T>) -> bool {
        let ts = params.tensors();
        self.m.len() == ts.len()
            && self.v.len() == ts.len()
            && ts
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, p), (m, v))| p.shape() == m.shape() && p.shape() == v.shape())
    }
}

/// Loss value and parameter gradients for a loss built on a fresh tape.
pub fn gradients<T, F>(params: &ModelParameters<T>, build: F) -> Result<(T, Vec<Tensor<T>>)>
where
    T: Scalar,
    F: for<'t> FnOnce(&BoundParams<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = build(&bound)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    let g = tape.backward(loss)?;
    Ok((value, bound.leaves().into_iter().map(|l| g.wrt(l)).collect()))
}

/// Global L2 norm of all gradients.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().map(|g| g.norm_sq().to_f64()).sum::<f64>().sqrt()
}

/// One AdamW update after global-norm clipping. Returns the pre-clip norm.
pub fn adamw_update<T: Scalar>(
    params: &mut ModelParameters<T>,
    state: &mut OptimizerState<T>,
    grads: &[Tensor<T>],
    cfg: &OptimConfig,
) -> Result<f64> {
    if !state.matches(params) || grads.len() != state.m.len() {
        return Err(Error::State("optimizer state does not match the parameters".into()));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient norm at step {}",
            state.step + 1
        )));
    }
    let clip = match cfg.grad_clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let lr = cfg.lr_at(state.step);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let (lr_t, b1_t, b2_t, eps_t, wd_t, clip_t) = (
        T::from_f64(lr),
        T::from_f64(b1),
        T::from_f64(b2),
        T::from_f64(cfg.eps),
        T::from_f64(cfg.weight_decay),
        T::from_f64(clip),
    );
    let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
    let (ms, vs) = (&mut state.m, &mut state.v);
    params.zip_apply(grads, |i, p, g| {
        let decay = p.ndim() == 2;
        let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj * clip_t;
            m[j] = b1_t * m[j] + (T::one() - b1_t) * gj;
            v[j] = b2_t * v[j] + (T::one() - b2_t) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            let mut upd = mhat / (vhat.sqrt() + eps_t);
            if decay {
                upd += wd_t * *w;
            }
            *w -= lr_t * upd;
        }
    });
    Ok(norm)
}

/// Forward, backward and one optimizer step on `batch`. Returns the loss
/// before the update.
pub fn train_step<T: Scalar>(
    params: &mut ModelParameters<T>,
    state: &mut OptimizerState<T>,
    batch: &Batch,
    cfg: &OptimConfig,
) -> Result<T> {
    let snapshot: &ModelParameters<T> = params;
    let (loss, grads) = gradients(snapshot, |b| batch_loss(snapshot, b, batch)).map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("step {}: {m}", state.step + 1)),
        other => other,
    })?;
    adamw_update(params, state, &grads, cfg)?;
    Ok(loss)
}

/// Run `cfg.steps` training steps; `on_step(step, loss, params, state)` is
/// called after each one with the 1-based optimizer step.
pub fn train<T, F>(
    params: &mut ModelParameters<T>,
    state: &mut OptimizerState<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(u64, T, &ModelParameters<T>, &OptimizerState<T>) -> Result<()>,
{
    cfg.validate(params.config.context)?;
    let mut batches = make_batches(corpus, cfg.batch_size, cfg.seq_len, cfg.seed)?;
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let batch = batches.next().expect("batch stream is endless");
        let loss = train_step(params, state, &batch, &cfg.optim)?;
        losses.push(loss);
        on_step(state.step, loss, params, state)?;
    }
    Ok(losses)
}

/// `step<TAB>loss` lines.
pub struct LossLog<W: Write> {
    out: W,
}

impl<W: Write> LossLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, step: u64, loss: f64) -> Result<()> {
        writeln!(self.out, "{step}\t{loss}")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn tiny(v: usize) -> ModelConfig {
        ModelConfig::new(8, v, 1, 2, 16)
    }

    #[test]
    fn shifted_targets() {
        let corpus = Corpus::new(vec![vec![5, 6, 7, 8]]).unwrap();
        let b = make_batches(&corpus, 2, 3, 0).unwrap().next().unwrap();
        assert_eq!(b.inputs, vec![vec![5, 6, 7]; 2]);
        assert_eq!(b.targets, vec![vec![6, 7, 8]; 2]);
    }

    #[test]
    fn short_corpus_is_a_data_error() {
        let corpus = Corpus::new(vec![vec![1, 2, 3]]).unwrap();
        assert!(matches!(make_batches(&corpus, 1, 3, 0), Err(Error::Data(_))));
        assert!(matches!(Corpus::new(vec![vec![]]), Err(Error::Data(_))));
    }

    #[test]
    fn batches_are_seeded() {
        let corpus = Corpus::new(vec![(0..50).collect(), (50..90).collect()]).unwrap();
        let a: Vec<_> = make_batches(&corpus, 3, 5, 9).unwrap().take(4).collect();
        let b: Vec<_> = make_batches(&corpus, 3, 5, 9).unwrap().take(4).collect();
        let c: Vec<_> = make_batches(&corpus, 3, 5, 10).unwrap().take(4).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn texts_are_eos_terminated_and_packed() {
        let v = Vocabulary::byte_level();
        let c = Corpus::from_texts(&["ab", "c"], &v).unwrap();
        assert_eq!(c.stream(), &[97, 98, v.eos(), 99, v.eos()]);
        assert_eq!(c.total_tokens(), 5);
    }

    #[test]
    fn corpus_from_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), "one\n\ntwo\n").unwrap();
        fs::write(dir.path().join("a.txt"), "zero\n").unwrap();
        let v = Vocabulary::byte_level();
        let files = Corpus::from_path(dir.path(), &v, DocSplit::File).unwrap();
        assert_eq!(files.documents().len(), 2);
        assert_eq!(files.documents()[0][0], b'z' as usize);
        let paras = Corpus::from_path(dir.path(), &v, DocSplit::Paragraph).unwrap();
        assert_eq!(paras.documents().len(), 3);
        let lines = Corpus::from_path(&dir.path().join("b.txt"), &v, DocSplit::Line).unwrap();
        assert_eq!(lines.documents().len(), 2);
    }

    #[test]
    fn uniform_model_loss_is_ln_v() {
        let v = Vocabulary::byte_level();
        let cfg = ModelConfig::new(8, v.size(), 1, 2, 16);
        let p = ModelParameters::<f64>::init(&cfg, 0).unwrap();
        let b = Batch::from_sequence(&v.encode_str("hello world")).unwrap();
        let loss = next_token_loss(&p, &b).unwrap();
        assert!((loss - 259f64.ln()).abs() < 0.1, "{loss}");
        let z = ModelParameters::<f64>::zeros(&cfg).unwrap();
        assert!((next_token_loss(&z, &b).unwrap() - 259f64.ln()).abs() < 1e-12);
        assert!((evaluate_loss(&z, &v.encode_str("hello world"), 4).unwrap() - 259f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn worked_example_probabilities_give_cross_entropy() {
        // a zero model whose bias is the toy logit vector
        let mut cfg = tiny(3);
        cfg.n_layer = 0;
        let mut p = ModelParameters::<f64>::zeros(&cfg).unwrap();
        p.b_out = Tensor::vector(&[2.0, 1.0, 0.1]);
        let b = Batch {
            inputs: vec![vec![1]],
            targets: vec![vec![0]],
        };
        assert!((next_token_loss(&p, &b).unwrap() - 0.417).abs() < 2e-3);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut cfg = tiny(3);
        cfg.n_layer = 0;
        let mut p = ModelParameters::<f64>::zeros(&cfg).unwrap();
        p.b_out = Tensor::vector(&[0.0, 800.0, 0.0]);
        let b = Batch {
            inputs: vec![vec![0, 2, 1]],
            targets: vec![vec![1, 1, 1]],
        };
        assert_eq!(next_token_loss(&p, &b).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_matches_batch_loss() {
        let p = ModelParameters::<f64>::init(&tiny(11), 4).unwrap();
        let tokens = [1, 4, 2, 9, 9, 0, 3];
        let b = Batch::from_sequence(&tokens).unwrap();
        let a = next_token_loss(&p, &b).unwrap();
        let e = evaluate_loss(&p, &tokens, 16).unwrap();
        assert!((a - e).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let p0 = ModelParameters::<f32>::init(&tiny(11), 4).unwrap();
        let mut p = p0.clone();
        let mut s = OptimizerState::new(&p);
        let cfg = OptimConfig {
            lr: 0.0,
            ..OptimConfig::default()
        };
        let b = Batch::from_sequence(&[1, 4, 2, 9, 9, 0, 3]).unwrap();
        for _ in 0..3 {
            train_step(&mut p, &mut s, &b, &cfg).unwrap();
        }
        assert_eq!(p, p0);
        assert_eq!(s.step, 3);
    }

    #[test]
    fn warmup_is_linear() {
        let cfg = OptimConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..OptimConfig::default()
        };
        assert_eq!(cfg.lr_at(1), 0.25);
        assert_eq!(cfg.lr_at(4), 1.0);
        assert_eq!(cfg.lr_at(9), 1.0);
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        // first Adam step moves every weight by at most lr (plus decay)
        let p0 = ModelParameters::<f64>::init(&tiny(11), 4).unwrap();
        let mut p = p0.clone();
        let mut s = OptimizerState::new(&p);
        let cfg = OptimConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let b = Batch::from_sequence(&[1, 4, 2, 9]).unwrap();
        train_step(&mut p, &mut s, &b, &cfg).unwrap();
        for ((_, a), (_, b)) in p.tensors().iter().zip(p0.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 0.01 + 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut p = ModelParameters::<f64>::init(&tiny(11), 4).unwrap();
        p.b_out.data_mut()[0] = f64::NAN;
        let mut s = OptimizerState::new(&p);
        let b = Batch::from_sequence(&[1, 4, 2]).unwrap();
        let err = train_step(&mut p, &mut s, &b, &OptimConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn loss_log_format() {
        let mut log = LossLog::new(Vec::new());
        log.record(1, 2.5).unwrap();
        log.record(2, 0.125).unwrap();
        assert_eq!(String::from_utf8(log.into_inner()).unwrap(), "1\t2.5\n2\t0.125\n");
    }

    #[test]
    fn toy_corpus_loss_decreases() {
        let v = Vocabulary::byte_level();
        let corpus = Corpus::from_texts(&["the cat sat on the mat", "a dog ran in the fog"], &v).unwrap();
        let cfg = ModelConfig::new(32, v.size(), 2, 4, 16);
        let mut p = ModelParameters::<f32>::init(&cfg, 1).unwrap();
        let mut s = OptimizerState::new(&p);
        let tc = TrainConfig {
            optim: OptimConfig {
                lr: 3e-3,
                ..OptimConfig::default()
            },
            steps: 200,
            batch_size: 4,
            seq_len: 16,
            seed: 2,
        };
        let first = next_token_loss(&p, &make_batches(&corpus, 4, 16, 2).unwrap().next().unwrap()).unwrap();
        let losses = train(&mut p, &mut s, &corpus, &tc, |_, _, _, _| Ok(())).unwrap();
        assert_eq!(losses[0], first);
        let tail: f32 = losses[190..].iter().sum::<f32>() / 10.0;
        assert!(tail < first, "{first} -> {tail}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn teacher_forcing_matches_prefix_forwards(
            seed in 0u64..500,
            tokens in proptest::collection::vec(0usize..11, 2..12),
        ) {
            let p = ModelParameters::<f64>::init(&tiny(11), seed).unwrap();
            let (x, y) = (&tokens[..tokens.len() - 1], &tokens[1..]);
            let parallel = position_losses(&p, x, y).unwrap();
            for t in 0..x.len() {
                let (_, z) = p.evaluate(&x[..=t]).unwrap();
                let col = Tensor::from_vec(&[11], z.column(t)).unwrap();
                let l = crate::tensor::cross_entropy(&col, y[t]).unwrap();
                prop_assert!((l - parallel[t]).abs() <= 1e-6);
            }
        }
    }
}
