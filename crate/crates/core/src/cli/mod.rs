//! Command-line driver: configuration, checkpoints, and the
//! train → align → generate / eval lifecycle.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::{
    command, parse_config, parse_config_file, AlignArgs, AlignMode, Command, CommandKind, EvalArgs, GenerateArgs,
    Parsed, RewardKind, RunConfig, SamplerSettings, Settings, Suite, TokenizeArgs, TrainArgs,
};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{
    addition_prompts, dpo_margin, parse_triples, rlvr_step, rsft_finetune, rsft_select, train_dpo, train_reward_model,
    AlignConfig, AlignLog, ReferencePolicy, RewardFunction, RewardTrainConfig, VerifierReward,
};
use crate::error::{Error, Result};
use crate::eval::{conformance_suite, hallucination_rate, perplexity, rag_comparison, ArithmeticVerifier};
use crate::generate::{augment_context, generate_with, retrieve, ChunkStore, SamplerConfig};
use crate::model::ModelParameters;
use crate::pretrain::{evaluate_loss, train, Corpus, LossLog, OptimizerState, TrainConfig};
use crate::tokenizer::{TokenSequence, Vocabulary};

/// Execute one command, writing results to `out`.
pub fn run(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    match &cfg.command {
        Command::Train(a) => run_train(cfg, a, out),
        Command::Align(a) => run_align(cfg, a, out),
        Command::Generate(a) => run_generate(cfg, a, out),
        Command::Eval(a) => run_eval(cfg, a, out),
        Command::Tokenize(a) => run_tokenize(a, out),
    }
}

/// Load a checkpoint and refuse it if an explicitly given architecture key
/// disagrees with it.
fn load_model(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if !cfg.model_overrides.is_empty() {
        let mut expected = ck.config().clone();
        let m = &cfg.model;
        for key in &cfg.model_overrides {
            match key.as_str() {
                "d_model" => expected.d_model = m.d_model,
                "n_layer" => expected.n_layer = m.n_layer,
                "n_head" => expected.n_head = m.n_head,
                "context" => expected.context = m.context,
                "pos_encoding" => expected.pos_encoding = m.pos_encoding,
                "tie_output" => expected.tie_output = m.tie_output,
                "attn_scale" => expected.attn_scale = m.attn_scale,
                "ffn_mult" => expected.ffn_mult = m.ffn_mult,
                "layer_norm" => expected.layer_norm = m.layer_norm,
                _ => {}
            }
        }
        ck.check_config(&expected)?;
    }
    Ok(ck)
}

fn open_log(path: &Option<std::path::PathBuf>) -> Result<Option<BufWriter<File>>> {
    Ok(match path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    })
}

fn run_train(cfg: &RunConfig, a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let (mut params, vocab, mut state) = match &a.resume {
        Some(p) => {
            let ck = load_model(cfg, p)?;
            let state = ck.optimizer.clone().unwrap_or_else(|| OptimizerState::new(&ck.params));
            (ck.params, ck.vocab, state)
        }
        None => {
            let params = ModelParameters::<f32>::init(&cfg.model, cfg.seed)?;
            let state = OptimizerState::new(&params);
            (params, Vocabulary::byte_level(), state)
        }
    };
    let corpus = Corpus::from_path(&a.corpus, &vocab, a.split)?;
    let context = params.config.context;
    let seq_len = if cfg.settings.raw("seq_len").is_some() {
        a.seq_len
    } else {
        context
    };
    let tc = TrainConfig {
        optim: cfg.optim.clone(),
        steps: a.steps,
        batch_size: a.batch_size,
        seq_len,
        seed: cfg.seed.wrapping_add(state.step),
    };
    log::info!(
        "training {} parameters on {} tokens for {} steps",
        params.num_parameters(),
        corpus.total_tokens(),
        a.steps
    );
    let mut loss_log = open_log(&a.loss_log)?.map(LossLog::new);
    let every = a.log_every.max(1);
    let losses = train(&mut params, &mut state, &corpus, &tc, |step, loss, _, _| {
        if let Some(l) = loss_log.as_mut() {
            l.record(step, loss as f64)?;
        }
        if step % every == 0 {
            log::info!("step {step} loss {loss:.4}");
        }
        Ok(())
    })?;
    if let Some(l) = loss_log {
        l.into_inner().flush()?;
    }
    let ck = Checkpoint {
        params,
        vocab,
        optimizer: Some(state),
        seed: cfg.seed,
    };
    save_checkpoint(&a.out, &ck)?;
    let eval = evaluate_loss(&ck.params, corpus.stream(), seq_len)?;
    writeln!(
        out,
        "steps={}\nfinal_batch_loss={}\ncorpus_loss={}\ncheckpoint={}",
        ck.optimizer.as_ref().map_or(0, |s| s.step),
        losses.last().map_or(f64::NAN, |&l| l as f64),
        eval,
        a.out.display()
    )?;
    Ok(())
}

fn read_prompts(path: &Option<std::path::PathBuf>) -> Result<Vec<String>> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            let prompts: Vec<String> = text
                .lines()
                .map(|l| l.trim_end_matches('\r'))
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect();
            if prompts.is_empty() {
                return Err(Error::Data(format!("{}: no prompts", p.display())));
            }
            Ok(prompts)
        }
        None => Ok(addition_prompts().into_iter().map(|(p, _)| p).collect()),
    }
}

fn run_align(cfg: &RunConfig, a: &AlignArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_model(cfg, &a.checkpoint)?;
    let vocab = ck.vocab.clone();
    let mut params = ck.params;
    let reference = ReferencePolicy::new(&params);
    let ac = AlignConfig {
        beta: a.beta,
        samples: a.samples,
        temperature: cfg.sampler.temperature,
        top_k: cfg.sampler.top_k,
        max_new_tokens: cfg.sampler.max_new_tokens,
        eos: Some(vocab.eos()),
        optim: cfg.optim.clone(),
        steps: a.steps,
        seed: cfg.seed,
    };
    ac.validate()?;
    let mut log = open_log(&a.loss_log)?.map(AlignLog::new);
    let mut last = (f64::NAN, f64::NAN);
    let mut record = |step: u64, loss: f64, reward: f64| -> Result<()> {
        if let Some(l) = log.as_mut() {
            l.record(step, loss, reward)?;
        }
        log::info!("step {step} loss {loss:.4} mean_reward {reward:.4}");
        last = (loss, reward);
        Ok(())
    };
    let load_triples = || -> Result<Vec<crate::align::PreferenceTriple>> {
        let p = a.preferences.as_ref().expect("checked while parsing");
        let text = fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        parse_triples(&text, &vocab)
    };
    match a.mode {
        AlignMode::Dpo => {
            let triples = load_triples()?;
            train_dpo(&mut params, &reference, &triples, &ac, |step, loss, p| {
                // implicit reward β · margin, averaged over the triples
                let mut total = 0.0;
                for t in &triples {
                    total += ac.beta * dpo_margin(p, &reference, t)?;
                }
                record(step, loss, total / triples.len() as f64)
            })?;
        }
        AlignMode::Rsft => {
            let prompts: Vec<TokenSequence> = read_prompts(&a.prompts)?.iter().map(|p| vocab.encode_str(p)).collect();
            let reward: Box<dyn RewardFunction> = match a.reward {
                RewardKind::Arithmetic => Box::new(VerifierReward {
                    verifier: ArithmeticVerifier,
                    vocab: vocab.clone(),
                }),
                RewardKind::Learned => {
                    let (rm, losses) = train_reward_model(&params, &load_triples()?, &RewardTrainConfig::default())?;
                    log::info!("reward model loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
                    Box::new(rm)
                }
            };
            // best-of-N selection first, so every logged step carries the
            // mean reward of the completions being imitated
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut pairs = Vec::with_capacity(prompts.len());
            let mut total = 0.0;
            for p in &prompts {
                let (group, best) = rsft_select(&params, p, reward.as_ref(), &ac, &mut rng)?;
                total += group.rewards[best];
                pairs.push((p.clone(), group.completions[best].clone()));
            }
            let selected = total / prompts.len() as f64;
            log::info!("best-of-{} mean selected reward {selected:.4}", ac.samples);
            rsft_finetune(&mut params, &pairs, &ac, |step, loss, _| record(step, loss, selected))?;
        }
        AlignMode::Rlvr => {
            let prompts: Vec<TokenSequence> = read_prompts(&a.prompts)?.iter().map(|p| vocab.encode_str(p)).collect();
            let reward = VerifierReward {
                verifier: ArithmeticVerifier,
                vocab: vocab.clone(),
            };
            let mut state = OptimizerState::new(&params);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let per_step = a.prompts_per_step.clamp(1, prompts.len());
            for step in 1..=a.steps {
                let batch: Vec<TokenSequence> = prompts.choose_multiple(&mut rng, per_step).cloned().collect();
                let s = rlvr_step(&mut params, &mut state, &batch, &reward, &ac, &mut rng)?;
                record(step, s.loss, s.mean_reward)?;
            }
        }
    }
    if let Some(l) = log {
        l.into_inner().flush()?;
    }
    save_checkpoint(
        &a.out,
        &Checkpoint {
            params,
            vocab,
            optimizer: None,
            seed: cfg.seed,
        },
    )?;
    writeln!(
        out,
        "mode={:?}\nfinal_loss={}\nfinal_mean_reward={}\ncheckpoint={}",
        a.mode,
        last.0,
        last.1,
        a.out.display()
    )?;
    Ok(())
}

fn sampler(cfg: &RunConfig, eos: Option<usize>) -> SamplerConfig {
    SamplerConfig {
        temperature: cfg.sampler.temperature,
        top_k: cfg.sampler.top_k,
        max_new_tokens: cfg.sampler.max_new_tokens,
        eos,
        seed: cfg.seed,
    }
}

fn run_generate(cfg: &RunConfig, a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_model(cfg, &a.checkpoint)?;
    let (params, vocab) = (&ck.params, &ck.vocab);
    let mut prompt = vocab.encode_str(&a.prompt);
    if prompt.is_empty() {
        prompt.push(vocab.bos());
    }
    if let Some(dir) = &a.rag_store {
        let store = ChunkStore::from_dir(dir, vocab)?;
        let hits = retrieve(params, &prompt, &store, a.rag_top)?;
        for &(i, score) in &hits {
            log::info!("retrieved chunk {i} (cosine {score:.3}): {:?}", store.texts[i]);
        }
        let chunks: Vec<TokenSequence> = hits.iter().map(|&(i, _)| store.chunks[i].clone()).collect();
        prompt = augment_context(&prompt, &chunks, params.config.context)?;
    }
    let eos = (!a.ignore_eos).then(|| vocab.eos());
    let g = generate_with(params, &prompt, &sampler(cfg, eos), |t| {
        if a.stream {
            out.write_all(vocab.token_bytes(t)?)?;
            out.flush()?;
        }
        Ok(())
    })?;
    if !a.stream {
        out.write_all(&vocab.decode(g.completion())?)?;
    }
    writeln!(out)?;
    log::info!("stopped: {}", g.stop.as_str());
    Ok(())
}

fn run_eval(cfg: &RunConfig, a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ck = a.checkpoint.as_ref().map(|p| load_model(cfg, p)).transpose()?;
    let mut kv = String::new();
    let outcome = match a.suite {
        Suite::Conformance => {
            let report = conformance_suite()?;
            out.write_all(report.to_text().as_bytes())?;
            kv.push_str(&report.to_key_values());
            if report.passed() {
                Ok(())
            } else {
                let failed: Vec<&str> = report.cases.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
                Err(Error::Verification(format!(
                    "conformance cases failed: {}",
                    failed.join(", ")
                )))
            }
        }
        Suite::Perplexity => {
            let ck = ck.as_ref().expect("checked while parsing");
            let corpus = Corpus::from_path(a.corpus.as_ref().expect("checked while parsing"), &ck.vocab, a.split)?;
            let seq_len = a.seq_len.unwrap_or(ck.config().context);
            let ppl = perplexity(&ck.params, corpus.stream(), seq_len)?;
            kv.push_str(&format!(
                "perplexity={ppl}\nloss={}\ntokens={}\n",
                ppl.ln(),
                corpus.total_tokens()
            ));
            out.write_all(kv.as_bytes())?;
            Ok(())
        }
        Suite::Hallucination => {
            let ck = ck.as_ref().expect("checked while parsing");
            let prompts = read_prompts(&a.prompts)?;
            let r = hallucination_rate(
                &ck.params,
                &ck.vocab,
                &prompts,
                &ArithmeticVerifier,
                &sampler(cfg, Some(ck.vocab.eos())),
                a.samples,
            )?;
            out.write_all(r.to_text().as_bytes())?;
            kv.push_str(&r.to_key_values(""));
            Ok(())
        }
        Suite::Rag => {
            let ck = ck.as_ref().expect("checked while parsing");
            let prompts = read_prompts(&a.prompts)?;
            let store = ChunkStore::from_dir(a.rag_store.as_ref().expect("checked while parsing"), &ck.vocab)?;
            let c = rag_comparison(
                &ck.params,
                &ck.vocab,
                &prompts,
                &store,
                a.rag_top,
                &ArithmeticVerifier,
                &sampler(cfg, Some(ck.vocab.eos())),
                a.samples,
            )?;
            writeln!(
                out,
                "plain rate {:.4} (se {:.4})\naugmented rate {:.4} (se {:.4})\ndifference {:.4} (se {:.4})",
                c.plain.rate, c.plain.std_error, c.augmented.rate, c.augmented.std_error, c.difference, c.difference_se
            )?;
            kv.push_str(&c.to_key_values());
            Ok(())
        }
    };
    if let Some(p) = &a.report {
        fs::write(p, &kv)?;
    }
    outcome
}

fn run_tokenize(a: &TokenizeArgs, out: &mut dyn Write) -> Result<()> {
    let vocab = Vocabulary::byte_level();
    match a {
        TokenizeArgs::Encode(bytes) => {
            let ids: Vec<String> = vocab.encode(bytes).iter().map(usize::to_string).collect();
            writeln!(out, "{}", ids.join(" "))?;
        }
        TokenizeArgs::Decode(ids) => {
            out.write_all(&vocab.decode(ids)?)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Parse `argv`, run, and map the outcome to a process status.
pub fn main_with_args<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let result = parse_config(argv).and_then(|p| match p {
        Parsed::Info(text) => out.write_all(text.as_bytes()).map_err(Error::from),
        Parsed::Run(cfg) => run(&cfg, out),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "arllm: {e}");
            e.exit_status()
        }
    }
}
