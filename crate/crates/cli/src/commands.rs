use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use discourse_rnn::analyzer::{analyze_model, detect, report, Category, MarkerLexicon, MarkerReport};
use discourse_rnn::corpus::{
    extract_fragments, normalize, read_dialogs, read_fragments, ConversationFragment, Vocabulary,
    MAX_CONTEXT,
};
use discourse_rnn::eval::{
    dataset_loss, encode_with_context, perplexity, respond, sensitivity_sweep, write_sweep_table, SweepConfig,
    SweepData,
};
use discourse_rnn::model::{read_checkpoint, write_checkpoint, Init, ModelConfig, ModelParameters};
use discourse_rnn::trainer::{
    read_train_state, train_with, write_train_state, LogRecord, TrainConfig, TrainObserver, TrainState,
};
use discourse_rnn::Architecture;
use serde::Serialize;
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::manifest::{manifest_path_for_dir, manifest_path_for_file, write_atomic, RunManifest};
use crate::{
    AnalyzeArgs, BuildVocabArgs, Cli, Command, EvalArgs, ExtractArgs, GenerateArgs, InitKind, ModelArgs, SweepArgs,
    TrainArgs, TrainFlags,
};

/// The bundled memorization corpus used by `train --overfit-smoke`.
const SMOKE_FRAGMENTS: &str = include_str!("../data/overfit_smoke.tsv");
const SMOKE_CONTEXT_TURNS: usize = 2;
const SMOKE_DIM: usize = 32;
const SMOKE_LOSS_TARGET: f64 = 0.1;

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::BuildVocab(a) => build_vocab(cli, a),
        Command::ExtractFragments(a) => extract(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Generate(a) => generate_cmd(cli, a),
        Command::Analyze(a) => analyze_cmd(cli, a),
        Command::Sweep(a) => sweep_cmd(cli, a),
    }
}

fn say(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.quiet {
        println!("{}", msg.as_ref());
    }
}

fn open_input(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::input(path, e))
}

fn read_vocab(path: &Path) -> CliResult<Vocabulary> {
    Vocabulary::read_from(open_input(path)?).map_err(|e| CliError::input(path, e))
}

fn read_fragment_file(path: &Path) -> CliResult<Vec<ConversationFragment>> {
    read_fragments(open_input(path)?).map_err(|e| CliError::input(path, e))
}

fn read_model(path: &Path) -> CliResult<ModelParameters> {
    read_checkpoint(open_input(path)?).map_err(|e| CliError::input(path, e))
}

/// Serializes into memory and writes atomically.
fn write_output<F>(path: &Path, fill: F) -> CliResult<()>
where
    F: FnOnce(&mut Vec<u8>) -> discourse_rnn::Result<()>,
{
    let mut buf = Vec::new();
    fill(&mut buf).map_err(|e| CliError::output(path, e))?;
    write_atomic(path, &buf).map_err(|e| CliError::output(path, e))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e)),
        _ => Ok(()),
    }
}

fn config_json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("configuration serializes")
}

fn start_manifest(cli: &Cli, command: &str, config: serde_json::Value, inputs: &[&Path]) -> CliResult<RunManifest> {
    let mut m = RunManifest::start(command, cli.seed, config);
    for p in inputs {
        m.add_input(p).map_err(|e| CliError::input(p, e))?;
    }
    Ok(m)
}

/// Writes the manifest; in `--manifest-only` mode this is the whole run.
fn close_manifest(mut m: RunManifest, at: &Path, outputs: &[&Path], executed: bool) -> CliResult<()> {
    if executed {
        for p in outputs {
            m.add_output(p).map_err(|e| CliError::output(p, e))?;
        }
        m.finish();
    }
    ensure_parent(at)?;
    m.write(at).map_err(|e| CliError::output(at, e))
}

fn build_vocab(cli: &Cli, a: &BuildVocabArgs) -> CliResult<()> {
    let m = start_manifest(cli, "build-vocab", config_json(a), &[&a.corpus])?;
    let at = manifest_path_for_file(&a.out);
    if cli.manifest_only {
        return close_manifest(m, &at, &[], false);
    }
    let dialogs = read_dialogs(open_input(&a.corpus)?).map_err(|e| CliError::input(&a.corpus, e))?;
    let vocab = Vocabulary::build(dialogs.iter().flatten(), a.max_size)?;
    ensure_parent(&a.out)?;
    write_output(&a.out, |buf| vocab.write_to(buf))?;
    say(cli, format!("{} tokens written to {}", vocab.len(), a.out.display()));
    close_manifest(m, &at, &[&a.out], true)
}

fn extract(cli: &Cli, a: &ExtractArgs) -> CliResult<()> {
    let m = start_manifest(cli, "extract-fragments", config_json(a), &[&a.corpus])?;
    let at = manifest_path_for_file(&a.out);
    if cli.manifest_only {
        return close_manifest(m, &at, &[], false);
    }
    let dialogs = read_dialogs(open_input(&a.corpus)?).map_err(|e| CliError::input(&a.corpus, e))?;
    let fragments = extract_fragments(&dialogs, a.context_turns, MAX_CONTEXT)?;
    ensure_parent(&a.out)?;
    write_output(&a.out, |buf| discourse_rnn::corpus::write_fragments(&fragments, buf))?;
    say(cli, format!("{} fragments written to {}", fragments.len(), a.out.display()));
    close_manifest(m, &at, &[&a.out], true)
}

fn resolve_model(arch: Architecture, vocab_size: usize, m: &ModelArgs, default_dim: usize) -> ModelConfig {
    ModelConfig {
        architecture: arch,
        vocab_size,
        emb_dim: m.emb_dim.unwrap_or(default_dim),
        hidden_dim: m.hidden_dim.unwrap_or(default_dim),
        attn_dim: m.attn_dim.unwrap_or(default_dim),
    }
}

fn resolve_train(cli: &Cli, f: &TrainFlags, base: TrainConfig) -> CliResult<TrainConfig> {
    let cfg = TrainConfig {
        batch_size: f.batch_size.unwrap_or(base.batch_size),
        initial_lr: f.initial_lr.unwrap_or(base.initial_lr),
        decay_factor: f.decay_factor.unwrap_or(base.decay_factor),
        clip_norm: f.clip_norm.unwrap_or(base.clip_norm),
        max_epochs: f.max_epochs.unwrap_or(base.max_epochs),
        patience_steps: f.patience_steps.unwrap_or(base.patience_steps),
        seed: cli.seed,
        checkpoint_interval: f.checkpoint_interval.unwrap_or(base.checkpoint_interval),
        max_steps: f.max_steps.or(base.max_steps),
    };
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(cfg)
}

const DEFAULT_DIM: usize = 512;

/// Files written by `train` inside the output directory.
struct TrainPaths {
    best: PathBuf,
    last: PathBuf,
    state: PathBuf,
    log: PathBuf,
    vocab: PathBuf,
}

impl TrainPaths {
    fn new(dir: &Path) -> Self {
        TrainPaths {
            best: dir.join("best.ckpt"),
            last: dir.join("last.ckpt"),
            state: dir.join("last.state"),
            log: dir.join("loss_log.tsv"),
            vocab: dir.join("vocab.txt"),
        }
    }
}

fn save_model(path: &Path, params: &ModelParameters) -> discourse_rnn::Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    Ok(write_atomic(path, &buf)?)
}

/// Appends loss-log lines and keeps the last and best checkpoints on disk.
struct DiskObserver<'a> {
    paths: &'a TrainPaths,
    log: BufWriter<File>,
}

impl TrainObserver for DiskObserver<'_> {
    fn on_evaluation(
        &mut self,
        record: &LogRecord,
        params: &ModelParameters,
        state: &TrainState,
    ) -> discourse_rnn::Result<()> {
        writeln!(self.log, "{record}")?;
        self.log.flush()?;
        save_model(&self.paths.last, params)?;
        let mut buf = Vec::new();
        write_train_state(state, &mut buf)?;
        Ok(write_atomic(&self.paths.state, &buf)?)
    }

    fn on_best(&mut self, params: &ModelParameters, _state: &TrainState) -> discourse_rnn::Result<()> {
        save_model(&self.paths.best, params)
    }
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> CliResult<()> {
    let smoke = a.overfit_smoke;
    let (fragments, vocab, n) = if smoke {
        let frags = read_fragments(SMOKE_FRAGMENTS.as_bytes())?;
        let vocab = Vocabulary::build(frags.iter().flat_map(|f| f.context.iter().chain([&f.target])), usize::MAX)?;
        (frags, vocab, a.context_turns.unwrap_or(SMOKE_CONTEXT_TURNS))
    } else {
        let frag_path = a.fragments.as_deref().expect("clap enforces --fragments");
        let vocab_path = a.vocab.as_deref().expect("clap enforces --vocab");
        let n = a.context_turns.expect("clap enforces --context-turns");
        (read_fragment_file(frag_path)?, read_vocab(vocab_path)?, n)
    };
    if n == 0 {
        return Err(CliError::usage("--context-turns must be at least 1"));
    }
    let base = if smoke {
        TrainConfig {
            batch_size: fragments.len(),
            max_epochs: usize::MAX,
            checkpoint_interval: 100,
            max_steps: Some(2000),
            ..TrainConfig::default()
        }
    } else {
        TrainConfig::default()
    };
    let train_cfg = resolve_train(cli, &a.hyper, base)?;
    let model_cfg = resolve_model(a.arch, vocab.len(), &a.model, if smoke { SMOKE_DIM } else { DEFAULT_DIM });
    model_cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;

    let inputs: Vec<&Path> = [a.fragments.as_deref(), a.valid.as_deref(), a.vocab.as_deref()]
        .into_iter()
        .flatten()
        .collect();
    let config = json!({ "args": a, "context_turns": n, "model": model_cfg, "train": train_cfg });
    let m = start_manifest(cli, "train", config, &inputs)?;
    let at = manifest_path_for_dir(&a.out_dir);
    if cli.manifest_only {
        return close_manifest(m, &at, &[], false);
    }

    let valid = match &a.valid {
        Some(p) => read_fragment_file(p)?,
        None => Vec::new(),
    };
    let train_set = encode_with_context(&fragments, n, a.arch, &vocab)?;
    let valid_set = encode_with_context(&valid, n, a.arch, &vocab)?;

    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::output(&a.out_dir, e))?;
    let paths = TrainPaths::new(&a.out_dir);
    let (params, state) = if a.resume && paths.last.exists() {
        let params = read_model(&paths.last)?;
        if params.config != model_cfg {
            return Err(CliError::usage(format!(
                "checkpoint {} was trained with {:?}, not {:?}",
                paths.last.display(),
                params.config,
                model_cfg
            )));
        }
        let state = read_train_state(open_input(&paths.state)?).map_err(|e| CliError::input(&paths.state, e))?;
        say(cli, format!("resuming at step {}", state.step));
        (params, state)
    } else {
        let init = match a.init {
            InitKind::Uniform => Init::Uniform { seed: cli.seed },
            InitKind::Zeros => Init::Zeros,
        };
        (ModelParameters::init(model_cfg, init)?, TrainState::new(&train_cfg))
    };
    let log_file = OpenOptions::new()
        .create(true)
        .append(a.resume)
        .write(true)
        .truncate(!a.resume)
        .open(&paths.log)
        .map_err(|e| CliError::output(&paths.log, e))?;
    write_output(&paths.vocab, |buf| vocab.write_to(buf))?;

    let mut observer = DiskObserver {
        paths: &paths,
        log: BufWriter::new(log_file),
    };
    let outcome = train_with(&train_cfg, params, state, &train_set, &valid_set, &mut observer)?;
    save_model(&paths.last, &outcome.params).map_err(|e| CliError::output(&paths.last, e))?;
    save_model(&paths.best, &outcome.best_params).map_err(|e| CliError::output(&paths.best, e))?;
    drop(observer);

    for r in &outcome.log {
        say(cli, r.to_string());
    }
    let final_loss = dataset_loss(&outcome.params, &train_set)?.mean();
    if !final_loss.is_finite() {
        return Err(CliError::runtime(format!("final training loss is {final_loss}")));
    }
    say(cli, format!("steps {} final per-token training loss {final_loss}", outcome.state.step));
    close_manifest(
        m,
        &at,
        &[&paths.best, &paths.last, &paths.state, &paths.log, &paths.vocab],
        true,
    )?;
    if smoke && !(final_loss < SMOKE_LOSS_TARGET) {
        return Err(CliError::runtime(format!(
            "overfit smoke run ended at loss {final_loss}, target {SMOKE_LOSS_TARGET}"
        )));
    }
    Ok(())
}

fn check_finite(what: &str, x: f64) -> CliResult<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(CliError::runtime(format!("{what} is {x}")))
    }
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> CliResult<()> {
    let m = start_manifest(cli, "eval", config_json(a), &[&a.checkpoint, &a.vocab, &a.fragments])?;
    let at = manifest_path_for_file(&a.out);
    if cli.manifest_only {
        return close_manifest(m, &at, &[], false);
    }
    let params = read_model(&a.checkpoint)?;
    let vocab = read_vocab(&a.vocab)?;
    let fragments = read_fragment_file(&a.fragments)?;
    let dataset = a.dataset.clone().unwrap_or_else(|| {
        a.fragments
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let r = perplexity(&params, &vocab, &fragments, a.context_turns, &dataset)?;
    check_finite("perplexity", r.perplexity)?;
    ensure_parent(&a.out)?;
    write_output(&a.out, |buf| {
        serde_json::to_writer_pretty(&mut *buf, &r).map_err(std::io::Error::other)?;
        buf.push(b'\n');
        Ok(())
    })?;
    say(cli, r.to_string());
    close_manifest(m, &at, &[&a.out], true)
}

fn generate_cmd(cli: &Cli, a: &GenerateArgs) -> CliResult<()> {
    let m = start_manifest(cli, "generate", config_json(a), &[&a.checkpoint, &a.vocab, &a.fragments])?;
    let at = manifest_path_for_file(&a.out);
    if cli.manifest_only {
        return close_manifest(m, &at, &[], false);
    }
    let params = read_model(&a.checkpoint)?;
    let vocab = read_vocab(&a.vocab)?;
    let fragments = read_fragment_file(&a.fragments)?;
    let mut lines = Vec::with_capacity(fragments.len());
    let mut attention = Vec::new();
    for (i, f) in fragments.iter().enumerate() {
        let f = f.last_turns(a.context_turns).ok_or_else(|| {
            CliError::usage(format!(
                "fragment {} has {} context turns, {} requested",
                i + 1,
                f.context.len(),
                a.context_turns
            ))
        })?;
        let g = respond(&params, &vocab, &f.context, a.max_len)?;
        lines.push(g.words(&vocab).join(" "));
        if a.attention_out.is_some() {
            attention.push(serde_json::to_string(&g.attention).expect("weights serialize"));
        }
    }
    ensure_parent(&a.out)?;
    write_output(&a.out, |buf| {
        for l in &lines {
            writeln!(buf, "{l}")?;
        }
        Ok(())
    })?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(p) = &a.attention_out {
        ensure_parent(p)?;
        write_output(p, |buf| {
            for l in &attention {
                writeln!(buf, "{l}")?;
            }
            Ok(())
        })?;
        outputs.push(p);
    }
    say(cli, format!("{} responses written to {}", lines.len(), a.out.display()));
    close_manifest(m, &at, &outputs, true)
}

fn analyze_cmd(cli: &Cli, a: &AnalyzeArgs) -> CliResult<()> {
    if a.utterances.is_none() && a.checkpoint.is_none() {
        return Err(CliError::usage("analyze needs --utterances or --checkpoint"));
    }
    let inputs: Vec<&Path> = [
        a.utterances.as_deref(),
        a.checkpoint.as_deref(),
        a.vocab.as_deref(),
        a.fragments.as_deref(),
        a.lexicon.as_deref(),
    ]
    .into_iter()
    .flatten()
    .collect();
    let m = start_manifest(cli, "analyze", config_json(a), &inputs)?;
    let at = manifest_path_for_file(&a.out);
    if cli.manifest_only {
        return close_manifest(m, &at, &[], false);
    }
    let lexicon = match &a.lexicon {
        Some(p) => MarkerLexicon::read_from(open_input(p)?).map_err(|e| CliError::input(p, e))?,
        None => MarkerLexicon::default(),
    };
    let (rep, utterances): (MarkerReport, Vec<Vec<String>>) = match &a.utterances {
        Some(p) => {
            let mut utts = Vec::new();
            for line in open_input(p)?.lines() {
                let line = line.map_err(|e| CliError::input(p, e))?;
                utts.push(normalize(&line).map(|u| u.tokens().to_vec()).unwrap_or_default());
            }
            (report(&utts, &lexicon, a.context_turns)?, utts)
        }
        None => {
            let ckpt = a.checkpoint.as_deref().expect("checked above");
            let params = read_model(ckpt)?;
            let vocab = read_vocab(a.vocab.as_deref().expect("clap requires --vocab"))?;
            let fragments = read_fragment_file(a.fragments.as_deref().expect("clap requires --fragments"))?;
            analyze_model(&params, &vocab, &fragments, a.context_turns, a.sample_size, &lexicon)?
        }
    };
    ensure_parent(&a.out)?;
    write_output(&a.out, |buf| rep.write_to(buf))?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(p) = &a.flags_out {
        ensure_parent(p)?;
        write_output(p, |buf| {
            writeln!(buf, "deixis\tanaphora\tlogical_consequence\tutterance")?;
            for u in &utterances {
                let f = detect(u, &lexicon);
                writeln!(
                    buf,
                    "{}\t{}\t{}\t{}",
                    u8::from(f.deixis),
                    u8::from(f.anaphora),
                    u8::from(f.logical_consequence),
                    u.join(" ")
                )?;
            }
            Ok(())
        })?;
        outputs.push(p);
    }
    for c in Category::ALL {
        say(
            cli,
            format!("{c}: {} of {} ({:.2}%)", rep.count(c), rep.sample, rep.percentage(c)),
        );
    }
    close_manifest(m, &at, &outputs, true)
}

fn sweep_cmd(cli: &Cli, a: &SweepArgs) -> CliResult<()> {
    let inputs: Vec<&Path> = [Some(a.train.as_path()), a.valid.as_deref(), Some(a.test.as_path()), a.vocab.as_deref()]
        .into_iter()
        .flatten()
        .collect();
    let train = read_fragment_file(&a.train)?;
    let vocab = match &a.vocab {
        Some(p) => read_vocab(p)?,
        None => Vocabulary::build(
            train.iter().flat_map(|f| f.context.iter().chain([&f.target])),
            40_000,
        )?,
    };
    let probe = resolve_model(Architecture::Flat, vocab.len(), &a.model, DEFAULT_DIM);
    let sweep_cfg = SweepConfig {
        emb_dim: probe.emb_dim,
        hidden_dim: probe.hidden_dim,
        attn_dim: probe.attn_dim,
        train: resolve_train(cli, &a.hyper, TrainConfig::default())?,
    };
    let config = json!({ "args": a, "vocab_size": vocab.len(), "sweep": sweep_cfg });
    let m = start_manifest(cli, "sweep", config, &inputs)?;
    let at = manifest_path_for_file(&a.out);
    if cli.manifest_only {
        return close_manifest(m, &at, &[], false);
    }
    let valid = match &a.valid {
        Some(p) => read_fragment_file(p)?,
        None => Vec::new(),
    };
    let test = read_fragment_file(&a.test)?;
    let data = SweepData {
        train: &train,
        validation: &valid,
        test: &test,
    };
    let cells = sensitivity_sweep(data, &vocab, &a.archs, &a.context_turns, &sweep_cfg)?;
    for c in &cells {
        if let Some(r) = c.report() {
            check_finite("perplexity", r.perplexity)?;
            say(cli, format!("{} {}", c.architecture, r));
        }
    }
    ensure_parent(&a.out)?;
    write_output(&a.out, |buf| write_sweep_table(&cells, buf))?;
    close_manifest(m, &at, &[&a.out], true)
}
