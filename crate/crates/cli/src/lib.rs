//! The `plora` command-line tool.
//!
//! Every configuration key (see `plora help`) may be given in a flat
//! `key=value` file via `--config FILE` and overridden by a flag of the same
//! name, e.g. `--omega 0.2` or `--batch_size=32`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use plora_core::checkpoint::Checkpoint;
use plora_core::config::{Configurable, KvConfig};
use plora_core::data::{few_shot_view, generate, Corpus, Dataset, GeneratorSpec, SplitSpec};
use plora_core::encoder::{EncoderConfig, EncoderModel};
use plora_core::exec::Exec;
use plora_core::metrics::MetricReport;
use plora_core::trainer::{
    evaluate, total_params, train_fewshot, train_fullshot, train_twostage, EvalMode, Regime, RunConfig,
    TrainOutcome,
};
use plora_core::users::{UserId, UserRegistry};

#[derive(Parser, Debug)]
#[command(name = "plora", version, about = "Personalized low-rank adaptation toolkit")]
#[command(after_help = config_help())]
struct Cli {
    /// Flat key=value configuration file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run per-sample work on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic A/B corpus into a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fresh model on the A split (regime via --regime).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the key=value training log here.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Few-shot samples per B user for the second stage of `--regime 2s`.
        #[arg(long, default_value_t = 15)]
        k: usize,
    },
    /// Fit B-user embeddings on k samples each, everything else frozen.
    Fewshot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Required for `--mode merged`.
        #[arg(long)]
        user: Option<String>,
        #[arg(long, default_value = "a")]
        part: String,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Fold adapters (and one user's term) into the base weights.
    Merge {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required_unless_present = "generic", conflicts_with = "generic")]
        user: Option<String>,
        /// Fold the task path only; anonymous users.
        #[arg(long)]
        generic: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-target a merged checkpoint's folded bias to another user.
    SwitchUser {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print shapes, parameter counts, TP ratio and merge state.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Grid over one hyperparameter and several seeds; writes a CSV.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Personalized,
    ZeroShot,
    Merged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    Omega,
    Alpha,
    Rank,
    #[value(name = "d_p")]
    DP,
    K,
}

impl SweepParam {
    fn key(self) -> &'static str {
        match self {
            SweepParam::Omega => "omega",
            SweepParam::Alpha => "alpha",
            SweepParam::Rank => "rank",
            SweepParam::DP => "d_p",
            SweepParam::K => "k",
        }
    }
}

fn default_pairs() -> Vec<(String, String)> {
    let mut pairs = GeneratorSpec::default().to_pairs();
    pairs.extend(SplitSpec::default().to_pairs());
    pairs.extend(EncoderConfig::default().to_pairs());
    pairs.extend(RunConfig::default().to_pairs());
    pairs
}

fn config_help() -> String {
    let mut s = String::from("Configuration keys (flag --<key> <value>, defaults shown):\n");
    let mut seen = BTreeSet::new();
    for (k, v) in default_pairs() {
        if seen.insert(k.clone()) {
            s.push_str(&format!("  {k}={v}\n"));
        }
    }
    s
}

/// Pulls `--<key> <value>` / `--<key>=<value>` for known config keys out of
/// `args`; everything else is left for clap.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, KvConfig)> {
    let keys: BTreeSet<String> = default_pairs().into_iter().map(|(k, _)| k).collect();
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = KvConfig::default();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let key = name.replace('-', "_");
        if !keys.contains(&key) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| anyhow!("flag --{name} needs a value"))?,
        };
        overrides.set(key, value);
    }
    Ok((rest, overrides))
}

struct Settings {
    kv: KvConfig,
    exec: Exec,
}

impl Settings {
    fn apply(&self, targets: &mut [&mut dyn Configurable]) -> Result<()> {
        self.kv.apply(targets)?;
        Ok(())
    }

    fn run_config(&self, ignore: &[&str]) -> Result<(EncoderConfig, RunConfig)> {
        let mut enc = EncoderConfig::default();
        let mut run = RunConfig::default();
        let kv = KvConfig::from_pairs(
            self.kv
                .iter()
                .filter(|(k, _)| !ignore.contains(k))
                .map(|(k, v)| (k.to_string(), v.to_string())),
        );
        kv.apply(&mut [&mut enc, &mut run])?;
        run.exec = self.exec;
        Ok((enc, run))
    }
}

/// Entry point: parses `argv` (program name first) and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = argv.into_iter().map(Into::into).collect();
    let mut out = std::io::stdout().lock();
    match run_with(args, &mut out) {
        Ok(()) => 0,
        Err(e) => match e.downcast_ref::<clap::Error>() {
            Some(ce) => {
                let _ = ce.print();
                if ce.use_stderr() {
                    2
                } else {
                    0
                }
            }
            None => {
                eprintln!("error: {e:#}");
                1
            }
        },
    }
}

/// Like [`run`], but writes normal output to `out` and returns errors.
pub fn run_with(args: Vec<String>, out: &mut dyn Write) -> Result<()> {
    let (rest, overrides) = split_overrides(args)?;
    let cli = Cli::try_parse_from(rest)?;
    let mut kv = match &cli.config {
        Some(path) => KvConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => KvConfig::default(),
    };
    kv.extend(&overrides);
    let settings = Settings {
        kv,
        exec: if cli.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        },
    };
    match cli.command {
        Command::GenData { out: dir } => gen_data(&settings, &dir, out),
        Command::Train { data, out: ckpt, log, k } => train(&settings, &data, &ckpt, log.as_deref(), k, out),
        Command::Fewshot {
            checkpoint,
            data,
            k,
            out: ckpt,
            log,
        } => fewshot(&settings, &checkpoint, &data, k, &ckpt, log.as_deref(), out),
        Command::Eval {
            checkpoint,
            data,
            mode,
            user,
            part,
            split,
        } => eval(&settings, &checkpoint, &data, mode, user, &part, &split, out),
        Command::Merge {
            checkpoint,
            user,
            generic: _,
            out: ckpt,
        } => merge(&checkpoint, user, &ckpt, out),
        Command::SwitchUser {
            checkpoint,
            from,
            to,
            out: ckpt,
        } => switch_user(&checkpoint, &from, &to, &ckpt, out),
        Command::Inspect { checkpoint } => inspect(&checkpoint, out),
        Command::Sweep {
            data,
            param,
            values,
            seeds,
            out: csv_path,
        } => sweep(&settings, &data, param, &values, &seeds, &csv_path, out),
    }
}

fn gen_data(settings: &Settings, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let mut gen = GeneratorSpec::default();
    let mut split = SplitSpec::default();
    settings.apply(&mut [&mut gen, &mut split])?;
    let corpus = generate(&gen, &split)?;
    corpus.save(dir)?;
    let (generic, personal) = corpus.bayes_ceilings(&corpus.a.test);
    writeln!(
        out,
        "wrote {} a_train={} a_dev={} a_test={} b_train={} b_dev={} b_test={} ceiling_generic={:.4} ceiling_personalized={:.4}",
        dir.display(),
        corpus.a.train.len(),
        corpus.a.dev.len(),
        corpus.a.test.len(),
        corpus.b.train.len(),
        corpus.b.dev.len(),
        corpus.b.test.len(),
        generic,
        personal
    )?;
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Model shape settings that must follow the corpus.
fn fit_to_corpus(enc: &mut EncoderConfig, corpus: &Corpus) {
    enc.vocab_size = corpus.generator.vocab_size;
    enc.n_classes = corpus.generator.n_classes;
    enc.max_len = enc.max_len.max(corpus.generator.max_len);
}

fn write_log(outcome: &TrainOutcome, log: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    for line in &outcome.log {
        writeln!(out, "{line}")?;
    }
    if let Some(path) = log {
        let mut text = outcome.log.join("\n");
        text.push('\n');
        fs::write(path, text)?;
    }
    Ok(())
}

/// Trains a fresh model on `corpus`; `k` sizes the B view for two-stage runs.
fn train_model(enc: &EncoderConfig, run: &RunConfig, corpus: &Corpus, k: usize) -> Result<(Checkpoint, TrainOutcome)> {
    let mut model = EncoderModel::new(enc.clone(), run.seed)?;
    let mut registry = UserRegistry::new(enc.plora.d_p);
    let outcome = match run.regime {
        Regime::FewShot => bail!("use the fewshot subcommand for embedding-only fits"),
        Regime::TwoStage => {
            let b_users: Vec<UserId> = corpus.b.train.users().into_iter().collect();
            let view = few_shot_view(&corpus.b.train, k)?;
            train_twostage(&mut model, &mut registry, &corpus.a.train, &corpus.a.dev, &b_users, &view, run)?
        }
        _ => train_fullshot(&mut model, &mut registry, &corpus.a.train, &corpus.a.dev, run)?,
    };
    let mut ck = Checkpoint::new(model, registry, run.clone());
    ck.optim = Some(outcome.optim.clone());
    Ok((ck, outcome))
}

fn train(settings: &Settings, data: &Path, ckpt: &Path, log: Option<&Path>, k: usize, out: &mut dyn Write) -> Result<()> {
    let corpus = load_corpus(data)?;
    let (mut enc, run) = settings.run_config(&[])?;
    fit_to_corpus(&mut enc, &corpus);
    let (ck, outcome) = train_model(&enc, &run, &corpus, k)?;
    write_log(&outcome, log, out)?;
    ck.save(ckpt)?;
    writeln!(out, "saved {}", ckpt.display())?;
    Ok(())
}

fn fewshot_fit(ck: &mut Checkpoint, corpus: &Corpus, k: usize, run: &RunConfig) -> Result<TrainOutcome> {
    let users: Vec<UserId> = corpus.b.train.users().into_iter().collect();
    let view = few_shot_view(&corpus.b.train, k)?;
    Ok(train_fewshot(&mut ck.model, &mut ck.registry, &users, &view, run)?)
}

fn fewshot(
    settings: &Settings,
    checkpoint: &Path,
    data: &Path,
    k: usize,
    ckpt: &Path,
    log: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let mut ck = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(data)?;
    let mut run = ck.run.clone();
    let mut enc = ck.model.config().clone();
    settings.apply(&mut [&mut run, &mut enc])?;
    if enc != *ck.model.config() {
        bail!("model shape keys cannot change after training");
    }
    run.exec = settings.exec;
    let outcome = fewshot_fit(&mut ck, &corpus, k, &run)?;
    write_log(&outcome, log, out)?;
    ck.save(ckpt)?;
    writeln!(out, "saved {}", ckpt.display())?;
    Ok(())
}

fn pick<'a>(corpus: &'a Corpus, part: &str, split: &str) -> Result<&'a Dataset> {
    corpus
        .part(part)
        .ok_or_else(|| anyhow!("unknown part {part:?} (expected a or b)"))?
        .get(split)
        .ok_or_else(|| anyhow!("unknown split {split:?} (expected train, dev or test)"))
}

fn report_line(mode: &EvalMode, part: &str, split: &str, r: &MetricReport) -> String {
    format!("mode={mode} part={part} split={split} {r}")
}

#[allow(clippy::too_many_arguments)]
fn eval(
    settings: &Settings,
    checkpoint: &Path,
    data: &Path,
    mode: Mode,
    user: Option<String>,
    part: &str,
    split: &str,
    out: &mut dyn Write,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(data)?;
    let dataset = pick(&corpus, part, split)?;
    let mode = match (mode, user) {
        (Mode::Personalized, _) => EvalMode::Personalized,
        (Mode::ZeroShot, _) => EvalMode::ZeroShot,
        (Mode::Merged, Some(u)) => EvalMode::Merged(UserId::new(u)?),
        (Mode::Merged, None) => bail!("--mode merged needs --user"),
    };
    let r = evaluate(&ck.model, &ck.registry, dataset, &mode, ck.run.regime, settings.exec)?;
    writeln!(out, "{}", report_line(&mode, part, split, &r))?;
    Ok(())
}

fn merge(checkpoint: &Path, user: Option<String>, ckpt: &Path, out: &mut dyn Write) -> Result<()> {
    let mut ck = load_checkpoint(checkpoint)?;
    match user {
        Some(u) => {
            let u = UserId::new(u)?;
            let p = ck.registry.require(&u)?.clone();
            ck.model.merge_for_user(Some(&u), &p)?;
            writeln!(out, "merged for user {u}")?;
        }
        None => {
            let zero = plora_core::users::anonymous(ck.registry.d_p());
            ck.model.merge_for_user(None, &zero)?;
            writeln!(out, "merged generic")?;
        }
    }
    ck.save(ckpt)?;
    writeln!(out, "saved {}", ckpt.display())?;
    Ok(())
}

fn switch_user(checkpoint: &Path, from: &str, to: &str, ckpt: &Path, out: &mut dyn Write) -> Result<()> {
    let mut ck = load_checkpoint(checkpoint)?;
    let from = UserId::new(from)?;
    let to = UserId::new(to)?;
    let p_from = ck.registry.require(&from)?.clone();
    let p_to = ck.registry.require(&to)?.clone();
    ck.model.switch_user(&p_from, &p_to, Some(&to))?;
    ck.save(ckpt)?;
    writeln!(out, "switched {from} -> {to}\nsaved {}", ckpt.display())?;
    Ok(())
}

fn inspect(checkpoint: &Path, out: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let m = &ck.model;
    let cfg = m.config();
    writeln!(out, "regime={}", ck.run.regime)?;
    writeln!(
        out,
        "d_model={} n_heads={} n_layers={} d_ff={} vocab_size={} n_classes={} rank={} d_p={} scale={}",
        cfg.d_model,
        cfg.n_heads,
        cfg.n_layers,
        cfg.d_ff,
        cfg.vocab_size,
        cfg.n_classes,
        cfg.plora.rank,
        cfg.plora.d_p,
        cfg.plora.scale()
    )?;
    for id in m.param_ids() {
        let (r, c) = m.param_shape(id);
        writeln!(out, "param {} {r}x{c}", id.name())?;
    }
    for (i, s) in m.merge_states().iter().enumerate() {
        let proj = if i % 2 == 0 { "q" } else { "v" };
        let state = match s {
            plora_core::plora::MergeState::Clean => "clean",
            plora_core::plora::MergeState::MergedGeneric => "merged_generic",
            plora_core::plora::MergeState::MergedForUser(_) => "merged_user",
        };
        writeln!(out, "merge_state block{}.{proj}={state}", i / 2)?;
    }
    writeln!(
        out,
        "merged_user={}",
        m.merged_user().map_or("none".to_string(), |u| u.to_string())
    )?;
    let trainable = ck.run.regime.trainable_count(m, &ck.registry);
    let total = total_params(m, &ck.registry);
    writeln!(
        out,
        "frozen={} adapters={} head={} users={} user_params={} trainable={trainable} total={total} tp_ratio={:.6}",
        m.frozen_count(),
        m.adapter_count(),
        m.head_count(),
        ck.registry.len(),
        ck.registry.parameter_count(),
        trainable as f64 / total as f64
    )?;
    if let Some(o) = &ck.optim {
        writeln!(out, "optimizer_steps={}", o.step)?;
    }
    Ok(())
}

const CSV_HEADER: [&str; 7] = ["param", "value", "seed", "split", "acc", "mse", "macro_f1"];

fn sweep(
    settings: &Settings,
    data: &Path,
    param: SweepParam,
    values: &[String],
    seeds: &[u64],
    csv_path: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let corpus = load_corpus(data)?;
    let (mut base_enc, base_run) = settings.run_config(&["seed", param.key()])?;
    fit_to_corpus(&mut base_enc, &corpus);
    let mut writer = csv::Writer::from_path(csv_path)?;
    writer.write_record(CSV_HEADER)?;
    let mut emit = |value: &str, seed: u64, split: &str, r: &MetricReport| -> Result<()> {
        writer.write_record([
            param.key().to_string(),
            value.to_string(),
            seed.to_string(),
            split.to_string(),
            r.acc.to_string(),
            r.mse.to_string(),
            r.macro_f1.to_string(),
        ])?;
        writeln!(
            out,
            "param={} value={value} seed={seed} split={split} acc={} mse={} macro_f1={}",
            param.key(),
            r.acc,
            r.mse,
            r.macro_f1
        )?;
        Ok(())
    };
    for &seed in seeds {
        let mut run = base_run.clone();
        run.seed = seed;
        if param == SweepParam::K {
            let (base, _) = train_model(&base_enc, &run, &corpus, 0)?;
            for value in values {
                let k: usize = value.parse().with_context(|| format!("bad k value {value:?}"))?;
                let mut ck = base.clone();
                fewshot_fit(&mut ck, &corpus, k, &run)?;
                let r = evaluate(&ck.model, &ck.registry, &corpus.b.test, &EvalMode::Personalized, Regime::FewShot, run.exec)?;
                emit(value, seed, "b_test_few_shot", &r)?;
            }
            continue;
        }
        for value in values {
            let mut enc = base_enc.clone();
            let mut run = run.clone();
            let mut targets: [&mut dyn Configurable; 2] = [&mut enc, &mut run];
            if !targets.iter_mut().any(|t| t.set_key(param.key(), value).unwrap_or(false)) {
                bail!("bad value {value:?} for {}", param.key());
            }
            let (ck, _) = train_model(&enc, &run, &corpus, 0)?;
            let a_mode = if run.regime.uses_users() {
                EvalMode::Personalized
            } else {
                EvalMode::ZeroShot
            };
            let a = evaluate(&ck.model, &ck.registry, &corpus.a.test, &a_mode, run.regime, run.exec)?;
            emit(value, seed, "a_test", &a)?;
            let b = evaluate(&ck.model, &ck.registry, &corpus.b.test, &EvalMode::ZeroShot, run.regime, run.exec)?;
            emit(value, seed, "b_test_zero_shot", &b)?;
        }
    }
    writer.flush()?;
    writeln!(out, "wrote {}", csv_path.display())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn config_flags_are_split_out() {
        let (rest, kv) =
            split_overrides(s(&["plora", "train", "--omega", "0.3", "--batch_size=4", "--data", "d"])).unwrap();
        assert_eq!(rest, s(&["plora", "train", "--data", "d"]));
        assert_eq!(kv.get("omega"), Some("0.3"));
        assert_eq!(kv.get("batch_size"), Some("4"));
    }

    #[test]
    fn kebab_case_maps_to_the_same_key() {
        let (_, kv) = split_overrides(s(&["plora", "--n-users-a", "3"])).unwrap();
        assert_eq!(kv.get("n_users_a"), Some("3"));
    }

    #[test]
    fn missing_value_is_an_error() {
        assert!(split_overrides(s(&["plora", "--omega"])).is_err());
    }
}
