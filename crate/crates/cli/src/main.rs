use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use delib::asr::AsrTier;
use delib::datagen::FeatureChannel;
use delib::experiment::{self, RunConfig};
use delib::model::{argmax, ModelConfig, Modality};
use delib::parse::{em_score, exact_match};
use delib::tokenizer::Vocabulary;
use delib::training::{prepare_input, Strategy};

#[derive(Parser, Debug)]
#[command(name = "delib", version, about = "Deliberation-based spoken language understanding toolkit")]
struct Cli {
    /// Run config (TOML). Flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; receives the resolved config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Root seed from which every random stream is derived.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads for matrix cells.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    jobs: usize,
    /// Model size preset.
    #[arg(long, global = true, value_parser = ["toy", "paper-scale"])]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with audio features and first-pass hypotheses.
    Datagen(DatagenArgs),
    /// Build the subword vocabulary from a dataset's training references.
    BuildVocab(DataArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and evaluate the modality x strategy x channel matrix.
    Matrix(MatrixArgs),
    /// Compare analytic and numeric gradients of the training loss.
    Gradcheck,
    /// Exact match between two annotation files, one parse per line.
    Em(EmArgs),
    /// Decode one utterance, printing the pointer-generator state per step.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct DatagenArgs {
    /// Total utterances, split 70/15/15 into train/valid/test.
    #[arg(long)]
    n: Option<usize>,
    /// Target word error rate of the first-pass channel.
    #[arg(long)]
    wer: Option<f64>,
    #[arg(long)]
    compositional_fraction: Option<f64>,
    /// Grammar file replacing the built-in grammar.
    #[arg(long)]
    grammar: Option<String>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory written by `datagen`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    text_pieces: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    modality: Option<Modality>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Feature channel of the training audio.
    #[arg(long)]
    channel: Option<FeatureChannel>,
    #[arg(long)]
    tier: Option<AsrTier>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// One of train, valid, test, train.mismatched, valid.mismatched.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args, Debug)]
struct MatrixArgs {
    /// Training seeds per cell.
    #[arg(long)]
    seeds: Option<usize>,
    /// Restrict to these tiers (comma separated).
    #[arg(long, value_delimiter = ',')]
    tiers: Vec<AsrTier>,
}

#[derive(Args, Debug)]
struct EmArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Record id; the first record of the split when absent.
    #[arg(long)]
    id: Option<String>,
    /// Entries of g_t and c_t shown per step.
    #[arg(long, default_value_t = 3)]
    top: usize,
}

fn main() -> ExitCode {
    ExitCode::from(exit_code(std::env::args_os()))
}

/// 0 on success (and for help/version), 1 on usage errors, 2 on runtime errors.
fn exit_code<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(preset) = &cli.preset {
        let p = RunConfig::preset(preset).expect("clap restricts preset names");
        let modality = config.model.modality;
        config.model = ModelConfig { modality, ..p.model };
        if cli.config.is_none() {
            config = RunConfig { model: config.model, ..p };
        }
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    match &cli.out {
        Some(p) => Ok(p),
        None => bail!("this command needs --out DIR"),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = base_config(&cli)?;
    match &cli.command {
        Command::Datagen(a) => {
            if let Some(n) = a.n {
                config.data.train = (n as f64 * 0.70).round() as usize;
                config.data.valid = (n as f64 * 0.15).round() as usize;
                config.data.test = n - config.data.train - config.data.valid;
            }
            if let Some(w) = a.wer {
                config.data.wer = w;
            }
            if let Some(f) = a.compositional_fraction {
                config.data.compositional_fraction = f;
            }
            if let Some(g) = &a.grammar {
                config.data.grammar = Some(g.clone());
            }
            let out = out_dir(&cli)?;
            let ds = experiment::generate(&config)?;
            experiment::write_dataset(out, &ds)?;
            config.save(&out.join("config.toml"))?;
            let errors = ds.train.iter().filter(|r| r.has_asr_error).count();
            println!(
                "wrote {} train / {} valid / {} test utterances to {} ({} train utterances with first-pass errors)",
                ds.train.len(),
                ds.valid.len(),
                ds.test.len(),
                out.display(),
                errors
            );
        }
        Command::BuildVocab(a) => {
            if let Some(d) = &a.data {
                config.io.data = Some(d.clone());
            }
            if let Some(n) = a.text_pieces {
                config.vocab.text_pieces = n;
            }
            let out = out_dir(&cli)?;
            let data = config.io.data.clone().context("no dataset directory given (--data)")?;
            let train = experiment::read_split(&data, "train")?;
            let vocab = experiment::build_vocabulary(&config, &train)?;
            experiment::create_dir(out)?;
            vocab.save(&out.join("vocab.txt"))?;
            config.save(&out.join("config.toml"))?;
            println!("{} entries, digest {}", vocab.len(), vocab.digest());
        }
        Command::Train(a) => {
            if let Some(d) = &a.data {
                config.io.data = Some(d.clone());
            }
            if let Some(v) = &a.vocab {
                config.io.vocab = Some(v.clone());
            }
            if let Some(m) = a.modality {
                config.model.modality = m;
            }
            if let Some(s) = a.strategy {
                config.train.strategy = s;
            }
            if let Some(c) = a.channel {
                config.io.channel = c;
            }
            if let Some(t) = a.tier {
                config.asr.tier = t;
            }
            if let Some(e) = a.epochs {
                config.train.epochs = e;
            }
            let out = out_dir(&cli)?;
            let outcome = experiment::train_to_dir(&config, out)?;
            print!("{}", experiment::metrics_log(&outcome.epochs));
            println!("best epoch {} valid EM {:.4}", outcome.best_epoch, outcome.best_valid_em);
        }
        Command::Eval(a) => {
            if let Some(d) = &a.data {
                config.io.data = Some(d.clone());
            }
            if let Some(v) = &a.vocab {
                config.io.vocab = Some(v.clone());
            }
            if let Some(c) = &a.checkpoint {
                config.io.checkpoint = Some(c.clone());
            }
            if let Some(s) = &a.split {
                config.io.split = s.clone();
            }
            let out = out_dir(&cli)?;
            let r = experiment::eval_to_dir(&config, out)?;
            println!(
                "EM {:.4} (no-error {:.4} n={}, error {:.4} n={})",
                r.overall.em(),
                r.no_error.em(),
                r.no_error.n,
                r.error.em(),
                r.error.n
            );
        }
        Command::Matrix(a) => {
            if let Some(s) = a.seeds {
                config.matrix.seeds = s;
            }
            if !a.tiers.is_empty() {
                config.matrix.tiers.retain(|t| a.tiers.contains(&t.tier));
            }
            let out = out_dir(&cli)?;
            let report = experiment::run_matrix(&config, out, cli.jobs, &|line| eprintln!("{line}"))?;
            print!("{}", report.to_text());
        }
        Command::Gradcheck => {
            let mut model = match &cli.preset {
                Some(_) => config.model.clone(),
                None => ModelConfig::toy(config.model.modality, 0),
            };
            model.vocab_size = 24;
            let report = experiment::gradcheck_loss(&model, config.seed)?;
            let pass = report.max_rel_error < 1e-3;
            let line = format!(
                "max rel error {:.3e} over {} coordinates: {}",
                report.max_rel_error,
                report.coords_checked,
                if pass { "PASS" } else { "FAIL" }
            );
            println!("{line}");
            if let Some(out) = &cli.out {
                experiment::create_dir(out)?;
                config.save(&out.join("config.toml"))?;
                experiment::write_file(&out.join("gradcheck.txt"), line + "\n")?;
            }
            if !pass {
                bail!("gradient check failed");
            }
        }
        Command::Em(a) => {
            let read = |p: &Path| -> Result<Vec<String>> {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(text.lines().map(str::to_string).collect())
            };
            let hyp = read(&a.hyp)?;
            let reference = read(&a.reference)?;
            if hyp.len() != reference.len() {
                bail!("{} has {} lines but {} has {}", a.hyp.display(), hyp.len(), a.reference.display(), reference.len());
            }
            let pairs: Vec<(String, String)> = hyp.into_iter().zip(reference).collect();
            let em = em_score(&pairs)?;
            let line = format!("EM {em:.4}");
            println!("{line}");
            if let Some(out) = &cli.out {
                experiment::create_dir(out)?;
                config.save(&out.join("config.toml"))?;
                let flags: String = pairs
                    .iter()
                    .map(|(h, r)| format!("{}\n", exact_match(h, r) as u8))
                    .collect();
                experiment::write_file(&out.join("em.txt"), line + "\n")?;
                experiment::write_file(&out.join("matches.txt"), flags)?;
            }
        }
        Command::Inspect(a) => {
            if let Some(d) = &a.data {
                config.io.data = Some(d.clone());
            }
            if let Some(v) = &a.vocab {
                config.io.vocab = Some(v.clone());
            }
            if let Some(c) = &a.checkpoint {
                config.io.checkpoint = Some(c.clone());
            }
            if let Some(s) = &a.split {
                config.io.split = s.clone();
            }
            let text = inspect(&config, a)?;
            print!("{text}");
            if let Some(out) = &cli.out {
                experiment::create_dir(out)?;
                config.save(&out.join("config.toml"))?;
                experiment::write_file(&out.join("inspect.txt"), text)?;
            }
        }
    }
    Ok(())
}

fn inspect(config: &RunConfig, a: &InspectArgs) -> Result<String> {
    use std::fmt::Write as _;
    let data = config.io.data.as_deref().context("no dataset directory given (--data)")?;
    let vocab = Vocabulary::load(config.io.vocab.as_deref().context("no vocabulary given (--vocab)")?)?;
    let ckpt = experiment::load_checkpoint(config.io.checkpoint.as_deref().context("no checkpoint given (--checkpoint)")?)?;
    let records = experiment::read_split(data, &config.io.split)?;
    let record = match &a.id {
        Some(id) => records.iter().find(|r| &r.id == id).with_context(|| format!("no record `{id}`"))?,
        None => records.first().context("split is empty")?,
    };
    let ex = prepare_input(&vocab, &ckpt.stub, record, true)?;
    let (ids, steps) = ckpt.model.greedy_decode_trace(ex.sources())?;
    let name = |id: usize| vocab.token(id).unwrap_or("?").to_string();
    let top = |dist: &[f64]| -> String {
        let mut idx: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
        idx.sort_by(|&x, &y| dist[y].total_cmp(&dist[x]).then(x.cmp(&y)));
        idx.iter()
            .take(a.top)
            .map(|&i| format!("{}={:.3}", name(i), dist[i]))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut out = String::new();
    let _ = writeln!(out, "id         {}", record.id);
    let _ = writeln!(out, "reference  {}", record.ref_text);
    let _ = writeln!(out, "hypothesis {}", record.hyp_text);
    let _ = writeln!(out, "pieces     {}", ex.hyp_ids.iter().map(|&i| name(i)).collect::<Vec<_>>().join(" | "));
    for (t, s) in steps.iter().enumerate() {
        let chosen = argmax(&s.out);
        let _ = writeln!(out, "step {t:>2} emit {:<24} p_copy={:.3}", name(chosen), s.p_copy);
        let _ = writeln!(out, "        g: {}", top(&s.gen));
        if !s.copy.is_empty() {
            let _ = writeln!(out, "        c: {}", top(&s.copy));
        }
    }
    let predicted = vocab.decode(&ids);
    let _ = writeln!(out, "predicted  {predicted}");
    let _ = writeln!(out, "target     {}", record.annotation);
    let _ = writeln!(out, "exact match {}", exact_match(&predicted, &record.annotation));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn delib(args: &[&str]) -> u8 {
        exit_code(std::iter::once("delib").chain(args.iter().copied()))
    }

    fn path(dir: &Path, rel: &str) -> String {
        dir.join(rel).to_string_lossy().into_owned()
    }

    #[test]
    fn usage_errors_exit_one_and_help_exits_zero() {
        assert_eq!(delib(&["frobnicate"]), 1);
        assert_eq!(delib(&["train", "--modality", "video"]), 1);
        assert_eq!(delib(&["--preset", "huge", "gradcheck"]), 1);
        assert_eq!(delib(&["--help"]), 0);
        let names: Vec<String> = Cli::command().get_subcommands().map(|c| c.get_name().to_string()).collect();
        assert_eq!(names, ["datagen", "build-vocab", "train", "eval", "matrix", "gradcheck", "em", "inspect"]);
    }

    #[test]
    fn runtime_errors_exit_two() {
        let tmp = tempfile::tempdir().unwrap();
        assert_eq!(delib(&["--out", &path(tmp.path(), "x"), "train"]), 2);
        let missing = path(tmp.path(), "missing");
        assert_eq!(delib(&["em", "--hyp", &missing, "--ref", &missing]), 2);
    }

    #[test]
    fn em_scores_files_and_writes_config() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path();
        fs::write(d.join("ref.anno"), "[IN:PLAY_MUSIC [SL:PLAYLIST Jacques ][SL:TYPE station ]]\n[IN:A ]\n").unwrap();
        fs::write(d.join("hyp.anno"), "[IN:PLAY_MUSIC [SL:PLAYLIST Jock ][SL:TYPE station ]]\n[IN:A]\n").unwrap();
        let (hyp, reference) = (path(d, "hyp.anno"), path(d, "ref.anno"));
        assert_eq!(delib(&["--out", &path(d, "same"), "em", "--hyp", &reference, "--ref", &reference]), 0);
        assert_eq!(fs::read_to_string(d.join("same/em.txt")).unwrap(), "EM 1.0000\n");
        assert_eq!(delib(&["--out", &path(d, "out"), "em", "--hyp", &hyp, "--ref", &reference]), 0);
        assert_eq!(fs::read_to_string(d.join("out/em.txt")).unwrap(), "EM 0.5000\n");
        assert_eq!(fs::read_to_string(d.join("out/matches.txt")).unwrap(), "0\n1\n");
        assert!(d.join("out/config.toml").exists());
    }

    #[test]
    fn toy_pipeline_and_vocabulary_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path();
        let p = |rel: &str| path(d, rel);
        let ok = |args: &[&str]| assert_eq!(delib(args), 0, "{args:?}");
        ok(&["--preset", "toy", "--out", &p("data"), "datagen", "--n", "60"]);
        let train = fs::read_to_string(d.join("data/train.jsonl")).unwrap();
        assert_eq!(train.lines().count(), 42);
        ok(&["--config", &p("data/config.toml"), "--out", &p("vocab"), "build-vocab", "--data", &p("data")]);
        ok(&[
            "--config", &p("data/config.toml"), "--out", &p("vocab2"), "build-vocab", "--data", &p("data"),
            "--text-pieces", "120",
        ]);
        ok(&[
            "--config", &p("vocab/config.toml"), "--out", &p("run"), "train", "--vocab", &p("vocab/vocab.txt"),
            "--modality", "audio-only", "--epochs", "1",
        ]);
        for f in ["config.toml", "model.ckpt", "metrics.log", "timing.log"] {
            assert!(d.join("run").join(f).exists(), "missing {f}");
        }
        assert!(fs::read_to_string(d.join("run/config.toml")).unwrap().contains("audio-only"));
        ok(&["--config", &p("run/config.toml"), "--out", &p("ev"), "eval", "--checkpoint", &p("run/model.ckpt")]);
        assert!(d.join("ev/report.json").exists());
        ok(&[
            "--config", &p("run/config.toml"), "--out", &p("insp"), "inspect", "--checkpoint", &p("run/model.ckpt"),
            "--split", "valid",
        ]);
        assert!(fs::read_to_string(d.join("insp/inspect.txt")).unwrap().contains("p_copy="));
        let code = delib(&[
            "--config", &p("run/config.toml"), "--out", &p("ev2"), "eval", "--checkpoint", &p("run/model.ckpt"),
            "--vocab", &p("vocab2/vocab.txt"),
        ]);
        assert_eq!(code, 2);
        assert!(!d.join("ev2/report.json").exists());
    }
}
