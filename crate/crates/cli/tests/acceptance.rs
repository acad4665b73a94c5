//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line for each and exits nonzero if any failed.

#[path = "../../core/tests/common/oracle.rs"]
mod oracle;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use delib::datagen::{FeatureChannel, Grammar};
use delib::eval::evaluate;
use delib::experiment::{self, MatrixReport, RunConfig, TierSpec};
use delib::model::{param_count, DeliberationModel, Modality, ModelConfig};
use delib::parse::{exact_match, parse_annotation, serialize};
use delib::tensor::{Graph, Tensor};
use delib::tokenizer::BOS;
use delib::training::{build_pairs, Strategy};
use delib::asr::AsrTier;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn small(modality: Modality, vocab: usize, dim: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        dim,
        fusion_heads: heads,
        pooling_heads: heads,
        pooling_dim: dim,
        ff_dim: 2 * dim,
        decoder_heads: heads,
        copy_heads: heads,
        ..ModelConfig::toy(modality, vocab)
    }
}

fn gradient_fidelity() -> Result<Verdict> {
    let started = Instant::now();
    let config = ModelConfig::toy(Modality::Fusion, 24);
    let report = experiment::gradcheck_loss(&config, 7)?;
    let secs = started.elapsed().as_secs_f64();
    Ok(Verdict::new(
        report.max_rel_error < 1e-3 && secs < 60.0,
        format!(
            "max rel error {:.2e} over {} coordinates (D={}), {secs:.1}s",
            report.max_rel_error, report.coords_checked, config.dim
        ),
    ))
}

fn mixture_algebra() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_sum: f64 = 0.0;
    let mut failures = Vec::new();
    for step in 0..1000 {
        let modality = if step % 2 == 0 { Modality::Fusion } else { Modality::TextOnly };
        let vocab = rng.gen_range(8..40);
        let model = DeliberationModel::new(small(modality, vocab, 8, 2), rng.gen()).unwrap();
        let n = rng.gen_range(1..9);
        let e = random(n, 8, &mut rng);
        let d = random(1, 8, &mut rng);
        let hyp: Vec<usize> = (0..n).map(|_| rng.gen_range(4..vocab)).collect();
        let s = model.decode_step(&d, &e, &hyp)?;
        let sum: f64 = s.out.iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        let outside = s
            .copy
            .iter()
            .enumerate()
            .any(|(v, &c)| c != 0.0 && !hyp.contains(&v));
        let gen_only = model.decode_step_forced(&d, &e, &hyp, Some(0.0))?;
        let copy_only = model.decode_step_forced(&d, &e, &hyp, Some(1.0))?;
        if (sum - 1.0).abs() >= 1e-6 || outside || gen_only.out != gen_only.gen || copy_only.out != copy_only.copy {
            failures.push(step);
        }
    }
    Ok(Verdict::new(
        failures.is_empty(),
        format!("1000 steps, max |sum-1| {worst_sum:.1e}, failing steps {failures:?}"),
    ))
}

fn scatter_oracle() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mismatches = 0;
    let mut with_duplicates = 0;
    for _ in 0..100 {
        let vocab = rng.gen_range(6..20);
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let model = DeliberationModel::new(small(Modality::Fusion, vocab, 8, heads), rng.gen()).unwrap();
        let n = rng.gen_range(1..12);
        // A narrow id range forces repeated tokens.
        let hyp: Vec<usize> = (0..n).map(|_| rng.gen_range(4..8.min(vocab))).collect();
        if hyp.iter().collect::<BTreeSet<_>>().len() < n {
            with_duplicates += 1;
        }
        let s = model.decode_step(&random(1, 8, &mut rng), &random(n, 8, &mut rng), &hyp)?;
        let mut brute = vec![0.0; vocab];
        for (v, slot) in brute.iter_mut().enumerate() {
            for (i, &h) in hyp.iter().enumerate() {
                if h == v {
                    *slot += s.weights[i];
                }
            }
        }
        if brute != s.copy {
            mismatches += 1;
        }
    }
    Ok(Verdict::new(
        mismatches == 0 && with_duplicates > 0,
        format!("100 cases ({with_duplicates} with repeated tokens), {mismatches} differ from the accumulation oracle"),
    ))
}

fn layer_oracles() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let heads = [1, 2, 4][case % 3];
        let dim = 8;
        let vocab = 10 + case;
        let modality = Modality::ALL[case % 3];
        let cfg = ModelConfig {
            pooling_layers: case % 3,
            ..small(modality, vocab, dim, heads)
        };
        let model = DeliberationModel::new(cfg, case as u64).unwrap();
        let (t, a) = (rng.gen_range(1..6), rng.gen_range(1..9));
        let text = random(t, dim, &mut rng);
        let audio = random(a, dim, &mut rng);

        let mut g = Graph::new(model.params());
        if modality == Modality::Fusion {
            let (tv, av) = (g.input(text.clone()), g.input(audio.clone()));
            let fused = model.fuse(&mut g, tv, av)?;
            let want = oracle::fuse(model.params(), heads, &text.to_rows(), &audio.to_rows());
            worst = worst.max(oracle::max_abs_diff_m(&want, g.value(fused)));
        }
        let xv = g.input(text.clone());
        let pooled = model.pool(&mut g, xv)?;
        let want = oracle::pool(model.params(), case % 3, heads, &text.to_rows());
        worst = worst.max(oracle::max_abs_diff_m(&want, g.value(pooled)));

        let e = random(t, dim, &mut rng);
        let hyp: Vec<usize> = (0..t).map(|_| rng.gen_range(4..vocab)).collect();
        let prefix: Vec<usize> = std::iter::once(BOS).chain((0..3).map(|_| rng.gen_range(4..vocab))).collect();
        let m = g.input(e.clone());
        let d = model.decoder_states(&mut g, m, &prefix, 0)?;
        let want = oracle::decoder_states(model.params(), 1, heads, &e.to_rows(), &prefix);
        worst = worst.max(oracle::max_abs_diff_m(&want, g.value(d)));
        for r in 0..prefix.len() {
            let d_t = Tensor::row(g.value(d).row_slice(r).to_vec());
            let got = model.decode_step(&d_t, &e, &hyp)?;
            let want = oracle::head(model.params(), heads, d_t.data(), &e.to_rows(), &hyp);
            worst = worst.max(oracle::max_abs_diff(&got.out, &want.out));
            worst = worst.max(oracle::max_abs_diff(&got.gen, &want.gen));
            worst = worst.max((got.p_copy - want.p_copy).abs());
            if modality.has_copy() {
                worst = worst.max(oracle::max_abs_diff(&got.copy, &want.copy));
            }
        }
    }
    Ok(Verdict::new(worst < 1e-10, format!("fuse/pool/decoder/head over 20 shapes, max abs diff {worst:.1e}")))
}

const GOLDEN_REF: &str = "[IN:PLAY_MUSIC [SL:PLAYLIST Jacques ][SL:TYPE station ]]";

/// Hand-labeled (hypothesis, reference, expected match).
const GOLDEN: [(&str, &str, bool); 20] = [
    ("[IN:PLAY_MUSIC [SL:PLAYLIST Jock ][SL:TYPE station ]]", GOLDEN_REF, false),
    (GOLDEN_REF, GOLDEN_REF, true),
    ("[IN:PLAY_MUSIC [SL:PLAYLIST jacques ][SL:TYPE station ]]", GOLDEN_REF, true),
    ("[IN:PLAY_MUSIC [SL:PLAYLIST JACQUES ][SL:TYPE STATION ]]", GOLDEN_REF, true),
    ("[IN:PLAY_MUSIC [SL:PLAYLIST Jacques. ][SL:TYPE station! ]]", GOLDEN_REF, true),
    ("[IN:PLAY_MUSIC [SL:PLAYLIST \"Jacques\" ][SL:TYPE station? ]]", GOLDEN_REF, true),
    ("[IN:PLAY_MUSIC [SL:PLAYLIST Jacques ] [SL:TYPE station ] ]", GOLDEN_REF, true),
    ("  [IN:PLAY_MUSIC   [SL:PLAYLIST Jacques][SL:TYPE station]]  ", GOLDEN_REF, true),
    ("[IN:PLAY_MUSIC [SL:TYPE station ][SL:PLAYLIST Jacques ]]", GOLDEN_REF, false),
    ("[IN:PLAY_RADIO [SL:PLAYLIST Jacques ][SL:TYPE station ]]", GOLDEN_REF, false),
    ("[IN:PLAY_MUSIC [SL:ARTIST Jacques ][SL:TYPE station ]]", GOLDEN_REF, false),
    ("[IN:PLAY_MUSIC [SL:PLAYLIST Jacques ]]", GOLDEN_REF, false),
    ("[IN:PLAY_MUSIC [SL:PLAYLIST Jacques Brel ][SL:TYPE station ]]", GOLDEN_REF, false),
    ("[IN:PLAY_MUSIC [SL:PLAYLIST Jacques ][SL:TYPE station ]", GOLDEN_REF, false),
    ("[IN:PLAY_MUSIC [SL:PLAYLIST Jacq ues ][SL:TYPE station ]]", GOLDEN_REF, false),
    ("", GOLDEN_REF, false),
    ("play jacques station", GOLDEN_REF, false),
    (
        "[IN:GET_DIRECTIONS [SL:DESTINATION [IN:GET_EVENT [SL:NAME Eagles ] [SL:CAT game ] ] ] ]",
        "[IN:GET_DIRECTIONS [SL:DESTINATION [IN:GET_EVENT [SL:NAME eagles! ][SL:CAT Game ]]]]",
        true,
    ),
    (
        "[IN:GET_DIRECTIONS [SL:DESTINATION [IN:GET_EVENT [SL:NAME Eagles ] ] ] ]",
        "[IN:GET_DIRECTIONS [SL:DESTINATION [IN:GET_EVENT [SL:NAME Eagles ] [SL:CAT game ] ] ] ]",
        false,
    ),
    ("[IN:SET_ALARM ]", "[IN:SET_ALARM]", true),
];

fn golden_suite() -> Result<Verdict> {
    let wrong: Vec<usize> = GOLDEN
        .iter()
        .enumerate()
        .filter(|(_, (h, r, want))| exact_match(h, r) != *want || exact_match(r, h) != *want)
        .map(|(i, _)| i)
        .collect();
    Ok(Verdict::new(wrong.is_empty(), format!("20 labeled pairs, mislabeled by scorer: {wrong:?}")))
}

fn parse_round_trip() -> Result<Verdict> {
    let grammar = Grammar::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut round_trip_failures = 0;
    let mut accepted_mutants = 0;
    for i in 0..1000 {
        let (_, tree) = grammar.sample(i % 3 == 0, &mut rng)?;
        let s = serialize(&tree);
        match parse_annotation(&s) {
            Ok(t) if t == tree && serialize(&t) == s => {}
            _ => round_trip_failures += 1,
        }
        let brackets: Vec<usize> = s.char_indices().filter(|(_, c)| *c == '[' || *c == ']').map(|(i, _)| i).collect();
        let cut = brackets[rng.gen_range(0..brackets.len())];
        let mutant = format!("{}{}", &s[..cut], &s[cut + 1..]);
        if parse_annotation(&mutant).is_ok() {
            accepted_mutants += 1;
        }
    }
    Ok(Verdict::new(
        round_trip_failures == 0 && accepted_mutants == 0,
        format!("1000 trees: {round_trip_failures} round-trip failures; 1000 bracket-deletion mutants: {accepted_mutants} accepted"),
    ))
}

/// Desk config on a clean (error-free) corpus.
fn clean_config(modality: Modality) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.wer = 0.0;
    c.model.modality = modality;
    c
}

fn frozen_contract() -> Result<Verdict> {
    let config = clean_config(Modality::Fusion);
    let ds = experiment::generate(&config)?;
    let vocab = experiment::build_vocabulary(&config, &ds.train)?;
    let stub = experiment::make_stub(&config, &vocab);
    let before = stub.param_bytes();
    let outcome = experiment::train_run(&config, &vocab, &stub, &ds.train, &ds.valid, 0, |_| {})?;
    let after = stub.param_bytes();
    let stub_names: BTreeSet<&str> = stub
        .text
        .params()
        .ids()
        .map(|id| stub.text.params().name(id))
        .chain(stub.audio.params().ids().map(|id| stub.audio.params().name(id)))
        .collect();
    let state: BTreeSet<&str> = outcome.optimizer.state_names().collect();
    let model_names: BTreeSet<&str> = outcome.model.params().ids().map(|id| outcome.model.params().name(id)).collect();
    let leaked = state.intersection(&stub_names).count();
    let foreign = state.difference(&model_names).count();
    Ok(Verdict::new(
        before == after && leaked == 0 && foreign == 0 && !state.is_empty(),
        format!(
            "fusion desk run, {} epochs: stub bytes {} ({} bytes), optimizer tracks {} tensors, {leaked} of them stub tensors, {foreign} outside the model",
            outcome.epochs.len(),
            if before == after { "unchanged" } else { "CHANGED" },
            before.len(),
            state.len()
        ),
    ))
}

fn union_counting() -> Result<Verdict> {
    let config = RunConfig::default();
    let ds = experiment::generate(&config)?;
    let n = ds.train.len();
    let e = ds.train.iter().filter(|r| r.ref_text != r.hyp_text).count();
    let flagged = ds.train.iter().filter(|r| r.has_asr_error).count();
    let pairs = build_pairs(&ds.train, Strategy::Union);
    let hyp_pairs = pairs.iter().filter(|p| p.use_hypothesis).count();
    Ok(Verdict::new(
        pairs.len() == n + e && flagged == e && hyp_pairs == e,
        format!("N={n}, E={e}: {} union pairs", pairs.len()),
    ))
}

fn desk_learnability() -> Result<Verdict> {
    let started = Instant::now();
    let config = clean_config(Modality::TextOnly);
    let ds = experiment::generate(&config)?;
    let vocab = experiment::build_vocabulary(&config, &ds.train)?;
    let stub = experiment::make_stub(&config, &vocab);
    let params = param_count(&experiment::resolved_model_config(&config, &vocab)?)?;
    let outcome = experiment::train_run(&config, &vocab, &stub, &ds.train, &ds.valid, 0, |_| {})?;
    let (report, _) = evaluate(&outcome.model, &vocab, &stub, &ds.test)?;
    let secs = started.elapsed().as_secs_f64();
    let em = report.em_overall();
    Ok(Verdict::new(
        params < 200_000 && em >= 0.90 && secs < 600.0,
        format!(
            "text-only, {params} params, {} train utterances: test EM {em:.4} (n={}), {secs:.0}s",
            ds.train.len(),
            report.overall.n
        ),
    ))
}

fn matrix_directions(report: &MatrixReport, secs: f64) -> Result<Verdict> {
    let t = AsrTier::Tier1;
    let nat = FeatureChannel::Natural;
    let get = |m: Modality, s: Option<Strategy>| report.find(t, m, s, nat).context("missing matrix cell");
    let mut checks = Vec::new();
    for m in [Modality::Fusion, Modality::TextOnly] {
        let u = get(m, Some(Strategy::Union))?.em_overall;
        let r = get(m, Some(Strategy::Ref))?.em_overall;
        let h = get(m, Some(Strategy::Hyp))?.em_overall;
        checks.push((format!("{} union {u:.4} >= ref {r:.4}", m.name()), u >= r));
        checks.push((format!("{} union {u:.4} >= hyp {h:.4}", m.name()), u >= h));
    }
    let fusion = get(Modality::Fusion, Some(Strategy::Union))?;
    let text = get(Modality::TextOnly, Some(Strategy::Union))?;
    let audio = get(Modality::AudioOnly, None)?;
    checks.push((
        format!("error bucket fusion {:.4} > text-only {:.4}", fusion.em_error, text.em_error),
        fusion.em_error > text.em_error,
    ));
    checks.push((
        format!("error bucket audio-only {:.4} > text-only {:.4}", audio.em_error, text.em_error),
        audio.em_error > text.em_error,
    ));
    checks.push((
        format!("no-error bucket text-only {:.4} > audio-only {:.4}", text.em_no_error, audio.em_no_error),
        text.em_no_error > audio.em_no_error,
    ));
    checks.push((format!("runtime {secs:.0}s < 7200s"), secs < 7200.0));
    let pass = checks.iter().all(|(_, ok)| *ok);
    let detail = checks
        .iter()
        .map(|(s, ok)| format!("{}{s}", if *ok { "" } else { "NOT " }))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(Verdict::new(pass, format!("seed means, tier 1: {detail}")))
}

fn mismatch_degradation(report: &MatrixReport) -> Result<Verdict> {
    let t = AsrTier::Tier1;
    let drop = |m: Modality, s: Option<Strategy>| -> Result<(f64, f64)> {
        let nat = report.find(t, m, s, FeatureChannel::Natural).context("missing natural cell")?;
        let mis = report.find(t, m, s, FeatureChannel::Mismatched).context("missing mismatched cell")?;
        Ok((nat.em_overall - mis.em_overall, mis.em_overall))
    };
    let (audio, audio_mis) = drop(Modality::AudioOnly, None)?;
    let (fusion, fusion_mis) = drop(Modality::Fusion, Some(Strategy::Union))?;
    Ok(Verdict::new(
        audio > fusion,
        format!(
            "EM drop from mismatched training: audio-only {:+.4} (to {audio_mis:.4}) vs fusion {:+.4} (to {fusion_mis:.4})",
            -audio, -fusion
        ),
    ))
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_delib"))
        .current_dir(dir)
        .args(args)
        .output()
        .context("spawning delib")?;
    ensure!(
        out.status.success(),
        "delib {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

/// Files of `dir` that must be reproducible, with their contents.
fn reproducible_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == "timing.log" || name == "runtime.json" {
            continue;
        }
        out.push((name, fs::read(entry.path())?));
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Result<Verdict> {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path();
    let mut compared = 0;
    let mut differing = Vec::new();
    let mut compare = |stage: &str| -> Result<()> {
        let a = reproducible_files(&root.join(format!("a/{stage}")))?;
        let b = reproducible_files(&root.join(format!("b/{stage}")))?;
        ensure!(!a.is_empty(), "{stage} wrote nothing");
        compared += a.len();
        if a != b {
            differing.push(stage.to_string());
        }
        Ok(())
    };
    run_cli(root, &["--preset", "toy", "--seed", "5", "--out", "a/data", "datagen"])?;
    run_cli(root, &["--config", "a/data/config.toml", "--out", "b/data", "datagen"])?;
    compare("data")?;
    run_cli(root, &["--config", "a/data/config.toml", "--out", "a/vocab", "build-vocab", "--data", "a/data"])?;
    run_cli(root, &["--config", "a/vocab/config.toml", "--out", "b/vocab", "build-vocab"])?;
    compare("vocab")?;
    let train = [
        "--config", "a/vocab/config.toml", "--jobs", "1", "--out", "a/train", "train",
        "--vocab", "a/vocab/vocab.txt", "--modality", "fusion", "--strategy", "union", "--epochs", "3",
    ];
    run_cli(root, &train)?;
    run_cli(root, &["--config", "a/train/config.toml", "--jobs", "1", "--out", "b/train", "train"])?;
    compare("train")?;
    run_cli(root, &["--config", "a/train/config.toml", "--out", "a/eval", "eval", "--checkpoint", "a/train/model.ckpt"])?;
    run_cli(root, &["--config", "a/eval/config.toml", "--out", "b/eval", "eval"])?;
    compare("eval")?;
    Ok(Verdict::new(
        differing.is_empty(),
        format!("datagen/build-vocab/train/eval rerun from saved configs: {compared} files compared, differing stages {differing:?}"),
    ))
}

fn main() {
    // Numeric arguments select criteria; everything else (harness flags) is ignored.
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut matrix: Option<(MatrixReport, f64)> = None;
    let mut run_matrix = || -> Result<()> {
        let mut config = RunConfig::default();
        config.matrix.tiers = vec![TierSpec {
            tier: AsrTier::Tier1,
            wer: 0.20,
        }];
        config.matrix.seeds = 3;
        let tmp = tempfile::tempdir()?;
        let started = Instant::now();
        let report = experiment::run_matrix(&config, tmp.path(), 1, &|line| eprintln!("  matrix: {line}"))?;
        let secs = started.elapsed().as_secs_f64();
        eprint!("{}", report.to_text());
        matrix = Some((report, secs));
        Ok(())
    };
    let matrix_error = if wanted(10) || wanted(11) {
        run_matrix().err().map(|e| format!("{e:#}"))
    } else {
        None
    };
    let from_matrix = |f: &dyn Fn(&MatrixReport, f64) -> Result<Verdict>| -> Result<Verdict> {
        match (&matrix, &matrix_error) {
            (Some((r, secs)), _) => f(r, *secs),
            (None, e) => anyhow::bail!("matrix did not run: {}", e.as_deref().unwrap_or("unknown")),
        }
    };

    let criteria: Vec<(&str, Box<dyn FnOnce() -> Result<Verdict> + '_>)> = vec![
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("output mixture algebra", Box::new(mixture_algebra)),
        ("copy scatter oracle", Box::new(scatter_oracle)),
        ("layer oracles", Box::new(layer_oracles)),
        ("exact-match golden suite", Box::new(golden_suite)),
        ("parse round trip", Box::new(parse_round_trip)),
        ("frozen recognizer contract", Box::new(frozen_contract)),
        ("union pair counting", Box::new(union_counting)),
        ("desk learnability", Box::new(desk_learnability)),
        ("matrix directions", Box::new(|| from_matrix(&matrix_directions))),
        ("mismatched-channel degradation", Box::new(|| from_matrix(&|r, _| mismatch_degradation(r)))),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        if !wanted(i + 1) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let verdict = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => Verdict::new(false, format!("error: {e:#}")),
            Err(_) => Verdict::new(false, "panicked"),
        };
        failed += !verdict.pass as usize;
        println!(
            "{} {:>2} {name}: {} [{:.1}s]",
            if verdict.pass { "PASS" } else { "FAIL" },
            i + 1,
            verdict.detail,
            started.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
