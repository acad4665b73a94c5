//! Run configuration and the end-to-end workflows built on it: dataset
//! generation, vocabulary building, training, evaluation and the
//! modality × strategy × channel matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::asr::{AsrError, AsrStub, AsrTier};
use crate::corpus::{read_jsonl, write_jsonl, CorpusError, UtteranceRecord};
use crate::datagen::{derive_seed, generate_dataset, DatagenConfig, DatagenError, Dataset, FeatureChannel};
use crate::eval::{evaluate, EvalError, EvalReport};
use crate::model::{DeliberationModel, Modality, ModelConfig, ModelError, Sources, LABEL_SMOOTHING};
use crate::parse;
use crate::tensor::{gradcheck, GradcheckReport, ParamStore, TensorError};
use crate::tokenizer::{build_vocab, TokenizerError, Vocabulary, BOS, EOS};
use crate::training::{train, EpochMetrics, LrSchedule, Strategy, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config {path}: {msg}")]
    Config { path: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint metadata is missing `{0}`")]
    Metadata(String),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Asr(#[from] AsrError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(io_err(path))
}

pub fn create_dir(path: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    /// Target number of text pieces, characters included.
    pub text_pieces: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsrConfig {
    pub tier: AsrTier,
}

/// Inputs and per-command choices that are not hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    /// Dataset directory written by `datagen`.
    pub data: Option<PathBuf>,
    /// Vocabulary file written by `build-vocab`.
    pub vocab: Option<PathBuf>,
    /// Checkpoint written by `train`.
    pub checkpoint: Option<PathBuf>,
    /// Split scored by `eval`.
    pub split: String,
    /// Feature channel of the training and validation audio.
    pub channel: FeatureChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierSpec {
    pub tier: AsrTier,
    /// Word error rate of the first-pass channel paired with this tier.
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    /// Training seeds per cell.
    pub seeds: usize,
    pub tiers: Vec<TierSpec>,
    pub modalities: Vec<Modality>,
    pub strategies: Vec<Strategy>,
    /// Modalities additionally trained on the mismatched channel.
    pub mismatched: Vec<Modality>,
    pub mismatched_strategy: Strategy,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            seeds: 3,
            tiers: vec![
                TierSpec {
                    tier: AsrTier::Tier1,
                    wer: 0.20,
                },
                TierSpec {
                    tier: AsrTier::Tier2,
                    wer: 0.35,
                },
            ],
            modalities: Modality::ALL.to_vec(),
            strategies: Strategy::ALL.to_vec(),
            mismatched: vec![Modality::Fusion, Modality::AudioOnly],
            mismatched_strategy: Strategy::Union,
        }
    }
}

/// Everything needed to reproduce a run. Every random stream is derived
/// from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatagenConfig,
    pub vocab: VocabConfig,
    pub asr: AsrConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub io: IoConfig,
    pub matrix: MatrixConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DatagenConfig::default(),
            vocab: VocabConfig { text_pieces: 700 },
            asr: AsrConfig { tier: AsrTier::Tier1 },
            model: ModelConfig::desk(Modality::Fusion, 0),
            train: TrainConfig {
                learning_rate: 2e-3,
                lr_schedule: LrSchedule::Linear,
                batch_size: 16,
                epochs: 20,
                ..TrainConfig::default()
            },
            io: IoConfig {
                data: None,
                vocab: None,
                checkpoint: None,
                split: "test".into(),
                channel: FeatureChannel::Natural,
            },
            matrix: MatrixConfig::default(),
        }
    }
}

impl RunConfig {
    /// Named starting points: `desk` (the default), `toy` for smoke runs
    /// and `paper-scale` for the published layer sizes.
    pub fn preset(name: &str) -> Option<Self> {
        let mut c = Self::default();
        match name {
            "desk" => {}
            "toy" => {
                c.model = ModelConfig::toy(c.model.modality, 0);
                c.data.train = 120;
                c.data.valid = 30;
                c.data.test = 30;
                c.vocab.text_pieces = 200;
                c.train.epochs = 2;
                c.train.batch_size = 16;
                c.matrix.seeds = 1;
            }
            "paper-scale" => c.model = ModelConfig::paper_scale(c.model.modality, 0),
            _ => return None,
        }
        Some(c)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|msg| ExperimentError::Config {
            path: path.display().to_string(),
            msg,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ExperimentError> {
        write_file(path, self.to_toml())
    }

    /// Hex digest of the serialized config.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    fn data_dir(&self) -> Result<&Path, ExperimentError> {
        self.io
            .data
            .as_deref()
            .ok_or_else(|| ExperimentError::Invalid("no dataset directory given (io.data / --data)".into()))
    }

    fn vocab_path(&self) -> Result<&Path, ExperimentError> {
        self.io
            .vocab
            .as_deref()
            .ok_or_else(|| ExperimentError::Invalid("no vocabulary given (io.vocab / --vocab)".into()))
    }

    fn checkpoint_path(&self) -> Result<&Path, ExperimentError> {
        self.io
            .checkpoint
            .as_deref()
            .ok_or_else(|| ExperimentError::Invalid("no checkpoint given (io.checkpoint / --checkpoint)".into()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn dataset_seed(root: u64) -> u64 {
    derive_seed(root, 1)
}

pub fn stub_seed(root: u64, tier: AsrTier) -> u64 {
    derive_seed(derive_seed(root, 2), tier as u64)
}

/// Seed of the `index`-th training run; the `train` command uses index 0.
pub fn train_seed(root: u64, index: usize) -> u64 {
    derive_seed(root, 1000 + index as u64)
}

pub const SPLIT_FILES: [(&str, &str); 5] = [
    ("train", "train.jsonl"),
    ("valid", "valid.jsonl"),
    ("test", "test.jsonl"),
    ("train.mismatched", "train.mismatched.jsonl"),
    ("valid.mismatched", "valid.mismatched.jsonl"),
];

pub fn generate(config: &RunConfig) -> Result<Dataset, ExperimentError> {
    let grammar = config.data.load_grammar()?;
    Ok(generate_dataset(&grammar, &config.data, dataset_seed(config.seed))?)
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), ExperimentError> {
    create_dir(dir)?;
    let parts: [&[UtteranceRecord]; 5] = [&ds.train, &ds.valid, &ds.test, &ds.train_mismatched, &ds.valid_mismatched];
    for ((_, file), records) in SPLIT_FILES.iter().zip(parts) {
        write_jsonl(&dir.join(file), records)?;
    }
    Ok(())
}

pub fn read_split(dir: &Path, split: &str) -> Result<Vec<UtteranceRecord>, ExperimentError> {
    let file = SPLIT_FILES
        .iter()
        .find(|(name, _)| *name == split)
        .map(|(_, f)| *f)
        .ok_or_else(|| ExperimentError::Invalid(format!("unknown split `{split}`")))?;
    let path = dir.join(file);
    if !path.exists() {
        return Err(ExperimentError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        });
    }
    Ok(read_jsonl(&path)?)
}

/// Builds the vocabulary from training references. Ontology tokens are
/// those of the grammar plus any found in the training annotations.
pub fn build_vocabulary(config: &RunConfig, train: &[UtteranceRecord]) -> Result<Vocabulary, ExperimentError> {
    let grammar = config.data.load_grammar()?;
    let mut ontology: BTreeSet<String> = grammar.ontology().into_iter().collect();
    for r in train {
        for tok in parse::lex(&r.annotation) {
            if tok.starts_with('[') || tok == parse::CLOSE {
                ontology.insert(tok);
            }
        }
    }
    let texts: Vec<&str> = train.iter().map(|r| r.ref_text.as_str()).collect();
    let ontology: Vec<String> = ontology.into_iter().collect();
    Ok(build_vocab(&texts, config.vocab.text_pieces, &ontology)?)
}

pub fn make_stub(config: &RunConfig, vocab: &Vocabulary) -> AsrStub {
    AsrStub::new(
        config.asr.tier,
        vocab.len(),
        config.data.audio.feature_dim,
        config.model.dim,
        stub_seed(config.seed, config.asr.tier),
    )
}

/// The model config with the vocabulary size filled in.
pub fn resolved_model_config(config: &RunConfig, vocab: &Vocabulary) -> Result<ModelConfig, ExperimentError> {
    let mut mc = config.model.clone();
    if mc.vocab_size != 0 && mc.vocab_size != vocab.len() {
        return Err(ExperimentError::Invalid(format!(
            "model.vocab_size is {} but the vocabulary has {} entries",
            mc.vocab_size,
            vocab.len()
        )));
    }
    mc.vocab_size = vocab.len();
    Ok(mc)
}

/// Trains one model. Inputs are chosen by `config.io.channel`.
pub fn train_run(
    config: &RunConfig,
    vocab: &Vocabulary,
    stub: &AsrStub,
    ds_train: &[UtteranceRecord],
    ds_valid: &[UtteranceRecord],
    seed_index: usize,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, ExperimentError> {
    let mc = resolved_model_config(config, vocab)?;
    let seed = train_seed(config.seed, seed_index);
    let model = DeliberationModel::new(mc, derive_seed(seed, 1))?;
    let tc = TrainConfig {
        seed,
        ..config.train.clone()
    };
    Ok(train(model, vocab, stub, ds_train, ds_valid, &tc, on_epoch)?)
}

pub fn metrics_log(epochs: &[EpochMetrics]) -> String {
    epochs.iter().map(|m| m.log_line() + "\n").collect()
}

pub fn timing_log(epochs: &[EpochMetrics]) -> String {
    epochs
        .iter()
        .map(|m| format!("epoch={} wall_secs={:.3}\n", m.epoch, m.wall_secs))
        .collect()
}

pub fn checkpoint_metadata(config: &RunConfig, vocab: &Vocabulary, model: &DeliberationModel) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("model_config".into(), serde_json::to_string(model.config()).expect("config serializes"));
    m.insert("vocab_digest".into(), vocab.digest());
    m.insert("asr_tier".into(), config.asr.tier.name().into());
    m.insert("asr_seed".into(), stub_seed(config.seed, config.asr.tier).to_string());
    m.insert("feature_dim".into(), config.data.audio.feature_dim.to_string());
    m
}

pub fn save_checkpoint(
    path: &Path,
    model: &DeliberationModel,
    metadata: &BTreeMap<String, String>,
) -> Result<(), ExperimentError> {
    let mut bytes = Vec::new();
    model.params().write_checkpoint(&mut bytes, metadata)?;
    write_file(path, bytes)
}

/// A checkpoint with everything needed to run it.
pub struct LoadedCheckpoint {
    pub model: DeliberationModel,
    pub stub: AsrStub,
    pub metadata: BTreeMap<String, String>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, ExperimentError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (store, metadata) = ParamStore::read_checkpoint(bytes.as_slice())?;
    let get = |k: &str| metadata.get(k).ok_or_else(|| ExperimentError::Metadata(k.into()));
    let config: ModelConfig =
        serde_json::from_str(get("model_config")?).map_err(|e| ExperimentError::Metadata(format!("model_config: {e}")))?;
    let tier: AsrTier = serde_json::from_value(serde_json::Value::String(get("asr_tier")?.clone()))
        .map_err(|e| ExperimentError::Metadata(format!("asr_tier: {e}")))?;
    let parse_num = |k: &str| -> Result<u64, ExperimentError> {
        get(k)?.parse().map_err(|_| ExperimentError::Metadata(k.into()))
    };
    let stub = AsrStub::new(
        tier,
        config.vocab_size,
        parse_num("feature_dim")? as usize,
        config.dim,
        parse_num("asr_seed")?,
    );
    let mut model = DeliberationModel::new(config, 0)?;
    model.params_mut().load_values_from(&store)?;
    Ok(LoadedCheckpoint { model, stub, metadata })
}

/// Files written by the `train` workflow.
pub fn train_to_dir(config: &RunConfig, out: &Path) -> Result<TrainOutcome, ExperimentError> {
    let data = config.data_dir()?;
    let vocab = Vocabulary::load(config.vocab_path()?)?;
    let stub = make_stub(config, &vocab);
    let (train_split, valid_split) = match config.io.channel {
        FeatureChannel::Natural => ("train", "valid"),
        FeatureChannel::Mismatched => ("train.mismatched", "valid.mismatched"),
    };
    let ds_train = read_split(data, train_split)?;
    let ds_valid = read_split(data, valid_split)?;
    let mut resolved = config.clone();
    resolved.model = resolved_model_config(config, &vocab)?;
    create_dir(out)?;
    resolved.save(&out.join("config.toml"))?;
    let outcome = train_run(&resolved, &vocab, &stub, &ds_train, &ds_valid, 0, |_| {})?;
    save_checkpoint(
        &out.join("model.ckpt"),
        &outcome.model,
        &checkpoint_metadata(&resolved, &vocab, &outcome.model),
    )?;
    write_file(&out.join("metrics.log"), metrics_log(&outcome.epochs))?;
    write_file(&out.join("timing.log"), timing_log(&outcome.epochs))?;
    Ok(outcome)
}

/// Scores a checkpoint on `config.io.split`; writes the report, one
/// prediction per line, and runtime metadata separately.
pub fn eval_to_dir(config: &RunConfig, out: &Path) -> Result<EvalReport, ExperimentError> {
    let started = std::time::Instant::now();
    let data = config.data_dir()?;
    let vocab = Vocabulary::load(config.vocab_path()?)?;
    let ckpt = load_checkpoint(config.checkpoint_path()?)?;
    let digest = ckpt
        .metadata
        .get("vocab_digest")
        .ok_or_else(|| ExperimentError::Metadata("vocab_digest".into()))?;
    crate::eval::check_vocab(digest, &vocab)?;
    let records = read_split(data, &config.io.split)?;
    let (report, predictions) = evaluate(&ckpt.model, &vocab, &ckpt.stub, &records)?;
    create_dir(out)?;
    config.save(&out.join("config.toml"))?;
    write_file(
        &out.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    write_file(&out.join("predictions.anno"), predictions.iter().map(|p| format!("{p}\n")).collect::<String>())?;
    write_file(
        &out.join("runtime.json"),
        format!("{{\"wall_secs\": {:.3}}}\n", started.elapsed().as_secs_f64()),
    )?;
    Ok(report)
}

/// Gradient check of the full training loss for a randomly initialised
/// model on one random utterance (3 hypothesis tokens, 5 audio frames).
pub fn gradcheck_loss(config: &ModelConfig, seed: u64) -> Result<GradcheckReport, ExperimentError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut random = |rows: usize, cols: usize| {
        crate::tensor::Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .expect("shape is consistent")
    };
    let text = random(3, config.dim);
    let audio = random(5, config.dim);
    let v = config.vocab_size;
    if v < 8 {
        return Err(ExperimentError::Invalid("gradcheck needs at least 8 output units".into()));
    }
    let hyp = vec![5, v - 1, 5];
    let target = vec![BOS, 6, 5, v - 1, 7, EOS];
    let mut model = DeliberationModel::new(config.clone(), derive_seed(seed, 1))?;
    let frozen = model.clone();
    let report = gradcheck(
        model.params_mut(),
        |g| {
            let src = Sources {
                text: &text,
                audio: &audio,
                hyp: &hyp,
            };
            frozen
                .loss_sum(g, src, &target, LABEL_SMOOTHING)
                .map(|(l, _)| l)
                .map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => TensorError::Checkpoint(other.to_string()),
                })
        },
        1e-5,
        None,
    )?;
    Ok(report)
}

/// One matrix cell: a modality trained with a text strategy on one
/// feature channel, always evaluated on natural test features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub tier: AsrTier,
    pub modality: Modality,
    /// `None` for modalities that never read the input text.
    pub strategy: Option<Strategy>,
    pub channel: FeatureChannel,
}

impl Cell {
    pub fn strategy_name(&self) -> &'static str {
        self.strategy.map_or("none", Strategy::name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub cell: Cell,
    pub seed: usize,
    pub result: Result<EvalReport, String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMean {
    pub em_overall: f64,
    pub em_no_error: f64,
    pub em_error: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
}

pub fn matrix_cells(m: &MatrixConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for t in &m.tiers {
        for &modality in &m.modalities {
            let strategies: Vec<Option<Strategy>> = if modality.uses_text() {
                m.strategies.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            for strategy in strategies {
                cells.push(Cell {
                    tier: t.tier,
                    modality,
                    strategy,
                    channel: FeatureChannel::Natural,
                });
            }
        }
        for &modality in &m.mismatched {
            cells.push(Cell {
                tier: t.tier,
                modality,
                strategy: modality.uses_text().then_some(m.mismatched_strategy),
                channel: FeatureChannel::Mismatched,
            });
        }
    }
    cells
}

/// The run config of one cell within one tier.
pub fn cell_config(base: &RunConfig, cell: &Cell, wer: f64) -> RunConfig {
    let mut c = base.clone();
    c.asr.tier = cell.tier;
    c.data.wer = wer;
    c.model.modality = cell.modality;
    c.train.strategy = cell.strategy.unwrap_or(Strategy::Ref);
    c.io.channel = cell.channel;
    c.io.data = None;
    c.io.vocab = None;
    c.io.checkpoint = None;
    c
}

fn cell_key(config: &RunConfig, seed: usize) -> String {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update(config.to_toml().as_bytes());
    h.update(seed.to_le_bytes());
    hex(&h.finalize())[..16].to_string()
}

struct TierData {
    dataset: Dataset,
    vocab: Vocabulary,
}

/// Trains and evaluates every cell and seed. Finished cells are cached
/// under `out/cells/<key>/` and reused. A failing cell is recorded in its
/// row and the rest of the matrix still runs.
pub fn run_matrix(
    config: &RunConfig,
    out: &Path,
    jobs: usize,
    log: &(dyn Fn(&str) + Sync),
) -> Result<MatrixReport, ExperimentError> {
    create_dir(out)?;
    config.save(&out.join("config.toml"))?;
    let cells = matrix_cells(&config.matrix);
    let mut tiers: BTreeMap<AsrTier, TierData> = BTreeMap::new();
    for t in &config.matrix.tiers {
        let mut c = config.clone();
        c.asr.tier = t.tier;
        c.data.wer = t.wer;
        let dataset = generate(&c)?;
        let vocab = build_vocabulary(&c, &dataset.train)?;
        tiers.insert(t.tier, TierData { dataset, vocab });
    }
    let wer_of = |tier: AsrTier| config.matrix.tiers.iter().find(|t| t.tier == tier).map_or(0.0, |t| t.wer);

    let work: Vec<(Cell, usize)> = cells
        .iter()
        .flat_map(|&c| (0..config.matrix.seeds).map(move |s| (c, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<EvalReport, String>>>> = Mutex::new(vec![None; work.len()]);
    let next = AtomicUsize::new(0);
    let run_one = |cell: &Cell, seed: usize| -> Result<EvalReport, ExperimentError> {
        let c = cell_config(config, cell, wer_of(cell.tier));
        let dir = out.join("cells").join(cell_key(&c, seed));
        let report_path = dir.join("eval.json");
        if let Ok(text) = fs::read_to_string(&report_path) {
            if let Ok(report) = serde_json::from_str(&text) {
                return Ok(report);
            }
        }
        let td = &tiers[&cell.tier];
        let stub = make_stub(&c, &td.vocab);
        let (tr, va) = match cell.channel {
            FeatureChannel::Natural => (&td.dataset.train, &td.dataset.valid),
            FeatureChannel::Mismatched => (&td.dataset.train_mismatched, &td.dataset.valid_mismatched),
        };
        let outcome = train_run(&c, &td.vocab, &stub, tr, va, seed, |_| {})?;
        let (report, predictions) = evaluate(&outcome.model, &td.vocab, &stub, &td.dataset.test)?;
        create_dir(&dir)?;
        let mut resolved = c.clone();
        resolved.model = outcome.model.config().clone();
        resolved.save(&dir.join("config.toml"))?;
        save_checkpoint(
            &dir.join("model.ckpt"),
            &outcome.model,
            &checkpoint_metadata(&resolved, &td.vocab, &outcome.model),
        )?;
        write_file(&dir.join("metrics.log"), metrics_log(&outcome.epochs))?;
        write_file(&dir.join("timing.log"), timing_log(&outcome.epochs))?;
        write_file(&dir.join("predictions.anno"), predictions.iter().map(|p| format!("{p}\n")).collect::<String>())?;
        write_file(&report_path, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
        Ok(report)
    };
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((cell, seed)) = work.get(i) else { break };
        let started = std::time::Instant::now();
        let result = run_one(cell, *seed).map_err(|e| e.to_string());
        log(&format!(
            "{} {} {} {} seed={} -> {} ({:.0}s)",
            cell.tier.name(),
            cell.modality.name(),
            cell.strategy_name(),
            cell.channel.name(),
            seed,
            match &result {
                Ok(r) => format!("em={:.4}", r.em_overall()),
                Err(e) => format!("error: {e}"),
            },
            started.elapsed().as_secs_f64()
        ));
        results.lock().expect("results lock")[i] = Some(result);
    };
    std::thread::scope(|s| {
        for _ in 1..jobs.max(1) {
            s.spawn(worker);
        }
        worker();
    });
    let rows = work
        .into_iter()
        .zip(results.into_inner().expect("results lock"))
        .map(|((cell, seed), result)| MatrixRow {
            cell,
            seed,
            result: result.expect("every cell ran"),
        })
        .collect();
    let report = MatrixReport { rows };
    write_file(&out.join("report.csv"), report.to_csv())?;
    write_file(&out.join("report.txt"), report.to_text())?;
    Ok(report)
}

/// Directional reference values for the comparison table.
pub const ANCHORS: &str = "\
reference anchors (EM %, 145k-hour recognizer, natural speech):
  fusion + union 73.87 vs text-only + union 73.22
  audio-only on the error bucket 38.10 vs pipeline 24.49
  training on synthetic speech: fusion -1.91 / -1.56, audio-only -2.89 / -5.32
";

impl MatrixReport {
    pub fn cells(&self) -> Vec<Cell> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.cell) {
                seen.push(r.cell);
            }
        }
        seen
    }

    /// Seed mean of a cell over the seeds that succeeded.
    pub fn mean(&self, cell: &Cell) -> Option<CellMean> {
        let ok: Vec<&EvalReport> = self
            .rows
            .iter()
            .filter(|r| r.cell == *cell)
            .filter_map(|r| r.result.as_ref().ok())
            .collect();
        if ok.is_empty() {
            return None;
        }
        let n = ok.len() as f64;
        Some(CellMean {
            em_overall: ok.iter().map(|r| r.overall.em()).sum::<f64>() / n,
            em_no_error: ok.iter().map(|r| r.no_error.em()).sum::<f64>() / n,
            em_error: ok.iter().map(|r| r.error.em()).sum::<f64>() / n,
            seeds: ok.len(),
        })
    }

    pub fn find(&self, tier: AsrTier, modality: Modality, strategy: Option<Strategy>, channel: FeatureChannel) -> Option<CellMean> {
        self.mean(&Cell {
            tier,
            modality,
            strategy,
            channel,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tier,modality,strategy,channel,seed,em_overall,em_no_error,em_error,n_no_error,n_error\n");
        for r in &self.rows {
            let c = &r.cell;
            let _ = write!(out, "{},{},{},{},{},", c.tier.name(), c.modality.name(), c.strategy_name(), c.channel.name(), r.seed);
            match &r.result {
                Ok(e) => {
                    let _ = writeln!(
                        out,
                        "{:.4},{:.4},{:.4},{},{}",
                        e.overall.em(),
                        e.no_error.em(),
                        e.error.em(),
                        e.no_error.n,
                        e.error.n
                    );
                }
                Err(_) => out.push_str("NA,NA,NA,NA,NA\n"),
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<6} {:<11} {:<6} {:<11} {:>8} {:>9} {:>8}  per-seed EM",
            "tier", "modality", "text", "train feat", "EM", "no-error", "error"
        );
        for cell in self.cells() {
            let per_seed: Vec<String> = self
                .rows
                .iter()
                .filter(|r| r.cell == cell)
                .map(|r| match &r.result {
                    Ok(e) => format!("{:.2}", 100.0 * e.overall.em()),
                    Err(_) => "err".into(),
                })
                .collect();
            let (em, ne, er) = match self.mean(&cell) {
                Some(m) => (
                    format!("{:.2}", 100.0 * m.em_overall),
                    format!("{:.2}", 100.0 * m.em_no_error),
                    format!("{:.2}", 100.0 * m.em_error),
                ),
                None => ("-".into(), "-".into(), "-".into()),
            };
            let _ = writeln!(
                out,
                "{:<6} {:<11} {:<6} {:<11} {:>8} {:>9} {:>8}  {}",
                cell.tier.name(),
                cell.modality.name(),
                cell.strategy_name(),
                cell.channel.name(),
                em,
                ne,
                er,
                per_seed.join(" ")
            );
        }
        let mismatched: Vec<Cell> = self
            .cells()
            .into_iter()
            .filter(|c| c.channel == FeatureChannel::Mismatched)
            .collect();
        if !mismatched.is_empty() {
            out.push_str("\nEM change from training on mismatched features (test on natural):\n");
            for m in mismatched {
                let natural = Cell {
                    channel: FeatureChannel::Natural,
                    ..m
                };
                if let (Some(a), Some(b)) = (self.mean(&natural), self.mean(&m)) {
                    let _ = writeln!(
                        out,
                        "  {} {} {}: {:+.2}",
                        m.tier.name(),
                        m.modality.name(),
                        m.strategy_name(),
                        100.0 * (b.em_overall - a.em_overall)
                    );
                }
            }
        }
        out.push('\n');
        out.push_str(ANCHORS);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_toml_round_trip() {
        for name in ["desk", "toy", "paper-scale"] {
            let c = RunConfig::preset(name).unwrap();
            let text = c.to_toml();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), c, "{text}");
        }
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
    }

    #[test]
    fn default_matrix_shape() {
        let m = MatrixConfig {
            mismatched: Vec::new(),
            ..MatrixConfig::default()
        };
        // Text-reading modalities get every strategy; audio-only gets one.
        assert_eq!(matrix_cells(&m).len(), 2 * (3 + 3 + 1));
        let full = MatrixConfig {
            modalities: vec![Modality::Fusion, Modality::TextOnly],
            ..m
        };
        assert_eq!(matrix_cells(&full).len(), 12);
    }
}
