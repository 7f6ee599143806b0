//! Batch driver: dataset generation, training, evaluation, ablation and
//! attention dumps, all configured from one TOML file.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mpl_core::cycle_align::{cycle_align, write_attention_dump};
use mpl_core::data_synth::io::{read_dataset, write_dataset};
use mpl_core::data_synth::{
    build_vocab, generate_corpus, split, ProductRecord, Splits, Vocabulary,
};
use mpl_core::metrics::{read_tsv, score_all, Scores};
use mpl_core::model::ModelConfig;
use mpl_core::numeric::AdamW;
use mpl_core::storage::{load_checkpoint, save_checkpoint, write_atomic, write_json, Checkpoint};
use mpl_core::training::{
    ablate, encode_all, evaluate, fewshot_subset, pretrain, run_mpl, run_mpt, run_upt,
    AblationConfig, AblationReport, AblationRun, Evaluation, ModelState, PhaseReport, Setting,
};

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad configuration or missing inputs.
    Usage(String),
    Runtime(mpl_core::Error),
    /// A requested self-check did not hold.
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) | CliError::Check(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<mpl_core::Error> for CliError {
    fn from(e: mpl_core::Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "mpl",
    version,
    about = "Multimodal prompt learning for product titles"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (gen-data: the dataset directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseArg {
    Upt,
    Mpt,
    Mpl,
    /// Source-domain pretraining of the plain encoder-decoder.
    Pretrain,
}

impl PhaseArg {
    fn tag(self) -> &'static str {
        match self {
            PhaseArg::Upt => "upt",
            PhaseArg::Mpt => "mpt",
            PhaseArg::Mpl => "mpl",
            PhaseArg::Pretrain => "pretrain",
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpora, splits and vocabulary.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one setting and write a checkpoint plus a report.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "mpl")]
        phase: PhaseArg,
        #[arg(long)]
        fewshot: Option<f64>,
        #[arg(long)]
        beam: Option<usize>,
        /// Setting to train (exactly one).
        #[arg(long, value_delimiter = ',')]
        settings: Option<Vec<String>>,
        /// Checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Generate and score titles for the test split, or score a TSV file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        beam: Option<usize>,
        /// Checkpoint to evaluate.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Score `candidate<TAB>ref1 ||| ref2` lines instead of generating.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Run the ablation ladder over seeds and report median scores.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        settings: Option<Vec<String>>,
        #[arg(long)]
        fewshot: Option<f64>,
        #[arg(long)]
        beam: Option<usize>,
        /// Exit nonzero unless MPL beats Base on median test CIDEr.
        #[arg(long)]
        require_ordering: bool,
    },
    /// Write the nine cycle-alignment weight matrices of a checkpoint.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenData { common } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.corpus.seed = s;
            }
            if let Some(out) = common.out {
                cfg.data_dir = out;
            }
            cfg.validate()?;
            let m = gen_data(&cfg)?;
            println!(
                "wrote {} (train {}, validation {}, test {}, vocabulary {})",
                cfg.data_dir.display(),
                m.counts.train,
                m.counts.validation,
                m.counts.test,
                m.vocab_size
            );
            Ok(())
        }
        Command::Train {
            common,
            phase,
            fewshot,
            beam,
            settings,
            init,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
                cfg.pretrain.seed = s;
            }
            if let Some(f) = fewshot {
                cfg.train.fewshot = f;
            }
            if let Some(b) = beam {
                cfg.train.test_beam = b;
            }
            if let Some(list) = settings {
                match parse_settings(&list)?.as_slice() {
                    [one] => cfg.train.setting = *one,
                    _ => return Err(CliError::Usage("train takes exactly one setting".into())),
                }
            }
            cfg.validate()?;
            let out = out_dir(common.out)?;
            let report = train(&cfg, phase, init.as_deref(), &out)?;
            if let Some(t) = &report.test {
                println!("{}", format_scores(&t.scores));
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval {
            common,
            beam,
            init,
            tsv,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(b) = beam {
                cfg.train.test_beam = b;
            }
            cfg.validate()?;
            let out = out_dir(common.out)?;
            let scores = match (tsv, init) {
                (Some(path), _) => eval_tsv(&cfg, &path, &out)?,
                (None, Some(ck)) => eval_checkpoint(&cfg, &ck, &out)?.scores,
                (None, None) => {
                    return Err(CliError::Usage(
                        "eval needs --init CKPT or --tsv FILE".into(),
                    ))
                }
            };
            println!("{}", format_scores(&scores));
            Ok(())
        }
        Command::Ablate {
            common,
            settings,
            fewshot,
            beam,
            require_ordering,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.ablation.seeds = vec![s];
            }
            if let Some(list) = settings {
                cfg.ablation.settings = parse_settings(&list)?;
            }
            if let Some(f) = fewshot {
                cfg.train.fewshot = f;
            }
            if let Some(b) = beam {
                cfg.train.test_beam = b;
            }
            cfg.ablation.require_ordering |= require_ordering;
            cfg.validate()?;
            let out = out_dir(common.out)?;
            run_ablation(&cfg, &out)
        }
        Command::DumpAttention { common, init } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            cfg.validate()?;
            let init =
                init.ok_or_else(|| CliError::Usage("dump-attention needs --init CKPT".into()))?;
            let out = out_dir(common.out)?;
            let path = dump_attention(&cfg, &init, &out)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn parse_settings(list: &[String]) -> CliResult<Vec<Setting>> {
    list.iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.parse()
                .map_err(|e: mpl_core::Error| CliError::Usage(e.to_string()))
        })
        .collect()
}

fn out_dir(out: Option<PathBuf>) -> CliResult<PathBuf> {
    let out = out.unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn format_scores(s: &Scores) -> String {
    format!(
        "BLEU-4 {:.2}  ROUGE-L {:.2}  CIDEr {:.4}",
        s.bleu4, s.rouge_l, s.cider
    )
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const SOURCE_DIR: &str = "source";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    fn of(s: &Splits) -> Self {
        SplitCounts {
            train: s.train.len(),
            validation: s.validation.len(),
            test: s.test.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: RunConfig,
    pub counts: SplitCounts,
    pub source_counts: Option<SplitCounts>,
    pub vocab_size: usize,
    pub image_seq_len: usize,
    pub image_feature_dim: usize,
}

/// Splits on disk plus what is needed to size a model for them.
pub struct Dataset {
    pub novel: Splits,
    pub source: Option<Splits>,
    pub vocab: Vocabulary,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn model_config(&self, cfg: &RunConfig) -> ModelConfig {
        cfg.model.resolve(
            self.vocab.len(),
            self.manifest.image_seq_len,
            self.manifest.image_feature_dim,
        )
    }
}

fn write_splits(dir: &Path, s: &Splits) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    write_dataset(&dir.join(TRAIN_FILE), &s.train)?;
    write_dataset(&dir.join(VALIDATION_FILE), &s.validation)?;
    write_dataset(&dir.join(TEST_FILE), &s.test)?;
    Ok(())
}

fn read_splits(dir: &Path) -> CliResult<Splits> {
    let read = |name: &str| -> CliResult<Vec<ProductRecord>> {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(CliError::Usage(format!(
                "missing dataset file {} (run gen-data first)",
                path.display()
            )));
        }
        Ok(read_dataset(&path)?)
    };
    Ok(Splits {
        train: read(TRAIN_FILE)?,
        validation: read(VALIDATION_FILE)?,
        test: read(TEST_FILE)?,
    })
}

/// Writes the novel splits, the optional source splits, the vocabulary over
/// both, and a manifest echoing `cfg`.
pub fn gen_data(cfg: &RunConfig) -> CliResult<Manifest> {
    let novel = generate_corpus(&cfg.corpus)?;
    let novel_splits = split(&novel, cfg.split.ratios, cfg.split.seed)?;
    let mut all = novel;
    let source_splits = match cfg.source_spec() {
        Some(spec) => {
            let src = generate_corpus(&spec)?;
            let s = split(&src, cfg.split.ratios, cfg.split.seed.wrapping_add(1))?;
            all.extend(src);
            Some(s)
        }
        None => None,
    };
    let vocab = build_vocab(&all);
    let dir = &cfg.data_dir;
    write_splits(dir, &novel_splits)?;
    if let Some(s) = &source_splits {
        write_splits(&dir.join(SOURCE_DIR), s)?;
    }
    write_json(&dir.join(VOCAB_FILE), &vocab.tokens())?;
    let manifest = Manifest {
        format: "mpl-dataset".into(),
        config: cfg.clone(),
        counts: SplitCounts::of(&novel_splits),
        source_counts: source_splits.as_ref().map(SplitCounts::of),
        vocab_size: vocab.len(),
        image_seq_len: cfg.corpus.image_seq_len,
        image_feature_dim: cfg.corpus.image_feature_dim,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(CliError::Usage(format!(
            "no dataset at {} (run gen-data first)",
            dir.display()
        )));
    }
    let manifest: Manifest = mpl_core::storage::read_json(&manifest_path)?;
    let tokens: Vec<String> = mpl_core::storage::read_json(&dir.join(VOCAB_FILE))?;
    let source = match manifest.source_counts {
        Some(_) => Some(read_splits(&dir.join(SOURCE_DIR))?),
        None => None,
    };
    Ok(Dataset {
        novel: read_splits(dir)?,
        source,
        vocab: Vocabulary::from_tokens(tokens),
        manifest,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: RunConfig,
    pub phase: PhaseArg,
    pub setting: Setting,
    pub init: Option<PathBuf>,
    pub fewshot_size: Option<usize>,
    pub pretrain: Option<PhaseReport>,
    pub upt: Option<PhaseReport>,
    pub mpt: Option<PhaseReport>,
    pub test: Option<Evaluation>,
}

impl TrainReport {
    /// Per-epoch training losses of every phase that ran, in order.
    pub fn loss_trace(&self) -> Vec<f64> {
        [&self.pretrain, &self.upt, &self.mpt]
            .into_iter()
            .flatten()
            .flat_map(|p| p.loss_trace())
            .collect()
    }
}

fn initial_state(init: Option<&Path>, model: &ModelConfig, seed: u64) -> CliResult<ModelState> {
    match init {
        Some(path) => {
            let ck = read_checkpoint(path)?;
            if &ck.model_config != model {
                return Err(CliError::Usage(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            Ok(ck.state)
        }
        None => Ok(ModelState::init(model, seed)?),
    }
}

fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "no checkpoint at {}",
            path.display()
        )));
    }
    Ok(load_checkpoint(path)?)
}

/// Runs one phase (or the whole pipeline) and writes `model.ckpt` and `report.json`.
pub fn train(
    cfg: &RunConfig,
    phase: PhaseArg,
    init: Option<&Path>,
    out: &Path,
) -> CliResult<TrainReport> {
    let data = load_dataset(&cfg.data_dir)?;
    let model = data.model_config(cfg);
    let tc = &cfg.train;
    let state = initial_state(init, &model, tc.seed)?;
    let mut report = TrainReport {
        config: cfg.clone(),
        phase,
        setting: tc.setting,
        init: init.map(Path::to_path_buf),
        fewshot_size: None,
        pretrain: None,
        upt: None,
        mpt: None,
        test: None,
    };
    let few = || -> CliResult<_> {
        let records = fewshot_subset(&data.novel.train, tc)?;
        Ok(encode_all(&records, &data.vocab, &model)?)
    };
    let val = encode_all(&data.novel.validation, &data.vocab, &model)?;
    let test = encode_all(&data.novel.test, &data.vocab, &model)?;
    let (state, opt, best): (ModelState, Option<AdamW>, f64) = match phase {
        PhaseArg::Pretrain => {
            let src = data.source.as_ref().ok_or_else(|| {
                CliError::Usage("the dataset has no source corpus (source_products = 0)".into())
            })?;
            let (s, r) = pretrain(&cfg.pretrain, &model, state, src, &data.vocab)?;
            let best = r.best_val_cider;
            report.setting = Setting::Base;
            report.pretrain = Some(r);
            (s, None, best)
        }
        PhaseArg::Upt => {
            if tc.setting.prompt_modalities().is_empty() {
                return Err(CliError::Usage(format!(
                    "setting {} has no unimodal phase",
                    tc.setting
                )));
            }
            let few = few()?;
            report.fewshot_size = Some(few.len());
            let (s, r, o) = run_upt(tc, &model, state, &few, &val, &data.vocab)?;
            let best = r.best_val_cider;
            report.upt = Some(r);
            (s, Some(o), best)
        }
        PhaseArg::Mpt => {
            let few = few()?;
            report.fewshot_size = Some(few.len());
            let (s, r, o) = run_mpt(tc, &model, state, &few, &val, &data.vocab)?;
            let best = r.best_val_cider;
            report.mpt = Some(r);
            report.test = Some(evaluate(
                &test,
                &s,
                &model,
                tc.setting,
                tc.test_beam,
                &data.vocab,
            )?);
            (s, Some(o), best)
        }
        PhaseArg::Mpl => {
            let (s, r, o) = run_mpl(tc, &model, state, &data.novel, &data.vocab)?;
            let best = r.mpt.best_val_cider;
            report.fewshot_size = Some(r.fewshot_size);
            report.upt = r.upt;
            report.mpt = Some(r.mpt);
            report.test = Some(r.test);
            (s, Some(o), best)
        }
    };
    let ck = Checkpoint {
        model_config: model,
        state,
        optimizer: opt,
        phase: phase.tag().into(),
        setting: report.setting,
        seed: tc.seed,
        best_val_cider: best,
        vocab: data.vocab.clone(),
        run_config: serde_json::to_value(cfg).map_err(mpl_core::Error::from)?,
    };
    save_checkpoint(&out.join(CHECKPOINT_FILE), &ck)?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Serialize)]
struct EvalReport<'a> {
    config: &'a RunConfig,
    checkpoint: &'a Path,
    setting: Setting,
    evaluation: &'a Evaluation,
}

/// Generates titles for the test split with the checkpoint's setting.
/// Writes `eval.json` and `generated.txt` (one title per line).
pub fn eval_checkpoint(cfg: &RunConfig, ckpt: &Path, out: &Path) -> CliResult<Evaluation> {
    let ck = read_checkpoint(ckpt)?;
    let data = load_dataset(&cfg.data_dir)?;
    let test = encode_all(&data.novel.test, &ck.vocab, &ck.model_config)?;
    let ev = evaluate(
        &test,
        &ck.state,
        &ck.model_config,
        ck.setting,
        cfg.train.test_beam,
        &ck.vocab,
    )?;
    write_json(
        &out.join("eval.json"),
        &EvalReport {
            config: cfg,
            checkpoint: ckpt,
            setting: ck.setting,
            evaluation: &ev,
        },
    )?;
    let lines: String = ev
        .titles
        .iter()
        .map(|t| format!("{}\n", t.generated))
        .collect();
    write_atomic(&out.join("generated.txt"), lines.as_bytes())?;
    Ok(ev)
}

#[derive(Serialize)]
struct TsvReport<'a> {
    config: &'a RunConfig,
    input: &'a Path,
    entries: usize,
    scores: Scores,
}

pub fn eval_tsv(cfg: &RunConfig, path: &Path, out: &Path) -> CliResult<Scores> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("no file at {}", path.display())));
    }
    let corpus = read_tsv(path)?;
    let scores = score_all(&corpus)?;
    write_json(
        &out.join("eval.json"),
        &TsvReport {
            config: cfg,
            input: path,
            entries: corpus.len(),
            scores,
        },
    )?;
    Ok(scores)
}

#[derive(Serialize)]
struct AblationFile<'a> {
    config: &'a RunConfig,
    full_ordering: Option<bool>,
    language_prompt_dominance: Option<bool>,
    report: &'a AblationReport,
}

/// Runs the ablation ladder; writes `ablation.json` and `table.txt`.
pub fn run_ablation(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let data = load_dataset(&cfg.data_dir)?;
    let model = data.model_config(cfg);
    let ab = AblationConfig {
        seeds: cfg.ablation.seeds.clone(),
        settings: cfg.ablation.settings.clone(),
        train: cfg.train.clone(),
        pretrain: data.source.is_some().then(|| cfg.pretrain.clone()),
    };
    let report = ablate(
        &ab,
        &model,
        &data.novel,
        data.source.as_ref(),
        &data.vocab,
        progress,
    )?;
    let table = report.table();
    print!("{table}");
    let ordering = report.full_ordering();
    let dominance = report.language_prompt_dominance();
    write_atomic(&out.join("table.txt"), table.as_bytes())?;
    write_json(
        &out.join("ablation.json"),
        &AblationFile {
            config: cfg,
            full_ordering: ordering,
            language_prompt_dominance: dominance,
            report: &report,
        },
    )?;
    if cfg.ablation.require_ordering {
        let cider = |s| report.row(s).map(|r| r.median.cider);
        match (cider(Setting::Mpl), cider(Setting::Base)) {
            (Some(m), Some(b)) if m > b => {}
            (Some(m), Some(b)) => {
                return Err(CliError::Check(format!(
                    "MPL median CIDEr {m:.4} does not exceed Base {b:.4}"
                )))
            }
            _ => {
                return Err(CliError::Check(
                    "ordering check needs both the base and mpl settings".into(),
                ))
            }
        }
    }
    Ok(())
}

fn progress(r: &AblationRun) {
    eprintln!(
        "{:>4} seed {:<3} CIDEr {:7.4}  BLEU-4 {:6.2}  ROUGE-L {:6.2}  {:.1}s",
        r.setting.tag(),
        r.seed,
        r.test.cider,
        r.test.bleu4,
        r.test.rouge_l,
        r.seconds
    );
}

#[derive(Serialize)]
struct AttentionConfig<'a> {
    run: &'a RunConfig,
    checkpoint: &'a Path,
    checkpoint_config: &'a serde_json::Value,
    align_scale: f64,
}

/// Writes `attention.json` for the checkpoint's prompt banks.
pub fn dump_attention(cfg: &RunConfig, ckpt: &Path, out: &Path) -> CliResult<PathBuf> {
    let ck = read_checkpoint(ckpt)?;
    let aligned = cycle_align(&ck.state.bank, ck.model_config.align_scale)?;
    let path = out.join("attention.json");
    write_attention_dump(
        &path,
        &aligned,
        cfg.attention_top_k,
        &AttentionConfig {
            run: cfg,
            checkpoint: ckpt,
            checkpoint_config: &ck.run_config,
            align_scale: ck.model_config.align_scale,
        },
    )?;
    Ok(path)
}
