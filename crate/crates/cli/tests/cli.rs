use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mpl_core::data_synth::io::read_dataset;
use mpl_core::model::{greedy_decode, DecoderScorer, Forward};
use mpl_core::numeric::Tape;
use mpl_core::storage::load_checkpoint;
use mpl_core::training::{encode_all, evaluate, multimodal_memory};

const TINY: &str = r#"
source_products = 60
attention_top_k = 3

[corpus]
n_products = 100
seed = 5

[model]
d = 16
n_heads = 2
n_enc_layers = 1
n_dec_layers = 1
ffn_width = 32
n_prompts = 2
max_title_len = 12

[train]
fewshot = 0.1
max_epochs = 2
patience = 1
val_cap = 6
test_beam = 2

[train.optimizer]
lr = 0.003

[pretrain]
max_epochs = 1
val_cap = 4
fewshot = 1.0

[ablation]
seeds = [0]
"#;

fn mpl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mpl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

impl Fixture {
    /// A tiny dataset plus a config pointing at it.
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        let config = root.join("run.toml");
        fs::write(
            &config,
            format!("data_dir = {:?}\n{extra}{TINY}", data.display().to_string()),
        )
        .unwrap();
        let config = config.display().to_string();
        ok(&["gen-data", "--config", &config]);
        Fixture {
            _dir: dir,
            root,
            config,
        }
    }

    fn path(&self, p: &str) -> String {
        self.root.join(p).display().to_string()
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p).unwrap()
}

fn json(p: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_slice(&read(p)).unwrap()
}

#[test]
fn gen_data_writes_splits_and_manifest_deterministically() {
    let f = Fixture::new("");
    let data = f.root.join("data");
    for name in [
        "train.jsonl",
        "validation.jsonl",
        "test.jsonl",
        "manifest.json",
    ] {
        assert!(data.join(name).is_file(), "{name}");
    }
    let m = json(data.join("manifest.json"));
    assert_eq!(m["counts"]["train"], 70);
    assert_eq!(m["counts"]["validation"], 20);
    assert_eq!(m["counts"]["test"], 10);
    assert_eq!(m["config"]["corpus"]["seed"], 5);

    let again = f.path("again");
    ok(&["gen-data", "--config", &f.config, "--out", &again]);
    for name in [
        "train.jsonl",
        "validation.jsonl",
        "test.jsonl",
        "vocab.json",
    ] {
        assert_eq!(
            read(data.join(name)),
            read(Path::new(&again).join(name)),
            "{name}"
        );
    }
}

#[test]
fn gen_data_ratio_override_shows_in_manifest() {
    let f = Fixture::new("");
    let cfg = f.path("ratios.toml");
    let base = fs::read_to_string(&f.config).unwrap();
    fs::write(&cfg, format!("{base}\n[split]\nratios = [0.5, 0.3, 0.2]\n")).unwrap();
    let out = f.path("ratio_data");
    ok(&["gen-data", "--config", &cfg, "--out", &out]);
    let m = json(Path::new(&out).join("manifest.json"));
    assert_eq!(m["counts"]["train"], 50);
    assert_eq!(m["counts"]["validation"], 30);
    assert_eq!(m["counts"]["test"], 20);
    assert_eq!(
        read_dataset(&Path::new(&out).join("test.jsonl"))
            .unwrap()
            .len(),
        20
    );
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "data_dir = \"/nonexistent/mpl-data\"\n").unwrap();
    let cfg = cfg.display().to_string();
    let out = dir.path().join("o").display().to_string();
    assert_eq!(
        mpl(&["train", "--config", &cfg, "--out", &out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(mpl(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        mpl(&["eval", "--config", &cfg, "--out", &out])
            .status
            .code(),
        Some(2)
    );

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nepochs = 3\n").unwrap();
    let bad = bad.display().to_string();
    assert_eq!(
        mpl(&["gen-data", "--config", &bad, "--out", &out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        mpl(&[
            "ablate",
            "--config",
            &cfg,
            "--settings",
            "base,e",
            "--out",
            &out
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn two_phase_path_matches_full_pipeline() {
    let f = Fixture::new("");
    let (full, upt, mpt) = (f.path("full"), f.path("upt"), f.path("mpt"));
    ok(&[
        "train", "--config", &f.config, "--phase", "mpl", "--out", &full,
    ]);
    ok(&[
        "train", "--config", &f.config, "--phase", "upt", "--out", &upt,
    ]);
    let upt_ck = format!("{upt}/model.ckpt");
    ok(&[
        "train", "--config", &f.config, "--phase", "mpt", "--init", &upt_ck, "--out", &mpt,
    ]);

    let a = load_checkpoint(Path::new(&format!("{full}/model.ckpt"))).unwrap();
    let b = load_checkpoint(Path::new(&format!("{mpt}/model.ckpt"))).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.optimizer, b.optimizer);
    assert_eq!(a.best_val_cider.to_bits(), b.best_val_cider.to_bits());
    let (ra, rb) = (
        json(format!("{full}/report.json")),
        json(format!("{mpt}/report.json")),
    );
    assert_eq!(ra["test"]["titles"], rb["test"]["titles"]);
    assert_eq!(ra["config"]["train"]["fewshot"], 0.1);
}

#[test]
fn fewshot_defaults_to_one_percent() {
    let cfg = mpl_cli::RunConfig::from_toml("").unwrap();
    assert_eq!(cfg.train.fewshot, 0.01);
}

#[test]
fn eval_beam_one_is_greedy_and_lists_titles() {
    let f = Fixture::new("");
    let run = f.path("run");
    ok(&["train", "--config", &f.config, "--out", &run]);
    let ck_path = format!("{run}/model.ckpt");
    let ev = f.path("ev");
    ok(&[
        "eval", "--config", &f.config, "--init", &ck_path, "--beam", "1", "--out", &ev,
    ]);

    let ck = load_checkpoint(Path::new(&ck_path)).unwrap();
    let test = read_dataset(&f.root.join("data/test.jsonl")).unwrap();
    let examples = encode_all(&test, &ck.vocab, &ck.model_config).unwrap();
    let mut greedy = String::new();
    for ex in &examples {
        let memory = {
            let mut tape = Tape::inference();
            let mut fwd = Forward::eval(&ck.state.params, &ck.model_config);
            let m = multimodal_memory(&mut tape, &mut fwd, &ck.state.bank, ck.setting, ex).unwrap();
            tape.tensor(m)
        };
        let mut scorer = DecoderScorer::new(&ck.state.params, &ck.model_config, &memory).unwrap();
        let hyp = greedy_decode(&mut scorer, ck.model_config.max_title_len).unwrap();
        greedy.push_str(&ck.vocab.decode(&hyp.tokens));
        greedy.push('\n');
    }
    assert_eq!(
        fs::read_to_string(format!("{ev}/generated.txt")).unwrap(),
        greedy
    );

    let report = json(format!("{ev}/eval.json"));
    let titles = report["evaluation"]["titles"].as_array().unwrap();
    assert_eq!(titles.len(), test.len());
    assert!(titles[0]["generated"].is_string() && titles[0]["reference"].is_string());
    assert_eq!(report["evaluation"]["beam"], 1);
    assert_eq!(
        report["config"]["data_dir"],
        f.root.join("data").display().to_string()
    );
}

#[test]
fn eval_tsv_self_match_hits_maxima() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("self.tsv");
    fs::write(
        &tsv,
        "red ceramic mug large\tred ceramic mug large\n\
         blue steel kettle by acme\tblue steel kettle by acme\n\
         oak lamp small\toak lamp small\n",
    )
    .unwrap();
    let out = dir.path().join("o").display().to_string();
    ok(&["eval", "--tsv", &tsv.display().to_string(), "--out", &out]);
    let r = json(format!("{out}/eval.json"));
    assert!((r["scores"]["bleu4"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    assert!((r["scores"]["rouge_l"].as_f64().unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn best_checkpoint_reevaluates_to_recorded_cider() {
    let f = Fixture::new("");
    let run = f.path("run");
    ok(&["train", "--config", &f.config, "--out", &run]);
    let ck = load_checkpoint(&Path::new(&run).join("model.ckpt")).unwrap();
    let report = json(format!("{run}/report.json"));
    let cap = report["mpt"]["val_examples"].as_u64().unwrap() as usize;
    let val = read_dataset(&f.root.join("data/validation.jsonl")).unwrap();
    let ex = encode_all(&val[..cap], &ck.vocab, &ck.model_config).unwrap();
    let beam = report["mpt"]["val_beam"].as_u64().unwrap() as usize;
    let again = evaluate(
        &ex,
        &ck.state,
        &ck.model_config,
        ck.setting,
        beam,
        &ck.vocab,
    )
    .unwrap();
    assert!((again.scores.cider - ck.best_val_cider).abs() < 1e-9);
}

#[test]
fn repeated_training_is_bit_identical() {
    let f = Fixture::new("");
    let (a, b) = (f.path("a"), f.path("b"));
    ok(&["train", "--config", &f.config, "--seed", "3", "--out", &a]);
    ok(&["train", "--config", &f.config, "--seed", "3", "--out", &b]);
    assert_eq!(
        read(format!("{a}/model.ckpt")),
        read(format!("{b}/model.ckpt"))
    );
    let trace = |d: &str| {
        let r: mpl_cli::TrainReport =
            serde_json::from_slice(&read(format!("{d}/report.json"))).unwrap();
        r.loss_trace()
            .iter()
            .map(|x| x.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(trace(&a), trace(&b));
}

#[test]
fn pretrain_then_few_shot_from_checkpoint() {
    let f = Fixture::new("");
    let (pre, run) = (f.path("pre"), f.path("run"));
    ok(&[
        "train", "--config", &f.config, "--phase", "pretrain", "--out", &pre,
    ]);
    let ck = load_checkpoint(&Path::new(&pre).join("model.ckpt")).unwrap();
    assert_eq!(ck.phase, "pretrain");
    let init = format!("{pre}/model.ckpt");
    ok(&[
        "train",
        "--config",
        &f.config,
        "--settings",
        "c",
        "--init",
        &init,
        "--out",
        &run,
    ]);
    let r = json(format!("{run}/report.json"));
    assert_eq!(r["setting"], "c");
    assert!(r["upt"].is_object());
}

#[test]
fn ablate_reports_rows_and_ordering_flag() {
    let f = Fixture::new("");
    let out = f.path("ab");
    let res = mpl(&[
        "ablate",
        "--config",
        &f.config,
        "--settings",
        "base,mpl",
        "--out",
        &out,
        "--require-ordering",
    ]);
    let r = json(format!("{out}/ablation.json"));
    let rows = r["report"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["setting"], "base");
    assert_eq!(rows[1]["setting"], "mpl");
    let c = |i: usize| rows[i]["median"]["cider"].as_f64().unwrap();
    assert_eq!(res.status.success(), c(1) > c(0));
    if !res.status.success() {
        assert_eq!(res.status.code(), Some(1));
    }
    let table = fs::read_to_string(format!("{out}/table.txt")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(r["config"]["ablation"]["require_ordering"]
        .as_bool()
        .unwrap());
}

#[test]
fn ablate_all_settings_three_metrics() {
    let f = Fixture::new("");
    let out = f.path("ab");
    ok(&["ablate", "--config", &f.config, "--out", &out]);
    let r = json(format!("{out}/ablation.json"));
    let rows = r["report"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    for row in rows {
        for m in ["bleu4", "rouge_l", "cider"] {
            assert!(row["median"][m].as_f64().unwrap().is_finite());
        }
    }
    assert_eq!(r["report"]["pretrain"].as_array().unwrap().len(), 1);
}

#[test]
fn attention_dump_is_nine_stochastic_matrices() {
    let f = Fixture::new("");
    let run = f.path("run");
    ok(&["train", "--config", &f.config, "--out", &run]);
    let out = f.path("att");
    let ck = format!("{run}/model.ckpt");
    ok(&[
        "dump-attention",
        "--config",
        &f.config,
        "--init",
        &ck,
        "--out",
        &out,
    ]);
    let d = json(format!("{out}/attention.json"));
    let blocks = d["blocks"].as_array().unwrap();
    assert_eq!(blocks.len(), 9);
    assert_eq!(blocks[1]["label"], "I->A");
    for b in blocks {
        let w = b["weights"].as_array().unwrap();
        assert_eq!(w.len(), 2);
        for (row, top) in w.iter().zip(b["top"].as_array().unwrap()) {
            let s: f64 = row
                .as_array()
                .unwrap()
                .iter()
                .map(|x| x.as_f64().unwrap())
                .sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert_eq!(top.as_array().unwrap().len(), 2);
        }
    }
    assert_eq!(d["top_k"], 3);
    assert!(d["config"]["run"].is_object());
}
