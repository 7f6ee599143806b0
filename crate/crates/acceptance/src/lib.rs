//! Pass/fail checks of the pipeline's acceptance criteria, one per line.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use mpl_cli::config::RunConfig;
use mpl_cli::{gen_data, load_dataset, train, PhaseArg, CHECKPOINT_FILE};
use mpl_core::cycle_align::{cycle_align, cycle_align_vars, retrieve};
use mpl_core::data_synth::vocab::{BOS, EOS};
use mpl_core::data_synth::{build_vocab, generate_corpus, CorpusSpec, Domain};
use mpl_core::metrics::{bleu4_parts, cider, cider_per_entry, rouge_l, EvalEntry};
use mpl_core::model::{
    beam_search, generate, greedy_decode, length_normalized, DecoderScorer, Forward, ModelConfig,
    ModelParams, NextTokenScorer,
};
use mpl_core::numeric::{Tape, Tensor, Var};
use mpl_core::prompts::PromptBank;
use mpl_core::storage::{decode_checkpoint, encode_checkpoint, load_checkpoint};
use mpl_core::training::{
    ablate, encode_all, evaluate, mpt_loss, mpt_step, next_token_accuracy, upt_loss,
    AblationConfig, Example, ModelState, Setting, TrainConfig,
};

type Check = Result<(bool, String), Box<dyn std::error::Error>>;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;
/// Absolute scale below which gradient norms count as zero (see the FD tests).
pub const GRAD_FLOOR: f64 = 1e-6;
pub const METRIC_TOL: f64 = 1e-6;
pub const OVERFIT_ACCURACY: f64 = 0.95;
pub const OVERFIT_STEPS: usize = 500;
pub const STOCHASTIC_TOL: f64 = 1e-6;
pub const REEVAL_TOL: f64 = 1e-9;

const GOLDEN: &str = include_str!("../../core/tests/golden/metrics.json");

/// One criterion's verdict.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    /// Experimental criteria are reported but do not fail the run.
    pub experimental: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {} {}: {} ({:.1}s)",
            self.id,
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn outcome(
    id: usize,
    name: &'static str,
    experimental: bool,
    check: impl FnOnce() -> Check,
) -> Outcome {
    let t0 = Instant::now();
    let (pass, detail) = match check() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    Outcome {
        id,
        name,
        pass,
        experimental,
        detail,
        elapsed: t0.elapsed(),
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::normal(shape, 1.0, &mut rng).with_grad(true)
}

fn central_diff(x: &mut [f64], coords: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let keep = x[i];
            x[i] = keep + FD_STEP;
            let up = f(x);
            x[i] = keep - FD_STEP;
            let down = f(x);
            x[i] = keep;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(GRAD_FLOOR)
}

type Op = Box<dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Var>;

fn op_error(inputs: &[Tensor<f64>], f: &Op) -> f64 {
    let project = |tape: &mut Tape<'_, f64>, vars: &[Var]| -> Var {
        let out = f(tape, vars);
        let shape = tape.shape(out).to_vec();
        let w = random_tensor(&shape, 99);
        let c = tape.constant(&shape, w.data().to_vec());
        let p = tape.mul(out, c).unwrap();
        tape.sum(p)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = project(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).unwrap().to_vec();
        let mut x = t.data().to_vec();
        let coords: Vec<usize> = (0..x.len()).collect();
        let numeric = central_diff(&mut x, &coords, |x| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let mut t = t.clone();
                    if j == i {
                        t.data_mut().copy_from_slice(x);
                    }
                    tape.leaf(t)
                })
                .collect();
            let l = project(&mut tape, &vars);
            tape.scalar_value(l)
        });
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn operations() -> Vec<(&'static str, Vec<Tensor<f64>>, Op)> {
    let t = random_tensor;
    let inf = f64::NEG_INFINITY;
    vec![
        (
            "matmul",
            vec![t(&[3, 4], 1), t(&[4, 2], 2)],
            Box::new(|tp, v| tp.matmul(v[0], v[1]).unwrap()),
        ),
        (
            "matmul_nt",
            vec![t(&[3, 4], 3), t(&[5, 4], 4)],
            Box::new(|tp, v| tp.matmul_nt(v[0], v[1]).unwrap()),
        ),
        (
            "transpose",
            vec![t(&[3, 4], 5)],
            Box::new(|tp, v| tp.transpose(v[0]).unwrap()),
        ),
        (
            "add",
            vec![t(&[2, 3], 6), t(&[2, 3], 7)],
            Box::new(|tp, v| tp.add(v[0], v[1]).unwrap()),
        ),
        (
            "sub",
            vec![t(&[2, 3], 8), t(&[2, 3], 9)],
            Box::new(|tp, v| tp.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul",
            vec![t(&[2, 3], 10), t(&[2, 3], 11)],
            Box::new(|tp, v| tp.mul(v[0], v[1]).unwrap()),
        ),
        (
            "add_row",
            vec![t(&[3, 4], 12), t(&[1, 4], 13)],
            Box::new(|tp, v| tp.add_row(v[0], v[1]).unwrap()),
        ),
        (
            "scale",
            vec![t(&[2, 3], 14)],
            Box::new(|tp, v| tp.scale(v[0], -1.7)),
        ),
        (
            "add_const",
            vec![t(&[2, 3], 15)],
            Box::new(|tp, v| {
                tp.add_const(v[0], &[0.5, -1.0, 2.0, 0.0, 1.0, -3.0])
                    .unwrap()
            }),
        ),
        (
            "mul_const",
            vec![t(&[2, 3], 16)],
            Box::new(|tp, v| {
                tp.mul_const(v[0], vec![0.0, 1.25, 1.25, 0.0, 1.25, -2.0])
                    .unwrap()
            }),
        ),
        (
            "gelu",
            vec![t(&[3, 5], 17)],
            Box::new(|tp, v| tp.gelu(v[0])),
        ),
        (
            "softmax_rows",
            vec![t(&[3, 5], 18)],
            Box::new(|tp, v| tp.softmax_rows(v[0]).unwrap()),
        ),
        (
            "masked softmax",
            vec![t(&[2, 3], 19)],
            Box::new(move |tp, v| {
                let m = tp.add_const(v[0], &[0.0, inf, 0.0, 0.0, 0.0, inf]).unwrap();
                tp.softmax_rows(m).unwrap()
            }),
        ),
        (
            "layer_norm",
            vec![t(&[3, 6], 20), t(&[1, 6], 21), t(&[1, 6], 22)],
            Box::new(|tp, v| tp.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        ),
        (
            "embedding",
            vec![t(&[6, 4], 23)],
            Box::new(|tp, v| tp.embedding(v[0], &[1, 3, 3, 0, 5]).unwrap()),
        ),
        (
            "concat_rows",
            vec![t(&[2, 3], 24), t(&[1, 3], 25)],
            Box::new(|tp, v| tp.concat_rows(&[v[0], v[1], v[0]]).unwrap()),
        ),
        (
            "concat_cols",
            vec![t(&[2, 3], 26), t(&[2, 1], 27)],
            Box::new(|tp, v| tp.concat_cols(&[v[0], v[1]]).unwrap()),
        ),
        (
            "slice_rows",
            vec![t(&[4, 3], 28)],
            Box::new(|tp, v| tp.slice_rows(v[0], 1, 2).unwrap()),
        ),
        (
            "slice_cols",
            vec![t(&[3, 5], 29)],
            Box::new(|tp, v| tp.slice_cols(v[0], 2, 3).unwrap()),
        ),
        ("sum", vec![t(&[2, 3], 30)], Box::new(|tp, v| tp.sum(v[0]))),
        (
            "mean",
            vec![t(&[2, 3], 31)],
            Box::new(|tp, v| tp.mean(v[0])),
        ),
        (
            "cross_entropy",
            vec![t(&[4, 6], 32)],
            Box::new(|tp, v| tp.cross_entropy(v[0], &[2, 0, 5, 1], 0).unwrap()),
        ),
        (
            "retrieve",
            vec![t(&[3, 4], 33), t(&[3, 4], 34)],
            Box::new(|tp, v| retrieve(tp, v[0], v[1], 0.8).unwrap().0),
        ),
        (
            "cycle_align",
            vec![t(&[2, 4], 35), t(&[2, 4], 36), t(&[2, 4], 37)],
            Box::new(|tp, v| cycle_align_vars(tp, [v[0], v[1], v[2]], 1.0).unwrap().fused),
        ),
    ]
}

/// Two-layer, d = 16, two prompts per bank.
fn fd_model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d: 16,
        n_heads: 2,
        n_enc_layers: 2,
        n_dec_layers: 2,
        ffn_width: 32,
        vocab_size,
        max_title_len: 12,
        max_input_len: 16,
        image_feature_dim: 6,
        image_seq_len: 4,
        n_prompts: 2,
        dropout: 0.1,
        align_scale: 1.0,
    }
}

fn named_mut<'a>(state: &'a mut ModelState<f64>, name: &str) -> &'a mut Tensor<f64> {
    if let Some((_, t)) = state.params.iter_mut().find(|(n, _)| *n == name) {
        return t;
    }
    state
        .bank
        .iter_mut()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| t)
        .unwrap()
}

type LossFn<'a> = dyn Fn(&ModelState<f64>) -> (f64, Vec<(String, Vec<f64>)>) + 'a;

fn end_to_end_error(state: &ModelState<f64>, loss: &LossFn<'_>) -> f64 {
    let (_, grads) = loss(state);
    let mut worst = 0.0f64;
    for (k, (name, analytic)) in grads.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let mut coords =
            rand::seq::index::sample(&mut rng, analytic.len(), 6.min(analytic.len())).into_vec();
        coords.sort_unstable();
        let mut probe = state.clone();
        let mut x = named_mut(&mut probe, name).data().to_vec();
        let numeric = central_diff(&mut x, &coords, |x| {
            named_mut(&mut probe, name).data_mut().copy_from_slice(x);
            loss(&probe).0
        });
        let picked: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
        worst = worst.max(rel_err(&picked, &numeric));
    }
    worst
}

fn tape_loss(
    state: &ModelState<f64>,
    model: &ModelConfig,
    ex: &Example<f64>,
    multimodal: Option<Setting>,
) -> (f64, Vec<(String, Vec<f64>)>) {
    let mut tape = Tape::new();
    let mut fwd = Forward::train(&state.params, model, 17);
    let l = match multimodal {
        Some(s) => mpt_loss(&mut tape, &mut fwd, &state.bank, s, ex).unwrap(),
        None => {
            upt_loss(
                &mut tape,
                &mut fwd,
                &state.bank,
                Setting::Mpl,
                [1.0, 0.5, 0.25],
                ex,
            )
            .unwrap()
            .total
        }
    };
    let value = tape.scalar_value(l);
    let grads = tape.backward(l).unwrap();
    let names: Vec<String> = grads.names().map(str::to_string).collect();
    let named = names
        .into_iter()
        .filter_map(|n| grads.named(&n).map(|g| (n.clone(), g.to_vec())))
        .collect();
    (value, named)
}

pub fn gradient_correctness() -> Outcome {
    outcome(1, "gradient correctness", false, || {
        let t0 = Instant::now();
        let mut worst = (0.0f64, "");
        let ops = operations();
        for (name, inputs, f) in &ops {
            let e = op_error(inputs, f);
            if e > worst.0 {
                worst = (e, name);
            }
        }
        let records = generate_corpus(&CorpusSpec {
            n_products: 12,
            image_feature_dim: 6,
            image_seq_len: 4,
            domain: Domain::Novel,
            seed: 3,
            ..CorpusSpec::default()
        })?;
        let vocab = build_vocab(&records);
        let model = fd_model(vocab.len());
        let ex: Example<f64> = encode_all(&records, &vocab, &model)?[0].cast();
        let mut state: ModelState<f64> = ModelState::<f32>::init(&model, 5)?.cast();
        state.bank.set_trainable(true);
        let losses: [(&str, Option<Setting>); 3] = [
            ("upt", None),
            ("mpt (d)", Some(Setting::D)),
            ("mpt", Some(Setting::Mpl)),
        ];
        for (name, setting) in losses {
            let e = end_to_end_error(&state, &|s| tape_loss(s, &model, &ex, setting));
            if e > worst.0 {
                worst = (e, name);
            }
        }
        let secs = t0.elapsed().as_secs_f64();
        Ok((
            worst.0 < FD_TOL && secs < 60.0,
            format!(
                "{} ops + 3 losses, worst relative error {:.2e} ({}) < {FD_TOL:e}, {secs:.1}s < 60s",
                ops.len(),
                worst.0,
                worst.1
            ),
        ))
    })
}

fn golden_corpus(v: &Value) -> Vec<EvalEntry> {
    v["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| {
            let refs: Vec<&str> = e["references"]
                .as_array()
                .unwrap()
                .iter()
                .map(|r| r.as_str().unwrap())
                .collect();
            EvalEntry::from_text(e["candidate"].as_str().unwrap(), &refs)
        })
        .collect()
}

pub fn metric_oracles() -> Outcome {
    outcome(2, "metric oracles", false, || {
        let golden: Value = serde_json::from_str(GOLDEN)?;
        let mut worst = 0.0f64;
        let mut checked = 0;
        for g in golden.as_object().unwrap().values() {
            let corpus = golden_corpus(g);
            worst = worst
                .max((bleu4_parts(&corpus)?.score - g["bleu"]["score"].as_f64().unwrap()).abs());
            worst = worst.max((rouge_l(&corpus)? - g["rouge_l"].as_f64().unwrap()).abs());
            checked += 2;
            if let Some(c) = g.get("cider") {
                for (a, b) in cider_per_entry(&corpus)?
                    .iter()
                    .zip(c["per_entry"].as_array().unwrap())
                {
                    worst = worst.max((a - b.as_f64().unwrap()).abs());
                }
                worst = worst.max((cider(&corpus)? - c["score"].as_f64().unwrap()).abs());
                checked += 1;
            }
        }
        // Self-match on sentences with no shared n-grams, so every idf is positive.
        let same: Vec<EvalEntry> = [
            "red ceramic mug large edition",
            "teal oak lamp compact for home",
            "navy wool scarf slim premium",
        ]
        .iter()
        .map(|s| EvalEntry::from_text(s, &[s]))
        .collect();
        let (b, r, c) = (bleu4_parts(&same)?.score, rouge_l(&same)?, cider(&same)?);
        let self_ok = (b - 100.0).abs() < METRIC_TOL
            && (r - 100.0).abs() < METRIC_TOL
            && (c - 10.0).abs() < METRIC_TOL;
        Ok((
            worst < METRIC_TOL && self_ok,
            format!(
                "{checked} golden values, worst deviation {worst:.2e} < {METRIC_TOL:e}; self-match BLEU-4 {b:.6} ROUGE-L {r:.6} CIDEr {c:.6}"
            ),
        ))
    })
}

pub fn overfit() -> Outcome {
    outcome(3, "overfit check", false, || {
        let t0 = Instant::now();
        let spec = CorpusSpec {
            n_products: 32,
            domain: Domain::Novel,
            seed: 12,
            ..CorpusSpec::default()
        };
        let records = generate_corpus(&spec)?;
        let vocab = build_vocab(&records);
        let model = ModelConfig::desk(vocab.len(), spec.image_feature_dim, spec.image_seq_len);
        let examples = encode_all(&records, &vocab, &model)?;
        let config = TrainConfig::default();
        let mut state = ModelState::init(&model, 0)?;
        state.bank.set_trainable(false);
        let mut opt = mpl_core::numeric::AdamW::new(mpl_core::numeric::AdamWConfig {
            lr: 1e-3,
            ..Default::default()
        });
        let (mut acc, mut steps) = (0.0, 0);
        while steps < OVERFIT_STEPS {
            for (b, batch) in examples.chunks(8).enumerate() {
                mpt_step(
                    batch,
                    &mut state,
                    &mut opt,
                    &config,
                    &model,
                    (steps * 4 + b) as u64,
                )?;
                steps += 1;
            }
            if steps % 40 == 0 {
                acc = next_token_accuracy(&examples, &state, &model, Setting::Mpl)?;
                if acc >= OVERFIT_ACCURACY {
                    break;
                }
            }
        }
        let secs = t0.elapsed().as_secs_f64();
        Ok((
            acc >= OVERFIT_ACCURACY && steps <= OVERFIT_STEPS && secs < 300.0,
            format!(
                "d={} N_P={}: next-token accuracy {acc:.3} >= {OVERFIT_ACCURACY} after {steps} <= {OVERFIT_STEPS} steps, {secs:.1}s < 300s",
                model.d, model.n_prompts
            ),
        ))
    })
}

/// Median test CIDEr per setting on the desk benchmark, shared by the two
/// experimental criteria.
pub struct Benchmark {
    pub report: mpl_core::training::AblationReport,
    pub seconds: f64,
    pub fewshot: f64,
}

pub fn run_benchmark(config: &Path, work: &Path) -> Result<Benchmark, Box<dyn std::error::Error>> {
    let t0 = Instant::now();
    let mut cfg = RunConfig::load(Some(config)).map_err(|e| e.to_string())?;
    cfg.data_dir = work.join("data");
    cfg.validate().map_err(|e| e.to_string())?;
    gen_data(&cfg).map_err(|e| e.to_string())?;
    let data = load_dataset(&cfg.data_dir).map_err(|e| e.to_string())?;
    let model = data.model_config(&cfg);
    let ab = AblationConfig {
        seeds: cfg.ablation.seeds.clone(),
        settings: Setting::ALL.to_vec(),
        train: cfg.train.clone(),
        pretrain: data.source.is_some().then(|| cfg.pretrain.clone()),
    };
    let report = ablate(
        &ab,
        &model,
        &data.novel,
        data.source.as_ref(),
        &data.vocab,
        |r| {
            eprintln!(
                "  {:>4} seed {} CIDEr {:.4}",
                r.setting.tag(),
                r.seed,
                r.test.cider
            )
        },
    )?;
    Ok(Benchmark {
        report,
        seconds: t0.elapsed().as_secs_f64(),
        fewshot: cfg.train.fewshot,
    })
}

fn medians(b: &Benchmark) -> String {
    b.report
        .rows
        .iter()
        .map(|r| format!("{} {:.3}", r.setting.tag(), r.median.cider))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn few_shot_ordering(bench: &Result<Benchmark, String>) -> Outcome {
    outcome(4, "few-shot ordering", true, || {
        let b = bench.as_ref().map_err(|e| e.clone())?;
        let seeds = b.report.config.seeds.len();
        let ordered = b.report.full_ordering().unwrap_or(false);
        Ok((
            ordered && seeds >= 5 && b.fewshot == 0.01 && b.seconds < 1800.0,
            format!(
                "MPL > (d) > max(a,b,c) >= Base on median test CIDEr: {ordered} [{}]; fraction {}, {seeds} seeds, {:.0}s < 1800s",
                medians(b),
                b.fewshot,
                b.seconds
            ),
        ))
    })
}

pub fn language_prompt_dominance(bench: &Result<Benchmark, String>) -> Outcome {
    outcome(5, "language-prompt dominance", true, || {
        let b = bench.as_ref().map_err(|e| e.clone())?;
        let dominant = b.report.language_prompt_dominance().unwrap_or(false);
        let by_seed: Vec<String> = [Setting::A, Setting::B, Setting::C]
            .into_iter()
            .filter_map(|s| b.report.row(s))
            .map(|r| {
                let v: Vec<String> = r.cider_by_seed.iter().map(|c| format!("{c:.3}")).collect();
                format!("{} [{}]", r.setting.tag(), v.join(" "))
            })
            .collect();
        Ok((
            dominant && b.fewshot == 0.01,
            format!(
                "(c) >= (a), (b) on median CIDEr: {dominant}; seeds {:?}, CIDEr by seed {}",
                b.report.config.seeds,
                by_seed.join("; ")
            ),
        ))
    })
}

/// Three generable tokens (`eos`, `a`, `b`) with prefix-dependent probabilities.
struct Toy;

const TOY_A: usize = 4;
const TOY_B: usize = 5;

impl NextTokenScorer for Toy {
    fn vocab_size(&self) -> usize {
        6
    }

    fn log_probs(&mut self, prefix: &[usize]) -> mpl_core::Result<Vec<f64>> {
        let (eos, a, b) = match &prefix[1..] {
            [] => (0.05, 0.55, 0.40),
            [TOY_A] => (0.10, 0.45, 0.45),
            [TOY_B] => (0.85, 0.10, 0.05),
            [TOY_A, TOY_A] => (0.30, 0.40, 0.30),
            [TOY_A, TOY_B] => (0.50, 0.25, 0.25),
            [TOY_B, TOY_A] => (0.60, 0.20, 0.20),
            _ => (0.34, 0.33, 0.33),
        };
        let mut p = vec![f64::NEG_INFINITY; 6];
        p[EOS] = f64::ln(eos);
        p[TOY_A] = f64::ln(a);
        p[TOY_B] = f64::ln(b);
        Ok(p)
    }
}

fn toy_argmax(max_len: usize) -> Vec<usize> {
    let score = |seq: &[usize]| {
        let mut lp = 0.0;
        for i in 0..seq.len() {
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(&seq[..i]);
            lp += Toy.log_probs(&prefix).unwrap()[seq[i]];
        }
        length_normalized(lp, seq.len())
    };
    let mut bodies: Vec<Vec<usize>> = vec![Vec::new()];
    let mut all = Vec::new();
    for len in 0..=max_len {
        for b in &bodies {
            if len < max_len {
                let mut s = b.clone();
                s.push(EOS);
                all.push(s);
            } else {
                all.push(b.clone());
            }
        }
        bodies = bodies
            .iter()
            .flat_map(|b| [TOY_A, TOY_B].map(|t| [b.clone(), vec![t]].concat()))
            .collect();
    }
    all.into_iter()
        .fold((f64::NEG_INFINITY, Vec::new()), |best, s| {
            let v = score(&s);
            if v > best.0 {
                (v, s)
            } else {
                best
            }
        })
        .1
}

pub fn beam_search_check() -> Outcome {
    outcome(6, "beam search", false, || {
        let mut model = fd_model(20);
        model.dropout = 0.0;
        let mut identical = 0;
        for i in 0..100u64 {
            let params: ModelParams<f64> = ModelParams::<f32>::init(&model, 1000 + i / 10)?.cast();
            let memory = random_tensor(&[4, model.d], 2000 + i);
            let beam = generate(&params, &model, &memory, 1)?;
            let mut scorer = DecoderScorer::new(&params, &model, &memory)?;
            let greedy = greedy_decode(&mut scorer, model.max_title_len)?;
            identical += usize::from(beam.tokens == greedy.tokens);
        }
        let argmax = toy_argmax(3);
        let beam2 = beam_search(&mut Toy, 2, 3)?.tokens;
        Ok((
            identical == 100 && beam2 == argmax,
            format!(
                "beam=1 equals greedy on {identical}/100 inputs; toy beam=2 {beam2:?} vs brute force {argmax:?}"
            ),
        ))
    })
}

pub fn cycle_alignment() -> Outcome {
    outcome(7, "cycle alignment", false, || {
        let model = ModelConfig::desk(50, 16, 4);
        let bank = PromptBank::<f32>::init(&model, 4)?;
        let a = cycle_align(&bank, model.align_scale)?;
        let b = cycle_align(&bank, model.align_scale)?;
        let mut worst = 0.0f64;
        for w in &a.weights {
            for row in w.data().chunks(model.n_prompts) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        let shape_ok = a.fused.shape() == [9 * model.n_prompts, model.d];
        let bits = a
            .fused
            .data()
            .iter()
            .chain(a.weights.iter().flat_map(|w| w.data()))
            .zip(
                b.fused
                    .data()
                    .iter()
                    .chain(b.weights.iter().flat_map(|w| w.data())),
            )
            .all(|(x, y)| x.to_bits() == y.to_bits());
        Ok((
            a.weights.len() == 9 && worst < STOCHASTIC_TOL && shape_ok && bits,
            format!(
                "{} matrices, worst row-sum deviation {worst:.2e} < {STOCHASTIC_TOL:e}; fused {:?} (9*N_P x d); bit-identical repeat {bits}",
                a.weights.len(),
                a.fused.shape()
            ),
        ))
    })
}

/// Small configuration for the train-twice and checkpoint criteria.
pub const SMALL_RUN: &str = r#"
source_products = 60

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
fewshot = 0.2
max_epochs = 3
patience = 2
val_cap = 8
test_beam = 2

[train.optimizer]
lr = 0.003
"#;

fn small_config(work: &Path) -> Result<RunConfig, Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::from_toml(SMALL_RUN)?;
    cfg.data_dir = work.join("data");
    gen_data(&cfg).map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn reproducibility(work: &Path) -> Outcome {
    outcome(8, "reproducibility", false, || {
        let cfg = small_config(work)?;
        let (a, b) = (work.join("run-a"), work.join("run-b"));
        let mut traces = Vec::new();
        for dir in [&a, &b] {
            fs::create_dir_all(dir)?;
            traces.push(
                train(&cfg, PhaseArg::Mpl, None, dir)
                    .map_err(|e| e.to_string())?
                    .loss_trace(),
            );
        }
        let same_trace = traces[0].len() == traces[1].len()
            && traces[0]
                .iter()
                .zip(&traces[1])
                .all(|(x, y)| x.to_bits() == y.to_bits());
        let ca = fs::read(a.join(CHECKPOINT_FILE))?;
        let cb = fs::read(b.join(CHECKPOINT_FILE))?;
        Ok((
            same_trace && ca == cb,
            format!(
                "{} epoch losses bit-identical: {same_trace}; checkpoints ({} bytes) identical: {}",
                traces[0].len(),
                ca.len(),
                ca == cb
            ),
        ))
    })
}

pub fn round_trip(work: &Path) -> Outcome {
    outcome(9, "checkpoint round trip", false, || {
        let cfg = small_config(work)?;
        let dir = work.join("run");
        fs::create_dir_all(&dir)?;
        train(&cfg, PhaseArg::Mpl, None, &dir).map_err(|e| e.to_string())?;
        let bytes = fs::read(dir.join(CHECKPOINT_FILE))?;
        let ck = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        let again = decode_checkpoint(&encode_checkpoint(&ck)?)?;
        let identity = again == ck && encode_checkpoint(&ck)? == bytes;

        let data = load_dataset(&cfg.data_dir).map_err(|e| e.to_string())?;
        let val = encode_all(&data.novel.validation, &ck.vocab, &ck.model_config)?;
        let cap = match cfg.train.val_cap {
            0 => val.len(),
            c => c.min(val.len()),
        };
        let ev = evaluate(
            &val[..cap],
            &ck.state,
            &ck.model_config,
            ck.setting,
            cfg.train.val_beam,
            &ck.vocab,
        )?;
        let gap = (ev.scores.cider - ck.best_val_cider).abs();
        Ok((
            identity && gap < REEVAL_TOL,
            format!(
                "save/load identity {identity}; validation CIDEr {:.9} vs recorded {:.9}, gap {gap:.1e} < {REEVAL_TOL:e}",
                ev.scores.cider, ck.best_val_cider
            ),
        ))
    })
}

/// Every criterion in order. `benchmark` is the desk config for the two
/// experimental criteria; `None` reports them as not run.
pub fn run_all(benchmark: Option<&Path>, work: &Path) -> Vec<Outcome> {
    let mut out = vec![gradient_correctness(), metric_oracles(), overfit()];
    let bench = match benchmark {
        Some(cfg) => run_benchmark(cfg, &work.join("benchmark")).map_err(|e| e.to_string()),
        None => Err("benchmark not run".into()),
    };
    out.push(few_shot_ordering(&bench));
    out.push(language_prompt_dominance(&bench));
    out.push(beam_search_check());
    out.push(cycle_alignment());
    out.push(reproducibility(&work.join("repro")));
    out.push(round_trip(&work.join("roundtrip")));
    out
}
