//! Unimodal and multimodal prompt training, early stopping on CIDEr, the
//! ablation ladder and title generation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cycle_align::cycle_align_on_tape;
use crate::data_synth::vocab::attribute_tokens;
use crate::data_synth::{subsample_fewshot, tokenize, ProductRecord, Splits, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{score_all, EvalEntry, Scores};
use crate::model::{generate, Forward, ModelConfig, ModelParams};
use crate::numeric::{AdamW, AdamWConfig, Real, Tape, Tensor, Var};
use crate::prompts::{concat_prompt, Modality, PromptBank};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Upt,
    Mpt,
}

impl Phase {
    fn tag(self) -> u64 {
        match self {
            Phase::Upt => 0x5550_5400,
            Phase::Mpt => 0x4d50_5400,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Upt => "upt",
            Phase::Mpt => "mpt",
        })
    }
}

/// Rows of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// No prompts and no unimodal phase.
    Base,
    /// Visual prompts only.
    A,
    /// Attribute prompts only.
    B,
    /// Language prompts only.
    C,
    /// All three banks, concatenated without alignment.
    D,
    /// All three banks fused by cycle alignment.
    Mpl,
}

impl Setting {
    pub const ALL: [Setting; 6] = [
        Setting::Base,
        Setting::A,
        Setting::B,
        Setting::C,
        Setting::D,
        Setting::Mpl,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Setting::Base => "base",
            Setting::A => "a",
            Setting::B => "b",
            Setting::C => "c",
            Setting::D => "d",
            Setting::Mpl => "mpl",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Setting::Base => "Base",
            Setting::A => "(a)",
            Setting::B => "(b)",
            Setting::C => "(c)",
            Setting::D => "(d)",
            Setting::Mpl => "MPL",
        }
    }

    /// Banks trained in the unimodal phase.
    pub fn prompt_modalities(self) -> &'static [Modality] {
        match self {
            Setting::Base => &[],
            Setting::A => &[Modality::Image],
            Setting::B => &[Modality::Attribute],
            Setting::C => &[Modality::Title],
            Setting::D | Setting::Mpl => &Modality::ALL,
        }
    }

    pub fn cycle_alignment(self) -> bool {
        self == Setting::Mpl
    }

    /// Number of prompt rows placed in front of `[R_I; R_A]` at inference.
    pub fn prefix_rows(self, n_prompts: usize) -> usize {
        match self {
            Setting::Mpl => 9 * n_prompts,
            s => s.prompt_modalities().len() * n_prompts,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|x| x.tag() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown setting {s:?}; expected one of base, a, b, c, d, mpl"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub setting: Setting,
    /// Weights of the image, attribute and title pipelines of the unimodal phase.
    pub lambda: [f64; 3],
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub max_epochs: usize,
    /// Epochs without a strict validation CIDEr improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub fewshot: f64,
    pub val_beam: usize,
    pub test_beam: usize,
    /// Validation examples scored per epoch; 0 scores the whole split.
    pub val_cap: usize,
    /// Keep the prompt banks fixed during the multimodal phase.
    pub freeze_prompts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            setting: Setting::Mpl,
            lambda: [1.0; 3],
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            max_epochs: 50,
            patience: 5,
            seed: 0,
            fewshot: 0.01,
            val_beam: 1,
            test_beam: 3,
            val_cap: 0,
            freeze_prompts: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lambda.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return bad(format!("lambda {:?} must lie in [0, 1]", self.lambda));
        }
        if !(self.fewshot > 0.0 && self.fewshot <= 1.0) {
            return bad(format!("fewshot {} must lie in (0, 1]", self.fewshot));
        }
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return bad("patience, max_epochs and batch_size must be at least 1".into());
        }
        if self.val_beam == 0 || self.test_beam == 0 {
            return bad("beam sizes must be at least 1".into());
        }
        if self.val_cap == 1 {
            return bad("val_cap must be 0 or at least 2 (CIDEr needs two entries)".into());
        }
        Ok(())
    }
}

/// A record converted to token ids and the tokenized reference title.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<F = f32> {
    pub id: String,
    pub image: Tensor<F>,
    pub attributes: Vec<usize>,
    /// `bos` + title + `eos`.
    pub title: Vec<usize>,
    /// Title ids alone, the input of the title encoder.
    pub title_body: Vec<usize>,
    pub reference: Vec<String>,
}

impl Example<f32> {
    pub fn encode(
        record: &ProductRecord,
        vocab: &Vocabulary,
        config: &ModelConfig,
    ) -> Result<Self> {
        let attrs = attribute_tokens(&record.attributes);
        if attrs.is_empty() || attrs.len() > config.max_input_len {
            return Err(Error::contract(format!(
                "{}: {} attribute tokens, limit {}",
                record.id,
                attrs.len(),
                config.max_input_len
            )));
        }
        let reference = tokenize(&record.title);
        if reference.is_empty()
            || reference.len() + 1 > config.max_title_len
            || reference.len() > config.max_input_len
        {
            return Err(Error::contract(format!(
                "{}: title of {} tokens does not fit the model",
                record.id,
                reference.len()
            )));
        }
        let title = vocab.encode_title(&record.title);
        Ok(Example {
            id: record.id.clone(),
            image: record.image_features.clone(),
            attributes: vocab.encode(&attrs),
            title_body: title[1..title.len() - 1].to_vec(),
            title,
            reference,
        })
    }
}

impl<F: Real> Example<F> {
    pub fn cast<G: Real>(&self) -> Example<G> {
        Example {
            id: self.id.clone(),
            image: self.image.cast(),
            attributes: self.attributes.clone(),
            title: self.title.clone(),
            title_body: self.title_body.clone(),
            reference: self.reference.clone(),
        }
    }
}

pub fn encode_all(
    records: &[ProductRecord],
    vocab: &Vocabulary,
    config: &ModelConfig,
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| Example::encode(r, vocab, config))
        .collect()
}

/// Everything a setting trains: network weights and prompt banks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<F = f32> {
    pub params: ModelParams<F>,
    pub bank: PromptBank<F>,
}

impl<F: Real> ModelState<F> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(ModelState {
            params: ModelParams::init(config, seed)?,
            bank: PromptBank::init(config, derive_seed(&[seed, 0xBA4C]))?,
        })
    }

    pub fn cast<G: Real>(&self) -> ModelState<G> {
        ModelState {
            params: self.params.cast(),
            bank: self.bank.cast(),
        }
    }
}

/// Mixes seed components into one well-spread value (splitmix64 finalizer).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// The constant prompt prefix of `setting`: nothing, one bank, the three banks
/// stacked, or the aligned set `P̂`.
pub fn prompt_prefix<'p, F: Real>(
    tape: &mut Tape<'p, F>,
    bank: &'p PromptBank<F>,
    setting: Setting,
    align_scale: f64,
) -> Result<Option<Var>> {
    Ok(match setting {
        Setting::Base => None,
        Setting::A | Setting::B | Setting::C => {
            Some(bank.var(tape, setting.prompt_modalities()[0]))
        }
        Setting::D => {
            let parts = Modality::ALL.map(|m| bank.var(tape, m));
            Some(tape.concat_rows(&parts)?)
        }
        Setting::Mpl => Some(cycle_align_on_tape(tape, bank, F::cast_f64(align_scale))?.fused),
    })
}

/// `[prefix; R_I; R_A]` for one example.
pub fn multimodal_memory<'p, F: Real>(
    tape: &mut Tape<'p, F>,
    fwd: &mut Forward<'p, F>,
    bank: &'p PromptBank<F>,
    setting: Setting,
    example: &'p Example<F>,
) -> Result<Var> {
    let scale = fwd.config().align_scale;
    let prefix = prompt_prefix(tape, bank, setting, scale)?;
    let img = tape.input(&example.image);
    let r_i = fwd.encode_image(tape, img)?;
    let r_a = fwd.encode_attributes(tape, &example.attributes)?;
    let mut parts: Vec<Var> = prefix.into_iter().collect();
    parts.extend([r_i, r_a]);
    tape.concat_rows(&parts)
}

/// Loss handles of the unimodal pipelines for one example.
pub struct UptVars {
    /// `L^I`, `L^A`, `L^T`; `None` for pipelines the setting skips or weights zero.
    pub parts: [Option<Var>; 3],
    pub total: Var,
}

/// `Σ λ·L^X` over the pipelines of `setting`, each decoding the title from `[P_X; R_X]`.
pub fn upt_loss<'p, F: Real>(
    tape: &mut Tape<'p, F>,
    fwd: &mut Forward<'p, F>,
    bank: &'p PromptBank<F>,
    setting: Setting,
    lambda: [f64; 3],
    example: &'p Example<F>,
) -> Result<UptVars> {
    let mut parts = [None; 3];
    let mut total: Option<Var> = None;
    for (i, m) in Modality::ALL.into_iter().enumerate() {
        if lambda[i] == 0.0 || !setting.prompt_modalities().contains(&m) {
            continue;
        }
        let repr = match m {
            Modality::Image => {
                let img = tape.input(&example.image);
                fwd.encode_image(tape, img)?
            }
            Modality::Attribute => fwd.encode_attributes(tape, &example.attributes)?,
            Modality::Title => fwd.encode_title(tape, &example.title_body)?,
        };
        let p = bank.var(tape, m);
        let memory = concat_prompt(tape, p, repr)?;
        let loss = fwd.decode_loss(tape, memory, &example.title)?;
        parts[i] = Some(loss);
        let weighted = if lambda[i] == 1.0 {
            loss
        } else {
            tape.scale(loss, F::cast_f64(lambda[i]))
        };
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    let total = total.ok_or_else(|| {
        Error::contract(format!(
            "setting {setting} with lambda {lambda:?} has no unimodal pipeline"
        ))
    })?;
    Ok(UptVars { parts, total })
}

/// Title cross-entropy given `[prefix; R_I; R_A]`.
pub fn mpt_loss<'p, F: Real>(
    tape: &mut Tape<'p, F>,
    fwd: &mut Forward<'p, F>,
    bank: &'p PromptBank<F>,
    setting: Setting,
    example: &'p Example<F>,
) -> Result<Var> {
    let memory = multimodal_memory(tape, fwd, bank, setting, example)?;
    fwd.decode_loss(tape, memory, &example.title)
}

/// Batch-mean loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub image: Option<f64>,
    pub attribute: Option<f64>,
    pub title: Option<f64>,
    /// `L_full` in the unimodal phase, `L_MPT` in the multimodal phase.
    pub total: f64,
}

fn apply_update(state: &mut ModelState, opt: &mut AdamW) -> Result<()> {
    // Parameters outside the active pipelines carry no gradient and are skipped,
    // so they receive neither the update nor weight decay.
    let mut slots: Vec<(&str, &mut Tensor)> = state
        .params
        .iter_mut()
        .filter(|(_, t)| t.grad.is_some())
        .collect();
    slots.extend(state.bank.iter_mut().filter(|(_, t)| t.grad.is_some()));
    opt.step(slots)
}

fn accumulate(state: &mut ModelState, grads: &crate::numeric::Gradients<f32>) {
    grads.accumulate_into(state.params.iter_mut());
    grads.accumulate_into(state.bank.iter_mut());
}

/// One unimodal step: mean `L_full` over `batch`, backward, AdamW on
/// encoders, decoder, embeddings and the active prompt banks.
pub fn upt_step(
    batch: &[Example],
    state: &mut ModelState,
    opt: &mut AdamW,
    config: &TrainConfig,
    model: &ModelConfig,
    step_seed: u64,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::contract("upt_step called with an empty batch"));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut out = StepLosses::default();
    for (i, ex) in batch.iter().enumerate() {
        let (parts, total, grads) = {
            let mut tape = Tape::new();
            let mut fwd = Forward::train(&state.params, model, derive_seed(&[step_seed, i as u64]));
            let v = upt_loss(
                &mut tape,
                &mut fwd,
                &state.bank,
                config.setting,
                config.lambda,
                ex,
            )?;
            let scaled = tape.scale(v.total, inv as f32);
            let parts = v.parts.map(|p| p.map(|p| tape.scalar_value(p) as f64));
            let total = tape.scalar_value(v.total) as f64;
            (parts, total, tape.backward(scaled)?)
        };
        accumulate(state, &grads);
        let slots = [&mut out.image, &mut out.attribute, &mut out.title];
        for (slot, v) in slots.into_iter().zip(parts) {
            if let Some(v) = v {
                *slot = Some(slot.unwrap_or(0.0) + v * inv);
            }
        }
        out.total += total * inv;
    }
    apply_update(state, opt)?;
    Ok(out)
}

/// One multimodal step on `[prefix; R_I; R_A]`. Frozen banks are not updated.
pub fn mpt_step(
    batch: &[Example],
    state: &mut ModelState,
    opt: &mut AdamW,
    config: &TrainConfig,
    model: &ModelConfig,
    step_seed: u64,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::contract("mpt_step called with an empty batch"));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let (loss, grads) = {
            let mut tape = Tape::new();
            let mut fwd = Forward::train(&state.params, model, derive_seed(&[step_seed, i as u64]));
            let l = mpt_loss(&mut tape, &mut fwd, &state.bank, config.setting, ex)?;
            let scaled = tape.scale(l, inv as f32);
            (tape.scalar_value(l) as f64, tape.backward(scaled)?)
        };
        accumulate(state, &grads);
        total += loss * inv;
    }
    apply_update(state, opt)?;
    Ok(StepLosses {
        total,
        ..Default::default()
    })
}

/// Decodes one example through `{I, A} → prefix → T`.
pub fn generate_ids(
    state: &ModelState,
    model: &ModelConfig,
    setting: Setting,
    example: &Example,
    beam: usize,
) -> Result<Vec<usize>> {
    let memory = {
        let mut tape = Tape::inference();
        let mut fwd = Forward::eval(&state.params, model);
        let m = multimodal_memory(&mut tape, &mut fwd, &state.bank, setting, example)?;
        tape.tensor(m)
    };
    Ok(generate(&state.params, model, &memory, beam)?.tokens)
}

/// Generates a title string for a raw record.
pub fn generate_title(
    record: &ProductRecord,
    state: &ModelState,
    vocab: &Vocabulary,
    model: &ModelConfig,
    setting: Setting,
    beam: usize,
) -> Result<String> {
    let ex = Example::encode(record, vocab, model)?;
    Ok(vocab.decode(&generate_ids(state, model, setting, &ex, beam)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTitle {
    pub id: String,
    pub generated: String,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scores: Scores,
    pub beam: usize,
    pub titles: Vec<GeneratedTitle>,
}

/// Generates for every example and scores against its title.
pub fn evaluate(
    examples: &[Example],
    state: &ModelState,
    model: &ModelConfig,
    setting: Setting,
    beam: usize,
    vocab: &Vocabulary,
) -> Result<Evaluation> {
    let mut corpus = Vec::with_capacity(examples.len());
    let mut titles = Vec::with_capacity(examples.len());
    for ex in examples {
        let ids = generate_ids(state, model, setting, ex, beam)?;
        let generated = vocab.decode_tokens(&ids);
        titles.push(GeneratedTitle {
            id: ex.id.clone(),
            generated: generated.join(" "),
            reference: ex.reference.join(" "),
        });
        corpus.push(EvalEntry::new(generated, vec![ex.reference.clone()]));
    }
    Ok(Evaluation {
        scores: score_all(&corpus)?,
        beam,
        titles,
    })
}

/// Fraction of teacher-forced next tokens predicted correctly, `eos` included.
pub fn next_token_accuracy(
    examples: &[Example],
    state: &ModelState,
    model: &ModelConfig,
    setting: Setting,
) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in examples {
        let mut tape = Tape::inference();
        let mut fwd = Forward::eval(&state.params, model);
        let memory = multimodal_memory(&mut tape, &mut fwd, &state.bank, setting, ex)?;
        let n = ex.title.len();
        let logits = fwd.decoder_logits(&mut tape, memory, &ex.title[..n - 1])?;
        let v = model.vocab_size;
        for (row, &target) in tape.value(logits).chunks(v).zip(&ex.title[1..]) {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc },
                )
                .0;
            hit += usize::from(best == target);
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: StepLosses,
    pub validation: Scores,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: Phase,
    pub setting: Setting,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_cider: f64,
    pub val_beam: usize,
    pub val_examples: usize,
    pub seconds: f64,
}

impl PhaseReport {
    /// Loss totals of every step, in order; the determinism fingerprint of a run.
    pub fn loss_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss.total).collect()
    }
}

/// Trains one phase with early stopping on validation CIDEr and leaves the
/// best-epoch snapshot in `state`. Returns the report and the optimizer as it
/// was at the best epoch.
pub fn train_phase(
    phase: Phase,
    config: &TrainConfig,
    model: &ModelConfig,
    state: &mut ModelState,
    train: &[Example],
    validation: &[Example],
    vocab: &Vocabulary,
) -> Result<(PhaseReport, AdamW)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if validation.is_empty() {
        return Err(Error::contract("validation set is empty"));
    }
    let val = match config.val_cap {
        0 => validation,
        cap => &validation[..cap.min(validation.len())],
    };
    let started = Instant::now();
    let phase_seed = derive_seed(&[config.seed, phase.tag()]);
    let mut opt = AdamW::new(config.optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ModelState, AdamW)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(phase_seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut sum = StepLosses::default();
        let mut steps = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Example> = chunk.iter().map(|&i| train[i].clone()).collect();
            let seed = derive_seed(&[phase_seed, epoch as u64, b as u64]);
            let l = match phase {
                Phase::Upt => upt_step(&batch, state, &mut opt, config, model, seed)?,
                Phase::Mpt => mpt_step(&batch, state, &mut opt, config, model, seed)?,
            };
            let add = |acc: Option<f64>, x: Option<f64>| x.map(|x| acc.unwrap_or(0.0) + x);
            sum.image = add(sum.image, l.image);
            sum.attribute = add(sum.attribute, l.attribute);
            sum.title = add(sum.title, l.title);
            sum.total += l.total;
            steps += 1;
        }
        let k = steps as f64;
        let loss = StepLosses {
            image: sum.image.map(|x| x / k),
            attribute: sum.attribute.map(|x| x / k),
            title: sum.title.map(|x| x / k),
            total: sum.total / k,
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                op: "training loss",
            });
        }
        let scores = evaluate(val, state, model, config.setting, config.val_beam, vocab)?.scores;
        epochs.push(EpochRecord {
            epoch,
            steps,
            loss,
            validation: scores,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|b| scores.cider > b.0) {
            best = Some((scores.cider, epoch, state.clone(), opt.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (best_val_cider, best_epoch, snapshot, best_opt) = best.expect("at least one epoch ran");
    *state = snapshot;
    Ok((
        PhaseReport {
            phase,
            setting: config.setting,
            epochs,
            best_epoch,
            best_val_cider,
            val_beam: config.val_beam,
            val_examples: val.len(),
            seconds: started.elapsed().as_secs_f64(),
        },
        best_opt,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub setting: Setting,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub fewshot_size: usize,
    pub upt: Option<PhaseReport>,
    pub mpt: PhaseReport,
    pub test: Evaluation,
}

/// Records sampled for few-shot training under `config`.
pub fn fewshot_subset(train: &[ProductRecord], config: &TrainConfig) -> Result<Vec<ProductRecord>> {
    subsample_fewshot(train, config.fewshot, derive_seed(&[config.seed, 0xF3]))
}

/// Unimodal phase on the few-shot subset. Returns the state after its best epoch.
pub fn run_upt(
    config: &TrainConfig,
    model: &ModelConfig,
    mut state: ModelState,
    train: &[Example],
    validation: &[Example],
    vocab: &Vocabulary,
) -> Result<(ModelState, PhaseReport, AdamW)> {
    state.bank.set_trainable(true);
    let (report, opt) = train_phase(
        Phase::Upt,
        config,
        model,
        &mut state,
        train,
        validation,
        vocab,
    )?;
    Ok((state, report, opt))
}

/// Multimodal phase; banks are frozen unless the config says otherwise.
pub fn run_mpt(
    config: &TrainConfig,
    model: &ModelConfig,
    mut state: ModelState,
    train: &[Example],
    validation: &[Example],
    vocab: &Vocabulary,
) -> Result<(ModelState, PhaseReport, AdamW)> {
    state.bank.set_trainable(!config.freeze_prompts);
    let (report, opt) = train_phase(
        Phase::Mpt,
        config,
        model,
        &mut state,
        train,
        validation,
        vocab,
    )?;
    state.bank.set_trainable(true);
    Ok((state, report, opt))
}

/// Few-shot pipeline: subsample, unimodal phase (skipped for Base), multimodal
/// phase, then test generation with the final beam.
pub fn run_mpl(
    config: &TrainConfig,
    model: &ModelConfig,
    init: ModelState,
    splits: &Splits,
    vocab: &Vocabulary,
) -> Result<(ModelState, RunReport, AdamW)> {
    config.validate()?;
    let few = encode_all(&fewshot_subset(&splits.train, config)?, vocab, model)?;
    let val = encode_all(&splits.validation, vocab, model)?;
    let test = encode_all(&splits.test, vocab, model)?;
    let mut state = init;
    let upt = if config.setting.prompt_modalities().is_empty() {
        None
    } else {
        let (s, r, _) = run_upt(config, model, state, &few, &val, vocab)?;
        state = s;
        Some(r)
    };
    let (state, mpt, opt) = run_mpt(config, model, state, &few, &val, vocab)?;
    let test = evaluate(
        &test,
        &state,
        model,
        config.setting,
        config.test_beam,
        vocab,
    )?;
    Ok((
        state,
        RunReport {
            setting: config.setting,
            seed: config.seed,
            train_config: config.clone(),
            fewshot_size: few.len(),
            upt,
            mpt,
            test,
        },
        opt,
    ))
}

/// Plain encoder-decoder training on `[R_I; R_A]`, used for source-domain
/// pretraining. Prompt banks are untouched.
pub fn pretrain(
    config: &TrainConfig,
    model: &ModelConfig,
    state: ModelState,
    splits: &Splits,
    vocab: &Vocabulary,
) -> Result<(ModelState, PhaseReport)> {
    let cfg = TrainConfig {
        setting: Setting::Base,
        ..config.clone()
    };
    let train = encode_all(&splits.train, vocab, model)?;
    let val = encode_all(&splits.validation, vocab, model)?;
    let (state, report, _) = run_mpt(&cfg, model, state, &train, &val, vocab)?;
    Ok((state, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub settings: Vec<Setting>,
    pub train: TrainConfig,
    /// Source-domain pretraining before each seed's few-shot runs; `None` skips it.
    pub pretrain: Option<TrainConfig>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2, 3, 4],
            settings: Setting::ALL.to_vec(),
            train: TrainConfig::default(),
            pretrain: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub setting: Setting,
    pub seed: u64,
    pub test: Scores,
    pub upt_best_epoch: Option<usize>,
    pub mpt_best_epoch: usize,
    pub trained_prompt_scalars: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: Setting,
    pub median: Scores,
    pub cider_by_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
    pub pretrain: Vec<PhaseReport>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

impl AblationReport {
    pub fn row(&self, s: Setting) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == s)
    }

    fn cider(&self, s: Setting) -> Option<f64> {
        self.row(s).map(|r| r.median.cider)
    }

    /// `MPL > (d) > max(a, b, c) ≥ Base` on median test CIDEr; `None` if a row is missing.
    pub fn full_ordering(&self) -> Option<bool> {
        let [base, a, b, c, d, mpl] = Setting::ALL.map(|s| self.cider(s));
        let abc = a?.max(b?).max(c?);
        Some(mpl? > d? && d? > abc && abc >= base?)
    }

    /// `(c) ≥ (a)` and `(c) ≥ (b)` on median test CIDEr.
    pub fn language_prompt_dominance(&self) -> Option<bool> {
        let (a, b, c) = (
            self.cider(Setting::A)?,
            self.cider(Setting::B)?,
            self.cider(Setting::C)?,
        );
        Some(c >= a && c >= b)
    }

    /// Aligned plain-text table in the ablation layout.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:^5} {:^5} {:^5} {:^15} {:>8} {:>8} {:>8}\n",
            "Settings", "P_I", "P_A", "P_T", "Cycle Alignment", "B-4", "R-L", "C"
        ));
        for row in &self.rows {
            let s = row.setting;
            let mark = |m: Modality| {
                if s.prompt_modalities().contains(&m) {
                    "x"
                } else {
                    ""
                }
            };
            out.push_str(&format!(
                "{:<8} {:^5} {:^5} {:^5} {:^15} {:>8.2} {:>8.2} {:>8.2}\n",
                s.label(),
                mark(Modality::Image),
                mark(Modality::Attribute),
                mark(Modality::Title),
                if s.cycle_alignment() { "x" } else { "" },
                row.median.bleu4,
                row.median.rouge_l,
                row.median.cider,
            ));
        }
        out
    }
}

fn trained_prompt_scalars(before: &PromptBank, after: &PromptBank) -> usize {
    Modality::ALL
        .into_iter()
        .filter(|&m| before.get(m) != after.get(m))
        .map(|m| after.get(m).numel())
        .sum()
}

/// Runs every configured setting for every seed and aggregates medians.
/// `progress` receives each finished run.
pub fn ablate(
    config: &AblationConfig,
    model: &ModelConfig,
    novel: &Splits,
    source: Option<&Splits>,
    vocab: &Vocabulary,
    mut progress: impl FnMut(&AblationRun),
) -> Result<AblationReport> {
    if config.seeds.is_empty() || config.settings.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one seed and one setting".into(),
        ));
    }
    let mut runs = Vec::new();
    let mut pretrain_reports = Vec::new();
    for &seed in &config.seeds {
        let mut init = ModelState::init(model, seed)?;
        if let Some(pre) = &config.pretrain {
            let src = source.ok_or_else(|| {
                Error::Config("pretraining is enabled but no source corpus was given".into())
            })?;
            let cfg = TrainConfig {
                seed,
                ..pre.clone()
            };
            let (s, r) = pretrain(&cfg, model, init, src, vocab)?;
            init = s;
            pretrain_reports.push(r);
        }
        for &setting in &config.settings {
            let t0 = Instant::now();
            let cfg = TrainConfig {
                setting,
                seed,
                ..config.train.clone()
            };
            let (state, report, _) = run_mpl(&cfg, model, init.clone(), novel, vocab)?;
            let run = AblationRun {
                setting,
                seed,
                test: report.test.scores,
                upt_best_epoch: report.upt.as_ref().map(|u| u.best_epoch),
                mpt_best_epoch: report.mpt.best_epoch,
                trained_prompt_scalars: trained_prompt_scalars(&init.bank, &state.bank),
                seconds: t0.elapsed().as_secs_f64(),
            };
            progress(&run);
            runs.push(run);
        }
    }
    let rows = config
        .settings
        .iter()
        .map(|&s| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.setting == s).collect();
            let col = |f: fn(&Scores) -> f64| {
                median(&mine.iter().map(|r| f(&r.test)).collect::<Vec<_>>())
            };
            AblationRow {
                setting: s,
                median: Scores {
                    bleu4: col(|x| x.bleu4),
                    rouge_l: col(|x| x.rouge_l),
                    cider: col(|x| x.cider),
                },
                cider_by_seed: mine.iter().map(|r| r.test.cider).collect(),
            }
        })
        .collect();
    Ok(AblationReport {
        config: config.clone(),
        runs,
        rows,
        pretrain: pretrain_reports,
    })
}
