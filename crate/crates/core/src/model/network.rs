use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelParams};
use crate::data_synth::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::numeric::{Real, Tape, Var};

const LN_EPS: f64 = 1e-5;

struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

/// One forward pass of the encoders and decoder over a borrowed parameter set.
///
/// A `Forward` is created per pass. In training mode it owns the dropout RNG,
/// so two passes built from the same seed draw identical masks.
pub struct Forward<'p, F: Real> {
    params: &'p ModelParams<F>,
    config: &'p ModelConfig,
    dropout: Option<Dropout>,
    trace: Option<Vec<(String, Var)>>,
}

/// Cross-attention keys and values of one decoder layer, projected from memory.
#[derive(Clone, Copy, Debug)]
pub struct MemoryKv {
    pub keys: Var,
    pub values: Var,
}

/// Sinusoidal position table, `len × d`, flattened row-major.
pub fn sinusoidal_positions<F: Real>(len: usize, d: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            out.push(F::cast_f64(if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }));
        }
    }
    out
}

fn causal_mask<F: Real>(len: usize) -> Vec<F> {
    let mut m = vec![F::zero(); len * len];
    for i in 0..len {
        for j in i + 1..len {
            m[i * len + j] = F::neg_infinity();
        }
    }
    m
}

fn key_padding_mask<F: Real>(ids: &[usize]) -> Vec<F> {
    let len = ids.len();
    let mut m = vec![F::zero(); len * len];
    for row in m.chunks_mut(len) {
        for (slot, &id) in row.iter_mut().zip(ids) {
            if id == PAD {
                *slot = F::neg_infinity();
            }
        }
    }
    m
}

impl<'p, F: Real> Forward<'p, F> {
    /// Deterministic pass with dropout disabled.
    pub fn eval(params: &'p ModelParams<F>, config: &'p ModelConfig) -> Self {
        Forward {
            params,
            config,
            dropout: None,
            trace: None,
        }
    }

    /// Training pass; dropout masks are drawn from a generator seeded with `seed`.
    pub fn train(params: &'p ModelParams<F>, config: &'p ModelConfig, seed: u64) -> Self {
        let dropout = (config.dropout > 0.0).then(|| Dropout {
            rate: config.dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        });
        Forward {
            params,
            config,
            dropout,
            trace: None,
        }
    }

    /// Records every attention probability matrix computed from now on.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    /// Attention matrices recorded so far, labeled by parameter prefix and head.
    pub fn trace(&self) -> &[(String, Var)] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    fn p(&self, tape: &mut Tape<'p, F>, name: &str) -> Var {
        tape.param(name, self.params.get(name))
    }

    fn dropout(&mut self, tape: &mut Tape<'p, F>, x: Var) -> Result<Var> {
        let Some(d) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - d.rate;
        let scale = F::cast_f64(1.0 / keep);
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| {
                if d.rng.random::<f64>() < keep {
                    scale
                } else {
                    F::zero()
                }
            })
            .collect();
        tape.mul_const(x, mask)
    }

    fn linear(&self, tape: &mut Tape<'p, F>, x: Var, w: &str, b: &str) -> Result<Var> {
        let wv = self.p(tape, w);
        let bv = self.p(tape, b);
        let y = tape.matmul(x, wv)?;
        tape.add_row(y, bv)
    }

    fn layer_norm(&self, tape: &mut Tape<'p, F>, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(tape, &format!("{prefix}.g"));
        let b = self.p(tape, &format!("{prefix}.b"));
        tape.layer_norm(x, g, b, F::cast_f64(LN_EPS))
    }

    /// Projects memory rows into one attention block's key and value spaces.
    fn project_kv(&self, tape: &mut Tape<'p, F>, prefix: &str, memory: Var) -> Result<MemoryKv> {
        let keys = self.linear(
            tape,
            memory,
            &format!("{prefix}.wk"),
            &format!("{prefix}.bk"),
        )?;
        let values = self.linear(
            tape,
            memory,
            &format!("{prefix}.wv"),
            &format!("{prefix}.bv"),
        )?;
        Ok(MemoryKv { keys, values })
    }

    /// Multi-head scaled dot-product attention of `x` over pre-projected `kv`.
    fn attend(
        &mut self,
        tape: &mut Tape<'p, F>,
        prefix: &str,
        x: Var,
        kv: MemoryKv,
        mask: Option<&[F]>,
    ) -> Result<Var> {
        let q = self.linear(tape, x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let hd = self.config.head_dim();
        let scale = F::cast_f64(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(kv.keys, h * hd, hd)?;
            let vh = tape.slice_cols(kv.values, h * hd, hd)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add_const(scores, m)?;
            }
            let probs = tape.softmax_rows(scores)?;
            if let Some(t) = self.trace.as_mut() {
                t.push((format!("{prefix}.head{h}"), probs));
            }
            heads.push(tape.matmul(probs, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        self.linear(
            tape,
            joined,
            &format!("{prefix}.wo"),
            &format!("{prefix}.bo"),
        )
    }

    fn feed_forward(&mut self, tape: &mut Tape<'p, F>, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(tape, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = tape.gelu(h);
        self.linear(tape, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Pre-norm self-attention + feed-forward block with residual connections.
    fn encoder_block(
        &mut self,
        tape: &mut Tape<'p, F>,
        prefix: &str,
        x: Var,
        mask: Option<&[F]>,
    ) -> Result<Var> {
        let h = self.layer_norm(tape, x, &format!("{prefix}.ln1"))?;
        let kv = self.project_kv(tape, &format!("{prefix}.attn"), h)?;
        let a = self.attend(tape, &format!("{prefix}.attn"), h, kv, mask)?;
        let a = self.dropout(tape, a)?;
        let x = tape.add(x, a)?;
        let h = self.layer_norm(tape, x, &format!("{prefix}.ln2"))?;
        let f = self.feed_forward(tape, &format!("{prefix}.ffn"), h)?;
        let f = self.dropout(tape, f)?;
        tape.add(x, f)
    }

    fn encoder_stack(
        &mut self,
        tape: &mut Tape<'p, F>,
        name: &str,
        mut x: Var,
        mask: Option<&[F]>,
    ) -> Result<Var> {
        for l in 0..self.config.n_enc_layers {
            x = self.encoder_block(tape, &format!("{name}.{l}"), x, mask)?;
        }
        self.layer_norm(tape, x, &format!("{name}.ln"))
    }

    /// Linear projection of image features to width `d` plus position encodings,
    /// before any attention layer.
    pub fn embed_image(&mut self, tape: &mut Tape<'p, F>, features: Var) -> Result<Var> {
        let shape = tape.shape(features).to_vec();
        let expected = [self.config.image_seq_len, self.config.image_feature_dim];
        if shape != expected {
            return Err(Error::shape("encode_image", &shape, &expected));
        }
        let x = self.linear(tape, features, "image.proj.w", "image.proj.b")?;
        let pos = sinusoidal_positions(self.config.image_seq_len, self.config.d);
        let x = tape.add_const(x, &pos)?;
        self.dropout(tape, x)
    }

    /// `R_I`: image feature sequence → `L_I × d` representation.
    pub fn encode_image(&mut self, tape: &mut Tape<'p, F>, features: Var) -> Result<Var> {
        let x = self.embed_image(tape, features)?;
        self.encoder_stack(tape, "image.enc", x, None)
    }

    fn embed_tokens(&mut self, tape: &mut Tape<'p, F>, ids: &[usize]) -> Result<Var> {
        let table = self.p(tape, "embed.tokens");
        let e = tape.embedding(table, ids)?;
        let e = tape.scale(e, F::cast_f64((self.config.d as f64).sqrt()));
        let pos = sinusoidal_positions(ids.len(), self.config.d);
        let x = tape.add_const(e, &pos)?;
        self.dropout(tape, x)
    }

    /// Shared text encoder behind both `R_A` and `R_T`.
    fn encode_text(&mut self, tape: &mut Tape<'p, F>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::contract("text encoder input is empty"));
        }
        if ids.len() > self.config.max_input_len {
            return Err(Error::contract(format!(
                "text encoder input of {} tokens exceeds max_input_len {}",
                ids.len(),
                self.config.max_input_len
            )));
        }
        if ids.iter().all(|&id| id == PAD) {
            return Err(Error::contract("text encoder input is all padding"));
        }
        let x = self.embed_tokens(tape, ids)?;
        let mask = ids.contains(&PAD).then(|| key_padding_mask(ids));
        self.encoder_stack(tape, "text.enc", x, mask.as_deref())
    }

    /// `R_A`: attribute tokens → `L_A × d`. Padding keys are masked.
    pub fn encode_attributes(&mut self, tape: &mut Tape<'p, F>, ids: &[usize]) -> Result<Var> {
        self.encode_text(tape, ids)
    }

    /// `R_T`: title tokens → `L_T × d`, with the attribute encoder's weights.
    pub fn encode_title(&mut self, tape: &mut Tape<'p, F>, ids: &[usize]) -> Result<Var> {
        self.encode_text(tape, ids)
    }

    /// Cross-attention keys/values for every decoder layer. Memory rows carry
    /// no position information.
    pub fn memory_kv(&mut self, tape: &mut Tape<'p, F>, memory: Var) -> Result<Vec<MemoryKv>> {
        let (rows, cols) = match tape.shape(memory) {
            &[r, c] => (r, c),
            s => return Err(Error::contract(format!("memory must be 2-D, got {s:?}"))),
        };
        if rows == 0 {
            return Err(Error::contract("decoder memory has no rows"));
        }
        if cols != self.config.d {
            return Err(Error::shape(
                "decoder memory",
                &[rows, cols],
                &[rows, self.config.d],
            ));
        }
        (0..self.config.n_dec_layers)
            .map(|l| self.project_kv(tape, &format!("dec.{l}.cross"), memory))
            .collect()
    }

    /// Decoder hidden states (after the final norm) for `ids` under causal masking.
    pub fn decoder_hidden(
        &mut self,
        tape: &mut Tape<'p, F>,
        ids: &[usize],
        memory: &[MemoryKv],
    ) -> Result<Var> {
        if memory.len() != self.config.n_dec_layers {
            return Err(Error::contract(
                "memory projections do not match decoder depth",
            ));
        }
        let mut x = self.embed_tokens(tape, ids)?;
        let mask = causal_mask::<F>(ids.len());
        for (l, kv) in memory.iter().enumerate() {
            let p = format!("dec.{l}");
            let h = self.layer_norm(tape, x, &format!("{p}.ln1"))?;
            let self_kv = self.project_kv(tape, &format!("{p}.self"), h)?;
            let a = self.attend(tape, &format!("{p}.self"), h, self_kv, Some(&mask))?;
            let a = self.dropout(tape, a)?;
            x = tape.add(x, a)?;
            let h = self.layer_norm(tape, x, &format!("{p}.ln2"))?;
            let c = self.attend(tape, &format!("{p}.cross"), h, *kv, None)?;
            let c = self.dropout(tape, c)?;
            x = tape.add(x, c)?;
            let h = self.layer_norm(tape, x, &format!("{p}.ln3"))?;
            let f = self.feed_forward(tape, &format!("{p}.ffn"), h)?;
            let f = self.dropout(tape, f)?;
            x = tape.add(x, f)?;
        }
        self.layer_norm(tape, x, "dec.ln")
    }

    pub fn output_logits(&mut self, tape: &mut Tape<'p, F>, hidden: Var) -> Result<Var> {
        self.linear(tape, hidden, "dec.out.w", "dec.out.b")
    }

    /// Teacher-forced logits for every position of `ids`.
    pub fn decoder_logits(
        &mut self,
        tape: &mut Tape<'p, F>,
        memory: Var,
        ids: &[usize],
    ) -> Result<Var> {
        let kv = self.memory_kv(tape, memory)?;
        let h = self.decoder_hidden(tape, ids, &kv)?;
        self.output_logits(tape, h)
    }

    /// Cross-entropy of `title` (`bos … eos`) given `memory`: the decoder reads
    /// the title without its last token and predicts it without its first.
    pub fn decode_loss(
        &mut self,
        tape: &mut Tape<'p, F>,
        memory: Var,
        title: &[usize],
    ) -> Result<Var> {
        check_title(title, self.config.max_title_len)?;
        let n = title.len();
        let logits = self.decoder_logits(tape, memory, &title[..n - 1])?;
        tape.cross_entropy(logits, &title[1..], PAD)
    }
}

pub(crate) fn check_title(title: &[usize], max_title_len: usize) -> Result<()> {
    if title.len() < 2 || title[0] != BOS || title[title.len() - 1] != EOS {
        return Err(Error::contract(
            "title must start with bos and end with eos",
        ));
    }
    if title.len() - 1 > max_title_len {
        return Err(Error::contract(format!(
            "title of {} tokens exceeds max_title_len {}",
            title.len() - 1,
            max_title_len
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn small() -> ModelConfig {
        ModelConfig {
            d: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            ffn_width: 24,
            vocab_size: 12,
            max_title_len: 8,
            max_input_len: 8,
            image_feature_dim: 6,
            image_seq_len: 3,
            n_prompts: 2,
            dropout: 0.0,
            align_scale: 1.0,
        }
    }

    #[test]
    fn positions_alternate_sin_cos() {
        let pe = sinusoidal_positions::<f64>(2, 4);
        assert_eq!(&pe[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe[4] - 1f64.sin()).abs() < 1e-12);
        assert!((pe[5] - 1f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn title_contract() {
        assert!(check_title(&[BOS, 5, EOS], 8).is_ok());
        assert!(check_title(&[5, EOS], 8).is_err());
        assert!(check_title(&[BOS, 5], 8).is_err());
        assert!(check_title(&[BOS, 4, 4, 4, EOS], 3).is_err());
    }

    #[test]
    fn image_width_is_checked() {
        let cfg = small();
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let feats = Tensor::<f32>::zeros(&[3, 5]);
        let mut tape = Tape::inference();
        let mut fwd = Forward::eval(&params, &cfg);
        let x = tape.input(&feats);
        assert!(matches!(
            fwd.encode_image(&mut tape, x),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn empty_and_all_pad_text_rejected() {
        let cfg = small();
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let mut tape = Tape::inference();
        let mut fwd = Forward::eval(&params, &cfg);
        assert!(fwd.encode_attributes(&mut tape, &[]).is_err());
        assert!(fwd.encode_attributes(&mut tape, &[PAD, PAD]).is_err());
        assert!(fwd.encode_attributes(&mut tape, &[99]).is_err());
    }
}
