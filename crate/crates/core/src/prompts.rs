//! Trainable soft-prompt banks, one per modality, and prompt-prefixed memory.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numeric::{Real, Tape, Tensor, Var};

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Attribute,
    Title,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Attribute, Modality::Title];

    pub fn short(self) -> &'static str {
        match self {
            Modality::Image => "I",
            Modality::Attribute => "A",
            Modality::Title => "T",
        }
    }

    /// Parameter name of this modality's bank.
    pub fn param_name(self) -> &'static str {
        match self {
            Modality::Image => "prompt.image",
            Modality::Attribute => "prompt.attribute",
            Modality::Title => "prompt.title",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// The visual, attribute and language prompt matrices, each `N_P × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank<F = f32> {
    pub image: Tensor<F>,
    pub attribute: Tensor<F>,
    pub title: Tensor<F>,
}

impl<F: Real> PromptBank<F> {
    /// Three independently drawn `normal(0, 0.02)` banks, deterministic under `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shape = [config.n_prompts, config.d];
        let draw = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            Tensor::normal(&shape, PROMPT_INIT_STD, &mut rng).with_grad(true)
        };
        Ok(PromptBank {
            image: draw(1),
            attribute: draw(2),
            title: draw(3),
        })
    }

    pub fn from_parts(image: Tensor<F>, attribute: Tensor<F>, title: Tensor<F>) -> Result<Self> {
        if image.shape() != attribute.shape() || image.shape() != title.shape() {
            return Err(Error::shape("PromptBank", image.shape(), attribute.shape()));
        }
        if image.shape().len() != 2 {
            return Err(Error::contract("prompt banks must be 2-D"));
        }
        Ok(PromptBank {
            image,
            attribute,
            title,
        })
    }

    pub fn get(&self, m: Modality) -> &Tensor<F> {
        match m {
            Modality::Image => &self.image,
            Modality::Attribute => &self.attribute,
            Modality::Title => &self.title,
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut Tensor<F> {
        match m {
            Modality::Image => &mut self.image,
            Modality::Attribute => &mut self.attribute,
            Modality::Title => &mut self.title,
        }
    }

    pub fn n_prompts(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Toggles `requires_grad` on all three banks (trainable vs frozen).
    pub fn set_trainable(&mut self, trainable: bool) {
        for m in Modality::ALL {
            self.get_mut(m).requires_grad = trainable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Tensor<F>)> {
        Modality::ALL
            .into_iter()
            .map(move |m| (m.param_name(), self.get(m)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        [
            ("prompt.image", &mut self.image),
            ("prompt.attribute", &mut self.attribute),
            ("prompt.title", &mut self.title),
        ]
        .into_iter()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, t)| t.is_finite())
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.iter_mut() {
            t.zero_grad();
        }
    }

    pub fn cast<G: Real>(&self) -> PromptBank<G> {
        PromptBank {
            image: self.image.cast(),
            attribute: self.attribute.cast(),
            title: self.title.cast(),
        }
    }

    /// Registers one bank on a tape under its parameter name.
    pub fn var<'p>(&'p self, tape: &mut Tape<'p, F>, m: Modality) -> Var {
        tape.param(m.param_name(), self.get(m))
    }
}

/// `[P; R]`: prompt rows first, then representation rows.
pub fn concat_prompt<F: Real>(tape: &mut Tape<'_, F>, prompts: Var, repr: Var) -> Result<Var> {
    let (ps, rs) = (tape.shape(prompts), tape.shape(repr));
    if ps.len() != 2 || rs.len() != 2 || ps[1] != rs[1] {
        return Err(Error::shape("concat_prompt", ps, rs));
    }
    tape.concat_rows(&[prompts, repr])
}
