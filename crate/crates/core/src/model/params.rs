use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

/// Every trainable array of the encoders and the decoder, keyed by a stable name.
///
/// Names are dotted paths such as `text.enc.0.attn.wq` or `dec.out.w`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F = f32> {
    tensors: BTreeMap<String, Tensor<F>>,
}

fn attention_params(prefix: &str, d: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    for w in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.{w}"), vec![d, d], Init::FanIn(d)));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        out.push((format!("{prefix}.{b}"), vec![1, d], Init::Zeros));
    }
}

fn norm_params(prefix: &str, d: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((format!("{prefix}.g"), vec![1, d], Init::Ones));
    out.push((format!("{prefix}.b"), vec![1, d], Init::Zeros));
}

fn ffn_params(prefix: &str, d: usize, h: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((format!("{prefix}.w1"), vec![d, h], Init::FanIn(d)));
    out.push((format!("{prefix}.b1"), vec![1, h], Init::Zeros));
    out.push((format!("{prefix}.w2"), vec![h, d], Init::FanIn(h)));
    out.push((format!("{prefix}.b2"), vec![1, d], Init::Zeros));
}

#[derive(Clone, Copy, Debug)]
enum Init {
    FanIn(usize),
    Zeros,
    Ones,
}

/// Name, shape and initializer of every parameter implied by `config`, in a fixed order.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d;
    let h = config.ffn_width;
    let mut out = Vec::new();
    out.push((
        "embed.tokens".to_string(),
        vec![config.vocab_size, d],
        Init::FanIn(d),
    ));
    out.push((
        "image.proj.w".to_string(),
        vec![config.image_feature_dim, d],
        Init::FanIn(config.image_feature_dim),
    ));
    out.push(("image.proj.b".to_string(), vec![1, d], Init::Zeros));
    for enc in ["image.enc", "text.enc"] {
        for l in 0..config.n_enc_layers {
            let p = format!("{enc}.{l}");
            norm_params(&format!("{p}.ln1"), d, &mut out);
            attention_params(&format!("{p}.attn"), d, &mut out);
            norm_params(&format!("{p}.ln2"), d, &mut out);
            ffn_params(&format!("{p}.ffn"), d, h, &mut out);
        }
        norm_params(&format!("{enc}.ln"), d, &mut out);
    }
    for l in 0..config.n_dec_layers {
        let p = format!("dec.{l}");
        norm_params(&format!("{p}.ln1"), d, &mut out);
        attention_params(&format!("{p}.self"), d, &mut out);
        norm_params(&format!("{p}.ln2"), d, &mut out);
        attention_params(&format!("{p}.cross"), d, &mut out);
        norm_params(&format!("{p}.ln3"), d, &mut out);
        ffn_params(&format!("{p}.ffn"), d, h, &mut out);
    }
    norm_params("dec.ln", d, &mut out);
    out.push((
        "dec.out.w".to_string(),
        vec![d, config.vocab_size],
        Init::FanIn(d),
    ));
    out.push((
        "dec.out.b".to_string(),
        vec![1, config.vocab_size],
        Init::Zeros,
    ));
    out
}

impl<F: Real> ModelParams<F> {
    /// Seeded initialization: weights uniform in ±1/sqrt(fan_in), biases zero, norm gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout(config) {
            let t = match init {
                Init::FanIn(fan_in) => Tensor::uniform_fan_in(&shape, fan_in, &mut rng),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, F::one()),
            };
            tensors.insert(name, t.with_grad(true));
        }
        Ok(ModelParams { tensors })
    }

    /// Rebuilds a parameter set from named arrays, checking them against `config`.
    pub fn from_tensors(
        config: &ModelConfig,
        tensors: BTreeMap<String, Tensor<F>>,
    ) -> Result<Self> {
        let expected = layout(config);
        if expected.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} model arrays, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in &expected {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing model array `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("ModelParams::from_tensors", shape, t.shape()));
            }
        }
        let tensors = tensors
            .into_iter()
            .map(|(k, t)| (k, t.with_grad(true)))
            .collect();
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.zero_grad();
        }
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::desk(40, 12, 4)
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::<f32>::init(&cfg(), 3).unwrap();
        let b = ModelParams::<f32>::init(&cfg(), 3).unwrap();
        let c = ModelParams::<f32>::init(&cfg(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_follow_config() {
        let p = ModelParams::<f32>::init(&cfg(), 0).unwrap();
        assert_eq!(p.get("embed.tokens").shape(), &[40, 64]);
        assert_eq!(p.get("image.proj.w").shape(), &[12, 64]);
        assert_eq!(p.get("dec.out.w").shape(), &[64, 40]);
        assert_eq!(p.get("dec.1.cross.wk").shape(), &[64, 64]);
        assert!(p.try_get("dec.2.cross.wk").is_none());
    }

    #[test]
    fn from_tensors_rejects_shape_mismatch() {
        let p = ModelParams::<f32>::init(&cfg(), 0).unwrap();
        let mut map: BTreeMap<_, _> = p.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        assert!(ModelParams::from_tensors(&cfg(), map.clone()).is_ok());
        map.insert("dec.out.b".into(), Tensor::zeros(&[1, 41]));
        assert!(ModelParams::from_tensors(&cfg(), map).is_err());
    }
}
