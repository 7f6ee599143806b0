use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Which half of the category inventory a corpus draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Source categories used for pretraining, written category-first.
    Pretrain,
    /// Held-out categories used for few-shot adaptation, written brand-first.
    Novel,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Pretrain => 1,
            Domain::Novel => 2,
        }
    }

    fn id_prefix(self) -> &'static str {
        match self {
            Domain::Pretrain => "src",
            Domain::Novel => "nov",
        }
    }
}

/// Parameters of the synthetic product generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_products: usize,
    /// Categories per domain; the two domains never share a category.
    pub n_categories: usize,
    pub brands_per_category: usize,
    pub n_colors: usize,
    pub n_materials: usize,
    pub n_sizes: usize,
    /// Title templates with `{brand}`, `{category}`, `{color}`, `{material}`,
    /// `{size}` slots. Category `c` renders with `templates[c % len]`.
    /// Empty means the domain's built-in style.
    #[serde(default)]
    pub templates: Vec<String>,
    /// Standard deviation of the gaussian noise added to image features.
    pub noise: f64,
    /// Probability that each visual factor is also listed as an attribute.
    pub expose_prob: f64,
    pub image_seq_len: usize,
    pub image_feature_dim: usize,
    pub domain: Domain,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_products: 1000,
            n_categories: 4,
            brands_per_category: 3,
            n_colors: 8,
            n_materials: 6,
            n_sizes: 4,
            templates: Vec::new(),
            noise: 0.3,
            expose_prob: 0.5,
            image_seq_len: 4,
            image_feature_dim: 16,
            domain: Domain::Novel,
            seed: 7,
        }
    }
}

const CATEGORIES: [&str; 24] = [
    "mug",
    "lamp",
    "kettle",
    "backpack",
    "sneaker",
    "jacket",
    "blender",
    "headphones",
    "watch",
    "wallet",
    "umbrella",
    "notebook",
    "candle",
    "teapot",
    "scarf",
    "toaster",
    "planter",
    "leash",
    "sunglasses",
    "cushion",
    "skillet",
    "thermos",
    "tent",
    "saddle",
];
const COLORS: [&str; 16] = [
    "red", "blue", "green", "black", "white", "grey", "yellow", "orange", "purple", "pink",
    "brown", "teal", "navy", "olive", "maroon", "beige",
];
const MATERIALS: [&str; 12] = [
    "cotton", "leather", "steel", "ceramic", "bamboo", "wool", "glass", "oak", "nylon", "linen",
    "copper", "silicone",
];
const SIZES: [&str; 8] = [
    "small",
    "medium",
    "large",
    "compact",
    "mini",
    "xl",
    "oversized",
    "slim",
];
const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "zen", "tor", "vex", "ra", "qui", "bel", "dor", "fa", "nu", "sil", "tek",
    "wa", "yor",
];

const PRETRAIN_STYLE: [&str; 3] = [
    "{category} {size} {color} {material} by {brand}",
    "{category} in {color} {material} {size} from {brand}",
    "{material} {category} {color} {size} by {brand}",
];
const NOVEL_STYLE: [&str; 3] = [
    "{brand} {color} {material} {category} {size} edition",
    "{brand} premium {size} {category} {color} {material}",
    "{brand} {material} {category} for home {color} {size}",
];

/// Slots rendered into image patches, in patch order.
const VISUAL_SLOTS: [Slot; 4] = [Slot::Category, Slot::Color, Slot::Material, Slot::Size];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Category,
    Color,
    Material,
    Size,
}

/// Latent factors of one product. Indices are into the domain's inventories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentFactors {
    /// Index into the global category inventory.
    pub category: usize,
    pub brand: usize,
    pub color: usize,
    pub material: usize,
    pub size: usize,
}

/// One product: image feature sequence, `key:value` attributes and the title.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductRecord {
    pub id: String,
    pub image_features: Tensor<f32>,
    pub attributes: Vec<String>,
    pub title: String,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_products", self.n_products),
            ("n_categories", self.n_categories),
            ("brands_per_category", self.brands_per_category),
            ("n_colors", self.n_colors),
            ("n_materials", self.n_materials),
            ("n_sizes", self.n_sizes),
            ("image_seq_len", self.image_seq_len),
            ("image_feature_dim", self.image_feature_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let limits = [
            ("n_categories", self.n_categories, CATEGORIES.len() / 2),
            ("n_colors", self.n_colors, COLORS.len()),
            ("n_materials", self.n_materials, MATERIALS.len()),
            ("n_sizes", self.n_sizes, SIZES.len()),
        ];
        for (name, v, max) in limits {
            if v > max {
                return Err(Error::Config(format!(
                    "{name} = {v} exceeds the inventory of {max}"
                )));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be >= 0", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.expose_prob) {
            return Err(Error::Config("expose_prob must lie in [0, 1]".into()));
        }
        for t in &self.templates {
            for slot in ["{brand}", "{category}", "{color}", "{material}", "{size}"] {
                if !t.contains(slot) {
                    return Err(Error::Config(format!("template `{t}` lacks {slot}")));
                }
            }
        }
        Ok(())
    }

    fn first_category(&self) -> usize {
        match self.domain {
            Domain::Pretrain => 0,
            Domain::Novel => CATEGORIES.len() / 2,
        }
    }

    fn template(&self, local_category: usize) -> &str {
        if self.templates.is_empty() {
            let style: &[&str] = match self.domain {
                Domain::Pretrain => &PRETRAIN_STYLE,
                Domain::Novel => &NOVEL_STYLE,
            };
            style[local_category % style.len()]
        } else {
            &self.templates[local_category % self.templates.len()]
        }
    }
}

/// Pseudo-word brand name; unique per (category, index).
pub fn brand_name(category: usize, index: usize) -> String {
    let a = SYLLABLES[(category * 7 + index * 3) % SYLLABLES.len()];
    let b = SYLLABLES[(category * 5 + index * 11 + 1) % SYLLABLES.len()];
    format!("{a}{b}{}", char::from(b'a' + (category % 26) as u8))
}

pub fn category_name(category: usize) -> &'static str {
    CATEGORIES[category]
}

pub fn color_name(color: usize) -> &'static str {
    COLORS[color]
}

/// Fixed per-patch factor embeddings. They depend only on the seed, so both
/// domains generated with one seed share the same visual world.
struct VisualWorld {
    /// `tables[patch][value]` is a feature vector of length `image_feature_dim`.
    tables: Vec<Vec<Vec<f32>>>,
}

impl VisualWorld {
    fn new(spec: &CorpusSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5E_ED0F_F00D);
        let tables = (0..spec.image_seq_len)
            .map(|patch| {
                let values = match VISUAL_SLOTS[patch % VISUAL_SLOTS.len()] {
                    Slot::Category => CATEGORIES.len(),
                    Slot::Color => COLORS.len(),
                    Slot::Material => MATERIALS.len(),
                    Slot::Size => SIZES.len(),
                };
                (0..values)
                    .map(|_| {
                        (0..spec.image_feature_dim)
                            .map(|_| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                z as f32
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        VisualWorld { tables }
    }

    fn render(&self, spec: &CorpusSpec, f: &LatentFactors, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let dim = spec.image_feature_dim;
        let mut data = Vec::with_capacity(spec.image_seq_len * dim);
        for (patch, table) in self.tables.iter().enumerate() {
            let value = match VISUAL_SLOTS[patch % VISUAL_SLOTS.len()] {
                Slot::Category => f.category,
                Slot::Color => f.color,
                Slot::Material => f.material,
                Slot::Size => f.size,
            };
            for &base in &table[value] {
                let z: f64 = StandardNormal.sample(rng);
                data.push(base + (spec.noise * z) as f32);
            }
        }
        Tensor::new(&[spec.image_seq_len, dim], data).expect("image shape is consistent")
    }
}

fn product_rng(spec: &CorpusSpec, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.domain.tag() << 40 | index as u64);
    rng
}

fn render_title(template: &str, f: &LatentFactors) -> String {
    template
        .replace("{brand}", &brand_name(f.category, f.brand))
        .replace("{category}", CATEGORIES[f.category])
        .replace("{color}", COLORS[f.color])
        .replace("{material}", MATERIALS[f.material])
        .replace("{size}", SIZES[f.size])
}

/// Generates products together with the latent factors behind them.
pub fn generate_with_factors(spec: &CorpusSpec) -> Result<Vec<(ProductRecord, LatentFactors)>> {
    spec.validate()?;
    let world = VisualWorld::new(spec);
    let first = spec.first_category();
    let out = (0..spec.n_products)
        .map(|i| {
            let mut rng = product_rng(spec, i);
            let local_category = rng.random_range(0..spec.n_categories);
            let f = LatentFactors {
                category: first + local_category,
                brand: rng.random_range(0..spec.brands_per_category),
                color: rng.random_range(0..spec.n_colors),
                material: rng.random_range(0..spec.n_materials),
                size: rng.random_range(0..spec.n_sizes),
            };

            // Brand is never visual, so it is always listed; each visual factor
            // is listed with `expose_prob`, topped up to at least two entries.
            let mut exposed = [false; 4];
            for e in exposed.iter_mut() {
                *e = rng.random::<f64>() < spec.expose_prob;
            }
            if !exposed.iter().any(|&e| e) {
                exposed[rng.random_range(0..4)] = true;
            }
            let mut attributes = vec![format!("brand:{}", brand_name(f.category, f.brand))];
            let values = [
                ("category", CATEGORIES[f.category]),
                ("color", COLORS[f.color]),
                ("material", MATERIALS[f.material]),
                ("size", SIZES[f.size]),
            ];
            for ((key, value), shown) in values.iter().zip(exposed) {
                if shown {
                    attributes.push(format!("{key}:{value}"));
                }
            }

            let image_features = world.render(spec, &f, &mut rng);
            let title = render_title(spec.template(local_category), &f);
            let record = ProductRecord {
                id: format!("{}-{i:06}", spec.domain.id_prefix()),
                image_features,
                attributes,
                title,
            };
            (record, f)
        })
        .collect();
    Ok(out)
}

/// Synthetic product corpus, deterministic under `spec.seed`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<ProductRecord>> {
    Ok(generate_with_factors(spec)?
        .into_iter()
        .map(|(r, _)| r)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let spec = CorpusSpec {
            n_products: 20,
            ..Default::default()
        };
        assert_eq!(
            generate_corpus(&spec).unwrap(),
            generate_corpus(&spec).unwrap()
        );
        let other = CorpusSpec {
            seed: 8,
            ..spec.clone()
        };
        assert_ne!(
            generate_corpus(&spec).unwrap(),
            generate_corpus(&other).unwrap()
        );
    }

    #[test]
    fn records_satisfy_invariants() {
        let spec = CorpusSpec {
            n_products: 200,
            expose_prob: 0.0,
            ..Default::default()
        };
        for r in generate_corpus(&spec).unwrap() {
            assert!(!r.title.is_empty());
            assert!(r.attributes.len() >= 2, "{:?}", r.attributes);
            assert!(r.image_features.is_finite());
            assert_eq!(r.image_features.shape(), &[4, 16]);
        }
    }

    #[test]
    fn domains_have_disjoint_categories_and_styles() {
        let base = CorpusSpec {
            n_products: 100,
            ..Default::default()
        };
        let src = generate_with_factors(&CorpusSpec {
            domain: Domain::Pretrain,
            ..base.clone()
        })
        .unwrap();
        let nov = generate_with_factors(&base).unwrap();
        let src_cats: Vec<_> = src.iter().map(|(_, f)| f.category).collect();
        assert!(nov.iter().all(|(_, f)| !src_cats.contains(&f.category)));
        // brand-first vs category-first
        for (r, f) in &nov {
            assert!(r.title.starts_with(&brand_name(f.category, f.brand)));
        }
        for (r, f) in &src {
            assert!(!r.title.starts_with(&brand_name(f.category, f.brand)));
        }
    }

    #[test]
    fn identical_factors_without_noise_give_identical_images() {
        let spec = CorpusSpec {
            n_products: 300,
            noise: 0.0,
            n_categories: 1,
            brands_per_category: 1,
            n_colors: 2,
            n_materials: 1,
            n_sizes: 1,
            ..Default::default()
        };
        let all = generate_with_factors(&spec).unwrap();
        let (a, fa) = &all[0];
        let (b, _) = all[1..].iter().find(|(_, f)| f == fa).expect("repeat");
        assert_eq!(a.image_features, b.image_features);
    }

    #[test]
    fn brand_names_are_distinct_within_category() {
        let names: std::collections::BTreeSet<_> = (0..12)
            .flat_map(|c| (0..3).map(move |b| brand_name(c, b)))
            .collect();
        assert_eq!(names.len(), 36);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(CorpusSpec {
            n_products: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(CorpusSpec {
            noise: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(CorpusSpec {
            n_categories: 13,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(CorpusSpec {
            templates: vec!["{brand} thing".into()],
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
