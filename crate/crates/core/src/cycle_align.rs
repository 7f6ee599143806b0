//! Cycle alignment: every prompt bank queries every bank (itself included),
//! and the nine retrieved blocks are stacked into the aligned prompt set.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{Real, Tape, Tensor, Var};
use crate::prompts::{Modality, PromptBank};

use Modality::{Attribute as A, Image as I, Title as T};

/// Retrieval order of the nine blocks, query-major.
pub const BLOCK_ORDER: [(Modality, Modality); 9] = [
    (I, I),
    (I, A),
    (I, T),
    (A, A),
    (A, I),
    (A, T),
    (T, T),
    (T, I),
    (T, A),
];

pub fn block_label(query: Modality, key: Modality) -> String {
    format!("{query}->{key}")
}

/// `softmax(scale · query · keyᵀ) · key`, returning the output and the weights.
pub fn retrieve<F: Real>(
    tape: &mut Tape<'_, F>,
    query: Var,
    key: Var,
    scale: F,
) -> Result<(Var, Var)> {
    if tape.shape(query) != tape.shape(key) {
        return Err(Error::shape("retrieve", tape.shape(query), tape.shape(key)));
    }
    let scores = tape.matmul_nt(query, key)?;
    let scores = if scale == F::one() {
        scores
    } else {
        tape.scale(scores, scale)
    };
    let weights = tape.softmax_rows(scores)?;
    let out = tape.matmul(weights, key)?;
    Ok((out, weights))
}

/// Tape handles of one alignment pass.
pub struct AlignedVars {
    pub blocks: Vec<Var>,
    pub weights: Vec<Var>,
    pub fused: Var,
}

/// Differentiable cycle alignment over banks already registered on `tape`,
/// indexed as `[image, attribute, title]`.
pub fn cycle_align_vars<F: Real>(
    tape: &mut Tape<'_, F>,
    banks: [Var; 3],
    scale: F,
) -> Result<AlignedVars> {
    let idx = |m: Modality| match m {
        I => 0,
        A => 1,
        T => 2,
    };
    let mut blocks = Vec::with_capacity(9);
    let mut weights = Vec::with_capacity(9);
    for (q, k) in BLOCK_ORDER {
        let (out, w) = retrieve(tape, banks[idx(q)], banks[idx(k)], scale)?;
        blocks.push(out);
        weights.push(w);
    }
    let fused = tape.concat_rows(&blocks)?;
    Ok(AlignedVars {
        blocks,
        weights,
        fused,
    })
}

/// Registers `bank` on `tape` and aligns it.
pub fn cycle_align_on_tape<'p, F: Real>(
    tape: &mut Tape<'p, F>,
    bank: &'p PromptBank<F>,
    scale: F,
) -> Result<AlignedVars> {
    let banks = Modality::ALL.map(|m| bank.var(tape, m));
    cycle_align_vars(tape, banks, scale)
}

/// The aligned prompt set `P̂` and its nine labeled blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPromptSet<F = f32> {
    /// `(query, key, block)` in [`BLOCK_ORDER`].
    pub blocks: Vec<(Modality, Modality, Tensor<F>)>,
    /// Row-stochastic `N_P × N_P` retrieval weights, same order as `blocks`.
    pub weights: Vec<Tensor<F>>,
    /// `9·N_P × d` concatenation of the blocks.
    pub fused: Tensor<F>,
}

/// Parameter-free, deterministic alignment of a bank.
pub fn cycle_align<F: Real>(bank: &PromptBank<F>, scale: f64) -> Result<AlignedPromptSet<F>> {
    let mut tape = Tape::inference();
    let v = cycle_align_on_tape(&mut tape, bank, F::cast_f64(scale))?;
    Ok(AlignedPromptSet {
        blocks: BLOCK_ORDER
            .iter()
            .zip(&v.blocks)
            .map(|(&(q, k), &b)| (q, k, tape.tensor(b)))
            .collect(),
        weights: v.weights.iter().map(|&w| tape.tensor(w)).collect(),
        fused: tape.tensor(v.fused),
    })
}

#[derive(Serialize)]
struct DumpBlock {
    label: String,
    query: Modality,
    key: Modality,
    weights: Vec<Vec<f64>>,
    /// Per query row, the indices of the most attended key prompts, best first.
    top: Vec<Vec<usize>>,
    top_weights: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct Dump<'a, C: Serialize> {
    format: &'static str,
    n_prompts: usize,
    top_k: usize,
    config: &'a C,
    blocks: Vec<DumpBlock>,
}

/// Indices of the `k` largest entries of `row`, descending; ties to the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Serializes the nine retrieval weight matrices with their top-`k` entries.
pub fn attention_dump_json<F: Real, C: Serialize>(
    aligned: &AlignedPromptSet<F>,
    top_k: usize,
    config: &C,
) -> Result<String> {
    let blocks = aligned
        .blocks
        .iter()
        .zip(&aligned.weights)
        .map(|((q, k, _), w)| {
            let rows: Vec<Vec<f64>> = (0..w.rows())
                .map(|i| w.row(i).iter().map(|v| v.as_f64()).collect())
                .collect();
            let top: Vec<Vec<usize>> = rows.iter().map(|r| top_k_indices(r, top_k)).collect();
            let top_weights = rows
                .iter()
                .zip(&top)
                .map(|(r, t)| t.iter().map(|&i| r[i]).collect())
                .collect();
            DumpBlock {
                label: block_label(*q, *k),
                query: *q,
                key: *k,
                weights: rows,
                top,
                top_weights,
            }
        })
        .collect();
    let dump = Dump {
        format: "mpl-attention",
        n_prompts: aligned.weights.first().map_or(0, |w| w.rows()),
        top_k,
        config,
        blocks,
    };
    Ok(serde_json::to_string_pretty(&dump)?)
}

pub fn write_attention_dump<F: Real, C: Serialize>(
    path: &Path,
    aligned: &AlignedPromptSet<F>,
    top_k: usize,
    config: &C,
) -> Result<()> {
    let text = attention_dump_json(aligned, top_k, config)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn identical_banks_give_identical_blocks() {
        let c = ModelConfig::desk(40, 8, 2);
        let b = PromptBank::<f32>::init(&c, 1).unwrap();
        let same =
            PromptBank::from_parts(b.image.clone(), b.image.clone(), b.image.clone()).unwrap();
        let out = cycle_align(&same, 1.0).unwrap();
        for (_, _, blk) in &out.blocks[1..] {
            assert_eq!(blk, &out.blocks[0].2);
        }
    }

    #[test]
    fn fused_shape_and_order() {
        let c = ModelConfig::desk(40, 8, 2);
        let b = PromptBank::<f32>::init(&c, 1).unwrap();
        let out = cycle_align(&b, 1.0).unwrap();
        assert_eq!(out.fused.shape(), &[72, 64]);
        for (i, (q, k, blk)) in out.blocks.iter().enumerate() {
            assert_eq!((*q, *k), BLOCK_ORDER[i]);
            assert_eq!(&out.fused.data()[i * 8 * 64..(i + 1) * 8 * 64], blk.data());
        }
    }

    #[test]
    fn rank_one_key_returns_that_row() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Tensor::new(&[3, 2], vec![1.0, -2.0, 0.3, 0.1, 5.0, 4.0]).unwrap());
        let k = tape.leaf(Tensor::new(&[3, 2], vec![0.7, -1.5, 0.7, -1.5, 0.7, -1.5]).unwrap());
        let (out, _) = retrieve(&mut tape, q, k, 1.0).unwrap();
        for row in tape.value(out).chunks(2) {
            assert!((row[0] - 0.7).abs() < 1e-12 && (row[1] + 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn retrieve_rejects_mismatch() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Tensor::zeros(&[3, 2]));
        let k = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(retrieve(&mut tape, q, k, 1.0).is_err());
    }

    #[test]
    fn top_k_breaks_ties_low() {
        assert_eq!(top_k_indices(&[0.2, 0.5, 0.2, 0.1], 3), vec![1, 0, 2]);
    }
}
