//! Single-file checkpoints and structured report files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "MPLCKPT\0"
//! version  u32
//! hlen     u64      length of the JSON header
//! header   hlen bytes
//! payload  f32 values of every array, in header order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_synth::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numeric::{AdamW, AdamWConfig, Tensor};
use crate::prompts::PromptBank;
use crate::training::{ModelState, Setting};

pub const MAGIC: &[u8; 8] = b"MPLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub state: ModelState,
    pub optimizer: Option<AdamW>,
    /// Training stage that produced the weights, e.g. `upt`, `mpt`, `pretrain`.
    pub phase: String,
    pub setting: Setting,
    pub seed: u64,
    pub best_val_cider: f64,
    pub vocab: Vocabulary,
    /// Resolved run configuration, echoed verbatim.
    pub run_config: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    Prompt,
    FirstMoment,
    SecondMoment,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    role: Role,
    name: String,
    shape: Vec<usize>,
    requires_grad: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    phase: String,
    setting: Setting,
    seed: u64,
    best_val_cider: f64,
    vocab: Vec<String>,
    run_config: serde_json::Value,
    optimizer: Option<OptimizerHeader>,
    arrays: Vec<ArrayEntry>,
}

fn entries(ck: &Checkpoint) -> (Vec<ArrayEntry>, Vec<&[f32]>) {
    let mut meta = Vec::new();
    let mut data: Vec<&[f32]> = Vec::new();
    let entry = |role, name: &str, shape: &[usize], requires_grad| ArrayEntry {
        role,
        name: name.to_string(),
        shape: shape.to_vec(),
        requires_grad,
    };
    for (name, t) in ck.state.params.iter() {
        meta.push(entry(Role::Param, name, t.shape(), t.requires_grad));
        data.push(t.data());
    }
    for (name, t) in ck.state.bank.iter() {
        meta.push(entry(Role::Prompt, name, t.shape(), t.requires_grad));
        data.push(t.data());
    }
    if let Some(opt) = &ck.optimizer {
        for (role, moments) in [
            (Role::FirstMoment, &opt.first_moment),
            (Role::SecondMoment, &opt.second_moment),
        ] {
            for (name, m) in moments {
                meta.push(entry(role, name, &[m.len()], false));
                data.push(m);
            }
        }
    }
    (meta, data)
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let (arrays, data) = entries(ck);
    let header = Header {
        model_config: ck.model_config.clone(),
        phase: ck.phase.clone(),
        setting: ck.setting,
        seed: ck.seed,
        best_val_cider: ck.best_val_cider,
        vocab: ck.vocab.tokens().to_vec(),
        run_config: ck.run_config.clone(),
        optimizer: ck.optimizer.as_ref().map(|o| OptimizerHeader {
            config: o.config,
            step: o.step,
        }),
        arrays,
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = data.iter().map(|d| d.len() * 4).sum();
    let mut out = Vec::with_capacity(20 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for d in data {
        for v in d {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corruption {
                offset: self.pos as u64,
                reason: format!(
                    "{what} needs {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let hlen = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| Error::Corruption {
        offset: 12,
        reason: "header length overflows".into(),
    })?;
    let header_at = r.pos as u64;
    let header: Header =
        serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| Error::Corruption {
            offset: header_at,
            reason: format!("unreadable header: {e}"),
        })?;

    let mut params = BTreeMap::new();
    let mut prompts = BTreeMap::new();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for a in &header.arrays {
        let n: usize = a.shape.iter().product();
        let at = r.pos as u64;
        let raw = r.take(n * 4, &format!("array {}", a.name))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        match a.role {
            Role::Param | Role::Prompt => {
                let t = Tensor::new(&a.shape, data)
                    .map_err(|e| Error::Corruption {
                        offset: at,
                        reason: e.to_string(),
                    })?
                    .with_grad(a.requires_grad);
                let slot = if a.role == Role::Param {
                    &mut params
                } else {
                    &mut prompts
                };
                slot.insert(a.name.clone(), t);
            }
            Role::FirstMoment => {
                first.insert(a.name.clone(), data);
            }
            Role::SecondMoment => {
                second.insert(a.name.clone(), data);
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Corruption {
            offset: r.pos as u64,
            reason: format!("{} trailing bytes after the payload", bytes.len() - r.pos),
        });
    }

    let mut take_prompt = |name: &str| {
        prompts
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
    };
    let bank = PromptBank::from_parts(
        take_prompt("prompt.image")?,
        take_prompt("prompt.attribute")?,
        take_prompt("prompt.title")?,
    )?;
    let params = ModelParams::from_tensors(&header.model_config, params)?;
    let optimizer = header.optimizer.map(|o| AdamW {
        config: o.config,
        step: o.step,
        first_moment: first,
        second_moment: second,
    });
    Ok(Checkpoint {
        model_config: header.model_config,
        state: ModelState { params, bank },
        optimizer,
        phase: header.phase,
        setting: header.setting,
        seed: header.seed,
        best_val_cider: header.best_val_cider,
        vocab: Vocabulary::from_tokens(header.vocab),
        run_config: header.run_config,
    })
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = dir.map_or_else(|| PathBuf::from(&tmp_name), |d| d.join(&tmp_name));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Pretty JSON report, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_atomic(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&text)?)
}
