use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use linmlp::capture::{make_splits, CorpusSplits, SplitSpec};
use linmlp::model::tokenizer::tokenize;
use linmlp::model::{load_weights, model_container, write_container};
use linmlp::Model64;
use serde::Serialize;

use crate::out::Run;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitsArg {
    /// Fixed 0–10K / 10K–30K / 30K–80K token ranges.
    Standard,
    /// The same 1:2:5 proportions over the selected tokens.
    Scaled,
}

/// Byte-level corpus selection shared by every subcommand that reads text.
#[derive(Args, Clone, Debug, Serialize)]
pub struct CorpusArgs {
    /// Raw text or binary file, tokenized one byte per token.
    #[arg(long)]
    pub corpus: PathBuf,
    /// First byte of the corpus to use.
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
    /// Number of tokens to use from `offset` (default: to the end).
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, value_enum, default_value = "scaled")]
    pub splits: SplitsArg,
}

pub struct Corpus {
    pub tokens: Vec<u32>,
    pub splits: CorpusSplits,
}

impl CorpusArgs {
    pub fn load(&self) -> Result<Corpus> {
        let tokens = load_tokens(&self.corpus, self.offset, self.limit)?;
        let spec = match self.splits {
            SplitsArg::Standard => SplitSpec::Standard,
            SplitsArg::Scaled => SplitSpec::Scaled,
        };
        let splits = make_splits(tokens.len(), spec)
            .with_context(|| format!("splitting {} tokens", tokens.len()))?;
        Ok(Corpus { tokens, splits })
    }
}

pub fn load_tokens(path: &Path, offset: usize, limit: Option<usize>) -> Result<Vec<u32>> {
    if !path.exists() {
        bail!("corpus not found: {}", path.display());
    }
    let bytes = fs::read(path).with_context(|| format!("cannot read corpus {}", path.display()))?;
    if offset >= bytes.len() {
        bail!(
            "offset {offset} is past the end of {} ({} bytes)",
            path.display(),
            bytes.len()
        );
    }
    let end = limit.map_or(bytes.len(), |l| (offset + l).min(bytes.len()));
    Ok(tokenize(&bytes[offset..end]))
}

pub fn load_model(path: &Path) -> Result<Model64> {
    if !path.exists() {
        bail!("model not found: {}", path.display());
    }
    load_weights(path).with_context(|| format!("cannot load model {}", path.display()))
}

pub fn save_model(run: &Run, model: &Model64, name: &str) -> Result<PathBuf> {
    let mut c = model_container(model)?;
    run.stamp(&mut c);
    let path = run.path(name);
    write_container(&path, &c)?;
    Ok(path)
}

pub fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}
