//! Provenance and artifact writers. Every file written carries the config
//! hash and seed of the run that produced it.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub struct Run {
    pub command: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub config: Value,
    pub out: PathBuf,
}

fn file_digest(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f
            .read(&mut buf)
            .with_context(|| format!("cannot read {}", path.display()))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

impl Run {
    /// Hash of the command, its configuration and the contents of every
    /// input file. Output paths and thread counts are not part of it.
    pub fn new(
        command: &'static str,
        config: &impl Serialize,
        seed: u64,
        inputs: &[&Path],
        out: &Path,
    ) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(serde_json::to_vec(&config)?);
        for p in inputs {
            h.update(file_digest(p)?.as_bytes());
        }
        fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
        Ok(Run {
            command,
            config_hash: format!("{:x}", h.finalize()),
            seed,
            config,
            out: out.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write_json(&self, name: &str, result: &impl Serialize) -> Result<PathBuf> {
        let doc = json!({
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "config": self.config,
            "result": result,
        });
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    /// Rows get trailing `config_hash` and `seed` columns.
    pub fn write_csv<R: AsRef<[String]>>(
        &self,
        name: &str,
        header: &[&str],
        rows: &[R],
    ) -> Result<PathBuf> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path)
            .with_context(|| format!("cannot write {}", path.display()))?;
        let mut head: Vec<&str> = header.to_vec();
        head.extend(["config_hash", "seed"]);
        w.write_record(&head)?;
        let seed = self.seed.to_string();
        for r in rows {
            let mut rec: Vec<&str> = r.as_ref().iter().map(String::as_str).collect();
            rec.push(&self.config_hash);
            rec.push(&seed);
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(path)
    }

    /// Binary containers record provenance in their header metadata.
    pub fn stamp(&self, c: &mut linmlp::model::Container) {
        let meta = c.meta.get_or_insert_with(|| json!({}));
        meta["config_hash"] = json!(self.config_hash);
        meta["seed"] = json!(self.seed);
    }
}

/// Formats a float for CSV with round-trip precision.
pub fn f(v: f64) -> String {
    format!("{v}")
}

/// Reads the `result` object of a JSON artifact.
pub fn read_result(path: &Path) -> Result<Value> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let doc: Value =
        serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
    doc.get("result")
        .cloned()
        .with_context(|| format!("{} has no `result` field", path.display()))
}
