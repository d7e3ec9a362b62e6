use std::fmt;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mint_core::engine::ImageValueModel;
use mint_core::rng::fingerprint;
use mint_core::synthdata::GeneratorConfig;
use mint_core::{Case, MetadataSchema, TrainedModel};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// A problem with flags or configuration files (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: &'a [String],
    version: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a serde_json::Value,
    inputs: &'a [FileEntry],
    outputs: &'a [FileEntry],
}

/// Collects the inputs read and artifacts written by one command, then
/// records them in `manifest.json` next to the artifacts.
pub struct Run {
    command: &'static str,
    args: Vec<String>,
    seed: u64,
    config: serde_json::Value,
    out: PathBuf,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

impl Run {
    pub fn new(command: &'static str, seed: u64, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Run {
            command,
            args: std::env::args().skip(1).collect(),
            seed,
            config: serde_json::Value::Null,
            out: out.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// A run that only reads inputs (serve, replay).
    pub fn read_only(command: &'static str) -> Self {
        Run {
            command,
            args: Vec::new(),
            seed: 0,
            config: serde_json::Value::Null,
            out: PathBuf::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn set_config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        self.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(FileEntry {
            path: path.display().to_string(),
            sha256: fingerprint(&bytes),
        });
        Ok(bytes)
    }

    pub fn read_json<T: DeserializeOwned>(&mut self, path: &Path) -> Result<T> {
        let bytes = self.read(path)?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(FileEntry {
            path: name.to_string(),
            sha256: fingerprint(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn finish(self) -> Result<()> {
        let config_bytes = serde_json::to_vec(&self.config)?;
        let manifest = Manifest {
            command: self.command,
            args: &self.args,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            config_hash: fingerprint(&config_bytes),
            config: &self.config,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        let path = self.out.join("manifest.json");
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }
}

/// Reads a JSON config file given with `--config`.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)
        .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))
}

pub struct Dataset {
    pub schema: MetadataSchema,
    pub train: Vec<Case>,
    pub val: Vec<Case>,
    pub test: Vec<Case>,
    pub generator: Option<GeneratorConfig>,
}

impl Dataset {
    pub fn load(run: &mut Run, dir: &Path) -> Result<Self> {
        let schema: MetadataSchema = run.read_json(&dir.join("schema.json"))?;
        let mut split = |name: &str| -> Result<Vec<Case>> {
            let path = dir.join(format!("{name}.jsonl"));
            let bytes = run.read(&path)?;
            mint_core::case::read_cases_jsonl(BufReader::new(bytes.as_slice()), &schema)
                .with_context(|| format!("parsing {}", path.display()))
        };
        let (train, val, test) = (split("train")?, split("val")?, split("test")?);
        let gen_path = dir.join("generator.json");
        let generator = if gen_path.exists() {
            Some(run.read_json(&gen_path)?)
        } else {
            None
        };
        Ok(Dataset {
            schema,
            train,
            val,
            test,
            generator,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[Case]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(config_error(format!(
                "unknown split `{name}` (expected train|val|test)"
            ))),
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.generator {
            Some(g) => g.num_classes,
            None => self
                .train
                .iter()
                .chain(&self.val)
                .chain(&self.test)
                .map(|c| c.label + 1)
                .max()
                .unwrap_or(0),
        }
    }

    pub fn all_cases(&self) -> impl Iterator<Item = &Case> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

pub struct Model {
    pub model: TrainedModel,
    pub ivm: Option<ImageValueModel>,
}

impl Model {
    pub fn load(run: &mut Run, dir: &Path, schema: &MetadataSchema) -> Result<Self> {
        let model: TrainedModel = run.read_json(&dir.join("model.json"))?;
        model.check_schema(schema)?;
        let ivm_path = dir.join("image_value.json");
        let ivm = if ivm_path.exists() {
            Some(run.read_json(&ivm_path)?)
        } else {
            None
        };
        Ok(Model { model, ivm })
    }
}
