//! Checkpoint container.
//!
//! ```text
//! offset 0   8 bytes   magic "BAMCKPT\0"
//! offset 8   u32 LE    format version
//! offset 12  u64 LE    header length N
//! offset 20  N bytes   UTF-8 JSON header (see `Header`)
//! then       f64 LE    parameter values, concatenated in header order
//! ```
//!
//! The header carries the model configuration, the fold's class split and
//! base-id table, every training configuration applied so far, the factor
//! median and, per parameter, its name, group, shape and element offset.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use bam_core::data::{BaseIdTable, ClassSplit};
use bam_core::model::{BamConfig, BamModel};
use bam_core::params::ParamGroup;
use bam_core::tensor::Tensor;
use bam_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 8] = b"BAMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: BamConfig,
    pub split: ClassSplit,
    pub base_table: BaseIdTable,
    /// Oldest first: stage 1, then stage 2 if run.
    pub training: Vec<TrainConfig>,
    pub psi_median: f64,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: BamModel,
    pub split: ClassSplit,
    pub training: Vec<TrainConfig>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut params = Vec::new();
        let mut offset = 0;
        for (_, name, group, t) in self.model.store.iter() {
            params.push(ParamEntry {
                name: name.to_string(),
                group,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let header = Header {
            model: self.model.config.clone(),
            split: self.split.clone(),
            base_table: self.model.base_table.clone(),
            training: self.training.clone(),
            psi_median: self.model.psi_median,
            params,
        };
        let json = serde_json::to_vec(&header)?;
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, _, _, t) in self.model.store.iter() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).context("reading checkpoint magic")?;
        ensure!(&magic == MAGIC, "{} is not a checkpoint", path.display());
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        ensure!(version == VERSION, "unsupported checkpoint version {version}");
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).context("truncated checkpoint header")?;
        let header: Header = serde_json::from_slice(&json).context("parsing checkpoint header")?;
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        ensure!(blob.len() % 8 == 0, "parameter blob is not a whole number of f64 values");
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let mut model = BamModel::new(header.model.clone(), header.base_table.clone())?;
        ensure!(
            model.store.len() == header.params.len(),
            "checkpoint lists {} parameters, the configured model has {}",
            header.params.len(),
            model.store.len()
        );
        for entry in &header.params {
            let n: usize = entry.shape.iter().product();
            let Some(data) = values.get(entry.offset..entry.offset + n) else {
                bail!("parameter {} runs past the end of the file", entry.name);
            };
            let id = model
                .store
                .find(&entry.name)
                .with_context(|| format!("checkpoint parameter {} unknown to the model", entry.name))?;
            ensure!(model.store.group(id) == entry.group, "parameter {} changed group", entry.name);
            model.store.load(&entry.name, Tensor::from_vec(&entry.shape, data.to_vec())?)?;
        }
        model.psi_median = header.psi_median;
        Ok(Checkpoint {
            model,
            split: header.split,
            training: header.training,
        })
    }
}
