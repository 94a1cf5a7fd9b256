//! File containers for checkpoints, datasets and CAVs.
//!
//! Every container is a magic line, a one-line JSON header, then raw
//! little-endian blocks (`f64` for real values, `u64` for integers). Files
//! are written to a temporary sibling and renamed into place.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cav::{Cav, CavSolver};
use crate::data::{BiasSpec, ConceptDataset, SplitTag};
use crate::error::{Error, Result};
use crate::net::{Layer, LayerKind, LayeredModel};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &str = "CLARC-CHECKPOINT 1";
const DATASET_MAGIC: &str = "CLARC-DATASET 1";
const CAV_MAGIC: &str = "CLARC-CAV 1";

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn encode<H: Serialize>(magic: &str, header: &H, f64_blocks: &[&[f64]], u64_blocks: &[&[u64]]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(serde_json::to_string(header)?.as_bytes());
    out.push(b'\n');
    for block in f64_blocks {
        for v in *block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for block in u64_blocks {
        for v in *block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Decoder {
    body: Vec<u8>,
    at: usize,
}

impl Decoder {
    fn open<H: DeserializeOwned>(path: &Path, magic: &str) -> Result<(H, Self)> {
        let mut r = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != magic {
            return Err(Error::Format(format!(
                "{}: expected '{magic}', found '{}'",
                path.display(),
                line.trim_end()
            )));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header = serde_json::from_str(line.trim_end())?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        Ok((header, Self { body, at: 0 }))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at + n * 8;
        if end > self.body.len() {
            return Err(Error::Format("data block truncated".into()));
        }
        let s = &self.body[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u64s(&mut self, n: usize) -> Result<Vec<u64>> {
        Ok(self
            .take(n)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(self) -> Result<()> {
        if self.at != self.body.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last block",
                self.body.len() - self.at
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    input_shape: Vec<usize>,
    layers: Vec<LayerKind>,
    split_index: usize,
    frozen_upto: Option<usize>,
    seed: u64,
}

pub fn save_checkpoint(path: &Path, model: &LayeredModel) -> Result<()> {
    let header = CheckpointHeader {
        input_shape: model.input_shape().to_vec(),
        layers: model.layers().iter().map(|l| l.kind).collect(),
        split_index: model.split_index(),
        frozen_upto: model.frozen_upto(),
        seed: model.seed(),
    };
    let blocks: Vec<&[f64]> = model
        .layers()
        .iter()
        .filter_map(|l| l.params.as_ref())
        .flat_map(|p| [p.weight.data(), p.bias.data()])
        .collect();
    write_atomic(path, &encode(CHECKPOINT_MAGIC, &header, &blocks, &[])?)
}

pub fn load_checkpoint(path: &Path) -> Result<LayeredModel> {
    let (h, mut d): (CheckpointHeader, _) = Decoder::open(path, CHECKPOINT_MAGIC)?;
    let mut layers = Vec::with_capacity(h.layers.len());
    for kind in h.layers {
        layers.push(match kind.param_shapes() {
            Some((ws, bs)) => {
                let w = d.f64s(ws.iter().product())?;
                let b = d.f64s(bs.iter().product())?;
                Layer::with_params(kind, Tensor::new(ws, w)?, Tensor::new(bs, b)?)?
            }
            None => Layer::parameterless(kind)?,
        });
    }
    d.finish()?;
    let mut model = LayeredModel::new(h.input_shape, layers, h.split_index, h.seed)?;
    model.set_frozen_upto(h.frozen_upto)?;
    Ok(model)
}

/// Provenance stored alongside a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub bias: Option<BiasSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    shape: Vec<usize>,
    num_classes: usize,
    split: SplitTag,
    meta: DatasetMeta,
}

pub fn save_dataset(path: &Path, data: &ConceptDataset, meta: &DatasetMeta) -> Result<()> {
    data.validate()?;
    let header = DatasetHeader {
        shape: data.inputs.shape().to_vec(),
        num_classes: data.num_classes,
        split: data.split,
        meta: meta.clone(),
    };
    let labels: Vec<u64> = data.labels.iter().map(|&l| l as u64).collect();
    let flags: Vec<u64> = data.flags.iter().map(|&f| f as u64).collect();
    write_atomic(
        path,
        &encode(DATASET_MAGIC, &header, &[data.inputs.data()], &[&labels, &flags])?,
    )
}

pub fn load_dataset(path: &Path) -> Result<(ConceptDataset, DatasetMeta)> {
    let (h, mut d): (DatasetHeader, _) = Decoder::open(path, DATASET_MAGIC)?;
    let n = h.shape.first().copied().unwrap_or(0);
    let inputs = Tensor::new(h.shape.clone(), d.f64s(h.shape.iter().product())?)?;
    let labels = d.u64s(n)?.into_iter().map(|l| l as usize).collect();
    let flags = d
        .u64s(n)?
        .into_iter()
        .map(|f| match f {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("artifact flag {v}"))),
        })
        .collect::<Result<_>>()?;
    d.finish()?;
    let data = ConceptDataset {
        inputs,
        labels,
        flags,
        split: h.split,
        num_classes: h.num_classes,
    };
    data.validate()?;
    Ok((data, h.meta))
}

#[derive(Debug, Serialize, Deserialize)]
struct CavHeader {
    solver: CavSolver,
    lambda: Option<f64>,
    layer_index: usize,
    norm: f64,
    dim: usize,
    has_bias: bool,
}

pub fn save_cav(path: &Path, cav: &Cav) -> Result<()> {
    let header = CavHeader {
        solver: cav.solver,
        lambda: cav.hyperparameter,
        layer_index: cav.layer_index,
        norm: cav.norm,
        dim: cav.dim(),
        has_bias: cav.bias_term.is_some(),
    };
    let bias: Vec<f64> = cav.bias_term.into_iter().collect();
    write_atomic(path, &encode(CAV_MAGIC, &header, &[&cav.direction, &bias], &[])?)
}

pub fn load_cav(path: &Path) -> Result<Cav> {
    let (h, mut d): (CavHeader, _) = Decoder::open(path, CAV_MAGIC)?;
    let direction = d.f64s(h.dim)?;
    let bias_term = if h.has_bias { Some(d.f64s(1)?[0]) } else { None };
    d.finish()?;
    Ok(Cav {
        direction,
        bias_term,
        solver: h.solver,
        hyperparameter: h.lambda,
        layer_index: h.layer_index,
        norm: h.norm,
    })
}
