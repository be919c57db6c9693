use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_in: Matrix,
    pub w_out: Matrix,
    pub attn_norm: Vec<f32>,
    pub ffn_norm: Vec<f32>,
}

impl LayerWeights {
    /// The `d_model × d_head` slice of a projection that feeds head `head`.
    pub fn head_block(&self, which: Projection, head: usize, d_head: usize) -> Matrix {
        let w = match which {
            Projection::Query => &self.wq,
            Projection::Key => &self.wk,
            Projection::Value => &self.wv,
        };
        let mut data = Vec::with_capacity(w.rows() * d_head);
        for r in 0..w.rows() {
            data.extend_from_slice(&w.row(r)[head * d_head..(head + 1) * d_head]);
        }
        Matrix::from_vec(w.rows(), d_head, data)
    }
}

/// Denoiser parameters. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub head: Matrix,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f32) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

fn scaled(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Matrix {
    uniform(rng, d_in, d_out, 1.0 / (d_in as f32).sqrt())
}

/// One entry of the weight-dump sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the flat binary, in elements.
    pub offset: usize,
}

/// JSON sidecar describing a flat little-endian `f32` weight dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub config: ModelConfig,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

impl ModelWeights {
    /// Seeded uniform init in `±1/√d_in` per matrix. Embedding rows are one-hot
    /// lookups and use `±1`; norm gains start at one.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.weight_seed);
        let d = config.d_model;
        let embed = uniform(&mut rng, config.vocab_size, d, 1.0);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: scaled(&mut rng, d, d),
                wk: scaled(&mut rng, d, d),
                wv: scaled(&mut rng, d, d),
                wo: scaled(&mut rng, d, d),
                w_in: scaled(&mut rng, d, config.d_ff),
                w_out: scaled(&mut rng, config.d_ff, d),
                attn_norm: vec![1.0; d],
                ffn_norm: vec![1.0; d],
            })
            .collect();
        let head = scaled(&mut rng, d, config.vocab_size);
        Ok(Self {
            config: config.clone(),
            embed,
            layers,
            final_norm: vec![1.0; d],
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        fn mat(name: String, m: &Matrix) -> (String, Vec<usize>, &[f32]) {
            (name, vec![m.rows(), m.cols()], m.as_slice())
        }
        out.push(mat("embed".into(), &self.embed));
        for (i, l) in self.layers.iter().enumerate() {
            out.push(mat(format!("layers.{i}.wq"), &l.wq));
            out.push(mat(format!("layers.{i}.wk"), &l.wk));
            out.push(mat(format!("layers.{i}.wv"), &l.wv));
            out.push(mat(format!("layers.{i}.wo"), &l.wo));
            out.push(mat(format!("layers.{i}.w_in"), &l.w_in));
            out.push(mat(format!("layers.{i}.w_out"), &l.w_out));
            out.push((format!("layers.{i}.attn_norm"), vec![l.attn_norm.len()], &l.attn_norm));
            out.push((format!("layers.{i}.ffn_norm"), vec![l.ffn_norm.len()], &l.ffn_norm));
        }
        out.push(("final_norm".into(), vec![self.final_norm.len()], &self.final_norm));
        out.push(mat("head".into(), &self.head));
        out
    }

    /// Flat little-endian bytes plus the manifest describing them.
    pub fn to_dump(&self) -> (Vec<u8>, WeightManifest) {
        let mut bytes = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, shape, data) in self.named_tensors() {
            tensors.push(TensorEntry {
                name,
                shape,
                offset,
            });
            offset += data.len();
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = WeightManifest {
            config: self.config.clone(),
            dtype: "f32-le".into(),
            tensors,
        };
        (bytes, manifest)
    }

    /// Writes `<stem>.bin` and `<stem>.json` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let (bytes, manifest) = self.to_dump();
        fs::write(dir.join(format!("{stem}.bin")), bytes)?;
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| ModelError::WeightFile(e.to_string()))?;
        fs::write(dir.join(format!("{stem}.json")), json)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
        let manifest: WeightManifest =
            serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)
                .map_err(|e| ModelError::WeightFile(e.to_string()))?;
        Self::from_dump(&bytes, &manifest)
    }

    pub fn from_dump(bytes: &[u8], manifest: &WeightManifest) -> Result<Self> {
        if manifest.dtype != "f32-le" {
            return Err(ModelError::WeightFile(format!("unsupported dtype {}", manifest.dtype)));
        }
        if !bytes.len().is_multiple_of(4) {
            return Err(ModelError::WeightFile("byte length not a multiple of 4".into()));
        }
        let flat: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        // Build a correctly-shaped template, then overwrite every tensor.
        let mut weights = Self::init(&manifest.config)?;
        let expected: Vec<(String, Vec<usize>)> = weights
            .named_tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != manifest.tensors.len() {
            return Err(ModelError::WeightFile(format!(
                "expected {} tensors, manifest lists {}",
                expected.len(),
                manifest.tensors.len()
            )));
        }
        let mut slices = Vec::with_capacity(expected.len());
        for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
            if name != &entry.name || shape != &entry.shape {
                return Err(ModelError::WeightFile(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    entry.name, entry.shape, name, shape
                )));
            }
            let len: usize = shape.iter().product();
            let src = flat.get(entry.offset..entry.offset + len).ok_or_else(|| {
                ModelError::WeightFile(format!("tensor {name} runs past end of data"))
            })?;
            if src.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::WeightFile(format!("tensor {name} has non-finite entries")));
            }
            slices.push(src.to_vec());
        }
        let mut it = slices.into_iter();
        let mut fill = |dst: &mut [f32]| dst.copy_from_slice(&it.next().unwrap());
        fill(weights.embed.as_mut_slice());
        for l in &mut weights.layers {
            fill(l.wq.as_mut_slice());
            fill(l.wk.as_mut_slice());
            fill(l.wv.as_mut_slice());
            fill(l.wo.as_mut_slice());
            fill(l.w_in.as_mut_slice());
            fill(l.w_out.as_mut_slice());
            fill(&mut l.attn_norm);
            fill(&mut l.ffn_norm);
        }
        fill(&mut weights.final_norm);
        fill(weights.head.as_mut_slice());
        Ok(weights)
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }
}
