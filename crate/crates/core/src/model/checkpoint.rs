//! Self-describing binary checkpoint container.
//!
//! Layout: magic, format version, JSON header (config, tokenizer, phase,
//! seed chain, tensor directory), raw little-endian f64 tensor data in
//! directory order, and a SHA-256 trailer over header and data. Loading
//! reproduces forward outputs bit-exactly and refuses tampered or
//! mismatched files.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdapterDelta, BaseWeights, LayerNormParams, LayerWeights, ModelConfig, ModelParams, Phase, Tokenizer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LMCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    phase: Phase,
    seed_chain: Vec<u64>,
    tokenizer_tokens: Vec<String>,
    tensors: Vec<TensorInfo>,
}

enum TensorRef<'a> {
    One(&'a Array1<f64>),
    Two(&'a Array2<f64>),
}

fn tensor_list(params: &ModelParams) -> Vec<(String, TensorRef<'_>)> {
    let mut out: Vec<(String, TensorRef)> = Vec::new();
    let b = &params.base;
    out.push(("token_embedding".into(), TensorRef::Two(&b.token_embedding)));
    out.push(("position_embedding".into(), TensorRef::Two(&b.position_embedding)));
    for (i, l) in b.layers.iter().enumerate() {
        let p = format!("layer{i:02}");
        out.push((format!("{p}.ln1.gain"), TensorRef::One(&l.ln1.gain)));
        out.push((format!("{p}.ln1.bias"), TensorRef::One(&l.ln1.bias)));
        out.push((format!("{p}.attn_q"), TensorRef::Two(&l.attn_q)));
        out.push((format!("{p}.attn_k"), TensorRef::Two(&l.attn_k)));
        out.push((format!("{p}.attn_v"), TensorRef::Two(&l.attn_v)));
        out.push((format!("{p}.attn_out"), TensorRef::Two(&l.attn_out)));
        out.push((format!("{p}.ln2.gain"), TensorRef::One(&l.ln2.gain)));
        out.push((format!("{p}.ln2.bias"), TensorRef::One(&l.ln2.bias)));
        out.push((format!("{p}.ffn_up"), TensorRef::Two(&l.ffn_up)));
        out.push((format!("{p}.ffn_up_bias"), TensorRef::One(&l.ffn_up_bias)));
        out.push((format!("{p}.ffn_down"), TensorRef::Two(&l.ffn_down)));
        out.push((format!("{p}.ffn_down_bias"), TensorRef::One(&l.ffn_down_bias)));
    }
    out.push(("final_norm.gain".into(), TensorRef::One(&b.final_norm.gain)));
    out.push(("final_norm.bias".into(), TensorRef::One(&b.final_norm.bias)));
    out.push(("output_head".into(), TensorRef::Two(&b.output_head)));
    for (id, a) in &params.adapters {
        out.push((format!("adapter.{id}.down"), TensorRef::Two(&a.down)));
        out.push((format!("adapter.{id}.up"), TensorRef::Two(&a.up)));
    }
    out
}

/// Persist a snapshot.
pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let tensors = tensor_list(params);
    let header = Header {
        config: params.config.clone(),
        phase: params.phase,
        seed_chain: params.seed_chain.clone(),
        tokenizer_tokens: params.tokenizer.tokens().to_vec(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorInfo {
                name: name.clone(),
                dims: match t {
                    TensorRef::One(a) => vec![a.len()],
                    TensorRef::Two(a) => vec![a.nrows(), a.ncols()],
                },
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut data: Vec<u8> = Vec::new();
    for (_, t) in &tensors {
        match t {
            TensorRef::One(a) => {
                for v in a.iter() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
            TensorRef::Two(a) => {
                for v in a.iter() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }

    let mut hasher = Sha256::new();
    hasher.update(&header_bytes);
    hasher.update(&data);
    let digest = hasher.finalize();

    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    w.write_all(&data)?;
    w.write_all(&digest)?;
    w.flush()?;
    Ok(())
}

/// Load a snapshot, verifying format version and checksum.
pub fn load(path: &Path) -> Result<ModelParams> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::FormatMismatch {
            expected: format!("magic {MAGIC:?}"),
            found: format!("{magic:?}"),
        });
    }
    let mut version_bytes = [0u8; 4];
    r.read_exact(&mut version_bytes)?;
    let version = u32::from_le_bytes(version_bytes);
    if version != VERSION {
        return Err(Error::FormatMismatch {
            expected: format!("version {VERSION}"),
            found: format!("version {version}"),
        });
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let n_values: usize = header
        .tensors
        .iter()
        .map(|t| t.dims.iter().product::<usize>())
        .sum();
    let mut data = vec![0u8; n_values * 8];
    r.read_exact(&mut data)?;
    let mut trailer = [0u8; 32];
    r.read_exact(&mut trailer)?;

    let mut hasher = Sha256::new();
    hasher.update(&header_bytes);
    hasher.update(&data);
    let digest = hasher.finalize();
    if digest.as_slice() != trailer {
        return Err(Error::Integrity(format!(
            "checkpoint {} failed its checksum",
            path.display()
        )));
    }

    struct TensorReader<'a> {
        values: std::iter::Map<std::slice::ChunksExact<'a, u8>, fn(&[u8]) -> f64>,
        directory: std::slice::Iter<'a, TensorInfo>,
    }

    impl<'a> TensorReader<'a> {
        fn next_info(&mut self, dims: &[usize]) -> Result<&'a TensorInfo> {
            let info = self
                .directory
                .next()
                .ok_or_else(|| Error::Integrity("tensor directory too short".into()))?;
            if info.dims != dims {
                return Err(Error::Integrity(format!(
                    "tensor {} has dims {:?}, expected {:?}",
                    info.name, info.dims, dims
                )));
            }
            Ok(info)
        }

        fn arr1(&mut self, n: usize) -> Result<Array1<f64>> {
            self.next_info(&[n])?;
            Ok(Array1::from_iter(self.values.by_ref().take(n)))
        }

        fn arr2(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
            self.next_info(&[rows, cols])?;
            let flat: Vec<f64> = self.values.by_ref().take(rows * cols).collect();
            Array2::from_shape_vec((rows, cols), flat).map_err(|e| Error::Integrity(e.to_string()))
        }
    }

    fn le_f64(c: &[u8]) -> f64 {
        f64::from_le_bytes(c.try_into().expect("8-byte chunk"))
    }

    let mut reader = TensorReader {
        values: data.chunks_exact(8).map(le_f64 as fn(&[u8]) -> f64),
        directory: header.tensors.iter(),
    };

    let cfg = header.config.clone();
    let d = cfg.d_model;
    let f = cfg.ffn_dim();

    let token_embedding = reader.arr2(cfg.vocab_size, d)?;
    let position_embedding = reader.arr2(cfg.context_length, d)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let ln1_gain = reader.arr1(d)?;
        let ln1_bias = reader.arr1(d)?;
        let attn_q = reader.arr2(d, d)?;
        let attn_k = reader.arr2(d, d)?;
        let attn_v = reader.arr2(d, d)?;
        let attn_out = reader.arr2(d, d)?;
        let ln2_gain = reader.arr1(d)?;
        let ln2_bias = reader.arr1(d)?;
        let ffn_up = reader.arr2(f, d)?;
        let ffn_up_bias = reader.arr1(f)?;
        let ffn_down = reader.arr2(d, f)?;
        let ffn_down_bias = reader.arr1(d)?;
        layers.push(LayerWeights {
            ln1: LayerNormParams { gain: ln1_gain, bias: ln1_bias },
            attn_q,
            attn_k,
            attn_v,
            attn_out,
            ln2: LayerNormParams { gain: ln2_gain, bias: ln2_bias },
            ffn_up,
            ffn_up_bias,
            ffn_down,
            ffn_down_bias,
        });
    }
    let final_gain = reader.arr1(d)?;
    let final_bias = reader.arr1(d)?;
    let output_head = reader.arr2(cfg.vocab_size, d)?;

    let mut adapters = std::collections::BTreeMap::new();
    loop {
        let Some(down_info) = reader.directory.next() else {
            break;
        };
        let name = down_info
            .name
            .strip_prefix("adapter.")
            .and_then(|n| n.strip_suffix(".down"))
            .ok_or_else(|| Error::Integrity(format!("unexpected tensor {}", down_info.name)))?
            .to_string();
        if down_info.dims.len() != 2 {
            return Err(Error::Integrity(format!("adapter {name} down factor not 2-d")));
        }
        let down_flat: Vec<f64> = reader
            .values
            .by_ref()
            .take(down_info.dims.iter().product())
            .collect();
        let down = Array2::from_shape_vec((down_info.dims[0], down_info.dims[1]), down_flat)
            .map_err(|e| Error::Integrity(e.to_string()))?;
        let up_info = reader
            .directory
            .next()
            .ok_or_else(|| Error::Integrity("adapter up factor missing".into()))?;
        if up_info.name != format!("adapter.{name}.up") || up_info.dims.len() != 2 {
            return Err(Error::Integrity(format!(
                "adapter tensors out of order at {}",
                up_info.name
            )));
        }
        let up_flat: Vec<f64> = reader
            .values
            .by_ref()
            .take(up_info.dims.iter().product())
            .collect();
        let up = Array2::from_shape_vec((up_info.dims[0], up_info.dims[1]), up_flat)
            .map_err(|e| Error::Integrity(e.to_string()))?;
        adapters.insert(name, AdapterDelta { down, up });
    }

    let mut tokenizer = Tokenizer::from_tokens(header.tokenizer_tokens);
    tokenizer.rebuild_lookup();
    let params = ModelParams {
        config: header.config,
        tokenizer,
        base: BaseWeights {
            token_embedding,
            position_embedding,
            layers,
            final_norm: LayerNormParams { gain: final_gain, bias: final_bias },
            output_head,
        },
        adapters,
        phase: header.phase,
        seed_chain: header.seed_chain,
    };
    params.config.validate()?;
    Ok(params)
}
