//! Checkpoint file format, one self-describing file per model:
//!
//! ```text
//! OMNINET1\n
//! <key>=<value>\n ...            model configuration
//! task.<i>=<name>,<vocab>,<max_len>\n   task registry
//! param <name> <dim> <dim> ...\n        manifest, one line per parameter
//! DATA\n
//! <little-endian f32 values, manifest order>
//! ```
//!
//! Loading rebuilds the model from the header and validates every manifest
//! shape against the freshly built parameter set before filling values.

use std::io::{Read, Write};
use std::path::Path;

use crate::cnp::{ModelConfig, OmniNetModel, TaskHeadSpec};
use crate::scalar::Scalar;

const MAGIC: &str = "OMNINET1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint shape mismatch for {name}: file has {file:?}, model expects {model:?}")]
    ShapeMismatch {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },
}

pub fn serialize<S: Scalar>(model: &OmniNetModel<S>) -> Vec<u8> {
    let cfg = &model.cfg;
    let mut head = String::new();
    head.push_str(MAGIC);
    head.push('\n');
    head.push_str(&format!("d_model={}\n", cfg.d_model));
    head.push_str(&format!("n_heads={}\n", cfg.n_heads));
    head.push_str(&format!("n_layers={}\n", cfg.n_layers));
    head.push_str(&format!("d_ff={}\n", cfg.d_ff));
    head.push_str(&format!("n_domains={}\n", cfg.n_domains));
    head.push_str(&format!("lang_vocab={}\n", cfg.lang_vocab));
    head.push_str(&format!("d_emb={}\n", cfg.d_emb));
    head.push_str(&format!("dropout={}\n", cfg.dropout));
    for (i, task) in model.tasks.iter().enumerate() {
        head.push_str(&format!(
            "task.{i}={},{},{}\n",
            task.spec.name, task.spec.vocab_size, task.spec.max_out_len
        ));
    }
    let params = model.parameters();
    for (name, tensor) in &params {
        head.push_str(&format!("param {name}"));
        for d in tensor.shape() {
            head.push_str(&format!(" {d}"));
        }
        head.push('\n');
    }
    head.push_str("DATA\n");
    let mut bytes = head.into_bytes();
    for (_, tensor) in &params {
        for &v in tensor.data().iter() {
            bytes.extend_from_slice(&(v.to_f64s() as f32).to_le_bytes());
        }
    }
    bytes
}

fn parse_usize(map: &std::collections::HashMap<String, String>, key: &str) -> Result<usize, CheckpointError> {
    map.get(key)
        .ok_or_else(|| CheckpointError::Format(format!("missing key {key}")))?
        .parse()
        .map_err(|_| CheckpointError::Format(format!("bad value for {key}")))
}

/// Rebuilds a model from checkpoint bytes. The build seed is irrelevant:
/// every parameter is overwritten from the file.
pub fn deserialize<S: Scalar>(bytes: &[u8]) -> Result<OmniNetModel<S>, CheckpointError> {
    let data_tag = b"DATA\n";
    let split = bytes
        .windows(data_tag.len())
        .position(|w| w == data_tag)
        .ok_or_else(|| CheckpointError::Format("missing DATA marker".into()))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| CheckpointError::Format("header is not utf-8".into()))?;
    let body = &bytes[split + data_tag.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let mut kv = std::collections::HashMap::new();
    let mut tasks: Vec<TaskHeadSpec> = Vec::new();
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("param ") {
            let mut parts = rest.split(' ');
            let name = parts
                .next()
                .ok_or_else(|| CheckpointError::Format("empty param line".into()))?
                .to_string();
            let dims: Result<Vec<usize>, _> = parts.map(str::parse).collect();
            let dims = dims.map_err(|_| CheckpointError::Format(format!("bad dims for {name}")))?;
            manifest.push((name, dims));
        } else if let Some((key, value)) = line.split_once('=') {
            if key.starts_with("task.") {
                let fields: Vec<&str> = value.split(',').collect();
                if fields.len() != 3 {
                    return Err(CheckpointError::Format(format!("bad task entry {line}")));
                }
                tasks.push(TaskHeadSpec {
                    name: fields[0].to_string(),
                    vocab_size: fields[1]
                        .parse()
                        .map_err(|_| CheckpointError::Format("bad task vocab".into()))?,
                    max_out_len: fields[2]
                        .parse()
                        .map_err(|_| CheckpointError::Format("bad task max_len".into()))?,
                });
            } else {
                kv.insert(key.to_string(), value.to_string());
            }
        }
    }
    if tasks.is_empty() {
        return Err(CheckpointError::Format("checkpoint registers no tasks".into()));
    }
    let cfg = ModelConfig {
        d_model: parse_usize(&kv, "d_model")?,
        n_heads: parse_usize(&kv, "n_heads")?,
        n_layers: parse_usize(&kv, "n_layers")?,
        d_ff: parse_usize(&kv, "d_ff")?,
        n_domains: parse_usize(&kv, "n_domains")?,
        lang_vocab: parse_usize(&kv, "lang_vocab")?,
        d_emb: parse_usize(&kv, "d_emb")?,
        dropout: kv
            .get("dropout")
            .ok_or_else(|| CheckpointError::Format("missing key dropout".into()))?
            .parse()
            .map_err(|_| CheckpointError::Format("bad dropout".into()))?,
    };
    let model = OmniNetModel::new(cfg, &tasks, 0);
    let params = model.parameters();
    if params.len() != manifest.len() {
        return Err(CheckpointError::Format(format!(
            "manifest lists {} parameters, model has {}",
            manifest.len(),
            params.len()
        )));
    }
    let mut offset = 0usize;
    for ((name, dims), (model_name, tensor)) in manifest.iter().zip(&params) {
        if name != model_name || dims != tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                file: dims.clone(),
                model: tensor.shape().to_vec(),
            });
        }
        let numel: usize = dims.iter().product();
        let end = offset + numel * 4;
        if end > body.len() {
            return Err(CheckpointError::Format("data section truncated".into()));
        }
        let values: Vec<S> = body[offset..end]
            .chunks_exact(4)
            .map(|c| S::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        tensor.set_data(&values);
        offset = end;
    }
    if offset != body.len() {
        return Err(CheckpointError::Format("trailing bytes after data section".into()));
    }
    Ok(model)
}

pub fn save<S: Scalar>(model: &OmniNetModel<S>, path: &Path) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&serialize(model))?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<OmniNetModel<S>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    deserialize(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<TaskHeadSpec> {
        vec![TaskHeadSpec { name: "alpha".into(), vocab_size: 7, max_out_len: 5 }]
    }

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::toy(12);
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.n_layers = 1;
        cfg.d_ff = 16;
        cfg
    }

    #[test]
    fn roundtrip_restores_every_parameter() {
        let model: OmniNetModel<f32> = OmniNetModel::new(tiny_cfg(), &specs(), 3);
        let bytes = serialize(&model);
        let back: OmniNetModel<f32> = deserialize(&bytes).unwrap();
        for ((na, ta), (nb, tb)) in model.parameters().iter().zip(back.parameters().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec(), "{na}");
        }
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.tasks[0].spec, model.tasks[0].spec);
    }

    #[test]
    fn serialization_is_deterministic() {
        let a: OmniNetModel<f32> = OmniNetModel::new(tiny_cfg(), &specs(), 3);
        let b: OmniNetModel<f32> = OmniNetModel::new(tiny_cfg(), &specs(), 3);
        assert_eq!(serialize(&a), serialize(&b));
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let model: OmniNetModel<f32> = OmniNetModel::new(tiny_cfg(), &specs(), 3);
        let mut bytes = serialize(&model);
        bytes[0] = b'X';
        assert!(matches!(
            deserialize::<f32>(&bytes),
            Err(CheckpointError::Format(_))
        ));
    }

    #[test]
    fn truncated_data_is_rejected() {
        let model: OmniNetModel<f32> = OmniNetModel::new(tiny_cfg(), &specs(), 3);
        let bytes = serialize(&model);
        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(
            deserialize::<f32>(truncated),
            Err(CheckpointError::Format(_))
        ));
    }
}
