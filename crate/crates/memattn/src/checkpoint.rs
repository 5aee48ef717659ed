//! Checkpoint files.
//!
//! Layout: the magic string `MEMATTN1`, then for each named tensor: name
//! length (u32 little-endian), UTF-8 name, rank (u32), extents (u32 each),
//! values as little-endian 32-bit floats. Optimizer state lives in a
//! sibling `<checkpoint>.adam` file with the same layout (`<name>/m`,
//! `<name>/v` per parameter plus an `adam/t` step counter); the resolved
//! run configuration in a sibling `<checkpoint>.meta` text file.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use memattn_core::optim::{Adam, ParamSet};
use memattn_core::Tensor;

use crate::config::RunConfig;

const MAGIC: &[u8; 8] = b"MEMATTN1";

fn write_tensor(out: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        out.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    match input.read_exact(&mut buf) {
        Ok(()) => Ok(Some(u32::from_le_bytes(buf))),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn read_tensor(input: &mut impl Read) -> Result<Option<(String, Tensor)>> {
    let Some(name_len) = read_u32(input)? else {
        return Ok(None);
    };
    let mut name = vec![0u8; name_len as usize];
    input.read_exact(&mut name)?;
    let name = String::from_utf8(name).context("parameter name is not UTF-8")?;
    let rank = read_u32(input)?.context("truncated tensor rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(input)?.context("truncated tensor shape")? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 4];
    for _ in 0..numel {
        input.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    let tensor = Tensor::from_vec(shape, data).map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(Some((name, tensor)))
}

fn write_file(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    out.write_all(MAGIC)?;
    for (name, t) in tensors {
        write_tensor(&mut out, name, t)?;
    }
    out.flush()?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut input = std::io::BufReader::new(
        std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .with_context(|| format!("{}: too short for a checkpoint", path.display()))?;
    if &magic != MAGIC {
        bail!("{}: not a checkpoint file (bad magic)", path.display());
    }
    let mut tensors = Vec::new();
    while let Some(entry) = read_tensor(&mut input)
        .with_context(|| format!("{}: truncated checkpoint", path.display()))?
    {
        tensors.push(entry);
    }
    Ok(tensors)
}

pub fn adam_path(checkpoint: &Path) -> PathBuf {
    let mut os = checkpoint.as_os_str().to_owned();
    os.push(".adam");
    PathBuf::from(os)
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut os = checkpoint.as_os_str().to_owned();
    os.push(".meta");
    PathBuf::from(os)
}

/// Writes parameters, optimizer state and the resolved configuration.
pub fn save(
    checkpoint: &Path,
    params: &ParamSet,
    adam: Option<&Adam>,
    config: &RunConfig,
) -> Result<()> {
    let tensors: Vec<(String, &Tensor)> = params
        .iter()
        .map(|p| (p.name.clone(), &p.value))
        .collect();
    write_file(checkpoint, &tensors)?;
    if let Some(adam) = adam {
        let t_counter = Tensor::from_vec(
            vec![1],
            vec![adam.states.first().map(|s| s.t).unwrap_or(0) as f64],
        )
        .expect("scalar tensor");
        let mut entries: Vec<(String, &Tensor)> = Vec::new();
        for (p, s) in params.iter().zip(&adam.states) {
            entries.push((format!("{}/m", p.name), &s.m));
            entries.push((format!("{}/v", p.name), &s.v));
        }
        entries.push(("adam/t".to_string(), &t_counter));
        write_file(&adam_path(checkpoint), &entries)?;
    }
    std::fs::write(meta_path(checkpoint), config.to_text())
        .with_context(|| format!("writing {}", meta_path(checkpoint).display()))?;
    Ok(())
}

/// Loads parameter values into an already-built model's parameter set,
/// matching by name.
pub fn load_params(checkpoint: &Path, params: &mut ParamSet) -> Result<()> {
    let tensors = read_file(checkpoint)?;
    let mut loaded = 0;
    for (name, tensor) in tensors {
        let Some(param) = params.by_name_mut(&name) else {
            bail!(
                "{}: parameter '{}' does not exist in this model",
                checkpoint.display(),
                name
            );
        };
        if param.value.shape() != tensor.shape() {
            bail!(
                "{}: parameter '{}' has shape {:?}, expected {:?}",
                checkpoint.display(),
                name,
                tensor.shape(),
                param.value.shape()
            );
        }
        param.value = tensor;
        loaded += 1;
    }
    if loaded != params.len() {
        bail!(
            "{}: {} of {} parameters present",
            checkpoint.display(),
            loaded,
            params.len()
        );
    }
    Ok(())
}

/// Restores optimizer state saved by [`save`].
pub fn load_adam(checkpoint: &Path, params: &ParamSet, adam: &mut Adam) -> Result<()> {
    let path = adam_path(checkpoint);
    let tensors = read_file(&path)?;
    let mut t_counter = None;
    let find = |name: &str| -> Option<Tensor> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
    };
    for (p, s) in params.iter().zip(adam.states.iter_mut()) {
        s.m = find(&format!("{}/m", p.name))
            .with_context(|| format!("{}: missing state for '{}'", path.display(), p.name))?;
        s.v = find(&format!("{}/v", p.name))
            .with_context(|| format!("{}: missing state for '{}'", path.display(), p.name))?;
    }
    if let Some(t) = find("adam/t") {
        t_counter = Some(t.data()[0] as u64);
    }
    let t = t_counter.with_context(|| format!("{}: missing step counter", path.display()))?;
    for s in adam.states.iter_mut() {
        s.t = t;
    }
    Ok(())
}

/// Reads the run configuration stored beside a checkpoint.
pub fn load_config(checkpoint: &Path) -> Result<RunConfig> {
    RunConfig::from_file(&meta_path(checkpoint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use memattn_core::seq2seq::{Model, ModelConfig};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            embedding_dim: 4,
            encoder_units: 3,
            encoder_layers: 1,
            decoder_units: 3,
            decoder_layers: 1,
            k: 2,
            s_max: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn roundtrip_restores_values_to_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint-0.bin");
        let model = Model::new(tiny_config()).unwrap();
        let run_cfg = RunConfig {
            s_max: Some(5),
            ..RunConfig::default()
        };
        let adam = Adam::new(&model.params, 1e-3);
        save(&path, &model.params, Some(&adam), &run_cfg).unwrap();

        let mut restored = Model::new(tiny_config()).unwrap();
        for p in restored.params.iter_mut() {
            p.value.fill(0.0);
        }
        load_params(&path, &mut restored.params).unwrap();
        for (a, b) in model.params.iter().zip(restored.params.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        let mut adam2 = Adam::new(&restored.params, 1e-3);
        load_adam(&path, &restored.params, &mut adam2).unwrap();
        assert_eq!(adam2.states[0].t, 0);
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.s_max, Some(5));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        let mut params = ParamSet::new();
        let err = load_params(&path, &mut params).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn missing_parameter_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint-0.bin");
        let model = Model::new(tiny_config()).unwrap();
        save(&path, &model.params, None, &RunConfig::default()).unwrap();
        let mut other = ParamSet::new();
        other.add("unrelated", Tensor::zeros(&[1]));
        assert!(load_params(&path, &mut other).is_err());
    }
}
