//! Versioned little-endian checkpoint container.
//!
//! Layout:
//!
//! ```text
//! magic "HXRN" | u32 version
//! u64 len | ArchConfig JSON
//! u64 len | TrainConfig JSON
//! u64 iteration | u64 epoch
//! 3 × (u64 count | count × (u32 len | name | tensor))   params, buffers, velocities
//! u64 count | count × (u32 len | name | seed[32] | u64 stream | u128 word_pos)
//! ```
//!
//! Tensors use [`Tensor::write_le`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::SgdState;
use crate::resnet::{build_network, ArchConfig};
use crate::rng::{Rng, RngState};
use crate::tensor::Tensor;
use crate::train::{TrainConfig, TrainState};

pub const MAGIC: [u8; 4] = *b"HXRN";
pub const VERSION: u32 = 1;

type Named = Vec<(String, Tensor<f32>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub iteration: u64,
    pub epoch: usize,
    pub params: Named,
    pub buffers: Named,
    /// Empty until the first optimizer step.
    pub velocities: Named,
    pub rng_states: Vec<(String, RngState)>,
}

impl Checkpoint {
    pub fn capture(state: &TrainState) -> Self {
        let params: Named = state
            .model
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.value.clone()))
            .collect();
        let velocities = params
            .iter()
            .zip(&state.optimizer.velocities)
            .map(|((n, _), v)| (n.clone(), v.clone()))
            .collect();
        Self {
            arch: state.arch,
            train: state.cfg.clone(),
            iteration: state.iteration,
            epoch: state.epoch,
            params,
            buffers: state
                .model
                .named_buffers()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            velocities,
            rng_states: vec![("data".to_string(), state.data_rng.state())],
        }
    }

    /// Rebuilds the training state. Every stored tensor must match a
    /// tensor of the rebuilt network by name and shape.
    pub fn restore(&self) -> Result<TrainState> {
        let mut model = build_network(&self.arch, &mut Rng::new(0))?;
        assign("parameter", model.named_params_mut().into_iter().map(|(n, p)| (n, &mut p.value)), &self.params)?;
        assign("buffer", model.named_buffers_mut(), &self.buffers)?;
        let mut optimizer = SgdState::new(self.train.lr, self.train.momentum, self.train.weight_decay, self.train.decay_norm);
        if !self.velocities.is_empty() {
            let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
            if names.len() != self.velocities.len() || names.iter().zip(&self.velocities).any(|(a, (b, _))| a != b) {
                return Err(Error::Format("optimizer velocities do not match the parameters".into()));
            }
            optimizer.velocities = self.velocities.iter().map(|(_, v)| v.clone()).collect();
        }
        let data_rng = self
            .rng_states
            .iter()
            .find(|(n, _)| n == "data")
            .map(|(_, s)| Rng::from_state(*s))
            .ok_or_else(|| Error::Format("missing data rng state".into()))?;
        Ok(TrainState {
            arch: self.arch,
            cfg: self.train.clone(),
            model,
            optimizer,
            iteration: self.iteration,
            epoch: self.epoch,
            data_rng,
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for json in [
            serde_json::to_vec(&self.arch).expect("arch serializes"),
            serde_json::to_vec(&self.train).expect("config serializes"),
        ] {
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
        }
        w.write_all(&self.iteration.to_le_bytes())?;
        w.write_all(&(self.epoch as u64).to_le_bytes())?;
        for section in [&self.params, &self.buffers, &self.velocities] {
            w.write_all(&(section.len() as u64).to_le_bytes())?;
            for (name, t) in section {
                write_name(w, name)?;
                t.write_le(w)?;
            }
        }
        w.write_all(&(self.rng_states.len() as u64).to_le_bytes())?;
        for (name, s) in &self.rng_states {
            write_name(w, name)?;
            w.write_all(&s.seed)?;
            w.write_all(&s.stream.to_le_bytes())?;
            w.write_all(&s.word_pos.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let magic: [u8; 4] = read_array(r, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic bytes {magic:02x?}")));
        }
        let version = u32::from_le_bytes(read_array(r, "version")?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
        }
        let arch: ArchConfig = read_json(r, "arch config")?;
        let train: TrainConfig = read_json(r, "train config")?;
        let iteration = read_u64(r, "iteration")?;
        let epoch = read_u64(r, "epoch")? as usize;
        let mut sections = [Vec::new(), Vec::new(), Vec::new()];
        for section in sections.iter_mut() {
            let count = read_u64(r, "section length")?;
            for _ in 0..count {
                let name = read_name(r)?;
                section.push((name, Tensor::read_le(r)?));
            }
        }
        let [params, buffers, velocities] = sections;
        let count = read_u64(r, "rng count")?;
        let mut rng_states = Vec::new();
        for _ in 0..count {
            let name = read_name(r)?;
            let seed = read_array(r, "rng seed")?;
            let stream = read_u64(r, "rng stream")?;
            let word_pos = u128::from_le_bytes(read_array(r, "rng position")?);
            rng_states.push((
                name,
                RngState {
                    seed,
                    stream,
                    word_pos,
                },
            ));
        }
        Ok(Self {
            arch,
            train,
            iteration,
            epoch,
            params,
            buffers,
            velocities,
            rng_states,
        })
    }
}

fn assign<'a>(
    what: &str,
    targets: impl IntoIterator<Item = (String, &'a mut Tensor<f32>)>,
    stored: &Named,
) -> Result<()> {
    let targets: Vec<_> = targets.into_iter().collect();
    if targets.len() != stored.len() {
        return Err(Error::Format(format!(
            "{} {what}s stored, network has {}",
            stored.len(),
            targets.len()
        )));
    }
    for ((name, t), (sname, s)) in targets.into_iter().zip(stored) {
        if name != *sname || t.shape() != s.shape() {
            return Err(Error::Format(format!(
                "{what} {sname} {:?} does not match {name} {:?}",
                s.shape(),
                t.shape()
            )));
        }
        *t = s.clone();
    }
    Ok(())
}

fn write_name<W: Write>(w: &mut W, name: &str) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())
}

fn read_array<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("reading {what}: {e}")))?;
    Ok(buf)
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r, what)?))
}

fn read_bytes<R: Read>(r: &mut R, len: usize, what: &str) -> Result<Vec<u8>> {
    if len > 1 << 20 {
        return Err(Error::Format(format!("{what} length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("reading {what}: {e}")))?;
    Ok(buf)
}

fn read_name<R: Read>(r: &mut R) -> Result<String> {
    let len = u32::from_le_bytes(read_array(r, "name length")?) as usize;
    String::from_utf8(read_bytes(r, len, "name")?).map_err(|_| Error::Format("name is not UTF-8".into()))
}

fn read_json<R: Read, T: serde::de::DeserializeOwned>(r: &mut R, what: &str) -> Result<T> {
    let len = read_u64(r, what)? as usize;
    let bytes = read_bytes(r, len, what)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{what}: {e}")))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    ckpt.write_to(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::read_from(&mut BufReader::new(file))
}
