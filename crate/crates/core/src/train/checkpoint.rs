//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `PSYNCKPT`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian scalars in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{EarlyStopping, LossRecord, Network, Sampler, Stage, TrainConfig, TrainState};
use crate::dataprep::RngState;
use crate::error::{Error, Result};
use crate::nn::{Adam, NetworkGraph, Params};
use crate::Scalar;

const MAGIC: &[u8; 8] = b"PSYNCKPT";

#[derive(Serialize, Deserialize)]
struct RngHeader {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct NetworkHeader {
    role: String,
    graph: NetworkGraph,
    adam_t: u64,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    stage: Stage,
    config: TrainConfig,
    step: u64,
    history: Vec<LossRecord>,
    rng: RngHeader,
    order: Vec<usize>,
    cursor: usize,
    early_stopping: EarlyStopping,
    networks: Vec<NetworkHeader>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn networks<T>(state: &TrainState<T>) -> Vec<(&'static str, &Network<T>)> {
    let mut out = vec![("model", &state.model)];
    if let Some(d) = &state.discriminator {
        out.push(("discriminator", d));
    }
    if let Some(f) = &state.fcn {
        out.push(("fcn", f));
    }
    out
}

fn sections<'a, T: Scalar>(net: &'a Network<T>) -> [(&'static str, &'a Params<T>); 3] {
    [("", &net.params), ("adam_m/", &net.adam.m), ("adam_v/", &net.adam.v)]
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut payload = Vec::new();
    let mut net_headers = Vec::new();
    for (role, net) in networks(state) {
        let mut tensors = Vec::new();
        for (prefix, params) in sections(net) {
            for (name, values) in params.named_tensors(&net.graph) {
                tensors.push(TensorHeader { name: format!("{prefix}{name}"), len: values.len() });
                for &v in values {
                    v.write_le(&mut payload);
                }
            }
        }
        net_headers.push(NetworkHeader { role: role.into(), graph: net.graph.clone(), adam_t: net.adam.t, tensors });
    }
    let rng = &state.sampler.rng;
    let header = Header {
        format_version: 1,
        dtype: T::DTYPE.into(),
        stage: state.stage,
        config: state.config.clone(),
        step: state.step,
        history: state.history.clone(),
        rng: RngHeader {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        },
        order: state.sampler.order.clone(),
        cursor: state.sampler.cursor,
        early_stopping: state.early_stopping,
        networks: net_headers,
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    let mut f = std::io::BufWriter::new(fs::File::create(path.as_ref())?);
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<TrainState<T>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(corrupt(format!("checkpoint holds {}, requested {}", header.dtype, T::DTYPE)));
    }
    let mut cursor = &bytes[16 + hlen..];
    let mut nets = Vec::new();
    for nh in header.networks {
        let mut sections: Vec<Params<T>> = Vec::new();
        let mut names = nh.tensors.iter();
        for prefix in ["", "adam_m/", "adam_v/"] {
            let mut params = Params::<T>::zeros(&nh.graph).map_err(|e| corrupt(e.to_string()))?;
            let expected: Vec<(String, usize)> =
                params.named_tensors(&nh.graph).map(|(n, v)| (format!("{prefix}{n}"), v.len())).collect();
            for ((name, len), dst) in expected.into_iter().zip(params.tensors_mut()) {
                let th = names.next().ok_or_else(|| corrupt(format!("{}: missing tensor {name}", nh.role)))?;
                if th.name != name || th.len != len {
                    return Err(corrupt(format!("{}: expected {name}[{len}], found {}[{}]", nh.role, th.name, th.len)));
                }
                let need = len * T::BYTES;
                if cursor.len() < need {
                    return Err(corrupt(format!("payload truncated in {name}")));
                }
                for (d, chunk) in dst.iter_mut().zip(cursor[..need].chunks_exact(T::BYTES)) {
                    *d = T::read_le(chunk);
                }
                cursor = &cursor[need..];
            }
            sections.push(params);
        }
        if names.next().is_some() {
            return Err(corrupt(format!("{}: unexpected extra tensors", nh.role)));
        }
        let v = sections.pop().expect("three sections");
        let m = sections.pop().expect("three sections");
        let params = sections.pop().expect("three sections");
        let adam = Adam { config: header.config.adam(), m, v, t: nh.adam_t };
        nets.push((nh.role, Network { graph: nh.graph, params, adam }));
    }
    if !cursor.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", cursor.len())));
    }
    let mut take = |role: &str| nets.iter().position(|(r, _)| r == role).map(|i| nets.remove(i).1);
    let model = take("model").ok_or_else(|| corrupt("no model network"))?;
    let discriminator = take("discriminator");
    let fcn = take("fcn");
    if !model.params.is_finite() {
        return Err(corrupt("non-finite parameters"));
    }

    let seed: [u8; 32] = header.rng.seed.try_into().map_err(|_| corrupt("rng seed must have 32 bytes"))?;
    let word_pos: u128 = header.rng.word_pos.parse().map_err(|_| corrupt("bad rng position"))?;
    let mut rng = RngState::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);
    if header.cursor > header.order.len() {
        return Err(corrupt("sample cursor past end of order"));
    }
    Ok(TrainState {
        stage: header.stage,
        config: header.config,
        model,
        discriminator,
        fcn,
        step: header.step,
        history: header.history,
        sampler: Sampler { rng, order: header.order, cursor: header.cursor },
        early_stopping: header.early_stopping,
    })
}
