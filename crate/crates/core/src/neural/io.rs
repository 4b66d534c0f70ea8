//! `"SKN1"` model file: length-prefixed JSON spec, length-prefixed JSON
//! training-config snapshot, then per layer the trainable and state tensors
//! as (u32 rank, u32 dims, f32 data).

use std::io::{Cursor, Read, Write};

use super::net::Net;
use super::spec::NetSpec;
use super::{NeuralError, Tensor};
use crate::binio::*;

pub const NET_MAGIC: &[u8; 4] = b"SKN1";

fn write_tensors<W: Write>(w: &mut W, ts: &[Tensor<f32>]) -> std::io::Result<()> {
    write_u32(w, ts.len() as u32)?;
    for t in ts {
        write_u32(w, t.shape().len() as u32)?;
        for &d in t.shape() {
            write_u32(w, d as u32)?;
        }
        write_f32s(w, t.data())?;
    }
    Ok(())
}

fn read_tensors<R: Read>(r: &mut R) -> std::io::Result<Vec<Tensor<f32>>> {
    let n = read_count(r, 64, "tensor")?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let rank = read_count(r, 8, "rank")?;
        let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= 1 << 30)
            .ok_or_else(|| invalid("tensor too large"))?;
        let data = read_f32s(r, len)?;
        out.push(Tensor::from_vec(&shape, data).map_err(|e| invalid(e.to_string()))?);
    }
    Ok(out)
}

/// Serialises a network together with an opaque configuration snapshot.
pub fn encode_net(net: &Net<f32>, config_json: &str) -> Vec<u8> {
    let mut out = Vec::new();
    let w = &mut out;
    let spec = serde_json::to_vec(net.spec()).expect("spec serializes");
    // Writes into a Vec cannot fail.
    w.write_all(NET_MAGIC).unwrap();
    write_len_prefixed(w, &spec).unwrap();
    write_len_prefixed(w, config_json.as_bytes()).unwrap();
    write_u32(w, net.params().len() as u32).unwrap();
    for (p, s) in net.params().iter().zip(net.state()) {
        write_tensors(w, p).unwrap();
        write_tensors(w, s).unwrap();
    }
    out
}

pub fn decode_net(bytes: &[u8]) -> Result<(Net<f32>, String), NeuralError> {
    let fmt = |e: std::io::Error| NeuralError::Format(e.to_string());
    let mut r = Cursor::new(bytes);
    expect_magic(&mut r, NET_MAGIC).map_err(fmt)?;
    let spec: NetSpec = serde_json::from_slice(&read_len_prefixed(&mut r).map_err(fmt)?)
        .map_err(|e| NeuralError::Format(format!("spec: {e}")))?;
    let config = String::from_utf8(read_len_prefixed(&mut r).map_err(fmt)?)
        .map_err(|e| NeuralError::Format(format!("config: {e}")))?;
    let layers = read_count(&mut r, 4096, "layer").map_err(fmt)?;
    let mut params = Vec::with_capacity(layers);
    let mut state = Vec::with_capacity(layers);
    for _ in 0..layers {
        params.push(read_tensors(&mut r).map_err(fmt)?);
        state.push(read_tensors(&mut r).map_err(fmt)?);
    }
    if r.position() as usize != bytes.len() {
        return Err(NeuralError::Format("trailing bytes".into()));
    }
    Ok((Net::from_parts(spec, params, state)?, config))
}
