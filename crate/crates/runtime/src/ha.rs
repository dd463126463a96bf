//! Joint (HA) inference: each device computes half the output rows of every
//! conv layer from all 16 input channels, so the pooled activations are
//! swapped after conv1 and conv2. The classifier splits by columns; the
//! master adds the two partial logits and the W100 bias.

use fluidnn_core::model::partition::{combine_logits, conv_stage, fc_partial, merge_halves};
use fluidnn_core::model::{forward, FluidParams, Half, SubnetId, ARCH};
use fluidnn_core::tensor::argmax_rows;
use fluidnn_core::Tensor;

use crate::error::{Result, RuntimeError};
use crate::wire::Message;

/// Pixels per image on the wire.
pub const IMAGE_FLOATS: usize = 28 * 28;

pub fn images_tensor(count: u16, images: &[f32]) -> Result<Tensor> {
    let n = usize::from(count);
    if n == 0 || images.len() != n * IMAGE_FLOATS {
        return Err(RuntimeError::Protocol(format!(
            "INFER_REQ count {n} with {} floats",
            images.len()
        )));
    }
    if images.iter().any(|v| !v.is_finite()) {
        return Err(RuntimeError::Protocol("INFER_REQ images contain non-finite values".into()));
    }
    Ok(Tensor::new(vec![n, 1, ARCH.input_height, ARCH.input_width], images.to_vec())?)
}

pub fn predict(params: &FluidParams, spec: SubnetId, batch: &Tensor) -> Result<Vec<u8>> {
    let logits = forward(params, &spec.spec(), batch)?;
    Ok(argmax_rows(&logits).into_iter().map(|c| c as u8).collect())
}

pub fn labels_of(logits: &Tensor) -> Vec<u8> {
    argmax_rows(logits).into_iter().map(|c| c as u8).collect()
}

fn group_range(half: Half) -> (u8, u8) {
    let g = half.groups();
    (g[0].index() as u8, g[1].index() as u8 + 1)
}

fn chunk(req_id: u32, layer: usize, half: Half, act: &Tensor) -> Message {
    Message::ActChunk {
        req_id,
        layer: layer as u8,
        groups: group_range(half),
        height: act.dim(2) as u16,
        width: act.dim(3) as u16,
        data: act.data().to_vec(),
    }
}

/// Waits for the peer's chunk for `layer` of request `req_id`.
fn expect_chunk(
    recv: &mut impl FnMut() -> Result<Message>,
    req_id: u32,
    layer: usize,
    from: Half,
    like: &Tensor,
) -> Result<Tensor> {
    loop {
        match recv()? {
            Message::ActChunk {
                req_id: r,
                layer: l,
                groups,
                height,
                width,
                data,
            } if r == req_id && usize::from(l) == layer => {
                let shape = like.shape().to_vec();
                if groups != group_range(from)
                    || usize::from(height) != shape[2]
                    || usize::from(width) != shape[3]
                    || data.len() != like.len()
                {
                    return Err(RuntimeError::Protocol(format!(
                        "ACT_CHUNK layer {layer}: groups {groups:?}, {height}x{width}, {} floats",
                        data.len()
                    )));
                }
                return Ok(Tensor::new(shape, data)?);
            }
            Message::Error { code, message } => return Err(RuntimeError::Remote { code, message }),
            // Leftovers of an abandoned request.
            _ => continue,
        }
    }
}

/// Master side of one HA batch. `send` writes to the worker, `recv` yields
/// the worker's next frame (heartbeats already filtered out).
pub fn ha_master_batch(
    params: &FluidParams,
    req_id: u32,
    batch: &Tensor,
    mut send: impl FnMut(&Message) -> Result<()>,
    mut recv: impl FnMut() -> Result<Message>,
) -> Result<Tensor> {
    let n = batch.dim(0);
    send(&Message::InferReq {
        req_id,
        count: n as u16,
        images: batch.data().to_vec(),
    })?;
    let mut input = batch.clone();
    let mut own = input.clone();
    for layer in 0..ARCH.conv_layers {
        own = conv_stage(params, layer, &input, Half::Lower)?;
        if layer + 1 < ARCH.conv_layers {
            send(&chunk(req_id, layer, Half::Lower, &own))?;
            let other = expect_chunk(&mut recv, req_id, layer, Half::Upper, &own)?;
            input = merge_halves(&own, &other, Half::Lower)?;
        }
    }
    let lower = fc_partial(params, &own, Half::Lower)?;
    loop {
        match recv()? {
            Message::PartialLogits { req_id: r, count, logits } if r == req_id => {
                if usize::from(count) != n || logits.len() != n * ARCH.classes {
                    return Err(RuntimeError::Protocol(format!(
                        "PARTIAL_LOGITS count {count} with {} floats",
                        logits.len()
                    )));
                }
                let upper = Tensor::new(vec![n, ARCH.classes], logits)?;
                return Ok(combine_logits(params, &lower, &upper)?);
            }
            Message::Error { code, message } => return Err(RuntimeError::Remote { code, message }),
            _ => continue,
        }
    }
}

/// Worker side of one HA batch, started by the master's INFER_REQ.
pub fn ha_worker_batch(
    params: &FluidParams,
    req_id: u32,
    batch: &Tensor,
    mut send: impl FnMut(&Message) -> Result<()>,
    mut recv: impl FnMut() -> Result<Message>,
) -> Result<()> {
    let n = batch.dim(0);
    let mut input = batch.clone();
    let mut own = input.clone();
    for layer in 0..ARCH.conv_layers {
        own = conv_stage(params, layer, &input, Half::Upper)?;
        if layer + 1 < ARCH.conv_layers {
            send(&chunk(req_id, layer, Half::Upper, &own))?;
            let other = expect_chunk(&mut recv, req_id, layer, Half::Lower, &own)?;
            input = merge_halves(&own, &other, Half::Upper)?;
        }
    }
    let upper = fc_partial(params, &own, Half::Upper)?;
    send(&Message::PartialLogits {
        req_id,
        count: n as u16,
        logits: upper.into_data(),
    })
}

#[cfg(test)]
mod tests {
    use std::sync::mpsc;
    use std::thread;

    use super::*;
    use fluidnn_core::model::init_params;

    #[test]
    fn in_process_exchange_matches_local_and_counts_messages() {
        let params = init_params(3);
        let batch = Tensor::from_fn(&[5, 1, 28, 28], |i| ((i * 31) % 97) as f32 / 97.0);
        let (to_worker, worker_rx) = mpsc::channel::<Message>();
        let (to_master, master_rx) = mpsc::channel::<Message>();
        let wp = params.clone();
        let worker = thread::spawn(move || {
            let Message::InferReq { req_id, count, images } = worker_rx.recv().unwrap() else {
                panic!("expected INFER_REQ");
            };
            let x = images_tensor(count, &images).unwrap();
            let mut sent = 0;
            ha_worker_batch(
                &wp,
                req_id,
                &x,
                |m| {
                    sent += 1;
                    to_master.send(m.clone()).unwrap();
                    Ok(())
                },
                || Ok(worker_rx.recv().unwrap()),
            )
            .unwrap();
            sent
        });
        let mut master_sent = 0;
        let logits = ha_master_batch(
            &params,
            7,
            &batch,
            |m| {
                master_sent += 1;
                to_worker.send(m.clone()).unwrap();
                Ok(())
            },
            || Ok(master_rx.recv().unwrap()),
        )
        .unwrap();
        let worker_sent = worker.join().unwrap();
        // INFER_REQ + 2 chunks from the master, 2 chunks + PARTIAL_LOGITS from the worker.
        assert_eq!((master_sent, worker_sent), (3, 3));
        let local = forward(&params, &SubnetId::W100.spec(), &batch).unwrap();
        for (a, b) in logits.data().iter().zip(local.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}
