//! In-process protocol server, used for loopback testing and as an
//! echo-mode stand-in for a real model server.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpListener;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::client::model_map;
use super::wire::*;
use super::{read_frame, write_frame, ProtocolError, RemoteBackend};
use crate::backends::Backends;

fn args<T: DeserializeOwned>(v: &Value) -> Result<T, String> {
    serde_json::from_value(v.clone()).map_err(|e| format!("bad arguments: {e}"))
}

fn to_value<T: Serialize>(v: T) -> Result<Value, String> {
    serde_json::to_value(v).map_err(|e| e.to_string())
}

fn dispatch(backends: &Backends, req: &Request) -> Result<Value, String> {
    let err = |e: crate::Error| e.to_string();
    let wire = |e: ProtocolError| e.to_string();
    match req.op {
        Op::Handshake => to_value(HandshakeInfo {
            embedding_dim: backends.descriptor.embedding_dim,
            latent_stride: backends.codec.stride(),
            models: model_map(&backends.identifiers),
        }),
        Op::EmbedText => {
            let a: TextArgs = args(&req.args)?;
            let v = backends.text.embed_text(&a.text).map_err(err)?;
            to_value(EmbeddingResult { embedding: WireTensor::from_f32(&[v.len()], &v) })
        }
        Op::EmbedImage => {
            let a: ImageArgs = args(&req.args)?;
            let v = backends.image.embed_image(&a.image.to_image().map_err(wire)?).map_err(err)?;
            to_value(EmbeddingResult { embedding: WireTensor::from_f32(&[v.len()], &v) })
        }
        Op::Segment => {
            let a: ImageArgs = args(&req.args)?;
            let masks = backends.segmenter.segment(&a.image.to_image().map_err(wire)?).map_err(err)?;
            to_value(MasksResult { masks: masks.iter().map(WireTensor::from_mask).collect() })
        }
        Op::Encode => {
            let a: ImageArgs = args(&req.args)?;
            let z = backends.codec.encode(&a.image.to_image().map_err(wire)?).map_err(err)?;
            to_value(LatentResult { latent: WireTensor::from_latent(&z) })
        }
        Op::Decode => {
            let a: LatentArgs = args(&req.args)?;
            let img = backends.codec.decode(&a.latent.to_latent().map_err(wire)?).map_err(err)?;
            to_value(ImageResult { image: WireTensor::from_image(&img) })
        }
        Op::PredictNoise => {
            let a: PredictNoiseArgs = args(&req.args)?;
            let z = a.latent.to_latent().map_err(wire)?;
            let eps = backends.denoiser.predict_noise(&z, a.t, &a.text).map_err(err)?;
            to_value(NoiseResult { noise: WireTensor::from_latent(&eps) })
        }
    }
}

/// Answer one request. Backend failures become `ok: false` responses.
pub fn handle_request(backends: &Backends, req: &Request) -> Response {
    match dispatch(backends, req) {
        Ok(v) => Response::success(req.id, v),
        Err(msg) => Response::failure(req.id, msg),
    }
}

fn send(writer: &mut impl Write, resp: &Response) -> Result<(), ProtocolError> {
    let bytes = serde_json::to_vec(resp).map_err(|e| ProtocolError::Framing(e.to_string()))?;
    write_frame(writer, &bytes)
}

/// Serve requests one at a time until the peer closes the stream.
///
/// A request that cannot be decoded gets an `ok: false` reply (id 0 when
/// no id can be recovered) and the connection stays open. A framing
/// violation is answered with an id-0 error where possible, then the
/// connection is closed and the error returned.
pub fn serve(backends: &Backends, reader: impl Read, writer: impl Write) -> Result<(), ProtocolError> {
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    loop {
        let payload = match read_frame(&mut reader) {
            Ok(Some(p)) => p,
            Ok(None) => return Ok(()),
            Err(e @ ProtocolError::Framing(_)) => {
                let _ = send(&mut writer, &Response::failure(0, e.to_string()));
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let resp = match serde_json::from_slice::<Request>(&payload) {
            Ok(req) => handle_request(backends, &req),
            Err(e) => {
                let id = serde_json::from_slice::<Value>(&payload)
                    .ok()
                    .and_then(|v| v.get("id").and_then(Value::as_u64))
                    .unwrap_or(0);
                Response::failure(id, format!("malformed request: {e}"))
            }
        };
        send(&mut writer, &resp)?;
    }
}

/// Accept connections forever, one thread each.
pub fn serve_listener(listener: TcpListener, backends: Backends) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let backends = backends.clone();
        std::thread::spawn(move || {
            let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
            let read = match stream.try_clone() {
                Ok(s) => s,
                Err(e) => return log::warn!("{peer}: {e}"),
            };
            if let Err(e) = serve(&backends, read, stream) {
                log::warn!("{peer}: {e}");
            }
        });
    }
    Ok(())
}

/// Serve `backends` on a background thread and connect a client to it
/// through in-memory pipes.
pub fn loopback(backends: Backends) -> Result<RemoteBackend, ProtocolError> {
    let (server_read, client_write) = std::io::pipe()?;
    let (client_read, server_write) = std::io::pipe()?;
    std::thread::Builder::new()
        .name("retouch-loopback-server".into())
        .spawn(move || {
            if let Err(e) = serve(&backends, server_read, server_write) {
                log::debug!("loopback server stopped: {e}");
            }
        })?;
    RemoteBackend::from_streams(client_read, client_write, "loopback")
}
