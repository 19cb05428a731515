//! Recording and replay of the protocol conformance corpus.
//!
//! `requests.bin` holds every frame a client sent in a scripted session,
//! followed by a few hand-written malformed requests. `responses.bin` holds
//! what the reference server answered. Replay checks both directions: a
//! server fed the requests must emit the responses byte for byte, and a
//! client performing the same calls must emit the requests byte for byte
//! and decode the responses to the same values.

#![allow(dead_code)]

use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use retouch_core::backends::{Backends, Denoiser, ImageEmbedder, LatentCodec, Segmenter, TextEmbedder};
use retouch_core::diffusion::DiffusionSchedule;
use retouch_core::protocol::{
    encode_frame, read_frame, serve, write_frame, Op, PredictNoiseArgs, ProtocolError, RemoteBackend, Request,
    Response, WireTensor,
};
use retouch_core::{Error, Image, Latent};

pub const REQUESTS: &str = "requests.bin";
pub const RESPONSES: &str = "responses.bin";

/// Backends the corpus was recorded against.
pub fn reference_backends() -> Backends {
    Backends::mock(7, 8, 1, &DiffusionSchedule::default())
}

pub fn corpus_dir(manifest_dir: &str) -> PathBuf {
    Path::new(manifest_dir).join("tests").join("corpus")
}

fn sample_image() -> Image {
    let data = (0..4 * 4 * 3).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
    Image::new(4, 4, data).unwrap()
}

fn sample_latent() -> Latent {
    let data = (0..3 * 4 * 4).map(|i| (i as f32 - 24.0) / 16.0).collect();
    Latent::new(3, 4, 4, data).unwrap()
}

/// The scripted session. Each call's outcome is returned as JSON for comparison.
fn script(remote: &RemoteBackend) -> Vec<String> {
    let img = sample_image();
    let z = sample_latent();
    let show = |r: Result<String, Error>| match r {
        Ok(s) => s,
        Err(e) => format!("error: {e}"),
    };
    vec![
        show(remote.embed_text("a red hat").map(|v| format!("{v:?}"))),
        show(remote.embed_image(&img).map(|v| format!("{v:?}"))),
        show(remote.segment(&img).map(|v| format!("{v:?}"))),
        show(remote.encode(&img).map(|v| format!("{v:?}"))),
        show(remote.decode(&z).map(|v| format!("{v:?}"))),
        show(remote.predict_noise(&z, 10, "a red hat").map(|v| format!("{v:?}"))),
        show(remote.predict_noise(&z, 0, "a red hat").map(|v| format!("{v:?}"))),
    ]
}

/// Frames a conforming server must reject without closing the connection.
fn malformed_requests() -> Vec<Vec<u8>> {
    vec![
        br#"{"id":900,"op":"train","args":{}}"#.to_vec(),
        br#"{"id":901,"op":"embed_text","args":{"txt":"x"}}"#.to_vec(),
        br#"{"id":902,"op":"embed_image","args":{"image":{"dtype":"u8","shape":[1,1,3],"data":"AAAA"}}}"#.to_vec(),
        b"[1,2,3]".to_vec(),
    ]
}

struct Tee<R> {
    inner: R,
    log: Arc<Mutex<Vec<u8>>>,
}

impl<R: Read> Read for Tee<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.log.lock().unwrap().extend_from_slice(&buf[..n]);
        Ok(n)
    }
}

pub fn split_frames(bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut r = Cursor::new(bytes);
    let mut out = Vec::new();
    while let Some(f) = read_frame(&mut r).expect("well-formed corpus") {
        out.push(f);
    }
    out
}

/// Run the script against the reference server and capture both streams.
pub fn record() -> (Vec<u8>, Vec<u8>) {
    let (server_read, client_write) = std::io::pipe().unwrap();
    let (client_read, server_write) = std::io::pipe().unwrap();
    let log = Arc::new(Mutex::new(Vec::new()));
    let tee = Tee { inner: server_read, log: log.clone() };
    let server = std::thread::spawn(move || serve(&reference_backends(), tee, server_write));
    {
        let remote = RemoteBackend::from_streams(client_read, client_write, "corpus").unwrap();
        script(&remote);
    }
    server.join().unwrap().unwrap();
    let mut requests = log.lock().unwrap().clone();
    for m in malformed_requests() {
        requests.extend(encode_frame(&m));
    }
    let mut responses = Vec::new();
    serve(&reference_backends(), Cursor::new(&requests), &mut responses).unwrap();
    (requests, responses)
}

/// Server direction: the reference server reproduces the recorded replies.
pub fn replay_server(requests: &[u8], responses: &[u8]) -> Result<(), String> {
    let mut out = Vec::new();
    serve(&reference_backends(), Cursor::new(requests), &mut out).map_err(|e| e.to_string())?;
    if out == responses {
        return Ok(());
    }
    let (got, want) = (split_frames(&out), split_frames(responses));
    for (i, (g, w)) in got.iter().zip(&want).enumerate() {
        if g != w {
            return Err(format!(
                "response frame {i} differs:\n  got  {}\n  want {}",
                String::from_utf8_lossy(&g[..g.len().min(200)]),
                String::from_utf8_lossy(&w[..w.len().min(200)])
            ));
        }
    }
    Err(format!("{} response frames, expected {}", got.len(), want.len()))
}

/// Client direction: a client performing the scripted calls sends exactly
/// the recorded requests and decodes the recorded replies.
pub fn replay_client(requests: &[u8], responses: &[u8]) -> Result<(), String> {
    let reqs = split_frames(requests);
    let resps = split_frames(responses);
    let scripted = reqs.len() - malformed_requests().len();
    let (server_read, client_write) = std::io::pipe().unwrap();
    let (client_read, mut server_write) = std::io::pipe().unwrap();
    let expected_reqs = reqs[..scripted].to_vec();
    let canned = resps[..scripted].to_vec();
    let fake = std::thread::spawn(move || -> Result<(), String> {
        let mut r = server_read;
        for (i, (want, reply)) in expected_reqs.iter().zip(&canned).enumerate() {
            let got = read_frame(&mut r).map_err(|e| e.to_string())?.ok_or("client hung up early")?;
            if &got != want {
                return Err(format!(
                    "request frame {i} differs:\n  got  {}\n  want {}",
                    String::from_utf8_lossy(&got[..got.len().min(200)]),
                    String::from_utf8_lossy(&want[..want.len().min(200)])
                ));
            }
            write_frame(&mut server_write, reply).map_err(|e| e.to_string())?;
        }
        Ok(())
    });
    let live = {
        let remote = RemoteBackend::from_streams(client_read, client_write, "corpus").map_err(|e| e.to_string())?;
        script(&remote)
    };
    fake.join().unwrap()?;

    // the same calls against a live reference server must agree
    let reference = {
        let remote = retouch_core::protocol::loopback(reference_backends()).map_err(|e| e.to_string())?;
        script(&remote)
    };
    if live != reference {
        return Err("decoded results differ from a live reference session".into());
    }
    Ok(())
}

pub fn load(dir: &Path) -> std::io::Result<(Vec<u8>, Vec<u8>)> {
    Ok((std::fs::read(dir.join(REQUESTS))?, std::fs::read(dir.join(RESPONSES))?))
}

pub fn save(dir: &Path, requests: &[u8], responses: &[u8]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::File::create(dir.join(REQUESTS))?.write_all(requests)?;
    std::fs::File::create(dir.join(RESPONSES))?.write_all(responses)?;
    Ok(())
}

/// Malformed frames must each get an `ok: false` reply with their id.
pub fn malformed_replies_are_errors(responses: &[u8]) -> Result<(), String> {
    let resps = split_frames(responses);
    let tail = &resps[resps.len() - malformed_requests().len()..];
    let ids = [900, 901, 902, 0];
    for (frame, id) in tail.iter().zip(ids) {
        let r: Response = serde_json::from_slice(frame).map_err(|e| e.to_string())?;
        if r.ok || r.id != id {
            return Err(format!("expected an error reply for id {id}, got {r:?}"));
        }
    }
    Ok(())
}

/// Echo-mode handler: replies with the request's args unchanged.
pub fn echo_server(reader: impl Read, mut writer: impl Write) -> Result<(), ProtocolError> {
    let mut reader = std::io::BufReader::new(reader);
    while let Some(frame) = read_frame(&mut reader)? {
        let req: Request = serde_json::from_slice(&frame).map_err(|e| ProtocolError::Framing(e.to_string()))?;
        let resp = Response::success(req.id, req.args);
        write_frame(&mut writer, &serde_json::to_vec(&resp).unwrap())?;
    }
    Ok(())
}

/// Send `values` to an echo server through a client and return what came back.
pub fn echo_round_trip(
    client: &retouch_core::protocol::Client,
    shape: &[usize],
    values: &[f32],
) -> Result<Vec<f32>, ProtocolError> {
    let args = PredictNoiseArgs { latent: WireTensor::from_f32(shape, values), t: 1, text: "echo".into() };
    let back = client.call(Op::PredictNoise, serde_json::to_value(&args).unwrap())?;
    let echoed: PredictNoiseArgs = serde_json::from_value(back).map_err(|e| ProtocolError::Framing(e.to_string()))?;
    echoed.latent.to_f32()
}
