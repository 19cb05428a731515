use std::collections::{BTreeMap, HashMap};
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use super::wire::*;
use super::{read_frame, write_frame, ProtocolError};
use crate::backends::{
    normalize, BackendDescriptor, BackendKind, Backends, Denoiser, ImageEmbedder, LatentCodec, Segmenter,
    TextEmbedder,
};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::tensor::Latent;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

/// Where a model server lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    /// `tcp://host:port`
    Tcp(String),
    /// `stdio:program arg...`, spoken over the child's stdin/stdout.
    Stdio(Vec<String>),
}

impl Transport {
    pub fn parse(endpoint: &str) -> Result<Self, ProtocolError> {
        let endpoint = endpoint.trim();
        if let Some(addr) = endpoint.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err(ProtocolError::Transport("tcp endpoint without an address".into()));
            }
            return Ok(Transport::Tcp(addr.to_string()));
        }
        if let Some(cmd) = endpoint.strip_prefix("stdio:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err(ProtocolError::Transport("stdio endpoint without a command".into()));
            }
            return Ok(Transport::Stdio(argv));
        }
        Err(ProtocolError::Transport(format!("unsupported endpoint {endpoint:?}")))
    }
}

type Waiter = mpsc::Sender<Result<Value, ProtocolError>>;

#[derive(Default)]
struct Pending {
    waiters: HashMap<u64, Waiter>,
    /// Set once the reader stops; every later call fails with it.
    closed: Option<ProtocolError>,
}

impl Pending {
    fn close(&mut self, err: ProtocolError) {
        for (_, w) in self.waiters.drain() {
            let _ = w.send(Err(err.clone()));
        }
        self.closed.get_or_insert(err);
    }
}

/// Multiplexing protocol client.
///
/// Any number of threads may call concurrently; a background reader routes
/// each response to its caller by id.
pub struct Client {
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Arc<Mutex<Pending>>,
    next_id: AtomicU64,
    child: Mutex<Option<Child>>,
    tcp: Option<TcpStream>,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client").field("next_id", &self.next_id).finish_non_exhaustive()
    }
}

impl Client {
    /// Speak the protocol over an arbitrary byte stream pair.
    pub fn new(reader: impl Read + Send + 'static, writer: impl Write + Send + 'static) -> Self {
        let pending = Arc::new(Mutex::new(Pending::default()));
        let routes = Arc::clone(&pending);
        std::thread::Builder::new()
            .name("retouch-protocol-reader".into())
            .spawn(move || reader_loop(BufReader::new(reader), routes))
            .expect("spawn protocol reader");
        Self {
            writer: Mutex::new(Box::new(BufWriter::new(writer))),
            pending,
            next_id: AtomicU64::new(1),
            child: Mutex::new(None),
            tcp: None,
        }
    }

    pub fn connect(transport: &Transport) -> Result<Self, ProtocolError> {
        match transport {
            Transport::Tcp(addr) => {
                let mut last = ProtocolError::Transport(format!("{addr} resolved to no addresses"));
                let addrs = addr
                    .to_socket_addrs()
                    .map_err(|e| ProtocolError::Transport(format!("resolving {addr}: {e}")))?;
                for sa in addrs {
                    match TcpStream::connect_timeout(&sa, CONNECT_TIMEOUT) {
                        Ok(stream) => {
                            let _ = stream.set_nodelay(true);
                            let read = stream.try_clone()?;
                            let write = stream.try_clone()?;
                            let mut client = Self::new(read, write);
                            client.tcp = Some(stream);
                            return Ok(client);
                        }
                        Err(e) => last = ProtocolError::Transport(format!("connecting to {sa}: {e}")),
                    }
                }
                Err(last)
            }
            Transport::Stdio(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| ProtocolError::Transport(format!("spawning {:?}: {e}", argv[0])))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let client = Self::new(stdout, stdin);
                *client.child.lock().unwrap() = Some(child);
                Ok(client)
            }
        }
    }

    /// Send one request and wait for its response.
    pub fn call(&self, op: Op, args: Value) -> Result<Value, ProtocolError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        {
            let mut pending = self.pending.lock().unwrap();
            if let Some(err) = &pending.closed {
                return Err(err.clone());
            }
            pending.waiters.insert(id, tx);
        }
        let payload = serde_json::to_vec(&Request { id, op, args })
            .map_err(|e| ProtocolError::Framing(format!("encoding request: {e}")))?;
        let sent = {
            let mut w = self.writer.lock().unwrap();
            write_frame(&mut *w, &payload)
        };
        if let Err(e) = sent {
            self.pending.lock().unwrap().waiters.remove(&id);
            return Err(e);
        }
        rx.recv()
            .unwrap_or_else(|_| Err(ProtocolError::Transport("connection reader stopped".into())))
    }

    /// Typed wrapper around [`Client::call`].
    pub fn request<A: Serialize, T: DeserializeOwned>(&self, op: Op, args: &A) -> Result<T, ProtocolError> {
        let args = serde_json::to_value(args).map_err(|e| ProtocolError::Framing(e.to_string()))?;
        let value = self.call(op, args)?;
        serde_json::from_value(value).map_err(|e| ProtocolError::Framing(format!("{op:?} result: {e}")))
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        if let Some(stream) = &self.tcp {
            let _ = stream.shutdown(Shutdown::Both);
        }
        if let Some(mut child) = self.child.lock().unwrap().take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn reader_loop(mut reader: impl Read, pending: Arc<Mutex<Pending>>) {
    let fatal = loop {
        let payload = match read_frame(&mut reader) {
            Ok(Some(p)) => p,
            Ok(None) => break ProtocolError::Transport("server closed the connection".into()),
            Err(e) => break e,
        };
        let resp: Response = match serde_json::from_slice(&payload) {
            Ok(r) => r,
            Err(e) => break ProtocolError::Framing(format!("malformed response: {e}")),
        };
        let waiter = pending.lock().unwrap().waiters.remove(&resp.id);
        match waiter {
            Some(w) => {
                let _ = w.send(resp.into_result());
            }
            None if resp.id == 0 && !resp.ok => {
                break ProtocolError::Framing(resp.error.unwrap_or_else(|| "server rejected the stream".into()))
            }
            None => break ProtocolError::Framing(format!("response for unknown request id {}", resp.id)),
        }
    };
    log::debug!("protocol reader stopped: {fatal}");
    pending.lock().unwrap().close(fatal);
}

/// All five model roles served by one remote endpoint.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    client: Arc<Client>,
    info: HandshakeInfo,
    endpoint: String,
}

impl RemoteBackend {
    pub fn connect(transport: Transport) -> Result<Self, ProtocolError> {
        let endpoint = match &transport {
            Transport::Tcp(a) => format!("tcp://{a}"),
            Transport::Stdio(argv) => format!("stdio:{}", argv.join(" ")),
        };
        Self::handshake(Client::connect(&transport)?, endpoint)
    }

    /// Handshake over an already-open stream pair.
    pub fn from_streams(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        endpoint: impl Into<String>,
    ) -> Result<Self, ProtocolError> {
        Self::handshake(Client::new(reader, writer), endpoint.into())
    }

    fn handshake(client: Client, endpoint: String) -> Result<Self, ProtocolError> {
        let info: HandshakeInfo =
            client.request(Op::Handshake, &json!({"client": "retouch", "protocol": 1}))?;
        info.validate()?;
        Ok(Self { client: Arc::new(client), info, endpoint })
    }

    pub fn info(&self) -> &HandshakeInfo {
        &self.info
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    pub fn into_backends(self) -> Result<Backends> {
        let shared = Arc::new(self);
        let mut identifiers: Vec<(String, String)> =
            vec![("endpoint".to_string(), shared.endpoint.clone())];
        identifiers.extend(shared.info.models.iter().map(|(k, v)| (k.clone(), v.clone())));
        Ok(Backends {
            text: shared.clone(),
            image: shared.clone(),
            segmenter: shared.clone(),
            codec: shared.clone(),
            denoiser: shared.clone(),
            descriptor: BackendDescriptor {
                kind: BackendKind::Remote,
                endpoint: Some(shared.endpoint.clone()),
                embedding_dim: shared.info.embedding_dim,
                latent_stride: shared.info.latent_stride,
                seed: 0,
            },
            identifiers,
        })
    }

    fn embedding(&self, result: EmbeddingResult) -> Result<Vec<f32>> {
        let v = result.embedding.to_f32()?;
        if v.len() != self.info.embedding_dim {
            return Err(Error::Backend(format!(
                "server returned a {}-d embedding, handshake declared {}",
                v.len(),
                self.info.embedding_dim
            )));
        }
        let wide: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
        let norm = wide.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() <= 1e-6 {
            Ok(v)
        } else {
            normalize(&wide)
        }
    }
}

impl TextEmbedder for RemoteBackend {
    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let r = self.client.request(Op::EmbedText, &TextArgs { text: text.to_string() })?;
        self.embedding(r)
    }
}

impl ImageEmbedder for RemoteBackend {
    fn embed_image(&self, image: &Image) -> Result<Vec<f32>> {
        let r = self.client.request(Op::EmbedImage, &ImageArgs { image: WireTensor::from_image(image) })?;
        self.embedding(r)
    }
}

impl Segmenter for RemoteBackend {
    fn segment(&self, image: &Image) -> Result<Vec<BinaryMask>> {
        let r: MasksResult =
            self.client.request(Op::Segment, &ImageArgs { image: WireTensor::from_image(image) })?;
        r.masks
            .iter()
            .map(|m| {
                let mask = m.to_mask()?;
                if mask.dims() != image.dims() {
                    return Err(Error::Backend(format!(
                        "segmenter mask is {:?}, image is {:?}",
                        mask.dims(),
                        image.dims()
                    )));
                }
                Ok(mask)
            })
            .collect()
    }
}

impl LatentCodec for RemoteBackend {
    fn stride(&self) -> usize {
        self.info.latent_stride
    }

    fn encode(&self, image: &Image) -> Result<Latent> {
        let r: LatentResult =
            self.client.request(Op::Encode, &ImageArgs { image: WireTensor::from_image(image) })?;
        let latent = r.latent.to_latent()?;
        let s = self.info.latent_stride;
        if latent.height() * s != image.height() || latent.width() * s != image.width() {
            return Err(Error::Backend(format!(
                "encoded latent {:?} does not match a {}x{} image at stride {s}",
                latent.shape(),
                image.width(),
                image.height()
            )));
        }
        Ok(latent)
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        let r: ImageResult =
            self.client.request(Op::Decode, &LatentArgs { latent: WireTensor::from_latent(latent) })?;
        let image = r.image.to_image()?;
        let s = self.info.latent_stride;
        if image.dims() != (latent.width() * s, latent.height() * s) {
            return Err(Error::Backend(format!(
                "decoded image {:?} does not match latent {:?} at stride {s}",
                image.dims(),
                latent.shape()
            )));
        }
        Ok(image)
    }
}

impl Denoiser for RemoteBackend {
    fn predict_noise(&self, z_t: &Latent, t: usize, text: &str) -> Result<Latent> {
        let args = PredictNoiseArgs { latent: WireTensor::from_latent(z_t), t, text: text.to_string() };
        let r: NoiseResult = self.client.request(Op::PredictNoise, &args)?;
        let noise = r.noise.to_latent()?;
        if noise.shape() != z_t.shape() {
            return Err(Error::Backend(format!(
                "predicted noise {:?} does not match latent {:?}",
                noise.shape(),
                z_t.shape()
            )));
        }
        Ok(noise)
    }
}

/// Model identifiers in a stable order, used for handshakes.
pub(crate) fn model_map(identifiers: &[(String, String)]) -> BTreeMap<String, String> {
    identifiers.iter().cloned().collect()
}
