mod common;

use std::io::Cursor;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::corpus;
use retouch_core::backends::{Backends, TextEmbedder};
use retouch_core::diffusion::{DiffusionSchedule, RetouchConfig};
use retouch_core::pipeline::{run_pipeline, PipelineConfig};
use retouch_core::protocol::{
    handle_request, loopback, read_frame, write_frame, Client, ProtocolError, RemoteBackend, Request, WireTensor,
};
use retouch_core::{Error, Image, TextPrompt};

fn echo_client() -> Client {
    let (server_read, client_write) = std::io::pipe().unwrap();
    let (client_read, server_write) = std::io::pipe().unwrap();
    std::thread::spawn(move || corpus::echo_server(server_read, server_write));
    Client::new(client_read, client_write)
}

#[test]
fn random_tensors_round_trip_bitwise_over_loopback() {
    let client = echo_client();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e57);
    for i in 0..100 {
        let n = if i == 0 { 1 << 20 } else { rng.random_range(1..=1 << 20) };
        let values: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random())).collect();
        let back = corpus::echo_round_trip(&client, &[n], &values).unwrap();
        assert_eq!(back.len(), n);
        assert!(back.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()), "tensor {i}");
    }
}

#[test]
fn largest_codec_tensor_round_trips() {
    let n = 1 << 24;
    let values: Vec<f32> = (0..n as u32).map(|i| f32::from_bits(i.wrapping_mul(2_654_435_761))).collect();
    let t = WireTensor::from_f32(&[n], &values);
    let json = serde_json::to_vec(&t).unwrap();
    let back: WireTensor = serde_json::from_slice(&json).unwrap();
    let decoded = back.to_f32().unwrap();
    assert!(decoded.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn corpus_replays_in_both_directions() {
    let dir = corpus::corpus_dir(env!("CARGO_MANIFEST_DIR"));
    let (requests, responses) = corpus::load(&dir).expect("corpus present");
    corpus::replay_server(&requests, &responses).unwrap();
    corpus::replay_client(&requests, &responses).unwrap();
    corpus::malformed_replies_are_errors(&responses).unwrap();
}

#[test]
fn recorded_corpus_matches_a_fresh_recording() {
    let dir = corpus::corpus_dir(env!("CARGO_MANIFEST_DIR"));
    let (requests, responses) = corpus::load(&dir).unwrap();
    let (fresh_req, fresh_resp) = corpus::record();
    assert!(fresh_req == requests, "client request bytes drifted from the corpus");
    assert!(fresh_resp == responses, "server response bytes drifted from the corpus");
}

/// Regenerate with `cargo test -p retouch-core --test protocol -- --ignored record_corpus`.
#[test]
#[ignore]
fn record_corpus() {
    let (requests, responses) = corpus::record();
    corpus::save(&corpus::corpus_dir(env!("CARGO_MANIFEST_DIR")), &requests, &responses).unwrap();
}

#[test]
fn responses_may_arrive_out_of_order() {
    let backends = Backends::mock(1, 8, 1, &DiffusionSchedule::default());
    let served = backends.clone();
    let (server_read, client_write) = std::io::pipe().unwrap();
    let (client_read, mut server_write) = std::io::pipe().unwrap();
    const N: usize = 8;
    std::thread::spawn(move || {
        let mut r = server_read;
        let hs: Request = serde_json::from_slice(&read_frame(&mut r).unwrap().unwrap()).unwrap();
        let reply = serde_json::to_vec(&handle_request(&served, &hs)).unwrap();
        write_frame(&mut server_write, &reply).unwrap();
        // hold every request until all are in flight, then answer newest first
        let reqs: Vec<Request> =
            (0..N).map(|_| serde_json::from_slice(&read_frame(&mut r).unwrap().unwrap()).unwrap()).collect();
        for req in reqs.iter().rev() {
            let reply = serde_json::to_vec(&handle_request(&served, req)).unwrap();
            write_frame(&mut server_write, &reply).unwrap();
        }
    });
    let remote = Arc::new(RemoteBackend::from_streams(client_read, client_write, "reordering").unwrap());
    let handles: Vec<_> = (0..N)
        .map(|i| {
            let remote = remote.clone();
            std::thread::spawn(move || (i, remote.embed_text(&format!("text {i}")).unwrap()))
        })
        .collect();
    for h in handles {
        let (i, got) = h.join().unwrap();
        assert_eq!(got, backends.text.embed_text(&format!("text {i}")).unwrap());
    }
}

#[test]
fn malformed_length_from_server_is_fatal_for_the_client() {
    let (server_read, client_write) = std::io::pipe().unwrap();
    let (client_read, mut server_write) = std::io::pipe().unwrap();
    std::thread::spawn(move || {
        use std::io::Write;
        let mut r = server_read;
        let _ = read_frame(&mut r);
        server_write.write_all(&[0, 0, 0, 0]).unwrap();
        let _ = read_frame(&mut r);
    });
    let client = Client::new(client_read, client_write);
    let err = client.call(retouch_core::protocol::Op::Handshake, serde_json::json!({})).unwrap_err();
    assert!(matches!(err, ProtocolError::Framing(_)), "{err:?}");
    let again = client.call(retouch_core::protocol::Op::Handshake, serde_json::json!({})).unwrap_err();
    assert!(matches!(again, ProtocolError::Framing(_)));
}

#[test]
fn connection_loss_is_retriable() {
    let (server_read, client_write) = std::io::pipe().unwrap();
    let (client_read, server_write) = std::io::pipe().unwrap();
    std::thread::spawn(move || {
        let mut r = server_read;
        let _ = read_frame(&mut r);
        drop(server_write);
    });
    let client = Client::new(client_read, client_write);
    let err = client.call(retouch_core::protocol::Op::Handshake, serde_json::json!({})).unwrap_err();
    assert!(err.is_retriable(), "{err:?}");
}

#[test]
fn server_errors_are_typed_remote_errors() {
    let remote = loopback(Backends::mock(0, 8, 1, &DiffusionSchedule::default())).unwrap();
    let z = retouch_core::Latent::zeros(3, 2, 2);
    use retouch_core::backends::Denoiser;
    match remote.predict_noise(&z, 0, "x") {
        Err(Error::Protocol(ProtocolError::Remote { message })) => assert!(!message.is_empty()),
        other => panic!("expected a remote error, got {other:?}"),
    }
}

#[test]
fn handshake_bounds_are_enforced() {
    let huge = Backends::mock(0, 5000, 1, &DiffusionSchedule::default());
    assert!(matches!(loopback(huge), Err(ProtocolError::Framing(_))));
}

#[test]
fn pipeline_over_loopback_matches_in_process() {
    let mut config = PipelineConfig::default();
    config.mask.floor = -1.0;
    config.retouch = RetouchConfig { steps: 25, ..RetouchConfig::with_base_seed(3, 5) };
    let sched = config.retouch.schedule().unwrap();
    let local = Backends::mock(2, 16, 1, &sched);
    let remote = loopback(Backends::mock(2, 16, 1, &sched)).unwrap().into_backends().unwrap();

    let data = (0..16 * 16).flat_map(|i| if i % 16 < 6 { [0.7, 0.6, 0.1] } else { [0.2, 0.2, 0.3] }).collect();
    let image = Image::new(16, 16, data).unwrap();
    let query = TextPrompt::query("the yellow part").unwrap();
    let text = TextPrompt::conditional("blue water").unwrap();
    let a = run_pipeline(&image, &query, &text, &local, &config).unwrap();
    let b = run_pipeline(&image, &query, &text, &remote, &config).unwrap();
    assert_eq!(a.region, b.region);
    assert_eq!(a.selection, b.selection);
    for (p, q) in a.retouch.proposals.iter().zip(&b.retouch.proposals) {
        assert_eq!(p.final_latent, q.final_latent);
        assert_eq!(p.image, q.image);
    }
}

#[test]
fn tcp_transport_end_to_end() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let served = Backends::mock(4, 8, 1, &DiffusionSchedule::default());
    std::thread::spawn(move || retouch_core::protocol::serve_listener(listener, served));
    let sched = DiffusionSchedule::default();
    let remote = Backends::resolve(&format!("tcp://{addr}"), &sched).unwrap();
    let local = Backends::mock(4, 8, 1, &sched);
    assert_eq!(remote.text.embed_text("hello").unwrap(), local.text.embed_text("hello").unwrap());
    assert_eq!(remote.descriptor.embedding_dim, 8);
}

#[test]
fn request_bytes_are_stable() {
    let mut out = Vec::new();
    let req = Request { id: 3, op: retouch_core::protocol::Op::EmbedText, args: serde_json::json!({"text": "hi"}) };
    write_frame(&mut out, &serde_json::to_vec(&req).unwrap()).unwrap();
    let body = br#"{"id":3,"op":"embed_text","args":{"text":"hi"}}"#;
    assert_eq!(&out[..4], &(body.len() as u32).to_be_bytes());
    assert_eq!(&out[4..], body);
    assert_eq!(read_frame(&mut Cursor::new(out)).unwrap().unwrap(), body);
}
