//! The remote embedding protocol against a minimal local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use base64::Engine as _;
use neurogen::embeddings::{EmbeddingRequest, EmbeddingResponse, Provider, RemoteProvider};
use neurogen::Error;

#[derive(Clone, Copy)]
enum Behaviour {
    Echo,
    WrongDim,
    Fail,
    WrongId,
}

/// Serves until the test ends; answers a vector derived from the image bytes.
fn serve(behaviour: Behaviour, dim: usize) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/embed", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            counter.fetch_add(1, Ordering::SeqCst);
            let req: EmbeddingRequest = serde_json::from_slice(&body).unwrap();
            let bytes = base64::engine::general_purpose::STANDARD.decode(&req.image_base64).unwrap();
            let first = bytes.first().copied().unwrap_or(0) as f64;
            let (status, text) = match behaviour {
                Behaviour::Fail => ("500 Internal Server Error", "encoder offline".to_string()),
                b => {
                    let n = if matches!(b, Behaviour::WrongDim) { dim / 2 } else { dim };
                    let id = if matches!(b, Behaviour::WrongId) { "other".to_string() } else { req.image_id };
                    let resp = EmbeddingResponse { image_id: id, dim: n, vector: (0..n).map(|i| first + i as f64).collect() };
                    ("200 OK", serde_json::to_string(&resp).unwrap())
                }
            };
            let _ = write!(stream, "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}", text.len());
        }
    });
    (url, hits)
}

fn images() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("cat.png"), [7u8, 1, 2]).unwrap();
    std::fs::write(d.path().join("dog.jpg"), [9u8]).unwrap();
    d
}

#[test]
fn answers_are_served_and_cached() {
    let (url, hits) = serve(Behaviour::Echo, 6);
    let dir = images();
    let p = Provider::Remote(RemoteProvider::new(url, dir.path(), 6, Duration::from_secs(5)));
    let cat = p.get("cat").unwrap();
    assert_eq!(cat.tokens().data(), &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
    assert_eq!(p.get("dog").unwrap().tokens().data()[0], 9.0);
    assert_eq!(p.get("cat").unwrap(), cat);
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn concurrent_readers_share_the_cache() {
    let (url, hits) = serve(Behaviour::Echo, 4);
    let dir = images();
    let p = RemoteProvider::new(url, dir.path(), 4, Duration::from_secs(5));
    p.get("cat").unwrap();
    thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| assert_eq!(p.get("cat").unwrap().tokens().data()[0], 7.0));
        }
    });
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    assert_eq!(p.cached(), 1);
}

#[test]
fn protocol_violations_are_provider_errors() {
    let dir = images();
    for b in [Behaviour::WrongDim, Behaviour::Fail, Behaviour::WrongId] {
        let (url, _) = serve(b, 6);
        let p = RemoteProvider::new(url, dir.path(), 6, Duration::from_secs(5));
        let err = p.get("cat").unwrap_err();
        assert!(matches!(err, Error::Provider(_)), "{err}");
        assert_eq!(p.cached(), 0);
    }
}

#[test]
fn unreachable_service_does_not_fall_back() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = images();
    let p = RemoteProvider::new(format!("http://127.0.0.1:{port}/embed"), dir.path(), 6, Duration::from_secs(2));
    assert!(matches!(p.get("cat"), Err(Error::Provider(_))));
    assert!(matches!(p.get("horse"), Err(Error::Data(_))));
}
