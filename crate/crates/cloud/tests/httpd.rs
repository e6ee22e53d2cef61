mod common;

use std::time::Duration;

use iotcloud::httpd::{start_httpd, HttpdConfig, HttpdHandle, StoreBackend, IDLE_TIMEOUT};
use iotcloud::store::start_node;
use iotcloud_core::http::{parse_response_head, BENCH_PAGE};
use iotcloud_core::NodeId;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

async fn server(cfg: HttpdConfig) -> HttpdHandle {
    start_httpd(cfg).await.unwrap()
}

/// Reads one Content-Length framed response: (status, body).
async fn read_response(stream: &mut TcpStream, buf: &mut Vec<u8>) -> (u16, Vec<u8>) {
    loop {
        if let Some(head) = parse_response_head(buf).unwrap() {
            if buf.len() >= head.total_len() {
                let body = buf[head.head_len..head.total_len()].to_vec();
                buf.drain(..head.total_len());
                return (head.status, body);
            }
        }
        let mut chunk = [0u8; 4096];
        let n = stream.read(&mut chunk).await.unwrap();
        assert!(n > 0, "connection closed mid-response");
        buf.extend_from_slice(&chunk[..n]);
    }
}

async fn roundtrip(stream: &mut TcpStream, buf: &mut Vec<u8>, raw: &str) -> (u16, Vec<u8>) {
    stream.write_all(raw.as_bytes()).await.unwrap();
    read_response(stream, buf).await
}

#[tokio::test]
async fn hundred_clients_ten_requests_each() {
    let s = server(HttpdConfig::new("127.0.0.1:0")).await;
    let addr = s.addr;
    let mut tasks = tokio::task::JoinSet::new();
    for _ in 0..100 {
        tasks.spawn(async move {
            let mut stream = TcpStream::connect(addr).await.unwrap();
            let mut buf = Vec::new();
            let mut ok = 0;
            for _ in 0..10 {
                let (status, body) = roundtrip(&mut stream, &mut buf, "GET /bench/page HTTP/1.1\r\nHost: t\r\n\r\n").await;
                assert_eq!(body, BENCH_PAGE);
                ok += usize::from(status == 200);
            }
            ok
        });
    }
    let mut total = 0;
    while let Some(n) = tasks.join_next().await {
        total += n.unwrap();
    }
    assert_eq!(total, 1000);
}

#[tokio::test]
async fn pipelined_requests_are_answered_in_order() {
    let s = server(HttpdConfig::new("127.0.0.1:0")).await;
    let mut stream = TcpStream::connect(s.addr).await.unwrap();
    let mut buf = Vec::new();
    stream
        .write_all(b"POST /p HTTP/1.1\r\nContent-Length: 5\r\n\r\nfirstGET /p HTTP/1.1\r\n\r\nDELETE /p HTTP/1.1\r\n\r\nGET /p HTTP/1.1\r\n\r\n")
        .await
        .unwrap();
    assert_eq!(read_response(&mut stream, &mut buf).await.0, 201);
    assert_eq!(read_response(&mut stream, &mut buf).await, (200, b"first".to_vec()));
    assert_eq!(read_response(&mut stream, &mut buf).await.0, 204);
    assert_eq!(read_response(&mut stream, &mut buf).await.0, 404);
}

#[tokio::test]
async fn method_semantics_and_errors() {
    let s = server(HttpdConfig::new("127.0.0.1:0")).await;
    let mut stream = TcpStream::connect(s.addr).await.unwrap();
    let mut buf = Vec::new();
    assert_eq!(roundtrip(&mut stream, &mut buf, "DELETE /missing HTTP/1.1\r\n\r\n").await.0, 404);
    assert_eq!(roundtrip(&mut stream, &mut buf, "POST /r HTTP/1.1\r\nContent-Length: 1\r\n\r\nx").await.0, 201);
    assert_eq!(roundtrip(&mut stream, &mut buf, "POST /r HTTP/1.1\r\nContent-Length: 1\r\n\r\ny").await.0, 200);
    assert_eq!(roundtrip(&mut stream, &mut buf, "GET /r HTTP/1.1\r\n\r\n").await, (200, b"y".to_vec()));
    assert_eq!(roundtrip(&mut stream, &mut buf, "PUT /r HTTP/1.1\r\nContent-Length: 0\r\n\r\n").await.0, 405);
    assert_eq!(roundtrip(&mut stream, &mut buf, "GET /health HTTP/1.1\r\n\r\n").await.0, 200);
    // A POST without Content-Length is refused and the connection closed.
    assert_eq!(roundtrip(&mut stream, &mut buf, "POST /r HTTP/1.1\r\n\r\n").await.0, 411);
    let mut rest = Vec::new();
    assert_eq!(stream.read_to_end(&mut rest).await.unwrap(), 0);

    let mut stream = TcpStream::connect(s.addr).await.unwrap();
    let mut buf = Vec::new();
    assert_eq!(roundtrip(&mut stream, &mut buf, "garbage\r\n\r\n").await.0, 400);
}

#[tokio::test]
async fn idle_connections_are_closed() {
    assert_eq!(IDLE_TIMEOUT, Duration::from_secs(30));
    let mut cfg = HttpdConfig::new("127.0.0.1:0");
    cfg.idle_timeout = Duration::from_millis(500);
    let s = server(cfg).await;
    let mut stream = TcpStream::connect(s.addr).await.unwrap();
    let mut buf = Vec::new();
    assert_eq!(roundtrip(&mut stream, &mut buf, "GET /bench/page HTTP/1.1\r\n\r\n").await.0, 200);
    let start = std::time::Instant::now();
    let mut rest = Vec::new();
    let n = tokio::time::timeout(Duration::from_secs(5), stream.read_to_end(&mut rest)).await.unwrap().unwrap();
    assert_eq!(n, 0);
    assert!(start.elapsed() >= Duration::from_millis(450));
    assert_eq!(s.stats().idle_closes.load(std::sync::atomic::Ordering::Relaxed), 1);
}

#[tokio::test]
async fn resources_can_live_in_the_slot_store() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::manifest(dir.path(), 3, &[], false);
    let mut nodes = Vec::new();
    for n in &m.nodes {
        nodes.push(start_node(m.clone(), NodeId(n.id)).await.unwrap());
    }
    common::wait_meshed(&m, Duration::from_secs(10)).await;
    let mut cfg = HttpdConfig::new("127.0.0.1:0");
    cfg.store = StoreBackend::Slot(m.clone());
    let s = server(cfg).await;
    let mut stream = TcpStream::connect(s.addr).await.unwrap();
    let mut buf = Vec::new();
    for i in 0..30 {
        let body = format!("body-{i}");
        let post = format!("POST /things/{i} HTTP/1.1\r\nContent-Type: text/x\r\nContent-Length: {}\r\n\r\n{body}", body.len());
        assert_eq!(roundtrip(&mut stream, &mut buf, &post).await.0, 201);
    }
    // A fresh server on the same store sees the same resources.
    let mut cfg = HttpdConfig::new("127.0.0.1:0");
    cfg.store = StoreBackend::Slot(m.clone());
    let other = server(cfg).await;
    let mut stream = TcpStream::connect(other.addr).await.unwrap();
    for i in 0..30 {
        let (status, body) = roundtrip(&mut stream, &mut buf, &format!("GET /things/{i} HTTP/1.1\r\n\r\n")).await;
        assert_eq!((status, body), (200, format!("body-{i}").into_bytes()));
    }
    assert_eq!(roundtrip(&mut stream, &mut buf, "DELETE /things/3 HTTP/1.1\r\n\r\n").await.0, 204);
    assert_eq!(roundtrip(&mut stream, &mut buf, "GET /things/3 HTTP/1.1\r\n\r\n").await.0, 404);
    drop(nodes);
}
