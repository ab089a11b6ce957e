//! The remote encoder against a throwaway in-process HTTP service.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;

use vulnforge_core::embed::{EmbedError, EncoderSpec};

/// Serves `requests` POSTs, answering each with `respond(texts)`.
fn serve(requests: usize, respond: fn(&[String]) -> String) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for stream in listener.incoming().take(requests) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let texts: Vec<String> = serde_json::from_value(req["texts"].clone()).unwrap();
            let payload = respond(&texts);
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                payload.len(),
                payload
            )
            .unwrap();
        }
    });
    format!("http://{addr}/embed")
}

#[test]
fn vectors_come_back_in_request_order_and_normalized() {
    let url = serve(1, |texts| {
        let vectors: Vec<Vec<f64>> = texts.iter().map(|t| vec![t.len() as f64, 0.0, 3.0]).collect();
        serde_json::json!({ "vectors": vectors }).to_string()
    });
    let enc = EncoderSpec::remote("mpnet", url, 3).build().unwrap();
    let out = enc.encode(&["abcd".into(), "".into()]).unwrap();
    assert_eq!(out.len(), 2);
    assert!((out[0].values[0] - 0.8).abs() < 1e-12);
    assert!((out[0].values[2] - 0.6).abs() < 1e-12);
    assert_eq!(out[1].values, vec![0.0, 0.0, 1.0]);
    assert_eq!(out[0].encoder_id, "mpnet");
}

#[test]
fn wrong_dimension_is_a_contract_violation() {
    let url = serve(1, |texts| {
        let vectors: Vec<Vec<f64>> = texts.iter().map(|_| vec![1.0, 2.0]).collect();
        serde_json::json!({ "vectors": vectors }).to_string()
    });
    let enc = EncoderSpec::remote("use", url, 3).build().unwrap();
    assert!(matches!(enc.encode(&["x".into()]), Err(EmbedError::Contract(_))));
}

#[test]
fn unreachable_service_is_a_transport_error() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let enc = EncoderSpec::remote("use", format!("http://127.0.0.1:{port}/embed"), 3)
        .build()
        .unwrap();
    assert!(matches!(enc.encode(&["x".into()]), Err(EmbedError::Transport(_))));
}
