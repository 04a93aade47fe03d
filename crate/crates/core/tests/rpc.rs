use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use sentinel_core::rpc::{fetch_trace, RpcConfig};
use sentinel_core::Error;
use serde_json::{json, Value};

/// Serves JSON-RPC over HTTP/1.1 until the test process exits. `reply` maps a
/// (method, params) pair to the `result` or `error` member.
fn mock_node(reply: fn(&str, &Value) -> Value) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            thread::spawn(move || serve(stream, reply));
        }
    });
    format!("http://{addr}")
}

fn serve(stream: TcpStream, reply: fn(&str, &Value) -> Value) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut out = stream;
    loop {
        let mut len = 0usize;
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        loop {
            line.clear();
            reader.read_line(&mut line).unwrap();
            let l = line.trim_end();
            if l.is_empty() {
                break;
            }
            if let Some((k, v)) = l.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    len = v.trim().parse().unwrap();
                }
            }
        }
        let mut body = vec![0u8; len];
        reader.read_exact(&mut body).unwrap();
        let req: Value = serde_json::from_slice(&body).unwrap();
        let method = req["method"].as_str().unwrap();
        let mut resp = reply(method, &req["params"]);
        resp["jsonrpc"] = json!("2.0");
        resp["id"] = req["id"].clone();
        let text = resp.to_string();
        write!(
            out,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{}",
            text.len(),
            text
        )
        .unwrap();
        out.flush().unwrap();
    }
}

const TX: &str = "0x1111111111111111111111111111111111111111111111111111111111111111";
const A: &str = "0x00000000000000000000000000000000000000aa";
const B: &str = "0x00000000000000000000000000000000000000bb";
const C: &str = "0x00000000000000000000000000000000000000cc";

fn quick() -> RpcConfig {
    RpcConfig {
        retries: 0,
        backoff: Duration::from_millis(1),
        timeout: Duration::from_secs(5),
    }
}

fn two_frames(method: &str, params: &Value) -> Value {
    match method {
        "eth_getTransactionByHash" if params[0] == TX => json!({"result": {"hash": TX, "blockNumber": "0x10"}}),
        "eth_getTransactionByHash" => json!({"result": null}),
        "debug_traceTransaction" => json!({"result": {
            "type": "CALL", "from": A, "to": B, "gas": "0x5208", "value": "0x0",
            "input": "0xa9059cbb", "output": "0x",
            "logs": [{"address": B, "topics": [format!("0x{}", "ab".repeat(32))], "data": "0x"}],
            "calls": [{"type": "STATICCALL", "from": B, "to": C, "gas": "0x100", "input": "0x", "output": "0x"}]
        }}),
        _ => json!({"error": {"code": -32601, "message": "method not found"}}),
    }
}

#[test]
fn fetches_a_two_frame_trace() {
    let url = mock_node(two_frames);
    let trace = fetch_trace(&url, TX, &quick()).unwrap();
    assert_eq!(trace.tx_hash, TX);
    assert_eq!(trace.block_number, 16);
    assert_eq!(trace.root.frame_count(), 2);
    assert_eq!(trace.root.to, B);
    assert_eq!(trace.root.gas, 21000);
    assert_eq!(trace.root.children[0].to, C);
    assert_eq!(trace.logs.len(), 1);
    assert_eq!(trace.logs[0].owner_frame, 0);
    assert!(trace.state.is_empty());
}

#[test]
fn unknown_hash_is_reported() {
    let url = mock_node(two_frames);
    let other = format!("0x{}", "22".repeat(32));
    assert!(matches!(fetch_trace(&url, &other, &quick()), Err(Error::UnknownTransaction(_))));
}

#[test]
fn missing_debug_namespace_is_a_capability_error() {
    fn no_debug(method: &str, params: &Value) -> Value {
        match method {
            "debug_traceTransaction" => json!({"error": {"code": -32601, "message": "the method debug_traceTransaction does not exist/is not available"}}),
            _ => two_frames(method, params),
        }
    }
    let url = mock_node(no_debug);
    match fetch_trace(&url, TX, &quick()) {
        Err(Error::TraceUnsupported { code, .. }) => assert_eq!(code, -32601),
        other => panic!("expected TraceUnsupported, got {other:?}"),
    }
}

#[test]
fn unreachable_endpoint_is_a_connection_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}");
    assert!(matches!(fetch_trace(&url, TX, &quick()), Err(Error::Connection(_))));
}
