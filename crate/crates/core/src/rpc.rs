//! Archive-node client: fetches a transaction's call tree, storage accesses and
//! logs over JSON-RPC and normalizes them into a [`RawTrace`].
//!
//! The trace comes from `debug_traceTransaction` with the `callTracer`
//! (`withLog: true`). Frames may additionally carry a `storage` array of
//! `{kind, key, val, position}` objects when the node runs a tracer that
//! records storage accesses; plain geth omits it and the trace then has an
//! empty state sequence.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::trace_ingest::{
    normalize_hex, parse_uint, AccessKind, CallKind, RawCallFrame, RawLogEvent, RawStateAccess,
    RawTrace,
};

const METHOD_NOT_FOUND: i64 = -32601;

#[derive(Debug, Clone)]
pub struct RpcConfig {
    /// Attempts after the first one, for connection-level failures only.
    pub retries: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl Default for RpcConfig {
    fn default() -> Self {
        RpcConfig {
            retries: 2,
            backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(30),
        }
    }
}

pub struct RpcClient {
    endpoint: String,
    config: RpcConfig,
    agent: ureq::Agent,
    next_id: AtomicU64,
}

struct RpcFailure {
    code: i64,
    message: String,
}

impl RpcClient {
    pub fn new(endpoint: impl Into<String>, config: RpcConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RpcClient {
            endpoint: endpoint.into(),
            config,
            agent,
            next_id: AtomicU64::new(1),
        }
    }

    /// One JSON-RPC round trip. Transport failures are retried; JSON-RPC
    /// errors are returned as `Ok(Err(..))` for the caller to classify.
    fn call(&self, method: &str, params: Value) -> Result<std::result::Result<Value, RpcFailure>> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let body = json!({"jsonrpc": "2.0", "id": id, "method": method, "params": params});
        let mut last_err = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff * attempt);
            }
            let mut resp = match self.agent.post(&self.endpoint).send_json(&body) {
                Ok(r) => r,
                Err(e) => {
                    last_err = e.to_string();
                    continue;
                }
            };
            let status = resp.status().as_u16();
            let reply: Value = match resp.body_mut().read_json() {
                Ok(v) => v,
                Err(e) if status >= 500 => {
                    last_err = format!("HTTP {status}: {e}");
                    continue;
                }
                Err(e) => return Err(Error::Rpc(format!("HTTP {status}: unreadable reply: {e}"))),
            };
            if reply.get("id").and_then(Value::as_u64) != Some(id) {
                return Err(Error::Rpc(format!(
                    "response id {:?} does not match request id {id}",
                    reply.get("id")
                )));
            }
            if let Some(err) = reply.get("error") {
                return Ok(Err(RpcFailure {
                    code: err.get("code").and_then(Value::as_i64).unwrap_or(0),
                    message: err
                        .get("message")
                        .and_then(Value::as_str)
                        .unwrap_or_default()
                        .to_string(),
                }));
            }
            return Ok(Ok(reply.get("result").cloned().unwrap_or(Value::Null)));
        }
        Err(Error::Connection(format!("{}: {last_err}", self.endpoint)))
    }

    pub fn fetch_trace(&self, tx_hash: &str) -> Result<RawTrace> {
        let tx_hash = normalize_hex(tx_hash, Some(32)).map_err(Error::InvalidArgument)?;

        let tx = self
            .call("eth_getTransactionByHash", json!([tx_hash]))?
            .map_err(|f| Error::Rpc(format!("eth_getTransactionByHash: {} ({})", f.message, f.code)))?;
        if tx.is_null() {
            return Err(Error::UnknownTransaction(tx_hash));
        }
        let block_number = match tx.get("blockNumber") {
            Some(v) if !v.is_null() => {
                let n = parse_uint(v).map_err(Error::Rpc)?;
                u64::try_from(n).map_err(|_| Error::Rpc("block number exceeds u64".into()))?
            }
            _ => 0,
        };

        let method = "debug_traceTransaction";
        let params = json!([tx_hash, {"tracer": "callTracer", "tracerConfig": {"withLog": true}}]);
        let result = match self.call(method, params)? {
            Ok(v) => v,
            Err(f) if is_capability_error(&f) => {
                return Err(Error::TraceUnsupported {
                    method: method.into(),
                    code: f.code,
                    message: f.message,
                })
            }
            Err(f) if f.message.contains("not found") => {
                return Err(Error::UnknownTransaction(tx_hash))
            }
            Err(f) => return Err(Error::Rpc(format!("{method}: {} ({})", f.message, f.code))),
        };

        let mut state = Vec::new();
        let mut logs = Vec::new();
        let mut counter = 0usize;
        let root = convert_frame(&result, &mut counter, &mut state, &mut logs)?;
        let trace = RawTrace {
            tx_hash,
            block_number,
            root,
            state,
            logs,
            label: None,
            tags: Vec::new(),
        };
        trace.validate_owners()?;
        Ok(trace)
    }
}

fn is_capability_error(f: &RpcFailure) -> bool {
    let m = f.message.to_ascii_lowercase();
    f.code == METHOD_NOT_FOUND
        || m.contains("method not found")
        || m.contains("not supported")
        || m.contains("unsupported")
        || m.contains("does not exist/is not available")
}

fn field_hex(v: &Value, field: &str, bytes: Option<usize>) -> Result<String> {
    match v.get(field) {
        None | Some(Value::Null) => Ok("0x".to_string()),
        Some(Value::String(s)) => {
            normalize_hex(s, bytes).map_err(|m| Error::Rpc(format!("trace field `{field}`: {m}")))
        }
        Some(other) => Err(Error::Rpc(format!("trace field `{field}`: unexpected {other}"))),
    }
}

fn field_uint(v: &Value, field: &str) -> Result<u128> {
    match v.get(field) {
        None | Some(Value::Null) => Ok(0),
        Some(x) => parse_uint(x).map_err(|m| Error::Rpc(format!("trace field `{field}`: {m}"))),
    }
}

/// Converts one callTracer frame, assigning pre-order indices via `counter`.
fn convert_frame(
    v: &Value,
    counter: &mut usize,
    state: &mut Vec<RawStateAccess>,
    logs: &mut Vec<RawLogEvent>,
) -> Result<RawCallFrame> {
    let index = *counter;
    *counter += 1;

    let kind_s = v
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Rpc("call frame without `type`".into()))?;
    let kind = CallKind::parse(kind_s)
        .ok_or_else(|| Error::Rpc(format!("unknown call type {kind_s:?}")))?;
    let to = match v.get("to") {
        None | Some(Value::Null) if kind == CallKind::Create => String::new(),
        _ => field_hex(v, "to", Some(20))?,
    };

    for s in v.get("storage").and_then(Value::as_array).into_iter().flatten() {
        let kind_s = s.get("kind").and_then(Value::as_str).unwrap_or_default();
        let kind = AccessKind::parse(kind_s)
            .ok_or_else(|| Error::Rpc(format!("unknown storage access kind {kind_s:?}")))?;
        state.push(RawStateAccess {
            kind,
            key: field_hex(s, "key", Some(32))?,
            val: field_hex(s, "val", Some(32))?,
            owner_frame: index,
            position: s
                .get("position")
                .map(|p| parse_uint(p).map(|n| n as usize))
                .transpose()
                .map_err(Error::Rpc)?,
        });
    }

    for l in v.get("logs").and_then(Value::as_array).into_iter().flatten() {
        let topics: Vec<&str> = l
            .get("topics")
            .and_then(Value::as_array)
            .map(|t| t.iter().filter_map(Value::as_str).collect())
            .unwrap_or_default();
        let event_hash = match topics.first() {
            Some(t) => normalize_hex(t, Some(32)).map_err(Error::Rpc)?,
            // anonymous events carry no signature topic
            None => format!("0x{}", "00".repeat(32)),
        };
        // Indexed parameters (topics 1..) are prepended to the data words.
        let mut data = String::from("0x");
        for t in topics.iter().skip(1) {
            data.push_str(&normalize_hex(t, Some(32)).map_err(Error::Rpc)?[2..]);
        }
        data.push_str(&field_hex(l, "data", None)?[2..]);
        logs.push(RawLogEvent {
            contract: field_hex(l, "address", Some(20))?,
            event_hash,
            data,
            owner_frame: index,
            position: l
                .get("position")
                .map(|p| parse_uint(p).map(|n| n as usize))
                .transpose()
                .map_err(Error::Rpc)?,
        });
    }

    let mut children = Vec::new();
    for c in v.get("calls").and_then(Value::as_array).into_iter().flatten() {
        children.push(convert_frame(c, counter, state, logs)?);
    }

    let gas = u64::try_from(field_uint(v, "gas")?)
        .map_err(|_| Error::Rpc("gas exceeds u64".into()))?;
    Ok(RawCallFrame {
        kind,
        from: field_hex(v, "from", Some(20))?,
        to,
        input: field_hex(v, "input", None)?,
        output: field_hex(v, "output", None)?,
        gas,
        value: field_uint(v, "value")?,
        children,
    })
}

/// Fetches one transaction trace from `endpoint`.
pub fn fetch_trace(endpoint: &str, tx_hash: &str, config: &RpcConfig) -> Result<RawTrace> {
    RpcClient::new(endpoint, config.clone()).fetch_trace(tx_hash)
}
