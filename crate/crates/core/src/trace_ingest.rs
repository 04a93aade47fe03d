//! Raw transaction traces: the canonical JSON-Lines record shape and its parser.
//!
//! One transaction per line:
//!
//! ```text
//! {"tx_hash","block_number",
//!  "root":{"kind","from","to","input","output","gas","value","children":[...]},
//!  "state":[{"kind","key","val","frame"}],
//!  "logs":[{"contract","event_hash","data","frame"}],
//!  "label","tags"}
//! ```
//!
//! `frame` is the owning call frame's pre-order index (root = 0). State and log
//! entries may carry an optional `position`: the number of the owner frame's
//! call children that executed before the access. Without it the leaf is
//! placed after the frame's call children.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CallKind {
    Call,
    DelegateCall,
    StaticCall,
    CallCode,
    Create,
}

impl CallKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CallKind::Call => "CALL",
            CallKind::DelegateCall => "DELEGATECALL",
            CallKind::StaticCall => "STATICCALL",
            CallKind::CallCode => "CALLCODE",
            CallKind::Create => "CREATE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CALL" => Some(CallKind::Call),
            "DELEGATECALL" => Some(CallKind::DelegateCall),
            "STATICCALL" => Some(CallKind::StaticCall),
            "CALLCODE" => Some(CallKind::CallCode),
            // CREATE2 collapses into CREATE: the salt is not part of the frame payload.
            "CREATE" | "CREATE2" => Some(CallKind::Create),
            _ => None,
        }
    }
}

impl fmt::Display for CallKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
}

impl AccessKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "read" | "sload" => Some(AccessKind::Read),
            "write" | "sstore" => Some(AccessKind::Write),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Adversarial,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Adversarial => "adversarial",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "benign" => Some(Label::Benign),
            "adversarial" => Some(Label::Adversarial),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCallFrame {
    pub kind: CallKind,
    pub from: String,
    /// Empty for contract creation.
    pub to: String,
    pub input: String,
    pub output: String,
    pub gas: u64,
    /// Wei. `u128` covers the total ether supply with room to spare.
    pub value: u128,
    pub children: Vec<RawCallFrame>,
}

impl RawCallFrame {
    pub fn new(kind: CallKind, from: &str, to: &str) -> Self {
        RawCallFrame {
            kind,
            from: from.to_string(),
            to: to.to_string(),
            input: "0x".to_string(),
            output: "0x".to_string(),
            gas: 0,
            value: 0,
            children: Vec::new(),
        }
    }

    /// Number of frames in this subtree, including `self`.
    pub fn frame_count(&self) -> usize {
        1 + self.children.iter().map(|c| c.frame_count()).sum::<usize>()
    }

    /// Frames in pre-order; the index in the returned vector is the frame index
    /// used by `frame` references.
    pub fn preorder(&self) -> Vec<&RawCallFrame> {
        let mut out = Vec::with_capacity(self.frame_count());
        let mut stack = vec![self];
        while let Some(f) = stack.pop() {
            out.push(f);
            stack.extend(f.children.iter().rev());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawStateAccess {
    pub kind: AccessKind,
    pub key: String,
    pub val: String,
    pub owner_frame: usize,
    pub position: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawLogEvent {
    pub contract: String,
    pub event_hash: String,
    pub data: String,
    pub owner_frame: usize,
    pub position: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTrace {
    pub tx_hash: String,
    pub block_number: u64,
    pub root: RawCallFrame,
    pub state: Vec<RawStateAccess>,
    pub logs: Vec<RawLogEvent>,
    pub label: Option<Label>,
    pub tags: Vec<String>,
}

impl RawTrace {
    pub fn is_adversarial(&self) -> bool {
        self.label == Some(Label::Adversarial)
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }

    /// Does any call frame originate from or target `address`?
    pub fn touches(&self, address: &str) -> bool {
        let address = address.to_ascii_lowercase();
        self.root
            .preorder()
            .iter()
            .any(|f| f.to == address || f.from == address)
    }

    /// Checks that every state/log owner index resolves to a frame.
    pub fn validate_owners(&self) -> Result<()> {
        let frames = self.root.frame_count();
        let owners = self
            .state
            .iter()
            .map(|s| s.owner_frame)
            .chain(self.logs.iter().map(|l| l.owner_frame));
        for index in owners {
            if index >= frames {
                return Err(Error::DanglingFrame { index, frames });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("tx_hash".into(), json!(self.tx_hash));
        obj.insert("block_number".into(), json!(self.block_number));
        obj.insert("root".into(), frame_to_json(&self.root));
        obj.insert(
            "state".into(),
            Value::Array(
                self.state
                    .iter()
                    .map(|s| {
                        let mut o = Map::new();
                        o.insert("kind".into(), json!(s.kind.as_str()));
                        o.insert("key".into(), json!(s.key));
                        o.insert("val".into(), json!(s.val));
                        o.insert("frame".into(), json!(s.owner_frame));
                        if let Some(p) = s.position {
                            o.insert("position".into(), json!(p));
                        }
                        Value::Object(o)
                    })
                    .collect(),
            ),
        );
        obj.insert(
            "logs".into(),
            Value::Array(
                self.logs
                    .iter()
                    .map(|l| {
                        let mut o = Map::new();
                        o.insert("contract".into(), json!(l.contract));
                        o.insert("event_hash".into(), json!(l.event_hash));
                        o.insert("data".into(), json!(l.data));
                        o.insert("frame".into(), json!(l.owner_frame));
                        if let Some(p) = l.position {
                            o.insert("position".into(), json!(p));
                        }
                        Value::Object(o)
                    })
                    .collect(),
            ),
        );
        obj.insert(
            "label".into(),
            self.label.map_or(Value::Null, |l| json!(l.as_str())),
        );
        obj.insert("tags".into(), json!(self.tags));
        Value::Object(obj)
    }

    pub fn to_json_line(&self) -> String {
        self.to_json().to_string()
    }

    /// Parses one JSONL record. `line` is only used for error reporting.
    pub fn from_json(value: &Value, line: usize) -> Result<RawTrace> {
        let cx = Cx { line };
        let obj = cx.object(value, "")?;
        let tx_hash = cx.hex_str(obj, "tx_hash", "", Some(32))?;
        let block_number = cx.u64_field(obj, "block_number", "")?;
        let root = cx.frame(cx.required(obj, "root", "")?, "root")?;
        let frames = root.frame_count();

        let mut state = Vec::new();
        for (i, v) in cx.array(obj, "state", "")?.iter().enumerate() {
            let path = format!("state[{i}]");
            let o = cx.object(v, &path)?;
            let kind_s = cx.str_field(o, "kind", &path)?;
            let kind = AccessKind::parse(kind_s)
                .ok_or_else(|| cx.err(&path, "kind", format!("unknown access kind {kind_s:?}")))?;
            let owner_frame = cx.frame_ref(o, &path, frames)?;
            state.push(RawStateAccess {
                kind,
                key: cx.hex_str(o, "key", &path, Some(32))?,
                val: cx.hex_str(o, "val", &path, Some(32))?,
                owner_frame,
                position: cx.opt_usize(o, "position", &path)?,
            });
        }

        let mut logs = Vec::new();
        for (i, v) in cx.array(obj, "logs", "")?.iter().enumerate() {
            let path = format!("logs[{i}]");
            let o = cx.object(v, &path)?;
            let owner_frame = cx.frame_ref(o, &path, frames)?;
            logs.push(RawLogEvent {
                contract: cx.hex_str(o, "contract", &path, Some(20))?,
                event_hash: cx.hex_str(o, "event_hash", &path, Some(32))?,
                data: cx.hex_str(o, "data", &path, None)?,
                owner_frame,
                position: cx.opt_usize(o, "position", &path)?,
            });
        }

        let label = match obj.get("label") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(
                Label::parse(s)
                    .ok_or_else(|| cx.err("", "label", format!("unknown label {s:?}")))?,
            ),
            Some(_) => return Err(cx.err("", "label", "expected string or null".into())),
        };

        let tags = match obj.get("tags") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(items)) => items
                .iter()
                .map(|t| {
                    t.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| cx.err("", "tags", "expected array of strings".into()))
                })
                .collect::<Result<_>>()?,
            Some(_) => return Err(cx.err("", "tags", "expected array of strings".into())),
        };

        Ok(RawTrace {
            tx_hash,
            block_number,
            root,
            state,
            logs,
            label,
            tags,
        })
    }
}

fn frame_to_json(f: &RawCallFrame) -> Value {
    // Values above u64 are written as decimal strings so that JSON readers
    // without big-number support still round-trip them.
    let value = if f.value <= u64::MAX as u128 {
        json!(f.value as u64)
    } else {
        json!(f.value.to_string())
    };
    json!({
        "kind": f.kind.as_str(),
        "from": f.from,
        "to": f.to,
        "input": f.input,
        "output": f.output,
        "gas": f.gas,
        "value": value,
        "children": f.children.iter().map(frame_to_json).collect::<Vec<_>>(),
    })
}

/// Error-reporting context for one line.
struct Cx {
    line: usize,
}

impl Cx {
    fn err(&self, path: &str, field: &str, message: String) -> Error {
        let field = if path.is_empty() {
            field.to_string()
        } else if field.is_empty() {
            path.to_string()
        } else {
            format!("{path}.{field}")
        };
        Error::Schema {
            line: self.line,
            field,
            message,
        }
    }

    fn object<'a>(&self, v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
        v.as_object()
            .ok_or_else(|| self.err(path, "", "expected JSON object".into()))
    }

    fn required<'a>(&self, o: &'a Map<String, Value>, field: &str, path: &str) -> Result<&'a Value> {
        match o.get(field) {
            Some(Value::Null) | None => Err(self.err(path, field, "missing required field".into())),
            Some(v) => Ok(v),
        }
    }

    fn str_field<'a>(&self, o: &'a Map<String, Value>, field: &str, path: &str) -> Result<&'a str> {
        self.required(o, field, path)?
            .as_str()
            .ok_or_else(|| self.err(path, field, "expected string".into()))
    }

    fn array<'a>(&self, o: &'a Map<String, Value>, field: &str, path: &str) -> Result<&'a [Value]> {
        match o.get(field) {
            None | Some(Value::Null) => Ok(&[]),
            Some(Value::Array(a)) => Ok(a),
            Some(_) => Err(self.err(path, field, "expected array".into())),
        }
    }

    /// Lowercased 0x-prefixed hex. `bytes` pins an exact byte length.
    fn hex_str(
        &self,
        o: &Map<String, Value>,
        field: &str,
        path: &str,
        bytes: Option<usize>,
    ) -> Result<String> {
        let s = self.str_field(o, field, path)?;
        normalize_hex(s, bytes).map_err(|m| self.err(path, field, m))
    }

    fn u64_field(&self, o: &Map<String, Value>, field: &str, path: &str) -> Result<u64> {
        let v = self.required(o, field, path)?;
        let n = parse_uint(v).map_err(|m| self.err(path, field, m))?;
        u64::try_from(n).map_err(|_| self.err(path, field, "value exceeds u64".into()))
    }

    fn opt_usize(&self, o: &Map<String, Value>, field: &str, path: &str) -> Result<Option<usize>> {
        match o.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => {
                let n = parse_uint(v).map_err(|m| self.err(path, field, m))?;
                usize::try_from(n)
                    .map(Some)
                    .map_err(|_| self.err(path, field, "index too large".into()))
            }
        }
    }

    fn frame_ref(&self, o: &Map<String, Value>, path: &str, frames: usize) -> Result<usize> {
        let idx = self
            .opt_usize(o, "frame", path)?
            .ok_or_else(|| self.err(path, "frame", "missing required field".into()))?;
        if idx >= frames {
            return Err(self.err(
                path,
                "frame",
                format!("frame index {idx} does not resolve ({frames} frames)"),
            ));
        }
        Ok(idx)
    }

    fn frame(&self, v: &Value, path: &str) -> Result<RawCallFrame> {
        let o = self.object(v, path)?;
        let kind_s = self.str_field(o, "kind", path)?;
        let kind = CallKind::parse(kind_s)
            .ok_or_else(|| self.err(path, "kind", format!("unknown call kind {kind_s:?}")))?;
        let from = self.hex_str(o, "from", path, Some(20))?;
        let to = match o.get("to") {
            None | Some(Value::Null) if kind == CallKind::Create => String::new(),
            Some(Value::String(s)) if s.is_empty() && kind == CallKind::Create => String::new(),
            _ => self.hex_str(o, "to", path, Some(20))?,
        };
        let input = match o.get("input") {
            None | Some(Value::Null) => "0x".to_string(),
            _ => self.hex_str(o, "input", path, None)?,
        };
        let output = match o.get("output") {
            None | Some(Value::Null) => "0x".to_string(),
            _ => self.hex_str(o, "output", path, None)?,
        };
        let gas = match o.get("gas") {
            None | Some(Value::Null) => 0,
            Some(v) => {
                let n = parse_uint(v).map_err(|m| self.err(path, "gas", m))?;
                u64::try_from(n).map_err(|_| self.err(path, "gas", "value exceeds u64".into()))?
            }
        };
        let value = match o.get("value") {
            None | Some(Value::Null) => 0,
            Some(v) => parse_uint(v).map_err(|m| self.err(path, "value", m))?,
        };
        let mut children = Vec::new();
        for (i, c) in self.array(o, "children", path)?.iter().enumerate() {
            children.push(self.frame(c, &format!("{path}.children[{i}]"))?);
        }
        Ok(RawCallFrame {
            kind,
            from,
            to,
            input,
            output,
            gas,
            value,
            children,
        })
    }
}

/// Accepts a JSON number, a decimal string or a 0x-prefixed hex string.
pub fn parse_uint(v: &Value) -> std::result::Result<u128, String> {
    match v {
        Value::Number(n) => n
            .as_u64()
            .map(u128::from)
            .ok_or_else(|| format!("expected non-negative integer, got {n}")),
        Value::String(s) => {
            if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
                if hex.is_empty() {
                    return Ok(0);
                }
                u128::from_str_radix(hex, 16).map_err(|e| format!("bad hex integer {s:?}: {e}"))
            } else {
                s.parse::<u128>()
                    .map_err(|e| format!("bad decimal integer {s:?}: {e}"))
            }
        }
        other => Err(format!("expected integer, got {other}")),
    }
}

pub fn normalize_hex(s: &str, bytes: Option<usize>) -> std::result::Result<String, String> {
    let body = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .ok_or_else(|| format!("expected 0x-prefixed hex, got {s:?}"))?;
    if !body.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(format!("non-hex characters in {s:?}"));
    }
    if body.len() % 2 != 0 {
        return Err(format!("odd number of hex digits in {s:?}"));
    }
    if let Some(n) = bytes {
        if body.len() != 2 * n {
            return Err(format!("expected {n} bytes ({} hex chars), got {}", 2 * n, body.len()));
        }
    }
    Ok(format!("0x{}", body.to_ascii_lowercase()))
}

/// Reads a JSONL trace corpus. Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_trace_file(path: impl AsRef<Path>) -> Result<Vec<RawTrace>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_trace_reader(BufReader::new(file), path)
}

pub fn parse_trace_reader(reader: impl BufRead, path: &Path) -> Result<Vec<RawTrace>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: line_no,
            field: String::new(),
            message: format!("invalid JSON: {e}"),
        })?;
        out.push(RawTrace::from_json(&value, line_no)?);
    }
    Ok(out)
}

pub fn write_trace_file(path: impl AsRef<Path>, traces: &[RawTrace]) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for t in traces {
        writeln!(file, "{}", t.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(n: u8) -> String {
        format!("0x{}", format!("{n:02x}").repeat(20))
    }

    fn word(n: u8) -> String {
        format!("0x{}", format!("{n:02x}").repeat(32))
    }

    fn sample() -> RawTrace {
        let mut root = RawCallFrame::new(CallKind::Call, &addr(1), &addr(2));
        root.input = "0xa9059cbb".into();
        root.gas = 21000;
        root.value = 10u128.pow(25);
        root.children
            .push(RawCallFrame::new(CallKind::DelegateCall, &addr(2), &addr(3)));
        RawTrace {
            tx_hash: word(0xab),
            block_number: 15_000_000,
            root,
            state: vec![RawStateAccess {
                kind: AccessKind::Read,
                key: word(1),
                val: word(2),
                owner_frame: 1,
                position: None,
            }],
            logs: vec![RawLogEvent {
                contract: addr(3),
                event_hash: word(9),
                data: "0x".into(),
                owner_frame: 1,
                position: Some(0),
            }],
            label: Some(Label::Adversarial),
            tags: vec!["flash_loan".into()],
        }
    }

    #[test]
    fn json_round_trip() {
        let t = sample();
        let v: Value = serde_json::from_str(&t.to_json_line()).unwrap();
        assert_eq!(RawTrace::from_json(&v, 1).unwrap(), t);
    }

    #[test]
    fn missing_tx_hash_names_line_and_field() {
        let mut v = sample().to_json();
        v.as_object_mut().unwrap().remove("tx_hash");
        match RawTrace::from_json(&v, 2) {
            Err(Error::Schema { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "tx_hash");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_nested_address_reports_path() {
        let mut v = sample().to_json();
        v["root"]["children"][0]["from"] = json!("0x1234");
        let err = RawTrace::from_json(&v, 5).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 5"), "{msg}");
        assert!(msg.contains("root.children[0].from"), "{msg}");
    }

    #[test]
    fn dangling_frame_rejected() {
        let mut v = sample().to_json();
        v["state"][0]["frame"] = json!(7);
        let err = RawTrace::from_json(&v, 1).unwrap_err();
        assert!(err.to_string().contains("state[0].frame"));
    }

    #[test]
    fn create_frame_has_empty_to() {
        let mut v = sample().to_json();
        v["root"]["children"][0]["kind"] = json!("CREATE");
        v["root"]["children"][0]["to"] = Value::Null;
        let t = RawTrace::from_json(&v, 1).unwrap();
        assert_eq!(t.root.children[0].kind, CallKind::Create);
        assert!(t.root.children[0].to.is_empty());
    }

    #[test]
    fn hex_is_lowercased_and_integers_accept_hex() {
        let mut v = sample().to_json();
        v["root"]["from"] = json!(format!("0x{}", "AB".repeat(20)));
        v["root"]["gas"] = json!("0x5208");
        let t = RawTrace::from_json(&v, 1).unwrap();
        assert_eq!(t.root.from, format!("0x{}", "ab".repeat(20)));
        assert_eq!(t.root.gas, 21000);
    }

    #[test]
    fn preorder_indices() {
        let mut root = RawCallFrame::new(CallKind::Call, &addr(1), &addr(2));
        let mut a = RawCallFrame::new(CallKind::Call, &addr(2), &addr(3));
        a.children.push(RawCallFrame::new(CallKind::Call, &addr(3), &addr(4)));
        root.children.push(a);
        root.children.push(RawCallFrame::new(CallKind::Call, &addr(2), &addr(5)));
        let order: Vec<_> = root.preorder().iter().map(|f| f.to.clone()).collect();
        assert_eq!(order, vec![addr(2), addr(3), addr(4), addr(5)]);
    }
}
