//! Turns ITR nodes into token runs, builds the frequency-capped vocabulary and
//! encodes token runs into id sequences.
//!
//! Node grammar:
//!
//! ```text
//! CALL  : [START] [CALL] from to selector gas value [INs] (type value)* [OUTs] (type value)* [END]
//! STATE : [START] [STATE] read|write key val [END]
//! LOG   : [START] [LOG] contract event-hash (type value)* [END]
//! ```
//!
//! Integer values keep two significant decimal digits (`1254 -> 1300`).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use num_bigint::BigUint;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::embed::ContextRole;
use crate::error::{Error, Result};
use crate::itr::{self, NodeKind, NodePayload, TreePath};
use crate::trace_ingest::{CallKind, RawTrace};

pub const START: &str = "[START]";
pub const END: &str = "[END]";
pub const CALL: &str = "[CALL]";
pub const STATE: &str = "[STATE]";
pub const LOG: &str = "[LOG]";
pub const INS: &str = "[INs]";
pub const OUTS: &str = "[OUTs]";
pub const OOV: &str = "[OOV]";

/// Special tokens in id order.
pub const SPECIALS: [&str; 8] = [START, END, CALL, STATE, LOG, INS, OUTS, OOV];

pub const DEFAULT_VOCAB_CAP: usize = 100_000;
pub const DEFAULT_MAX_LEN: usize = 512;

pub fn is_special(token: &str) -> bool {
    SPECIALS.contains(&token)
}

/// Rounds half-up to two significant decimal digits.
pub fn round_numeric(n: &BigUint) -> BigUint {
    let digits = n.to_str_radix(10).len();
    if digits <= 2 {
        return n.clone();
    }
    let scale = BigUint::from(10u32).pow((digits - 2) as u32);
    let half = &scale / 2u32;
    ((n + half) / &scale) * scale
}

pub fn round_u128(n: u128) -> BigUint {
    round_numeric(&BigUint::from(n))
}

/// Static ABI types understood by the decoder. Anything dynamic falls back
/// to raw words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    #[serde(alias = "uint256", alias = "uint128", alias = "uint64", alias = "uint32", alias = "uint8")]
    Uint,
    Address,
    Bool,
    Bytes32,
}

impl ParamType {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamType::Uint => "uint",
            ParamType::Address => "address",
            ParamType::Bool => "bool",
            ParamType::Bytes32 => "bytes32",
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FunctionAbi {
    #[serde(default)]
    pub inputs: Vec<ParamType>,
    #[serde(default)]
    pub outputs: Vec<ParamType>,
}

/// Optional selector/event-hash keyed type information.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AbiRegistry {
    /// `0x`-prefixed 4-byte selector -> parameter types
    #[serde(default)]
    pub functions: HashMap<String, FunctionAbi>,
    /// `0x`-prefixed event hash -> data types
    #[serde(default)]
    pub events: HashMap<String, Vec<ParamType>>,
}

impl AbiRegistry {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reg: AbiRegistry =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("abi file: {e}")))?;
        reg.functions = reg
            .functions
            .into_iter()
            .map(|(k, v)| (k.to_ascii_lowercase(), v))
            .collect();
        reg.events = reg
            .events
            .into_iter()
            .map(|(k, v)| (k.to_ascii_lowercase(), v))
            .collect();
        Ok(reg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedNode {
    pub kind: NodeKind,
    pub tokens: Vec<String>,
    pub roles: Vec<ContextRole>,
    /// Position of the node in the binarized tree.
    pub path: TreePath,
}

impl TokenizedNode {
    fn new(kind: NodeKind, path: TreePath) -> Self {
        TokenizedNode {
            kind,
            tokens: Vec::new(),
            roles: Vec::new(),
            path,
        }
    }

    fn push(&mut self, token: impl Into<String>, role: ContextRole) {
        self.tokens.push(token.into());
        self.roles.push(role);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks the node against the grammar in the module docs.
    pub fn check_grammar(&self) -> bool {
        let t = &self.tokens;
        if t.len() < 3 || t[0] != START || t[t.len() - 1] != END || t.len() != self.roles.len() {
            return false;
        }
        let body = &t[2..t.len() - 1];
        let no_specials = |s: &[String]| s.iter().all(|x| !is_special(x));
        match self.kind {
            NodeKind::Call => {
                if t[1] != CALL || body.len() < 7 || !no_specials(&body[..5]) || body[5] != INS {
                    return false;
                }
                let rest = &body[6..];
                let Some(outs) = rest.iter().position(|x| x == OUTS) else {
                    return false;
                };
                let (ins, outs) = (&rest[..outs], &rest[outs + 1..]);
                ins.len() % 2 == 0 && outs.len() % 2 == 0 && no_specials(ins) && no_specials(outs)
            }
            NodeKind::State => {
                t[1] == STATE && body.len() == 3 && (body[0] == "read" || body[0] == "write") && no_specials(body)
            }
            NodeKind::Log => t[1] == LOG && body.len() >= 2 && body.len() % 2 == 0 && no_specials(body),
        }
    }
}

fn hex_bytes(s: &str) -> Vec<u8> {
    let body = s.strip_prefix("0x").unwrap_or(s);
    (0..body.len() / 2)
        .filter_map(|i| u8::from_str_radix(&body[2 * i..2 * i + 2], 16).ok())
        .collect()
}

fn to_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(2 + 2 * bytes.len());
    s.push_str("0x");
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// (type token, value token) for one 32-byte word.
fn word_tokens(word: &[u8], ty: Option<ParamType>) -> (String, String) {
    let n = BigUint::from_bytes_be(word);
    let ty = ty.unwrap_or_else(|| {
        // Untyped words: small integers are amounts, 160-bit values are
        // addresses, anything wider is opaque.
        if n.bits() <= 128 {
            ParamType::Uint
        } else if n.bits() <= 160 {
            ParamType::Address
        } else {
            ParamType::Bytes32
        }
    });
    let value = match ty {
        ParamType::Uint => round_numeric(&n).to_string(),
        ParamType::Address => to_hex(&word[word.len().saturating_sub(20)..]),
        ParamType::Bool => (!n.is_zero()).to_string(),
        ParamType::Bytes32 => to_hex(word),
    };
    (ty.as_str().to_string(), value)
}

/// Splits ABI-encoded data into 32-byte words and tokenizes them. A trailing
/// partial word becomes one `bytes` token.
fn push_params(
    node: &mut TokenizedNode,
    data: &[u8],
    types: Option<&[ParamType]>,
    type_role: ContextRole,
    value_role: ContextRole,
) {
    let mut chunks = data.chunks(32);
    let mut i = 0;
    for chunk in chunks.by_ref() {
        if chunk.len() < 32 {
            node.push("bytes", type_role);
            node.push(to_hex(chunk), value_role);
            break;
        }
        // Declared types apply to the head words; words past the declared
        // list (dynamic tails) are tokenized untyped.
        let ty = types.and_then(|t| t.get(i).copied());
        let (t, v) = word_tokens(chunk, ty);
        node.push(t, type_role);
        node.push(v, value_role);
        i += 1;
    }
}

/// Tokenizes one ITR node. Undecodable bytes never fail: they fall back to raw words.
pub fn tokenize_node(payload: &NodePayload, path: TreePath, abi: Option<&AbiRegistry>) -> TokenizedNode {
    use ContextRole::*;
    match payload {
        NodePayload::Call(c) => {
            let mut n = TokenizedNode::new(NodeKind::Call, path);
            n.push(START, Structural);
            n.push(CALL, Structural);
            n.push(c.from.clone(), SrcAddr);
            n.push(if c.to.is_empty() { "0x".to_string() } else { c.to.clone() }, DstAddr);
            let input = hex_bytes(&c.input);
            // Contract creation carries init code, not ABI-encoded arguments.
            let creating = c.kind == CallKind::Create;
            let (selector, args) = if !creating && input.len() >= 4 {
                (to_hex(&input[..4]), &input[4..])
            } else {
                ("0x".to_string(), &[][..])
            };
            let fabi = abi.and_then(|a| a.functions.get(&selector));
            n.push(selector, FuncSig);
            n.push(round_numeric(&BigUint::from(c.gas)).to_string(), Gas);
            n.push(round_u128(c.value).to_string(), Value);
            n.push(INS, Structural);
            push_params(&mut n, args, fabi.map(|f| f.inputs.as_slice()), ParamInType, ParamInValue);
            n.push(OUTS, Structural);
            if !creating {
                let output = hex_bytes(&c.output);
                push_params(&mut n, &output, fabi.map(|f| f.outputs.as_slice()), ParamOutType, ParamOutValue);
            }
            n.push(END, Structural);
            n
        }
        NodePayload::State(s) => {
            let mut n = TokenizedNode::new(NodeKind::State, path);
            n.push(START, Structural);
            n.push(STATE, Structural);
            n.push(s.kind.as_str(), StateKind);
            n.push(s.key.clone(), StateKey);
            n.push(s.val.clone(), StateVal);
            n.push(END, Structural);
            n
        }
        NodePayload::Log(l) => {
            let mut n = TokenizedNode::new(NodeKind::Log, path);
            n.push(START, Structural);
            n.push(LOG, Structural);
            n.push(l.contract.clone(), LogContract);
            n.push(l.event_hash.clone(), LogEvent);
            let types = abi.and_then(|a| a.events.get(&l.event_hash)).map(Vec::as_slice);
            push_params(&mut n, &hex_bytes(&l.data), types, LogValue, LogValue);
            n.push(END, Structural);
            n
        }
    }
}

#[derive(Debug, Clone)]
pub struct TokenizeOptions {
    pub max_depth: usize,
    pub max_len: usize,
}

impl Default for TokenizeOptions {
    fn default() -> Self {
        TokenizeOptions {
            max_depth: itr::DEFAULT_MAX_DEPTH,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// ITR construction, binarization, level-order readout and tokenization of a
/// trace, stopping once `max_len` tokens are covered.
pub fn tokenize_trace(
    trace: &RawTrace,
    abi: Option<&AbiRegistry>,
    opts: &TokenizeOptions,
) -> Result<Vec<TokenizedNode>> {
    let tree = itr::build_itr(trace)?;
    let bin = itr::binarize(&tree);
    let lin = itr::bfs_linearize_budget(&bin, opts.max_depth, opts.max_len, |p| {
        tokenize_node(p, TreePath::root(), abi).len()
    })?;
    Ok(lin
        .into_iter()
        .map(|n| tokenize_node(n.payload, n.path, abi))
        .collect())
}

/// Token count of the whole, untruncated trace.
pub fn trace_token_count(trace: &RawTrace, abi: Option<&AbiRegistry>) -> Result<usize> {
    let tree = itr::build_itr(trace)?;
    fn walk(n: &itr::ItrNode, abi: Option<&AbiRegistry>) -> usize {
        tokenize_node(&n.payload, TreePath::root(), abi).len()
            + n.children.iter().map(|c| walk(c, abi)).sum::<usize>()
    }
    Ok(walk(&tree.root, abi))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    freqs: Vec<u64>,
    cap: usize,
}

/// Frequency counter preserving first-occurrence order for tie-breaking.
#[derive(Debug, Default, Clone)]
pub struct VocabCounter {
    index: HashMap<String, usize>,
    entries: Vec<(String, u64)>,
}

impl VocabCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, token: &str) {
        match self.index.get(token) {
            Some(&i) => self.entries[i].1 += 1,
            None => {
                self.index.insert(token.to_string(), self.entries.len());
                self.entries.push((token.to_string(), 1));
            }
        }
    }

    pub fn add_all<'a>(&mut self, tokens: impl IntoIterator<Item = &'a str>) {
        for t in tokens {
            self.add(t);
        }
    }

    /// Keeps the `cap` most frequent non-special tokens.
    pub fn build(&self, cap: usize) -> Result<Vocabulary> {
        if cap == 0 {
            return Err(Error::InvalidArgument("vocabulary cap must be at least 1".into()));
        }
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut freqs: Vec<u64> = SPECIALS
            .iter()
            .map(|s| self.index.get(*s).map_or(0, |&i| self.entries[i].1))
            .collect();
        let mut ranked: Vec<(usize, &(String, u64))> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, (t, _))| !is_special(t))
            .collect();
        // stable sort keeps first-occurrence order among equal counts
        ranked.sort_by(|a, b| b.1 .1.cmp(&a.1 .1));
        for (_, (t, c)) in ranked.into_iter().take(cap) {
            id_to_token.push(t.clone());
            freqs.push(*c);
        }
        Ok(Vocabulary::from_parts(id_to_token, freqs, cap))
    }
}

impl Vocabulary {
    fn from_parts(id_to_token: Vec<String>, freqs: Vec<u64>, cap: usize) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
            freqs,
            cap,
        }
    }

    /// Builds from a flat token stream.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, cap: usize) -> Result<Self> {
        let mut c = VocabCounter::new();
        c.add_all(corpus);
        c.build(cap)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn oov_id(&self) -> u32 {
        7
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(self.oov_id())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn frequency(&self, id: u32) -> Option<u64> {
        self.freqs.get(id as usize).copied()
    }

    pub fn tokens(&self) -> impl Iterator<Item = (u32, &str, u64)> {
        self.id_to_token
            .iter()
            .zip(&self.freqs)
            .enumerate()
            .map(|(i, (t, f))| (i as u32, t.as_str(), *f))
    }

    /// TSV: `token<TAB>id<TAB>frequency`, specials first.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for (id, tok, freq) in self.tokens() {
            if tok.contains(['\t', '\n', '\r']) {
                return Err(Error::Format(format!("token {tok:?} contains a tab or newline")));
            }
            writeln!(w, "{tok}\t{id}\t{freq}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Format(format!("vocabulary line {}: {m}", i + 1));
            let mut parts = line.split('\t');
            let (Some(tok), Some(id), Some(freq), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("expected 3 tab-separated fields"));
            };
            let id: usize = id.parse().map_err(|_| bad("bad id"))?;
            if id != tokens.len() {
                return Err(bad("ids must be dense and ascending"));
            }
            if id < SPECIALS.len() && tok != SPECIALS[id] {
                return Err(bad("special tokens must come first in canonical order"));
            }
            tokens.push(tok.to_string());
            freqs.push(freq.parse().map_err(|_| bad("bad frequency"))?);
        }
        if tokens.len() < SPECIALS.len() {
            return Err(Error::Format("vocabulary is missing special tokens".into()));
        }
        let cap = tokens.len() - SPECIALS.len();
        Ok(Vocabulary::from_parts(tokens, freqs, cap.max(1)))
    }
}

/// Token ids with their per-token tree paths and context roles.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EncodedTrace {
    pub ids: Vec<u32>,
    pub paths: Vec<TreePath>,
    pub roles: Vec<ContextRole>,
}

impl EncodedTrace {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.ids.truncate(n);
        self.paths.truncate(n);
        self.roles.truncate(n);
    }
}

pub fn encode(nodes: &[TokenizedNode], vocab: &Vocabulary, max_len: usize) -> EncodedTrace {
    let mut out = EncodedTrace::default();
    'outer: for node in nodes {
        for (tok, role) in node.tokens.iter().zip(&node.roles) {
            if out.ids.len() >= max_len {
                break 'outer;
            }
            out.ids.push(vocab.id(tok));
            out.paths.push(node.path.clone());
            out.roles.push(*role);
        }
    }
    out
}

/// Raw trace to model input in one call.
pub fn encode_trace(
    trace: &RawTrace,
    vocab: &Vocabulary,
    abi: Option<&AbiRegistry>,
    opts: &TokenizeOptions,
) -> Result<EncodedTrace> {
    let nodes = tokenize_trace(trace, abi, opts)?;
    Ok(encode(&nodes, vocab, opts.max_len))
}

/// Counts every token of every trace (untruncated) into a counter.
pub fn count_corpus(
    traces: &[RawTrace],
    abi: Option<&AbiRegistry>,
    opts: &TokenizeOptions,
) -> Result<VocabCounter> {
    let mut counter = VocabCounter::new();
    let full = TokenizeOptions {
        max_depth: opts.max_depth,
        max_len: usize::MAX,
    };
    for t in traces {
        for node in tokenize_trace(t, abi, &full)? {
            counter.add_all(node.tokens.iter().map(String::as_str));
        }
    }
    Ok(counter)
}
