//! Comparison detectors: paragraph-vector embeddings scored by a Gaussian
//! mixture, and a trace-length ranker.

pub mod doc2vec;
pub mod gmm;

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::ids::{rank, RankedReport, ScoredTx};
use crate::itr::{ItrTree, TreePath};
use crate::tokenizer::{tokenize_node, AbiRegistry};

pub use doc2vec::{train_doc2vec, Doc2Vec, Doc2VecConfig, PvMode, Sampler};
pub use gmm::{
    bic_param_count, fit_gmm, gmm_log_likelihood, select_components_bic, CovarianceKind, EmConfig,
    GaussianMixture,
};

/// Node token runs concatenated in breadth-first order of the original tree.
pub fn flatten_trace(tree: &ItrTree, abi: Option<&AbiRegistry>) -> Vec<String> {
    let mut out = Vec::new();
    let mut queue = VecDeque::from([&tree.root]);
    while let Some(n) = queue.pop_front() {
        out.extend(tokenize_node(&n.payload, TreePath::root(), abi).tokens);
        queue.extend(n.children.iter());
    }
    out
}

/// Longest traces first. `scores` carry the token count; their
/// log-likelihood field is overwritten with `-token_count` so the shared
/// ranking order applies.
pub fn trace_length_rank(contract: &str, mut scores: Vec<ScoredTx>) -> RankedReport {
    for s in &mut scores {
        s.log_likelihood = -(s.token_count as f64);
    }
    rank(contract, scores)
}

/// Ranks by mixture log-density of each embedding, lowest first. Row `i` of
/// `embeddings` belongs to `scores[i]`.
pub fn gmm_rank(
    contract: &str,
    mut scores: Vec<ScoredTx>,
    embeddings: &Array2<f64>,
    mixture: &GaussianMixture,
) -> Result<RankedReport> {
    if embeddings.nrows() != scores.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} transactions",
            embeddings.nrows(),
            scores.len()
        )));
    }
    for (s, row) in scores.iter_mut().zip(embeddings.rows()) {
        s.log_likelihood = gmm_log_likelihood(row, mixture)?;
    }
    Ok(rank(contract, scores))
}

const EMBEDDING_MAGIC: &[u8; 6] = b"EMBF64";

/// Binary layout: magic, u32 rows, u32 cols, then per row a u32-prefixed
/// UTF-8 id, then rows*cols f64 values, all little-endian.
pub fn write_embeddings(w: impl Write, ids: &[String], matrix: &Array2<f64>) -> Result<()> {
    if ids.len() != matrix.nrows() {
        return Err(Error::Shape("embedding ids and rows disagree".into()));
    }
    let mut w = BufWriter::new(w);
    let io = |e| Error::io("<embeddings>", e);
    w.write_all(EMBEDDING_MAGIC).map_err(io)?;
    w.write_all(&(matrix.nrows() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(matrix.ncols() as u32).to_le_bytes()).map_err(io)?;
    for id in ids {
        w.write_all(&(id.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(id.as_bytes()).map_err(io)?;
    }
    for x in matrix.iter() {
        w.write_all(&x.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_embeddings(r: impl Read) -> Result<(Vec<String>, Array2<f64>)> {
    let mut r = BufReader::new(r);
    let bad = |m: &str| Error::Format(format!("embedding file: {m}"));
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != EMBEDDING_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<_>| -> Result<usize> {
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated"))?;
        Ok(u32::from_le_bytes(u32buf) as usize)
    };
    let rows = read_u32(&mut r)?;
    let cols = read_u32(&mut r)?;
    let mut ids = Vec::with_capacity(rows);
    for _ in 0..rows {
        let len = read_u32(&mut r)?;
        let mut b = vec![0u8; len];
        r.read_exact(&mut b).map_err(|_| bad("truncated id"))?;
        ids.push(String::from_utf8(b).map_err(|_| bad("id is not UTF-8"))?);
    }
    let mut data = Vec::with_capacity(rows * cols);
    let mut f = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut f).map_err(|_| bad("truncated data"))?;
        data.push(f64::from_le_bytes(f));
    }
    if r.read(&mut f).map_err(|e| Error::io("<embeddings>", e))? != 0 {
        return Err(bad("trailing bytes"));
    }
    let m = Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(&e.to_string()))?;
    Ok((ids, m))
}

pub fn save_embeddings(path: impl AsRef<Path>, ids: &[String], matrix: &Array2<f64>) -> Result<()> {
    let p = path.as_ref();
    write_embeddings(File::create(p).map_err(|e| Error::io(p, e))?, ids, matrix)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<(Vec<String>, Array2<f64>)> {
    let p = path.as_ref();
    read_embeddings(File::open(p).map_err(|e| Error::io(p, e))?)
}

pub fn save_mixture(path: impl AsRef<Path>, mixture: &GaussianMixture) -> Result<()> {
    let p = path.as_ref();
    let f = File::create(p).map_err(|e| Error::io(p, e))?;
    serde_json::to_writer_pretty(BufWriter::new(f), mixture).map_err(|e| Error::Format(e.to_string()))
}

pub fn load_mixture(path: impl AsRef<Path>) -> Result<GaussianMixture> {
    let p = path.as_ref();
    let f = File::open(p).map_err(|e| Error::io(p, e))?;
    let m: GaussianMixture =
        serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Format(e.to_string()))?;
    m.validate()?;
    Ok(m)
}
