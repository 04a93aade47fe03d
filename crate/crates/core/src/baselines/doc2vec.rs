//! Paragraph vectors (PV-DBOW and PV-DM) trained with negative sampling or
//! Huffman-coded hierarchical softmax.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PvMode {
    /// the document vector alone predicts each word
    Dbow,
    /// the document vector averaged with surrounding word vectors predicts the center word
    Dm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    Negative,
    Hierarchical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Doc2VecConfig {
    pub dim: usize,
    pub mode: PvMode,
    pub sampler: Sampler,
    /// negatives per positive word
    pub negatives: usize,
    /// PV-DM context half-width
    pub window: usize,
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// frequency threshold in the candidate weight `1 - sqrt(t / f(w))`
    pub t: f64,
    pub seed: u64,
}

impl Default for Doc2VecConfig {
    fn default() -> Self {
        Doc2VecConfig {
            dim: 64,
            mode: PvMode::Dbow,
            sampler: Sampler::Negative,
            negatives: 5,
            window: 4,
            epochs: 20,
            lr: 0.025,
            min_lr: 1e-4,
            t: 1e-5,
            seed: 0,
        }
    }
}

/// Negative-candidate weights `max(0, 1 - sqrt(t / f(w)))`, normalized to sum
/// to one. Falls back to uniform when every weight clamps to zero.
pub fn negative_weights(counts: &[u64], t: f64) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| {
            let f = c as f64 / total.max(1) as f64;
            if f == 0.0 {
                0.0
            } else {
                (1.0 - (t / f).sqrt()).max(0.0)
            }
        })
        .collect();
    let s: f64 = raw.iter().sum();
    if s > 0.0 {
        raw.iter().map(|w| w / s).collect()
    } else {
        vec![1.0 / counts.len() as f64; counts.len()]
    }
}

/// Huffman code tree over the vocabulary. Inner node `i` owns row `i` of the
/// node-vector matrix; there are `V - 1` inner nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTree {
    /// per word: branch bits from the root (`true` = right)
    pub codes: Vec<Vec<bool>>,
    /// per word: inner-node indices along the path from the root
    pub points: Vec<Vec<usize>>,
}

impl HuffmanTree {
    pub fn build(counts: &[u64]) -> Result<Self> {
        let v = counts.len();
        if v < 2 {
            return Err(Error::InvalidArgument(
                "hierarchical softmax needs at least two distinct words".into(),
            ));
        }
        // nodes 0..v are leaves, v.. are inner nodes
        let mut parent = vec![0usize; 2 * v - 1];
        let mut bit = vec![false; 2 * v - 1];
        let mut heap: BinaryHeap<Reverse<(u64, usize)>> =
            counts.iter().enumerate().map(|(i, &c)| Reverse((c, i))).collect();
        let mut next = v;
        while heap.len() > 1 {
            let Reverse((c1, a)) = heap.pop().expect("two nodes");
            let Reverse((c2, b)) = heap.pop().expect("two nodes");
            parent[a] = next;
            parent[b] = next;
            bit[b] = true;
            heap.push(Reverse((c1 + c2, next)));
            next += 1;
        }
        let root = next - 1;
        let mut codes = Vec::with_capacity(v);
        let mut points = Vec::with_capacity(v);
        for w in 0..v {
            let (mut code, mut path) = (Vec::new(), Vec::new());
            let mut n = w;
            while n != root {
                code.push(bit[n]);
                n = parent[n];
                // inner node ids v.. map to rows root-first after reversal below
                path.push(root - n);
            }
            code.reverse();
            path.reverse();
            codes.push(code);
            points.push(path);
        }
        Ok(HuffmanTree { codes, points })
    }

    pub fn inner_nodes(&self) -> usize {
        self.codes.len() - 1
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `sum_j log sigma(s_j v_{n_j} . h)` along the word's code path, with
/// `s_j = +1` for a left branch and `-1` for a right branch.
pub fn hierarchical_softmax_logprob(
    tree: &HuffmanTree,
    word: usize,
    node_vectors: &Array2<f64>,
    context: ArrayView1<f64>,
) -> Result<f64> {
    let (Some(code), Some(points)) = (tree.codes.get(word), tree.points.get(word)) else {
        return Err(Error::InvalidArgument(format!("word {word} is not in the code tree")));
    };
    Ok(code
        .iter()
        .zip(points)
        .map(|(&right, &n)| {
            let s = node_vectors.row(n).dot(&context);
            log_sigmoid(if right { -s } else { s })
        })
        .sum())
}

#[derive(Debug, Clone)]
pub struct Doc2Vec {
    pub config: Doc2VecConfig,
    pub words: Vec<String>,
    pub index: HashMap<String, usize>,
    pub counts: Vec<u64>,
    /// documents x dim
    pub doc_vectors: Array2<f64>,
    /// words x dim input vectors (PV-DM context)
    pub word_vectors: Array2<f64>,
    /// output vectors: words x dim (negative sampling) or inner nodes x dim
    pub output: Array2<f64>,
    pub tree: Option<HuffmanTree>,
    neg: Option<WeightedIndex<f64>>,
}

fn init_rows(rows: usize, dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    let scale = 0.5 / dim as f64;
    Array2::from_shape_simple_fn((rows, dim), || rng.random_range(-scale..scale))
}

/// One gradient step of the output layer for context `h` predicting `word`.
/// Output vectors are updated in place; the context gradient is added to `dh`.
fn output_step(
    model: &mut Doc2Vec,
    h: ArrayView1<f64>,
    word: usize,
    lr: f64,
    frozen: bool,
    rng: &mut impl Rng,
    mut dh: ArrayViewMut1<f64>,
) {
    let update = |row: usize, label: f64, out: &mut Array2<f64>, dh: &mut ArrayViewMut1<f64>| {
        let mut o = out.row_mut(row);
        let g = (label - sigmoid(o.dot(&h))) * lr;
        dh.scaled_add(g, &o);
        if !frozen {
            o.scaled_add(g, &h);
        }
    };
    match model.config.sampler {
        Sampler::Negative => {
            update(word, 1.0, &mut model.output, &mut dh);
            let neg = model.neg.as_ref().expect("negative table built");
            for _ in 0..model.config.negatives {
                let w = neg.sample(rng);
                if w != word {
                    update(w, 0.0, &mut model.output, &mut dh);
                }
            }
        }
        Sampler::Hierarchical => {
            let tree = model.tree.as_ref().expect("tree built");
            let path: Vec<(bool, usize)> = tree.codes[word]
                .iter()
                .copied()
                .zip(tree.points[word].iter().copied())
                .collect();
            for (right, n) in path {
                update(n, if right { 0.0 } else { 1.0 }, &mut model.output, &mut dh);
            }
        }
    }
}

impl Doc2Vec {
    fn doc_ids(&self, doc: &[String]) -> Vec<usize> {
        doc.iter().filter_map(|w| self.index.get(w).copied()).collect()
    }

    /// Trains (or infers, when `frozen`) the vector of one document.
    fn train_doc(&mut self, d: &mut Array1<f64>, ids: &[usize], lr: f64, frozen: bool, rng: &mut impl Rng) {
        let dim = self.config.dim;
        match self.config.mode {
            PvMode::Dbow => {
                for &w in ids {
                    let mut dh = Array1::zeros(dim);
                    let h = d.clone();
                    output_step(self, h.view(), w, lr, frozen, rng, dh.view_mut());
                    *d += &dh;
                }
            }
            PvMode::Dm => {
                let win = self.config.window;
                for (i, &w) in ids.iter().enumerate() {
                    let lo = i.saturating_sub(win);
                    let hi = (i + win + 1).min(ids.len());
                    let ctx: Vec<usize> = (lo..hi).filter(|&j| j != i).map(|j| ids[j]).collect();
                    let n = (ctx.len() + 1) as f64;
                    let mut h = d.clone();
                    for &c in &ctx {
                        h += &self.word_vectors.row(c);
                    }
                    h /= n;
                    let mut dh = Array1::zeros(dim);
                    output_step(self, h.view(), w, lr, frozen, rng, dh.view_mut());
                    if !frozen {
                        for &c in &ctx {
                            self.word_vectors.row_mut(c).scaled_add(1.0 / n, &dh);
                        }
                    }
                    d.scaled_add(1.0 / n, &dh);
                }
            }
        }
    }

    /// Embeds an unseen document with all word-side weights frozen.
    pub fn infer(&mut self, doc: &[String], seed: u64) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = init_rows(1, self.config.dim, &mut rng).row(0).to_owned();
        let ids = self.doc_ids(doc);
        let epochs = self.config.epochs.max(1);
        for e in 0..epochs {
            let lr = self.config.lr - (self.config.lr - self.config.min_lr) * e as f64 / epochs as f64;
            self.train_doc(&mut d, &ids, lr, true, &mut rng);
        }
        d
    }

    /// Average log-probability of the document's words given its vector
    /// (hierarchical softmax only; used by diagnostics and tests).
    pub fn document_logprob(&self, doc: usize, words: &[String]) -> Result<f64> {
        let tree = self
            .tree
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model was not trained with hierarchical softmax".into()))?;
        let h = self.doc_vectors.row(doc);
        let ids = self.doc_ids(words);
        let mut s = 0.0;
        for &w in &ids {
            s += hierarchical_softmax_logprob(tree, w, &self.output, h)?;
        }
        Ok(s / ids.len().max(1) as f64)
    }
}

/// Learns one vector per document.
pub fn train_doc2vec(corpus: &[Vec<String>], cfg: &Doc2VecConfig) -> Result<Doc2Vec> {
    if corpus.is_empty() || corpus.iter().all(Vec::is_empty) {
        return Err(Error::InvalidArgument("doc2vec corpus is empty".into()));
    }
    if cfg.dim < 2 {
        return Err(Error::InvalidArgument("doc2vec dimension must be at least 2".into()));
    }
    let mut index = HashMap::new();
    let mut words = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    for doc in corpus {
        for w in doc {
            let id = *index.entry(w.clone()).or_insert_with(|| {
                words.push(w.clone());
                counts.push(0);
                words.len() - 1
            });
            counts[id] += 1;
        }
    }
    if words.len() < 2 {
        return Err(Error::InvalidArgument("degenerate corpus: fewer than two distinct words".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (tree, neg, out_rows) = match cfg.sampler {
        Sampler::Negative => {
            let w = negative_weights(&counts, cfg.t);
            let table = WeightedIndex::new(&w).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            (None, Some(table), words.len())
        }
        Sampler::Hierarchical => {
            let t = HuffmanTree::build(&counts)?;
            let n = t.inner_nodes();
            (Some(t), None, n)
        }
    };
    let mut model = Doc2Vec {
        config: cfg.clone(),
        doc_vectors: init_rows(corpus.len(), cfg.dim, &mut rng),
        word_vectors: init_rows(words.len(), cfg.dim, &mut rng),
        output: Array2::zeros((out_rows, cfg.dim)),
        words,
        index,
        counts,
        tree,
        neg,
    };
    let ids: Vec<Vec<usize>> = corpus.iter().map(|d| model.doc_ids(d)).collect();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let epochs = cfg.epochs.max(1);
    for e in 0..epochs {
        let lr = cfg.lr - (cfg.lr - cfg.min_lr) * e as f64 / epochs as f64;
        order.shuffle(&mut rng);
        for &di in &order {
            let mut d = model.doc_vectors.row(di).to_owned();
            model.train_doc(&mut d, &ids[di], lr, false, &mut rng);
            model.doc_vectors.row_mut(di).assign(&d);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_weight_formula() {
        // f = t gives weight 0; f = 4t gives 0.5 (before normalization)
        let raw = |f: f64, t: f64| (1.0 - (t / f).sqrt()).max(0.0);
        assert_eq!(raw(1e-5, 1e-5), 0.0);
        assert!((raw(4e-5, 1e-5) - 0.5).abs() < 1e-15);
        // counts 1 and 3 of 4: f = 0.25, 0.75 with t = 0.25 -> raw 0 and 1 - sqrt(1/3)
        let w = negative_weights(&[1, 3], 0.25);
        assert_eq!(w, vec![0.0, 1.0]);
        let w = negative_weights(&[1, 1], 0.9);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn huffman_probabilities_sum_to_one() {
        let counts = [5, 9, 12, 13, 16, 45, 1, 2];
        let tree = HuffmanTree::build(&counts).unwrap();
        assert_eq!(tree.inner_nodes(), 7);
        // frequent words get shorter codes
        assert!(tree.codes[5].len() <= tree.codes[6].len());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nodes = init_rows(7, 4, &mut rng) * 40.0;
        let h = Array1::from(vec![0.3, -1.0, 0.5, 2.0]);
        let total: f64 = (0..8)
            .map(|w| hierarchical_softmax_logprob(&tree, w, &nodes, h.view()).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
        // codes are prefix-free and paths start at the root
        for w in 0..8 {
            assert_eq!(tree.points[w][0], 0);
            for u in 0..8 {
                if u != w {
                    assert!(!tree.codes[u].starts_with(&tree.codes[w]));
                }
            }
        }
    }

    #[test]
    fn hierarchical_softmax_simple_cases() {
        let tree = HuffmanTree::build(&[3, 1, 1, 1]).unwrap();
        let zeros = Array2::zeros((3, 2));
        let h = Array1::from(vec![1.0, 2.0]);
        for w in 0..4 {
            let lp = hierarchical_softmax_logprob(&tree, w, &zeros, h.view()).unwrap();
            assert!((lp - tree.codes[w].len() as f64 * 0.5f64.ln()).abs() < 1e-15);
        }
        let two = HuffmanTree::build(&[1, 1]).unwrap();
        let node = Array2::from_shape_vec((1, 2), vec![0.5, 0.0]).unwrap();
        let lp = hierarchical_softmax_logprob(&two, 0, &node, h.view()).unwrap();
        let want = if two.codes[0][0] { log_sigmoid(-0.5) } else { log_sigmoid(0.5) };
        assert!((lp - want).abs() < 1e-15);
        assert!(hierarchical_softmax_logprob(&two, 2, &node, h.view()).is_err());
        assert!(HuffmanTree::build(&[4]).is_err());
    }

    fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
    }

    fn clusters(seed: u64) -> Vec<Vec<String>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20)
            .map(|i| {
                let prefix = if i % 2 == 0 { "a" } else { "b" };
                (0..12).map(|_| format!("{prefix}{}", rng.random_range(0..6))).collect()
            })
            .collect()
    }

    fn separation(model: &Doc2Vec) -> (f64, f64) {
        let (mut within, mut across, mut nw, mut na) = (0.0, 0.0, 0, 0);
        for i in 0..20 {
            for j in i + 1..20 {
                let c = cosine(model.doc_vectors.row(i), model.doc_vectors.row(j));
                if i % 2 == j % 2 {
                    within += c;
                    nw += 1;
                } else {
                    across += c;
                    na += 1;
                }
            }
        }
        (within / nw as f64, across / na as f64)
    }

    #[test]
    fn disjoint_vocabularies_separate() {
        for (mode, sampler) in [
            (PvMode::Dbow, Sampler::Negative),
            (PvMode::Dbow, Sampler::Hierarchical),
            (PvMode::Dm, Sampler::Negative),
            (PvMode::Dm, Sampler::Hierarchical),
        ] {
            for seed in 0..5 {
                let cfg = Doc2VecConfig {
                    dim: 16,
                    mode,
                    sampler,
                    epochs: 40,
                    seed,
                    ..Doc2VecConfig::default()
                };
                let m = train_doc2vec(&clusters(seed), &cfg).unwrap();
                let (w, a) = separation(&m);
                assert!(w > a, "{mode:?}/{sampler:?} seed {seed}: within {w} across {a}");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = Doc2VecConfig {
            dim: 8,
            epochs: 3,
            ..Doc2VecConfig::default()
        };
        let a = train_doc2vec(&clusters(1), &cfg).unwrap();
        let b = train_doc2vec(&clusters(1), &cfg).unwrap();
        assert_eq!(a.doc_vectors, b.doc_vectors);
    }

    #[test]
    fn degenerate_corpora_are_rejected() {
        let cfg = Doc2VecConfig::default();
        assert!(train_doc2vec(&[], &cfg).is_err());
        assert!(train_doc2vec(&[vec!["x".into(), "x".into()]], &cfg).is_err());
        let small = Doc2VecConfig { dim: 1, ..cfg };
        assert!(train_doc2vec(&[vec!["x".into(), "y".into()]], &small).is_err());
    }

    #[test]
    fn inference_keeps_word_weights() {
        let cfg = Doc2VecConfig {
            dim: 8,
            epochs: 5,
            sampler: Sampler::Hierarchical,
            ..Doc2VecConfig::default()
        };
        let corpus = clusters(2);
        let mut m = train_doc2vec(&corpus, &cfg).unwrap();
        let before = m.output.clone();
        let v = m.infer(&corpus[0], 7);
        assert_eq!(m.output, before);
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(m.document_logprob(0, &corpus[0]).unwrap() < 0.0);
    }
}
