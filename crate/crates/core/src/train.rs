//! Causal-LM training: first-fit-decreasing packing, exact gradients, AdamW
//! and a central-difference gradient checker.

use std::path::Path;
use std::time::Instant;

use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward_pack, forward_pack, ModelConfig, ModelParams};
use crate::tokenizer::EncodedTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_steps: usize,
    /// packs per optimizer step
    pub batch_packs: usize,
    pub max_len: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    /// Stop once the loss has not improved by `plateau_delta` for this many steps.
    pub plateau_patience: Option<usize>,
    pub plateau_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            max_steps: 1000,
            batch_packs: 32,
            max_len: 512,
            lr: 6e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 100,
            clip_norm: 1.0,
            plateau_patience: None,
            plateau_delta: 1e-4,
        }
    }
}

/// Indices of the traces sharing one packed sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pack {
    pub members: Vec<usize>,
    pub segment_lengths: Vec<usize>,
}

impl Pack {
    pub fn len(&self) -> usize {
        self.segment_lengths.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// First-fit-decreasing packing of sequence lengths into bins of `max_len`.
/// Equal lengths keep their input order. Lengths above `max_len` get a pack
/// of their own.
pub fn pack_minibatch(lengths: &[usize], max_len: usize) -> Vec<Pack> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]));
    let mut packs: Vec<Pack> = Vec::new();
    let mut used: Vec<usize> = Vec::new();
    for i in order {
        let len = lengths[i];
        match used.iter().position(|&u| u + len <= max_len) {
            Some(p) => {
                used[p] += len;
                packs[p].members.push(i);
                packs[p].segment_lengths.push(len);
            }
            None => {
                used.push(len);
                packs.push(Pack {
                    members: vec![i],
                    segment_lengths: vec![len],
                });
            }
        }
    }
    packs
}

/// Mean per-token negative log-likelihood over `batch` and its exact gradient.
pub fn lm_loss_and_gradients(
    params: &ModelParams,
    corpus: &[EncodedTrace],
    batch: &[Pack],
) -> Result<(f64, ModelParams)> {
    let total: usize = batch.iter().map(Pack::len).sum();
    let mut grads = params.zeros_like();
    if total == 0 {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / total as f64;
    let mut nll = 0.0;
    for (pi, pack) in batch.iter().enumerate() {
        let segs: Vec<&EncodedTrace> = pack.members.iter().map(|&i| &corpus[i]).collect();
        let fwd = forward_pack(params, &segs)?;
        let pack_nll: f64 = -fwd.segment_log_likelihoods(&segs).iter().sum::<f64>();
        if !pack_nll.is_finite() {
            return Err(Error::NonFiniteLoss { pack: pi });
        }
        nll += pack_nll;
        backward_pack(params, &segs, &fwd, scale, &mut grads);
    }
    Ok((nll * scale, grads))
}

/// Mean per-token NLL without gradients.
pub fn lm_loss(params: &ModelParams, corpus: &[EncodedTrace], batch: &[Pack]) -> Result<f64> {
    let total: usize = batch.iter().map(Pack::len).sum();
    let mut nll = 0.0;
    for (pi, pack) in batch.iter().enumerate() {
        let segs: Vec<&EncodedTrace> = pack.members.iter().map(|&i| &corpus[i]).collect();
        let pack_nll: f64 = -forward_pack(params, &segs)?
            .segment_log_likelihoods(&segs)
            .iter()
            .sum::<f64>();
        if !pack_nll.is_finite() {
            return Err(Error::NonFiniteLoss { pack: pi });
        }
        nll += pack_nll;
    }
    Ok(if total == 0 { 0.0 } else { nll / total as f64 })
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }
}

fn same_shapes(a: &ModelParams, b: &ModelParams) -> bool {
    let (ta, tb) = (a.tensors(), b.tensors());
    ta.len() == tb.len() && ta.iter().zip(&tb).all(|((_, x), (_, y))| x.shape() == y.shape())
}

/// One AdamW update at learning rate `lr` with decoupled weight decay.
pub fn adamw_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if !same_shapes(params, grads) || !same_shapes(params, &state.m) || !same_shapes(params, &state.v) {
        return Err(Error::Shape("parameter, gradient and moment shapes differ".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps, wd) = (state.beta1, state.beta2, state.eps, state.weight_decay);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let g = grads.tensors();
    let m = state.m.tensors_mut();
    let v = state.v.tensors_mut();
    for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in params.tensors_mut().into_iter().zip(g).zip(m).zip(v) {
        Zip::from(&mut p)
            .and(&g)
            .and(&mut m)
            .and(&mut v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let step = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= lr * (step + wd * *p);
            });
    }
    Ok(())
}

/// Linear warmup to `cfg.lr` over `cfg.warmup_steps`, constant afterwards.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup_steps == 0 {
        cfg.lr
    } else {
        cfg.lr * ((step as f64) / cfg.warmup_steps as f64).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<StepLog>,
}

/// Trains from a fresh initialization. `on_step` sees every logged step and
/// the parameters after it, e.g. to write periodic checkpoints.
pub fn train(
    corpus: &[EncodedTrace],
    model: ModelConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    if corpus.is_empty() || corpus.iter().all(EncodedTrace::is_empty) {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    if cfg.batch_packs == 0 || cfg.max_len == 0 || cfg.lr <= 0.0 {
        return Err(Error::InvalidArgument("batch_packs, max_len and lr must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(model, &mut rng)?;
    let mut state = OptimizerState::new(&params, cfg);
    let usable: Vec<usize> = (0..corpus.len()).filter(|&i| !corpus[i].is_empty()).collect();

    let mut history = Vec::new();
    let mut queue: Vec<Pack> = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    for step in 1..=cfg.max_steps {
        let started = Instant::now();
        let mut batch = Vec::with_capacity(cfg.batch_packs);
        while batch.len() < cfg.batch_packs {
            if queue.is_empty() {
                queue = epoch_packs(corpus, &usable, cfg.max_len, &mut rng);
                // a batch never holds the same pack twice
                if !batch.is_empty() {
                    break;
                }
            }
            batch.push(queue.pop().expect("non-empty epoch"));
        }
        let (loss, mut grads) = lm_loss_and_gradients(&params, corpus, &batch)?;
        let norm = grads.global_norm();
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            grads.scale(cfg.clip_norm / norm);
        }
        adamw_step(&mut params, &grads, &mut state, learning_rate(cfg, step))?;
        let tokens: usize = batch.iter().map(Pack::len).sum();
        let log = StepLog {
            step,
            loss,
            tokens_per_sec: tokens as f64 / started.elapsed().as_secs_f64().max(1e-9),
        };
        on_step(&log, &params)?;
        history.push(log);

        if loss < best - cfg.plateau_delta {
            best = loss;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.plateau_patience.is_some_and(|p| since_best >= p) {
            log::info!("loss plateaued at step {step}");
            break;
        }
    }
    Ok(TrainOutcome { params, history })
}

/// One epoch of packs: traces shuffled, packed, pack order shuffled. Packs
/// are consumed from the back.
fn epoch_packs(corpus: &[EncodedTrace], usable: &[usize], max_len: usize, rng: &mut impl Rng) -> Vec<Pack> {
    let mut order = usable.to_vec();
    order.shuffle(rng);
    let lengths: Vec<usize> = order.iter().map(|&i| corpus[i].len().min(max_len)).collect();
    let mut packs = pack_minibatch(&lengths, max_len);
    for p in &mut packs {
        for m in &mut p.members {
            *m = order[*m];
        }
    }
    packs.shuffle(rng);
    packs
}

pub fn write_loss_csv(path: impl AsRef<Path>, history: &[StepLog]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for h in history {
        w.serialize(h).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `exp` of the mean per-token NLL over whole traces.
pub fn perplexity(params: &ModelParams, corpus: &[EncodedTrace]) -> Result<f64> {
    let mut nll = 0.0;
    let mut n = 0usize;
    for t in corpus.iter().filter(|t| !t.is_empty()) {
        nll -= crate::model::trace_log_likelihood(params, t)?;
        n += t.len();
    }
    if n == 0 {
        return Err(Error::InvalidArgument("perplexity of an empty corpus".into()));
    }
    Ok((nll / n as f64).exp())
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// central-difference half-width
    pub step: f64,
    /// entries with the largest analytic gradient checked per tensor
    pub top: usize,
    /// additional uniformly sampled entries per tensor
    pub random: usize,
    pub seed: u64,
    /// relative errors use `max(|a|, |n|, floor)` as denominator
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            top: 6,
            random: 6,
            seed: 0,
            floor: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_error >= self.tolerance)
            .map(|g| g.name.as_str())
            .collect()
    }
}

/// Compares analytic gradients of the batch loss against central differences.
pub fn finite_difference_check(
    params: &ModelParams,
    corpus: &[EncodedTrace],
    batch: &[Pack],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, analytic) = lm_loss_and_gradients(params, corpus, batch)?;
    compare_gradients(params, &analytic, corpus, batch, cfg)
}

/// Checks a supplied gradient (possibly corrupted) against central differences.
pub fn compare_gradients(
    params: &ModelParams,
    analytic: &ModelParams,
    corpus: &[EncodedTrace],
    batch: &[Pack],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !same_shapes(params, analytic) {
        return Err(Error::Shape("gradient shapes differ from parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = params.clone();
    let mut groups = Vec::new();
    for (ti, (name, g)) in analytic.tensors().into_iter().enumerate() {
        let flat: Vec<f64> = g.iter().copied().collect();
        let mut picks: Vec<usize> = (0..flat.len()).collect();
        picks.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b)));
        picks.truncate(cfg.top);
        for _ in 0..cfg.random.min(flat.len()) {
            picks.push(rng.random_range(0..flat.len()));
        }
        picks.sort_unstable();
        picks.dedup();

        let mut max_rel: f64 = 0.0;
        for &e in &picks {
            let orig = nth(&probe, ti, e);
            set_nth(&mut probe, ti, e, orig + cfg.step);
            let up = lm_loss(&probe, corpus, batch)?;
            set_nth(&mut probe, ti, e, orig - cfg.step);
            let down = lm_loss(&probe, corpus, batch)?;
            set_nth(&mut probe, ti, e, orig);
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = flat[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            max_rel = max_rel.max(rel);
        }
        groups.push(GroupCheck {
            name,
            checked: picks.len(),
            max_rel_error: max_rel,
        });
    }
    Ok(GradCheckReport {
        groups,
        tolerance: cfg.tolerance,
    })
}

fn nth(p: &ModelParams, tensor: usize, entry: usize) -> f64 {
    *p.tensors()[tensor].1.iter().nth(entry).expect("entry in range")
}

fn set_nth(p: &mut ModelParams, tensor: usize, entry: usize, value: f64) {
    *p.tensors_mut()[tensor].1.iter_mut().nth(entry).expect("entry in range") = value;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::ContextRole;
    use crate::itr::TreePath;

    fn enc(ids: &[u32]) -> EncodedTrace {
        EncodedTrace {
            ids: ids.to_vec(),
            paths: vec![TreePath::root(); ids.len()],
            roles: vec![ContextRole::Structural; ids.len()],
        }
    }

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            max_seq: 32,
            max_depth: 4,
        }
    }

    #[test]
    fn ffd_examples() {
        let p = pack_minibatch(&[200, 300], 512);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].len(), 500);
        assert_eq!(pack_minibatch(&[512], 512).len(), 1);
        let p = pack_minibatch(&[400, 300, 200, 100], 512);
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].segment_lengths, vec![400, 100]);
        assert_eq!(p[1].segment_lengths, vec![300, 200]);
        assert_eq!(p[0].members, vec![0, 3]);
        assert!(pack_minibatch(&[], 512).is_empty());
    }

    #[test]
    fn adamw_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ModelParams::init(tiny(3), &mut rng).unwrap();
        let before = p.clone();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut st = OptimizerState::new(&p, &cfg);
        adamw_step(&mut p, &before.zeros_like(), &mut st, 0.1).unwrap();
        assert_eq!(p, before);

        // unit gradient on every entry: bias-corrected step is -lr / (1 + eps)
        let mut ones = p.zeros_like();
        for (_, mut t) in ones.tensors_mut() {
            t.fill(1.0);
        }
        let mut st = OptimizerState::new(&p, &cfg);
        adamw_step(&mut p, &ones, &mut st, 0.1).unwrap();
        for ((_, a), (_, b)) in p.tensors().iter().zip(before.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
            }
        }

        let mut p = before.clone();
        let cfg = TrainConfig {
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        let mut st = OptimizerState::new(&p, &cfg);
        adamw_step(&mut p, &before.zeros_like(), &mut st, 0.1).unwrap();
        for ((_, a), (_, b)) in p.tensors().iter().zip(before.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y * (1.0 - 0.001)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adamw_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ModelParams::init(tiny(3), &mut rng).unwrap();
        let other = ModelParams::init(tiny(4), &mut rng).unwrap();
        let mut st = OptimizerState::new(&p, &TrainConfig::default());
        assert!(adamw_step(&mut p, &other, &mut st, 0.1).is_err());
    }

    #[test]
    fn uniform_head_loss_is_log_vocab() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ModelParams::init(tiny(6), &mut rng).unwrap();
        p.out.fill(0.0);
        let corpus = vec![enc(&[2])];
        let batch = pack_minibatch(&[1], 32);
        let (loss, _) = lm_loss_and_gradients(&p, &corpus, &batch).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unused_token_rows_have_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ModelParams::init(tiny(8), &mut rng).unwrap();
        let corpus = vec![enc(&[1, 2, 3]), enc(&[2, 2])];
        let batch = pack_minibatch(&[3, 2], 32);
        let (_, g) = lm_loss_and_gradients(&p, &corpus, &batch).unwrap();
        // 3 is only ever the last token, so it never enters the input
        for row in [0, 3, 4, 5, 6, 7] {
            assert!(g.emb.token.row(row).iter().all(|&x| x == 0.0), "row {row}");
        }
        assert!(g.emb.token.row(1).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = tiny(7);
        cfg.n_layers = 2;
        let p = ModelParams::init(cfg, &mut rng).unwrap();
        let corpus = vec![enc(&[1, 2, 3, 4]), enc(&[5, 6, 1]), enc(&[0, 0, 2, 3, 3])];
        let batch = pack_minibatch(&[4, 3, 5], 32);
        let report = finite_difference_check(&p, &corpus, &batch, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{:?}", report.groups);
    }

    #[test]
    fn planted_gradient_fault_is_localized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ModelParams::init(tiny(7), &mut rng).unwrap();
        let corpus = vec![enc(&[1, 2, 3, 4, 5])];
        let batch = pack_minibatch(&[5], 32);
        let (_, mut g) = lm_loss_and_gradients(&p, &corpus, &batch).unwrap();
        g.layers[0].ff_c.mapv_inplace(|x| 2.0 * x);
        let report = compare_gradients(&p, &g, &corpus, &batch, &GradCheckConfig::default()).unwrap();
        assert_eq!(report.failing(), vec!["layers.0.ff.c"]);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let corpus = vec![enc(&[1, 2])];
        let cfg = TrainConfig {
            max_steps: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = train(&corpus, tiny(4), &cfg, |_, _| Ok(())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(out.params, ModelParams::init(tiny(4), &mut rng).unwrap());
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let corpus: Vec<EncodedTrace> = (0..12).map(|i| enc(&[1, 2, 3, 4 + (i % 2)])).collect();
        let cfg = TrainConfig {
            max_steps: 30,
            batch_packs: 1,
            max_len: 32,
            lr: 1e-2,
            warmup_steps: 5,
            seed: 6,
            ..TrainConfig::default()
        };
        let a = train(&corpus, tiny(6), &cfg, |_, _| Ok(())).unwrap();
        let b = train(&corpus, tiny(6), &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(a.params, b.params);
        let first = a.history.first().unwrap().loss;
        let last = a.history.last().unwrap().loss;
        assert!(last < first * 0.5, "{first} -> {last}");
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(train(&[], tiny(4), &TrainConfig::default(), |_, _| Ok(())).is_err());
    }

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig::default();
        assert!((learning_rate(&cfg, 50) - 3e-4).abs() < 1e-15);
        assert_eq!(learning_rate(&cfg, 100), 6e-4);
        assert_eq!(learning_rate(&cfg, 5000), 6e-4);
    }
}
