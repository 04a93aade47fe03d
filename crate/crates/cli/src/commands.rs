use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use sentinel_core::baselines::{
    self, select_components_bic, train_doc2vec, PvMode, Sampler,
};
use sentinel_core::ids::{
    read_scores_csv, rank_by_contract, score_contract_history, write_report_csv, write_scores_csv,
    ScoreOptions,
};
use sentinel_core::metrics::{evaluate_thresholds, EvalConfig};
use sentinel_core::model::{load_checkpoint, save_checkpoint};
use sentinel_core::rpc::{RpcClient, RpcConfig};
use sentinel_core::tokenizer::{count_corpus, encode_trace, trace_token_count, AbiRegistry, TokenizeOptions};
use sentinel_core::trace_ingest::{normalize_hex, parse_trace_file, write_trace_file};
use sentinel_core::train::{
    finite_difference_check, pack_minibatch, perplexity, train, write_loss_csv, GradCheckConfig,
};
use sentinel_core::{
    synth, AlarmConfig, Cutoff, EncodedTrace, Label, ModelConfig, ModelParams, RankedReport, RawTrace,
    ScoredTx, Vocabulary,
};

use crate::config::{FileConfig, ManifestBuilder, ModelOverrides};
use crate::{
    BaselineCommand, BenchArgs, Cli, Command, CutoffArg, Doc2vecArgs, EvalArgs, Format, GmmArgs,
    GradcheckArgs, IngestArgs, LengthArgs, ModeArg, Preset, RankArgs, SamplerArg, ScoreArgs, TraceInput,
    TrainArgs, UsageError, VocabArgs,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest(a) => ingest(a, &file),
        Command::Vocab(a) => vocab(a),
        Command::Train(a) => train_cmd(a, &file),
        Command::Score(a) => score(a),
        Command::Rank(a) => rank_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Baseline(BaselineCommand::Length(a)) => length(a),
        Command::Baseline(BaselineCommand::Doc2vec(a)) => doc2vec(a, &file),
        Command::Baseline(BaselineCommand::Gmm(a)) => gmm(a, &file),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
    }
}

fn cutoff(c: CutoffArg) -> Cutoff {
    match c {
        CutoffArg::Ceil => Cutoff::Ceil,
        CutoffArg::Floor => Cutoff::Floor,
    }
}

struct Corpus {
    traces: Vec<RawTrace>,
    abi: Option<AbiRegistry>,
}

fn load_corpus(input: &TraceInput) -> Result<Corpus> {
    let mut traces = Vec::new();
    for p in &input.traces {
        traces.extend(parse_trace_file(p)?);
    }
    let abi = input.abi.as_ref().map(AbiRegistry::load).transpose()?;
    Ok(Corpus { traces, abi })
}

fn manifest_inputs(m: &mut ManifestBuilder, input: &TraceInput) {
    m.inputs(&input.traces);
    if let Some(a) = &input.abi {
        m.input(a);
    }
}

fn normalize_address(a: &str) -> Result<String> {
    normalize_hex(a, Some(20)).map_err(|e| usage(format!("--contract: {e}")))
}

/// Contract each trace is ranked under: the root call target, or `filter`
/// for the traces touching it.
fn attribute<'a>(traces: &'a [RawTrace], filter: Option<&str>) -> Vec<(String, Vec<&'a RawTrace>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<&RawTrace>> = HashMap::new();
    for t in traces {
        let c = match filter {
            Some(f) if t.touches(f) => f.to_string(),
            Some(_) => continue,
            None if t.root.to.is_empty() => "0x".to_string(),
            None => t.root.to.clone(),
        };
        if !groups.contains_key(&c) {
            order.push(c.clone());
        }
        groups.entry(c).or_default().push(t);
    }
    order
        .into_iter()
        .map(|c| {
            let g = groups.remove(&c).unwrap_or_default();
            (c, g)
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn ingest(a: IngestArgs, file: &FileConfig) -> Result<()> {
    let endpoint = a
        .rpc
        .clone()
        .or_else(|| file.rpc.clone())
        .ok_or_else(|| usage("no node endpoint: pass --rpc or set TRACE_SENTINEL_RPC"))?;
    let default_label = match &a.label {
        Some(l) => Some(Label::parse(l).ok_or_else(|| usage(format!("unknown label {l:?}")))?),
        None => None,
    };
    let mut wanted: Vec<(String, Option<Label>, Vec<String>)> =
        a.tx.iter().map(|h| (h.clone(), default_label, Vec::new())).collect();
    if let Some(p) = &a.tx_file {
        let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split(',');
            let hash = parts.next().unwrap_or_default().trim().to_string();
            let label = match parts.next().map(str::trim).filter(|s| !s.is_empty()) {
                Some(l) => Some(
                    Label::parse(l).with_context(|| format!("{}:{}: unknown label {l:?}", p.display(), i + 1))?,
                ),
                None => default_label,
            };
            let tags = parts
                .next()
                .map(|t| t.split(';').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
                .unwrap_or_default();
            wanted.push((hash, label, tags));
        }
    }
    if wanted.is_empty() {
        return Err(usage("nothing to ingest: pass --tx or --tx-file"));
    }
    let mut cfg = RpcConfig::default();
    if let Some(r) = a.retries {
        cfg.retries = r;
    }
    let mut m = ManifestBuilder::start("ingest", None, json!({"rpc": endpoint, "retries": cfg.retries}));
    if let Some(p) = &a.tx_file {
        m.input(p);
    }
    let client = RpcClient::new(endpoint, cfg);
    let mut traces = Vec::with_capacity(wanted.len());
    for (hash, label, tags) in wanted {
        let mut t = client.fetch_trace(&hash)?;
        t.label = label;
        t.tags = tags;
        traces.push(t);
    }
    write_trace_file(&a.out, &traces)?;
    m.finish(&[&a.out])?;
    eprintln!("wrote {} traces to {}", traces.len(), a.out.display());
    Ok(())
}

fn vocab(a: VocabArgs) -> Result<()> {
    let corpus = load_corpus(&a.input)?;
    let counter = count_corpus(&corpus.traces, corpus.abi.as_ref(), &TokenizeOptions::default())?;
    let vocab = counter.build(a.cap)?;
    vocab.write_tsv(&a.out)?;
    let mut m = ManifestBuilder::start("vocab", None, json!({"cap": a.cap}));
    manifest_inputs(&mut m, &a.input);
    m.finish(&[&a.out])?;
    eprintln!("{} tokens from {} traces", vocab.len(), corpus.traces.len());
    Ok(())
}

fn model_config(preset: Preset, vocab_size: usize, o: &ModelOverrides) -> Result<ModelConfig> {
    let mut c = match preset {
        Preset::Tiny => ModelConfig::tiny(vocab_size),
        Preset::Desk => ModelConfig::desk(vocab_size),
    };
    c.d_model = o.d_model.unwrap_or(c.d_model);
    c.n_heads = o.n_heads.unwrap_or(c.n_heads);
    c.n_layers = o.n_layers.unwrap_or(c.n_layers);
    c.d_ff = o.d_ff.unwrap_or(c.d_ff);
    c.max_seq = o.max_seq.unwrap_or(c.max_seq);
    c.max_depth = o.max_depth.unwrap_or(c.max_depth);
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn encode_corpus(corpus: &Corpus, vocab: &Vocabulary, opts: &TokenizeOptions) -> Result<Vec<EncodedTrace>> {
    Ok(corpus
        .traces
        .iter()
        .map(|t| encode_trace(t, vocab, corpus.abi.as_ref(), opts))
        .collect::<sentinel_core::Result<_>>()?)
}

fn train_cmd(a: TrainArgs, file: &FileConfig) -> Result<()> {
    let corpus = load_corpus(&a.input)?;
    let vocab = Vocabulary::read_tsv(&a.vocab)?;
    let model = model_config(a.preset, vocab.len(), &file.model)?;
    let mut cfg = file.train.clone();
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.max_steps = a.steps.unwrap_or(cfg.max_steps);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch_packs = a.batch_packs.unwrap_or(cfg.batch_packs);
    cfg.warmup_steps = a.warmup.unwrap_or(cfg.warmup_steps);
    cfg.max_len = cfg.max_len.min(model.max_seq);
    if cfg.lr <= 0.0 || cfg.batch_packs == 0 {
        return Err(usage("--lr and --batch-packs must be positive"));
    }
    let opts = TokenizeOptions {
        max_depth: model.max_depth,
        max_len: cfg.max_len,
    };
    let enc = encode_corpus(&corpus, &vocab, &opts)?;
    let meta = json!({"model": model, "train": cfg});
    let mut m = ManifestBuilder::start("train", Some(cfg.seed), meta.clone());
    manifest_inputs(&mut m, &a.input);
    m.input(&a.vocab);

    let every = a.checkpoint_every.unwrap_or(0);
    let total = cfg.max_steps;
    let outcome = train(&enc, model, &cfg, |log, params| {
        if log.step % 50 == 0 || log.step == total {
            eprintln!("step {:>6}  loss {:.4}  {:.0} tok/s", log.step, log.loss, log.tokens_per_sec);
        }
        if every > 0 && log.step % every == 0 {
            save_checkpoint(&a.out, params, Some(&json!({"step": log.step, "config": meta["train"]})))?;
        }
        Ok(())
    })?;
    let steps = outcome.history.len();
    let final_loss = outcome.history.last().map(|h| h.loss);
    save_checkpoint(
        &a.out,
        &outcome.params,
        Some(&json!({"step": steps, "final_loss": final_loss, "config": meta["train"]})),
    )?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(p) = &a.loss_csv {
        write_loss_csv(p, &outcome.history)?;
        outputs.push(p);
    }
    m.finish(&outputs)?;
    eprintln!(
        "trained {steps} steps; corpus perplexity {:.4}",
        perplexity(&outcome.params, &enc)?
    );
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let corpus = load_corpus(&a.input)?;
    let vocab = Vocabulary::read_tsv(&a.vocab)?;
    let (params, _) = load_checkpoint(&a.model)?;
    if params.config.vocab_size != vocab.len() {
        bail!(
            "model expects {} tokens but the vocabulary has {}",
            params.config.vocab_size,
            vocab.len()
        );
    }
    let filter = a.contract.as_deref().map(normalize_address).transpose()?;
    let opts = ScoreOptions {
        tokenize: TokenizeOptions {
            max_depth: params.config.max_depth,
            max_len: params.config.max_seq,
        },
        per_token: a.per_token,
    };
    let mut scores = Vec::new();
    for (contract, group) in attribute(&corpus.traces, filter.as_deref()) {
        let owned: Vec<RawTrace> = group.into_iter().cloned().collect();
        scores.extend(score_contract_history(
            &params,
            &vocab,
            corpus.abi.as_ref(),
            &contract,
            &owned,
            &opts,
        )?);
    }
    write_scores_csv(create(&a.out)?, &scores)?;
    let mut m = ManifestBuilder::start(
        "score",
        None,
        json!({"contract": filter, "per_token": a.per_token}),
    );
    manifest_inputs(&mut m, &a.input);
    m.input(&a.model).input(&a.vocab);
    m.finish(&[&a.out])?;
    eprintln!("scored {} transactions", scores.len());
    Ok(())
}

fn read_scores(path: &Path) -> Result<Vec<ScoredTx>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_scores_csv(BufReader::new(f))?)
}

fn output(out: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn rank_cmd(a: RankArgs) -> Result<()> {
    let threshold = match (a.alpha, a.topk) {
        (Some(x), None) => AlarmConfig::Percentage(x),
        (None, Some(k)) => AlarmConfig::Absolute(k),
        (None, None) => AlarmConfig::Percentage(1.0),
        (Some(_), Some(_)) => unreachable!("clap rejects --alpha with --topk"),
    };
    threshold.validate().map_err(|e| usage(e.to_string()))?;
    let reports = rank_by_contract(read_scores(&a.scores)?);
    let alerts = reports
        .iter()
        .map(|r| threshold.alert_count(r.len(), cutoff(a.cutoff)))
        .collect::<sentinel_core::Result<Vec<_>>>()?;
    let mut w = output(a.out.as_ref())?;
    match a.format {
        Format::Csv => write_report_csv(&mut w, &reports, &alerts)?,
        Format::Json => {
            let body: Vec<_> = reports.iter().zip(&alerts).map(|(r, &k)| report_json(r, k)).collect();
            serde_json::to_writer_pretty(&mut w, &json!({"threshold": threshold.label(), "reports": body}))?;
            writeln!(w)?;
        }
    }
    w.flush()?;
    drop(w);
    if let Some(url) = &a.webhook {
        for (r, &k) in reports.iter().zip(&alerts) {
            if k > 0 {
                sentinel_core::ids::post_alerts(url, r, k)?;
            }
        }
    }
    if let Some(p) = &a.out {
        let mut m = ManifestBuilder::start(
            "rank",
            None,
            json!({"threshold": threshold.label(), "cutoff": format!("{:?}", a.cutoff)}),
        );
        m.input(&a.scores);
        m.finish(&[p])?;
    }
    Ok(())
}

fn report_json(r: &RankedReport, alerts: usize) -> serde_json::Value {
    let entries: Vec<_> = r
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            json!({
                "rank": i + 1,
                "tx_hash": e.tx_hash,
                "log_likelihood": e.log_likelihood,
                "token_count": e.token_count,
                "alert": i < alerts,
            })
        })
        .collect();
    json!({"contract": r.contract, "tie_break": r.tie_break, "alerts": alerts, "entries": entries})
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut thresholds: Vec<AlarmConfig> = a.alpha.iter().map(|&x| AlarmConfig::Percentage(x)).collect();
    thresholds.extend(a.topk.iter().map(|&k| AlarmConfig::Absolute(k)));
    if thresholds.is_empty() {
        return Err(usage("eval needs at least one --alpha or --topk value"));
    }
    for t in &thresholds {
        t.validate().map_err(|e| usage(e.to_string()))?;
    }
    let reports = rank_by_contract(read_scores(&a.scores)?);
    let cfg = EvalConfig {
        thresholds,
        cutoff: cutoff(a.cutoff),
        tag: a.tag.clone(),
    };
    let table = evaluate_thresholds(&reports, &cfg)?;
    let mut w = output(a.out.as_ref())?;
    match a.format {
        Format::Csv => table.write_csv(&mut w)?,
        Format::Json => {
            serde_json::to_writer_pretty(&mut w, &table)?;
            writeln!(w)?;
        }
    }
    w.flush()?;
    drop(w);
    if table.skipped > 0 {
        eprintln!("{} contracts without a matching attack were skipped", table.skipped);
    }
    if let Some(p) = &a.out {
        let mut m = ManifestBuilder::start(
            "eval",
            None,
            json!({"thresholds": table.thresholds, "cutoff": format!("{:?}", a.cutoff), "tag": a.tag}),
        );
        m.input(&a.scores);
        m.finish(&[p])?;
    }
    Ok(())
}

fn scored_tx(t: &RawTrace, contract: &str, token_count: usize) -> ScoredTx {
    ScoredTx {
        tx_hash: t.tx_hash.clone(),
        contract: contract.to_string(),
        log_likelihood: 0.0,
        token_count,
        label: t.label,
        tags: t.tags.clone(),
    }
}

fn length(a: LengthArgs) -> Result<()> {
    let corpus = load_corpus(&a.input)?;
    let filter = a.contract.as_deref().map(normalize_address).transpose()?;
    let mut scores = Vec::new();
    for (contract, group) in attribute(&corpus.traces, filter.as_deref()) {
        let rows = group
            .iter()
            .map(|t| Ok(scored_tx(t, &contract, trace_token_count(t, corpus.abi.as_ref())?)))
            .collect::<Result<Vec<_>>>()?;
        scores.extend(baselines::trace_length_rank(&contract, rows).entries);
    }
    write_scores_csv(create(&a.out)?, &scores)?;
    let mut m = ManifestBuilder::start("baseline length", None, json!({"contract": filter}));
    manifest_inputs(&mut m, &a.input);
    m.finish(&[&a.out])?;
    Ok(())
}

fn doc2vec(a: Doc2vecArgs, file: &FileConfig) -> Result<()> {
    let corpus = load_corpus(&a.input)?;
    let mut cfg = file.doc2vec.clone();
    cfg.dim = a.dim.unwrap_or(cfg.dim);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Dbow => PvMode::Dbow,
            ModeArg::Dm => PvMode::Dm,
        };
    }
    if let Some(s) = a.sampler {
        cfg.sampler = match s {
            SamplerArg::Negative => Sampler::Negative,
            SamplerArg::Hierarchical => Sampler::Hierarchical,
        };
    }
    let docs = corpus
        .traces
        .iter()
        .map(|t| Ok(baselines::flatten_trace(&sentinel_core::itr::build_itr(t)?, corpus.abi.as_ref())))
        .collect::<Result<Vec<_>>>()?;
    let model = train_doc2vec(&docs, &cfg)?;
    let ids: Vec<String> = corpus.traces.iter().map(|t| t.tx_hash.clone()).collect();
    baselines::save_embeddings(&a.out, &ids, &model.doc_vectors)?;
    let mut m = ManifestBuilder::start("baseline doc2vec", Some(cfg.seed), json!(cfg));
    manifest_inputs(&mut m, &a.input);
    m.finish(&[&a.out])?;
    Ok(())
}

fn gmm(a: GmmArgs, file: &FileConfig) -> Result<()> {
    let corpus = load_corpus(&a.input)?;
    let (ids, matrix) = baselines::load_embeddings(&a.embeddings)?;
    let mut cfg = file.em.clone();
    cfg.soft |= a.soft;
    let seed = a.seed.unwrap_or(0);
    if a.components.is_empty() || a.components.contains(&0) {
        return Err(usage("--components must list positive counts"));
    }
    let selection = select_components_bic(matrix.view(), &a.components, seed, &cfg)?;
    let row_of: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let filter = a.contract.as_deref().map(normalize_address).transpose()?;
    let mut scores = Vec::new();
    for (contract, group) in attribute(&corpus.traces, filter.as_deref()) {
        let mut rows = Vec::with_capacity(group.len());
        let mut sel = Vec::with_capacity(group.len());
        for t in group {
            let i = *row_of
                .get(t.tx_hash.as_str())
                .with_context(|| format!("no embedding for {}", t.tx_hash))?;
            sel.push(i);
            rows.push(scored_tx(t, &contract, trace_token_count(t, corpus.abi.as_ref())?));
        }
        let sub = matrix.select(ndarray::Axis(0), &sel);
        scores.extend(baselines::gmm_rank(&contract, rows, &sub, &selection.fit.mixture)?.entries);
    }
    write_scores_csv(create(&a.out)?, &scores)?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(p) = &a.mixture_out {
        baselines::save_mixture(p, &selection.fit.mixture)?;
        outputs.push(p);
    }
    let mut m = ManifestBuilder::start(
        "baseline gmm",
        Some(seed),
        json!({"em": cfg, "bic": selection.scores, "components": selection.components}),
    );
    m.input(&a.embeddings);
    manifest_inputs(&mut m, &a.input);
    m.finish(&outputs)?;
    eprintln!("BIC selected {} components", selection.components);
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let traces = if a.traces.is_empty() {
        synth::templated_corpus(4, &mut rng)
    } else {
        let mut t = Vec::new();
        for p in &a.traces {
            t.extend(parse_trace_file(p)?);
        }
        t.truncate(4);
        t
    };
    let opts = TokenizeOptions::default();
    let vocab = count_corpus(&traces, None, &opts)?.build(100_000)?;
    let enc = traces
        .iter()
        .map(|t| encode_trace(t, &vocab, None, &opts))
        .collect::<sentinel_core::Result<Vec<_>>>()?;
    let params = ModelParams::init(ModelConfig::tiny(vocab.len()), &mut rng)?;
    let lengths: Vec<usize> = enc.iter().map(EncodedTrace::len).collect();
    let batch = pack_minibatch(&lengths, params.config.max_seq);
    let defaults = GradCheckConfig::default();
    let cfg = GradCheckConfig {
        step: a.step.unwrap_or(defaults.step),
        seed: a.seed,
        tolerance: a.tolerance,
        ..defaults
    };
    let started = Instant::now();
    let report = finite_difference_check(&params, &enc, &batch, &cfg)?;
    for g in &report.groups {
        println!("{:<24} {:>4} entries  max rel error {:.3e}", g.name, g.checked, g.max_rel_error);
    }
    println!(
        "max relative error {:.3e} (tolerance {:.0e}) in {:.1}s",
        report.max_rel_error(),
        report.tolerance,
        started.elapsed().as_secs_f64()
    );
    if !report.passed() {
        bail!("gradient check failed for {}", report.failing().join(", "));
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let traces = if a.traces.is_empty() {
        synth::templated_corpus(a.synthetic, &mut rng)
    } else {
        let mut t = Vec::new();
        for p in &a.traces {
            t.extend(parse_trace_file(p)?);
        }
        t
    };
    let (params, vocab) = match (&a.model, &a.vocab) {
        (Some(m), Some(v)) => (load_checkpoint(m)?.0, Vocabulary::read_tsv(v)?),
        _ => {
            let vocab = count_corpus(&traces, None, &TokenizeOptions::default())?.build(100_000)?;
            (ModelParams::init(ModelConfig::tiny(vocab.len()), &mut rng)?, vocab)
        }
    };
    if traces.is_empty() {
        bail!("no traces to score");
    }
    let opts = ScoreOptions::default();
    let mut best = 0.0f64;
    for _ in 0..a.repeat.max(1) {
        let started = Instant::now();
        score_contract_history(&params, &vocab, None, "bench", &traces, &opts)?;
        best = best.max(traces.len() as f64 / started.elapsed().as_secs_f64());
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    println!("{} traces, {threads} threads: {best:.1} tx/s", traces.len());
    Ok(())
}
