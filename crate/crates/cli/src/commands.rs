//! Subcommand implementations. Each writes its artifacts plus a manifest
//! into one output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use scones_core::data::{read_lines, write_lines, ParallelCorpus, TokenId, Vocab, EOS, NUM_RESERVED};
use scones_core::decode::{decode_all, force_score, search_error_rate, DecodeResult, SearchMode};
use scones_core::eval::{corpus_bleu, logprob_stats, paired_bootstrap, tokenize, EvalReport};
use scones_core::exec::Exec;
use scones_core::losses::Head;
use scones_core::model::{Checkpoint, Transformer};
use scones_core::synthlang::{
    make_random_params_with, mean_translation_entropy, render, sample_corpus, sample_sources, source_word,
    target_word, Ibm3Params,
};
use scones_core::train::{train as run_training, TrainOutcome};

use crate::config::{ExperimentConfig, ModeName};
use crate::error::{CliError, Result};
use crate::output::{create_dir, fmt_g9, write_file, write_manifest, Table, OPTIMIZER_NOTE};

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: Option<PathBuf>,
    pub exec: Exec,
}

impl Ctx {
    fn out_dir(&self) -> Result<PathBuf> {
        let out = self
            .out
            .clone()
            .ok_or_else(|| CliError::Config("no output directory (use --out or out_dir)".into()))?;
        create_dir(&out)?;
        Ok(out)
    }
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", p.display())))
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{} does not exist", p.display())))
    }
}

fn data_dir(ctx: &Ctx, data: Option<PathBuf>) -> Result<PathBuf> {
    let d = data
        .or_else(|| ctx.cfg.data_dir.clone())
        .ok_or_else(|| CliError::Config("no data directory (use --data or data_dir)".into()))?;
    require_dir(&d, "data directory")?;
    Ok(d)
}

/// `gamma-0.7`, `scones-alpha-0.2` and friends.
pub fn gamma_dir_name(gamma: f64) -> String {
    format!("gamma-{}", fmt_g9(gamma))
}

pub fn run_dir_name(head: Head, alpha: f64) -> String {
    match head {
        Head::Softmax => "softmax".into(),
        Head::Scones => format!("scones-alpha-{}", fmt_g9(alpha)),
    }
}

fn alpha_cell(head: Head, alpha: f64) -> String {
    match head {
        Head::Softmax => String::new(),
        Head::Scones => fmt_g9(alpha),
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

// ---------------------------------------------------------------- sample-data

fn parse_source_line(line: &str, vocab: usize, lineno: usize) -> Result<Vec<usize>> {
    line.split_whitespace()
        .map(|w| {
            w.strip_prefix('s')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&i| i < vocab)
                .ok_or_else(|| CliError::Data(format!("source line {}: bad word {w:?}", lineno + 1)))
        })
        .collect()
}

pub fn sample_data(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let s = &cfg.synth;
    let out = ctx.out_dir()?;
    let params = match &s.params_file {
        Some(p) => Ibm3Params::load(p)?,
        None => make_random_params_with(s.source_vocab, s.target_vocab, cfg.seed + 1, &s.params)?,
    };
    params.save(&out.join("params.txt"))?;
    let n = s.train_pairs + s.dev_pairs + s.test_pairs;
    let sources = match &s.source_file {
        Some(p) => {
            let lines = read_lines(p)?;
            if lines.len() < n {
                return Err(CliError::Data(format!("{} has {} lines, need {n}", p.display(), lines.len())));
            }
            lines[..n]
                .iter()
                .enumerate()
                .map(|(i, l)| parse_source_line(l, params.source_vocab, i))
                .collect::<Result<Vec<_>>>()?
        }
        None => sample_sources(params.source_vocab, n, s.min_len, s.max_len, s.zipf, cfg.seed, ctx.exec)?,
    };
    if let Some(i) = sources.iter().position(Vec::is_empty) {
        return Err(CliError::Data(format!("source line {} is empty", i + 1)));
    }

    let mut stats = Table::new(&[
        "gamma",
        "train_pairs",
        "dev_pairs",
        "test_pairs",
        "degenerate",
        "mean_source_len",
        "mean_target_len",
        "translation_entropy",
    ]);
    let splits = [
        ("train", 0..s.train_pairs),
        ("dev", s.train_pairs..s.train_pairs + s.dev_pairs),
        ("test", s.train_pairs + s.dev_pairs..n),
    ];
    for &gamma in &s.gammas {
        let corpus = sample_corpus(&params, &sources, gamma, cfg.seed + 2, ctx.exec)?;
        let dir = out.join(gamma_dir_name(gamma));
        create_dir(&dir)?;
        let mut counts = Vec::new();
        let (mut src_train, mut tgt_train) = (Vec::new(), Vec::new());
        for (name, range) in splits.clone() {
            // Lines whose every retry came out empty are dropped.
            let keep: Vec<usize> = range.filter(|&i| !corpus.targets[i].is_empty()).collect();
            let src: Vec<String> = keep.iter().map(|&i| render(&sources[i], source_word)).collect();
            let tgt: Vec<String> = keep.iter().map(|&i| render(&corpus.targets[i], target_word)).collect();
            write_lines(&dir.join(format!("{name}.src")), &src)?;
            write_lines(&dir.join(format!("{name}.tgt")), &tgt)?;
            counts.push(keep.len());
            if name == "train" {
                src_train = src;
                tgt_train = tgt;
            }
        }
        let sv = scones_core::data::build_vocab(src_train.iter().map(String::as_str), params.source_vocab + NUM_RESERVED)?;
        let tv = scones_core::data::build_vocab(tgt_train.iter().map(String::as_str), params.target_vocab + NUM_RESERVED)?;
        sv.save(&dir.join("vocab.src"))?;
        tv.save(&dir.join("vocab.tgt"))?;
        let kept: Vec<usize> = (0..n).filter(|&i| !corpus.targets[i].is_empty()).collect();
        stats.push(vec![
            fmt_g9(gamma),
            counts[0].to_string(),
            counts[1].to_string(),
            counts[2].to_string(),
            corpus.degenerate_lines.len().to_string(),
            fmt_g9(mean(kept.iter().map(|&i| sources[i].len() as f64))),
            fmt_g9(mean(kept.iter().map(|&i| corpus.targets[i].len() as f64))),
            fmt_g9(mean_translation_entropy(&params.with_temperature(gamma)?)),
        ]);
    }
    stats.write(&out.join("sample_stats.csv"))?;
    write_manifest(
        &out,
        "sample-data",
        cfg,
        &[("sources", cfg.seed), ("params", cfg.seed + 1), ("targets", cfg.seed + 2)],
    )
}

// ---------------------------------------------------------------------- train

struct DataSet {
    sv: Vocab,
    tv: Vocab,
    dir: PathBuf,
}

impl DataSet {
    fn open(dir: &Path) -> Result<Self> {
        for f in ["vocab.src", "vocab.tgt"] {
            require_file(&dir.join(f))?;
        }
        Ok(Self {
            sv: Vocab::load(&dir.join("vocab.src"))?,
            tv: Vocab::load(&dir.join("vocab.tgt"))?,
            dir: dir.to_path_buf(),
        })
    }

    fn lines(&self, split: &str) -> Result<(Vec<String>, Vec<String>)> {
        let s = read_lines(&self.dir.join(format!("{split}.src")))?;
        let t = read_lines(&self.dir.join(format!("{split}.tgt")))?;
        Ok((s, t))
    }

    fn corpus(&self, split: &str) -> Result<ParallelCorpus> {
        let (s, t) = self.lines(split)?;
        Ok(ParallelCorpus::encode(&self.sv, &self.tv, &s, &t)?)
    }
}

/// Trains into `out` and returns the outcome; shared with `sweep-alpha`.
fn train_into(cfg: &ExperimentConfig, data: &DataSet, out: &Path) -> Result<TrainOutcome> {
    create_dir(out)?;
    let train_c = data.corpus("train")?;
    let dev_c = data.corpus("dev")?;
    let model = cfg.model.to_model(data.sv.len(), data.tv.len(), cfg.seed);
    let outcome = run_training(&model, cfg.loss.spec(), &cfg.train, &train_c, &dev_c, |r| {
        eprintln!(
            "step {} lr {} train_loss {} dev_loss {} dev_bleu {}",
            r.step,
            fmt_g9(r.learning_rate),
            fmt_g9(r.train_loss),
            fmt_g9(r.dev_loss),
            fmt_g9(r.dev_bleu)
        )
    })?;
    outcome.best.save(&out.join("model.ckpt"))?;
    outcome.last.save(&out.join("last.ckpt"))?;
    data.sv.save(&out.join("vocab.src"))?;
    data.tv.save(&out.join("vocab.tgt"))?;
    let mut log = Table::new(&["step", "learning_rate", "train_loss", "dev_loss", "dev_bleu", "best"]);
    log.comment(format!("head = {}", cfg.loss.head));
    log.comment(format!("alpha = {}", fmt_g9(cfg.loss.alpha)));
    log.comment(format!("lambda = {}", fmt_g9(cfg.loss.lambda)));
    log.comment(format!("optimizer = {OPTIMIZER_NOTE}"));
    log.comment(format!("dropped_pairs = {}", outcome.dropped_pairs));
    log.comment(format!("stopped_early = {}", outcome.stopped_early));
    for r in &outcome.log {
        log.push(vec![
            r.step.to_string(),
            fmt_g9(r.learning_rate),
            fmt_g9(r.train_loss),
            fmt_g9(r.dev_loss),
            fmt_g9(r.dev_bleu),
            u8::from(r.best).to_string(),
        ]);
    }
    log.write(&out.join("train_log.csv"))?;
    write_manifest(out, "train", cfg, &[("model_init", cfg.seed), ("batches_and_dropout", cfg.train.seed)])?;
    Ok(outcome)
}

pub fn train(ctx: &Ctx, data: Option<PathBuf>) -> Result<()> {
    let data = DataSet::open(&data_dir(ctx, data)?)?;
    train_into(&ctx.cfg, &data, &ctx.out_dir()?).map(|_| ())
}

// --------------------------------------------------------------------- decode

pub struct LoadedModel {
    pub model: Transformer,
    pub head: Head,
    pub alpha: f64,
    pub sv: Vocab,
    pub tv: Vocab,
}

pub fn load_model(dir: &Path) -> Result<LoadedModel> {
    require_dir(dir, "model directory")?;
    for f in ["model.ckpt", "vocab.src", "vocab.tgt"] {
        require_file(&dir.join(f))?;
    }
    let ck = Checkpoint::load(&dir.join("model.ckpt"))?;
    let sv = Vocab::load(&dir.join("vocab.src"))?;
    let tv = Vocab::load(&dir.join("vocab.tgt"))?;
    if ck.config.source_vocab_size != sv.len() || ck.config.target_vocab_size != tv.len() {
        return Err(CliError::Data(format!(
            "vocab mismatch: checkpoint expects {}/{} entries, vocab files have {}/{}",
            ck.config.source_vocab_size,
            ck.config.target_vocab_size,
            sv.len(),
            tv.len()
        )));
    }
    Ok(LoadedModel {
        model: Transformer::new(&ck)?,
        head: ck.loss.head,
        alpha: ck.loss.alpha,
        sv,
        tv,
    })
}

fn search_mode(cfg: &ExperimentConfig) -> SearchMode {
    match cfg.decode.mode {
        ModeName::Greedy => SearchMode::Greedy,
        ModeName::Beam => SearchMode::Beam(cfg.decode.beam_size),
        ModeName::Exact => SearchMode::Exact {
            max_states: cfg.decode.max_states,
        },
    }
}

fn mode_label(mode: SearchMode) -> String {
    match mode {
        SearchMode::Greedy => "greedy".into(),
        SearchMode::Beam(k) => format!("beam-{k}"),
        SearchMode::Exact { .. } => "exact".into(),
    }
}

fn translations(tv: &Vocab, results: &[DecodeResult]) -> Vec<String> {
    results.iter().map(|r| tv.decode_line(&r.tokens)).collect()
}

pub fn decode(ctx: &Ctx, model_dir: &Path, input: &Path) -> Result<()> {
    require_file(input)?;
    let m = load_model(model_dir)?;
    let out = ctx.out_dir()?;
    let sources: Vec<Vec<TokenId>> = read_lines(input)?.iter().map(|l| m.sv.encode_line(l)).collect();
    let mode = search_mode(&ctx.cfg);
    let t0 = Instant::now();
    let results = decode_all(&m.model, m.head, &sources, mode, ctx.cfg.decode.max_len, ctx.exec)?;
    let secs = t0.elapsed().as_secs_f64();
    write_lines(&out.join("translations.txt"), &translations(&m.tv, &results))?;

    let mut scores = Table::new(&["line", "score", "length", "finished", "exact", "states_explored"]);
    let mut timing = Table::new(&["line", "wall_time_s"]);
    for (i, r) in results.iter().enumerate() {
        scores.push(vec![
            (i + 1).to_string(),
            fmt_g9(r.score),
            r.words().len().to_string(),
            u8::from(r.finished).to_string(),
            u8::from(r.exact).to_string(),
            r.states_explored.to_string(),
        ]);
        timing.push(vec![(i + 1).to_string(), fmt_g9(r.wall_time.as_secs_f64())]);
    }
    scores.write(&out.join("scores.csv"))?;
    timing.write(&out.join("timing.csv"))?;
    let mut tp = Table::new(&["mode", "sentences", "seconds", "sentences_per_second"]);
    tp.push(vec![
        mode_label(mode),
        results.len().to_string(),
        fmt_g9(secs),
        fmt_g9(results.len() as f64 / secs.max(1e-9)),
    ]);
    tp.write(&out.join("throughput.csv"))?;
    write_manifest(&out, "decode", &ctx.cfg, &[])
}

// ------------------------------------------------------------------- evaluate

fn bleu_lines(hyps: &[String], refs: &[String]) -> Result<EvalReport> {
    Ok(corpus_bleu(&tokenize(hyps), &tokenize(refs))?)
}

pub fn evaluate(ctx: &Ctx, hyp: &Path, reference: &Path, hyp_b: Option<&Path>) -> Result<()> {
    for p in [Some(hyp), Some(reference), hyp_b].into_iter().flatten() {
        require_file(p)?;
    }
    let out = ctx.out_dir()?;
    let h = read_lines(hyp)?;
    let r = read_lines(reference)?;
    let rep = bleu_lines(&h, &r)?;
    let mut t = Table::new(&[
        "bleu",
        "p1",
        "p2",
        "p3",
        "p4",
        "brevity_penalty",
        "length_ratio",
        "hyp_len",
        "ref_len",
    ]);
    let mut row = vec![fmt_g9(rep.bleu)];
    row.extend(rep.precisions.iter().map(|p| fmt_g9(*p)));
    row.extend([
        fmt_g9(rep.brevity_penalty),
        fmt_g9(rep.length_ratio),
        rep.hyp_len.to_string(),
        rep.ref_len.to_string(),
    ]);
    t.push(row);
    t.write(&out.join("eval.csv"))?;
    println!("BLEU {} length_ratio {}", fmt_g9(rep.bleu), fmt_g9(rep.length_ratio));
    if let Some(b) = hyp_b {
        let hb = read_lines(b)?;
        let n = ctx.cfg.eval.bootstrap_resamples;
        let res = paired_bootstrap(&tokenize(&h), &tokenize(&hb), &tokenize(&r), n, ctx.cfg.seed, ctx.exec)?;
        let mut t = Table::new(&["resamples", "seed", "bleu_a", "bleu_b", "p_value", "win_rate_a"]);
        t.push(vec![
            n.to_string(),
            ctx.cfg.seed.to_string(),
            fmt_g9(res.bleu_a),
            fmt_g9(res.bleu_b),
            fmt_g9(res.p_value),
            fmt_g9(res.win_rate_a),
        ]);
        t.write(&out.join("bootstrap.csv"))?;
        println!("paired bootstrap p = {}", fmt_g9(res.p_value));
    }
    write_manifest(&out, "evaluate", &ctx.cfg, &[("bootstrap", ctx.cfg.seed)])
}

// ---------------------------------------------------------------------- sweeps

/// Metrics of one model on one test set, as used by the alpha sweep.
struct ModelSummary {
    greedy_bleu: f64,
    beam4_bleu: f64,
    exact_bleu: f64,
    exact_length_ratio: f64,
    exact_logprob_mean: f64,
    empty_logprob_mean: f64,
    gap_mean: f64,
    gap_sd: f64,
    exact_approximate: usize,
}

/// Greedy, every configured beam size and exact search on one test set.
/// Writes each output file plus `beam_sweep.csv` and `exact_scores.csv`.
fn sweep_model(
    cfg: &ExperimentConfig,
    m: &LoadedModel,
    sources: &[Vec<TokenId>],
    refs: &[String],
    out: &Path,
    exec: Exec,
) -> Result<ModelSummary> {
    let max_len = cfg.decode.max_len;
    let run = |mode| decode_all(&m.model, m.head, sources, mode, max_len, exec);
    let exact = run(SearchMode::Exact {
        max_states: cfg.decode.max_states,
    })?;
    let exact_text = translations(&m.tv, &exact);
    write_lines(&out.join("exact.txt"), &exact_text)?;
    let exact_rep = bleu_lines(&exact_text, refs)?;

    let mut sweep = Table::new(&[
        "head",
        "alpha",
        "beam_size",
        "bleu",
        "length_ratio",
        "search_error_rate",
        "mean_logprob",
        "search_errors",
        "exact_counted",
        "exact_approximate",
    ]);
    let mut beam4_bleu = None;
    for &k in &cfg.decode.beam_sizes {
        let res = run(SearchMode::Beam(k))?;
        let text = translations(&m.tv, &res);
        write_lines(&out.join(format!("beam-{k}.txt")), &text)?;
        let rep = bleu_lines(&text, refs)?;
        let se = search_error_rate(&res, &exact)?;
        if k == 4 {
            beam4_bleu = Some(rep.bleu);
        }
        sweep.push(vec![
            m.head.to_string(),
            alpha_cell(m.head, m.alpha),
            k.to_string(),
            fmt_g9(rep.bleu),
            fmt_g9(rep.length_ratio),
            fmt_g9(se.rate),
            fmt_g9(mean(res.iter().map(|r| r.score))),
            se.errors.to_string(),
            se.counted.to_string(),
            se.approximate.to_string(),
        ]);
    }
    sweep.write(&out.join("beam_sweep.csv"))?;

    let greedy = run(SearchMode::Greedy)?;
    let greedy_text = translations(&m.tv, &greedy);
    write_lines(&out.join("greedy.txt"), &greedy_text)?;
    let greedy_bleu = bleu_lines(&greedy_text, refs)?.bleu;
    let beam4_bleu = match beam4_bleu {
        Some(b) => b,
        None => {
            let res = run(SearchMode::Beam(4))?;
            let text = translations(&m.tv, &res);
            write_lines(&out.join("beam-4.txt"), &text)?;
            bleu_lines(&text, refs)?.bleu
        }
    };

    let empty: Vec<f64> = sources
        .iter()
        .map(|s| force_score(&m.model, m.head, s, &[EOS]))
        .collect::<std::result::Result<_, _>>()?;
    let mut es = Table::new(&["line", "score", "empty_score", "length", "exact", "states_explored"]);
    for (i, r) in exact.iter().enumerate() {
        es.push(vec![
            (i + 1).to_string(),
            fmt_g9(r.score),
            fmt_g9(empty[i]),
            r.words().len().to_string(),
            u8::from(r.exact).to_string(),
            r.states_explored.to_string(),
        ]);
    }
    es.write(&out.join("exact_scores.csv"))?;
    let exact_scores: Vec<f64> = exact.iter().map(|r| r.score).collect();
    let gaps: Vec<f64> = exact_scores.iter().zip(&empty).map(|(x, e)| x - e).collect();
    let (gap_mean, gap_sd) = logprob_stats(&gaps)?;
    Ok(ModelSummary {
        greedy_bleu,
        beam4_bleu,
        exact_bleu: exact_rep.bleu,
        exact_length_ratio: exact_rep.length_ratio,
        exact_logprob_mean: logprob_stats(&exact_scores)?.0,
        empty_logprob_mean: logprob_stats(&empty)?.0,
        gap_mean,
        gap_sd,
        exact_approximate: exact.iter().filter(|r| !r.exact).count(),
    })
}

fn test_set(m: &LoadedModel, input: &Path, reference: &Path) -> Result<(Vec<Vec<TokenId>>, Vec<String>)> {
    require_file(input)?;
    require_file(reference)?;
    let sources: Vec<Vec<TokenId>> = read_lines(input)?.iter().map(|l| m.sv.encode_line(l)).collect();
    let refs = read_lines(reference)?;
    if sources.len() != refs.len() {
        return Err(CliError::Data(format!("{} sources but {} references", sources.len(), refs.len())));
    }
    Ok((sources, refs))
}

pub fn sweep_beam(ctx: &Ctx, model_dir: &Path, input: &Path, reference: &Path) -> Result<()> {
    let m = load_model(model_dir)?;
    let (sources, refs) = test_set(&m, input, reference)?;
    let out = ctx.out_dir()?;
    sweep_model(&ctx.cfg, &m, &sources, &refs, &out, ctx.exec)?;
    write_manifest(&out, "sweep-beam", &ctx.cfg, &[])
}

pub fn sweep_alpha(ctx: &Ctx, data: Option<PathBuf>) -> Result<()> {
    let data = DataSet::open(&data_dir(ctx, data)?)?;
    let out = ctx.out_dir()?;
    let mut runs: Vec<(Head, f64)> = Vec::new();
    if ctx.cfg.sweep.include_softmax {
        runs.push((Head::Softmax, 1.0));
    }
    runs.extend(ctx.cfg.sweep.alphas.iter().map(|&a| (Head::Scones, a)));

    let mut table = Table::new(&[
        "head",
        "alpha",
        "greedy_bleu",
        "beam4_bleu",
        "exact_bleu",
        "exact_length_ratio",
        "exact_logprob_mean",
        "empty_logprob_mean",
        "gap_mean",
        "gap_sd",
        "exact_approximate",
    ]);
    for (head, alpha) in runs {
        let mut cfg = ctx.cfg.clone();
        cfg.loss.head = head;
        cfg.loss.alpha = alpha;
        let dir = out.join(run_dir_name(head, alpha));
        eprintln!("training {}", dir.display());
        train_into(&cfg, &data, &dir)?;
        let m = load_model(&dir)?;
        let (sources, refs) = test_set(&m, &data.dir.join("test.src"), &data.dir.join("test.tgt"))?;
        let s = sweep_model(&cfg, &m, &sources, &refs, &dir, ctx.exec)?;
        table.push(vec![
            head.to_string(),
            alpha_cell(head, alpha),
            fmt_g9(s.greedy_bleu),
            fmt_g9(s.beam4_bleu),
            fmt_g9(s.exact_bleu),
            fmt_g9(s.exact_length_ratio),
            fmt_g9(s.exact_logprob_mean),
            fmt_g9(s.empty_logprob_mean),
            fmt_g9(s.gap_mean),
            fmt_g9(s.gap_sd),
            s.exact_approximate.to_string(),
        ]);
        // Rewritten after every model so a long sweep leaves partial results.
        table.write(&out.join("alpha_sweep.csv"))?;
    }
    write_manifest(&out, "sweep-alpha", &ctx.cfg, &[("model_init", ctx.cfg.seed), ("batches_and_dropout", ctx.cfg.train.seed)])
}

// -------------------------------------------------------------------- helpers

pub(crate) fn list_files(dir: &Path, skip: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p == skip {
            continue;
        }
        if p.is_dir() {
            list_files(&p, skip, found)?;
        } else {
            found.push(p);
        }
    }
    Ok(())
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}
