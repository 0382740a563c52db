//! IBM Model 3 sampler for synthetic parallel corpora.
//!
//! Source and target words are table indices; their text forms are `s<i>`
//! and `t<j>`. The sampler follows the Model 3 generative story:
//!
//! 1. draw a fertility `phi_i ~ n(.|x_i)` for each source word;
//! 2. draw `phi_0` as `sum(phi_i)` Bernoulli(`p1`) trials;
//! 3. the target length is `m = phi_0 + sum(phi_i)`;
//! 4. draw every target word from `t(.|x_i)` (NULL row for `i = 0`);
//! 5. place the words of real source positions with `d(.|i, l, m)`, restricted
//!    to still vacant positions and renormalised;
//! 6. place the spurious words uniformly over the remaining vacancies;
//! 7. read the words out in position order.
//!
//! Temperature `gamma` reshapes `n`, `t` and `d` as `P^(1/gamma)` renormalised;
//! `p1` is never touched. Because restriction and renormalisation commute with
//! the power transform, tables are adjusted once up front
//! ([`Ibm3Params::with_temperature`]).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_indexed, Exec};

pub const DEFAULT_MAX_FERTILITY: usize = 4;
pub const BUCKET_WIDTH: usize = 4;
/// Longest supported target (and source) sentence.
pub const MAX_SENTENCE_LEN: usize = 64;
const NUM_BUCKETS: usize = MAX_SENTENCE_LEN / BUCKET_WIDTH;
/// Attempts at a non-empty target before giving up on a line.
pub const EMPTY_RETRIES: usize = 100;
const ROW_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("source word {0} is not in the tables")]
    UnknownSource(usize),
    #[error("sentence length {0} exceeds the supported maximum {MAX_SENTENCE_LEN}")]
    TooLong(usize),
    #[error("empty source sentence")]
    EmptySource,
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Model 3 tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ibm3Params {
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub max_fertility: usize,
    pub p1: f64,
    /// `fertility[f][phi]`, `phi` in `0..=max_fertility`.
    pub fertility: Vec<Vec<f64>>,
    /// `translation[f][e]`.
    pub translation: Vec<Vec<f64>>,
    /// `t(e|NULL)`.
    pub null_translation: Vec<f64>,
    /// `distortion[distortion_row(i, l, m)][j - 1]` for 1-based positions.
    pub distortion: Vec<Vec<f64>>,
}

fn bucket(x: usize) -> usize {
    (x - 1) / BUCKET_WIDTH
}

/// Row of the distortion table for 1-based source position `i` in a source of
/// length `l` and a target of length `m`. Only buckets with `i <= l` exist.
pub fn distortion_row(i: usize, l: usize, m: usize) -> usize {
    let (ib, lb, mb) = (bucket(i), bucket(l), bucket(m));
    (lb * (lb + 1) / 2 + ib) * NUM_BUCKETS + mb
}

/// Number of distortion rows.
pub fn num_distortion_rows() -> usize {
    NUM_BUCKETS * (NUM_BUCKETS + 1) / 2 * NUM_BUCKETS
}

/// Representative `(i, l, m)` bucket midpoints of a distortion row.
fn row_midpoints(row: usize) -> (f64, f64, f64) {
    let (tri, mb) = (row / NUM_BUCKETS, row % NUM_BUCKETS);
    let mut lb = 0;
    while (lb + 1) * (lb + 2) / 2 <= tri {
        lb += 1;
    }
    let ib = tri - lb * (lb + 1) / 2;
    let mid = |b: usize| (b * BUCKET_WIDTH) as f64 + (BUCKET_WIDTH as f64 + 1.0) / 2.0;
    (mid(ib), mid(lb), mid(mb))
}

/// `P^(1/gamma)` renormalised, computed in log space. Zero entries stay zero.
pub fn temperature_adjust(dist: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(SynthError::BadTemperature(gamma));
    }
    let logs: Vec<f64> = dist
        .iter()
        .map(|&p| if p > 0.0 { p.ln() / gamma } else { f64::NEG_INFINITY })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(vec![0.0; dist.len()]);
    }
    let mut out: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

fn check_row(name: &str, row: &[f64], len: usize) -> Result<()> {
    if row.len() != len {
        return Err(SynthError::Invalid(format!("{name}: {} entries, expected {len}", row.len())));
    }
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(SynthError::Invalid(format!("{name}: negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOLERANCE {
        return Err(SynthError::Invalid(format!("{name}: sums to {s}")));
    }
    Ok(())
}

/// Index drawn from a normalised row by inversion; `u` in `[0, 1)`.
fn draw(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = k;
            if u < acc {
                return k;
            }
        }
    }
    last
}

/// One sampled target sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub words: Vec<usize>,
    /// Per source position `0..=l` (0 = NULL), the fertility used.
    pub fertilities: Vec<usize>,
    /// Every retry produced `m = 0`; `words` is empty.
    pub degenerate: bool,
}

impl Ibm3Params {
    pub fn validate(&self) -> Result<()> {
        if self.source_vocab == 0 || self.target_vocab == 0 {
            return Err(SynthError::Invalid("vocabulary sizes must be positive".into()));
        }
        if self.max_fertility == 0 {
            return Err(SynthError::Invalid("max_fertility must be at least 1".into()));
        }
        if !(0.0..=0.5).contains(&self.p1) {
            return Err(SynthError::Invalid(format!("p1 = {} outside [0, 0.5]", self.p1)));
        }
        if self.fertility.len() != self.source_vocab || self.translation.len() != self.source_vocab {
            return Err(SynthError::Invalid("one fertility and translation row per source word".into()));
        }
        for (f, row) in self.fertility.iter().enumerate() {
            check_row(&format!("fertility row s{f}"), row, self.max_fertility + 1)?;
        }
        for (f, row) in self.translation.iter().enumerate() {
            check_row(&format!("translation row s{f}"), row, self.target_vocab)?;
        }
        check_row("translation row NULL", &self.null_translation, self.target_vocab)?;
        if self.distortion.len() != num_distortion_rows() {
            return Err(SynthError::Invalid(format!(
                "{} distortion rows, expected {}",
                self.distortion.len(),
                num_distortion_rows()
            )));
        }
        for (r, row) in self.distortion.iter().enumerate() {
            check_row(&format!("distortion row {r}"), row, MAX_SENTENCE_LEN)?;
        }
        Ok(())
    }

    /// Copy with `n`, `t` and `d` temperature-adjusted; `p1` unchanged.
    pub fn with_temperature(&self, gamma: f64) -> Result<Self> {
        let adj = |rows: &[Vec<f64>]| rows.iter().map(|r| temperature_adjust(r, gamma)).collect::<Result<Vec<_>>>();
        Ok(Self {
            fertility: adj(&self.fertility)?,
            translation: adj(&self.translation)?,
            null_translation: temperature_adjust(&self.null_translation, gamma)?,
            distortion: adj(&self.distortion)?,
            ..self.clone()
        })
    }

    /// Expected target length `(1 + p1) * sum E[phi]` for this table set.
    pub fn expected_target_len(&self, source: &[usize]) -> f64 {
        let mean_phi: f64 = source
            .iter()
            .map(|&f| self.fertility[f].iter().enumerate().map(|(k, p)| k as f64 * p).sum::<f64>())
            .sum();
        mean_phi * (1.0 + self.p1)
    }

    /// Draws one target sentence following the generative story, using the
    /// tables as given (apply [`Self::with_temperature`] first for `gamma != 1`).
    pub fn sample<R: Rng>(&self, source: &[usize], rng: &mut R) -> Result<Sample> {
        let l = source.len();
        if l == 0 {
            return Err(SynthError::EmptySource);
        }
        if l > MAX_SENTENCE_LEN {
            return Err(SynthError::TooLong(l));
        }
        if let Some(&f) = source.iter().find(|&&f| f >= self.source_vocab) {
            return Err(SynthError::UnknownSource(f));
        }
        for _ in 0..EMPTY_RETRIES {
            // Steps 1-3.
            let mut phi = vec![0usize; l + 1];
            for (i, &f) in source.iter().enumerate() {
                phi[i + 1] = draw(&self.fertility[f], rng.gen());
            }
            let total: usize = phi[1..].iter().sum();
            phi[0] = (0..total).filter(|_| rng.gen::<f64>() < self.p1).count();
            let m = total + phi[0];
            if m == 0 {
                continue;
            }
            if m > MAX_SENTENCE_LEN {
                return Err(SynthError::TooLong(m));
            }
            // Step 4.
            let mut words: Vec<Vec<usize>> = Vec::with_capacity(l + 1);
            words.push((0..phi[0]).map(|_| draw(&self.null_translation, rng.gen())).collect());
            for (i, &f) in source.iter().enumerate() {
                words.push((0..phi[i + 1]).map(|_| draw(&self.translation[f], rng.gen())).collect());
            }
            // Step 5.
            let mut slots: Vec<Option<usize>> = vec![None; m];
            let mut weights = vec![0.0; m];
            for i in 1..=l {
                let row = &self.distortion[distortion_row(i, l, m)];
                for &w in &words[i] {
                    for j in 0..m {
                        weights[j] = if slots[j].is_none() { row[j] } else { 0.0 };
                    }
                    let z: f64 = weights.iter().sum();
                    let j = if z > 0.0 {
                        draw(&weights, rng.gen::<f64>() * z)
                    } else {
                        slots.iter().position(Option::is_none).expect("a vacancy remains")
                    };
                    slots[j] = Some(w);
                }
            }
            // Step 6.
            for &w in &words[0] {
                let vacant: Vec<usize> = (0..m).filter(|&j| slots[j].is_none()).collect();
                slots[vacant[rng.gen_range(0..vacant.len())]] = Some(w);
            }
            // Step 7.
            return Ok(Sample {
                words: slots.into_iter().map(|s| s.expect("all positions filled")).collect(),
                fertilities: phi,
                degenerate: false,
            });
        }
        Ok(Sample {
            words: Vec::new(),
            fertilities: vec![0; l + 1],
            degenerate: true,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, label: &str, r: &[f64]| {
            out.push_str(label);
            for v in r {
                write!(out, " {v:?}").expect("string write");
            }
            out.push('\n');
        };
        writeln!(out, "# IBM Model 3 parameters").unwrap();
        writeln!(out, "[meta]").unwrap();
        writeln!(out, "source_vocab {}", self.source_vocab).unwrap();
        writeln!(out, "target_vocab {}", self.target_vocab).unwrap();
        writeln!(out, "max_fertility {}", self.max_fertility).unwrap();
        writeln!(out, "bucket_width {BUCKET_WIDTH}").unwrap();
        writeln!(out, "max_len {MAX_SENTENCE_LEN}").unwrap();
        writeln!(out, "\n[p1]\n{:?}", self.p1).unwrap();
        writeln!(out, "\n[fertility]").unwrap();
        for (f, r) in self.fertility.iter().enumerate() {
            row(&mut out, &format!("s{f}"), r);
        }
        writeln!(out, "\n[translation]").unwrap();
        row(&mut out, "NULL", &self.null_translation);
        for (f, r) in self.translation.iter().enumerate() {
            row(&mut out, &format!("s{f}"), r);
        }
        writeln!(out, "\n[distortion]").unwrap();
        for (k, r) in self.distortion.iter().enumerate() {
            let (tri, mb) = (k / NUM_BUCKETS, k % NUM_BUCKETS);
            let mut lb = 0;
            while (lb + 1) * (lb + 2) / 2 <= tri {
                lb += 1;
            }
            row(&mut out, &format!("i{}-l{}-m{}", tri - lb * (lb + 1) / 2, lb, mb), r);
        }
        out
    }

    /// Parses the text format written by [`Self::to_text`] and validates it.
    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| SynthError::Invalid(format!("line {}: {msg}", line + 1));
        let mut section = String::new();
        let (mut sv, mut tv, mut mf) = (None, None, None);
        let mut p1 = None;
        let (mut fert, mut trans, mut dist) = (Vec::new(), Vec::new(), Vec::new());
        let mut null = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.to_string();
                continue;
            }
            let mut parts = line.split_whitespace();
            let head = parts.next().expect("non-empty line");
            let nums = |parts: std::str::SplitWhitespace| {
                parts
                    .map(|s| s.parse::<f64>().map_err(|_| bad(n, &format!("bad number {s:?}"))))
                    .collect::<Result<Vec<f64>>>()
            };
            match section.as_str() {
                "meta" => {
                    let v: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad(n, "expected an integer"))?;
                    match head {
                        "source_vocab" => sv = Some(v),
                        "target_vocab" => tv = Some(v),
                        "max_fertility" => mf = Some(v),
                        "bucket_width" if v == BUCKET_WIDTH => {}
                        "max_len" if v == MAX_SENTENCE_LEN => {}
                        _ => return Err(bad(n, &format!("unsupported meta entry {head} {v}"))),
                    }
                }
                "p1" => p1 = Some(head.parse::<f64>().map_err(|_| bad(n, "bad p1"))?),
                "fertility" => {
                    if head != format!("s{}", fert.len()) {
                        return Err(bad(n, &format!("expected row s{}", fert.len())));
                    }
                    fert.push(nums(parts)?);
                }
                "translation" if head == "NULL" => null = Some(nums(parts)?),
                "translation" => {
                    if head != format!("s{}", trans.len()) {
                        return Err(bad(n, &format!("expected row s{}", trans.len())));
                    }
                    trans.push(nums(parts)?);
                }
                "distortion" => dist.push(nums(parts)?),
                other => return Err(bad(n, &format!("unknown section [{other}]"))),
            }
        }
        let missing = |what: &str| SynthError::Invalid(format!("missing {what}"));
        let params = Self {
            source_vocab: sv.ok_or_else(|| missing("source_vocab"))?,
            target_vocab: tv.ok_or_else(|| missing("target_vocab"))?,
            max_fertility: mf.ok_or_else(|| missing("max_fertility"))?,
            p1: p1.ok_or_else(|| missing("[p1]"))?,
            fertility: fert,
            translation: trans,
            null_translation: null.ok_or_else(|| missing("NULL translation row"))?,
            distortion: dist,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| SynthError::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SynthError::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_text(&text).map_err(|e| SynthError::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

/// Draws one target sentence at temperature `gamma`.
pub fn sample_translation<R: Rng>(params: &Ibm3Params, source: &[usize], gamma: f64, rng: &mut R) -> Result<Sample> {
    if gamma == 1.0 {
        return params.sample(source, rng);
    }
    params.with_temperature(gamma)?.sample(source, rng)
}

/// Knobs for [`make_random_params_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomParamsOptions {
    /// Total Dirichlet concentration per entry; small values give peaked rows.
    pub concentration: f64,
    pub max_fertility: usize,
    pub p1: f64,
    /// Base-measure weights over fertilities `0..=max_fertility`. Empty means
    /// uniform, i.e. a symmetric Dirichlet.
    pub fertility_base: Vec<f64>,
    /// When positive, the distortion base measure decays as
    /// `exp(-locality * |j - i * m / l|)`, favouring monotone alignments.
    /// Zero keeps the symmetric Dirichlet.
    pub distortion_locality: f64,
}

impl Default for RandomParamsOptions {
    fn default() -> Self {
        Self {
            concentration: 1.0,
            max_fertility: DEFAULT_MAX_FERTILITY,
            p1: 0.05,
            fertility_base: Vec::new(),
            distortion_locality: 0.0,
        }
    }
}

/// Dirichlet draw with parameters `concentration * k * base` (`k` = row
/// length), so the row mean is `base`. Sampled in log space so tiny shape
/// parameters do not underflow.
fn dirichlet<R: Rng>(rng: &mut R, concentration: f64, base: &[f64]) -> Vec<f64> {
    let k = base.len() as f64;
    let logs: Vec<f64> = base
        .iter()
        .map(|&b| {
            if b <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let a = concentration * k * b;
            // Gamma(a) = Gamma(a + 1) * U^(1/a)
            let g = Gamma::new(a + 1.0, 1.0).expect("positive shape").sample(rng);
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            g.ln() + u.ln() / a
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

fn normalised(w: &[f64]) -> Vec<f64> {
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

/// Random tables with rows from a symmetric Dirichlet of the given concentration.
pub fn make_random_params(source_vocab: usize, target_vocab: usize, seed: u64, concentration: f64) -> Result<Ibm3Params> {
    make_random_params_with(
        source_vocab,
        target_vocab,
        seed,
        &RandomParamsOptions {
            concentration,
            ..Default::default()
        },
    )
}

pub fn make_random_params_with(
    source_vocab: usize,
    target_vocab: usize,
    seed: u64,
    opts: &RandomParamsOptions,
) -> Result<Ibm3Params> {
    if source_vocab == 0 || target_vocab < 2 {
        return Err(SynthError::Invalid("need at least one source and two target words".into()));
    }
    if !(opts.concentration > 0.0) || !opts.concentration.is_finite() {
        return Err(SynthError::Invalid(format!("concentration {} must be positive", opts.concentration)));
    }
    let nf = opts.max_fertility + 1;
    let fert_base = if opts.fertility_base.is_empty() {
        vec![1.0 / nf as f64; nf]
    } else if opts.fertility_base.len() == nf && opts.fertility_base.iter().all(|&w| w >= 0.0) {
        normalised(&opts.fertility_base)
    } else {
        return Err(SynthError::Invalid(format!("fertility_base needs {nf} non-negative weights")));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = opts.concentration;
    let uniform_t = vec![1.0 / target_vocab as f64; target_vocab];
    let fertility = (0..source_vocab).map(|_| dirichlet(&mut rng, c, &fert_base)).collect();
    let translation = (0..source_vocab).map(|_| dirichlet(&mut rng, c, &uniform_t)).collect();
    let null_translation = dirichlet(&mut rng, c, &uniform_t);
    let distortion = (0..num_distortion_rows())
        .map(|r| {
            let base: Vec<f64> = if opts.distortion_locality > 0.0 {
                let (i, l, m) = row_midpoints(r);
                let centre = (i - 0.5) * m / l;
                normalised(
                    &(0..MAX_SENTENCE_LEN)
                        .map(|j| (-opts.distortion_locality * (j as f64 + 0.5 - centre).abs()).exp())
                        .collect::<Vec<_>>(),
                )
            } else {
                vec![1.0 / MAX_SENTENCE_LEN as f64; MAX_SENTENCE_LEN]
            };
            dirichlet(&mut rng, c, &base)
        })
        .collect();
    let params = Ibm3Params {
        source_vocab,
        target_vocab,
        max_fertility: opts.max_fertility,
        p1: opts.p1,
        fertility,
        translation,
        null_translation,
        distortion,
    };
    params.validate()?;
    Ok(params)
}

/// Mean Shannon entropy (nats) of the translation rows.
pub fn mean_translation_entropy(params: &Ibm3Params) -> f64 {
    let h = |r: &[f64]| -r.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    params.translation.iter().map(|r| h(r)).sum::<f64>() / params.translation.len() as f64
}

/// A sampled parallel corpus of word indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledCorpus {
    pub targets: Vec<Vec<usize>>,
    /// Lines whose every retry came out empty.
    pub degenerate_lines: Vec<usize>,
}

/// Samples one target per source line. Line `k` uses its own ChaCha stream
/// `k` under `seed`, so output does not depend on execution order.
pub fn sample_corpus(params: &Ibm3Params, sources: &[Vec<usize>], gamma: f64, seed: u64, exec: Exec) -> Result<SampledCorpus> {
    let adjusted = params.with_temperature(gamma)?;
    let results = map_indexed(exec, sources.len(), |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        adjusted.sample(&sources[k], &mut rng)
    });
    let mut out = SampledCorpus {
        targets: Vec::with_capacity(sources.len()),
        degenerate_lines: Vec::new(),
    };
    for (k, r) in results.into_iter().enumerate() {
        let s = r?;
        if s.degenerate {
            out.degenerate_lines.push(k);
        }
        out.targets.push(s.words);
    }
    Ok(out)
}

/// Random source sentences: lengths uniform in `[min_len, max_len]`, words
/// from a Zipf law with exponent `zipf`. Line `k` uses stream `k` of `seed`.
pub fn sample_sources(
    source_vocab: usize,
    count: usize,
    min_len: usize,
    max_len: usize,
    zipf: f64,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Vec<usize>>> {
    if source_vocab == 0 || min_len == 0 || min_len > max_len || max_len > MAX_SENTENCE_LEN {
        return Err(SynthError::Invalid(format!(
            "bad source generator settings: vocab {source_vocab}, lengths {min_len}..={max_len}"
        )));
    }
    let weights: Vec<f64> = (0..source_vocab).map(|r| 1.0 / ((r + 1) as f64).powf(zipf)).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| SynthError::Invalid(e.to_string()))?;
    Ok(map_indexed(exec, count, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let len = rng.gen_range(min_len..=max_len);
        (0..len).map(|_| dist.sample(&mut rng)).collect()
    }))
}

pub fn source_word(i: usize) -> String {
    format!("s{i}")
}

pub fn target_word(j: usize) -> String {
    format!("t{j}")
}

/// Space-joined text form of a sentence.
pub fn render(words: &[usize], name: fn(usize) -> String) -> String {
    words.iter().map(|&w| name(w)).collect::<Vec<_>>().join(" ")
}
