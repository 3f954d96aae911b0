//! Utility metrics: ABX discriminability over DTW-aligned sequences, sSIMI
//! rank correlation, word error rate and real-time factor.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{UtteranceRecord, SEGMENT_SAMPLES};
use crate::error::{Error, Result};
use crate::privacy::segment_frames;
use crate::tensor::Tensor;

/// Reference similarity judgments for content-symbol pairs, keyed `"a-b"`.
pub const SSIMI_REFERENCE: &str = include_str!("../data/ssimi_pairs.csv");

/// `(1 - cos(a, b)) / 2`, in `[0, 1]`. A zero-norm frame has no direction;
/// the pair then costs 0.5 and the second value is `true`.
pub fn angular_distance(a: &[f64], b: &[f64]) -> (f64, bool) {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return (0.5, true);
    }
    // one square root keeps self-similarity exactly 1
    let cos = (dot / (na * nb).sqrt()).clamp(-1.0, 1.0);
    ((1.0 - cos) / 2.0, false)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dtw {
    /// Path cost divided by path length.
    pub distance: f64,
    pub cost: f64,
    pub path_len: usize,
    /// Frame pairs whose cost fell back to 0.5 because of a zero-norm frame.
    pub degenerate_pairs: usize,
}

/// Dynamic-time-warping alignment with steps `(i+1, j)`, `(i, j+1)` and
/// `(i+1, j+1)` under angular frame cost. The path of least total cost wins,
/// ties going to the shorter path; its cost is then normalized by its length.
pub fn dtw(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Dtw> {
    if a.rank() != 2 || b.rank() != 2 || a.rows() == 0 || b.rows() == 0 || a.cols() != b.cols() {
        return Err(Error::invalid(format!("dtw needs non-empty sequences of equal width, got {:?} and {:?}", a.shape(), b.shape())));
    }
    let (n, m) = (a.rows(), b.rows());
    let mut degenerate_pairs = 0;
    let mut frame_cost = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let (c, flagged) = angular_distance(a.row(i), b.row(j));
            frame_cost[i * m + j] = c;
            degenerate_pairs += usize::from(flagged);
        }
    }
    // (cost, length) of the best path ending at each cell
    let mut best = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let c = frame_cost[i * m + j];
            if i == 0 && j == 0 {
                best[0] = (c, 1);
                continue;
            }
            let mut prev = (f64::INFINITY, 0);
            for (pi, pj) in [(i.wrapping_sub(1), j), (i, j.wrapping_sub(1)), (i.wrapping_sub(1), j.wrapping_sub(1))] {
                if pi < n && pj < m && better(best[pi * m + pj], prev) {
                    prev = best[pi * m + pj];
                }
            }
            best[i * m + j] = (prev.0 + c, prev.1 + 1);
        }
    }
    let (cost, path_len) = best[n * m - 1];
    Ok(Dtw {
        distance: cost / path_len as f64,
        cost,
        path_len,
        degenerate_pairs,
    })
}

fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

pub fn dtw_distance(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    Ok(dtw(a, b)?.distance)
}

/// One ABX token: a frame sequence with its content category and speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct AbxItem {
    pub frames: Tensor<f64>,
    pub category: usize,
    pub speaker: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbxMode {
    /// a, b and x share one speaker.
    Within,
    /// a and b share a speaker, x comes from another.
    Across,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbxReport {
    pub metric: String,
    pub mode: AbxMode,
    /// Error rate in percent; lower is better.
    pub value: f64,
    pub items: usize,
    pub triples: usize,
    pub category_pairs: usize,
    pub degenerate_pairs: usize,
}

/// Scores every valid `(a, b, x)` with `a, x` in category A (`x != a`) and
/// `b` in category B: 1 if `d(a, x) > d(b, x)`, 0.5 on a tie, else 0. Errors
/// are averaged per ordered category pair, then over pairs, and reported
/// as a percentage.
pub fn abx_score(items: &[AbxItem], mode: AbxMode) -> Result<AbxReport> {
    let mut by_category: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        if item.frames.rank() != 2 || item.frames.rows() == 0 {
            return Err(Error::invalid(format!("abx item {i} has no frames")));
        }
        by_category.entry(item.category).or_default().push(i);
    }
    if by_category.values().filter(|v| v.len() >= 2).count() < 2 {
        return Err(Error::invalid("abx needs two categories with at least two items each"));
    }

    let n = items.len();
    let mut dist = vec![f64::NAN; n * n];
    let mut degenerate_pairs = 0;
    let mut distance = |i: usize, j: usize| -> Result<f64> {
        if dist[i * n + j].is_nan() {
            let d = dtw(&items[i].frames, &items[j].frames)?;
            degenerate_pairs += d.degenerate_pairs;
            dist[i * n + j] = d.distance;
        }
        Ok(dist[i * n + j])
    };

    let mut pair_means = Vec::new();
    let mut triples = 0;
    for (&ca, members_a) in &by_category {
        for (&cb, members_b) in &by_category {
            if ca == cb {
                continue;
            }
            let (mut sum, mut count) = (0.0, 0usize);
            for &a in members_a {
                for &b in members_b {
                    if items[a].speaker != items[b].speaker {
                        continue;
                    }
                    for &x in members_a {
                        if x == a || !speaker_ok(mode, items[a].speaker, items[x].speaker) {
                            continue;
                        }
                        let (dax, dbx) = (distance(a, x)?, distance(b, x)?);
                        sum += abx_error(dax, dbx);
                        count += 1;
                    }
                }
            }
            if count > 0 {
                pair_means.push(sum / count as f64);
                triples += count;
            }
        }
    }
    if pair_means.is_empty() {
        return Err(Error::invalid("no valid abx triple"));
    }
    let value = 100.0 * pair_means.iter().sum::<f64>() / pair_means.len() as f64;
    Ok(AbxReport {
        metric: "abx".into(),
        mode,
        value,
        items: n,
        triples,
        category_pairs: pair_means.len(),
        degenerate_pairs,
    })
}

pub(crate) fn speaker_ok(mode: AbxMode, a: usize, x: usize) -> bool {
    match mode {
        AbxMode::Within => a == x,
        AbxMode::Across => a != x,
    }
}

pub(crate) fn abx_error(dax: f64, dbx: f64) -> f64 {
    if dax > dbx {
        1.0
    } else if dax == dbx {
        0.5
    } else {
        0.0
    }
}

/// One-hot rows for a unit sequence.
pub fn one_hot(units: &[usize], codes: usize) -> Result<Tensor<f64>> {
    let mut data = vec![0.0; units.len() * codes];
    for (t, &u) in units.iter().enumerate() {
        if u >= codes {
            return Err(Error::invalid(format!("unit {u} outside a codebook of {codes}")));
        }
        data[t * codes + u] = 1.0;
    }
    Tensor::new(vec![units.len(), codes], data)
}

/// Cuts an utterance's unit sequence into one ABX item per content segment,
/// frames embedded one-hot. Segments that received no frame are skipped.
pub fn segment_items(units: &[usize], codes: usize, frame_period: usize, frame_offset: usize, record: &UtteranceRecord) -> Result<Vec<AbxItem>> {
    segment_frames(units.len(), frame_period, frame_offset, SEGMENT_SAMPLES, record.content_symbols.len())
        .into_iter()
        .map(|(s, frames)| {
            let seg: Vec<usize> = frames.iter().map(|&t| units[t]).collect();
            Ok(AbxItem {
                frames: one_hot(&seg, codes)?,
                category: record.content_symbols[s],
                speaker: record.speaker_id,
            })
        })
        .collect()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if a.len() != b.len() || na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity needs equal-length non-zero vectors"));
    }
    Ok(dot / (na * nb).sqrt())
}

/// Time average of a `[frames, dim]` sequence.
pub fn mean_pool(frames: &Tensor<f64>) -> Result<Vec<f64>> {
    if frames.rank() != 2 || frames.rows() == 0 {
        return Err(Error::invalid("mean pooling needs at least one frame"));
    }
    let mut out = vec![0.0; frames.cols()];
    for t in 0..frames.rows() {
        for (o, v) in out.iter_mut().zip(frames.row(t)) {
            *o += v;
        }
    }
    let n = frames.rows() as f64;
    Ok(out.into_iter().map(|v| v / n).collect())
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation between model similarities and judgments, x100.
pub fn ssimi_score(model: &[f64], judgments: &[f64]) -> Result<f64> {
    if model.len() != judgments.len() || model.len() < 3 {
        return Err(Error::invalid("ssimi needs at least three paired scores"));
    }
    if model.iter().chain(judgments).any(|v| !v.is_finite()) {
        return Err(Error::invalid("ssimi scores must be finite"));
    }
    let (rm, rj) = (ranks(model), ranks(judgments));
    let n = rm.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut cov, mut vm, mut vj) = (0.0, 0.0, 0.0);
    for (a, b) in rm.iter().zip(&rj) {
        cov += (a - mean) * (b - mean);
        vm += (a - mean) * (a - mean);
        vj += (b - mean) * (b - mean);
    }
    if vm == 0.0 || vj == 0.0 {
        return Err(Error::invalid("rank correlation is undefined for constant scores"));
    }
    Ok(100.0 * cov / (vm * vj).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimiPair {
    pub pair_id: String,
    pub judgment: f64,
}

impl SimiPair {
    /// The two content symbols of an `"a-b"` identifier.
    pub fn symbols(&self) -> Result<(usize, usize)> {
        let parse = |s: &str| s.trim().parse::<usize>().ok();
        match self.pair_id.split_once('-') {
            Some((a, b)) => parse(a).zip(parse(b)).ok_or_else(|| Error::invalid(format!("bad pair id {:?}", self.pair_id))),
            None => Err(Error::invalid(format!("bad pair id {:?}", self.pair_id))),
        }
    }
}

pub fn parse_simi_pairs(text: &str) -> Result<Vec<SimiPair>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::invalid(format!("similarity table: {e}"))))
        .collect()
}

pub fn load_simi_pairs(path: impl AsRef<Path>) -> Result<Vec<SimiPair>> {
    let path = path.as_ref();
    parse_simi_pairs(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimiReport {
    pub metric: String,
    pub value: f64,
    pub pairs: usize,
}

/// Scores pooled per-symbol embeddings against the judgment table. Pairs
/// naming a symbol without an embedding are skipped.
pub fn ssimi_report(embeddings: &BTreeMap<usize, Vec<f64>>, pairs: &[SimiPair]) -> Result<SimiReport> {
    let (mut model, mut human) = (Vec::new(), Vec::new());
    for p in pairs {
        let (a, b) = p.symbols()?;
        if let (Some(ea), Some(eb)) = (embeddings.get(&a), embeddings.get(&b)) {
            model.push(cosine_similarity(ea, eb)?);
            human.push(p.judgment);
        }
    }
    Ok(SimiReport {
        metric: "ssimi".into(),
        value: ssimi_score(&model, &human)?,
        pairs: model.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Minimal word-level edit script. Among scripts of equal total, the one
/// found first by the substitution, deletion, insertion preference is kept.
pub fn edit_counts<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut table = vec![EditCounts::default(); (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 1..=n {
        table[at(i, 0)] = EditCounts { deletions: i, ..Default::default() };
    }
    for j in 1..=m {
        table[at(0, j)] = EditCounts { insertions: j, ..Default::default() };
    }
    for i in 1..=n {
        for j in 1..=m {
            let mut diag = table[at(i - 1, j - 1)];
            if reference[i - 1].as_ref() != hypothesis[j - 1].as_ref() {
                diag.substitutions += 1;
            }
            let mut del = table[at(i - 1, j)];
            del.deletions += 1;
            let mut ins = table[at(i, j - 1)];
            ins.insertions += 1;
            let mut best = diag;
            for c in [del, ins] {
                if c.total() < best.total() {
                    best = c;
                }
            }
            table[at(i, j)] = best;
        }
    }
    table[at(n, m)]
}

/// `100 * edits / len(reference)`; may exceed 100.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("word error rate needs a non-empty reference"));
    }
    Ok(100.0 * edit_counts(reference, hypothesis).total() as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub metric: String,
    pub value: f64,
    pub reference_words: usize,
    pub edits: EditCounts,
    pub lines: usize,
}

/// Corpus-level WER over line-aligned transcripts: all edits over all
/// reference words.
pub fn wer_report(reference: &str, hypothesis: &str) -> Result<WerReport> {
    let refs: Vec<&str> = reference.lines().collect();
    let hyps: Vec<&str> = hypothesis.lines().collect();
    if refs.len() != hyps.len() {
        return Err(Error::invalid(format!("{} reference lines but {} hypothesis lines", refs.len(), hyps.len())));
    }
    let mut edits = EditCounts::default();
    let mut words = 0;
    for (r, h) in refs.iter().zip(&hyps) {
        let r: Vec<&str> = r.split_whitespace().collect();
        let h: Vec<&str> = h.split_whitespace().collect();
        let e = edit_counts(&r, &h);
        edits.substitutions += e.substitutions;
        edits.insertions += e.insertions;
        edits.deletions += e.deletions;
        words += r.len();
    }
    if words == 0 {
        return Err(Error::invalid("word error rate needs a non-empty reference"));
    }
    Ok(WerReport {
        metric: "wer".into(),
        value: 100.0 * edits.total() as f64 / words as f64,
        reference_words: words,
        edits,
        lines: refs.len(),
    })
}

/// Real-time factor: processing seconds per second of audio.
pub fn rtf(cpu_seconds: f64, audio_seconds: f64) -> Result<f64> {
    if !(audio_seconds > 0.0) {
        return Err(Error::invalid("real-time factor needs a positive audio duration"));
    }
    Ok(cpu_seconds / audio_seconds)
}
