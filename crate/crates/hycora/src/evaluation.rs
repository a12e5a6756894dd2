//! Native BLEU/ROUGE metrics, per-role evaluation reports, 2-D PCA export
//! of role-specific matrices, and the catchphrase-probe accuracy that makes
//! role learning directly measurable on the synthetic corpus.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{Decoding, HyperModel};
use crate::corpus::{Dataset, RoleProfile, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::prompt_text;

const BLEU_EPS: f64 = 1e-9;

/// Whitespace tokens for text with spaces, characters otherwise.
pub fn metric_tokens(s: &str) -> Vec<String> {
    if s.chars().any(|c| c.is_whitespace()) {
        s.split_whitespace().map(|t| t.to_string()).collect()
    } else {
        s.chars().map(|c| c.to_string()).collect()
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut map = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return map;
    }
    for i in 0..=tokens.len() - n {
        *map.entry(&tokens[i..i + n]).or_insert(0) += 1;
    }
    map
}

/// Modified n-gram precision counts: (clipped matches, hypothesis n-grams).
fn clipped_counts(hyp: &[String], refs: &[Vec<String>], n: usize) -> (usize, usize) {
    let hyp_counts = ngram_counts(hyp, n);
    let ref_counts: Vec<BTreeMap<&[String], usize>> =
        refs.iter().map(|r| ngram_counts(r, n)).collect();
    let mut matched = 0;
    let mut total = 0;
    for (gram, count) in hyp_counts {
        total += count;
        let max_ref = ref_counts
            .iter()
            .map(|rc| rc.get(gram).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        matched += count.min(max_ref);
    }
    (matched, total)
}

/// BLEU with up to `max_n`-gram precisions, add-epsilon smoothing on zero
/// higher-order counts, and the brevity penalty against the closest
/// reference length.
pub fn bleu(hypothesis: &str, references: &[&str], max_n: usize) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::config("bleu needs at least one reference"));
    }
    let max_n = max_n.max(1);
    let hyp = metric_tokens(hypothesis);
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| metric_tokens(r)).collect();

    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (matched, total) = clipped_counts(&hyp, &refs, n);
        let p = if total == 0 {
            0.0
        } else {
            matched as f64 / total as f64
        };
        if n == 1 && p == 0.0 {
            return Ok(0.0);
        }
        let p = if p == 0.0 { BLEU_EPS } else { p };
        log_sum += p.ln();
    }
    let precision_term = (log_sum / max_n as f64).exp();

    let hyp_len = hyp.len() as f64;
    let ref_len = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| {
            let diff = (l as i64 - hyp.len() as i64).abs();
            (diff, l)
        })
        .unwrap_or(0) as f64;
    let bp = (1.0 - ref_len / hyp_len).min(0.0).exp();
    Ok((precision_term * bp).clamp(0.0, 1.0))
}

/// F1 over n-gram overlap.
pub fn rouge_n(hypothesis: &str, reference: &str, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::config("rouge_n needs n >= 1"));
    }
    let hyp = metric_tokens(hypothesis);
    let rf = metric_tokens(reference);
    if hyp.is_empty() && rf.is_empty() {
        return Ok(1.0);
    }
    let hyp_grams = ngram_counts(&hyp, n);
    let ref_grams = ngram_counts(&rf, n);
    let hyp_total: usize = hyp_grams.values().sum();
    let ref_total: usize = ref_grams.values().sum();
    if hyp_total == 0 || ref_total == 0 {
        return Ok(if hyp_total == ref_total { 1.0 } else { 0.0 });
    }
    let mut matched = 0usize;
    for (gram, count) in &hyp_grams {
        matched += (*count).min(ref_grams.get(gram).copied().unwrap_or(0));
    }
    let p = matched as f64 / hyp_total as f64;
    let r = matched as f64 / ref_total as f64;
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for i in 0..a.len() {
        let mut prev = 0;
        for j in 0..b.len() {
            let tmp = dp[j + 1];
            dp[j + 1] = if a[i] == b[j] {
                prev + 1
            } else {
                dp[j + 1].max(dp[j])
            };
            prev = tmp;
        }
    }
    dp[b.len()]
}

/// F1 from longest-common-subsequence precision/recall.
pub fn rouge_l(hypothesis: &str, reference: &str) -> Result<f64> {
    let hyp = metric_tokens(hypothesis);
    let rf = metric_tokens(reference);
    if hyp.is_empty() && rf.is_empty() {
        return Ok(1.0);
    }
    if hyp.is_empty() || rf.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(&hyp, &rf) as f64;
    let p = lcs / hyp.len() as f64;
    let r = lcs / rf.len() as f64;
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub bleu: f64,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
}

impl MetricScore {
    pub fn of(hypothesis: &str, reference: &str, max_n: usize) -> Result<MetricScore> {
        Ok(MetricScore {
            bleu: bleu(hypothesis, &[reference], max_n)?,
            rouge_1: rouge_n(hypothesis, reference, 1)?,
            rouge_2: rouge_n(hypothesis, reference, 2)?,
            rouge_l: rouge_l(hypothesis, reference)?,
        })
    }

    fn add(&mut self, other: &MetricScore) {
        self.bleu += other.bleu;
        self.rouge_1 += other.rouge_1;
        self.rouge_2 += other.rouge_2;
        self.rouge_l += other.rouge_l;
    }

    fn scale(&self, s: f64) -> MetricScore {
        MetricScore {
            bleu: self.bleu * s,
            rouge_1: self.rouge_1 * s,
            rouge_2: self.rouge_2 * s,
            rouge_l: self.rouge_l * s,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCell {
    pub score: MetricScore,
    pub n: usize,
    /// Samples whose generation failed; they score 0 and are flagged here.
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: BTreeMap<(usize, Split), EvalCell>,
    /// Arithmetic mean of the per-role cell scores, per split.
    pub macros: BTreeMap<Split, MetricScore>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("role_id,split,bleu,rouge1,rouge2,rougeL,n\n");
        for ((role, split), cell) in &self.cells {
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{:.4},{}\n",
                role,
                split.as_str(),
                cell.score.bleu,
                cell.score.rouge_1,
                cell.score.rouge_2,
                cell.score.rouge_l,
                cell.n
            ));
        }
        for (split, m) in &self.macros {
            out.push_str(&format!(
                "macro,{},{:.4},{:.4},{:.4},{:.4},{}\n",
                split.as_str(),
                m.bleu,
                m.rouge_1,
                m.rouge_2,
                m.rouge_l,
                self.cells
                    .iter()
                    .filter(|((_, s), _)| s == split)
                    .map(|(_, c)| c.n)
                    .sum::<usize>()
            ));
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:<9} {:>7} {:>8} {:>8} {:>8} {:>5}\n",
            "role", "split", "bleu", "rouge1", "rouge2", "rougeL", "n"
        ));
        for ((role, split), cell) in &self.cells {
            out.push_str(&format!(
                "{:<8} {:<9} {:>7.4} {:>8.4} {:>8.4} {:>8.4} {:>5}\n",
                role,
                split.as_str(),
                cell.score.bleu,
                cell.score.rouge_1,
                cell.score.rouge_2,
                cell.score.rouge_l,
                cell.n
            ));
        }
        for (split, m) in &self.macros {
            out.push_str(&format!(
                "{:<8} {:<9} {:>7.4} {:>8.4} {:>8.4} {:>8.4}\n",
                "macro",
                split.as_str(),
                m.bleu,
                m.rouge_1,
                m.rouge_2,
                m.rouge_l
            ));
        }
        out
    }

    /// Mean of the split macros (balanced across splits).
    pub fn overall(&self) -> MetricScore {
        if self.macros.is_empty() {
            return MetricScore::default();
        }
        let mut sum = MetricScore::default();
        for m in self.macros.values() {
            sum.add(m);
        }
        sum.scale(1.0 / self.macros.len() as f64)
    }
}

/// Worker-thread cap: HYCORA_THREADS when set, else available parallelism.
pub fn worker_threads() -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var("HYCORA_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|n| *n >= 1).unwrap_or(available),
        Err(_) => available,
    }
    .min(available.max(1))
}

/// Chunked parallel map with deterministic output order.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut results: Vec<Vec<R>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        for h in handles {
            results.push(h.join().expect("worker panicked"));
        }
    });
    results.into_iter().flatten().collect()
}

/// Generate one hypothesis per sample, score against the gold answer, and
/// aggregate per (role, split). Deterministic under greedy decoding.
pub fn evaluate(
    model: &HyperModel,
    dataset: &Dataset,
    decoding: &Decoding,
    max_new_tokens: usize,
    max_n: usize,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::config("cannot evaluate an empty dataset"));
    }
    let threads = worker_threads();
    let scored: Vec<(usize, Split, MetricScore, bool)> = parallel_map(
        &dataset.samples,
        threads,
        |sample| -> (usize, Split, MetricScore, bool) {
            let prompt = prompt_text(&sample.question);
            match model.generate(&prompt, sample.role_id, max_new_tokens, decoding) {
                Ok(hyp) => {
                    let hyp = hyp.trim();
                    let score = MetricScore::of(hyp, &sample.answer, max_n)
                        .unwrap_or_default();
                    (sample.role_id, sample.split, score, false)
                }
                Err(_) => (sample.role_id, sample.split, MetricScore::default(), true),
            }
        },
    );

    let mut cells: BTreeMap<(usize, Split), EvalCell> = BTreeMap::new();
    for (role, split, score, failed) in scored {
        let cell = cells.entry((role, split)).or_insert_with(|| EvalCell {
            score: MetricScore::default(),
            n: 0,
            failures: 0,
        });
        cell.score.add(&score);
        cell.n += 1;
        if failed {
            cell.failures += 1;
        }
    }
    for cell in cells.values_mut() {
        let inv = 1.0 / cell.n as f64;
        cell.score = cell.score.scale(inv);
    }

    let mut macros = BTreeMap::new();
    for split in [Split::General, Split::Specific] {
        let per_role: Vec<&EvalCell> = cells
            .iter()
            .filter(|((_, s), _)| *s == split)
            .map(|(_, c)| c)
            .collect();
        if per_role.is_empty() {
            continue;
        }
        let mut sum = MetricScore::default();
        for c in &per_role {
            sum.add(&c.score);
        }
        macros.insert(split, sum.scale(1.0 / per_role.len() as f64));
    }
    Ok(EvalReport { cells, macros })
}

// ── PCA ──────────────────────────────────────────────────────────────

/// Jacobi eigendecomposition of a symmetric matrix. Returns (eigenvalues,
/// eigenvectors as columns), sorted by eigenvalue descending.
fn jacobi_eigen(sym: &Tensor) -> (Vec<f64>, Tensor) {
    let n = sym.rows();
    let mut a = sym.clone();
    let mut v = Tensor::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.at(p, q) * a.at(p, q);
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.at(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a.at(p, p);
                let aqq = a.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a.at(i, p);
                    let aiq = a.at(i, q);
                    a.set(i, p, c * aip - s * aiq);
                    a.set(i, q, s * aip + c * aiq);
                }
                for i in 0..n {
                    let api = a.at(p, i);
                    let aqi = a.at(q, i);
                    a.set(p, i, c * api - s * aqi);
                    a.set(q, i, s * api + c * aqi);
                }
                for i in 0..n {
                    let vip = v.at(i, p);
                    let viq = v.at(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.at(j, j).partial_cmp(&a.at(i, i)).expect("finite eigenvalues"));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.at(i, i)).collect();
    let mut vectors = Tensor::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        for row in 0..n {
            vectors.set(row, col, v.at(row, i));
        }
    }
    (eigenvalues, vectors)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pca2d {
    /// One (x, y) per input row.
    pub coords: Vec<(f64, f64)>,
    /// Variance captured by each of the two axes.
    pub eigenvalues: (f64, f64),
    /// Fewer than two directions carried variance; y is zero-filled.
    pub rank_deficient: bool,
}

/// Project rows onto the top-2 principal directions of their covariance.
/// Axis signs are fixed by forcing each direction's largest-magnitude
/// loading positive.
pub fn pca_2d(rows: &Tensor) -> Result<Pca2d> {
    let n = rows.rows();
    let d = rows.cols();
    if n < 2 || d < 2 {
        return Err(Error::config("pca_2d needs >= 2 rows and >= 2 columns"));
    }
    // center columns
    let mut centered = rows.clone();
    for c in 0..d {
        let mean: f64 = (0..n).map(|r| rows.at(r, c)).sum::<f64>() / n as f64;
        for r in 0..n {
            centered.set(r, c, rows.at(r, c) - mean);
        }
    }

    // principal directions in d-space
    let mut directions: Vec<Vec<f64>> = Vec::new();
    let mut eigenvalues: Vec<f64> = Vec::new();
    if n <= d {
        // Gram trick: eigenvectors of Xc·Xcᵀ map to directions Xcᵀ·u/√λ
        let gram = centered.matmul(&centered, crate::tensor::MatMul::NT);
        let (vals, vecs) = jacobi_eigen(&gram);
        for k in 0..2.min(n) {
            let lam = vals[k].max(0.0);
            eigenvalues.push(lam / n as f64);
            let mut dir = vec![0.0; d];
            if lam > 1e-12 {
                for c in 0..d {
                    let mut s = 0.0;
                    for r in 0..n {
                        s += centered.at(r, c) * vecs.at(r, k);
                    }
                    dir[c] = s / lam.sqrt();
                }
            }
            directions.push(dir);
        }
    } else {
        let cov = centered
            .matmul(&centered, crate::tensor::MatMul::TN)
            .scale(1.0 / n as f64);
        let (vals, vecs) = jacobi_eigen(&cov);
        for k in 0..2 {
            eigenvalues.push(vals[k].max(0.0));
            directions.push((0..d).map(|r| vecs.at(r, k)).collect());
        }
    }
    while directions.len() < 2 {
        directions.push(vec![0.0; d]);
        eigenvalues.push(0.0);
    }

    // sign convention
    for dir in directions.iter_mut() {
        let (mut best, mut best_abs) = (0usize, 0.0f64);
        for (i, v) in dir.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if dir[best] < 0.0 {
            for v in dir.iter_mut() {
                *v = -*v;
            }
        }
    }

    let scale = eigenvalues[0].max(1.0);
    let rank_deficient = eigenvalues[1] <= 1e-12 * scale;
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|r| {
            let x: f64 = (0..d).map(|c| centered.at(r, c) * directions[0][c]).sum();
            let y = if rank_deficient {
                0.0
            } else {
                (0..d).map(|c| centered.at(r, c) * directions[1][c]).sum()
            };
            (x, y)
        })
        .collect();
    Ok(Pca2d {
        coords,
        eigenvalues: (eigenvalues[0], eigenvalues[1]),
        rank_deficient,
    })
}

/// Mean inter-role centroid distance divided by mean intra-role spread
/// (distance of points to their role centroid). Higher = better separated.
pub fn separation_ratio(coords: &[(f64, f64)], roles: &[usize]) -> f64 {
    assert_eq!(coords.len(), roles.len());
    let mut by_role: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for (c, r) in coords.iter().zip(roles) {
        by_role.entry(*r).or_default().push(*c);
    }
    let centroids: BTreeMap<usize, (f64, f64)> = by_role
        .iter()
        .map(|(r, pts)| {
            let n = pts.len() as f64;
            let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
            (*r, (cx, cy))
        })
        .collect();
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();

    let mut intra = 0.0;
    let mut intra_n = 0usize;
    for (r, pts) in &by_role {
        for p in pts {
            intra += dist(*p, centroids[r]);
            intra_n += 1;
        }
    }
    let intra = intra / intra_n as f64;

    let keys: Vec<usize> = centroids.keys().copied().collect();
    let mut inter = 0.0;
    let mut inter_n = 0usize;
    for i in 0..keys.len() {
        for j in (i + 1)..keys.len() {
            inter += dist(centroids[&keys[i]], centroids[&keys[j]]);
            inter_n += 1;
        }
    }
    let inter = if inter_n == 0 { 0.0 } else { inter / inter_n as f64 };
    if intra == 0.0 {
        f64::INFINITY
    } else {
        inter / intra
    }
}

// ── role-signature probes ────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Probe {
    pub question: String,
    pub role_id: usize,
}

/// Probe set: the general-split questions of a (held-out) dataset.
pub fn build_probes(dataset: &Dataset) -> Vec<Probe> {
    dataset
        .samples
        .iter()
        .filter(|s| s.split == Split::General)
        .map(|s| Probe {
            question: s.question.clone(),
            role_id: s.role_id,
        })
        .collect()
}

/// Fraction of probes whose greedy generation contains the queried role's
/// catchphrase and no other role's.
pub fn role_signature_accuracy(
    model: &HyperModel,
    probes: &[Probe],
    profiles: &[RoleProfile],
    max_new_tokens: usize,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::config("empty probe set"));
    }
    let threads = worker_threads();
    let hits: Vec<bool> = parallel_map(probes, threads, |probe| {
        let prompt = prompt_text(&probe.question);
        let gen = model
            .generate(&prompt, probe.role_id, max_new_tokens, &Decoding::Greedy)
            .unwrap_or_default();
        let own = profiles[probe.role_id]
            .catchphrases
            .iter()
            .any(|p| gen.contains(p.as_str()));
        let foreign = profiles
            .iter()
            .filter(|p| p.role_id != probe.role_id)
            .any(|p| p.catchphrases.iter().any(|c| gen.contains(c.as_str())));
        own && !foreign
    });
    Ok(hits.iter().filter(|h| **h).count() as f64 / probes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bleu_identity_is_one() {
        let s = "the quick brown fox jumps";
        assert!((bleu(s, &[s], 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_disjoint_is_zero() {
        assert_eq!(bleu("aa bb cc", &["xx yy zz"], 4).unwrap(), 0.0);
    }

    #[test]
    fn bleu_hand_computed_brevity_case() {
        // p1 = 1, p2 = 1, BP = exp(1 − 3/2)
        let b = bleu("the cat", &["the cat sat"], 2).unwrap();
        let expected = (1.0f64 - 1.5).exp();
        assert!((b - expected).abs() < 1e-9);
        assert!((b - 0.6065306597).abs() < 1e-6);
    }

    #[test]
    fn bleu_empty_hypothesis_is_zero() {
        assert_eq!(bleu("", &["anything here"], 4).unwrap(), 0.0);
        assert!(bleu("a", &[], 4).is_err());
    }

    #[test]
    fn bleu_character_mode_without_spaces() {
        let b = bleu("abcd", &["abcd"], 2).unwrap();
        assert!((b - 1.0).abs() < 1e-12);
        assert!(bleu("abcd", &["abce"], 1).unwrap() > 0.0);
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        let s = "one two three four";
        assert_eq!(rouge_n(s, s, 1).unwrap(), 1.0);
        assert_eq!(rouge_n(s, s, 2).unwrap(), 1.0);
        assert_eq!(rouge_l(s, s).unwrap(), 1.0);
        assert_eq!(rouge_n("aa bb", "cc dd", 1).unwrap(), 0.0);
        assert_eq!(rouge_l("aa bb", "cc dd").unwrap(), 0.0);
    }

    #[test]
    fn rouge_l_hand_computed() {
        // LCS = 3, P = 1, R = 0.5 → F1 = 2/3
        let f1 = rouge_l("the cat sat", "the cat sat on the mat").unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-9);
        assert!((f1 - 0.6667).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn metrics_bounded_in_unit_interval(h in "[a-d ]{0,20}", r in "[a-d ]{1,20}") {
            let b = bleu(&h, &[r.as_str()], 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
            for n in 1..=3 {
                let s = rouge_n(&h, &r, n).unwrap();
                prop_assert!((0.0..=1.0).contains(&s));
            }
            let l = rouge_l(&h, &r).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
        }

        #[test]
        fn rouge_self_identity(a in "[a-e ]{1,30}") {
            prop_assume!(!metric_tokens(&a).is_empty());
            prop_assert_eq!(rouge_n(&a, &a, 1).unwrap(), 1.0);
            prop_assert_eq!(rouge_l(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn pca_identity_on_2d_diagonal_data() {
        // already 2-D, centered, diagonal covariance with var(x) > var(y)
        let rows = Tensor::from_vec(
            4,
            2,
            vec![2.0, 1.0, -2.0, -1.0, 2.0, -1.0, -2.0, 1.0],
        );
        let pca = pca_2d(&rows).unwrap();
        for (i, (x, y)) in pca.coords.iter().enumerate() {
            assert!((x.abs() - 2.0).abs() < 1e-9, "row {i}");
            assert!((y.abs() - 1.0).abs() < 1e-9, "row {i}");
        }
        // sign convention: largest loading positive → x follows column 0
        assert!(pca.coords[0].0 > 0.0);
    }

    #[test]
    fn pca_identical_rows_give_zeros() {
        let rows = Tensor::from_vec(3, 4, vec![1.0, 2.0, 3.0, 4.0].repeat(3));
        let pca = pca_2d(&rows).unwrap();
        assert!(pca.rank_deficient);
        for (x, y) in pca.coords {
            assert!(x.abs() < 1e-9);
            assert_eq!(y, 0.0);
        }
    }

    #[test]
    fn pca_retained_variance_matches_top_two_eigenvalues() {
        let mut rng = crate::rng::rng_for(3, "pca");
        let rows = Tensor::randn(10, 50, 1.0, &mut rng);
        let pca = pca_2d(&rows).unwrap();
        let n = rows.rows() as f64;
        let var_x: f64 = pca.coords.iter().map(|c| c.0 * c.0).sum::<f64>() / n;
        let var_y: f64 = pca.coords.iter().map(|c| c.1 * c.1).sum::<f64>() / n;
        assert!((var_x - pca.eigenvalues.0).abs() < 1e-8 * pca.eigenvalues.0.max(1.0));
        assert!((var_y - pca.eigenvalues.1).abs() < 1e-8 * pca.eigenvalues.1.max(1.0));
        assert!(pca.eigenvalues.0 >= pca.eigenvalues.1);
        // projections are uncorrelated
        let cov_xy: f64 = pca.coords.iter().map(|c| c.0 * c.1).sum::<f64>() / n;
        assert!(cov_xy.abs() < 1e-8);
    }

    #[test]
    fn pca_beats_random_projection_on_clustered_data() {
        // three tight clusters in 20-D
        let mut rng = crate::rng::rng_for(7, "clusters");
        let d = 20;
        let mut data = Vec::new();
        let centers = [3.0, -3.0, 9.0];
        for (ci, &c) in centers.iter().enumerate() {
            for _ in 0..6 {
                for j in 0..d {
                    let base = if j % 3 == ci { c } else { 0.0 };
                    data.push(base + Tensor::randn(1, 1, 0.1, &mut rng).data()[0]);
                }
            }
        }
        let rows = Tensor::from_vec(18, d, data);
        let pca = pca_2d(&rows).unwrap();

        let mut rng2 = crate::rng::rng_for(8, "randproj");
        let proj = Tensor::randn(d, 2, 1.0, &mut rng2);
        let rand_coords: Vec<(f64, f64)> = (0..18)
            .map(|r| {
                let x: f64 = (0..d).map(|c| rows.at(r, c) * proj.at(c, 0)).sum();
                let y: f64 = (0..d).map(|c| rows.at(r, c) * proj.at(c, 1)).sum();
                (x, y)
            })
            .collect();

        // rank agreement of pairwise distances with the original space
        let orig_d = |a: usize, b: usize| -> f64 {
            (0..d).map(|c| (rows.at(a, c) - rows.at(b, c)).powi(2)).sum()
        };
        let proj_d = |coords: &[(f64, f64)], a: usize, b: usize| -> f64 {
            (coords[a].0 - coords[b].0).powi(2) + (coords[a].1 - coords[b].1).powi(2)
        };
        let concordance = |coords: &[(f64, f64)]| -> f64 {
            let mut pairs = Vec::new();
            for a in 0..18 {
                for b in (a + 1)..18 {
                    pairs.push((orig_d(a, b), proj_d(coords, a, b)));
                }
            }
            let mut agree = 0usize;
            let mut total = 0usize;
            for i in 0..pairs.len() {
                for j in (i + 1)..pairs.len() {
                    let s1 = (pairs[i].0 - pairs[j].0).signum();
                    let s2 = (pairs[i].1 - pairs[j].1).signum();
                    if s1 != 0.0 {
                        total += 1;
                        if s1 == s2 {
                            agree += 1;
                        }
                    }
                }
            }
            agree as f64 / total as f64
        };
        assert!(concordance(&pca.coords) > concordance(&rand_coords));
    }

    #[test]
    fn separation_ratio_behaves() {
        // two tight clusters far apart
        let coords = [
            (0.0, 0.0),
            (0.1, 0.0),
            (10.0, 0.0),
            (10.1, 0.0),
        ];
        let roles = [0, 0, 1, 1];
        assert!(separation_ratio(&coords, &roles) > 50.0);
        // interleaved points
        let coords2 = [(0.0, 0.0), (10.0, 0.0), (0.1, 0.0), (10.1, 0.0)];
        assert!(separation_ratio(&coords2, &roles) < 1.0);
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<usize> = (0..37).collect();
        let out = parallel_map(&items, 4, |x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
