//! Cosine similarity of sentence pairs and two tests of whether the
//! transparent and opaque verb groups differ.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use itertools::Itertools;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledPair;
use crate::error::{Error, Result};
use crate::io;
use crate::opacity::{OpacityPair, Shape, VerbClass, VerbInventory};
use crate::rng;

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Mismatch {
            what: "cosine",
            detail: format!("vector lengths {} and {}", u.len(), v.len()),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::config("cosine of a zero vector"));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerbGroupStats {
    pub verb: String,
    pub class: VerbClass,
    pub mean_cosine: f64,
    pub n_pairs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    ExactPermutation,
    MonteCarloPermutation,
    Bootstrap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub observed_stat: f64,
    pub p_two_sided: f64,
    pub p_one_sided: f64,
    pub method: TestMethod,
    pub n_resamples: usize,
    pub seed: Option<u64>,
}

pub const EXACT_LIMIT: u128 = 1_000_000;
pub const MONTE_CARLO_DRAWS: usize = 100_000;
const TIE_EPS: f64 = 1e-12;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn split_classes(groups: &[VerbGroupStats]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut t = Vec::new();
    let mut o = Vec::new();
    for g in groups {
        if !g.mean_cosine.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                detail: format!("mean cosine of {:?}", g.verb),
            });
        }
        match g.class {
            VerbClass::Transparent => t.push(g.mean_cosine),
            VerbClass::Opaque => o.push(g.mean_cosine),
        }
    }
    if t.len() < 2 || o.len() < 2 {
        return Err(Error::config(format!(
            "need at least two verbs per class, got {} transparent and {} opaque",
            t.len(),
            o.len()
        )));
    }
    Ok((t, o))
}

/// Transparent mean minus opaque mean.
pub fn group_statistic(groups: &[VerbGroupStats]) -> Result<f64> {
    let (t, o) = split_classes(groups)?;
    Ok(mean(&t) - mean(&o))
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Permutation test over class relabelings that keep the class sizes.
/// Enumerates every relabeling when there are at most [`EXACT_LIMIT`],
/// otherwise draws [`MONTE_CARLO_DRAWS`] random ones (plus the observed).
pub fn permutation_test(groups: &[VerbGroupStats], seed: u64) -> Result<SignificanceResult> {
    let (t, o) = split_classes(groups)?;
    let values: Vec<f64> = t.iter().chain(&o).copied().collect();
    let (n, k) = (values.len(), t.len());
    let total: f64 = values.iter().sum();
    let stat_of = |sum_t: f64| sum_t / k as f64 - (total - sum_t) / (n - k) as f64;
    let observed = stat_of(t.iter().sum());
    let tol = TIE_EPS * (1.0 + observed.abs());
    let mut two = 0usize;
    let mut one = 0usize;
    let mut count = |s: f64| {
        if s.abs() >= observed.abs() - tol {
            two += 1;
        }
        if s >= observed - tol {
            one += 1;
        }
    };
    let (method, resamples, seed) = if binomial(n, k) <= EXACT_LIMIT {
        let mut m = 0;
        for idx in (0..n).combinations(k) {
            count(stat_of(idx.iter().map(|&i| values[i]).sum()));
            m += 1;
        }
        (TestMethod::ExactPermutation, m, None)
    } else {
        let mut r = rng::stream(seed, 0x9e);
        let all: Vec<usize> = (0..n).collect();
        count(observed);
        for _ in 0..MONTE_CARLO_DRAWS {
            let s: f64 = all.choose_multiple(&mut r, k).map(|&i| values[i]).sum();
            count(stat_of(s));
        }
        (TestMethod::MonteCarloPermutation, MONTE_CARLO_DRAWS + 1, Some(seed))
    };
    Ok(SignificanceResult {
        observed_stat: observed,
        p_two_sided: two as f64 / resamples as f64,
        p_one_sided: one as f64 / resamples as f64,
        method,
        n_resamples: resamples,
        seed,
    })
}

/// Bootstrap over verbs: each class is resampled with replacement and the
/// statistic recomputed. The two-sided p is twice the fraction of bootstrap
/// statistics on the other side of zero from the observed one, capped at 1.
/// The one-sided p is the fraction that are not above zero.
pub fn bootstrap_test(groups: &[VerbGroupStats], iterations: usize, seed: u64) -> Result<SignificanceResult> {
    if iterations == 0 {
        return Err(Error::config("bootstrap needs at least one iteration"));
    }
    let (t, o) = split_classes(groups)?;
    let observed = mean(&t) - mean(&o);
    let mut r = rng::stream(seed, 0xb0);
    let resample = |x: &[f64], r: &mut rng::SeededRng| -> f64 {
        (0..x.len()).map(|_| x[r.random_range(0..x.len())]).sum::<f64>() / x.len() as f64
    };
    let mut not_positive = 0usize;
    let mut not_negative = 0usize;
    for _ in 0..iterations {
        let s = resample(&t, &mut r) - resample(&o, &mut r);
        if s <= 0.0 {
            not_positive += 1;
        }
        if s >= 0.0 {
            not_negative += 1;
        }
    }
    let frac = |c: usize| c as f64 / iterations as f64;
    let p_two = if observed > 0.0 {
        (2.0 * frac(not_positive)).min(1.0)
    } else if observed < 0.0 {
        (2.0 * frac(not_negative)).min(1.0)
    } else {
        1.0
    };
    Ok(SignificanceResult {
        observed_stat: observed,
        p_two_sided: p_two,
        p_one_sided: frac(not_positive),
        method: TestMethod::Bootstrap,
        n_resamples: iterations,
        seed: Some(seed),
    })
}

/// Maps sentences to fixed-size vectors.
pub trait SentenceEncoder {
    fn encode(&self, sentences: &[&str]) -> Result<Vec<Vec<f64>>>;
}

/// Precomputed sentence vectors, one JSON object per line with fields
/// `sentence` and `vector`.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    vectors: HashMap<String, Vec<f64>>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRow {
    sentence: String,
    vector: Vec<f64>,
}

pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";

impl EmbeddingTable {
    pub fn new(rows: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut t = EmbeddingTable::default();
        for (s, v) in rows {
            if t.dim == 0 {
                t.dim = v.len();
            }
            if v.is_empty() || v.len() != t.dim {
                return Err(Error::Mismatch {
                    what: "embedding",
                    detail: format!("vector for {s:?} has length {}", v.len()),
                });
            }
            t.vectors.insert(s, v);
        }
        Ok(t)
    }

    /// Reads a table file, or `embeddings.jsonl` inside a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(EMBEDDINGS_FILE) } else { path.to_path_buf() };
        let rows: Vec<EmbeddingRow> = io::read_jsonl(&file)?;
        Self::new(rows.into_iter().map(|r| (r.sentence, r.vector)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let rows: Vec<EmbeddingRow> = self
            .vectors
            .iter()
            .sorted_by(|a, b| a.0.cmp(b.0))
            .map(|(s, v)| EmbeddingRow {
                sentence: s.clone(),
                vector: v.clone(),
            })
            .collect();
        io::write_jsonl(path, &rows)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl SentenceEncoder for EmbeddingTable {
    fn encode(&self, sentences: &[&str]) -> Result<Vec<Vec<f64>>> {
        sentences
            .iter()
            .map(|s| {
                self.vectors
                    .get(*s)
                    .cloned()
                    .ok_or_else(|| Error::config(format!("no embedding for sentence {s:?}")))
            })
            .collect()
    }
}

/// Mean cosine per verb over pairs keyed by `verb_of`.
pub fn verb_group_stats<P: LabeledPair>(
    encoder: &dyn SentenceEncoder,
    pairs: &[P],
    verb_of: impl Fn(&P) -> Option<String>,
    inventory: &VerbInventory,
) -> Result<Vec<VerbGroupStats>> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut keyed = Vec::new();
    for p in pairs {
        if let Some(v) = verb_of(p) {
            if inventory.class_of(&v).is_some() {
                keyed.push((v, p));
            }
        }
    }
    let sentences: Vec<&str> = keyed.iter().flat_map(|(_, p)| [p.sentence_a(), p.sentence_b()]).collect();
    let vecs = encoder.encode(&sentences)?;
    for (k, (verb, _)) in keyed.iter().enumerate() {
        let c = cosine(&vecs[2 * k], &vecs[2 * k + 1])?;
        let e = sums.entry(verb.clone()).or_insert((0.0, 0));
        e.0 += c;
        e.1 += 1;
    }
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for (verb, class) in inventory.embedding_verbs() {
        match sums.get(verb) {
            Some(&(s, n)) => out.push(VerbGroupStats {
                verb: verb.to_string(),
                class,
                mean_cosine: s / n as f64,
                n_pairs: n,
            }),
            None => missing.push(verb),
        }
    }
    if !missing.is_empty() {
        return Err(Error::config(format!("no pairs for verbs {}", missing.join(", "))));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub pairs: usize,
    pub groups: Vec<VerbGroupStats>,
    pub transparent_mean: f64,
    pub opaque_mean: f64,
    pub permutation: SignificanceResult,
    pub bootstrap: SignificanceResult,
}

impl SimilarityReport {
    pub fn table(&self) -> String {
        let mut s = String::from("verb\tclass\tmean_cosine\tn_pairs\n");
        for g in &self.groups {
            s.push_str(&format!("{}\t{}\t{:.6}\t{}\n", g.verb, g.class, g.mean_cosine, g.n_pairs));
        }
        s.push_str(&format!(
            "statistic {:.6}; permutation p {:.4} (one-sided {:.4}, {} relabelings); bootstrap p {:.4} ({} iterations, seed {})\n",
            self.permutation.observed_stat,
            self.permutation.p_two_sided,
            self.permutation.p_one_sided,
            self.permutation.n_resamples,
            self.bootstrap.p_two_sided,
            self.bootstrap.n_resamples,
            self.bootstrap.seed.unwrap_or_default(),
        ));
        s
    }
}

/// Per-verb cosine statistics and both tests over the embedded-clause
/// pairs of a simple-shape pair set. Main-clause pairs are ignored.
pub fn similarity_report(
    encoder: &dyn SentenceEncoder,
    pairs: &[OpacityPair],
    inventory: &VerbInventory,
    bootstrap_iterations: usize,
    seed: u64,
) -> Result<SimilarityReport> {
    if pairs.iter().any(|p| p.shape != Shape::Simple) {
        return Err(Error::config("similarity needs simple-shape pairs"));
    }
    let groups = verb_group_stats(encoder, pairs, |p| Some(p.alternated_verb().to_string()), inventory)?;
    let (t, o) = split_classes(&groups)?;
    Ok(SimilarityReport {
        pairs: groups.iter().map(|g| g.n_pairs).sum(),
        transparent_mean: mean(&t),
        opaque_mean: mean(&o),
        permutation: permutation_test(&groups, seed)?,
        bootstrap: bootstrap_test(&groups, bootstrap_iterations, seed)?,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn groups(t: &[f64], o: &[f64]) -> Vec<VerbGroupStats> {
        let mk = |i: usize, m: f64, class| VerbGroupStats {
            verb: format!("v{i}"),
            class,
            mean_cosine: m,
            n_pairs: 1,
        };
        t.iter()
            .enumerate()
            .map(|(i, &m)| mk(i, m, VerbClass::Transparent))
            .chain(o.iter().enumerate().map(|(i, &m)| mk(100 + i, m, VerbClass::Opaque)))
            .collect()
    }

    #[test]
    fn cosine_basics() {
        let x = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = x.iter().map(|a| -a).collect();
        assert_eq!(cosine(&x, &x).unwrap(), 1.0);
        assert_eq!(cosine(&x, &neg).unwrap(), -1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn exact_permutation_goldens() {
        let r = permutation_test(&groups(&[0.9; 6], &[0.1; 6]), 0).unwrap();
        assert_eq!(r.method, TestMethod::ExactPermutation);
        assert_eq!(r.n_resamples, 924);
        assert_eq!(r.p_two_sided, 2.0 / 924.0);
        assert_eq!(r.p_one_sided, 1.0 / 924.0);
        let r = permutation_test(&groups(&[0.5; 6], &[0.5; 6]), 0).unwrap();
        assert_eq!(r.p_two_sided, 1.0);
        assert!(permutation_test(&groups(&[0.5], &[0.5; 6]), 0).is_err());
    }

    #[test]
    fn monte_carlo_when_large() {
        let t: Vec<f64> = (0..14).map(|i| 0.5 + 0.01 * i as f64).collect();
        let o: Vec<f64> = (0..14).map(|i| 0.3 + 0.01 * i as f64).collect();
        assert!(binomial(28, 14) > EXACT_LIMIT);
        let r = permutation_test(&groups(&t, &o), 5).unwrap();
        assert_eq!(r.method, TestMethod::MonteCarloPermutation);
        assert!(r.p_two_sided < 0.01);
        assert!(r.p_two_sided > 0.0);
    }

    #[test]
    fn bootstrap_behaviour() {
        let g = groups(&[0.9, 0.91, 0.92, 0.93, 0.9, 0.89], &[0.1, 0.12, 0.11, 0.09, 0.1, 0.13]);
        let a = bootstrap_test(&g, 1000, 3).unwrap();
        assert!(a.p_two_sided <= 0.01);
        assert_eq!(a, bootstrap_test(&g, 1000, 3).unwrap());
        let same = bootstrap_test(&groups(&[0.4; 6], &[0.4; 6]), 1000, 3).unwrap();
        assert_eq!(same.p_two_sided, 1.0);
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(12, 6), 924);
        assert_eq!(binomial(5, 0), 1);
        assert_eq!(binomial(28, 14), 40_116_600);
    }
}
