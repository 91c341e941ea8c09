//! Binary-descriptor vocabulary tree and bag-of-words vectors.
//!
//! Trees are built by recursive k-medians over Hamming space. Word ids are
//! the base-`k` digits of the root-to-leaf path, so a tree with branching `k`
//! and depth `L` has exactly `k^L` words numbered `0..k^L`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const DESCRIPTOR_WORDS: usize = 4;
pub const DESCRIPTOR_BITS: u32 = 256;

const KMEDIANS_MAX_ITERS: usize = 20;
const VOCAB_FORMAT: &str = "dqslam-vocabulary";
const VOCAB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VocabularyError {
    #[error("no training descriptors")]
    InsufficientData,
    #[error("invalid tree shape: branching {k}, depth {levels}")]
    InvalidShape { k: usize, levels: usize },
    #[error("empty descriptor set")]
    EmptyInput,
    #[error("bag-of-words vector has zero L1 norm")]
    ZeroVector,
    #[error("malformed vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// 256-bit binary descriptor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct BinaryDescriptor(pub [u64; DESCRIPTOR_WORDS]);

impl BinaryDescriptor {
    pub const ZERO: Self = Self([0; DESCRIPTOR_WORDS]);
    pub const ONES: Self = Self([u64::MAX; DESCRIPTOR_WORDS]);

    pub fn random(rng: &mut impl Rng) -> Self {
        Self([rng.gen(), rng.gen(), rng.gen(), rng.gen()])
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.0[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn flip(&mut self, i: usize) {
        self.0[i / 64] ^= 1 << (i % 64);
    }

    /// Copy with each bit flipped independently with probability `p`.
    pub fn with_noise(&self, p: f64, rng: &mut impl Rng) -> Self {
        let mut out = *self;
        if p > 0.0 {
            for i in 0..DESCRIPTOR_BITS as usize {
                if rng.gen_bool(p) {
                    out.flip(i);
                }
            }
        }
        out
    }

    pub fn not(&self) -> Self {
        Self([!self.0[0], !self.0[1], !self.0[2], !self.0[3]])
    }
}

impl fmt::Debug for BinaryDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryDescriptor({self})")
    }
}

impl fmt::Display for BinaryDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for w in &self.0 {
            write!(f, "{w:016x}")?;
        }
        Ok(())
    }
}

impl FromStr for BinaryDescriptor {
    type Err = VocabularyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 || !s.is_ascii() {
            return Err(VocabularyError::Format(format!("descriptor must be 64 hex digits, got {s:?}")));
        }
        let mut words = [0u64; DESCRIPTOR_WORDS];
        for (i, w) in words.iter_mut().enumerate() {
            *w = u64::from_str_radix(&s[16 * i..16 * (i + 1)], 16)
                .map_err(|e| VocabularyError::Format(e.to_string()))?;
        }
        Ok(Self(words))
    }
}

impl Serialize for BinaryDescriptor {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BinaryDescriptor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn hamming(a: &BinaryDescriptor, b: &BinaryDescriptor) -> u32 {
    a.0.iter().zip(b.0.iter()).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Per-bit majority vote; ties resolve to 0.
fn bitwise_median(members: &[&BinaryDescriptor]) -> BinaryDescriptor {
    let mut out = BinaryDescriptor::ZERO;
    let n = members.len();
    for i in 0..DESCRIPTOR_BITS as usize {
        let ones = members.iter().filter(|d| d.bit(i)).count();
        if 2 * ones > n {
            out.flip(i);
        }
    }
    out
}

/// Index of the nearest center; ties go to the lowest index.
fn nearest(d: &BinaryDescriptor, centers: &[BinaryDescriptor]) -> usize {
    let mut best = 0;
    let mut best_dist = u32::MAX;
    for (i, c) in centers.iter().enumerate() {
        let dist = hamming(d, c);
        if dist < best_dist {
            best = i;
            best_dist = dist;
        }
    }
    best
}

/// Sparse word-id → weight vector. Zero weights are never stored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BowVector(pub BTreeMap<u32, f64>);

impl BowVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, word: u32, weight: f64) {
        if weight > 0.0 {
            *self.0.entry(word).or_insert(0.0) += weight;
        }
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.values().map(|v| v.abs()).sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `1 - 0.5 |v1/|v1| - v2/|v2||`, in `[0, 1]`.
pub fn l1_score(v1: &BowVector, v2: &BowVector) -> Result<f64, VocabularyError> {
    let n1 = v1.l1_norm();
    let n2 = v2.l1_norm();
    if !(n1 > 0.0) || !(n2 > 0.0) {
        return Err(VocabularyError::ZeroVector);
    }
    // |a - b| summed over the union of supports equals
    // |a| + |b| + sum over shared words of (|a - b| - |a| - |b|)
    let mut dist = 2.0;
    let (small, large, ns, nl) = if v1.len() <= v2.len() { (v1, v2, n1, n2) } else { (v2, v1, n2, n1) };
    for (w, a) in &small.0 {
        if let Some(b) = large.0.get(w) {
            let a = a / ns;
            let b = b / nl;
            dist += (a - b).abs() - a.abs() - b.abs();
        }
    }
    Ok((1.0 - 0.5 * dist).clamp(0.0, 1.0))
}

/// Vocabulary tree for one object class.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabularyTree {
    branching: usize,
    levels: usize,
    class_label: u32,
    seed: u64,
    /// Centroids of every non-root node, level by level; node `i` at level
    /// `l` (0-based, below the root) has its children at
    /// `level_offset(l + 1) + i * k .. + k`.
    centroids: Vec<BinaryDescriptor>,
    weights: Vec<f64>,
}

fn node_count(k: usize, levels: usize) -> usize {
    (1..=levels).map(|l| k.pow(l as u32)).sum()
}

impl VocabularyTree {
    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn class_label(&self) -> u32 {
        self.class_label
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn word_count(&self) -> usize {
        self.branching.pow(self.levels as u32)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, word: u32) -> f64 {
        self.weights[word as usize]
    }

    fn level_offset(&self, level: usize) -> usize {
        node_count(self.branching, level)
    }

    /// Centroids of the `k` children of node `index` at `level` (the root is
    /// level 0, index 0).
    pub fn children(&self, level: usize, index: usize) -> &[BinaryDescriptor] {
        let start = self.level_offset(level) + index * self.branching;
        &self.centroids[start..start + self.branching]
    }

    /// Greedy root-to-leaf descent; returns the word id.
    pub fn word_of(&self, d: &BinaryDescriptor) -> u32 {
        let mut index = 0;
        for level in 0..self.levels {
            let child = nearest(d, self.children(level, index));
            index = index * self.branching + child;
        }
        index as u32
    }

    /// Bag-of-words vector: occurrence count × idf per word.
    pub fn transform(&self, descriptors: &[BinaryDescriptor]) -> Result<BowVector, VocabularyError> {
        if descriptors.is_empty() {
            return Err(VocabularyError::EmptyInput);
        }
        let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
        for d in descriptors {
            *counts.entry(self.word_of(d)).or_insert(0) += 1;
        }
        let mut v = BowVector::new();
        for (w, n) in counts {
            v.add(w, n as f64 * self.weight(w));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabularyError> {
        let file = VocabularyFile {
            format: VOCAB_FORMAT.to_string(),
            version: VOCAB_VERSION,
            k: self.branching,
            levels: self.levels,
            class_label: self.class_label,
            seed: self.seed,
            centroids: self.centroids.clone(),
            weights: self.weights.clone(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabularyError> {
        let file: VocabularyFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.format != VOCAB_FORMAT || file.version != VOCAB_VERSION {
            return Err(VocabularyError::Format(format!(
                "unsupported vocabulary format {} v{}",
                file.format, file.version
            )));
        }
        if file.k < 2 || file.levels < 1 {
            return Err(VocabularyError::InvalidShape { k: file.k, levels: file.levels });
        }
        let words = file.k.pow(file.levels as u32);
        if file.centroids.len() != node_count(file.k, file.levels) || file.weights.len() != words {
            return Err(VocabularyError::Format("node or weight count does not match tree shape".into()));
        }
        if file.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(VocabularyError::Format("weights must be finite and non-negative".into()));
        }
        Ok(Self {
            branching: file.k,
            levels: file.levels,
            class_label: file.class_label,
            seed: file.seed,
            centroids: file.centroids,
            weights: file.weights,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    format: String,
    version: u32,
    k: usize,
    levels: usize,
    class_label: u32,
    seed: u64,
    centroids: Vec<BinaryDescriptor>,
    weights: Vec<f64>,
}

/// Build a tree by recursive k-medians over all descriptors of `documents`,
/// then weight each word by `ln(N / n_w)` over the documents (0 for words
/// no document reaches).
pub fn build_vocabulary(
    documents: &[Vec<BinaryDescriptor>],
    k: usize,
    levels: usize,
    class_label: u32,
    seed: u64,
) -> Result<VocabularyTree, VocabularyError> {
    if k < 2 || levels < 1 {
        return Err(VocabularyError::InvalidShape { k, levels });
    }
    let all: Vec<&BinaryDescriptor> = documents.iter().flatten().collect();
    if all.is_empty() {
        return Err(VocabularyError::InsufficientData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![BinaryDescriptor::ZERO; node_count(k, levels)];

    // breadth-first: each entry holds the members of one node at the current level
    let mut groups: Vec<(BinaryDescriptor, Vec<&BinaryDescriptor>)> = vec![(bitwise_median(&all), all)];
    for level in 0..levels {
        let offset = node_count(k, level);
        let mut next = Vec::with_capacity(groups.len() * k);
        for (i, (parent, members)) in groups.into_iter().enumerate() {
            let clusters = kmedians(&members, parent, k, &mut rng);
            for (j, (center, cluster)) in clusters.into_iter().enumerate() {
                centroids[offset + i * k + j] = center;
                next.push((center, cluster));
            }
        }
        groups = next;
    }

    let mut tree =
        VocabularyTree { branching: k, levels, class_label, seed, centroids, weights: vec![0.0; k.pow(levels as u32)] };
    let mut doc_freq = vec![0usize; tree.word_count()];
    let mut n_docs = 0usize;
    for doc in documents.iter().filter(|d| !d.is_empty()) {
        n_docs += 1;
        let mut words: Vec<u32> = doc.iter().map(|d| tree.word_of(d)).collect();
        words.sort_unstable();
        words.dedup();
        for w in words {
            doc_freq[w as usize] += 1;
        }
    }
    for (w, &n) in tree.weights.iter_mut().zip(doc_freq.iter()) {
        *w = if n == 0 { 0.0 } else { (n_docs as f64 / n as f64).ln() };
    }
    Ok(tree)
}

/// Split `members` into exactly `k` clusters. Clusters that end up empty are
/// re-seeded with the farthest member of the largest cluster; when there are
/// fewer distinct members than `k`, surplus children copy the parent centroid.
fn kmedians<'a>(
    members: &[&'a BinaryDescriptor],
    parent: BinaryDescriptor,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(BinaryDescriptor, Vec<&'a BinaryDescriptor>)> {
    let mut distinct: Vec<BinaryDescriptor> = members.iter().map(|d| **d).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() <= k {
        let mut centers = distinct.clone();
        while centers.len() < k {
            centers.push(parent);
        }
        return assign(members, centers);
    }

    // k-means++ style seeding on Hamming distance
    let mut centers = vec![*members[rng.gen_range(0..members.len())]];
    while centers.len() < k {
        let dists: Vec<f64> = members
            .iter()
            .map(|d| {
                let m = centers.iter().map(|c| hamming(d, c)).min().unwrap_or(0);
                (m as f64).powi(2)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut idx = members.len() - 1;
            for (i, w) in dists.iter().enumerate() {
                if r < *w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            *members[idx]
        } else {
            *distinct.choose(rng).unwrap()
        };
        centers.push(pick);
    }

    let mut labels = vec![usize::MAX; members.len()];
    for _ in 0..KMEDIANS_MAX_ITERS {
        let mut changed = false;
        for (l, d) in labels.iter_mut().zip(members.iter()) {
            let n = nearest(d, &centers);
            changed |= *l != n;
            *l = n;
        }
        repair_empty(members, &mut labels, &centers, k);
        let mut new_centers = Vec::with_capacity(k);
        for (c, old) in centers.iter().enumerate() {
            let cluster: Vec<&BinaryDescriptor> =
                members.iter().zip(labels.iter()).filter(|(_, &l)| l == c).map(|(d, _)| *d).collect();
            new_centers.push(if cluster.is_empty() { *old } else { bitwise_median(&cluster) });
        }
        let moved = new_centers != centers;
        centers = new_centers;
        if !changed && !moved {
            break;
        }
    }
    assign(members, centers)
}

fn repair_empty(members: &[&BinaryDescriptor], labels: &mut [usize], centers: &[BinaryDescriptor], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&l| sizes[l] += 1);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { return };
        let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap();
        if sizes[largest] < 2 {
            return;
        }
        let farthest = (0..members.len())
            .filter(|&i| labels[i] == largest)
            .max_by_key(|&i| (hamming(members[i], &centers[largest]), std::cmp::Reverse(i)))
            .unwrap();
        labels[farthest] = empty;
    }
}

fn assign<'a>(
    members: &[&'a BinaryDescriptor],
    centers: Vec<BinaryDescriptor>,
) -> Vec<(BinaryDescriptor, Vec<&'a BinaryDescriptor>)> {
    let mut out: Vec<(BinaryDescriptor, Vec<&BinaryDescriptor>)> = centers.iter().map(|c| (*c, Vec::new())).collect();
    for d in members {
        out[nearest(d, &centers)].1.push(d);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bitloop_hamming(a: &BinaryDescriptor, b: &BinaryDescriptor) -> u32 {
        (0..256).filter(|&i| a.bit(i) != b.bit(i)).count() as u32
    }

    fn random_docs(seed: u64, docs: usize, per_doc: usize) -> Vec<Vec<BinaryDescriptor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..docs).map(|_| (0..per_doc).map(|_| BinaryDescriptor::random(&mut rng)).collect()).collect()
    }

    fn bow(pairs: &[(u32, f64)]) -> BowVector {
        let mut v = BowVector::new();
        for &(w, x) in pairs {
            v.add(w, x);
        }
        v
    }

    #[test]
    fn hamming_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = BinaryDescriptor::random(&mut rng);
        assert_eq!(hamming(&a, &a), 0);
        assert_eq!(hamming(&a, &a.not()), 256);
        for _ in 0..1000 {
            let a = BinaryDescriptor::random(&mut rng);
            let b = BinaryDescriptor::random(&mut rng);
            assert_eq!(hamming(&a, &b), bitloop_hamming(&a, &b));
        }
    }

    #[test]
    fn descriptor_hex_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = BinaryDescriptor::random(&mut rng);
        assert_eq!(a.to_string().parse::<BinaryDescriptor>().unwrap(), a);
        assert!("zz".parse::<BinaryDescriptor>().is_err());
    }

    #[test]
    fn default_shape_has_3125_words() {
        let docs = random_docs(3, 40, 32);
        let tree = build_vocabulary(&docs, 5, 5, 0, 7).unwrap();
        assert_eq!(tree.word_count(), 3125);
        assert_eq!(tree.weights().len(), 3125);
        assert!(tree.weights().iter().all(|w| w.is_finite() && *w >= 0.0));
        // every internal node has exactly k children
        for level in 0..5 {
            for index in 0..5usize.pow(level as u32) {
                assert_eq!(tree.children(level, index).len(), 5);
            }
        }
    }

    #[test]
    fn separable_clusters_split_cleanly() {
        let mut docs = vec![vec![BinaryDescriptor::ZERO; 10]];
        docs.push(vec![BinaryDescriptor::ONES; 10]);
        let tree = build_vocabulary(&docs, 2, 1, 0, 1).unwrap();
        let mut leaves = tree.children(0, 0).to_vec();
        leaves.sort();
        assert_eq!(leaves, vec![BinaryDescriptor::ZERO, BinaryDescriptor::ONES]);
        // each constant word occurs in one of two documents
        assert!(tree.weights().iter().all(|&w| (w - 2f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn build_is_deterministic() {
        let docs = random_docs(4, 30, 20);
        let a = build_vocabulary(&docs, 3, 3, 2, 99).unwrap();
        let b = build_vocabulary(&docs, 3, 3, 2, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        assert!(matches!(build_vocabulary(&[], 5, 5, 0, 0), Err(VocabularyError::InsufficientData)));
        assert!(matches!(build_vocabulary(&[vec![]], 5, 5, 0, 0), Err(VocabularyError::InsufficientData)));
        let docs = random_docs(5, 2, 2);
        assert!(matches!(build_vocabulary(&docs, 1, 5, 0, 0), Err(VocabularyError::InvalidShape { .. })));
        let tree = build_vocabulary(&docs, 2, 2, 0, 0).unwrap();
        assert!(matches!(tree.transform(&[]), Err(VocabularyError::EmptyInput)));
    }

    #[test]
    fn transform_single_and_duplicated() {
        let docs = random_docs(6, 30, 16);
        let tree = build_vocabulary(&docs, 4, 3, 0, 3).unwrap();
        let d = docs[0][0];
        let v = tree.transform(&[d]).unwrap();
        let w = tree.word_of(&d);
        assert!(v.len() <= 1);
        if tree.weight(w) > 0.0 {
            assert_eq!(v.0[&w], tree.weight(w));
        }
        let v2 = tree.transform(&[d, d]).unwrap();
        for (word, x) in &v.0 {
            assert_eq!(v2.0[word], 2.0 * x);
        }
    }

    #[test]
    fn tiny_tree_matches_path_oracle() {
        let docs = random_docs(7, 10, 10);
        let tree = build_vocabulary(&docs, 2, 2, 0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let d = BinaryDescriptor::random(&mut rng);
            // enumerate all four root-to-leaf paths and take the lexicographic
            // minimum of (level-1 distance, level-1 index, level-2 distance, leaf index)
            let best = (0..2usize)
                .flat_map(|a| (0..2usize).map(move |b| (a, b)))
                .map(|(a, b)| {
                    let d1 = hamming(&d, &tree.children(0, 0)[a]);
                    let d2 = hamming(&d, &tree.children(1, a)[b]);
                    (d1, a, d2, b, a * 2 + b)
                })
                .min()
                .unwrap();
            assert_eq!(tree.word_of(&d) as usize, best.4);
        }
    }

    #[test]
    fn l1_score_examples() {
        let v = bow(&[(1, 2.0), (5, 1.0)]);
        let scaled = bow(&[(1, 6.0), (5, 3.0)]);
        assert!((l1_score(&v, &scaled).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(l1_score(&bow(&[(1, 1.0)]), &bow(&[(2, 1.0)])).unwrap(), 0.0);
        let s = l1_score(&bow(&[(0, 1.0)]), &bow(&[(0, 1.0), (1, 1.0)])).unwrap();
        assert!((s - 0.5).abs() < 1e-15);
        assert!(matches!(l1_score(&BowVector::new(), &v), Err(VocabularyError::ZeroVector)));
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let docs = random_docs(9, 20, 10);
        let tree = build_vocabulary(&docs, 3, 2, 4, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        tree.save(&path).unwrap();
        let back = VocabularyTree::load(&path).unwrap();
        assert_eq!(back, tree);
        let first = std::fs::read(&path).unwrap();
        back.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    fn dense_l1(v1: &BowVector, v2: &BowVector) -> f64 {
        let n1 = v1.l1_norm();
        let n2 = v2.l1_norm();
        let mut words: Vec<u32> = v1.0.keys().chain(v2.0.keys()).copied().collect();
        words.sort_unstable();
        words.dedup();
        let d: f64 =
            words.iter().map(|w| (v1.0.get(w).unwrap_or(&0.0) / n1 - v2.0.get(w).unwrap_or(&0.0) / n2).abs()).sum();
        1.0 - 0.5 * d
    }

    fn arb_bow() -> impl Strategy<Value = BowVector> {
        prop::collection::btree_map(0u32..40, 0.01f64..10.0, 1..15).prop_map(BowVector)
    }

    proptest! {
        #[test]
        fn l1_score_properties(a in arb_bow(), b in arb_bow(), s in 0.1f64..100.0) {
            let ab = l1_score(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - l1_score(&b, &a).unwrap()).abs() < 1e-12);
            let scaled = BowVector(a.0.iter().map(|(w, x)| (*w, x * s)).collect());
            prop_assert!((ab - l1_score(&scaled, &b).unwrap()).abs() < 1e-12);
            prop_assert!((ab - dense_l1(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn transform_is_order_invariant(seed in 0u64..1000) {
            let docs = random_docs(10, 12, 8);
            let tree = build_vocabulary(&docs, 3, 2, 0, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut set: Vec<BinaryDescriptor> = (0..10).map(|_| BinaryDescriptor::random(&mut rng)).collect();
            let a = tree.transform(&set).unwrap();
            set.reverse();
            let b = tree.transform(&set).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.0.values().all(|&w| w > 0.0));
        }
    }
}
