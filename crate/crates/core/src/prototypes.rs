//! Domain privacy prototypes: per-domain clustering of private-span embeddings.
//!
//! The main method is FINCH (first-neighbor clustering): link every point to
//! its nearest neighbor, take connected components, and recurse on the
//! normalized cluster means until a single cluster remains. Spherical k-means
//! and the single mean prototype are kept as baselines.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifact::{self, ArtifactError};
use crate::corpus::Corpus;
use crate::encoder::{encode_all, EncoderError, EncoderParams, Embedding};
use crate::rng::rng_for;
use crate::scalar::{cosine, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("clustering needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("k = {k} outside [1, {n}]")]
    BadK { k: usize, n: usize },
    #[error("domain {domain:?} has {count} distinct private spans, need at least 2")]
    SparseDomain { domain: String, count: usize },
    #[error("unknown clustering method {0:?}")]
    UnknownMethod(String),
    #[error("prototype set for {0:?} is empty")]
    EmptyPrototypes(String),
    #[error("partition level {level} unavailable (hierarchy has {levels} levels)")]
    BadLevel { level: usize, levels: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

/// One level of a clustering hierarchy over the original points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignment: Vec<usize>,
    pub num_clusters: usize,
    pub level: usize,
}

/// Index of the most cosine-similar other point; ties go to the lowest index.
pub fn first_neighbors<T: Scalar, P: AsRef<[T]>>(points: &[P]) -> Vec<usize> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let mut best = usize::MAX;
            let mut best_sim = T::neg_infinity();
            for j in 0..n {
                if j == i {
                    continue;
                }
                let s = cosine(points[i].as_ref(), points[j].as_ref());
                if s > best_sim {
                    best_sim = s;
                    best = j;
                }
            }
            best
        })
        .collect()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Connected components of the first-neighbor graph. Linking `i` to `nn(i)`
/// covers all three FINCH link conditions. Ids are numbered by lowest member.
fn first_neighbor_components(nn: &[usize]) -> (Vec<usize>, usize) {
    let n = nn.len();
    let mut uf = UnionFind::new(n);
    for (i, &j) in nn.iter().enumerate() {
        uf.union(i, j);
    }
    let mut label = vec![usize::MAX; n];
    let mut ids = vec![0; n];
    let mut next = 0;
    for i in 0..n {
        let r = uf.find(i);
        if label[r] == usize::MAX {
            label[r] = next;
            next += 1;
        }
        ids[i] = label[r];
    }
    (ids, next)
}

/// Normalized mean of the points in each cluster (clusters `0..k`).
pub fn cluster_means<T: Scalar, P: AsRef<[T]>>(points: &[P], assignment: &[usize], k: usize) -> Vec<Embedding<T>> {
    let d = points[0].as_ref().len();
    let mut sums = vec![vec![T::zero(); d]; k];
    for (p, &c) in points.iter().zip(assignment) {
        for (s, &x) in sums[c].iter_mut().zip(p.as_ref()) {
            *s += x;
        }
    }
    sums.into_iter().map(Embedding::from_vec).collect()
}

/// FINCH hierarchy, finest (level 0) first; the last level has one cluster.
pub fn finch<T: Scalar, P: AsRef<[T]>>(points: &[P]) -> Result<Vec<Partition>, ClusterError> {
    if points.len() < 2 {
        return Err(ClusterError::TooFewPoints(points.len()));
    }
    let mut levels = Vec::new();
    let mut assignment: Vec<usize> = (0..points.len()).collect();
    let mut current: Vec<Vec<T>> = points.iter().map(|p| p.as_ref().to_vec()).collect();
    loop {
        let nn = first_neighbors(&current);
        let (ids, k) = first_neighbor_components(&nn);
        assignment = assignment.iter().map(|&c| ids[c]).collect();
        levels.push(Partition { assignment: assignment.clone(), num_clusters: k, level: levels.len() });
        if k <= 1 {
            break;
        }
        current = cluster_means(points, &assignment, k).into_iter().map(Embedding::into_vec).collect();
    }
    Ok(levels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult<T> {
    pub centroids: Vec<Embedding<T>>,
    pub assignment: Vec<usize>,
    /// Σ (1 − cos) to the assigned centroid, after every assignment step.
    pub objective_trace: Vec<T>,
}

fn assign<T: Scalar, P: AsRef<[T]>>(points: &[P], centroids: &[Embedding<T>]) -> (Vec<usize>, T) {
    let mut obj = T::zero();
    let assignment = points
        .iter()
        .map(|p| {
            let (mut best, mut best_sim) = (0, T::neg_infinity());
            for (c, cen) in centroids.iter().enumerate() {
                let s = cosine(p.as_ref(), cen.as_slice());
                if s > best_sim {
                    best = c;
                    best_sim = s;
                }
            }
            obj += T::one() - best_sim;
            best
        })
        .collect();
    (assignment, obj)
}

/// Spherical k-means with seeded farthest-point initialization.
pub fn kmeans<T: Scalar, P: AsRef<[T]>>(points: &[P], k: usize, seed: u64) -> Result<KMeansResult<T>, ClusterError> {
    use rand::Rng;
    const MAX_ITER: usize = 100;
    let n = points.len();
    if k == 0 || k > n {
        return Err(ClusterError::BadK { k, n });
    }
    let mut rng = rng_for(seed, "kmeans/init");
    let mut chosen = vec![rng.random_range(0..n)];
    let mut min_dist: Vec<T> = (0..n).map(|i| T::one() - cosine(points[i].as_ref(), points[chosen[0]].as_ref())).collect();
    while chosen.len() < k {
        let mut far = usize::MAX;
        let mut far_d = T::neg_infinity();
        for i in 0..n {
            if !chosen.contains(&i) && min_dist[i] > far_d {
                far_d = min_dist[i];
                far = i;
            }
        }
        chosen.push(far);
        for i in 0..n {
            let d = T::one() - cosine(points[i].as_ref(), points[far].as_ref());
            min_dist[i] = min_dist[i].min(d);
        }
    }
    let mut centroids: Vec<Embedding<T>> =
        chosen.iter().map(|&i| Embedding::from_vec(points[i].as_ref().to_vec())).collect();
    let mut trace = Vec::new();
    let (mut assignment, obj) = assign(points, &centroids);
    trace.push(obj);
    for _ in 0..MAX_ITER {
        let means = cluster_means(points, &assignment, k);
        for (c, m) in means.into_iter().enumerate() {
            if assignment.contains(&c) {
                centroids[c] = m;
            }
        }
        let (next, obj) = assign(points, &centroids);
        trace.push(obj);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(KMeansResult { centroids, assignment, objective_trace: trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    Finch,
    Kmeans,
    Mean,
}

impl fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterMethod::Finch => "finch",
            ClusterMethod::Kmeans => "kmeans",
            ClusterMethod::Mean => "mean",
        })
    }
}

impl FromStr for ClusterMethod {
    type Err = ClusterError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "finch" => Ok(ClusterMethod::Finch),
            "kmeans" => Ok(ClusterMethod::Kmeans),
            "mean" => Ok(ClusterMethod::Mean),
            other => Err(ClusterError::UnknownMethod(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrototypeOptions {
    pub method: ClusterMethod,
    /// Cluster count for the k-means baseline (clamped to the span count).
    pub kmeans_k: usize,
    /// FINCH level to use; `None` picks the coarsest level with at least 2 clusters.
    pub finch_level: Option<usize>,
    pub seed: u64,
}

impl Default for PrototypeOptions {
    fn default() -> Self {
        Self { method: ClusterMethod::Finch, kmeans_k: 4, finch_level: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet<T> {
    pub domain: String,
    pub prototypes: Vec<Embedding<T>>,
    pub method: ClusterMethod,
    pub level: Option<usize>,
}

impl<T: Scalar> PrototypeSet<T> {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Embedding::dim)
    }
}

pub type PrototypeMap<T> = BTreeMap<String, PrototypeSet<T>>;

/// Prototypes for one domain plus the member assignment they were built from.
#[derive(Debug, Clone)]
pub struct DomainClustering<T> {
    pub set: PrototypeSet<T>,
    pub assignment: Vec<usize>,
}

/// Cluster one domain's embeddings into unit-norm prototypes.
pub fn cluster_domain<T: Scalar>(
    domain: &str,
    points: &[Embedding<T>],
    opts: &PrototypeOptions,
) -> Result<DomainClustering<T>, ClusterError> {
    if points.len() < 2 {
        return Err(ClusterError::SparseDomain { domain: domain.to_string(), count: points.len() });
    }
    let (assignment, k, level) = match opts.method {
        ClusterMethod::Mean => (vec![0; points.len()], 1, None),
        ClusterMethod::Kmeans => {
            let k = opts.kmeans_k.clamp(1, points.len());
            let r = kmeans(points, k, opts.seed)?;
            // drop empty clusters and renumber
            let mut remap = BTreeMap::new();
            for &c in &r.assignment {
                let next = remap.len();
                remap.entry(c).or_insert(next);
            }
            let a: Vec<usize> = r.assignment.iter().map(|c| remap[c]).collect();
            (a, remap.len(), None)
        }
        ClusterMethod::Finch => {
            let levels = finch(points)?;
            let chosen = match opts.finch_level {
                Some(l) if l < levels.len() => l,
                Some(l) => return Err(ClusterError::BadLevel { level: l, levels: levels.len() }),
                None => levels.iter().rposition(|p| p.num_clusters >= 2).unwrap_or(0),
            };
            let p = &levels[chosen];
            (p.assignment.clone(), p.num_clusters, Some(chosen))
        }
    };
    let prototypes = cluster_means(points, &assignment, k);
    Ok(DomainClustering {
        set: PrototypeSet { domain: domain.to_string(), prototypes, method: opts.method, level },
        assignment,
    })
}

/// Encode each domain's distinct private spans and cluster them.
pub fn build_prototypes<T: Scalar>(
    corpus: &Corpus,
    encoder: &EncoderParams<T>,
    opts: &PrototypeOptions,
) -> Result<PrototypeMap<T>, ClusterError> {
    let mut out = BTreeMap::new();
    for (domain, texts) in corpus.private_texts_by_domain() {
        if texts.len() < 2 {
            return Err(ClusterError::SparseDomain { domain, count: texts.len() });
        }
        let z = encode_all(encoder, &texts)?;
        let c = cluster_domain(&domain, &z, opts)?;
        log::info!("domain {domain}: {} prototypes from {} spans ({})", c.set.len(), texts.len(), opts.method);
        out.insert(domain, c.set);
    }
    Ok(out)
}

pub fn prototypes_to_value<T: Scalar>(map: &PrototypeMap<T>) -> Value {
    let domains: Vec<Value> = map
        .values()
        .map(|s| {
            json!({
                "domain": s.domain,
                "method": s.method.to_string(),
                "level": s.level,
                "dim": s.dim(),
                "prototypes": s.prototypes.iter().map(|p| {
                    Value::Array(p.as_slice().iter().map(|x| Value::from(artifact::fixed(x.as_f64()))).collect())
                }).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({ "domains": domains })
}

pub fn save_prototypes<T: Scalar>(map: &PrototypeMap<T>, path: &Path) -> Result<(), ClusterError> {
    artifact::write_json(path, &prototypes_to_value(map))?;
    Ok(())
}

pub fn load_prototypes<T: Scalar>(path: &Path) -> Result<PrototypeMap<T>, ClusterError> {
    use artifact::{field, field_str, field_u64};
    let v = artifact::read_json(path)?;
    let domains = field(path, &v, "domains")?
        .as_array()
        .ok_or_else(|| ArtifactError::format(path, "\"domains\" is not an array"))?;
    let mut out = BTreeMap::new();
    for d in domains {
        let domain = field_str(path, d, "domain")?.to_string();
        let method: ClusterMethod = field_str(path, d, "method")?.parse()?;
        let level = field(path, d, "level")?.as_u64().map(|l| l as usize);
        let dim = field_u64(path, d, "dim")? as usize;
        let raw = field(path, d, "prototypes")?
            .as_array()
            .ok_or_else(|| ArtifactError::format(path, "\"prototypes\" is not an array"))?;
        let mut prototypes = Vec::with_capacity(raw.len());
        for p in raw {
            let xs: Vec<T> = artifact::value_to_floats(path, p)?;
            if xs.len() != dim {
                return Err(ArtifactError::format(path, format!("prototype of {domain:?} has wrong dimension")).into());
            }
            prototypes.push(Embedding::from_vec(xs));
        }
        if prototypes.is_empty() {
            return Err(ClusterError::EmptyPrototypes(domain));
        }
        out.insert(domain.clone(), PrototypeSet { domain, prototypes, method, level });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f64]) -> Embedding<f64> {
        Embedding::from_vec(v.to_vec())
    }

    #[test]
    fn two_tight_pairs_form_two_clusters() {
        let pts = vec![e(&[1.0, 0.05]), e(&[1.0, 0.0]), e(&[0.0, 1.0]), e(&[0.05, 1.0])];
        let levels = finch(&pts).unwrap();
        assert_eq!(levels[0].num_clusters, 2);
        assert_eq!(levels[0].assignment, vec![0, 0, 1, 1]);
        assert_eq!(levels.last().unwrap().num_clusters, 1);
    }

    #[test]
    fn finch_needs_two_points() {
        assert!(matches!(finch(&[e(&[1.0, 0.0])]), Err(ClusterError::TooFewPoints(1))));
    }

    #[test]
    fn kmeans_edge_cases() {
        let pts = vec![e(&[1.0, 0.0]), e(&[0.0, 1.0]), e(&[1.0, 1.0])];
        let one = kmeans(&pts, 1, 0).unwrap();
        let m = e(&[2.0, 2.0]);
        assert!((one.centroids[0].cos(&m) - 1.0).abs() < 1e-12);
        let all = kmeans(&pts, 3, 0).unwrap();
        let mut a = all.assignment.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2]);
        for (i, p) in pts.iter().enumerate() {
            assert!((all.centroids[all.assignment[i]].cos(p) - 1.0).abs() < 1e-12);
        }
        assert!(matches!(kmeans(&pts, 0, 0), Err(ClusterError::BadK { .. })));
        assert!(matches!(kmeans(&pts, 4, 0), Err(ClusterError::BadK { .. })));
    }

    #[test]
    fn mean_method_gives_one_prototype() {
        let pts = vec![e(&[1.0, 0.0]), e(&[0.0, 1.0]), e(&[0.6, 0.8])];
        let opts = PrototypeOptions { method: ClusterMethod::Mean, ..Default::default() };
        let c = cluster_domain("d", &pts, &opts).unwrap();
        assert_eq!(c.set.len(), 1);
        assert_eq!(c.set.level, None);
    }

    #[test]
    fn finch_level_selection() {
        let pts: Vec<_> = (0..12).map(|i| {
            let a = i as f64 * 0.5;
            e(&[a.cos(), a.sin(), (i % 3) as f64 * 0.1])
        }).collect();
        let levels = finch(&pts).unwrap();
        let c = cluster_domain("d", &pts, &PrototypeOptions::default()).unwrap();
        let want = levels.iter().rposition(|p| p.num_clusters >= 2).unwrap_or(0);
        assert_eq!(c.set.level, Some(want));
        let opts = PrototypeOptions { finch_level: Some(99), ..Default::default() };
        assert!(matches!(cluster_domain("d", &pts, &opts), Err(ClusterError::BadLevel { .. })));
    }

    #[test]
    fn method_names_parse() {
        for m in [ClusterMethod::Finch, ClusterMethod::Kmeans, ClusterMethod::Mean] {
            assert_eq!(m.to_string().parse::<ClusterMethod>().unwrap(), m);
        }
        assert!("dbscan".parse::<ClusterMethod>().is_err());
    }
}
