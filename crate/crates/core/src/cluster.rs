//! Spectral joint clustering of domain names and slot prompts.
//!
//! Affinity is the shifted cosine `(1 + cos) / 2` with a zero diagonal. Points
//! are embedded with the `k` smallest eigenvectors of the symmetric normalized
//! Laplacian `I − D^{-1/2} W D^{-1/2}`, rows are L2-normalized, then k-means
//! assigns labels. Cluster counts are picked by maximizing the silhouette.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{lookup_or_toy, EmbeddingTable, ToyFallback};
use crate::error::{Error, Result};
use crate::numkit::{cosine_similarity, kmeans, normalize, sym_eig, Matrix, RngStream};

/// Shifted-cosine affinity with zero diagonal.
pub fn affinity(points: &Matrix) -> Result<Matrix> {
    let n = points.rows();
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = 0.5 * (1.0 + cosine_similarity(points.row(i), points.row(j))?);
            w.set(i, j, a);
            w.set(j, i, a);
        }
    }
    Ok(w)
}

/// `I − D^{-1/2} W D^{-1/2}` for the shifted-cosine affinity of `points`.
pub fn normalized_laplacian(points: &Matrix) -> Result<Matrix> {
    let w = affinity(points)?;
    let n = w.rows();
    let mut inv_sqrt_deg = Vec::with_capacity(n);
    for i in 0..n {
        let d: f64 = w.row(i).iter().sum();
        if d <= 0.0 {
            return Err(Error::DegenerateGraph(format!(
                "point {i} has zero affinity to every other point"
            )));
        }
        inv_sqrt_deg.push(1.0 / d.sqrt());
    }
    Ok(Matrix::from_fn(n, n, |i, j| {
        let off = inv_sqrt_deg[i] * w.get(i, j) * inv_sqrt_deg[j];
        if i == j {
            1.0 - off
        } else {
            -off
        }
    }))
}

fn all_rows_identical(points: &Matrix) -> bool {
    (1..points.rows()).all(|r| points.row(r) == points.row(0))
}

/// Spectral clustering into `k` groups; labels lie in `0..k`.
///
/// When all points coincide there is no spectral structure; the spectral
/// embedding is then a constant row per point, so k-means returns every point
/// in cluster 0 except its forced second seed.
pub fn spectral_cluster(embeddings: &Matrix, k: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    let n = embeddings.rows();
    if k < 2 || k > n {
        return Err(Error::Argument(format!(
            "spectral clustering needs 2 <= k <= {n}, got {k}"
        )));
    }
    if all_rows_identical(embeddings) {
        let constant = Matrix::filled(n, k, 0.0);
        return Ok(kmeans(&constant, k, rng)?.labels);
    }
    let lap = normalized_laplacian(embeddings)?;
    let eig = sym_eig(&lap)?;
    let mut rows = eig.vectors.slice_cols(0, k)?;
    for r in 0..n {
        let norm = rows.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            rows.row_mut(r).iter_mut().for_each(|x| *x /= norm);
        }
    }
    Ok(kmeans(&rows, k, rng)?.labels)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient with Euclidean distance; singleton clusters score 0.
pub fn silhouette(points: &Matrix, labels: &[usize]) -> Result<f64> {
    let n = points.rows();
    if labels.len() != n {
        return Err(Error::Argument(format!(
            "{} labels for {n} points",
            labels.len()
        )));
    }
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        clusters.entry(l).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(Error::Argument(
            "silhouette is undefined for fewer than two clusters".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = &clusters[&labels[i]];
        if own.len() == 1 {
            continue;
        }
        let a = own
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| euclidean(points.row(i), points.row(j)))
            .sum::<f64>()
            / (own.len() - 1) as f64;
        let b = clusters
            .iter()
            .filter(|(&l, _)| l != labels[i])
            .map(|(_, members)| {
                members
                    .iter()
                    .map(|&j| euclidean(points.row(i), points.row(j)))
                    .sum::<f64>()
                    / members.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug)]
pub struct KSelection {
    pub k_best: usize,
    pub silhouette_by_k: BTreeMap<usize, f64>,
    pub labels: Vec<usize>,
}

/// Runs spectral clustering for every k in `k_min..=k_max` (each with its own
/// forked stream) and keeps the silhouette maximizer; ties go to the smaller k.
pub fn select_k(embeddings: &Matrix, k_min: usize, k_max: usize, rng: &RngStream) -> Result<KSelection> {
    let n = embeddings.rows();
    if k_min < 2 || k_min > k_max || k_max + 1 > n {
        return Err(Error::Argument(format!(
            "cluster range [{k_min}, {k_max}] invalid for {n} points (need 2 <= kmin <= kmax <= points - 1)"
        )));
    }
    let mut curve = BTreeMap::new();
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for k in k_min..=k_max {
        let labels = spectral_cluster(embeddings, k, &mut rng.fork(k as u64))?;
        let distinct = {
            let mut l = labels.clone();
            l.sort_unstable();
            l.dedup();
            l.len()
        };
        let score = if distinct < 2 {
            -1.0
        } else {
            silhouette(embeddings, &labels)?
        };
        curve.insert(k, score);
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((k, score, labels));
        }
    }
    let (k_best, _, labels) = best.expect("range is nonempty");
    Ok(KSelection {
        k_best,
        silhouette_by_k: curve,
        labels,
    })
}

/// Inclusive search range for the number of clusters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KRange {
    pub min: usize,
    pub max: usize,
}

impl KRange {
    /// `[2, min(8, points − 1)]`.
    pub fn default_for(points: usize) -> Self {
        Self {
            min: 2,
            max: 8.min(points.saturating_sub(1)),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KRanges {
    pub domain: Option<KRange>,
    pub slot: Option<KRange>,
}

/// Clusters of domains (𝒟, `m` groups) and slot prompts (𝒳, `n` groups).
#[derive(Clone, Debug, PartialEq)]
pub struct JointClusterModel {
    pub domain_keys: Vec<String>,
    pub domain_labels: Vec<usize>,
    /// m × dim, unit rows
    pub domain_centroids: Matrix,
    pub slot_keys: Vec<String>,
    pub slot_labels: Vec<usize>,
    /// n × dim, unit rows
    pub slot_centroids: Matrix,
    pub m: usize,
    pub n: usize,
    pub domain_silhouette: BTreeMap<usize, f64>,
    pub slot_silhouette: BTreeMap<usize, f64>,
}

struct FamilyResult {
    k: usize,
    labels: Vec<usize>,
    curve: BTreeMap<usize, f64>,
    centroids: Matrix,
}

fn embed_family(keys: &[String], table: &EmbeddingTable, fallback: Option<ToyFallback>) -> Result<Matrix> {
    let rows = keys
        .iter()
        .map(|k| lookup_or_toy(k, table, fallback))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// Unit-normalized mean of the members of each cluster.
pub fn centroids(points: &Matrix, labels: &[usize], k: usize) -> Result<Matrix> {
    let mut out = Matrix::zeros(k, points.cols());
    for c in 0..k {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            return Err(Error::Argument(format!("cluster {c} has no members")));
        }
        let mean = points.select_rows(&members).mean_rows();
        let unit = normalize(mean.row(0)).or_else(|_| normalize(points.row(members[0])))?;
        out.row_mut(c).copy_from_slice(&unit);
    }
    Ok(out)
}

fn cluster_family(points: &Matrix, range: Option<KRange>, rng: &RngStream) -> Result<FamilyResult> {
    let n = points.rows();
    if n < 3 {
        // too few points for a silhouette search: every point is its own cluster
        let labels: Vec<usize> = (0..n).collect();
        return Ok(FamilyResult {
            k: n,
            centroids: centroids(points, &labels, n)?,
            labels,
            curve: BTreeMap::new(),
        });
    }
    let range = range.unwrap_or_else(|| KRange::default_for(n));
    let sel = select_k(points, range.min, range.max, rng)?;
    Ok(FamilyResult {
        k: sel.k_best,
        centroids: centroids(points, &sel.labels, sel.k_best)?,
        labels: sel.labels,
        curve: sel.silhouette_by_k,
    })
}

/// Independent silhouette-selected spectral clusterings of domain names and slot prompts.
pub fn joint_cluster(
    domain_names: &[String],
    slot_prompts: &[String],
    table: &EmbeddingTable,
    fallback: Option<ToyFallback>,
    ranges: KRanges,
    rng: &RngStream,
) -> Result<JointClusterModel> {
    if domain_names.len() < 2 || slot_prompts.len() < 2 {
        return Err(Error::Argument(format!(
            "joint clustering needs at least 2 domains and 2 slot prompts, got {} and {}",
            domain_names.len(),
            slot_prompts.len()
        )));
    }
    let domains = embed_family(domain_names, table, fallback)?;
    let slots = embed_family(slot_prompts, table, fallback)?;
    let d = cluster_family(&domains, ranges.domain, &rng.fork(1))?;
    let s = cluster_family(&slots, ranges.slot, &rng.fork(2))?;
    Ok(JointClusterModel {
        domain_keys: domain_names.to_vec(),
        domain_labels: d.labels,
        domain_centroids: d.centroids,
        slot_keys: slot_prompts.to_vec(),
        slot_labels: s.labels,
        slot_centroids: s.centroids,
        m: d.k,
        n: s.k,
        domain_silhouette: d.curve,
        slot_silhouette: s.curve,
    })
}

/// Same cluster counts as `reference`, but members assigned by a seeded random
/// partition (every cluster nonempty). Used by the no-clustering ablation.
pub fn random_partition_model(
    reference: &JointClusterModel,
    table: &EmbeddingTable,
    fallback: Option<ToyFallback>,
    rng: &mut RngStream,
) -> Result<JointClusterModel> {
    let mut partition = |count: usize, k: usize| -> Vec<usize> {
        let mut labels: Vec<usize> = (0..count).map(|i| i % k).collect();
        rng.shuffle(&mut labels);
        labels
    };
    let domain_labels = partition(reference.domain_keys.len(), reference.m);
    let slot_labels = partition(reference.slot_keys.len(), reference.n);
    let domains = embed_family(&reference.domain_keys, table, fallback)?;
    let slots = embed_family(&reference.slot_keys, table, fallback)?;
    Ok(JointClusterModel {
        domain_keys: reference.domain_keys.clone(),
        domain_centroids: centroids(&domains, &domain_labels, reference.m)?,
        domain_labels,
        slot_keys: reference.slot_keys.clone(),
        slot_centroids: centroids(&slots, &slot_labels, reference.n)?,
        slot_labels,
        m: reference.m,
        n: reference.n,
        domain_silhouette: BTreeMap::new(),
        slot_silhouette: BTreeMap::new(),
    })
}

/// On-disk cluster manifest consumed by initialization and the adapters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterManifest {
    pub m: usize,
    pub n: usize,
    pub domain_labels: BTreeMap<String, usize>,
    pub slot_labels: BTreeMap<String, usize>,
    /// `[domain centroids (m rows), slot centroids (n rows)]`
    pub centroids: Vec<Vec<Vec<f64>>>,
    /// family (`"domain"` / `"slot"`) → k → silhouette
    pub silhouette_by_k: BTreeMap<String, BTreeMap<String, f64>>,
    pub dim: usize,
    pub affinity: String,
    pub laplacian: String,
    pub silhouette_distance: String,
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn curve_map(curve: &BTreeMap<usize, f64>) -> BTreeMap<String, f64> {
    curve.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl JointClusterModel {
    pub fn dim(&self) -> usize {
        self.domain_centroids.cols()
    }

    pub fn to_manifest(&self) -> ClusterManifest {
        let mut silhouette_by_k = BTreeMap::new();
        silhouette_by_k.insert("domain".to_string(), curve_map(&self.domain_silhouette));
        silhouette_by_k.insert("slot".to_string(), curve_map(&self.slot_silhouette));
        ClusterManifest {
            m: self.m,
            n: self.n,
            domain_labels: self.domain_keys.iter().cloned().zip(self.domain_labels.iter().copied()).collect(),
            slot_labels: self.slot_keys.iter().cloned().zip(self.slot_labels.iter().copied()).collect(),
            centroids: vec![matrix_rows(&self.domain_centroids), matrix_rows(&self.slot_centroids)],
            silhouette_by_k,
            dim: self.dim(),
            affinity: "shifted_cosine".into(),
            laplacian: "symmetric_normalized".into(),
            silhouette_distance: "euclidean".into(),
        }
    }

    /// Slot-cluster label for a canonical prompt key.
    pub fn slot_label(&self, key: &str) -> Option<usize> {
        self.slot_keys.iter().position(|k| k == key).map(|i| self.slot_labels[i])
    }
}

impl ClusterManifest {
    pub fn to_model(&self) -> Result<JointClusterModel> {
        if self.centroids.len() != 2 {
            return Err(Error::Format("manifest centroids must hold [domain, slot] blocks".into()));
        }
        let domain_centroids = Matrix::from_rows(&self.centroids[0])?;
        let slot_centroids = Matrix::from_rows(&self.centroids[1])?;
        if domain_centroids.rows() != self.m || slot_centroids.rows() != self.n {
            return Err(Error::Format(format!(
                "manifest declares m={}, n={} but stores {} and {} centroids",
                self.m,
                self.n,
                domain_centroids.rows(),
                slot_centroids.rows()
            )));
        }
        let parse_curve = |family: &str| -> Result<BTreeMap<usize, f64>> {
            self.silhouette_by_k
                .get(family)
                .map(|c| {
                    c.iter()
                        .map(|(k, v)| {
                            k.parse::<usize>()
                                .map(|k| (k, *v))
                                .map_err(|_| Error::Format(format!("bad cluster count {k:?}")))
                        })
                        .collect()
                })
                .unwrap_or_else(|| Ok(BTreeMap::new()))
        };
        Ok(JointClusterModel {
            domain_keys: self.domain_labels.keys().cloned().collect(),
            domain_labels: self.domain_labels.values().copied().collect(),
            domain_centroids,
            slot_keys: self.slot_labels.keys().cloned().collect(),
            slot_labels: self.slot_labels.values().copied().collect(),
            slot_centroids,
            m: self.m,
            n: self.n,
            domain_silhouette: parse_curve("domain")?,
            slot_silhouette: parse_curve("slot")?,
        })
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the canonical JSON text.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json_string()?.as_bytes())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, self.to_json_string()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
