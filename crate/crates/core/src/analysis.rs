//! Diagnostics over trained experts: mask overlap, capacity by layer type and
//! depth, and clustering of per-domain routing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayerId;
use crate::upcycle::UpcycledModel;

/// Binary expert masks of one attached tensor over all of its gated units.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMasks {
    pub layer_id: LayerId,
    /// Parameters controlled by one gate.
    pub params_per_gate: usize,
    /// `M` masks of equal length.
    pub masks: Vec<Vec<bool>>,
}

/// Models whose experts can be inspected as masks.
pub trait ExpertSupport {
    fn experts(&self) -> usize;
    fn expert_masks(&self) -> Vec<LayerMasks>;
}

impl ExpertSupport for UpcycledModel {
    fn experts(&self) -> usize {
        UpcycledModel::experts(self)
    }

    fn expert_masks(&self) -> Vec<LayerMasks> {
        self.attached()
            .map(|p| LayerMasks {
                layer_id: p.layer_id(),
                params_per_gate: p.params_per_gate(),
                masks: p
                    .median_gates()
                    .into_iter()
                    .map(|z| z.into_iter().map(|v| v != 0.0).collect())
                    .collect(),
            })
            .collect()
    }
}

fn jaccard(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "masks of length {} and {} cannot be compared",
            a.len(),
            b.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Size of the shared support over the size of the joint support; 0 when both are empty.
pub fn overlap_ratio(a: &[f64], b: &[f64]) -> Result<f64> {
    let sa: Vec<bool> = a.iter().map(|&v| v != 0.0).collect();
    let sb: Vec<bool> = b.iter().map(|&v| v != 0.0).collect();
    jaccard(&sa, &sb)
}

fn overlap_matrix(masks: &[Vec<bool>]) -> Result<Vec<Vec<f64>>> {
    let m = masks.len();
    let mut out = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i..m {
            let r = jaccard(&masks[i], &masks[j])?;
            out[i][j] = r;
            out[j][i] = r;
        }
    }
    Ok(out)
}

fn mean_off_diagonal(matrix: &[Vec<f64>]) -> f64 {
    let m = matrix.len();
    if m < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            sum += matrix[i][j];
        }
    }
    sum / (m * (m - 1) / 2) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOverlap {
    pub layer: LayerId,
    pub matrix: Vec<Vec<f64>>,
}

/// Pairwise overlap of expert supports, over all attached layers and per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub experts: usize,
    pub matrix: Vec<Vec<f64>>,
    pub mean_off_diagonal: f64,
    pub per_layer: Vec<LayerOverlap>,
}

pub fn overlap_report(model: &dyn ExpertSupport) -> Result<OverlapReport> {
    let layers = model.expert_masks();
    let m = model.experts();
    let mut concat = vec![Vec::new(); m];
    let mut per_layer = Vec::with_capacity(layers.len());
    for l in &layers {
        for (c, mask) in concat.iter_mut().zip(&l.masks) {
            c.extend_from_slice(mask);
        }
        per_layer.push(LayerOverlap {
            layer: l.layer_id,
            matrix: overlap_matrix(&l.masks)?,
        });
    }
    let matrix = overlap_matrix(&concat)?;
    Ok(OverlapReport {
        experts: m,
        mean_off_diagonal: mean_off_diagonal(&matrix),
        matrix,
        per_layer,
    })
}

/// Nonzero fraction of each expert's parameters within one group, with mean and spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityStat {
    pub per_expert: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation across experts.
    pub std: f64,
}

impl CapacityStat {
    fn from_counts(nonzero: &[f64], total: f64) -> Self {
        let per_expert: Vec<f64> = nonzero
            .iter()
            .map(|&n| if total == 0.0 { 0.0 } else { n / total })
            .collect();
        let k = per_expert.len().max(1) as f64;
        let mean = per_expert.iter().sum::<f64>() / k;
        let var = per_expert.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / k;
        CapacityStat {
            per_expert,
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCapacity {
    pub layer: LayerId,
    pub layer_type: String,
    #[serde(flatten)]
    pub stat: CapacityStat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub experts: usize,
    pub by_type: BTreeMap<String, CapacityStat>,
    /// Keyed by block index, or `global` for tensors outside the blocks.
    pub by_depth: BTreeMap<String, CapacityStat>,
    pub per_layer: Vec<LayerCapacity>,
}

/// Parameter-weighted nonzero fractions grouped by layer type and by depth.
pub fn capacity_report(model: &dyn ExpertSupport) -> CapacityReport {
    let m = model.experts();
    let mut by_type: BTreeMap<String, (Vec<f64>, f64)> = BTreeMap::new();
    let mut by_depth: BTreeMap<String, (Vec<f64>, f64)> = BTreeMap::new();
    let mut per_layer = Vec::new();
    for l in model.expert_masks() {
        let w = l.params_per_gate as f64;
        let len = l.masks.first().map_or(0, Vec::len) as f64;
        let nonzero: Vec<f64> = l
            .masks
            .iter()
            .map(|z| w * z.iter().filter(|&&b| b).count() as f64)
            .collect();
        let tag = l.layer_id.kind.type_tag().to_string();
        let depth = l.layer_id.depth.map_or_else(|| "global".to_string(), |d| d.to_string());
        for (key, map) in [(tag.clone(), &mut by_type), (depth, &mut by_depth)] {
            let e = map.entry(key).or_insert_with(|| (vec![0.0; m], 0.0));
            e.0.iter_mut().zip(&nonzero).for_each(|(a, b)| *a += b);
            e.1 += w * len;
        }
        per_layer.push(LayerCapacity {
            layer: l.layer_id,
            layer_type: tag,
            stat: CapacityStat::from_counts(&nonzero, w * len),
        });
    }
    let finish = |map: BTreeMap<String, (Vec<f64>, f64)>| {
        map.into_iter()
            .map(|(k, (nz, total))| (k, CapacityStat::from_counts(&nz, total)))
            .collect()
    };
    CapacityReport {
        experts: m,
        by_type: finish(by_type),
        by_depth: finish(by_depth),
        per_layer,
    }
}

/// `1 - cos(u, v)`; zero vectors are rejected.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Contract(format!(
            "vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !(nu > 0.0 && nv > 0.0) || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::Degenerate("cosine distance needs finite nonzero vectors".into()));
    }
    if u == v {
        return Ok(0.0);
    }
    Ok((1.0 - dot / (nu * nv)).max(0.0))
}

/// Largest cosine distance between any two named vectors.
pub fn max_pairwise_distance(vectors: &BTreeMap<String, Vec<f64>>) -> Result<f64> {
    let vs: Vec<&Vec<f64>> = vectors.values().collect();
    let mut best = 0.0f64;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            best = best.max(cosine_distance(vs[i], vs[j])?);
        }
    }
    Ok(best)
}

/// A leaf domain, or the merge of two subtrees at some distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DendrogramNode {
    Leaf {
        name: String,
    },
    Merge {
        distance: f64,
        size: usize,
        children: Vec<DendrogramNode>,
    },
}

impl DendrogramNode {
    pub fn leaves(&self) -> Vec<String> {
        match self {
            DendrogramNode::Leaf { name } => vec![name.clone()],
            DendrogramNode::Merge { children, .. } => children.iter().flat_map(DendrogramNode::leaves).collect(),
        }
    }
}

/// One agglomeration step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    pub left: Vec<String>,
    pub right: Vec<String>,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub root: DendrogramNode,
    /// Merges in the order they happened.
    pub merges: Vec<MergeStep>,
}

const TIE_TOL: f64 = 1e-12;

struct Cluster {
    node: DendrogramNode,
    members: Vec<usize>,
    /// Smallest member name, used to break distance ties.
    key: String,
}

/// Average-linkage agglomerative clustering under cosine distance.
///
/// Ties are broken by the lexicographically smallest pair of cluster keys,
/// where a cluster's key is its smallest domain name.
pub fn routing_dendrogram(vectors: &BTreeMap<String, Vec<f64>>) -> Result<Dendrogram> {
    if vectors.len() < 2 {
        return Err(Error::Degenerate(format!(
            "clustering needs at least 2 domains, got {}",
            vectors.len()
        )));
    }
    let names: Vec<&String> = vectors.keys().collect();
    let vs: Vec<&Vec<f64>> = vectors.values().collect();
    let n = vs.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                dist[i][j] = cosine_distance(vs[i], vs[j]).map_err(|e| match e {
                    Error::Degenerate(_) => {
                        Error::Degenerate(format!("activation vector of {:?} or {:?} is zero", names[i], names[j]))
                    }
                    other => other,
                })?;
            }
        }
    }
    let mut clusters: Vec<Cluster> = names
        .iter()
        .enumerate()
        .map(|(i, name)| Cluster {
            node: DendrogramNode::Leaf { name: (*name).clone() },
            members: vec![i],
            key: (*name).clone(),
        })
        .collect();
    let mut merges = Vec::with_capacity(n - 1);
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let (ca, cb) = (&clusters[a], &clusters[b]);
                let mut sum = 0.0;
                for &i in &ca.members {
                    for &j in &cb.members {
                        sum += dist[i][j];
                    }
                }
                let d = sum / (ca.members.len() * cb.members.len()) as f64;
                let (lo, hi) = if ca.key < cb.key { (a, b) } else { (b, a) };
                best = match best {
                    None => Some((d, lo, hi)),
                    Some((bd, bl, bh)) => {
                        let wins = d < bd - TIE_TOL
                            || ((d - bd).abs() <= TIE_TOL
                                && (&clusters[lo].key, &clusters[hi].key) < (&clusters[bl].key, &clusters[bh].key));
                        Some(if wins { (d, lo, hi) } else { (bd, bl, bh) })
                    }
                };
            }
        }
        let (d, lo, hi) = best.expect("at least two clusters");
        let (first, second) = if lo > hi { (lo, hi) } else { (hi, lo) };
        let x = clusters.remove(first);
        let y = clusters.remove(second);
        let (left, right) = if x.key < y.key { (x, y) } else { (y, x) };
        merges.push(MergeStep {
            left: left.node.leaves(),
            right: right.node.leaves(),
            distance: d,
        });
        let mut members = left.members;
        members.extend(right.members);
        clusters.push(Cluster {
            node: DendrogramNode::Merge {
                distance: d,
                size: members.len(),
                children: vec![left.node, right.node],
            },
            members,
            key: left.key,
        });
    }
    Ok(Dendrogram {
        root: clusters.pop().expect("one cluster left").node,
        merges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{AttachMode, AttachmentPolicy};
    use crate::model::{LayerKind, TinyTransformer, TinyTransformerConfig};
    use crate::upcycle::UpcycleSettings;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> TinyTransformerConfig {
        TinyTransformerConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_hidden: 16,
            vocab: 32,
            max_seq: 16,
        }
    }

    fn model(policy: AttachmentPolicy) -> UpcycledModel {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seed = TinyTransformer::init(tiny(), &mut rng).unwrap();
        let settings = UpcycleSettings {
            policy,
            ..Default::default()
        };
        UpcycledModel::attach(seed, settings, &mut rng).unwrap()
    }

    fn set_all(m: &mut UpcycledModel, log_phi: f64) {
        for p in m.attached_mut() {
            for g in p.gates_mut() {
                g.log_phi.iter_mut().for_each(|v| *v = log_phi);
            }
        }
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(overlap_ratio(&[1.0, 0.5, 0.0], &[0.2, 0.5, 0.0]).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&[1.0, 0.0], &[0.0, 0.3]).unwrap(), 0.0);
        let r = overlap_ratio(&[1.0, 0.5, 0.0, 0.0], &[0.0, 0.3, 0.7, 0.0]).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(overlap_ratio(&[0.0; 3], &[0.0; 3]).unwrap(), 0.0);
        assert!(matches!(overlap_ratio(&[1.0], &[1.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn fresh_model_overlaps_fully() {
        let m = model(AttachmentPolicy::default());
        let r = overlap_report(&m).unwrap();
        assert_eq!(r.matrix, vec![vec![1.0; 4]; 4]);
        assert_eq!(r.per_layer.len(), m.wrapped_count());
        assert_eq!(r.mean_off_diagonal, 1.0);
    }

    #[test]
    fn capacity_extremes() {
        let mut m = model(AttachmentPolicy::default());
        set_all(&mut m, -10.0);
        let r = capacity_report(&m);
        assert!(r
            .by_type
            .values()
            .chain(r.by_depth.values())
            .all(|s| s.mean == 0.0 && s.std == 0.0));
        set_all(&mut m, 10.0);
        let r = capacity_report(&m);
        assert!(r.by_type.values().chain(r.by_depth.values()).all(|s| s.mean == 1.0));
        assert!(r.by_type.contains_key("norm") && r.by_depth.contains_key("global"));
    }

    #[test]
    fn half_masked_layer_reports_half() {
        let key = LayerId::block(LayerKind::Key, 1);
        let mut m = model(AttachmentPolicy {
            mode: AttachMode::Explicit(vec![key.name()]),
            ..Default::default()
        });
        set_all(&mut m, 10.0);
        let p = m.attached_mut().next().unwrap();
        let g = &mut p.gates_mut()[1];
        let half = g.log_phi.len() / 2;
        g.log_phi[..half].iter_mut().for_each(|v| *v = -10.0);
        let r = capacity_report(&m);
        let s = &r.by_type["key"];
        assert_eq!(s.per_expert, vec![1.0, 0.5, 1.0, 1.0]);
        assert!((s.mean - 0.875).abs() < 1e-15);
        assert_eq!(r.by_depth["1"], *s);
    }

    #[test]
    fn disjoint_experts_have_zero_off_diagonal() {
        let mut m = model(AttachmentPolicy::ffn_only());
        for p in m.attached_mut() {
            let len = p.gate_len();
            for (i, g) in p.gates_mut().iter_mut().enumerate() {
                for (j, v) in g.log_phi.iter_mut().enumerate() {
                    *v = if j % 4 == i && j < len { 10.0 } else { -10.0 };
                }
            }
        }
        let r = overlap_report(&m).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(r.matrix[i][j], (i == j) as u8 as f64);
            }
        }
    }

    fn named(pairs: &[(&str, Vec<f64>)]) -> BTreeMap<String, Vec<f64>> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn identical_vectors_merge_at_zero() {
        let d = routing_dendrogram(&named(&[("a", vec![0.5, 0.5]), ("b", vec![0.5, 0.5])])).unwrap();
        assert_eq!(d.merges[0].distance, 0.0);
        assert!(matches!(d.root, DendrogramNode::Merge { size: 2, .. }));
    }

    #[test]
    fn shared_pair_merges_first() {
        let v = named(&[("x", vec![1.0, 0.0]), ("y", vec![0.0, 1.0]), ("z", vec![0.0, 1.0])]);
        let d = routing_dendrogram(&v).unwrap();
        assert_eq!(d.merges[0].left, vec!["y"]);
        assert_eq!(d.merges[0].right, vec!["z"]);
        assert_eq!(d.merges[1].distance, 1.0);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = named(&[("c", vec![1.0, 0.0]), ("b", vec![1.0, 0.0]), ("a", vec![1.0, 0.0])]);
        let d = routing_dendrogram(&v).unwrap();
        assert_eq!(
            (d.merges[0].left.clone(), d.merges[0].right.clone()),
            (vec!["a".into()], vec!["b".to_string()])
        );
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            routing_dendrogram(&named(&[("a", vec![1.0])])),
            Err(Error::Degenerate(_))
        ));
        let v = named(&[("a", vec![1.0, 0.0]), ("b", vec![0.0, 0.0])]);
        assert!(matches!(routing_dendrogram(&v), Err(Error::Degenerate(_))));
    }

    /// Every merge order with size-weighted linkage updates, keeping the one
    /// whose merge distances are lexicographically smallest.
    fn brute_force(vs: &[Vec<f64>]) -> Vec<(Vec<usize>, f64)> {
        fn go(
            clusters: Vec<Vec<usize>>,
            d: Vec<Vec<f64>>,
            path: Vec<(Vec<usize>, f64)>,
            best: &mut Option<Vec<(Vec<usize>, f64)>>,
        ) {
            if clusters.len() == 1 {
                let better = match best {
                    None => true,
                    Some(b) => path.iter().map(|p| p.1).lt(b.iter().map(|p| p.1)),
                };
                if better {
                    *best = Some(path);
                }
                return;
            }
            for a in 0..clusters.len() {
                for b in a + 1..clusters.len() {
                    let (na, nb) = (clusters[a].len() as f64, clusters[b].len() as f64);
                    let mut merged = clusters[a].clone();
                    merged.extend(&clusters[b]);
                    merged.sort();
                    let mut next = Vec::new();
                    let mut rows = Vec::new();
                    for k in 0..clusters.len() {
                        if k != a && k != b {
                            next.push(clusters[k].clone());
                            rows.push(k);
                        }
                    }
                    let mut nd = vec![vec![0.0; rows.len() + 1]; rows.len() + 1];
                    for (x, &i) in rows.iter().enumerate() {
                        for (y, &j) in rows.iter().enumerate() {
                            nd[x][y] = d[i][j];
                        }
                        let l = (na * d[a][i] + nb * d[b][i]) / (na + nb);
                        nd[x][rows.len()] = l;
                        nd[rows.len()][x] = l;
                    }
                    next.push(merged.clone());
                    let mut p = path.clone();
                    p.push((merged, d[a][b]));
                    go(next, nd, p, best);
                }
            }
        }
        let n = vs.len();
        let d: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            0.0
                        } else {
                            cosine_distance(&vs[i], &vs[j]).unwrap()
                        }
                    })
                    .collect()
            })
            .collect();
        let mut best = None;
        go((0..n).map(|i| vec![i]).collect(), d, Vec::new(), &mut best);
        best.unwrap()
    }

    #[test]
    fn matches_brute_force_linkage() {
        let vs = vec![
            vec![1.0, 0.1, 0.0],
            vec![0.9, 0.3, 0.1],
            vec![0.0, 1.0, 0.2],
            vec![0.1, 0.2, 1.0],
        ];
        let names = ["a", "b", "c", "d"];
        let map: BTreeMap<String, Vec<f64>> = names.iter().map(|s| s.to_string()).zip(vs.clone()).collect();
        let d = routing_dendrogram(&map).unwrap();
        let oracle = brute_force(&vs);
        assert_eq!(d.merges.len(), oracle.len());
        for (m, (members, dist)) in d.merges.iter().zip(&oracle) {
            let mut got: Vec<usize> = m
                .left
                .iter()
                .chain(&m.right)
                .map(|s| names.iter().position(|n| n == s).unwrap())
                .collect();
            got.sort();
            assert_eq!(&got, members);
            assert!((m.distance - dist).abs() < 1e-12);
        }
    }

    #[test]
    fn nested_json_shape() {
        let v = named(&[("a", vec![1.0, 0.0]), ("b", vec![0.9, 0.1]), ("c", vec![0.0, 1.0])]);
        let j = serde_json::to_value(routing_dendrogram(&v).unwrap().root).unwrap();
        assert_eq!(j["children"][1]["name"], "c");
        assert_eq!(j["children"][0]["children"][0]["name"], "a");
    }

    proptest! {
        #[test]
        fn overlap_matrix_is_symmetric_in_range(bits in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 12), 2..6)) {
            let m = overlap_matrix(&bits).unwrap();
            for i in 0..m.len() {
                prop_assert_eq!(m[i][i], if bits[i].iter().any(|&b| b) { 1.0 } else { 0.0 });
                for j in 0..m.len() {
                    prop_assert_eq!(m[i][j], m[j][i]);
                    prop_assert!((0.0..=1.0).contains(&m[i][j]));
                }
            }
        }

        #[test]
        fn merge_distances_never_decrease(vs in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 4), 2..7)) {
            let map: BTreeMap<String, Vec<f64>> = vs.into_iter().enumerate().map(|(i, v)| (format!("d{i}"), v)).collect();
            let d = routing_dendrogram(&map).unwrap();
            for w in d.merges.windows(2) {
                prop_assert!(w[1].distance >= w[0].distance - 1e-12);
            }
            prop_assert_eq!(d.root.leaves().len(), map.len());
        }
    }
}
