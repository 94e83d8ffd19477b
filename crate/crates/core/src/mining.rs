//! Candidate-subgraph extraction and prototype merging.
//!
//! Candidates are ego-rooted, depth-limited induced subgraphs over work-zone
//! nodes. Merging buckets candidates by structural signature, gates pairs by
//! scale, tests relation-preserving containment and joins matching pairs with
//! a union-find. Each component is represented by its smallest member.

use std::collections::{BTreeMap, HashSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_graph::{validate, Edge, Node, NodeLabel, Relation, SceneGraph, EGO_ID};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningParams {
    /// Hop limit of the breadth-first search from ego.
    pub max_hops: usize,
    /// Minimum vertex count; smaller candidates are discarded.
    pub min_size: usize,
}

impl Default for MiningParams {
    fn default() -> Self {
        Self {
            max_hops: 2,
            min_size: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateThresholds {
    /// Meters.
    pub max_depth_diff: f64,
    /// Pixels.
    pub max_radius_diff: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        Self {
            max_depth_diff: 1.0,
            max_radius_diff: 150.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSubgraph {
    pub source_frame: String,
    pub nodes: BTreeMap<String, Node>,
    /// Induced edges, sorted.
    pub edges: Vec<Edge>,
    /// Mean depth of the work-zone nodes, meters.
    pub mean_depth: f64,
    /// Mean distance of work-zone box centres to the image centre, pixels.
    pub mean_radius: f64,
}

impl CandidateSubgraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn labels(&self) -> impl Iterator<Item = NodeLabel> + '_ {
        self.nodes.values().map(|n| n.label)
    }

    pub fn relations(&self) -> impl Iterator<Item = Relation> + '_ {
        self.edges.iter().map(|e| e.relation)
    }

    pub fn canonical_string(&self) -> String {
        serde_json::to_string(self).expect("candidate serializes")
    }

    /// Appearance embeddings of the work-zone instances that carry one.
    pub fn instance_embeddings(&self) -> Vec<&[f64]> {
        self.nodes.values().filter_map(|n| n.appearance.as_deref()).collect()
    }
}

/// Depth-limited BFS from ego over outgoing edges, expanding only work-zone
/// nodes. Returns `None` when the vertex set is smaller than `min_size`.
pub fn extract_candidate(graph: &SceneGraph, params: &MiningParams) -> Result<Option<CandidateSubgraph>> {
    if params.max_hops < 1 || params.min_size < 1 {
        return Err(Error::invalid("hop limit and minimum size must be at least 1"));
    }
    let violations = validate(graph);
    if !violations.is_empty() {
        let listed: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(Error::schema(format!(
            "frame {}: invalid scene graph: {}",
            graph.frame_id,
            listed.join("; ")
        )));
    }

    let mut dist: BTreeMap<&str, usize> = BTreeMap::new();
    dist.insert(EGO_ID, 0);
    let mut queue = VecDeque::from([EGO_ID]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u];
        if d >= params.max_hops {
            continue;
        }
        for e in graph.outgoing(u) {
            let v = e.dst.as_str();
            if dist.contains_key(v) {
                continue;
            }
            if graph.nodes[v].label.is_work_zone() {
                dist.insert(v, d + 1);
                queue.push_back(v);
            }
        }
    }

    if dist.len() < params.min_size {
        return Ok(None);
    }
    let nodes: BTreeMap<String, Node> = dist
        .keys()
        .map(|&id| (id.to_owned(), graph.nodes[id].clone()))
        .collect();
    let edges: Vec<Edge> = graph
        .edges
        .iter()
        .filter(|e| nodes.contains_key(&e.src) && nodes.contains_key(&e.dst))
        .cloned()
        .collect();

    let (cx, cy) = graph.image_center;
    let wz: Vec<&Node> = nodes.values().filter(|n| n.label.is_work_zone()).collect();
    let mean = |vals: Vec<f64>| {
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let mean_depth = mean(wz.iter().filter_map(|n| n.depth).collect());
    let mean_radius = mean(
        wz.iter()
            .filter_map(|n| n.bbox)
            .map(|b| {
                let c = b.center();
                (c.x - cx).hypot(c.y - cy)
            })
            .collect(),
    );

    Ok(Some(CandidateSubgraph {
        source_frame: graph.frame_id.clone(),
        nodes,
        edges,
        mean_depth,
        mean_radius,
    }))
}

/// Structural signature: sorted label and relation multisets plus sizes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub labels: Vec<NodeLabel>,
    pub relations: Vec<Relation>,
    pub node_count: usize,
    pub edge_count: usize,
}

pub fn signature(sub: &CandidateSubgraph) -> Signature {
    let mut labels: Vec<NodeLabel> = sub.labels().collect();
    labels.sort();
    let mut relations: Vec<Relation> = sub.relations().collect();
    relations.sort();
    Signature {
        node_count: labels.len(),
        edge_count: relations.len(),
        labels,
        relations,
    }
}

/// Scale gate applied to pairs inside a signature bucket.
pub fn gate(a: &CandidateSubgraph, b: &CandidateSubgraph, t: &GateThresholds) -> bool {
    (a.mean_depth - b.mean_depth).abs() <= t.max_depth_diff
        && (a.mean_radius - b.mean_radius).abs() <= t.max_radius_diff
}

/// Compact index form used by the containment search.
struct Indexed {
    labels: Vec<NodeLabel>,
    edges: Vec<(usize, usize, Relation)>,
    edge_set: HashSet<(usize, usize, Relation)>,
    out_deg: Vec<usize>,
    in_deg: Vec<usize>,
}

impl Indexed {
    fn new(sub: &CandidateSubgraph) -> Self {
        let index: BTreeMap<&str, usize> = sub.nodes.keys().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let labels: Vec<NodeLabel> = sub.labels().collect();
        let mut edges: Vec<(usize, usize, Relation)> = sub
            .edges
            .iter()
            .map(|e| (index[e.src.as_str()], index[e.dst.as_str()], e.relation))
            .collect();
        edges.sort();
        edges.dedup();
        let mut out_deg = vec![0; labels.len()];
        let mut in_deg = vec![0; labels.len()];
        for &(u, v, _) in &edges {
            out_deg[u] += 1;
            in_deg[v] += 1;
        }
        Self {
            edge_set: edges.iter().copied().collect(),
            labels,
            edges,
            out_deg,
            in_deg,
        }
    }
}

/// Relation-preserving containment: is there a label-preserving injection of
/// `small` into `large` that maps every edge of `small` onto an edge of
/// `large` with the same relation?
///
/// A `small` with more vertices than `large` is never contained.
pub fn contains(small: &CandidateSubgraph, large: &CandidateSubgraph) -> bool {
    let s = Indexed::new(small);
    let l = Indexed::new(large);
    if s.labels.len() > l.labels.len() || s.edges.len() > l.edges.len() {
        return false;
    }

    let mut label_budget: BTreeMap<NodeLabel, isize> = BTreeMap::new();
    for lab in &l.labels {
        *label_budget.entry(*lab).or_default() += 1;
    }
    for lab in &s.labels {
        let slot = label_budget.entry(*lab).or_default();
        *slot -= 1;
        if *slot < 0 {
            return false;
        }
    }

    // Candidate targets per small node, filtered by label and degree.
    let domains: Vec<Vec<usize>> = (0..s.labels.len())
        .map(|u| {
            (0..l.labels.len())
                .filter(|&x| l.labels[x] == s.labels[u] && l.out_deg[x] >= s.out_deg[u] && l.in_deg[x] >= s.in_deg[u])
                .collect()
        })
        .collect();
    if domains.iter().any(Vec::is_empty) {
        return false;
    }

    // Most constrained first, then prefer nodes connected to the ones already
    // ordered so edge checks fire early.
    let n = s.labels.len();
    let mut adjacency = vec![Vec::new(); n];
    for &(u, v, _) in &s.edges {
        adjacency[u].push(v);
        adjacency[v].push(u);
    }
    let mut order = Vec::with_capacity(n);
    let mut placed = vec![false; n];
    while order.len() < n {
        let next = (0..n)
            .filter(|&u| !placed[u])
            .max_by_key(|&u| {
                let links = adjacency[u].iter().filter(|&&w| placed[w]).count();
                (links, std::cmp::Reverse(domains[u].len()), std::cmp::Reverse(u))
            })
            .unwrap();
        placed[next] = true;
        order.push(next);
    }

    // Edges of `small` to verify once both endpoints are mapped, keyed by the
    // position in `order` at which the later endpoint gets assigned.
    let mut position = vec![0; n];
    for (i, &u) in order.iter().enumerate() {
        position[u] = i;
    }
    let mut checks: Vec<Vec<(usize, usize, Relation)>> = vec![Vec::new(); n];
    for &(u, v, r) in &s.edges {
        checks[position[u].max(position[v])].push((u, v, r));
    }

    let mut mapping = vec![usize::MAX; n];
    let mut used = vec![false; l.labels.len()];
    search(0, &order, &domains, &checks, &l, &mut mapping, &mut used)
}

fn search(
    depth: usize,
    order: &[usize],
    domains: &[Vec<usize>],
    checks: &[Vec<(usize, usize, Relation)>],
    large: &Indexed,
    mapping: &mut [usize],
    used: &mut [bool],
) -> bool {
    if depth == order.len() {
        return true;
    }
    let u = order[depth];
    for &x in &domains[u] {
        if used[x] {
            continue;
        }
        mapping[u] = x;
        let consistent = checks[depth]
            .iter()
            .all(|&(a, b, r)| large.edge_set.contains(&(mapping[a], mapping[b], r)));
        if consistent {
            used[x] = true;
            if search(depth + 1, order, domains, checks, large, mapping, used) {
                return true;
            }
            used[x] = false;
        }
    }
    mapping[u] = usize::MAX;
    false
}

/// Union-find with path compression and union by size.
#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }

    /// Components as sorted index lists, ordered by their smallest index.
    pub fn components(&mut self) -> Vec<Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..self.parent.len() {
            let r = self.find(i);
            groups.entry(r).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        out.sort_by_key(|g| g[0]);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeCluster {
    pub signature: Signature,
    /// Source frames of all members, sorted.
    pub members: Vec<String>,
    pub representative: CandidateSubgraph,
}

/// Picks the member with the fewest nodes, breaking ties by canonical form.
fn representative<'a>(members: impl Iterator<Item = &'a CandidateSubgraph>) -> &'a CandidateSubgraph {
    members
        .map(|c| (c.node_count(), c.canonical_string(), c))
        .min_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)))
        .map(|t| t.2)
        .expect("clusters are non-empty")
}

/// Merges candidates into prototype clusters. The output partitions the
/// input and does not depend on its order.
pub fn merge(candidates: &[CandidateSubgraph], thresholds: &GateThresholds) -> Vec<PrototypeCluster> {
    let mut buckets: BTreeMap<Signature, Vec<usize>> = BTreeMap::new();
    for (i, c) in candidates.iter().enumerate() {
        buckets.entry(signature(c)).or_default().push(i);
    }

    let bucket_list: Vec<&Vec<usize>> = buckets.values().collect();
    let links: Vec<(usize, usize)> = bucket_list
        .par_iter()
        .flat_map_iter(|members| {
            let mut pairs = Vec::new();
            for (k, &i) in members.iter().enumerate() {
                for &j in &members[k + 1..] {
                    let (a, b) = (&candidates[i], &candidates[j]);
                    if !gate(a, b, thresholds) {
                        continue;
                    }
                    let (small, large) = if a.node_count() <= b.node_count() {
                        (a, b)
                    } else {
                        (b, a)
                    };
                    if contains(small, large) {
                        pairs.push((i, j));
                    }
                }
            }
            pairs
        })
        .collect();

    let mut dsu = DisjointSet::new(candidates.len());
    for (i, j) in links {
        dsu.union(i, j);
    }

    let mut clusters: Vec<PrototypeCluster> = dsu
        .components()
        .into_iter()
        .map(|group| {
            let rep = representative(group.iter().map(|&i| &candidates[i])).clone();
            let mut members: Vec<String> = group.iter().map(|&i| candidates[i].source_frame.clone()).collect();
            members.sort();
            PrototypeCluster {
                signature: signature(&rep),
                members,
                representative: rep,
            }
        })
        .collect();
    clusters.sort_by_cached_key(|c| c.representative.canonical_string());
    clusters
}

pub const MANIFEST_VERSION: u32 = 1;

/// File form of a merge run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeManifest {
    pub version: u32,
    pub params: MiningParams,
    pub gate: GateThresholds,
    pub candidate_count: usize,
    pub clusters: Vec<PrototypeCluster>,
}

impl PrototypeManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: PrototypeManifest = serde_json::from_str(text).map_err(|e| crate::scene_graph::json_error(text, &e))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: m.version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }
}

/// Extracts candidates from every graph and merges them.
pub fn mine(
    graphs: &[SceneGraph],
    params: &MiningParams,
    gate_thresholds: &GateThresholds,
) -> Result<PrototypeManifest> {
    let mut candidates = Vec::new();
    for g in graphs {
        if let Some(c) = extract_candidate(g, params)? {
            candidates.push(c);
        }
    }
    Ok(PrototypeManifest {
        version: MANIFEST_VERSION,
        params: *params,
        gate: *gate_thresholds,
        candidate_count: candidates.len(),
        clusters: merge(&candidates, gate_thresholds),
    })
}
