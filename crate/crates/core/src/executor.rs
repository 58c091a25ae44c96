//! Executes budgets: picks matches from each transport plan, then resolves
//! all of them at once into the surviving token sequence.
//!
//! For pair `t` the plan's rows are tokens of frame `t` (destinations) and
//! its columns are tokens of frame `t+1` (sources). Every accepted entry
//! removes its source: a merge folds it into the destination's component, a
//! prune deletes it. Since each token is a source in at most one pair and
//! points to an earlier frame, the merge edges form a forest whose roots are
//! the earliest members.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::container::{Grid, TokenVideo};
use crate::error::{Error, Result};
use crate::spatial::RetainedFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Merge,
    Prune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionEdge {
    pub pair: usize,
    /// Slot of the source token within retained frame `pair + 1`.
    pub source: usize,
    /// Slot of the destination token within retained frame `pair`.
    pub destination: usize,
    pub coupling: f64,
    pub cost: f64,
    pub kind: EdgeKind,
}

/// Takes the `budget` largest plan entries with distinct sources. An edge
/// merges when its cost is below `tau_c` and prunes otherwise.
///
/// Entries are scanned by descending coupling, then ascending source, then
/// ascending destination.
pub fn select_matches(
    pair: usize,
    plan: &Array2<f64>,
    cost: &Array2<f64>,
    budget: usize,
    tau_c: f64,
) -> Result<Vec<CompressionEdge>> {
    let (dests, sources) = plan.dim();
    if cost.dim() != plan.dim() {
        return Err(Error::InvalidDimensions("plan and cost shapes differ".into()));
    }
    if budget > sources {
        return Err(Error::param(
            "budget",
            format!("{budget} exceeds the {sources} source tokens of pair {pair}"),
        ));
    }
    if budget == 0 {
        return Ok(Vec::new());
    }

    let mut entries: Vec<(usize, usize)> = (0..dests).flat_map(|i| (0..sources).map(move |j| (i, j))).collect();
    entries.sort_by(|&(ia, ja), &(ib, jb)| {
        plan[[ib, jb]]
            .total_cmp(&plan[[ia, ja]])
            .then(ja.cmp(&jb))
            .then(ia.cmp(&ib))
    });

    let mut used = vec![false; sources];
    let mut edges = Vec::with_capacity(budget);
    for (i, j) in entries {
        if used[j] {
            continue;
        }
        used[j] = true;
        let c = cost[[i, j]];
        edges.push(CompressionEdge {
            pair,
            source: j,
            destination: i,
            coupling: plan[[i, j]],
            cost: c,
            kind: if c < tau_c { EdgeKind::Merge } else { EdgeKind::Prune },
        });
        if edges.len() == budget {
            break;
        }
    }
    Ok(edges)
}

/// Union-find over dense ids where the smaller id always becomes the root.
#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    pub fn union(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        lo
    }
}

/// A token identified by frame and original index within that frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenRef {
    pub frame: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Survivor {
    pub root: TokenRef,
    /// All component members including the root, ordered by (frame, index).
    pub members: Vec<TokenRef>,
    /// Unweighted mean of the members' features.
    pub feature: Vec<f64>,
    /// Summed saliency of the members.
    pub saliency: f64,
}

/// The compressed token set, frame-major by root.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedSequence {
    pub survivors: Vec<Survivor>,
    pub dim: usize,
}

/// Serialized form of one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEntry {
    pub root: TokenRef,
    pub members: Vec<TokenRef>,
}

impl CompressedSequence {
    pub fn len(&self) -> usize {
        self.survivors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.survivors.is_empty()
    }

    pub fn component_map(&self) -> Vec<ComponentEntry> {
        self.survivors
            .iter()
            .map(|s| ComponentEntry {
                root: s.root,
                members: s.members.clone(),
            })
            .collect()
    }

    /// Single-frame container holding the survivors on a `1 × n` grid, with
    /// saliency proportional to each component's summed saliency.
    pub fn to_container(&self) -> Result<TokenVideo> {
        let n = self.len();
        let features = self
            .survivors
            .iter()
            .flat_map(|s| s.feature.iter().map(|&v| v as f32))
            .collect();
        let total: f64 = self.survivors.iter().map(|s| s.saliency).sum();
        let saliency = self
            .survivors
            .iter()
            .map(|s| {
                if total > 0.0 {
                    (s.saliency / total) as f32
                } else {
                    1.0 / n as f32
                }
            })
            .collect();
        TokenVideo::new(1, n, self.dim, Grid::new(1, n), features, saliency)
    }
}

/// Resolves all edges over the retained frames.
///
/// Prune sources are deleted first. A merge whose destination is deleted
/// (directly or further up its chain) deletes its source too, so deleted
/// content is never averaged in. Each remaining component collapses onto its
/// earliest member with the plain mean of all member features.
pub fn resolve_graph(edges: &[CompressionEdge], frames: &[RetainedFrame]) -> Result<CompressedSequence> {
    let dim = frames.first().and_then(|f| f.features.first()).map_or(0, Vec::len);
    let mut offsets = Vec::with_capacity(frames.len() + 1);
    offsets.push(0usize);
    for f in frames {
        offsets.push(offsets.last().unwrap() + f.len());
    }
    let nodes = *offsets.last().unwrap();

    // outgoing[n] = (destination node, kind) for the edge whose source is n
    let mut outgoing: Vec<Option<(usize, EdgeKind)>> = vec![None; nodes];
    for e in edges {
        if e.pair + 1 >= frames.len() || e.source >= frames[e.pair + 1].len() || e.destination >= frames[e.pair].len() {
            return Err(Error::param("edge", format!("{e:?} does not fit the retained frames")));
        }
        let src = offsets[e.pair + 1] + e.source;
        let dst = offsets[e.pair] + e.destination;
        if outgoing[src].replace((dst, e.kind)).is_some() {
            return Err(Error::param(
                "edge",
                format!("source {} of pair {} selected twice", e.source, e.pair),
            ));
        }
    }

    // destinations always live in an earlier frame, so one ascending pass suffices
    let mut deleted = vec![false; nodes];
    for n in 0..nodes {
        deleted[n] = match outgoing[n] {
            Some((_, EdgeKind::Prune)) => true,
            Some((dst, EdgeKind::Merge)) => deleted[dst],
            None => false,
        };
    }

    let mut sets = DisjointSet::new(nodes);
    for n in 0..nodes {
        if let (false, Some((dst, EdgeKind::Merge))) = (deleted[n], outgoing[n]) {
            sets.union(n, dst);
        }
    }

    let locate = |n: usize| {
        let frame = offsets.partition_point(|&o| o <= n) - 1;
        (frame, n - offsets[frame])
    };
    let token_ref = |n: usize| {
        let (frame, slot) = locate(n);
        TokenRef {
            frame: frames[frame].frame,
            index: frames[frame].selected[slot],
        }
    };

    let mut members_of: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    for n in (0..nodes).filter(|&n| !deleted[n]) {
        let root = sets.find(n);
        members_of[root].push(n);
    }

    let mut survivors: Vec<Survivor> = (0..nodes)
        .filter(|&n| !deleted[n] && outgoing[n].is_none())
        .map(|root| {
            let members = &members_of[root];
            let mut feature = vec![0.0; dim];
            let mut saliency = 0.0;
            for &m in members {
                let (frame, slot) = locate(m);
                for (acc, v) in feature.iter_mut().zip(&frames[frame].features[slot]) {
                    *acc += v;
                }
                saliency += frames[frame].saliency[slot];
            }
            feature.iter_mut().for_each(|v| *v /= members.len() as f64);
            let mut refs: Vec<TokenRef> = members.iter().map(|&m| token_ref(m)).collect();
            refs.sort_unstable();
            Survivor {
                root: token_ref(root),
                members: refs,
                feature,
                saliency,
            }
        })
        .collect();
    survivors.sort_by_key(|s| s.root);

    Ok(CompressedSequence { survivors, dim })
}

/// Fraction of the original `frames · tokens` that survived.
pub fn compression_ratio(sequence: &CompressedSequence, frames: usize, tokens: usize) -> f64 {
    sequence.len() as f64 / (frames * tokens) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::GridPosition;
    use ndarray::array;

    fn retained(frame: usize, features: Vec<Vec<f64>>) -> RetainedFrame {
        let k = features.len();
        RetainedFrame {
            frame,
            selected: (0..k).map(|s| s + 3).collect(),
            features,
            positions: vec![GridPosition { row: 0, col: 0 }; k],
            saliency: vec![1.0 / k as f64; k],
            scores: vec![0.0; k],
            mass: vec![1.0 / k as f64; k],
        }
    }

    fn edge(pair: usize, source: usize, destination: usize, kind: EdgeKind) -> CompressionEdge {
        CompressionEdge {
            pair,
            source,
            destination,
            coupling: 0.0,
            cost: 0.0,
            kind,
        }
    }

    #[test]
    fn zero_budget_selects_nothing() {
        let p = array![[0.5, 0.0], [0.0, 0.5]];
        assert!(select_matches(0, &p, &p, 0, 0.3).unwrap().is_empty());
    }

    #[test]
    fn greedy_scan_uses_each_source_once() {
        let p = array![[0.4, 0.1], [0.3, 0.2]];
        let c = array![[0.1, 0.9], [0.2, 0.25]];
        let e = select_matches(0, &p, &c, 2, 0.3).unwrap();
        let got: Vec<_> = e.iter().map(|e| (e.source, e.destination, e.kind)).collect();
        assert_eq!(got, vec![(0, 0, EdgeKind::Merge), (1, 1, EdgeKind::Merge)]);
        assert_eq!(e[1].coupling, 0.2);
    }

    #[test]
    fn many_sources_may_share_a_destination() {
        let p = array![[0.3, 0.3], [0.2, 0.2]];
        let e = select_matches(4, &p, &p, 2, 1.0).unwrap();
        assert_eq!(e.iter().map(|e| e.destination).collect::<Vec<_>>(), vec![0, 0]);
        assert!(e.iter().all(|e| e.pair == 4));
    }

    #[test]
    fn budget_beyond_sources_is_rejected() {
        let p = array![[0.5, 0.0], [0.0, 0.5]];
        assert!(select_matches(0, &p, &p, 3, 0.3).is_err());
    }

    #[test]
    fn threshold_endpoints() {
        let p = array![[0.4, 0.1], [0.3, 0.2]];
        let c = array![[0.0, 1.9], [1.0, 0.5]];
        let all_prune = select_matches(0, &p, &c, 2, 0.0).unwrap();
        assert!(all_prune.iter().all(|e| e.kind == EdgeKind::Prune));
        let all_merge = select_matches(0, &p, &c, 2, 2.0).unwrap();
        assert!(all_merge.iter().all(|e| e.kind == EdgeKind::Merge));
    }

    #[test]
    fn three_chain_collapses_to_the_earliest() {
        let frames: Vec<_> = (0..3).map(|t| retained(t, vec![vec![t as f64 * 3.0, 1.0]])).collect();
        let edges = [edge(0, 0, 0, EdgeKind::Merge), edge(1, 0, 0, EdgeKind::Merge)];
        let seq = resolve_graph(&edges, &frames).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.survivors[0].root, TokenRef { frame: 0, index: 3 });
        assert_eq!(seq.survivors[0].feature, vec![3.0, 1.0]);
        assert_eq!(seq.survivors[0].members.len(), 3);
    }

    #[test]
    fn prune_after_merge() {
        // B→A merge, C→B prune
        let frames: Vec<_> = (0..3).map(|t| retained(t, vec![vec![t as f64 + 1.0]])).collect();
        let edges = [edge(0, 0, 0, EdgeKind::Merge), edge(1, 0, 0, EdgeKind::Prune)];
        let seq = resolve_graph(&edges, &frames).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.survivors[0].feature, vec![1.5]);
        assert_eq!(seq.survivors[0].members.len(), 2);
    }

    #[test]
    fn merge_into_pruned_token_is_dropped() {
        // B→A prune, C→B merge: C must not survive on its own nor join A
        let frames: Vec<_> = (0..3).map(|t| retained(t, vec![vec![t as f64 + 1.0]])).collect();
        let edges = [edge(0, 0, 0, EdgeKind::Prune), edge(1, 0, 0, EdgeKind::Merge)];
        let seq = resolve_graph(&edges, &frames).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.survivors[0].feature, vec![1.0]);
        assert_eq!(seq.survivors[0].members, vec![TokenRef { frame: 0, index: 3 }]);
    }

    #[test]
    fn no_edges_is_identity() {
        let frames = vec![
            retained(0, vec![vec![1.0], vec![2.0]]),
            retained(1, vec![vec![3.0], vec![4.0]]),
        ];
        let seq = resolve_graph(&[], &frames).unwrap();
        let feats: Vec<f64> = seq.survivors.iter().map(|s| s.feature[0]).collect();
        assert_eq!(feats, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(compression_ratio(&seq, 2, 2), 1.0);
    }

    #[test]
    fn duplicate_source_is_rejected() {
        let frames = vec![
            retained(0, vec![vec![1.0], vec![2.0]]),
            retained(1, vec![vec![3.0], vec![4.0]]),
        ];
        let edges = [edge(0, 1, 0, EdgeKind::Merge), edge(0, 1, 1, EdgeKind::Prune)];
        assert!(resolve_graph(&edges, &frames).is_err());
        assert!(resolve_graph(&[edge(1, 0, 0, EdgeKind::Merge)], &frames).is_err());
    }

    #[test]
    fn container_of_survivors() {
        let frames = vec![
            retained(0, vec![vec![1.0, 0.0], vec![0.0, 2.0]]),
            retained(1, vec![vec![3.0, 0.0]]),
        ];
        let seq = resolve_graph(&[edge(0, 0, 0, EdgeKind::Merge)], &frames).unwrap();
        let v = seq.to_container().unwrap();
        assert_eq!((v.frames(), v.tokens_per_frame(), v.dim()), (1, 2, 2));
        assert_eq!(v.token(0, 0), &[2.0, 0.0]);
        // saliency 0.5 + 1.0 versus 0.5
        assert!((v.saliency()[0] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn disjoint_set_roots_at_smallest() {
        let mut d = DisjointSet::new(6);
        d.union(5, 3);
        d.union(3, 4);
        d.union(4, 1);
        assert_eq!(d.find(5), 1);
        assert_eq!(d.find(0), 0);
        assert_eq!(d.find(2), 2);
    }
}
