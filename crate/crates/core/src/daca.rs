//! Constrained sharing graph and distribution-based adaptive clustering.
//!
//! Two clients may share data only when their social closeness and their
//! sidelink rate both clear a threshold. Clustering picks low-EMD heads that
//! dominate this graph and attaches every other client to one reachable head.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hetero::{emd, post_sharing_emd, ClientLabelStats, EmdWeighting, LabelDistribution};
use crate::wireless::{distance, RadioParams, SidelinkChannel};

const EMD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub closeness: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedGraph {
    pub node_emd: Vec<f64>,
    /// Keyed by `(k, j)` with `k < j`.
    pub edges: BTreeMap<(usize, usize), EdgeRecord>,
    pub e_th: f64,
    pub v_th: f64,
}

impl ConstrainedGraph {
    /// Graph with explicit edges and no closeness/rate information.
    pub fn from_edges(node_emd: Vec<f64>, edges: &[(usize, usize)]) -> Result<Self> {
        let k = node_emd.len();
        let mut map = BTreeMap::new();
        for &(a, b) in edges {
            if a == b || a >= k || b >= k {
                return Err(Error::validation(format!("invalid edge ({a}, {b})")));
            }
            map.insert(
                (a.min(b), a.max(b)),
                EdgeRecord {
                    closeness: 1.0,
                    rate: f64::INFINITY,
                },
            );
        }
        Ok(Self {
            node_emd,
            edges: map,
            e_th: 0.0,
            v_th: 0.0,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_emd.len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains_key(&(a.min(b), a.max(b)))
    }

    pub fn edge(&self, a: usize, b: usize) -> Option<&EdgeRecord> {
        self.edges.get(&(a.min(b), a.max(b)))
    }

    /// `ẽ = D(member) − D(head)`.
    pub fn emd_gap(&self, member: usize, head: usize) -> f64 {
        self.node_emd[member] - self.node_emd[head]
    }

    pub fn neighbors(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.num_nodes()];
        for &(a, b) in self.edges.keys() {
            adj[a].insert(b);
            adj[b].insert(a);
        }
        adj
    }
}

/// Build the sharing graph. `closeness` is a dense symmetric matrix.
pub fn build_graph(
    clients: &[ClientLabelStats],
    g: &LabelDistribution,
    closeness: &[Vec<f64>],
    positions: &[[f64; 2]],
    channel: &SidelinkChannel,
    radio: &RadioParams,
    e_th: f64,
    v_th: f64,
) -> Result<ConstrainedGraph> {
    let k = clients.len();
    if closeness.len() != k || closeness.iter().any(|row| row.len() != k) {
        return Err(Error::Dimension {
            expected: k,
            got: closeness.len(),
        });
    }
    if positions.len() != k {
        return Err(Error::Dimension {
            expected: k,
            got: positions.len(),
        });
    }
    for a in 0..k {
        for b in 0..k {
            let e = closeness[a][b];
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::validation(format!("closeness ({a},{b}) = {e} outside [0,1]")));
            }
            if (e - closeness[b][a]).abs() > 1e-12 {
                return Err(Error::validation(format!("closeness not symmetric at ({a},{b})")));
            }
        }
    }
    let node_emd = clients
        .iter()
        .map(|c| emd(&c.dist, g))
        .collect::<Result<Vec<_>>>()?;
    let mut edges = BTreeMap::new();
    for a in 0..k {
        for b in a + 1..k {
            let e = closeness[a][b];
            if e < e_th {
                continue;
            }
            let rate = channel.rate(distance(positions[a], positions[b]), radio)?;
            if rate >= v_th {
                edges.insert((a, b), EdgeRecord { closeness: e, rate });
            }
        }
    }
    Ok(ConstrainedGraph {
        node_emd,
        edges,
        e_th,
        v_th,
    })
}

/// Heads and their disjoint member sets. Every head has an entry in
/// `members`, possibly empty.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub heads: BTreeSet<usize>,
    pub members: BTreeMap<usize, BTreeSet<usize>>,
}

impl ClusterAssignment {
    /// Every client alone: no sharing.
    pub fn singletons(num_clients: usize) -> Self {
        Self {
            heads: (0..num_clients).collect(),
            members: (0..num_clients).map(|k| (k, BTreeSet::new())).collect(),
        }
    }

    pub fn from_head_of(head_of: &[Option<usize>]) -> Self {
        let mut a = Self::default();
        for (k, h) in head_of.iter().enumerate() {
            if h.is_none() {
                a.heads.insert(k);
                a.members.entry(k).or_default();
            }
        }
        for (k, h) in head_of.iter().enumerate() {
            if let Some(m) = h {
                a.members.entry(*m).or_default().insert(k);
            }
        }
        a
    }

    pub fn head_of(&self, client: usize) -> Option<usize> {
        self.members
            .iter()
            .find(|(_, c)| c.contains(&client))
            .map(|(&m, _)| m)
    }

    /// Heads with at least one member.
    pub fn sharing_heads(&self) -> impl Iterator<Item = (usize, &BTreeSet<usize>)> {
        self.members
            .iter()
            .filter(|(_, c)| !c.is_empty())
            .map(|(&m, c)| (m, c))
    }

    pub fn num_members(&self) -> usize {
        self.members.values().map(BTreeSet::len).sum()
    }

    /// Disjointness, coverage, head/member exclusivity and edge support.
    pub fn validate(&self, graph: &ConstrainedGraph) -> Result<()> {
        let k = graph.num_nodes();
        let mut seen = BTreeSet::new();
        for &h in &self.heads {
            if h >= k {
                return Err(Error::validation(format!("head {h} out of range")));
            }
            seen.insert(h);
        }
        for (&m, cs) in &self.members {
            if !self.heads.contains(&m) {
                return Err(Error::validation(format!("member set keyed by non-head {m}")));
            }
            for &c in cs {
                if !seen.insert(c) {
                    return Err(Error::ConstraintViolation(format!(
                        "client {c} appears in more than one role or cluster"
                    )));
                }
                if !graph.has_edge(m, c) {
                    return Err(Error::ConstraintViolation(format!(
                        "member {c} has no edge to head {m}"
                    )));
                }
            }
        }
        if seen.len() != k {
            return Err(Error::validation(format!(
                "assignment covers {} of {k} clients",
                seen.len()
            )));
        }
        Ok(())
    }

    /// `client_id,role,head` rows.
    pub fn to_csv(&self) -> String {
        let mut rows = BTreeMap::new();
        for &h in &self.heads {
            rows.insert(h, ("head", h));
        }
        for (&m, cs) in &self.members {
            for &c in cs {
                rows.insert(c, ("member", m));
            }
        }
        let mut out = String::from("client_id,role,head\n");
        for (k, (role, h)) in rows {
            let _ = writeln!(out, "{k},{role},{h}");
        }
        out
    }
}

/// Greedy clustering on the constrained graph.
///
/// Nodes are visited in ascending EMD (ties by id); a node becomes a head
/// when no existing head covers it. The result is a dominating set in which
/// every head is needed. Each remaining node then joins the reachable head
/// with the largest gap `D(c) − D(m)`, ties by lowest head id.
pub fn daca_cluster(graph: &ConstrainedGraph) -> ClusterAssignment {
    let k = graph.num_nodes();
    let adj = graph.neighbors();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| graph.node_emd[a].total_cmp(&graph.node_emd[b]).then(a.cmp(&b)));

    let mut covered = vec![false; k];
    let mut heads = BTreeSet::new();
    for &v in &order {
        if covered[v] {
            continue;
        }
        heads.insert(v);
        covered[v] = true;
        for &u in &adj[v] {
            covered[u] = true;
        }
    }

    let mut members: BTreeMap<usize, BTreeSet<usize>> =
        heads.iter().map(|&h| (h, BTreeSet::new())).collect();
    for c in (0..k).filter(|c| !heads.contains(c)) {
        let mut best: Option<(usize, f64)> = None;
        for &m in adj[c].iter().filter(|m| heads.contains(m)) {
            let gap = graph.emd_gap(c, m);
            if best.is_none_or(|(_, g)| gap > g + EMD_TOL) {
                best = Some((m, gap));
            }
        }
        let (m, _) = best.expect("every non-head is adjacent to a head");
        members.get_mut(&m).unwrap().insert(c);
    }
    ClusterAssignment { heads, members }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    /// `(head, member)` pairs with the head above its member in EMD.
    pub head_above_member: Vec<(usize, usize)>,
    /// `(member, current_head, better_head)` where another reachable head
    /// has lower EMD than the current one.
    pub better_head_available: Vec<(usize, usize, usize)>,
}

impl ConditionReport {
    pub fn passed(&self) -> bool {
        self.head_above_member.is_empty() && self.better_head_available.is_empty()
    }
}

/// Check that heads sit below their members in EMD and that each member
/// is attached to the reachable head with the largest EMD gap.
pub fn verify_conditions(assignment: &ClusterAssignment, graph: &ConstrainedGraph) -> ConditionReport {
    let d = &graph.node_emd;
    let mut c2 = Vec::new();
    let mut c3 = Vec::new();
    for (&m, cs) in &assignment.members {
        for &c in cs {
            if d[m] > d[c] + EMD_TOL {
                c2.push((m, c));
            }
            for &other in &assignment.heads {
                if other != m && graph.has_edge(other, c) && d[other] < d[m] - EMD_TOL {
                    c3.push((c, m, other));
                }
            }
        }
    }
    ConditionReport {
        head_above_member: c2,
        better_head_available: c3,
    }
}

/// Shared volume used by the exhaustive oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum VolumeRule {
    /// Each head shares its whole dataset.
    #[default]
    FullHead,
    Fraction(f64),
}

impl VolumeRule {
    pub fn volume(&self, n_m: usize) -> f64 {
        match *self {
            VolumeRule::FullHead => n_m as f64,
            VolumeRule::Fraction(f) => f * n_m as f64,
        }
    }
}

pub const EXHAUSTIVE_MAX_CLIENTS: usize = 8;

/// Volumes for every head that has members, under `rule`.
pub fn rule_volumes(
    clients: &[ClientLabelStats],
    assignment: &ClusterAssignment,
    rule: VolumeRule,
) -> BTreeMap<usize, f64> {
    assignment
        .sharing_heads()
        .map(|(m, _)| (m, rule.volume(clients[m].n)))
        .collect()
}

/// Exhaustive search over head sets and edge-supported member choices,
/// minimizing the post-sharing average EMD. Ties keep the first
/// configuration in enumeration order (head bitmask ascending).
pub fn exhaustive_optimum(
    clients: &[ClientLabelStats],
    g: &LabelDistribution,
    graph: &ConstrainedGraph,
    rule: VolumeRule,
    weighting: EmdWeighting,
) -> Result<(ClusterAssignment, f64)> {
    let k = clients.len();
    if k > EXHAUSTIVE_MAX_CLIENTS {
        return Err(Error::SizeGuard(format!(
            "exhaustive clustering limited to {EXHAUSTIVE_MAX_CLIENTS} clients, got {k}"
        )));
    }
    if graph.num_nodes() != k {
        return Err(Error::Dimension {
            expected: k,
            got: graph.num_nodes(),
        });
    }
    let adj = graph.neighbors();
    let mut best: Option<(ClusterAssignment, f64)> = None;
    for mask in 1u32..(1u32 << k) {
        let is_head = |v: usize| mask & (1 << v) != 0;
        let others: Vec<usize> = (0..k).filter(|&v| !is_head(v)).collect();
        let options: Vec<Vec<usize>> = others
            .iter()
            .map(|&c| adj[c].iter().copied().filter(|&m| is_head(m)).collect())
            .collect();
        if options.iter().any(Vec::is_empty) {
            continue;
        }
        let mut digits = vec![0usize; others.len()];
        loop {
            let mut head_of = vec![None; k];
            for (i, &c) in others.iter().enumerate() {
                head_of[c] = Some(options[i][digits[i]]);
            }
            let a = ClusterAssignment::from_head_of(&head_of);
            let vols = rule_volumes(clients, &a, rule);
            let value = post_sharing_emd(clients, &a, &vols, g, weighting)?;
            if best.as_ref().is_none_or(|(_, b)| value < *b - EMD_TOL) {
                best = Some((a, value));
            }
            let mut i = 0;
            while i < digits.len() {
                digits[i] += 1;
                if digits[i] < options[i].len() {
                    break;
                }
                digits[i] = 0;
                i += 1;
            }
            if i == digits.len() {
                break;
            }
        }
    }
    Ok(best.expect("the all-heads configuration is always admissible"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clients_from_emds(emds: &[f64]) -> Vec<ClientLabelStats> {
        // p_k = g + λ(q − g) on two classes with g = (0.5, 0.5), q = (1, 0):
        // emd = λ.
        emds.iter()
            .map(|&e| {
                let l = e;
                ClientLabelStats::new(
                    100,
                    LabelDistribution::new(vec![0.5 + 0.5 * l, 0.5 - 0.5 * l]).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn closeness_filter() {
        let g = LabelDistribution::uniform(2);
        let clients = clients_from_emds(&[0.1, 0.5, 0.9]);
        let closeness = vec![
            vec![1.0, 0.9, 0.8],
            vec![0.9, 1.0, 0.2],
            vec![0.8, 0.2, 1.0],
        ];
        let pos = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let radio = RadioParams::reference();
        let ch = SidelinkChannel::reference(0.01);
        let graph = build_graph(&clients, &g, &closeness, &pos, &ch, &radio, 0.5, 0.0).unwrap();
        assert_eq!(graph.edges.keys().copied().collect::<Vec<_>>(), vec![(0, 1), (0, 2)]);
        assert!((graph.node_emd[1] - 0.5).abs() < 1e-12);

        let none = build_graph(&clients, &g, &closeness, &pos, &ch, &radio, 1.01, 0.0).unwrap();
        assert!(none.edges.is_empty());
        let all = build_graph(&clients, &g, &closeness, &pos, &ch, &radio, 0.0, 0.0).unwrap();
        assert_eq!(all.edges.len(), 3);
        let slow = build_graph(&clients, &g, &closeness, &pos, &ch, &radio, 0.0, f64::INFINITY).unwrap();
        assert!(slow.edges.is_empty());
    }

    #[test]
    fn edgeless_graph_gives_singletons() {
        let graph = ConstrainedGraph::from_edges(vec![0.3, 0.1, 0.2], &[]).unwrap();
        assert_eq!(daca_cluster(&graph), ClusterAssignment::singletons(3));
    }

    #[test]
    fn star_example() {
        let graph = ConstrainedGraph::from_edges(vec![0.2, 1.8, 1.8], &[(0, 1), (0, 2)]).unwrap();
        let a = daca_cluster(&graph);
        assert_eq!(a.heads, BTreeSet::from([0]));
        assert_eq!(a.members[&0], BTreeSet::from([1, 2]));
        a.validate(&graph).unwrap();
        assert!(verify_conditions(&a, &graph).passed());
    }

    #[test]
    fn two_stars_example() {
        let graph =
            ConstrainedGraph::from_edges(vec![0.2, 0.3, 1.8, 1.8], &[(0, 2), (1, 3)]).unwrap();
        let a = daca_cluster(&graph);
        assert_eq!(a.heads, BTreeSet::from([0, 1]));
        assert_eq!(a.members[&0], BTreeSet::from([2]));
        assert_eq!(a.members[&1], BTreeSet::from([3]));
    }

    #[test]
    fn member_prefers_lowest_emd_head() {
        // 0 and 1 are non-adjacent heads; 2 reaches both.
        let graph =
            ConstrainedGraph::from_edges(vec![0.4, 0.1, 0.9], &[(0, 2), (1, 2)]).unwrap();
        let a = daca_cluster(&graph);
        assert_eq!(a.heads, BTreeSet::from([0, 1]));
        assert_eq!(a.members[&1], BTreeSet::from([2]));
        assert!(verify_conditions(&a, &graph).passed());
    }

    #[test]
    fn condition_violations_are_reported() {
        let graph = ConstrainedGraph::from_edges(vec![0.2, 1.8], &[(0, 1)]).unwrap();
        let bad = ClusterAssignment::from_head_of(&[Some(1), None]);
        let r = verify_conditions(&bad, &graph);
        assert_eq!(r.head_above_member, vec![(1, 0)]);
        assert!(!r.passed());
        assert!(verify_conditions(&ClusterAssignment::singletons(2), &graph).passed());

        let tri = ConstrainedGraph::from_edges(vec![0.1, 0.5, 0.9], &[(0, 2), (1, 2)]).unwrap();
        let wrong = ClusterAssignment::from_head_of(&[None, None, Some(1)]);
        assert_eq!(verify_conditions(&wrong, &tri).better_head_available, vec![(2, 1, 0)]);
    }

    #[test]
    fn validate_rejects_bad_assignments() {
        let graph = ConstrainedGraph::from_edges(vec![0.2, 1.8, 1.0], &[(0, 1)]).unwrap();
        let no_edge = ClusterAssignment::from_head_of(&[None, Some(0), Some(0)]);
        assert!(no_edge.validate(&graph).is_err());
        let mut partial = ClusterAssignment::singletons(2);
        partial.members.insert(0, BTreeSet::new());
        assert!(partial.validate(&graph).is_err());
    }

    #[test]
    fn head_set_is_minimal() {
        let graph = ConstrainedGraph::from_edges(
            vec![0.5, 0.1, 0.3, 0.9, 0.7],
            &[(0, 1), (1, 2), (2, 3), (3, 4)],
        )
        .unwrap();
        let a = daca_cluster(&graph);
        let adj = graph.neighbors();
        for &h in &a.heads {
            let rest: BTreeSet<_> = a.heads.iter().copied().filter(|&x| x != h).collect();
            let dominated = (0..5).all(|v| rest.contains(&v) || adj[v].iter().any(|u| rest.contains(u)));
            assert!(!dominated, "head {h} is redundant");
        }
    }

    #[test]
    fn exhaustive_examples() {
        let g = LabelDistribution::uniform(2);
        // Two clients with EMDs 0 and 1 on two classes.
        let clients = clients_from_emds(&[0.0, 1.0]);
        let graph = ConstrainedGraph::from_edges(vec![0.0, 1.0], &[(0, 1)]).unwrap();
        let none = crate::hetero::average_emd(&clients, &g).unwrap();
        let (a, v) =
            exhaustive_optimum(&clients, &g, &graph, VolumeRule::FullHead, EmdWeighting::PreSharing)
                .unwrap();
        assert_eq!(a.heads, BTreeSet::from([0]));
        assert!(v < none);

        let edgeless = ConstrainedGraph::from_edges(vec![0.0, 1.0], &[]).unwrap();
        let (a, v) = exhaustive_optimum(
            &clients,
            &g,
            &edgeless,
            VolumeRule::FullHead,
            EmdWeighting::PreSharing,
        )
        .unwrap();
        assert_eq!(a, ClusterAssignment::singletons(2));
        assert!((v - none).abs() < 1e-15);

        let clients = clients_from_emds(&[0.2, 1.0, 1.0]);
        let graph = ConstrainedGraph::from_edges(vec![0.2, 1.0, 1.0], &[(0, 1), (0, 2)]).unwrap();
        let (a, _) =
            exhaustive_optimum(&clients, &g, &graph, VolumeRule::FullHead, EmdWeighting::PreSharing)
                .unwrap();
        assert_eq!(a, daca_cluster(&graph));

        let big = clients_from_emds(&[0.5; 9]);
        let graph = ConstrainedGraph::from_edges(vec![0.5; 9], &[]).unwrap();
        assert!(matches!(
            exhaustive_optimum(&big, &g, &graph, VolumeRule::FullHead, EmdWeighting::PreSharing),
            Err(Error::SizeGuard(_))
        ));
    }

    #[test]
    fn csv_and_json_shapes() {
        let a = ClusterAssignment::from_head_of(&[None, Some(0), None]);
        assert_eq!(a.to_csv(), "client_id,role,head\n0,head,0\n1,member,0\n2,head,2\n");
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, r#"{"heads":[0,2],"members":{"0":[1],"2":[]}}"#);
        let back: ClusterAssignment = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }
}
