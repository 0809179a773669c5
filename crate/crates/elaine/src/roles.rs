//! Per-node social-role statistics: six structural descriptors per node,
//! kept raw and min-max scaled, plus node-level aggregation of edge
//! attributes.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::graph::{EdgeAttributes, Graph};

/// Column order of the role matrix.
pub const ROLE_NAMES: [&str; 6] = [
    "degree",
    "weighted_degree",
    "clustering",
    "eccentricity",
    "constraint",
    "gatekeeper",
];

/// `n x 6` role statistics; `scaled` is `raw` min-max normalized per column
/// (columns with no spread collapse to zero).
#[derive(Debug, Clone)]
pub struct RoleMatrix {
    pub raw: Array2<f64>,
    pub scaled: Array2<f64>,
}

/// Compute the six role statistics for every node:
/// degree, weighted degree, local clustering coefficient (binary graph),
/// eccentricity (hop distance within the node's component), Burt's
/// constraint, and the local gatekeeper count (connected components of the
/// induced neighborhood subgraph). Isolated nodes get all-zero rows.
pub fn role_features(g: &Graph) -> RoleMatrix {
    let n = g.num_nodes();
    let mut raw = Array2::zeros((n, 6));
    for u in 0..n {
        raw[[u, 0]] = g.degree(u) as f64;
        raw[[u, 1]] = g.weighted_degree(u);
        raw[[u, 2]] = clustering_coefficient(g, u);
        raw[[u, 3]] = eccentricity(g, u);
        raw[[u, 4]] = burt_constraint(g, u);
        raw[[u, 5]] = gatekeeper_count(g, u);
    }

    let mut scaled = raw.clone();
    for c in 0..6 {
        let col = raw.column(c);
        let min = col.iter().copied().fold(f64::INFINITY, f64::min);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        for r in 0..n {
            scaled[[r, c]] = if span > 0.0 {
                (raw[[r, c]] - min) / span
            } else {
                0.0
            };
        }
    }
    RoleMatrix { raw, scaled }
}

/// Fraction of closed triples at `u` on the binary graph; 0 when `deg(u) < 2`.
fn clustering_coefficient(g: &Graph, u: usize) -> f64 {
    let nbrs = g.neighbors(u);
    let d = nbrs.len();
    if d < 2 {
        return 0.0;
    }
    let mut closed = 0usize;
    for i in 0..d {
        for j in (i + 1)..d {
            if g.has_edge(nbrs[i].0, nbrs[j].0) {
                closed += 1;
            }
        }
    }
    2.0 * closed as f64 / (d * (d - 1)) as f64
}

/// Longest BFS hop distance from `u` within its connected component;
/// 0 for isolated nodes.
fn eccentricity(g: &Graph, u: usize) -> f64 {
    if g.is_isolated(u) {
        return 0.0;
    }
    let n = g.num_nodes();
    let mut dist = vec![usize::MAX; n];
    dist[u] = 0;
    let mut queue = VecDeque::from([u]);
    let mut ecc = 0usize;
    while let Some(x) = queue.pop_front() {
        for &(y, _) in g.neighbors(x) {
            if dist[y] == usize::MAX {
                dist[y] = dist[x] + 1;
                ecc = ecc.max(dist[y]);
                queue.push_back(y);
            }
        }
    }
    ecc as f64
}

/// Burt's constraint with weighted investment proportions
/// `p_xy = w(x, y) / weighted_degree(x)`:
/// `c_u = sum_{j in N(u)} (p_uj + sum_q p_uq * p_qj)^2`, `q != u, j`.
fn burt_constraint(g: &Graph, u: usize) -> f64 {
    let wd_u = g.weighted_degree(u);
    if wd_u <= 0.0 {
        return 0.0;
    }
    let mut c = 0.0;
    for &(j, w_uj) in g.neighbors(u) {
        let mut inner = w_uj / wd_u;
        for &(q, w_uq) in g.neighbors(u) {
            if q == j {
                continue;
            }
            if let Some(w_qj) = g.weight(q, j) {
                inner += (w_uq / wd_u) * (w_qj / g.weighted_degree(q));
            }
        }
        c += inner * inner;
    }
    c
}

/// Number of connected components of the subgraph induced by `N(u)`;
/// 0 for isolated nodes.
fn gatekeeper_count(g: &Graph, u: usize) -> f64 {
    let nbrs: Vec<usize> = g.neighbors(u).iter().map(|&(v, _)| v).collect();
    if nbrs.is_empty() {
        return 0.0;
    }
    let index_of = |v: usize| nbrs.binary_search(&v).ok();
    let mut seen = vec![false; nbrs.len()];
    let mut components = 0usize;
    for start in 0..nbrs.len() {
        if seen[start] {
            continue;
        }
        components += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            for &(y, _) in g.neighbors(nbrs[i]) {
                if let Some(k) = index_of(y) {
                    if !seen[k] {
                        seen[k] = true;
                        stack.push(k);
                    }
                }
            }
        }
    }
    components as f64
}

/// `n x p` matrix whose row `u` is the mean attribute vector over edges
/// incident to `u` (zeros for isolated nodes).
pub fn aggregate_edge_attributes(g: &Graph, attrs: &EdgeAttributes) -> Array2<f64> {
    let n = g.num_nodes();
    let p = attrs.dim();
    let mut agg = Array2::zeros((n, p));
    for u in 0..n {
        let nbrs = g.neighbors(u);
        if nbrs.is_empty() {
            continue;
        }
        for &(v, _) in nbrs {
            let row = attrs
                .get(u, v)
                .expect("edge attributes must cover every edge of the graph");
            for (t, &x) in row.iter().enumerate() {
                agg[[u, t]] += x;
            }
        }
        let d = nbrs.len() as f64;
        for t in 0..p {
            agg[[u, t]] /= d;
        }
    }
    agg
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_row(m: &Array2<f64>, r: usize, want: &[f64]) {
        for (c, &w) in want.iter().enumerate() {
            assert!(
                (m[[r, c]] - w).abs() < 1e-12,
                "row {r} col {c} ({}): {} vs {w}",
                ROLE_NAMES[c],
                m[[r, c]]
            );
        }
    }

    #[test]
    fn triangle_roles_by_hand() {
        // K3: degree 2, weighted degree 2, clustering 1, eccentricity 1,
        // constraint 2 * (1/2 + 1/4)^2 = 1.125, one neighborhood component.
        let g = Graph::from_edges(3, vec![(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap();
        let roles = role_features(&g);
        for u in 0..3 {
            assert_row(&roles.raw, u, &[2.0, 2.0, 1.0, 1.0, 1.125, 1.0]);
        }
        // Every column is constant, so the scaled matrix collapses to zero.
        assert!(roles.scaled.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn star_roles_by_hand() {
        let g = Graph::from_edges(4, vec![(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0)]).unwrap();
        let roles = role_features(&g);
        // Center: three independent leaves, constraint 3 * (1/3)^2 = 1/3.
        assert_row(&roles.raw, 0, &[3.0, 3.0, 0.0, 1.0, 1.0 / 3.0, 3.0]);
        // Leaf: single neighbor it fully invests in, constraint 1.
        for leaf in 1..4 {
            assert_row(&roles.raw, leaf, &[1.0, 1.0, 0.0, 2.0, 1.0, 1.0]);
        }
        // Min-max scaling puts the center at 1 and leaves at 0 for degree,
        // and the reverse for eccentricity/constraint.
        assert_row(&roles.scaled, 0, &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_row(&roles.scaled, 1, &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn isolated_node_has_zero_row() {
        let g = Graph::from_edges(3, vec![(0, 1, 1.0)]).unwrap();
        let roles = role_features(&g);
        assert_row(&roles.raw, 2, &[0.0; 6]);
        assert_row(&roles.scaled, 2, &[0.0; 6]);
    }

    #[test]
    fn weighted_degree_sees_weights() {
        let g = Graph::from_edges(3, vec![(0, 1, 2.5), (1, 2, 0.5)]).unwrap();
        let roles = role_features(&g);
        assert_eq!(roles.raw[[1, 0]], 2.0);
        assert_eq!(roles.raw[[1, 1]], 3.0);
    }

    #[test]
    fn vertex_transitive_graphs_have_identical_rows() {
        // 6-cycle: constraint 2 * (1/2)^2 = 1/2, neighbors disconnected.
        let c6 = Graph::from_edges(6, (0..6).map(|u| (u, (u + 1) % 6, 1.0)).collect::<Vec<_>>())
            .unwrap();
        let roles = role_features(&c6);
        for u in 0..6 {
            assert_row(&roles.raw, u, &[2.0, 2.0, 0.0, 3.0, 0.5, 2.0]);
        }

        // K5: constraint 4 * (1/4 + 3/16)^2 = 49/64.
        let k5 = Graph::from_edges(
            5,
            (0..5)
                .flat_map(|u| ((u + 1)..5).map(move |v| (u, v, 1.0)))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let roles = role_features(&k5);
        for u in 0..5 {
            assert_row(&roles.raw, u, &[4.0, 4.0, 1.0, 1.0, 49.0 / 64.0, 1.0]);
        }
    }

    #[test]
    fn eccentricity_stays_within_components() {
        let g = Graph::from_edges(5, vec![(0, 1, 1.0), (1, 2, 1.0), (3, 4, 1.0)]).unwrap();
        let roles = role_features(&g);
        assert_eq!(roles.raw[[0, 3]], 2.0);
        assert_eq!(roles.raw[[1, 3]], 1.0);
        assert_eq!(roles.raw[[3, 3]], 1.0);
    }

    #[test]
    fn gatekeeper_counts_neighborhood_components() {
        // Two triangles sharing node 0: its neighborhood splits in two.
        let g = Graph::from_edges(
            5,
            vec![
                (0, 1, 1.0),
                (0, 2, 1.0),
                (1, 2, 1.0),
                (0, 3, 1.0),
                (0, 4, 1.0),
                (3, 4, 1.0),
            ],
        )
        .unwrap();
        let roles = role_features(&g);
        assert_eq!(roles.raw[[0, 5]], 2.0);
        assert_eq!(roles.raw[[1, 5]], 1.0);
    }

    #[test]
    fn aggregation_averages_incident_edges() {
        let g = Graph::from_edges(4, vec![(0, 1, 1.0), (0, 2, 1.0)]).unwrap();
        let mut ea = EdgeAttributes::new(2).unwrap();
        ea.insert(0, 1, vec![1.0, 0.0]).unwrap();
        ea.insert(0, 2, vec![0.0, 1.0]).unwrap();
        let agg = aggregate_edge_attributes(&g, &ea);
        assert_eq!(agg[[0, 0]], 0.5);
        assert_eq!(agg[[0, 1]], 0.5);
        assert_eq!(agg[[1, 0]], 1.0);
        assert_eq!(agg[[1, 1]], 0.0);
        // Isolated node 3 stays zero.
        assert_eq!(agg[[3, 0]], 0.0);
        assert_eq!(agg[[3, 1]], 0.0);
    }

    proptest! {
        #[test]
        fn scaled_roles_stay_in_unit_interval(
            raw in proptest::collection::vec((0usize..10, 0usize..10, 0.5f64..3.0), 1..30)
        ) {
            let edges: Vec<_> = raw.into_iter().filter(|(u, v, _)| u != v).collect();
            let g = Graph::from_edges(10, edges).unwrap();
            let roles = role_features(&g);
            for &x in roles.scaled.iter() {
                prop_assert!((0.0..=1.0).contains(&x), "scaled value {x}");
            }
            for u in 0..10 {
                prop_assert_eq!(roles.raw[[u, 0]], g.degree(u) as f64);
            }
        }
    }
}
