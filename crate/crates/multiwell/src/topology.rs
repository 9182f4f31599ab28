//! Well systems and their merge-tree graph.
//!
//! A system is a row of wells separated by idealized walls. Walls have
//! heights; a particle with energy above a wall's height passes over it
//! freely, so at each energy level the landscape is partitioned into
//! confinement intervals. Stacking those intervals over all energies gives
//! a binary tree of edges: leaves are the individual wells, and every
//! interior wall merges the two regions it separates into one wider well at
//! its own height. Edges are numbered leaves first, left to right, then
//! merged wells in order of creation (ascending wall height).
//!
//! Each edge `k` carries an energy interval `[h_bot, h_top)`, a horizontal
//! span, and a kick pair. The bottom of edge `k` is its vertex: an exterior
//! vertex `V(k+1)` at a leaf floor, or an interior vertex `O(k+1)` at a merge
//! height. The root edge is closed at the energy cap.

use crate::error::{Error, Result};
use crate::kernels::KickPair;
use serde::Serialize;

/// Static description of one well system.
#[derive(Debug, Clone)]
pub struct WellSystem {
    /// Wall positions, strictly increasing; the two end walls are
    /// infinitely high.
    pub wall_positions: Vec<f64>,
    /// Heights of the interior walls (all walls except the two ends).
    pub interior_wall_heights: Vec<f64>,
    /// Floor energy of each leaf well, left to right.
    pub leaf_floor_energies: Vec<f64>,
    /// Hard upper energy bound for all dynamics.
    pub energy_cap: f64,
    /// One kick pair per well number (leaves first, then merged wells).
    pub kick_pairs: Vec<KickPair>,
}

impl WellSystem {
    pub fn new(
        wall_positions: Vec<f64>,
        interior_wall_heights: Vec<f64>,
        leaf_floor_energies: Vec<f64>,
        energy_cap: f64,
        kick_pairs: Vec<KickPair>,
    ) -> Result<Self> {
        let n = wall_positions.len();
        if n < 2 {
            return Err(Error::Config("need at least two walls".into()));
        }
        if wall_positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("wall positions must be finite".into()));
        }
        if wall_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "wall positions must be strictly increasing".into(),
            ));
        }
        if interior_wall_heights.len() != n - 2 {
            return Err(Error::Config(format!(
                "expected {} interior wall heights, got {}",
                n - 2,
                interior_wall_heights.len()
            )));
        }
        if interior_wall_heights.iter().any(|h| !h.is_finite()) {
            return Err(Error::Config("interior wall heights must be finite".into()));
        }
        if let Some((i, j)) = duplicate_pair(&interior_wall_heights) {
            return Err(Error::Config(format!(
                "interior walls at x = {} and x = {} share the height {} \
                 (degenerate topology)",
                wall_positions[i + 1],
                wall_positions[j + 1],
                interior_wall_heights[i]
            )));
        }
        if leaf_floor_energies.len() != n - 1 {
            return Err(Error::Config(format!(
                "expected {} leaf floors, got {}",
                n - 1,
                leaf_floor_energies.len()
            )));
        }
        if leaf_floor_energies.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::Config("leaf floors must be positive".into()));
        }
        if let Some((i, j)) = duplicate_pair(&leaf_floor_energies) {
            return Err(Error::Config(format!(
                "wells {} and {} share the floor energy {}",
                i + 1,
                j + 1,
                leaf_floor_energies[i]
            )));
        }
        for (i, &floor) in leaf_floor_energies.iter().enumerate() {
            // Bounding walls of leaf i are walls i and i+1; ends are infinite.
            let left = if i == 0 {
                f64::INFINITY
            } else {
                interior_wall_heights[i - 1]
            };
            let right = if i == n - 2 {
                f64::INFINITY
            } else {
                interior_wall_heights[i]
            };
            if !(floor < left && floor < right) {
                return Err(Error::Config(format!(
                    "floor of leaf well {} must lie strictly below both bounding walls",
                    i + 1
                )));
            }
        }
        let max_wall = interior_wall_heights
            .iter()
            .fold(0.0_f64, |a, &b| a.max(b));
        if !energy_cap.is_finite() || energy_cap <= max_wall {
            return Err(Error::Config(format!(
                "energy cap {energy_cap} must be finite and above every interior wall"
            )));
        }
        let n_edges = 2 * (n - 1) - 1;
        if kick_pairs.len() != n_edges {
            return Err(Error::Config(format!(
                "expected {} kick pairs (one per well number), got {}",
                n_edges,
                kick_pairs.len()
            )));
        }
        Ok(Self {
            wall_positions,
            interior_wall_heights,
            leaf_floor_energies,
            energy_cap,
            kick_pairs,
        })
    }

    pub fn leaf_count(&self) -> usize {
        self.wall_positions.len() - 1
    }
}

/// One edge of the merge tree.
#[derive(Debug, Clone)]
pub struct Edge {
    pub index: usize,
    pub x_left: f64,
    pub x_right: f64,
    /// Bottom of the energy interval; the edge's vertex sits here
    /// (leaf floor or merge height).
    pub h_bot: f64,
    /// Top of the energy interval; the parent's bottom, or the cap at
    /// the root (where the interval is closed).
    pub h_top: f64,
    pub parent: Option<usize>,
    /// (left child, right child); `None` for leaves.
    pub children: Option<(usize, usize)>,
    pub kick_index: usize,
}

impl Edge {
    pub fn width(&self) -> f64 {
        self.x_right - self.x_left
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// The merge tree of a well system.
#[derive(Debug, Clone)]
pub struct WellGraph {
    edges: Vec<Edge>,
    kick_pairs: Vec<KickPair>,
    root: usize,
    energy_cap: f64,
    leaf_count: usize,
}

/// Builds the merge tree: walls are consumed in ascending height order,
/// each joining the two wells it currently separates.
pub fn build_graph(system: &WellSystem) -> Result<WellGraph> {
    let n_walls = system.wall_positions.len();
    let n_leaves = n_walls - 1;
    let n_edges = 2 * n_leaves - 1;
    let mut edges: Vec<Edge> = Vec::with_capacity(n_edges);
    for i in 0..n_leaves {
        edges.push(Edge {
            index: i,
            x_left: system.wall_positions[i],
            x_right: system.wall_positions[i + 1],
            h_bot: system.leaf_floor_energies[i],
            h_top: f64::NAN, // set when the parent is created
            parent: None,
            children: None,
            kick_index: i,
        });
    }

    // Top-level well owning each side of each wall, updated as merges occur.
    let mut right_of_wall: Vec<Option<usize>> = (0..n_leaves).map(Some).collect();
    right_of_wall.push(None);
    let mut left_of_wall: Vec<Option<usize>> = vec![None];
    left_of_wall.extend((0..n_leaves).map(Some));

    let mut order: Vec<usize> = (0..n_walls.saturating_sub(2)).collect();
    order.sort_by(|&a, &b| {
        system.interior_wall_heights[a]
            .partial_cmp(&system.interior_wall_heights[b])
            .expect("finite heights")
    });

    for &iw in &order {
        let wall = iw + 1; // global wall index
        let h = system.interior_wall_heights[iw];
        let left = left_of_wall[wall].expect("interior wall separates two wells");
        let right = right_of_wall[wall].expect("interior wall separates two wells");
        let new = edges.len();
        edges[left].parent = Some(new);
        edges[left].h_top = h;
        edges[right].parent = Some(new);
        edges[right].h_top = h;
        let (xl, xr) = (edges[left].x_left, edges[right].x_right);
        edges.push(Edge {
            index: new,
            x_left: xl,
            x_right: xr,
            h_bot: h,
            h_top: f64::NAN,
            parent: None,
            children: Some((left, right)),
            kick_index: new,
        });
        // The merged well now owns both outer wall sides.
        let lw = system.wall_positions.iter().position(|&x| x == xl).unwrap();
        let rw = system.wall_positions.iter().position(|&x| x == xr).unwrap();
        right_of_wall[lw] = Some(new);
        left_of_wall[rw] = Some(new);
    }

    let root = n_edges - 1;
    edges[root].h_top = system.energy_cap;
    debug_assert!(edges[root].parent.is_none());
    debug_assert!(edges.iter().all(|e| e.h_top.is_finite()));

    Ok(WellGraph {
        edges,
        kick_pairs: system.kick_pairs.clone(),
        root,
        energy_cap: system.energy_cap,
        leaf_count: n_leaves,
    })
}

impl WellGraph {
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, index: usize) -> &Edge {
        &self.edges[index]
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn energy_cap(&self) -> f64 {
        self.energy_cap
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn kick(&self, edge: usize) -> &KickPair {
        &self.kick_pairs[self.edges[edge].kick_index]
    }

    pub fn kick_pairs(&self) -> &[KickPair] {
        &self.kick_pairs
    }

    /// Largest kick bound over all wells.
    pub fn kick_bound(&self) -> f64 {
        self.kick_pairs.iter().fold(0.0, |a, p| a.max(p.bound()))
    }

    /// The edge's vertex name: `V{k}` for a leaf bottom, `O{k}` for a merge
    /// level, with the 1-based well number `k`.
    pub fn vertex_label(&self, edge: usize) -> String {
        if self.edges[edge].is_leaf() {
            format!("V{}", edge + 1)
        } else {
            format!("O{}", edge + 1)
        }
    }

    /// Energy of the edge's vertex (leaf floor or merge height).
    pub fn vertex_energy(&self, edge: usize) -> f64 {
        self.edges[edge].h_bot
    }

    /// Position of the wall separating an interior edge's two children.
    pub fn mid_wall_position(&self, edge: usize) -> Option<f64> {
        self.edges[edge]
            .children
            .map(|(l, _)| self.edges[l].x_right)
    }

    /// Leaf indices under `edge`, left to right.
    pub fn leaves_under(&self, edge: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![edge];
        while let Some(e) = stack.pop() {
            match self.edges[e].children {
                None => out.push(e),
                Some((l, r)) => {
                    // Right first so the left subtree pops first.
                    stack.push(r);
                    stack.push(l);
                }
            }
        }
        out
    }

    /// Smallest vertical extent of any edge's energy interval. Kicks must
    /// be small relative to this for single-jump transitions to skip at
    /// most one vertex.
    pub fn min_vertical_gap(&self) -> f64 {
        self.edges
            .iter()
            .map(|e| e.h_top - e.h_bot)
            .fold(f64::INFINITY, f64::min)
    }

    /// The identification map: the edge whose energy interval contains `H`
    /// and whose span covers `q`.
    ///
    /// Intervals are half-open at the top, so at exactly a merge height the
    /// particle belongs to the big (merged) well. The root is closed at the
    /// cap. Spans are half-open on the right for determinism at the shared
    /// wall of two siblings.
    pub fn locate(&self, h: f64, q: f64) -> Result<usize> {
        let root = &self.edges[self.root];
        if !(q >= root.x_left && q <= root.x_right) {
            return Err(Error::Config(format!(
                "position {q} outside the domain [{}, {}]",
                root.x_left, root.x_right
            )));
        }
        if !(h <= self.energy_cap) {
            return Err(Error::Config(format!(
                "energy {h} above the cap {}",
                self.energy_cap
            )));
        }
        let mut e = self.root;
        while h < self.edges[e].h_bot {
            match self.edges[e].children {
                Some((l, r)) => {
                    let mid = self.edges[l].x_right;
                    e = if q < mid { l } else { r };
                }
                None => {
                    return Err(Error::Config(format!(
                        "energy {h} below the floor {} of the well containing position {q}",
                        self.edges[e].h_bot
                    )));
                }
            }
        }
        Ok(e)
    }

    /// Serializable summary of the tree.
    pub fn describe(&self) -> GraphDescription {
        GraphDescription {
            edges: self
                .edges
                .iter()
                .map(|e| EdgeDescription {
                    well: e.index + 1,
                    vertex: self.vertex_label(e.index),
                    x_left: e.x_left,
                    x_right: e.x_right,
                    width: e.width(),
                    h_bot: e.h_bot,
                    h_top: e.h_top,
                    parent: e.parent.map(|p| p + 1),
                    children: e.children.map(|(l, r)| [l + 1, r + 1]),
                })
                .collect(),
            root_well: self.root + 1,
            energy_cap: self.energy_cap,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphDescription {
    pub edges: Vec<EdgeDescription>,
    pub root_well: usize,
    pub energy_cap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EdgeDescription {
    pub well: usize,
    pub vertex: String,
    pub x_left: f64,
    pub x_right: f64,
    pub width: f64,
    pub h_bot: f64,
    pub h_top: f64,
    pub parent: Option<usize>,
    pub children: Option<[usize; 2]>,
}

/// Indices of the first pair of equal values, if any.
fn duplicate_pair(xs: &[f64]) -> Option<(usize, usize)> {
    for i in 0..xs.len() {
        for j in (i + 1)..xs.len() {
            if xs[i] == xs[j] {
                return Some((i, j));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::PerturbationSpec;
    use proptest::prelude::*;

    fn pair() -> KickPair {
        KickPair::new(
            PerturbationSpec::uniform(0.1, 0.3).unwrap(),
            PerturbationSpec::uniform(0.2, 0.4).unwrap(),
        )
        .unwrap()
    }

    pub(crate) fn four_leaf_system() -> WellSystem {
        // Left-nested: wall heights ascend left to right, so wells 1 and 2
        // merge first, the result joins well 3, and that joins well 4.
        WellSystem::new(
            vec![0.0, 1.0, 2.3, 3.9, 5.8],
            vec![1.0, 2.0, 3.0],
            vec![0.2, 0.3, 0.5, 0.4],
            6.0,
            vec![pair(); 7],
        )
        .unwrap()
    }

    #[test]
    fn four_leaf_merge_tree_shape() {
        let g = build_graph(&four_leaf_system()).unwrap();
        assert_eq!(g.edge_count(), 7);
        assert_eq!(g.leaf_count(), 4);
        assert_eq!(g.root(), 6);
        // Well 5 = wells 1 + 2, well 6 = well 5 + well 3, well 7 = root.
        assert_eq!(g.edge(4).children, Some((0, 1)));
        assert_eq!(g.edge(5).children, Some((4, 2)));
        assert_eq!(g.edge(6).children, Some((5, 3)));
        for (e, w) in [(4, 0.0 + 2.3), (5, 3.9), (6, 5.8)] {
            assert!((g.edge(e).width() - w).abs() < 1e-12);
        }
        // Width additivity at every interior vertex.
        for e in g.edges() {
            if let Some((l, r)) = e.children {
                assert!((e.width() - g.edge(l).width() - g.edge(r).width()).abs() < 1e-12);
            }
        }
        // Interval adjacency.
        for e in g.edges() {
            if let Some(p) = e.parent {
                assert_eq!(e.h_top, g.edge(p).h_bot);
            }
        }
        assert_eq!(g.edge(4).h_bot, 1.0);
        assert_eq!(g.edge(5).h_bot, 2.0);
        assert_eq!(g.edge(6).h_bot, 3.0);
        assert_eq!(g.edge(6).h_top, 6.0);
        assert_eq!(g.vertex_label(0), "V1");
        assert_eq!(g.vertex_label(4), "O5");
        assert_eq!(g.leaves_under(5), vec![0, 1, 2]);
        assert_eq!(g.leaves_under(6), vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_well_graph() {
        let sys = WellSystem::new(vec![0.0, 2.0], vec![], vec![0.5], 4.0, vec![pair()]).unwrap();
        let g = build_graph(&sys).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.root(), 0);
        assert!(g.edge(0).is_leaf());
        assert_eq!(g.edge(0).h_bot, 0.5);
        assert_eq!(g.edge(0).h_top, 4.0);
        assert_eq!(g.locate(1.7, 1.3).unwrap(), 0);
    }

    #[test]
    fn three_leaf_chain() {
        let sys = WellSystem::new(
            vec![0.0, 1.0, 2.5, 4.0],
            vec![1.0, 2.0],
            vec![0.2, 0.3, 0.4],
            5.0,
            vec![pair(); 5],
        )
        .unwrap();
        let g = build_graph(&sys).unwrap();
        assert_eq!(g.edge_count(), 5);
        assert_eq!(g.edge(3).children, Some((0, 1)));
        assert_eq!(g.edge(4).children, Some((3, 2)));
        for e in g.edges() {
            if let Some((l, r)) = e.children {
                assert!((e.width() - g.edge(l).width() - g.edge(r).width()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_order_follows_wall_height_not_position() {
        // Middle wall lowest: wells 2 and 3 merge first even though the
        // leftmost wall comes first in position.
        let sys = WellSystem::new(
            vec![0.0, 1.0, 2.0, 3.0, 4.0],
            vec![3.0, 1.0, 2.0],
            vec![0.2, 0.3, 0.5, 0.4],
            5.0,
            vec![pair(); 7],
        )
        .unwrap();
        let g = build_graph(&sys).unwrap();
        assert_eq!(g.edge(4).children, Some((1, 2)));
        assert_eq!(g.edge(5).children, Some((4, 3)));
        assert_eq!(g.edge(6).children, Some((0, 5)));
        assert_eq!(g.edge(4).h_bot, 1.0);
        assert_eq!(g.edge(5).h_bot, 2.0);
        assert_eq!(g.edge(6).h_bot, 3.0);
    }

    #[test]
    fn locate_examples() {
        let g = build_graph(&four_leaf_system()).unwrap();
        // Energy between the first and second merge heights over wells 1-2.
        assert_eq!(g.locate(1.5, 0.7).unwrap(), 4);
        assert_eq!(g.locate(1.5, 1.9).unwrap(), 4);
        // Same energy over well 3 stays in leaf 3.
        assert_eq!(g.locate(1.5, 3.0).unwrap(), 2);
        // Exactly at a merge height: the big well.
        assert_eq!(g.locate(1.0, 0.5).unwrap(), 4);
        assert_eq!(g.locate(2.0, 0.5).unwrap(), 5);
        assert_eq!(g.locate(3.0, 0.5).unwrap(), 6);
        // At the cap: root.
        assert_eq!(g.locate(6.0, 0.5).unwrap(), 6);
        // Above the cap or below the floor: errors.
        assert!(g.locate(6.1, 0.5).is_err());
        assert!(g.locate(0.1, 0.5).is_err());
        assert!(g.locate(1.5, -0.1).is_err());
        assert!(g.locate(1.5, 6.0).is_err());
    }

    #[test]
    fn shared_wall_goes_right() {
        let g = build_graph(&four_leaf_system()).unwrap();
        // Wall between wells 1 and 2 sits at position 1.0.
        assert_eq!(g.locate(0.3, 1.0).unwrap(), 1);
        assert_eq!(g.locate(0.3, 1.0 - 1e-12).unwrap(), 0);
    }

    #[test]
    fn min_vertical_gap_spans_all_edges() {
        let g = build_graph(&four_leaf_system()).unwrap();
        // Leaf 1: 1.0 - 0.2; leaf 2: 1.0 - 0.3 = 0.7 (the minimum);
        // leaf 3: 2.0 - 0.5; leaf 4: 3.0 - 0.4; merged: 1, 1, 3.
        assert!((g.min_vertical_gap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn invalid_systems_rejected() {
        let p = pair();
        // Duplicate interior wall heights.
        assert!(WellSystem::new(
            vec![0.0, 1.0, 2.0, 3.0],
            vec![1.0, 1.0],
            vec![0.2, 0.3, 0.4],
            4.0,
            vec![p.clone(); 5],
        )
        .is_err());
        // Duplicate floors.
        assert!(WellSystem::new(
            vec![0.0, 1.0, 2.0],
            vec![1.0],
            vec![0.3, 0.3],
            4.0,
            vec![p.clone(); 3],
        )
        .is_err());
        // Floor above a bounding wall.
        assert!(WellSystem::new(
            vec![0.0, 1.0, 2.0],
            vec![1.0],
            vec![0.2, 1.5],
            4.0,
            vec![p.clone(); 3],
        )
        .is_err());
        // Cap below the top wall.
        assert!(WellSystem::new(
            vec![0.0, 1.0, 2.0],
            vec![1.0],
            vec![0.2, 0.3],
            0.9,
            vec![p.clone(); 3],
        )
        .is_err());
        // Wrong kick-pair count.
        assert!(WellSystem::new(
            vec![0.0, 1.0, 2.0],
            vec![1.0],
            vec![0.2, 0.3],
            4.0,
            vec![p.clone(); 2],
        )
        .is_err());
        // Nonpositive floor.
        assert!(WellSystem::new(
            vec![0.0, 1.0, 2.0],
            vec![1.0],
            vec![0.0, 0.3],
            4.0,
            vec![p; 3],
        )
        .is_err());
    }

    /// Random well systems with 2..=5 leaves and shuffled wall heights.
    fn arb_system() -> impl Strategy<Value = WellSystem> {
        (2usize..=5, 0u64..1 << 20).prop_map(|(leaves, bits)| {
            let mut positions = vec![0.0];
            for i in 0..leaves {
                positions.push(positions[i] + 0.5 + ((bits >> i) & 3) as f64 * 0.4);
            }
            // Distinct heights 1.0, 1.7, 2.4, ... in a bit-derived order.
            let mut heights: Vec<f64> = (0..leaves - 1).map(|i| 1.0 + 0.7 * i as f64).collect();
            for i in (1..heights.len()).rev() {
                heights.swap(i, (bits as usize >> (2 * i)) % (i + 1));
            }
            let floors: Vec<f64> = (0..leaves).map(|i| 0.1 + 0.07 * i as f64).collect();
            let cap = 1.0 + 0.7 * leaves as f64;
            let pairs = vec![pair(); 2 * leaves - 1];
            WellSystem::new(positions, heights, floors, cap, pairs).unwrap()
        })
    }

    proptest! {
        /// Any point drawn inside an edge's region locates back to it.
        #[test]
        fn prop_locate_round_trip(
            sys in arb_system(),
            edge_sel in 0usize..1000,
            fh in 0.0f64..0.999,
            fq in 0.0f64..0.999,
        ) {
            let g = build_graph(&sys).unwrap();
            let e = &g.edges()[edge_sel % g.edge_count()];
            let h = e.h_bot + fh * (e.h_top - e.h_bot);
            let q = e.x_left + fq * e.width();
            prop_assert_eq!(g.locate(h, q).unwrap(), e.index);
        }

        /// Structural invariants hold for every generated system.
        #[test]
        fn prop_tree_invariants(sys in arb_system()) {
            let g = build_graph(&sys).unwrap();
            prop_assert_eq!(g.edge_count(), 2 * g.leaf_count() - 1);
            let mut seen_parent = vec![0usize; g.edge_count()];
            for e in g.edges() {
                if let Some((l, r)) = e.children {
                    prop_assert!((e.width() - g.edge(l).width() - g.edge(r).width()).abs() < 1e-12);
                    prop_assert_eq!(g.edge(l).parent, Some(e.index));
                    prop_assert_eq!(g.edge(r).parent, Some(e.index));
                    prop_assert!(g.edge(l).h_top == e.h_bot);
                    prop_assert!(g.edge(r).h_top == e.h_bot);
                    seen_parent[l] += 1;
                    seen_parent[r] += 1;
                }
                prop_assert!(e.h_bot < e.h_top);
            }
            // Every non-root edge has exactly one parent.
            for e in g.edges() {
                let expect = usize::from(e.index != g.root());
                prop_assert_eq!(seen_parent[e.index], expect);
            }
        }
    }
}
