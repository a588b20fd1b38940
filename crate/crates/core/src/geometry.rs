//! Vertex geometries: pairwise geodesic distances and vertex weights.

use ndarray::{Array1, Array2};
use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};

use crate::error::{Error, Result};

/// Distances `D` (v×v, symmetric, zero diagonal, non-negative) and a
/// probability vector `w` over the vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    distances: Array2<f64>,
    weights: Array1<f64>,
}

impl Geometry {
    pub fn new(distances: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        let v = weights.len();
        if distances.dim() != (v, v) {
            return Err(Error::Shape(format!(
                "distance matrix is {:?} but there are {v} weights",
                distances.dim()
            )));
        }
        if v == 0 {
            return Err(Error::Argument("geometry needs at least one vertex".into()));
        }
        for i in 0..v {
            if distances[[i, i]] != 0.0 {
                return Err(Error::Validation(format!("D[{i}][{i}] = {} is not zero", distances[[i, i]])));
            }
            for j in 0..v {
                let d = distances[[i, j]];
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::Validation(format!("D[{i}][{j}] = {d} is not a finite non-negative distance")));
                }
                let dt = distances[[j, i]];
                if (d - dt).abs() > 1e-9 * d.abs().max(1.0) {
                    return Err(Error::Validation(format!("D is not symmetric at ({i}, {j})")));
                }
            }
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::Validation("vertex weights must be finite and >= 0".into()));
        }
        let total = weights.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("vertex weights sum to {total}, not 1")));
        }
        Ok(Self { distances, weights })
    }

    /// Geometry with uniform vertex weights.
    pub fn uniform(distances: Array2<f64>) -> Result<Self> {
        let v = distances.nrows();
        Self::new(distances, Array1::from_elem(v, 1.0 / v as f64))
    }

    pub fn num_vertices(&self) -> usize {
        self.weights.len()
    }

    pub fn distances(&self) -> &Array2<f64> {
        &self.distances
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }
}

/// Exact all-pairs shortest-path lengths over an undirected graph with
/// positive edge lengths (Dijkstra from every vertex).
pub fn shortest_path_distances(num_vertices: usize, edges: &[(usize, usize, f64)]) -> Result<Array2<f64>> {
    let mut graph = UnGraph::<(), f64>::with_capacity(num_vertices, edges.len());
    let nodes: Vec<NodeIndex> = (0..num_vertices).map(|_| graph.add_node(())).collect();
    for &(a, b, len) in edges {
        if a >= num_vertices || b >= num_vertices {
            return Err(Error::Argument(format!("edge ({a}, {b}) references a vertex >= {num_vertices}")));
        }
        if !(len > 0.0) || !len.is_finite() {
            return Err(Error::Argument(format!("edge ({a}, {b}) has non-positive length {len}")));
        }
        graph.add_edge(nodes[a], nodes[b], len);
    }
    let mut d = Array2::<f64>::zeros((num_vertices, num_vertices));
    for i in 0..num_vertices {
        let reached = dijkstra(&graph, nodes[i], None, |e| *e.weight());
        for j in 0..num_vertices {
            match reached.get(&nodes[j]) {
                Some(&len) => d[[i, j]] = len,
                None => return Err(Error::Disconnected { from: i, to: j }),
            }
        }
    }
    // Paths summed in opposite directions can differ in the last bit.
    for i in 0..num_vertices {
        d[[i, i]] = 0.0;
        for j in (i + 1)..num_vertices {
            let m = d[[i, j]].min(d[[j, i]]);
            d[[i, j]] = m;
            d[[j, i]] = m;
        }
    }
    Ok(d)
}

/// Vertex index of lattice position `(x, y)`, row-major.
pub fn grid_index(width: usize, x: usize, y: usize) -> usize {
    y * width + x
}

/// Image of vertex `i` under the 180° rotation of a `v`-vertex lattice.
pub fn rotate180(v: usize, i: usize) -> usize {
    v - 1 - i
}

/// Rectangular lattice, geodesics over 4-neighbour edges of length
/// `spacing`, uniform weights.
pub fn grid_geometry(width: usize, height: usize, spacing: f64) -> Result<Geometry> {
    if width == 0 || height == 0 {
        return Err(Error::Argument(format!("grid dimensions {width}x{height} must be >= 1")));
    }
    if !(spacing > 0.0) {
        return Err(Error::Argument(format!("grid spacing {spacing} must be > 0")));
    }
    let mut edges = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let i = grid_index(width, x, y);
            if x + 1 < width {
                edges.push((i, grid_index(width, x + 1, y), spacing));
            }
            if y + 1 < height {
                edges.push((i, grid_index(width, x, y + 1), spacing));
            }
        }
    }
    Geometry::uniform(shortest_path_distances(width * height, &edges)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn grid_examples() {
        let g = grid_geometry(2, 2, 1.0).unwrap();
        assert_eq!(g.distances()[[grid_index(2, 0, 0), grid_index(2, 1, 1)]], 2.0);

        let g = grid_geometry(1, 1, 1.0).unwrap();
        assert_eq!(g.distances(), &Array2::<f64>::zeros((1, 1)));
        assert_eq!(g.weights().to_vec(), vec![1.0]);

        let g = grid_geometry(3, 1, 1.0).unwrap();
        assert_eq!(g.distances()[[0, 2]], 2.0);
        assert_eq!(g.weights().to_vec(), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn grid_rejects_zero_dimension() {
        assert!(matches!(grid_geometry(0, 3, 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn triangle_and_square() {
        let d = shortest_path_distances(3, &[(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d[[i, j]], if i == j { 0.0 } else { 1.0 });
            }
        }
        let d = shortest_path_distances(4, &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (3, 0, 1.0)]).unwrap();
        assert_eq!(d[[0, 2]], 2.0);
        assert_eq!(d[[1, 3]], 2.0);
    }

    #[test]
    fn disconnected_names_pair() {
        let err = shortest_path_distances(3, &[(0, 1, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::Disconnected { from: 0, to: 2 }), "{err}");
    }

    /// Bellman-Ford style relaxation over all edges until nothing changes.
    fn relaxation_oracle(v: usize, edges: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
        let mut d = vec![vec![f64::INFINITY; v]; v];
        for s in 0..v {
            d[s][s] = 0.0;
            for _ in 0..v {
                let mut changed = false;
                for &(a, b, len) in edges {
                    if d[s][a] + len < d[s][b] {
                        d[s][b] = d[s][a] + len;
                        changed = true;
                    }
                    if d[s][b] + len < d[s][a] {
                        d[s][a] = d[s][b] + len;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
        }
        d
    }

    fn random_connected_graph(v: usize, extra: usize, seed: u64) -> Vec<(usize, usize, f64)> {
        let mut rng = crate::seed::rng(seed);
        let mut edges = Vec::new();
        for i in 1..v {
            edges.push((rng.random_range(0..i), i, rng.random_range(0.1..3.0)));
        }
        for _ in 0..extra {
            let a = rng.random_range(0..v);
            let b = rng.random_range(0..v);
            if a != b {
                edges.push((a, b, rng.random_range(0.1..3.0)));
            }
        }
        edges
    }

    #[test]
    fn matches_relaxation_oracle() {
        for seed in 0..20 {
            let edges = random_connected_graph(10, 12, seed);
            let d = shortest_path_distances(10, &edges).unwrap();
            let oracle = relaxation_oracle(10, &edges);
            for i in 0..10 {
                for j in 0..10 {
                    assert!((d[[i, j]] - oracle[i][j]).abs() < 1e-12, "seed {seed} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn rotation_isometry_is_exact() {
        for &(w, h) in &[(5, 5), (4, 7), (10, 10), (3, 1)] {
            let g = grid_geometry(w, h, 0.7).unwrap();
            let v = w * h;
            let d = g.distances();
            for i in 0..v {
                for j in 0..v {
                    assert_eq!(d[[i, j]], d[[rotate180(v, i), rotate180(v, j)]]);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn triangle_inequality(v in 2usize..30, extra in 0usize..40, seed in any::<u64>()) {
            let edges = random_connected_graph(v, extra, seed);
            let d = shortest_path_distances(v, &edges).unwrap();
            let g = Geometry::uniform(d).unwrap();
            let d = g.distances();
            for i in 0..v {
                for j in 0..v {
                    for k in 0..v {
                        prop_assert!(d[[i, j]] <= d[[i, k]] + d[[k, j]] + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn grid_triangle_inequality_at_50() {
        let g = grid_geometry(10, 5, 1.3).unwrap();
        let d = g.distances();
        for i in 0..50 {
            for j in 0..50 {
                for k in 0..50 {
                    assert!(d[[i, j]] <= d[[i, k]] + d[[k, j]] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        let d = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 2.0, 0.0]).unwrap();
        assert!(Geometry::uniform(d).is_err());
        let d = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(Geometry::new(d.clone(), Array1::from(vec![0.5, 0.6])).is_err());
        assert!(Geometry::new(d, Array1::from(vec![0.25, 0.75])).is_ok());
    }
}
