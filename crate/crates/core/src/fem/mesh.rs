use crate::error::{Error, Result};
use crate::geometry::Point;

/// Structured grid of bilinear quadrilaterals on `[0, lx] x [0, ly]`.
///
/// Nodes are numbered lexicographically (`j * (nx + 1) + i`), elements as
/// `j * nx + i`, and element connectivity runs counterclockwise starting at
/// the lower-left node.
#[derive(Debug, Clone)]
pub struct StructuredMesh {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    nodes: Vec<Point>,
    elements: Vec<[usize; 4]>,
    boundary: Vec<usize>,
    on_boundary: Vec<bool>,
}

impl StructuredMesh {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::Config(format!(
                "mesh needs at least 2 elements per direction (got {nx} x {ny})"
            )));
        }
        if !(lx > 0.0 && ly > 0.0) {
            return Err(Error::Config(format!(
                "domain size must be positive (got {lx} x {ly})"
            )));
        }
        let hx = lx / nx as f64;
        let hy = ly / ny as f64;
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
        let mut on_boundary = Vec::with_capacity(nodes.capacity());
        let mut boundary = Vec::new();
        for j in 0..=ny {
            for i in 0..=nx {
                let id = nodes.len();
                nodes.push([i as f64 * hx, j as f64 * hy]);
                let edge = i == 0 || j == 0 || i == nx || j == ny;
                on_boundary.push(edge);
                if edge {
                    boundary.push(id);
                }
            }
        }
        let mut elements = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let n0 = j * (nx + 1) + i;
                elements.push([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1]);
            }
        }
        Ok(Self {
            nx,
            ny,
            lx,
            ly,
            nodes,
            elements,
            boundary,
            on_boundary,
        })
    }

    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 4]] {
        &self.elements
    }

    /// Nodes on the domain boundary, each listed once.
    pub fn boundary(&self) -> &[usize] {
        &self.boundary
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.on_boundary[node]
    }

    /// Element area; uniform across the grid.
    pub fn element_volume(&self) -> f64 {
        self.hx() * self.hy()
    }

    pub fn element_centers(&self) -> Vec<Point> {
        let (hx, hy) = (self.hx(), self.hy());
        let mut out = Vec::with_capacity(self.n_elements());
        for j in 0..self.ny {
            for i in 0..self.nx {
                out.push([(i as f64 + 0.5) * hx, (j as f64 + 0.5) * hy]);
            }
        }
        out
    }

    /// Nodal field interpolated to element centres (bilinear mean of the four corners).
    pub fn center_values(&self, nodal: &[f64]) -> Vec<f64> {
        self.elements
            .iter()
            .map(|e| 0.25 * (nodal[e[0]] + nodal[e[1]] + nodal[e[2]] + nodal[e[3]]))
            .collect()
    }

    /// Transpose of [`center_values`](Self::center_values): scatter per-element
    /// cotangents back onto nodes.
    pub fn center_values_transpose(&self, per_element: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_nodes()];
        for (e, nodes) in self.elements.iter().enumerate() {
            let q = 0.25 * per_element[e];
            for &n in nodes {
                out[n] += q;
            }
        }
        out
    }

    /// `sum_e phi(x_e) v_e` with centre values from the nodal field.
    pub fn integrate_centers(&self, nodal: &[f64]) -> f64 {
        let v = self.element_volume();
        self.elements
            .iter()
            .map(|e| 0.25 * (nodal[e[0]] + nodal[e[1]] + nodal[e[2]] + nodal[e[3]]) * v)
            .sum()
    }

    /// Gradient of [`integrate_centers`](Self::integrate_centers) with respect to each node.
    pub fn integrate_centers_weights(&self) -> Vec<f64> {
        self.center_values_transpose(&vec![self.element_volume(); self.n_elements()])
    }
}
