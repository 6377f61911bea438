//! Quadrilateral meshes and the parametric quarter plate with a hole.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2×2 Gauss–Legendre points on `[-1, 1]²`, all with unit weight.
pub const GAUSS_2X2: [[f64; 2]; 4] = {
    const G: f64 = 0.577_350_269_189_625_8;
    [[-G, -G], [G, -G], [G, G], [-G, G]]
};

/// Bilinear shape functions and their reference derivatives at `(ξ, η)`.
pub fn shape(xi: f64, eta: f64) -> ([f64; 4], [[f64; 2]; 4]) {
    let n = [
        0.25 * (1.0 - xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 + eta),
        0.25 * (1.0 - xi) * (1.0 + eta),
    ];
    let d = [
        [-0.25 * (1.0 - eta), -0.25 * (1.0 - xi)],
        [0.25 * (1.0 - eta), -0.25 * (1.0 + xi)],
        [0.25 * (1.0 + eta), 0.25 * (1.0 + xi)],
        [-0.25 * (1.0 + eta), 0.25 * (1.0 - xi)],
    ];
    (n, d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    /// Node coordinates [mm].
    pub nodes: Vec<[f64; 2]>,
    /// Counter-clockwise 4-node connectivity.
    pub elements: Vec<[usize; 4]>,
    pub node_sets: BTreeMap<String, Vec<usize>>,
    /// Out-of-plane thickness [mm].
    pub thickness: f64,
}

impl Mesh {
    pub fn element_coords(&self, e: usize) -> [[f64; 2]; 4] {
        let c = &self.elements[e];
        [self.nodes[c[0]], self.nodes[c[1]], self.nodes[c[2]], self.nodes[c[3]]]
    }

    pub fn node_set(&self, name: &str) -> Result<&[usize]> {
        self.node_sets.get(name).map(Vec::as_slice).ok_or_else(|| Error::UnknownNodeSet(name.to_string()))
    }

    /// Checks connectivity, node-set indices and positive Jacobians.
    pub fn validate(&self) -> Result<()> {
        if !(self.thickness > 0.0) {
            return Err(Error::Mesh(format!("thickness {} must be positive", self.thickness)));
        }
        if let Some(i) = self.nodes.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Mesh(format!("node {i} has non-finite coordinates")));
        }
        for (e, conn) in self.elements.iter().enumerate() {
            if let Some(&bad) = conn.iter().find(|&&n| n >= self.nodes.len()) {
                return Err(Error::Mesh(format!("element {e} references missing node {bad}")));
            }
            for (gp, g) in GAUSS_2X2.iter().enumerate() {
                if !(jacobian_det(&self.element_coords(e), g[0], g[1]) > 0.0) {
                    return Err(Error::InvertedElement { element: e, gauss_point: gp });
                }
            }
        }
        for (name, set) in &self.node_sets {
            if let Some(&bad) = set.iter().find(|&&n| n >= self.nodes.len()) {
                return Err(Error::Mesh(format!("node set `{name}` references missing node {bad}")));
            }
        }
        Ok(())
    }

    /// Element ids attached to each node.
    pub fn node_elements(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (e, conn) in self.elements.iter().enumerate() {
            for &n in conn {
                out[n].push(e);
            }
        }
        out
    }

    /// Boundary edges (those used by exactly one element) whose two end
    /// nodes both belong to `set`.
    pub fn boundary_edges_in(&self, set: &[usize]) -> Vec<[usize; 2]> {
        let mut count: BTreeMap<(usize, usize), ([usize; 2], usize)> = BTreeMap::new();
        for conn in &self.elements {
            for k in 0..4 {
                let (a, b) = (conn[k], conn[(k + 1) % 4]);
                count.entry((a.min(b), a.max(b))).or_insert(([a, b], 0)).1 += 1;
            }
        }
        let mut member = vec![false; self.nodes.len()];
        for &n in set {
            member[n] = true;
        }
        count
            .into_values()
            .filter(|&(edge, c)| c == 1 && member[edge[0]] && member[edge[1]])
            .map(|(edge, _)| edge)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mesh: Mesh = serde_json::from_str(text)?;
        mesh.validate()?;
        Ok(mesh)
    }
}

pub fn jacobian_det(coords: &[[f64; 2]; 4], xi: f64, eta: f64) -> f64 {
    let (_, d) = shape(xi, eta);
    let mut j = [[0.0; 2]; 2];
    for a in 0..4 {
        for r in 0..2 {
            for c in 0..2 {
                j[r][c] += coords[a][r] * d[a][c];
            }
        }
    }
    j[0][0] * j[1][1] - j[0][1] * j[1][0]
}

/// Geometry of the quarter plate `[0, b] × [0, h]` with a hole of radius `r`
/// centred at the origin. The symmetry lines are `x = 0` and `y = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateGeometry {
    pub width_b: f64,
    pub hole_radius: f64,
    pub height: f64,
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "default_thickness")]
    pub thickness: f64,
    /// Power-law exponent clustering element rings towards the hole.
    #[serde(default = "default_grading")]
    pub grading: f64,
    /// Outer-boundary nodes on the right edge; derived from the aspect ratio
    /// when absent. Fixing it keeps the mesh topology (and node sets)
    /// identical across widths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_right: Option<usize>,
}

fn default_thickness() -> f64 {
    1.0
}

fn default_grading() -> f64 {
    1.5
}

impl PlateGeometry {
    pub fn new(width_b: f64, hole_radius: f64, height: f64, nx: usize, ny: usize) -> Self {
        PlateGeometry { width_b, hole_radius, height, nx, ny, thickness: 1.0, grading: 1.5, n_right: None }
    }

    pub fn build(&self) -> Result<Mesh> {
        build_quarter_plate(self)
    }

    /// `n_right` as used by [`build_quarter_plate`].
    pub fn resolved_n_right(&self) -> usize {
        self.n_right.unwrap_or_else(|| (((self.nx as f64) * self.height / (self.height + self.width_b)).round() as usize).clamp(1, self.nx.max(2) - 1))
    }
}

/// Structured mesh of the quarter plate. Index `i` runs around the hole from
/// the `y = 0` line (i = 0) to the `x = 0` line (i = nx); index `j` runs from
/// the hole (j = 0) to the outer boundary (j = ny). Outer points are spread
/// along the right edge and then the top edge; each radial grid line points
/// at the hole centre.
///
/// Node sets: `sym_y` (the `y = 0` line), `sym_x` (the `x = 0` line),
/// `top` (the loaded edge `y = h`), `hole`.
pub fn build_quarter_plate(g: &PlateGeometry) -> Result<Mesh> {
    let (b, r, h) = (g.width_b, g.hole_radius, g.height);
    if !(r > 0.0 && r < b && r < h) {
        return Err(Error::Mesh(format!("hole radius {r} must be positive and smaller than width {b} and height {h}")));
    }
    if g.nx < 2 || g.ny < 2 {
        return Err(Error::Mesh(format!("need nx, ny ≥ 2 (got {}, {})", g.nx, g.ny)));
    }
    if !(g.thickness > 0.0) || !(g.grading > 0.0) {
        return Err(Error::Mesh("thickness and grading must be positive".into()));
    }
    let (nx, ny) = (g.nx, g.ny);
    let n_right = match g.n_right {
        Some(n) if n >= 1 && n < nx => n,
        Some(n) => return Err(Error::Mesh(format!("n_right = {n} must lie in [1, {}]", nx - 1))),
        None => g.resolved_n_right(),
    };
    let n_top = nx - n_right;

    let outer = |i: usize| -> [f64; 2] {
        if i <= n_right {
            [b, h * i as f64 / n_right as f64]
        } else {
            let t = (i - n_right) as f64 / n_top as f64;
            [b * (1.0 - t), h]
        }
    };

    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        let s = (j as f64 / ny as f64).powf(g.grading);
        for i in 0..=nx {
            let o = outer(i);
            let theta = o[1].atan2(o[0]);
            let inner = [r * theta.cos(), r * theta.sin()];
            let mut p = [inner[0] + s * (o[0] - inner[0]), inner[1] + s * (o[1] - inner[1])];
            // exact symmetry-line coordinates
            if i == 0 {
                p[1] = 0.0;
            }
            if i == nx {
                p[0] = 0.0;
            }
            nodes.push(p);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut elements = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            elements.push([id(i, j), id(i, j + 1), id(i + 1, j + 1), id(i + 1, j)]);
        }
    }
    let mut node_sets = BTreeMap::new();
    node_sets.insert("sym_y".to_string(), (0..=ny).map(|j| id(0, j)).collect());
    node_sets.insert("sym_x".to_string(), (0..=ny).map(|j| id(nx, j)).collect());
    node_sets.insert("top".to_string(), (n_right..=nx).map(|i| id(i, ny)).collect());
    node_sets.insert("hole".to_string(), (0..=nx).map(|i| id(i, 0)).collect());
    let mesh = Mesh { nodes, elements, node_sets, thickness: g.thickness };
    mesh.validate()?;
    Ok(mesh)
}

/// Unit square split into `n × n` elements (test fixtures).
pub fn unit_square(n: usize, size: f64) -> Mesh {
    let mut nodes = Vec::new();
    for j in 0..=n {
        for i in 0..=n {
            nodes.push([size * i as f64 / n as f64, size * j as f64 / n as f64]);
        }
    }
    let id = |i: usize, j: usize| j * (n + 1) + i;
    let mut elements = Vec::new();
    for j in 0..n {
        for i in 0..n {
            elements.push([id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    let mut node_sets = BTreeMap::new();
    node_sets.insert("bottom".to_string(), (0..=n).map(|i| id(i, 0)).collect());
    node_sets.insert("top".to_string(), (0..=n).map(|i| id(i, n)).collect());
    node_sets.insert("left".to_string(), (0..=n).map(|j| id(0, j)).collect());
    node_sets.insert("right".to_string(), (0..=n).map(|j| id(n, j)).collect());
    Mesh { nodes, elements, node_sets, thickness: 1.0 }
}
