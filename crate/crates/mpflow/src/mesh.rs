//! Structured quadrilateral meshes: axis-aligned rectangles (bilinear
//! geometry), annuli and disks (biquadratic geometry so curved boundaries are
//! resolved to the order of the discretisation).

use crate::error::{Error, Result};
use crate::reference;

#[derive(Debug, Clone)]
pub struct BoundaryFacet {
    pub element: usize,
    /// Local edge index 0..4 (bottom/right/top/left in reference coords).
    pub local_edge: usize,
    pub marker: String,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    /// Node ids per element; 4 entries for bilinear geometry, 9 for
    /// biquadratic (see `reference` for the local ordering).
    pub elements: Vec<Vec<usize>>,
    pub boundary_facets: Vec<BoundaryFacet>,
    pub geometric_degree: usize,
}

impl Mesh {
    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Corner node ids (first four local nodes) of an element.
    pub fn corners(&self, e: usize) -> [usize; 4] {
        let el = &self.elements[e];
        [el[0], el[1], el[2], el[3]]
    }

    /// Physical coordinates of a reference point in element `e`.
    pub fn map_point(&self, e: usize, p: [f64; 2]) -> [f64; 2] {
        let vals = reference::shape_values(self.geometric_degree, p);
        let mut x = [0.0; 2];
        for (n, &node) in self.elements[e].iter().enumerate() {
            x[0] += vals[n] * self.nodes[node][0];
            x[1] += vals[n] * self.nodes[node][1];
        }
        x
    }

    /// Jacobian dx/dxi of the geometric map at a reference point,
    /// as [[dx/dxi, dx/deta], [dy/dxi, dy/deta]].
    pub fn jacobian(&self, e: usize, p: [f64; 2]) -> [[f64; 2]; 2] {
        let grads = reference::shape_gradients(self.geometric_degree, p);
        let mut j = [[0.0; 2]; 2];
        for (n, &node) in self.elements[e].iter().enumerate() {
            for c in 0..2 {
                j[c][0] += grads[n][0] * self.nodes[node][c];
                j[c][1] += grads[n][1] * self.nodes[node][c];
            }
        }
        j
    }

    /// Second derivatives d2x_c/dxi_a dxi_b of the geometric map at a
    /// reference point, indexed [c][xixi, xieta, etaeta].
    pub fn map_hessian(&self, e: usize, p: [f64; 2]) -> [[f64; 3]; 2] {
        let hess = reference::shape_hessians(self.geometric_degree, p);
        let mut h = [[0.0; 3]; 2];
        for (n, &node) in self.elements[e].iter().enumerate() {
            for c in 0..2 {
                for k in 0..3 {
                    h[c][k] += hess[n][k] * self.nodes[node][c];
                }
            }
        }
        h
    }

    /// Bounding box of all nodes as ([xmin, ymin], [xmax, ymax]).
    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for n in &self.nodes {
            for c in 0..2 {
                lo[c] = lo[c].min(n[c]);
                hi[c] = hi[c].max(n[c]);
            }
        }
        (lo, hi)
    }
}

pub fn det2(j: &[[f64; 2]; 2]) -> f64 {
    j[0][0] * j[1][1] - j[0][1] * j[1][0]
}

pub fn invert2(j: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let d = det2(j);
    [
        [j[1][1] / d, -j[0][1] / d],
        [-j[1][0] / d, j[0][0] / d],
    ]
}

/// Axis-aligned rectangle meshed with nx * ny bilinear quads.
///
/// `markers` labels the four sides in local-edge order: bottom, right, top,
/// left.
pub fn build_rectangle(
    nx: usize,
    ny: usize,
    x_range: (f64, f64),
    y_range: (f64, f64),
    markers: [&str; 4],
) -> Result<Mesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::Mesh("rectangle needs at least one cell per direction".into()));
    }
    if !(x_range.1 > x_range.0) || !(y_range.1 > y_range.0) {
        return Err(Error::Mesh("rectangle ranges must be increasing".into()));
    }
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        let y = y_range.0 + (y_range.1 - y_range.0) * j as f64 / ny as f64;
        for i in 0..=nx {
            let x = x_range.0 + (x_range.1 - x_range.0) * i as f64 / nx as f64;
            nodes.push([x, y]);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut elements = Vec::with_capacity(nx * ny);
    let mut boundary_facets = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let e = elements.len();
            elements.push(vec![id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
            if j == 0 {
                boundary_facets.push(BoundaryFacet { element: e, local_edge: 0, marker: markers[0].into() });
            }
            if i + 1 == nx {
                boundary_facets.push(BoundaryFacet { element: e, local_edge: 1, marker: markers[1].into() });
            }
            if j + 1 == ny {
                boundary_facets.push(BoundaryFacet { element: e, local_edge: 2, marker: markers[2].into() });
            }
            if i == 0 {
                boundary_facets.push(BoundaryFacet { element: e, local_edge: 3, marker: markers[3].into() });
            }
        }
    }
    Ok(Mesh { nodes, elements, boundary_facets, geometric_degree: 1 })
}

/// One logically rectangular block of biquadratic quads under a smooth map
/// from the unit square. `wrap_v` glues v=0 to v=1 (periodic direction).
struct MappedBlock<'a> {
    nu: usize,
    nv: usize,
    wrap_v: bool,
    map: &'a dyn Fn(f64, f64) -> [f64; 2],
}

impl MappedBlock<'_> {
    /// Emit nodes/elements into the given mesh arrays; returns facet lists
    /// (element, local_edge) for the four block sides (u=0, u=1, v=0, v=1).
    fn emit(&self, nodes: &mut Vec<[f64; 2]>, elements: &mut Vec<Vec<usize>>) -> [Vec<(usize, usize)>; 4] {
        let fu = 2 * self.nu; // fine grid resolution (midpoints included)
        let fv = 2 * self.nv;
        let nvp = if self.wrap_v { fv } else { fv + 1 };
        let base = nodes.len();
        for jv in 0..nvp {
            let v = jv as f64 / fv as f64;
            for iu in 0..=fu {
                let u = iu as f64 / fu as f64;
                nodes.push((self.map)(u, v));
            }
        }
        let id = |iu: usize, jv: usize| {
            let jv = if self.wrap_v { jv % fv } else { jv };
            base + jv * (fu + 1) + iu
        };
        // local (a,b) offsets on the fine grid for the 9 nodes
        const OFF: [[usize; 2]; 9] =
            [[0, 0], [2, 0], [2, 2], [0, 2], [1, 0], [2, 1], [1, 2], [0, 1], [1, 1]];
        let mut sides: [Vec<(usize, usize)>; 4] = Default::default();
        for jv in 0..self.nv {
            for iu in 0..self.nu {
                let e = elements.len();
                elements.push(
                    OFF.iter().map(|&[a, b]| id(2 * iu + a, 2 * jv + b)).collect(),
                );
                // reference xi runs along u, eta along v
                if iu == 0 {
                    sides[0].push((e, 3));
                }
                if iu + 1 == self.nu {
                    sides[1].push((e, 1));
                }
                if !self.wrap_v && jv == 0 {
                    sides[2].push((e, 0));
                }
                if !self.wrap_v && jv + 1 == self.nv {
                    sides[3].push((e, 2));
                }
            }
        }
        sides
    }
}

/// Annulus r_inner < r < r_outer meshed with nr * ntheta biquadratic quads,
/// periodic in the angular direction. Boundary markers: "inner", "outer".
pub fn build_annulus(nr: usize, ntheta: usize, r_inner: f64, r_outer: f64) -> Result<Mesh> {
    if nr == 0 || ntheta < 3 {
        return Err(Error::Mesh("annulus needs nr >= 1 and ntheta >= 3".into()));
    }
    if !(r_inner > 0.0 && r_outer > r_inner) {
        return Err(Error::Mesh("annulus radii must satisfy 0 < r_inner < r_outer".into()));
    }
    let map = |u: f64, v: f64| {
        let r = r_inner + (r_outer - r_inner) * u;
        let th = 2.0 * std::f64::consts::PI * v;
        [r * th.cos(), r * th.sin()]
    };
    let mut nodes = Vec::new();
    let mut elements = Vec::new();
    let block = MappedBlock { nu: nr, nv: ntheta, wrap_v: true, map: &map };
    let sides = block.emit(&mut nodes, &mut elements);
    let mut boundary_facets = Vec::new();
    for &(e, le) in &sides[0] {
        boundary_facets.push(BoundaryFacet { element: e, local_edge: le, marker: "inner".into() });
    }
    for &(e, le) in &sides[1] {
        boundary_facets.push(BoundaryFacet { element: e, local_edge: le, marker: "outer".into() });
    }
    Ok(Mesh { nodes, elements, boundary_facets, geometric_degree: 2 })
}

/// Disk of given radius meshed as a five-block O-grid: a square core of
/// half-width radius/2 surrounded by four transfinite blocks blending the
/// square sides into the circular arc. n_core cells across the core,
/// n_ring cells radially in each outer block. Boundary marker: "boundary".
pub fn build_disk(n_ring: usize, n_core: usize, radius: f64) -> Result<Mesh> {
    if n_ring == 0 || n_core == 0 {
        return Err(Error::Mesh("disk needs n_ring >= 1 and n_core >= 1".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Mesh("disk radius must be positive".into()));
    }
    let s = 0.5 * radius;
    let pi = std::f64::consts::PI;
    let mut nodes = Vec::new();
    let mut elements = Vec::new();
    let mut boundary_facets = Vec::new();

    let core_map = |u: f64, v: f64| [-s + 2.0 * s * u, -s + 2.0 * s * v];
    let core = MappedBlock { nu: n_core, nv: n_core, wrap_v: false, map: &core_map };
    core.emit(&mut nodes, &mut elements);

    // Square corners counterclockwise starting at (s, -s); ring block q runs
    // from corner q to corner q+1 along its inner edge.
    let corner = |q: usize| -> [f64; 2] {
        let [cx, cy] = match q % 4 {
            0 => [1.0, -1.0],
            1 => [1.0, 1.0],
            2 => [-1.0, 1.0],
            _ => [-1.0, -1.0],
        };
        [s * cx, s * cy]
    };
    for q in 0..4 {
        let a0 = corner(q);
        let a1 = corner(q + 1);
        let th0 = -0.25 * pi + q as f64 * 0.5 * pi;
        let ring_map = move |u: f64, v: f64| {
            // u radial (inner edge to arc), v along the edge, counterclockwise
            let ex = a0[0] + (a1[0] - a0[0]) * v;
            let ey = a0[1] + (a1[1] - a0[1]) * v;
            let th = th0 + 0.5 * pi * v;
            let bx = radius * th.cos();
            let by = radius * th.sin();
            [ex + (bx - ex) * u, ey + (by - ey) * u]
        };
        let block = MappedBlock { nu: n_ring, nv: n_core, wrap_v: false, map: &ring_map };
        let sides = block.emit(&mut nodes, &mut elements);
        for &(e, le) in &sides[1] {
            boundary_facets.push(BoundaryFacet { element: e, local_edge: le, marker: "boundary".into() });
        }
    }

    let mut mesh = Mesh { nodes, elements, boundary_facets, geometric_degree: 2 };
    weld_nodes(&mut mesh, 1e-9 * radius)?;
    Ok(mesh)
}

/// Merge nodes whose coordinates coincide up to `tol` and renumber the
/// elements accordingly. Used to stitch multi-block meshes together.
fn weld_nodes(mesh: &mut Mesh, tol: f64) -> Result<()> {
    use std::collections::HashMap;
    let key = |p: [f64; 2]| -> (i64, i64) {
        ((p[0] / tol).round() as i64, (p[1] / tol).round() as i64)
    };
    let mut seen: HashMap<(i64, i64), usize> = HashMap::new();
    let mut remap = vec![usize::MAX; mesh.nodes.len()];
    let mut new_nodes = Vec::with_capacity(mesh.nodes.len());
    for (i, &p) in mesh.nodes.iter().enumerate() {
        // check the 3x3 neighborhood of quantisation cells to be robust to
        // points straddling a cell boundary
        let (kx, ky) = key(p);
        let mut found = None;
        'search: for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(&j) = seen.get(&(kx + dx, ky + dy)) {
                    let q: [f64; 2] = new_nodes[j];
                    if (p[0] - q[0]).hypot(p[1] - q[1]) <= tol {
                        found = Some(j);
                        break 'search;
                    }
                }
            }
        }
        match found {
            Some(j) => remap[i] = j,
            None => {
                let j = new_nodes.len();
                new_nodes.push(p);
                seen.insert((kx, ky), j);
                remap[i] = j;
            }
        }
    }
    for el in &mut mesh.elements {
        for n in el.iter_mut() {
            *n = remap[*n];
        }
    }
    mesh.nodes = new_nodes;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::QuadRule;
    use std::collections::HashMap;

    fn mesh_area(mesh: &Mesh, exactness: usize) -> f64 {
        let rule = QuadRule::with_exactness(exactness);
        let mut area = 0.0;
        for e in 0..mesh.n_elements() {
            for (p, w) in rule.points.iter().zip(&rule.weights) {
                let j = mesh.jacobian(e, *p);
                area += w * det2(&j);
            }
        }
        area
    }

    fn min_det(mesh: &Mesh, exactness: usize) -> f64 {
        let rule = QuadRule::with_exactness(exactness);
        let mut mn = f64::INFINITY;
        for e in 0..mesh.n_elements() {
            for p in &rule.points {
                mn = mn.min(det2(&mesh.jacobian(e, *p)));
            }
        }
        mn
    }

    /// Every interior edge must be shared by exactly two elements with the
    /// same node set; boundary facets account for the rest.
    fn check_conformity(mesh: &Mesh) {
        let mut edges: HashMap<(usize, usize), Vec<(usize, usize)>> = HashMap::new();
        for (e, el) in mesh.elements.iter().enumerate() {
            for le in 0..4 {
                let [a, b] = reference::EDGE_CORNERS[le];
                let mut k = (el[a], el[b]);
                if k.0 > k.1 {
                    k = (k.1, k.0);
                }
                edges.entry(k).or_default().push((e, le));
            }
        }
        let mut boundary_edges = 0;
        for (k, owners) in &edges {
            assert!(owners.len() <= 2, "edge {k:?} shared by {} elements", owners.len());
            if owners.len() == 1 {
                boundary_edges += 1;
            } else if mesh.geometric_degree == 2 {
                // midnode must coincide across the two owners
                let mids: Vec<usize> = owners
                    .iter()
                    .map(|&(e, le)| mesh.elements[e][4 + le])
                    .collect();
                assert_eq!(mids[0], mids[1], "midnode mismatch on edge {k:?}");
            }
        }
        assert_eq!(boundary_edges, mesh.boundary_facets.len());
    }

    #[test]
    fn rectangle_counts_and_area() {
        let m = build_rectangle(1, 1, (0.0, 1.0), (0.0, 1.0), ["b", "r", "t", "l"]).unwrap();
        assert_eq!(m.n_nodes(), 4);
        assert_eq!(m.n_elements(), 1);
        assert_eq!(m.boundary_facets.len(), 4);
        let m = build_rectangle(100, 800, (0.0, 0.5), (-2.0, 2.0), ["b", "r", "t", "l"]).unwrap();
        assert_eq!(m.n_elements(), 80_000);
        assert_eq!(m.n_nodes(), 101 * 801);
        assert!((mesh_area(&m, 2) - 2.0).abs() < 1e-10);
        assert!(min_det(&m, 6) > 0.0);
        check_conformity(&m);
    }

    #[test]
    fn rectangle_markers() {
        let m = build_rectangle(3, 2, (0.0, 3.0), (0.0, 2.0), ["bot", "rgt", "top", "lft"]).unwrap();
        let count = |mk: &str| m.boundary_facets.iter().filter(|f| f.marker == mk).count();
        assert_eq!(count("bot"), 3);
        assert_eq!(count("top"), 3);
        assert_eq!(count("lft"), 2);
        assert_eq!(count("rgt"), 2);
    }

    #[test]
    fn rectangle_invalid_input() {
        assert!(build_rectangle(0, 1, (0.0, 1.0), (0.0, 1.0), ["b", "r", "t", "l"]).is_err());
        assert!(build_rectangle(1, 1, (1.0, 1.0), (0.0, 1.0), ["b", "r", "t", "l"]).is_err());
    }

    #[test]
    fn annulus_counts_and_area() {
        let m = build_annulus(64, 384, 0.25, 0.75).unwrap();
        assert_eq!(m.n_elements(), 24_576);
        assert_eq!(m.geometric_degree, 2);
        // periodic in theta: (2*64+1) * (2*384) points
        assert_eq!(m.n_nodes(), 129 * 768);
        let exact = std::f64::consts::PI * (0.75 * 0.75 - 0.25 * 0.25);
        assert!((mesh_area(&m, 8) - exact).abs() / exact < 1e-3);
        assert!(min_det(&m, 6) > 0.0);
        check_conformity(&m);
        assert!(m.boundary_facets.iter().any(|f| f.marker == "inner"));
        assert!(m.boundary_facets.iter().any(|f| f.marker == "outer"));
        assert_eq!(m.boundary_facets.len(), 2 * 384);
    }

    #[test]
    fn annulus_invalid_input() {
        assert!(build_annulus(4, 2, 0.25, 0.75).is_err());
        assert!(build_annulus(4, 16, 0.75, 0.25).is_err());
        assert!(build_annulus(4, 16, 0.0, 0.75).is_err());
    }

    #[test]
    fn disk_counts_and_area() {
        let m = build_disk(88, 32, 1.0).unwrap();
        assert_eq!(m.n_elements(), 32 * 32 + 4 * 32 * 88);
        assert_eq!(m.n_elements(), 12_288);
        let exact = std::f64::consts::PI;
        assert!((mesh_area(&m, 8) - exact).abs() / exact < 1e-3);
        assert!(min_det(&m, 6) > 0.0);
        check_conformity(&m);
        assert_eq!(m.boundary_facets.len(), 4 * 32);
        assert!(m.boundary_facets.iter().all(|f| f.marker == "boundary"));
    }

    #[test]
    fn disk_small_is_valid() {
        let m = build_disk(2, 2, 0.5);
        let m = m.unwrap();
        assert!(min_det(&m, 6) > 0.0);
        check_conformity(&m);
        // all boundary nodes on the circle
        for f in &m.boundary_facets {
            for ln in reference::edge_nodes(2, f.local_edge) {
                let p = m.nodes[m.elements[f.element][ln]];
                let r = p[0].hypot(p[1]);
                assert!((r - 0.5).abs() < 1e-12);
            }
        }
    }
}
