//! Reference-element shape functions for Lagrangian quads on [-1,1]^2.
//!
//! Local node ordering:
//!   degree 1: corners 0..3 counterclockwise, starting at (-1,-1);
//!   degree 2: corners 0..3, edge midnodes 4..7 (edge e joins corners e and
//!   (e+1)%4, numbered bottom/right/top/left), center 8. This matches the
//!   VTK biquadratic quad layout.

pub const EDGE_CORNERS: [[usize; 2]; 4] = [[0, 1], [1, 2], [2, 3], [3, 0]];

/// Reference coordinates of the local nodes for a given degree.
pub fn node_coords(degree: usize) -> Vec<[f64; 2]> {
    match degree {
        1 => vec![[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]],
        2 => vec![
            [-1.0, -1.0],
            [1.0, -1.0],
            [1.0, 1.0],
            [-1.0, 1.0],
            [0.0, -1.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [-1.0, 0.0],
            [0.0, 0.0],
        ],
        _ => panic!("unsupported polynomial degree {degree}"),
    }
}

pub fn node_count(degree: usize) -> usize {
    match degree {
        1 => 4,
        2 => 9,
        _ => panic!("unsupported polynomial degree {degree}"),
    }
}

/// Local node ids lying on edge `e`, endpoints first.
pub fn edge_nodes(degree: usize, e: usize) -> Vec<usize> {
    let [a, b] = EDGE_CORNERS[e];
    match degree {
        1 => vec![a, b],
        2 => vec![a, b, 4 + e],
        _ => panic!("unsupported polynomial degree {degree}"),
    }
}

fn lagrange_1d(degree: usize, x: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
    // values, first and second derivatives at x for the 1D basis.
    match degree {
        1 => (
            [0.5 * (1.0 - x), 0.5 * (1.0 + x), 0.0],
            [-0.5, 0.5, 0.0],
            [0.0, 0.0, 0.0],
        ),
        2 => (
            [0.5 * x * (x - 1.0), 1.0 - x * x, 0.5 * x * (x + 1.0)],
            [x - 0.5, -2.0 * x, x + 0.5],
            [1.0, -2.0, 1.0],
        ),
        _ => panic!("unsupported polynomial degree {degree}"),
    }
}

/// Tensor index (a,b) of each local node, a along xi and b along eta.
fn tensor_index(degree: usize) -> Vec<[usize; 2]> {
    match degree {
        1 => vec![[0, 0], [1, 0], [1, 1], [0, 1]],
        2 => vec![
            [0, 0],
            [2, 0],
            [2, 2],
            [0, 2],
            [1, 0],
            [2, 1],
            [1, 2],
            [0, 1],
            [1, 1],
        ],
        _ => panic!("unsupported polynomial degree {degree}"),
    }
}

/// Shape function values at a reference point.
pub fn shape_values(degree: usize, p: [f64; 2]) -> Vec<f64> {
    let (lx, _, _) = lagrange_1d(degree, p[0]);
    let (ly, _, _) = lagrange_1d(degree, p[1]);
    tensor_index(degree)
        .iter()
        .map(|&[a, b]| lx[a] * ly[b])
        .collect()
}

/// Shape function gradients (d/dxi, d/deta) at a reference point.
pub fn shape_gradients(degree: usize, p: [f64; 2]) -> Vec<[f64; 2]> {
    let (lx, dlx, _) = lagrange_1d(degree, p[0]);
    let (ly, dly, _) = lagrange_1d(degree, p[1]);
    tensor_index(degree)
        .iter()
        .map(|&[a, b]| [dlx[a] * ly[b], lx[a] * dly[b]])
        .collect()
}

/// Reference-space second derivatives (d2/dxi2, d2/dxideta, d2/deta2).
pub fn shape_hessians(degree: usize, p: [f64; 2]) -> Vec<[f64; 3]> {
    let (lx, dlx, ddlx) = lagrange_1d(degree, p[0]);
    let (ly, dly, ddly) = lagrange_1d(degree, p[1]);
    tensor_index(degree)
        .iter()
        .map(|&[a, b]| [ddlx[a] * ly[b], dlx[a] * dly[b], lx[a] * ddly[b]])
        .collect()
}
