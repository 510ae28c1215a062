//! Per-element quadrature samples of the limit surface: basis values,
//! derivatives and the surface jet at every quadrature point.

use rayon::prelude::*;

use crate::error::Result;
use crate::linalg::CsrMatrix;
use crate::quadrature::{dunavant7, split4, TriangleRule};
use crate::scalar::{norm, scale, Vec3};
use crate::subdivision::{BasisEval, ControlMesh, ElementPatch, SurfaceJet};

/// Dyadic refinement depth towards an irregular corner. The basis is
/// polynomial on every piece except the innermost one.
pub const IRREGULAR_DEPTH: usize = 8;

/// Parametric sub-triangles on which the element basis is polynomial (up to
/// the innermost corner piece of irregular elements).
pub fn element_pieces(patch: &ElementPatch, depth: usize) -> Vec<[[f64; 2]; 3]> {
    let full = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let Some(k) = patch.irregular_corner() else {
        return vec![full];
    };
    let mut out = Vec::with_capacity(3 * depth + 1);
    let mut cur = full;
    for _ in 0..depth {
        let ch = split4(cur);
        for (j, c) in ch.iter().enumerate() {
            if j != k {
                out.push(*c);
            }
        }
        cur = ch[k];
    }
    out.push(cur);
    out
}

/// Quadrature samples of one element.
#[derive(Clone, Debug)]
pub struct ElementSamples {
    pub element: usize,
    pub vertices: Vec<usize>,
    pub xi: Vec<[f64; 2]>,
    /// Parametric weights (sum to 1/2).
    pub weights: Vec<f64>,
    pub basis: Vec<BasisEval<f64>>,
    pub jets: Vec<SurfaceJet<f64>>,
}

impl ElementSamples {
    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    /// Area element times weight.
    pub fn da(&self, i: usize) -> f64 {
        norm(self.jets[i].normal_raw()) * self.weights[i]
    }

    pub fn unit_normal(&self, i: usize) -> Vec3<f64> {
        let n = self.jets[i].normal_raw();
        scale(n, 1.0 / norm(n))
    }
}

/// Samples for every element of a mesh with a fixed rule.
#[derive(Clone, Debug)]
pub struct SurfaceQuadrature {
    pub elements: Vec<ElementSamples>,
    pub num_vertices: usize,
}

impl SurfaceQuadrature {
    pub fn new(mesh: &ControlMesh<f64>, rule: &TriangleRule<f64>) -> Result<Self> {
        let patches = mesh.patches()?;
        let elements = patches
            .par_iter()
            .map(|patch| {
                let cp = patch.compile::<f64>(IRREGULAR_DEPTH + 2);
                let mut xi = Vec::new();
                let mut weights = Vec::new();
                for piece in element_pieces(patch, IRREGULAR_DEPTH) {
                    let r = rule.mapped(piece);
                    xi.extend(r.points);
                    weights.extend(r.weights);
                }
                let basis: Vec<BasisEval<f64>> = xi
                    .iter()
                    .map(|&p| {
                        let mut ev = BasisEval::default();
                        cp.eval_into(p, &mut ev);
                        ev
                    })
                    .collect();
                let jets = basis.iter().map(|ev| SurfaceJet::from_basis(mesh.vertices(), &patch.vertices, ev)).collect();
                ElementSamples { element: patch.element, vertices: patch.vertices.clone(), xi, weights, basis, jets }
            })
            .collect();
        Ok(Self { elements, num_vertices: mesh.num_vertices() })
    }

    /// Default 7-point rule.
    pub fn standard(mesh: &ControlMesh<f64>) -> Result<Self> {
        Self::new(mesh, &dunavant7())
    }

    /// Recomputes the jets for moved control vertices (same connectivity).
    pub fn update_geometry(&mut self, vertices: &[Vec3<f64>]) {
        self.elements.par_iter_mut().for_each(|el| {
            for (j, ev) in el.jets.iter_mut().zip(&el.basis) {
                *j = SurfaceJet::from_basis(vertices, &el.vertices, ev);
            }
        });
    }

    pub fn area(&self) -> f64 {
        self.elements.iter().map(|el| (0..el.len()).map(|i| el.da(i)).sum::<f64>()).sum()
    }

    /// Enclosed volume by the divergence theorem.
    pub fn volume(&self) -> f64 {
        let mut v = 0.0;
        for el in &self.elements {
            for i in 0..el.len() {
                let n = el.jets[i].normal_raw();
                let x = el.jets[i].x;
                v += (x[0] * n[0] + x[1] * n[1] + x[2] * n[2]) * el.weights[i] / 3.0;
            }
        }
        v
    }

    /// Basis Gram matrix (integral of N_a N_b over the surface).
    pub fn gram(&self) -> CsrMatrix<f64> {
        let n = self.num_vertices;
        let mut trip = Vec::new();
        for el in &self.elements {
            let nv = el.vertices.len();
            let mut local = vec![0.0; nv * nv];
            for i in 0..el.len() {
                let w = el.da(i);
                let v = &el.basis[i].values;
                for a in 0..nv {
                    let wa = w * v[a];
                    for b in 0..nv {
                        local[a * nv + b] += wa * v[b];
                    }
                }
            }
            for a in 0..nv {
                for b in 0..nv {
                    trip.push((el.vertices[a], el.vertices[b], local[a * nv + b]));
                }
            }
        }
        CsrMatrix::from_triplets(n, n, trip)
    }

    /// Integral of each basis function.
    pub fn basis_integrals(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_vertices];
        for el in &self.elements {
            for i in 0..el.len() {
                let w = el.da(i);
                for (a, &v) in el.vertices.iter().enumerate() {
                    out[v] += w * el.basis[i].values[a];
                }
            }
        }
        out
    }
}
