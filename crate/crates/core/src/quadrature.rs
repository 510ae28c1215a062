//! Quadrature rules on the reference triangle {xi1, xi2 >= 0, xi1 + xi2 <= 1}.
//! Weights sum to the triangle area 1/2.

use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct TriangleRule<T> {
    pub points: Vec<[T; 2]>,
    pub weights: Vec<T>,
}

impl<T: Real> TriangleRule<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Integrates `f` over the reference triangle.
    pub fn integrate(&self, mut f: impl FnMut([T; 2]) -> T) -> T {
        self.points.iter().zip(&self.weights).map(|(&p, &w)| w * f(p)).sum()
    }

    /// Rule mapped to the sub-triangle with parametric corners `c`.
    pub fn mapped(&self, c: [[T; 2]; 3]) -> Self {
        let det = ((c[1][0] - c[0][0]) * (c[2][1] - c[0][1]) - (c[2][0] - c[0][0]) * (c[1][1] - c[0][1])).abs();
        let points = self
            .points
            .iter()
            .map(|&[s, t]| {
                [
                    c[0][0] + s * (c[1][0] - c[0][0]) + t * (c[2][0] - c[0][0]),
                    c[0][1] + s * (c[1][1] - c[0][1]) + t * (c[2][1] - c[0][1]),
                ]
            })
            .collect();
        let weights = self.weights.iter().map(|&w| w * det).collect();
        Self { points, weights }
    }
}

/// Gauss-Legendre nodes and weights on [0, 1].
pub fn gauss_legendre<T: Real>(n: usize) -> (Vec<T>, Vec<T>) {
    assert!(n > 0, "at least one node");
    let mut x = vec![0.0f64; n];
    let mut w = vec![0.0f64; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = nf * (z * p - pm) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            dp = 1.0;
            z = 0.0;
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = 0.5 * (1.0 - z);
        x[n - 1 - i] = 0.5 * (1.0 + z);
        w[i] = 0.5 * wi;
        w[n - 1 - i] = 0.5 * wi;
    }
    (x.into_iter().map(T::lit).collect(), w.into_iter().map(T::lit).collect())
}

/// Symmetric 7-point rule, exact for polynomials of degree 5.
pub fn dunavant7<T: Real>() -> TriangleRule<T> {
    let a1 = 0.059_715_871_789_769_82;
    let b1 = 0.470_142_064_105_115_1;
    let a2 = 0.797_426_985_353_087_3;
    let b2 = 0.101_286_507_323_456_3;
    let w0 = 0.225;
    let w1 = 0.132_394_152_788_506_2;
    let w2 = 0.125_939_180_544_827_1;
    let pts = [
        ([1.0 / 3.0, 1.0 / 3.0], w0),
        ([a1, b1], w1),
        ([b1, a1], w1),
        ([b1, b1], w1),
        ([a2, b2], w2),
        ([b2, a2], w2),
        ([b2, b2], w2),
    ];
    TriangleRule {
        points: pts.iter().map(|(p, _)| [T::lit(p[0]), T::lit(p[1])]).collect(),
        weights: pts.iter().map(|(_, w)| T::lit(0.5 * w)).collect(),
    }
}

/// Collapsed (Duffy) n x n Gauss rule with the collapsed edge at element
/// corner `corner` (0: (0,0), 1: (1,0), 2: (0,1)). The radial Jacobian cancels
/// a 1/r singularity at that corner.
pub fn duffy<T: Real>(n: usize, corner: usize) -> TriangleRule<T> {
    let (x, w) = gauss_legendre::<T>(n);
    let c = [[T::zero(), T::zero()], [T::one(), T::zero()], [T::zero(), T::one()]];
    let p0 = c[corner];
    let p1 = c[(corner + 1) % 3];
    let p2 = c[(corner + 2) % 3];
    let mut points = Vec::with_capacity(n * n);
    let mut weights = Vec::with_capacity(n * n);
    for i in 0..n {
        let s = x[i];
        for j in 0..n {
            let t = x[j];
            let q = [
                p0[0] + s * ((T::one() - t) * (p1[0] - p0[0]) + t * (p2[0] - p0[0])),
                p0[1] + s * ((T::one() - t) * (p1[1] - p0[1]) + t * (p2[1] - p0[1])),
            ];
            points.push(q);
            weights.push(w[i] * w[j] * s);
        }
    }
    TriangleRule { points, weights }
}

/// Collapsed n x n rule centred at an interior point `c` of the reference
/// triangle: the union of three Duffy rules on the sub-triangles meeting at `c`.
pub fn duffy_at_point<T: Real>(n: usize, c: [T; 2]) -> TriangleRule<T> {
    let base = duffy::<T>(n, 0);
    let corners = [[T::zero(), T::zero()], [T::one(), T::zero()], [T::zero(), T::one()]];
    let mut out = TriangleRule { points: Vec::new(), weights: Vec::new() };
    for k in 0..3 {
        let sub = [c, corners[k], corners[(k + 1) % 3]];
        let m = base.mapped(sub);
        out.points.extend(m.points);
        out.weights.extend(m.weights);
    }
    out
}

/// The four children of a parametric sub-triangle, matching Loop refinement.
pub fn split4<T: Real>(c: [[T; 2]; 3]) -> [[[T; 2]; 3]; 4] {
    let half = T::lit(0.5);
    let m = |a: [T; 2], b: [T; 2]| [half * (a[0] + b[0]), half * (a[1] + b[1])];
    let (m01, m12, m20) = (m(c[0], c[1]), m(c[1], c[2]), m(c[2], c[0]));
    [[c[0], m01, m20], [m01, c[1], m12], [m20, m12, c[2]], [m12, m20, m01]]
}
