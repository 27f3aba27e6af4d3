//! Euclidean projection onto the intersection of two balls via Dykstra's
//! alternating projections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{norm, Matrix};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 500;

/// Multiply-accumulates charged per coordinate per Dykstra iteration
/// (two ball projections, two correction updates, two convergence norms).
const OPS_PER_COORD_ITER: u64 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub point: Vec<f64>,
    pub iterations: usize,
    /// False when the balls do not intersect; `point` is then the boundary
    /// of the first ball nearest the second centre.
    pub feasible: bool,
    pub converged: bool,
    pub ops: u64,
}

fn project_ball(x: &[f64], c: &[f64], r: f64, out: &mut [f64]) {
    let mut d2 = 0.0;
    for (xi, ci) in x.iter().zip(c) {
        d2 += (xi - ci) * (xi - ci);
    }
    let d = d2.sqrt();
    if d <= r {
        out.copy_from_slice(x);
    } else {
        let k = r / d;
        for ((o, xi), ci) in out.iter_mut().zip(x).zip(c) {
            *o = ci + k * (xi - ci);
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Largest `θ ∈ [0, 1]` keeping `z + θ v` inside ball `(c, r)`, given `z`
/// inside it.
fn max_step_inside(z: &[f64], v: &[f64], c: &[f64], r: f64) -> f64 {
    let a: f64 = v.iter().map(|x| x * x).sum();
    if a == 0.0 {
        return 1.0;
    }
    let mut b = 0.0;
    let mut c0 = -r * r;
    for ((zi, vi), ci) in z.iter().zip(v).zip(c) {
        b += (zi - ci) * vi;
        c0 += (zi - ci) * (zi - ci);
    }
    let disc = (b * b - a * c0).max(0.0);
    ((-b + disc.sqrt()) / a).clamp(0.0, 1.0)
}

/// Projects `point` onto `ball(c1, r1) ∩ ball(c2, r2)`.
///
/// Iterates until successive iterates move less than `tol` and the two
/// half-step iterates agree within `tol`, or `max_iter` is reached. The
/// result is then pulled toward an interior point of the lens if rounding
/// left it marginally outside either ball, so it always satisfies both
/// constraints.
pub fn project_two_balls(
    point: &[f64],
    c1: &[f64],
    r1: f64,
    c2: &[f64],
    r2: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Projection> {
    let n = point.len();
    if c1.len() != n || c2.len() != n {
        return Err(Error::Shape(format!(
            "project_two_balls: point {n}, centres {} and {}",
            c1.len(),
            c2.len()
        )));
    }
    if !(r1 > 0.0 && r2 > 0.0) {
        return Err(Error::Usage(format!(
            "ball radii must be positive, got {r1} and {r2}"
        )));
    }

    let centre_gap = dist(c1, c2);
    if centre_gap > r1 + r2 {
        let k = r1 / centre_gap;
        let point = c1.iter().zip(c2).map(|(a, b)| a + k * (b - a)).collect();
        return Ok(Projection {
            point,
            iterations: 0,
            feasible: false,
            converged: true,
            ops: 3 * n as u64,
        });
    }

    // If projecting onto one ball alone lands inside the other, that point
    // is already the projection onto the intersection.
    let mut single = vec![0.0; n];
    for (c, r, oc, or) in [(c2, r2, c1, r1), (c1, r1, c2, r2)] {
        project_ball(point, c, r, &mut single);
        if dist(&single, oc) <= or {
            return Ok(Projection {
                point: single,
                iterations: 0,
                feasible: true,
                converged: true,
                ops: 6 * n as u64,
            });
        }
    }

    let mut x = point.to_vec();
    let mut y = vec![0.0; n];
    let mut x_next = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut buf = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        iterations += 1;
        for i in 0..n {
            buf[i] = x[i] + p[i];
        }
        project_ball(&buf, c1, r1, &mut y);
        for i in 0..n {
            p[i] = buf[i] - y[i];
            buf[i] = y[i] + q[i];
        }
        project_ball(&buf, c2, r2, &mut x_next);
        for i in 0..n {
            q[i] = buf[i] - x_next[i];
        }
        let moved = dist(&x_next, &x);
        let split = dist(&x_next, &y);
        std::mem::swap(&mut x, &mut x_next);
        if moved < tol && split < tol {
            converged = true;
            break;
        }
    }

    let mut ops = iterations as u64 * OPS_PER_COORD_ITER * n as u64;
    if dist(&x, c1) > r1 || dist(&x, c2) > r2 {
        // Interior anchor on the centre segment.
        let anchor: Vec<f64> = if centre_gap == 0.0 {
            c1.to_vec()
        } else {
            let lo = (centre_gap - r2).max(0.0);
            let hi = centre_gap.min(r1);
            let t = 0.5 * (lo + hi) / centre_gap;
            c1.iter().zip(c2).map(|(a, b)| a + t * (b - a)).collect()
        };
        let v: Vec<f64> = x.iter().zip(&anchor).map(|(xi, zi)| xi - zi).collect();
        let theta = max_step_inside(&anchor, &v, c1, r1).min(max_step_inside(&anchor, &v, c2, r2));
        let theta = theta * (1.0 - 1e-12);
        for i in 0..n {
            x[i] = anchor[i] + theta * v[i];
        }
        ops += 6 * n as u64;
    }

    Ok(Projection {
        point: x,
        iterations,
        feasible: true,
        converged,
        ops,
    })
}

/// Matrix form of [`project_two_balls`] with Frobenius-norm balls.
pub fn project_two_balls_matrix(
    point: &Matrix,
    c1: &Matrix,
    r1: f64,
    c2: &Matrix,
    r2: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(Matrix, Projection)> {
    if point.shape() != c1.shape() || point.shape() != c2.shape() {
        return Err(Error::Shape(format!(
            "project_two_balls: {:?}, {:?}, {:?}",
            point.shape(),
            c1.shape(),
            c2.shape()
        )));
    }
    let proj = project_two_balls(
        point.as_slice(),
        c1.as_slice(),
        r1,
        c2.as_slice(),
        r2,
        tol,
        max_iter,
    )?;
    let m = Matrix::new(point.rows(), point.cols(), proj.point.clone())?;
    Ok((m, proj))
}

/// `‖x − c‖ − r`, positive when `x` lies outside the ball.
pub fn ball_violation(x: &[f64], c: &[f64], r: f64) -> f64 {
    let diff: Vec<f64> = x.iter().zip(c).map(|(a, b)| a - b).collect();
    norm(&diff) - r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proj(p: &[f64], c1: &[f64], r1: f64, c2: &[f64], r2: f64) -> Projection {
        project_two_balls(p, c1, r1, c2, r2, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap()
    }

    #[test]
    fn interior_point_is_fixed() {
        let p = proj(&[0.1, 0.2], &[0.0, 0.0], 1.0, &[0.5, 0.0], 1.0);
        assert_eq!(p.point, vec![0.1, 0.2]);
        assert!(p.feasible && p.converged);
    }

    #[test]
    fn scalar_interval() {
        let p = proj(&[5.0], &[0.0], 1.0, &[0.0], 2.0);
        assert_eq!(p.point, vec![1.0]);
    }

    #[test]
    fn disjoint_balls_fall_back_to_first_ball_boundary() {
        let p = proj(&[9.0, 9.0], &[0.0, 0.0], 1.0, &[4.0, 0.0], 1.0);
        assert!(!p.feasible);
        assert_eq!(p.point, vec![1.0, 0.0]);
    }

    #[test]
    fn non_positive_radius_is_rejected() {
        assert!(matches!(
            project_two_balls(&[1.0], &[0.0], 0.0, &[0.0], 1.0, 1e-9, 10),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn tangent_balls_return_the_contact_point() {
        let p = proj(&[1.0, 5.0], &[0.0, 0.0], 1.0, &[2.0, 0.0], 1.0);
        assert!(p.feasible);
        assert!(ball_violation(&p.point, &[0.0, 0.0], 1.0) <= 0.0);
        assert!(ball_violation(&p.point, &[2.0, 0.0], 1.0) <= 0.0);
        assert!((p.point[0] - 1.0).abs() < 1e-6 && p.point[1].abs() < 1e-3);
    }

    #[test]
    fn lens_corner_is_reached() {
        // Two unit balls at (±0.5, 0); the lens corners are (0, ±√0.75).
        let p = proj(&[0.0, 5.0], &[-0.5, 0.0], 1.0, &[0.5, 0.0], 1.0);
        assert!((p.point[0]).abs() < 1e-6);
        assert!((p.point[1] - 0.75f64.sqrt()).abs() < 1e-6);
    }
}
