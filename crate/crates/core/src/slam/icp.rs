//! Point-to-point ICP for 2D sonar scans with nearest-neighbor
//! correspondences and a closed-form rigid fit per iteration.

use nalgebra::Vector2;

use crate::se2::SE2Pose;

#[derive(Debug, Clone, Copy)]
pub struct IcpParams {
    /// Maximum correspondence distance in meters.
    pub match_radius: f64,
    pub max_iterations: usize,
    /// Stop when the incremental transform update falls below this.
    pub tolerance: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            match_radius: 1.0,
            max_iterations: 50,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IcpResult {
    /// Transform mapping source-frame points into the target frame.
    pub transform: SE2Pose,
    pub rms_residual: f64,
    /// Fraction of source points with a correspondence within the match radius.
    pub overlap_fraction: f64,
    pub iterations: usize,
    /// Set when fewer than 3 correspondences survive.
    pub degenerate: bool,
}

fn correspondences(
    moved: &[Vector2<f64>],
    target: &[Vector2<f64>],
    radius: f64,
) -> Vec<(usize, usize, f64)> {
    let r2 = radius * radius;
    let mut pairs = Vec::new();
    for (si, s) in moved.iter().enumerate() {
        let mut best = r2;
        let mut best_j = None;
        for (tj, t) in target.iter().enumerate() {
            let d2 = (s - t).norm_squared();
            if d2 < best {
                best = d2;
                best_j = Some(tj);
            }
        }
        if let Some(tj) = best_j {
            pairs.push((si, tj, best));
        }
    }
    pairs
}

/// Align `source` onto `target`, starting from `init`.
pub fn icp_align(
    source: &[Vector2<f64>],
    target: &[Vector2<f64>],
    init: &SE2Pose,
    params: &IcpParams,
) -> IcpResult {
    let mut transform = *init;
    let mut iterations = 0;
    let mut degenerate = source.is_empty() || target.is_empty();

    if !degenerate {
        for _ in 0..params.max_iterations {
            iterations += 1;
            let moved: Vec<Vector2<f64>> =
                source.iter().map(|p| transform.transform_point(p)).collect();
            let pairs = correspondences(&moved, target, params.match_radius);
            if pairs.len() < 3 {
                degenerate = true;
                break;
            }
            // closed-form 2D rigid fit of the matched pairs
            let n = pairs.len() as f64;
            let mut cs = Vector2::zeros();
            let mut ct = Vector2::zeros();
            for &(si, tj, _) in &pairs {
                cs += moved[si];
                ct += target[tj];
            }
            cs /= n;
            ct /= n;
            let mut sxx = 0.0;
            let mut sxy = 0.0;
            for &(si, tj, _) in &pairs {
                let a = moved[si] - cs;
                let b = target[tj] - ct;
                sxx += a.x * b.x + a.y * b.y;
                sxy += a.x * b.y - a.y * b.x;
            }
            let dtheta = sxy.atan2(sxx);
            let (s, c) = dtheta.sin_cos();
            let trans = ct - Vector2::new(c * cs.x - s * cs.y, s * cs.x + c * cs.y);
            let update = SE2Pose::new(trans.x, trans.y, dtheta);
            transform = update.compose(&transform);
            if update.x.abs() + update.y.abs() + update.theta.abs() < params.tolerance {
                break;
            }
        }
    }

    let moved: Vec<Vector2<f64>> = source.iter().map(|p| transform.transform_point(p)).collect();
    let pairs = correspondences(&moved, target, params.match_radius);
    let overlap = if source.is_empty() {
        0.0
    } else {
        pairs.len() as f64 / source.len() as f64
    };
    let rms = if pairs.is_empty() {
        f64::INFINITY
    } else {
        (pairs.iter().map(|&(_, _, d2)| d2).sum::<f64>() / pairs.len() as f64).sqrt()
    };
    if pairs.len() < 3 {
        degenerate = true;
    }
    IcpResult {
        transform,
        rms_residual: rms,
        overlap_fraction: overlap,
        iterations,
        degenerate,
    }
}
