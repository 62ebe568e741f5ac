//! Incremental graph-based pose SLAM: odometry and ICP loop-closure factors,
//! batch Levenberg-Marquardt optimization over wrap-aware residuals, and
//! marginal covariance recovery from the Gauss-Newton information matrix.

pub mod icp;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::se2::{angle_diff, symmetrize3, Gaussian3, SE2Pose};
use crate::world::SensorConfig;

pub use icp::{icp_align, IcpParams, IcpResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Prior,
    Odometry,
    LoopClosure,
}

impl FactorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FactorKind::Prior => "prior",
            FactorKind::Odometry => "odom",
            FactorKind::LoopClosure => "loop",
        }
    }
}

/// A relative-pose constraint between keyframes `i` and `j` (a prior uses
/// `i == j`).
#[derive(Debug, Clone, Copy)]
pub struct Factor {
    pub kind: FactorKind,
    pub i: usize,
    pub j: usize,
    pub measurement: SE2Pose,
    pub information: Matrix3<f64>,
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: usize,
    pub estimate: SE2Pose,
    /// Point detections in this keyframe's sensor frame.
    pub scan: Vec<Vector2<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct OptReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    pub keyframes: Vec<Keyframe>,
    pub factors: Vec<Factor>,
    dirty: bool,
}

fn check_pd(m: &Matrix3<f64>) -> Result<()> {
    if m.cholesky().is_none() {
        return Err(Error::NotPd);
    }
    Ok(())
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    pub fn estimate(&self, id: usize) -> SE2Pose {
        self.keyframes[id].estimate
    }

    /// Append a keyframe. On an empty graph the delta is taken as the start
    /// pose and the information installs the prior; afterwards the new
    /// estimate is previous o delta with an odometry factor.
    pub fn add_keyframe(
        &mut self,
        odom_delta: SE2Pose,
        information: Matrix3<f64>,
        scan: Vec<Vector2<f64>>,
    ) -> Result<usize> {
        check_pd(&information)?;
        let id = self.keyframes.len();
        if id == 0 {
            self.factors.push(Factor {
                kind: FactorKind::Prior,
                i: 0,
                j: 0,
                measurement: odom_delta,
                information,
            });
            self.keyframes.push(Keyframe {
                id,
                estimate: odom_delta,
                scan,
            });
        } else {
            let estimate = self.keyframes[id - 1].estimate.compose(&odom_delta);
            self.factors.push(Factor {
                kind: FactorKind::Odometry,
                i: id - 1,
                j: id,
                measurement: odom_delta,
                information,
            });
            self.keyframes.push(Keyframe {
                id,
                estimate,
                scan,
            });
        }
        // the new pose sits exactly at the factor's prediction (zero
        // residual), so a previously optimal graph remains optimal
        Ok(id)
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<()> {
        check_pd(&factor.information)?;
        let n = self.keyframes.len();
        if factor.i >= n || factor.j >= n {
            return Err(Error::Validation(format!(
                "factor references missing keyframe ({}, {})",
                factor.i, factor.j
            )));
        }
        if factor.kind == FactorKind::Prior && !self.factors.is_empty() {
            return Err(Error::Validation("graph already has a prior".into()));
        }
        self.factors.push(factor);
        self.dirty = true;
        Ok(())
    }

    fn has_prior(&self) -> bool {
        self.factors.iter().any(|f| f.kind == FactorKind::Prior)
    }

    fn residual(factor: &Factor, poses: &[SE2Pose]) -> Vector3<f64> {
        let z = factor.measurement;
        let pred = match factor.kind {
            FactorKind::Prior => poses[factor.i],
            _ => poses[factor.i].between(&poses[factor.j]),
        };
        Vector3::new(
            pred.x - z.x,
            pred.y - z.y,
            angle_diff(pred.theta, z.theta),
        )
    }

    fn cost_of(&self, poses: &[SE2Pose]) -> f64 {
        self.factors
            .iter()
            .map(|f| {
                let e = Self::residual(f, poses);
                (e.transpose() * f.information * e)[(0, 0)]
            })
            .sum()
    }

    pub fn cost(&self) -> f64 {
        let poses: Vec<SE2Pose> = self.keyframes.iter().map(|k| k.estimate).collect();
        self.cost_of(&poses)
    }

    /// Jacobians of the between-residual with respect to x_i and x_j.
    pub(crate) fn between_jacobians(xi: &SE2Pose, xj: &SE2Pose) -> (Matrix3<f64>, Matrix3<f64>) {
        let (s, c) = xi.theta.sin_cos();
        let dx = xj.x - xi.x;
        let dy = xj.y - xi.y;
        // d(R' * dt)/dtheta_i = R'(theta)' evaluated against dt
        let j_i = Matrix3::new(
            -c, -s, -s * dx + c * dy,
            s, -c, -c * dx - s * dy,
            0.0, 0.0, -1.0,
        );
        let j_j = Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
        (j_i, j_j)
    }

    /// Gauss-Newton system at the given linearization point.
    fn build_system(&self, poses: &[SE2Pose]) -> (DMatrix<f64>, DVector<f64>) {
        let n = poses.len();
        let mut h = DMatrix::zeros(3 * n, 3 * n);
        let mut g = DVector::zeros(3 * n);
        let add_block = |h: &mut DMatrix<f64>, a: usize, b: usize, m: &Matrix3<f64>| {
            for r in 0..3 {
                for c in 0..3 {
                    h[(3 * a + r, 3 * b + c)] += m[(r, c)];
                }
            }
        };
        for f in &self.factors {
            let e = Self::residual(f, poses);
            match f.kind {
                FactorKind::Prior => {
                    // jacobian is identity
                    add_block(&mut h, f.i, f.i, &f.information);
                    let gi = f.information * e;
                    for r in 0..3 {
                        g[3 * f.i + r] += gi[r];
                    }
                }
                _ => {
                    let (ji, jj) = Self::between_jacobians(&poses[f.i], &poses[f.j]);
                    let wi = ji.transpose() * f.information;
                    let wj = jj.transpose() * f.information;
                    add_block(&mut h, f.i, f.i, &(wi * ji));
                    add_block(&mut h, f.i, f.j, &(wi * jj));
                    add_block(&mut h, f.j, f.i, &(wj * ji));
                    add_block(&mut h, f.j, f.j, &(wj * jj));
                    let gi = wi * e;
                    let gj = wj * e;
                    for r in 0..3 {
                        g[3 * f.i + r] += gi[r];
                        g[3 * f.j + r] += gj[r];
                    }
                }
            }
        }
        (h, g)
    }

    /// The Gauss-Newton information matrix at the current estimates.
    pub fn information_matrix(&self) -> DMatrix<f64> {
        let poses: Vec<SE2Pose> = self.keyframes.iter().map(|k| k.estimate).collect();
        self.build_system(&poses).0
    }

    /// Batch Levenberg-Marquardt over all poses; monotone acceptance.
    pub fn optimize(&mut self) -> Result<OptReport> {
        if !self.has_prior() {
            return Err(Error::Validation("graph has no prior factor".into()));
        }
        let mut poses: Vec<SE2Pose> = self.keyframes.iter().map(|k| k.estimate).collect();
        let initial_cost = self.cost_of(&poses);
        let mut cost = initial_cost;
        let mut lambda = 1e-6;
        let mut iterations = 0;

        'outer: while iterations < 100 {
            iterations += 1;
            let (h, g) = self.build_system(&poses);
            let mut accepted = false;
            while lambda < 1e12 {
                let mut damped = h.clone();
                for i in 0..damped.nrows() {
                    damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
                }
                if let Some(chol) = damped.cholesky() {
                    let delta = chol.solve(&(-&g));
                    let mut trial = poses.clone();
                    for (k, p) in trial.iter_mut().enumerate() {
                        *p = SE2Pose::new(
                            p.x + delta[3 * k],
                            p.y + delta[3 * k + 1],
                            p.theta + delta[3 * k + 2],
                        );
                    }
                    let trial_cost = self.cost_of(&trial);
                    if trial_cost <= cost {
                        let rel_change = if cost > 0.0 {
                            (cost - trial_cost) / cost
                        } else {
                            0.0
                        };
                        let step = delta.norm();
                        poses = trial;
                        cost = trial_cost;
                        lambda = (lambda / 3.0).max(1e-9);
                        accepted = true;
                        if rel_change < 1e-9 || step < 1e-9 {
                            break 'outer;
                        }
                        break;
                    }
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
        }

        for (k, p) in poses.iter().enumerate() {
            self.keyframes[k].estimate = *p;
        }
        self.dirty = false;
        Ok(OptReport {
            initial_cost,
            final_cost: cost,
            iterations,
        })
    }

    /// 3x3 block of the inverse information matrix for one keyframe.
    pub fn marginal_covariance(&self, id: usize) -> Result<Gaussian3> {
        if self.dirty {
            return Err(Error::StaleGraph);
        }
        let h = self.information_matrix();
        let chol = h.cholesky().ok_or(Error::NotPd)?;
        let n = self.keyframes.len();
        let mut rhs = DMatrix::zeros(3 * n, 3);
        for r in 0..3 {
            rhs[(3 * id + r, r)] = 1.0;
        }
        let sol = chol.solve(&rhs);
        let mut cov = Matrix3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                cov[(r, c)] = sol[(3 * id + r, c)];
            }
        }
        Gaussian3::new(self.keyframes[id].estimate, symmetrize3(&cov))
    }

    /// Marginal covariance blocks for every keyframe, from one factorization.
    pub fn all_marginals(&self) -> Result<Vec<Matrix3<f64>>> {
        if self.dirty {
            return Err(Error::StaleGraph);
        }
        let h = self.information_matrix();
        let n = self.keyframes.len();
        let chol = h.cholesky().ok_or(Error::NotPd)?;
        let inv = chol.solve(&DMatrix::identity(3 * n, 3 * n));
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let mut cov = Matrix3::zeros();
            for r in 0..3 {
                for c in 0..3 {
                    cov[(r, c)] = inv[(3 * k + r, 3 * k + c)];
                }
            }
            out.push(symmetrize3(&cov));
        }
        Ok(out)
    }

    /// Propose loop-closure factors for a freshly added keyframe by ICP
    /// against nearby non-adjacent keyframes, with overlap/residual gates
    /// and a same-step pairwise consistency check.
    pub fn propose_loop_closures(&self, new_id: usize, cfg: &LoopClosureConfig) -> Vec<Factor> {
        let new_kf = &self.keyframes[new_id];
        if new_kf.scan.len() < 3 {
            return Vec::new();
        }
        let new_est = new_kf.estimate;
        let mut candidates: Vec<(usize, f64)> = self
            .keyframes
            .iter()
            .filter(|k| k.id + 1 < new_id && k.scan.len() >= 3)
            .map(|k| {
                (
                    k.id,
                    (k.estimate.translation() - new_est.translation()).norm(),
                )
            })
            .filter(|&(_, d)| d <= cfg.search_radius)
            .collect();
        candidates.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        candidates.truncate(cfg.max_candidates);

        // consensus-style restart set: the dead-reckoning init plus four
        // fixed perturbations; keep the best-overlap result
        const PERTURBATIONS: [(f64, f64, f64); 5] = [
            (0.0, 0.0, 0.0),
            (0.5, 0.0, 0.1),
            (-0.5, 0.0, -0.1),
            (0.0, 0.5, -0.1),
            (0.0, -0.5, 0.1),
        ];

        let mut accepted: Vec<Factor> = Vec::new();
        for (old_id, _) in candidates {
            let old_kf = &self.keyframes[old_id];
            let init = old_kf.estimate.between(&new_est);
            let mut best: Option<IcpResult> = None;
            for (px, py, pt) in PERTURBATIONS {
                let seed = SE2Pose::new(init.x + px, init.y + py, init.theta + pt);
                let r = icp_align(&new_kf.scan, &old_kf.scan, &seed, &cfg.icp);
                let better = match &best {
                    None => true,
                    Some(b) => {
                        r.overlap_fraction > b.overlap_fraction
                            || (r.overlap_fraction == b.overlap_fraction
                                && r.rms_residual < b.rms_residual)
                    }
                };
                if better {
                    best = Some(r);
                }
            }
            let r = best.unwrap();
            if r.degenerate
                || r.overlap_fraction < cfg.overlap_gate
                || r.rms_residual > cfg.rms_gate
            {
                continue;
            }
            accepted.push(Factor {
                kind: FactorKind::LoopClosure,
                i: old_id,
                j: new_id,
                measurement: r.transform,
                information: cfg.information,
            });
        }

        if accepted.len() >= 2 {
            // reject the minority set under mutual disagreement of the
            // implied new-keyframe positions
            let implied: Vec<Vector2<f64>> = accepted
                .iter()
                .map(|f| {
                    self.keyframes[f.i]
                        .estimate
                        .compose(&f.measurement)
                        .translation()
                })
                .collect();
            let thresh = cfg.consistency_threshold;
            let n = accepted.len();
            let mut agreement = vec![0usize; n];
            for a in 0..n {
                for b in 0..n {
                    if (implied[a] - implied[b]).norm() <= thresh {
                        agreement[a] += 1;
                    }
                }
            }
            let leader = (0..n).max_by_key(|&a| (agreement[a], n - a)).unwrap();
            let keep: Vec<bool> = (0..n)
                .map(|a| (implied[a] - implied[leader]).norm() <= thresh)
                .collect();
            accepted = accepted
                .into_iter()
                .zip(keep)
                .filter_map(|(f, k)| k.then_some(f))
                .collect();
        }
        accepted
    }

    /// Newline-delimited hand-off format: VERTEX / EDGE / SCAN records.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for k in &self.keyframes {
            out.push_str(&format!(
                "VERTEX {} {} {} {}\n",
                k.id, k.estimate.x, k.estimate.y, k.estimate.theta
            ));
        }
        for f in &self.factors {
            let m = f.measurement;
            let w = f.information;
            out.push_str(&format!(
                "EDGE {} {} {} {} {} {} {} {} {} {} {} {}\n",
                f.kind.as_str(),
                f.i,
                f.j,
                m.x,
                m.y,
                m.theta,
                w[(0, 0)],
                w[(0, 1)],
                w[(0, 2)],
                w[(1, 1)],
                w[(1, 2)],
                w[(2, 2)],
            ));
        }
        for k in &self.keyframes {
            out.push_str(&format!("SCAN {} {}", k.id, k.scan.len()));
            for p in &k.scan {
                out.push_str(&format!(" {} {}", p.x, p.y));
            }
            out.push('\n');
        }
        out
    }

    pub fn deserialize(text: &str) -> Result<PoseGraph> {
        let mut graph = PoseGraph::new();
        let parse_f64 = |tok: &str, line: usize| -> Result<f64> {
            tok.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("bad number '{tok}'"),
            })
        };
        let parse_usize = |tok: &str, line: usize| -> Result<usize> {
            tok.parse::<usize>().map_err(|_| Error::Parse {
                line,
                msg: format!("bad id '{tok}'"),
            })
        };
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks[0] {
                "VERTEX" => {
                    if toks.len() != 5 {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: "VERTEX needs id x y theta".into(),
                        });
                    }
                    let id = parse_usize(toks[1], line_no)?;
                    if id != graph.keyframes.len() {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: format!("out-of-order vertex id {id}"),
                        });
                    }
                    graph.keyframes.push(Keyframe {
                        id,
                        estimate: SE2Pose::new(
                            parse_f64(toks[2], line_no)?,
                            parse_f64(toks[3], line_no)?,
                            parse_f64(toks[4], line_no)?,
                        ),
                        scan: Vec::new(),
                    });
                }
                "EDGE" => {
                    if toks.len() != 13 {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: "EDGE needs kind id1 id2 dx dy dtheta + 6 info entries".into(),
                        });
                    }
                    let kind = match toks[1] {
                        "prior" => FactorKind::Prior,
                        "odom" => FactorKind::Odometry,
                        "loop" => FactorKind::LoopClosure,
                        other => {
                            return Err(Error::Parse {
                                line: line_no,
                                msg: format!("unknown edge kind '{other}'"),
                            })
                        }
                    };
                    let i = parse_usize(toks[2], line_no)?;
                    let j = parse_usize(toks[3], line_no)?;
                    let v: Vec<f64> = toks[4..13]
                        .iter()
                        .map(|t| parse_f64(t, line_no))
                        .collect::<Result<_>>()?;
                    let information = Matrix3::new(
                        v[3], v[4], v[5], v[4], v[6], v[7], v[5], v[7], v[8],
                    );
                    graph.factors.push(Factor {
                        kind,
                        i,
                        j,
                        measurement: SE2Pose::new(v[0], v[1], v[2]),
                        information,
                    });
                }
                "SCAN" => {
                    if toks.len() < 3 {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: "SCAN needs id n".into(),
                        });
                    }
                    let id = parse_usize(toks[1], line_no)?;
                    let n = parse_usize(toks[2], line_no)?;
                    if toks.len() != 3 + 2 * n {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: format!("SCAN {id} expects {n} points"),
                        });
                    }
                    if id >= graph.keyframes.len() {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: format!("SCAN references missing vertex {id}"),
                        });
                    }
                    let mut scan = Vec::with_capacity(n);
                    for k in 0..n {
                        scan.push(Vector2::new(
                            parse_f64(toks[3 + 2 * k], line_no)?,
                            parse_f64(toks[4 + 2 * k], line_no)?,
                        ));
                    }
                    graph.keyframes[id].scan = scan;
                }
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("unknown record '{other}'"),
                    })
                }
            }
        }
        // basic structural checks mirroring the graph invariants
        for f in &graph.factors {
            if f.i >= graph.keyframes.len() || f.j >= graph.keyframes.len() {
                return Err(Error::Validation("edge references missing vertex".into()));
            }
        }
        graph.dirty = true;
        Ok(graph)
    }
}

/// Gates and noise model for loop-closure proposals.
#[derive(Debug, Clone, Copy)]
pub struct LoopClosureConfig {
    pub search_radius: f64,
    pub overlap_gate: f64,
    pub rms_gate: f64,
    pub consistency_threshold: f64,
    pub max_candidates: usize,
    pub information: Matrix3<f64>,
    pub icp: IcpParams,
}

impl LoopClosureConfig {
    /// Defaults derived from the sensor noise: overlap >= 0.5,
    /// rms <= 2 sigma_r, closure information diag(1/s_r^2, 1/s_r^2, 1/(2 s_t)^2).
    pub fn from_sensor(sensor: &SensorConfig) -> Self {
        let sr = sensor.sigma_r.max(1e-3);
        let st = sensor.sigma_theta.max(1e-3);
        Self {
            search_radius: sensor.max_range,
            overlap_gate: 0.5,
            rms_gate: (2.0 * sensor.sigma_r).max(1e-6),
            consistency_threshold: 3.0 * sensor.sigma_r.max(0.05),
            max_candidates: 5,
            information: Matrix3::from_diagonal(&Vector3::new(
                1.0 / (sr * sr),
                1.0 / (sr * sr),
                1.0 / (4.0 * st * st),
            )),
            icp: IcpParams::default(),
        }
    }
}
