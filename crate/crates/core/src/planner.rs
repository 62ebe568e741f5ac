//! Receding-horizon planning: an 8-connected roadmap with A*, shortest-
//! distance and place-revisiting candidate actions, a log-determinant
//! utility over virtual-map cells, and pure-pursuit waypoint tracking.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maps::{cells_on_path, OccupancyMap, VirtualMap};
use crate::se2::{normalize_angle, SE2Pose};

/// Integer edge weights keep A* and any reference search bit-identical;
/// 14142/10000 approximates sqrt(2) well inside the optimality margin of
/// the grid sizes used here.
pub const COST_STRAIGHT: u64 = 10_000;
pub const COST_DIAGONAL: u64 = 14_142;

#[derive(Debug, Clone, Copy)]
pub struct PlannerParams {
    /// Distance weight in the utility.
    pub alpha: f64,
    /// Arclength ahead on the shortest path for the SD target.
    pub d_sd: f64,
    /// Maximum number of place-revisiting candidates.
    pub n_pr: usize,
    /// Radius of the candidate circle around each cluster centroid.
    pub r_pr: f64,
    /// Minimum separation between accepted revisiting candidates.
    pub d_pr: f64,
    pub k_clusters: usize,
    /// Coarse virtual-map cell size.
    pub virtual_cell: f64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            alpha: 3.0,
            d_sd: 25.0,
            n_pr: 5,
            r_pr: 15.0,
            d_pr: 5.0,
            k_clusters: 6,
            virtual_cell: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionKind {
    ShortestDistance,
    PlaceRevisiting,
}

#[derive(Debug, Clone)]
pub struct CandidateAction {
    pub kind: ActionKind,
    pub target: SE2Pose,
    /// Waypoints from the current position to the target.
    pub path_to_target: Vec<Vector2<f64>>,
    /// Full waypoint chain current -> target -> goal, used for scoring.
    pub path: Vec<Vector2<f64>>,
    pub length: f64,
}

/// 8-connected lattice over coarse cells; occupied cells and their
/// 1-cell inflation ring are blocked.
#[derive(Debug, Clone)]
pub struct Roadmap {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: SE2Pose,
    blocked: Vec<bool>,
}

impl Roadmap {
    pub fn build(occ: &OccupancyMap, cell_m: f64) -> Self {
        let (occupied, width, height) = occ.coarse_occupied(cell_m);
        let mut blocked = occupied.clone();
        for iy in 0..height as i64 {
            for ix in 0..width as i64 {
                if !occupied[iy as usize * width + ix as usize] {
                    continue;
                }
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let (nx, ny) = (ix + dx, iy + dy);
                        if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                            blocked[ny as usize * width + nx as usize] = true;
                        }
                    }
                }
            }
        }
        Self {
            width,
            height,
            resolution: cell_m,
            origin: occ.origin,
            blocked,
        }
    }

    pub fn from_blocked(
        blocked: Vec<bool>,
        width: usize,
        height: usize,
        resolution: f64,
    ) -> Self {
        assert_eq!(blocked.len(), width * height);
        Self {
            width,
            height,
            resolution,
            origin: SE2Pose::identity(),
            blocked,
        }
    }

    pub fn is_blocked(&self, ix: usize, iy: usize) -> bool {
        self.blocked[iy * self.width + ix]
    }

    pub fn cell_of(&self, p: &Vector2<f64>) -> Option<(usize, usize)> {
        let ix = (p.x - self.origin.x) / self.resolution;
        let iy = (p.y - self.origin.y) / self.resolution;
        if ix < 0.0 || iy < 0.0 {
            return None;
        }
        let (ix, iy) = (ix as usize, iy as usize);
        (ix < self.width && iy < self.height).then_some((ix, iy))
    }

    pub fn cell_center(&self, c: (usize, usize)) -> Vector2<f64> {
        Vector2::new(
            self.origin.x + (c.0 as f64 + 0.5) * self.resolution,
            self.origin.y + (c.1 as f64 + 0.5) * self.resolution,
        )
    }

    /// Unblocked successors with integer edge costs; diagonal moves require
    /// both orthogonal neighbors free so paths cannot cut corners.
    pub fn neighbors(&self, c: (usize, usize)) -> Vec<((usize, usize), u64)> {
        let mut out = Vec::with_capacity(8);
        let (cx, cy) = (c.0 as i64, c.1 as i64);
        let free = |x: i64, y: i64| {
            x >= 0
                && y >= 0
                && (x as usize) < self.width
                && (y as usize) < self.height
                && !self.blocked[y as usize * self.width + x as usize]
        };
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            if free(cx + dx, cy + dy) {
                out.push((((cx + dx) as usize, (cy + dy) as usize), COST_STRAIGHT));
            }
        }
        for (dx, dy) in [(1i64, 1i64), (1, -1), (-1, 1), (-1, -1)] {
            if free(cx + dx, cy + dy) && free(cx + dx, cy) && free(cx, cy + dy) {
                out.push((((cx + dx) as usize, (cy + dy) as usize), COST_DIAGONAL));
            }
        }
        out
    }
}

fn octile(a: (usize, usize), b: (usize, usize)) -> u64 {
    let dx = (a.0 as i64 - b.0 as i64).unsigned_abs();
    let dy = (a.1 as i64 - b.1 as i64).unsigned_abs();
    let (dmin, dmax) = if dx < dy { (dx, dy) } else { (dy, dx) };
    COST_STRAIGHT * (dmax - dmin) + COST_DIAGONAL * dmin
}

/// Metric length of a cell path from its straight/diagonal step counts.
fn path_length(path: &[(usize, usize)], resolution: f64) -> f64 {
    let mut straight = 0u64;
    let mut diagonal = 0u64;
    for w in path.windows(2) {
        let dx = (w[0].0 as i64 - w[1].0 as i64).abs();
        let dy = (w[0].1 as i64 - w[1].1 as i64).abs();
        if dx + dy == 2 {
            diagonal += 1;
        } else {
            straight += 1;
        }
    }
    (straight as f64 + diagonal as f64 * std::f64::consts::SQRT_2) * resolution
}

/// A* over the roadmap; ties broken by smaller heuristic then smaller cell
/// index so results are reproducible.
pub fn astar(
    rm: &Roadmap,
    start: (usize, usize),
    goal: (usize, usize),
) -> Result<(Vec<(usize, usize)>, f64)> {
    let idx = |c: (usize, usize)| c.1 * rm.width + c.0;
    if rm.is_blocked(start.0, start.1) || rm.is_blocked(goal.0, goal.1) {
        return Err(Error::NoPath);
    }
    let n = rm.width * rm.height;
    let mut dist = vec![u64::MAX; n];
    let mut prev = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    dist[idx(start)] = 0;
    heap.push(Reverse((octile(start, goal), octile(start, goal), idx(start))));
    while let Some(Reverse((_, _, ci))) = heap.pop() {
        let c = (ci % rm.width, ci / rm.width);
        if c == goal {
            let mut cells = vec![goal];
            let mut cur = idx(goal);
            while prev[cur] != usize::MAX {
                cur = prev[cur];
                cells.push((cur % rm.width, cur / rm.width));
            }
            cells.reverse();
            let len = path_length(&cells, rm.resolution);
            return Ok((cells, len));
        }
        for (nb, w) in rm.neighbors(c) {
            let nd = dist[ci] + w;
            if nd < dist[idx(nb)] {
                dist[idx(nb)] = nd;
                prev[idx(nb)] = ci;
                let h = octile(nb, goal);
                heap.push(Reverse((nd + h, h, idx(nb))));
            }
        }
    }
    Err(Error::NoPath)
}

/// A* total cost in integer units (for exactness checks against a
/// reference search sharing `Roadmap::neighbors`).
pub fn astar_cost(rm: &Roadmap, start: (usize, usize), goal: (usize, usize)) -> Option<u64> {
    let (cells, _) = astar(rm, start, goal).ok()?;
    let mut cost = 0;
    for w in cells.windows(2) {
        let dx = (w[0].0 as i64 - w[1].0 as i64).abs();
        let dy = (w[0].1 as i64 - w[1].1 as i64).abs();
        cost += if dx + dy == 2 { COST_DIAGONAL } else { COST_STRAIGHT };
    }
    Some(cost)
}

fn polyline_length(path: &[Vector2<f64>]) -> f64 {
    path.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Cell path as metric waypoints, with exact endpoints substituted.
fn waypoints(
    rm: &Roadmap,
    cells: &[(usize, usize)],
    from: &Vector2<f64>,
    to: &Vector2<f64>,
) -> Vec<Vector2<f64>> {
    let mut pts: Vec<Vector2<f64>> = cells.iter().map(|&c| rm.cell_center(c)).collect();
    if let Some(first) = pts.first_mut() {
        *first = *from;
    }
    match pts.len() {
        0 => {}
        // start and goal share a cell: still emit a segment to the goal
        1 => pts.push(*to),
        _ => *pts.last_mut().unwrap() = *to,
    }
    pts
}

/// Interpolated point and tangent heading at arclength `s` along a polyline.
fn point_at_arclength(path: &[Vector2<f64>], s: f64) -> (Vector2<f64>, f64) {
    let mut remaining = s;
    for w in path.windows(2) {
        let seg = w[1] - w[0];
        let len = seg.norm();
        if remaining <= len && len > 0.0 {
            let p = w[0] + seg * (remaining / len);
            return (p, seg.y.atan2(seg.x));
        }
        remaining -= len;
    }
    let last = *path.last().unwrap();
    let heading = if path.len() >= 2 {
        let seg = last - path[path.len() - 2];
        seg.y.atan2(seg.x)
    } else {
        0.0
    };
    (last, heading)
}

/// Shortest-distance action: the point `d_sd` along the current shortest
/// path to goal (or the goal itself if nearer).
pub fn sd_action(
    rm: &Roadmap,
    current: &SE2Pose,
    goal: &Vector2<f64>,
    params: &PlannerParams,
) -> Result<CandidateAction> {
    let sc = rm
        .cell_of(&current.translation())
        .ok_or(Error::OutOfBounds(current.x, current.y))?;
    let gc = rm.cell_of(goal).ok_or(Error::OutOfBounds(goal.x, goal.y))?;
    let (cells, _) = astar(rm, sc, gc)?;
    let path = waypoints(rm, &cells, &current.translation(), goal);
    let total = polyline_length(&path);
    let (target_pt, heading) = point_at_arclength(&path, params.d_sd.min(total));
    // split the path at the target arclength
    let mut path_to_target = Vec::new();
    let mut s = 0.0;
    let cut = params.d_sd.min(total);
    path_to_target.push(path[0]);
    for w in path.windows(2) {
        let len = (w[1] - w[0]).norm();
        if s + len < cut - 1e-12 {
            path_to_target.push(w[1]);
            s += len;
        } else {
            break;
        }
    }
    if (path_to_target.last().unwrap() - target_pt).norm() > 1e-12 {
        path_to_target.push(target_pt);
    }
    Ok(CandidateAction {
        kind: ActionKind::ShortestDistance,
        target: SE2Pose::new(target_pt.x, target_pt.y, heading),
        path_to_target,
        path,
        length: total,
    })
}

/// Seeded k-means with restarts; centroids returned sorted by (x, y) so
/// the output depends only on the seed and the data.
pub fn kmeans(points: &[Vector2<f64>], k: usize, seed: u64) -> Vec<Vector2<f64>> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let k = k.min(points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<Vector2<f64>>)> = None;
    for _ in 0..20 {
        // initial centroids: k distinct sample indices
        let mut picks: Vec<usize> = Vec::new();
        while picks.len() < k {
            let i = rng.gen_range(0..points.len());
            if !picks.contains(&i) {
                picks.push(i);
            }
        }
        let mut centroids: Vec<Vector2<f64>> = picks.iter().map(|&i| points[i]).collect();
        let mut assign = vec![usize::MAX; points.len()];
        for _ in 0..100 {
            let mut changed = false;
            for (pi, p) in points.iter().enumerate() {
                let ci = centroids
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        (p - *a)
                            .norm_squared()
                            .partial_cmp(&(p - *b).norm_squared())
                            .unwrap()
                    })
                    .unwrap()
                    .0;
                if assign[pi] != ci {
                    assign[pi] = ci;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            for (ci, centroid) in centroids.iter_mut().enumerate() {
                let members: Vec<&Vector2<f64>> = points
                    .iter()
                    .zip(&assign)
                    .filter(|(_, &a)| a == ci)
                    .map(|(p, _)| p)
                    .collect();
                if !members.is_empty() {
                    *centroid = members.iter().fold(Vector2::zeros(), |acc, p| acc + **p)
                        / members.len() as f64;
                }
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&assign)
            .map(|(p, &a)| (p - centroids[a]).norm_squared())
            .sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, centroids));
        }
    }
    let mut out = best.unwrap().1;
    out.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());
    out
}

/// Place-revisiting candidates: cluster the occupied coarse cells, sample
/// poses on each centroid's circle of radius `r_pr` facing the centroid,
/// then greedily accept the pool member nearest the shortest-distance path
/// subject to a `d_pr` separation from everything already accepted.
#[allow(clippy::too_many_arguments)]
pub fn pr_actions(
    rm: &Roadmap,
    occupied_centers: &[Vector2<f64>],
    sd_path: &[Vector2<f64>],
    current: &SE2Pose,
    goal: &Vector2<f64>,
    params: &PlannerParams,
    seed: u64,
) -> Vec<CandidateAction> {
    if occupied_centers.is_empty() {
        return Vec::new();
    }
    let centroids = kmeans(occupied_centers, params.k_clusters, seed);
    let mut pool: Vec<SE2Pose> = Vec::new();
    for c in &centroids {
        for step in 0..36 {
            let phi = (step as f64) * 10.0f64.to_radians();
            let pos = c + params.r_pr * Vector2::new(phi.cos(), phi.sin());
            // heading faces the centroid
            let heading = normalize_angle(phi + std::f64::consts::PI);
            match rm.cell_of(&pos) {
                Some(cell) if !rm.is_blocked(cell.0, cell.1) => {
                    pool.push(SE2Pose::new(pos.x, pos.y, heading));
                }
                _ => {}
            }
        }
    }
    let dist2_to_path = |p: &SE2Pose| {
        sd_path
            .iter()
            .map(|w| (w - p.translation()).norm_squared())
            .fold(f64::INFINITY, f64::min)
    };
    let start_cell = match rm.cell_of(&current.translation()) {
        Some(c) => c,
        None => return Vec::new(),
    };
    let goal_cell = match rm.cell_of(goal) {
        Some(c) => c,
        None => return Vec::new(),
    };

    let mut accepted: Vec<CandidateAction> = Vec::new();
    while accepted.len() < params.n_pr && !pool.is_empty() {
        let pick = pool
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| dist2_to_path(a).partial_cmp(&dist2_to_path(b)).unwrap())
            .unwrap()
            .0;
        let cand = pool.swap_remove(pick);
        let separated = accepted.iter().all(|a| {
            (a.target.translation() - cand.translation()).norm() >= params.d_pr
        });
        if !separated {
            continue;
        }
        let target_cell = match rm.cell_of(&cand.translation()) {
            Some(c) => c,
            None => continue,
        };
        let Ok((to_cells, _)) = astar(rm, start_cell, target_cell) else {
            continue;
        };
        let Ok((back_cells, _)) = astar(rm, target_cell, goal_cell) else {
            continue;
        };
        let path_to_target =
            waypoints(rm, &to_cells, &current.translation(), &cand.translation());
        let mut path = path_to_target.clone();
        let continuation = waypoints(rm, &back_cells, &cand.translation(), goal);
        path.extend(continuation.into_iter().skip(1));
        let length = polyline_length(&path);
        accepted.push(CandidateAction {
            kind: ActionKind::PlaceRevisiting,
            target: cand,
            path_to_target,
            path,
            length,
        });
    }
    accepted
}

/// Eq.-style utility: negative summed log-determinant over the (dedup)
/// virtual-map cells the path crosses, minus alpha times path length.
pub fn utility(vm: &VirtualMap, path: &[Vector2<f64>], params: &PlannerParams) -> Result<f64> {
    let cells = cells_on_path(vm, path)?;
    let info: f64 = cells.iter().map(|&c| vm.log_det(c)).sum();
    Ok(-info - params.alpha * polyline_length(path))
}

/// Argmax over candidates under any scoring function. Ties prefer the
/// shortest-distance action, then the lower target x, then y.
pub fn select_by<F>(candidates: &[CandidateAction], mut score: F) -> Result<CandidateAction>
where
    F: FnMut(&CandidateAction) -> Result<f64>,
{
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut best: Option<(f64, &CandidateAction)> = None;
    for c in candidates {
        let u = score(c)?;
        let better = match &best {
            None => true,
            Some((bu, bc)) => {
                if u != *bu {
                    u > *bu
                } else {
                    let rank = |a: &CandidateAction| {
                        (
                            a.kind != ActionKind::ShortestDistance,
                            a.target.x,
                            a.target.y,
                        )
                    };
                    rank(c) < rank(bc)
                }
            }
        };
        if better {
            best = Some((u, c));
        }
    }
    Ok(best.unwrap().1.clone())
}

/// Argmax of the virtual-map utility over the full candidate paths.
pub fn select_action(
    candidates: &[CandidateAction],
    vm: &VirtualMap,
    params: &PlannerParams,
) -> Result<CandidateAction> {
    select_by(candidates, |c| utility(vm, &c.path, params))
}

pub const LOOKAHEAD: f64 = 2.0;
pub const CRUISE_SPEED: f64 = 1.0;
pub const ARRIVAL_RADIUS: f64 = 0.5;
pub const MAX_TURN_RATE: f64 = 1.0;

/// Pure-pursuit tracking: steer toward the point one lookahead ahead of
/// the closest point on the path; turn in place when it is behind.
pub fn track(current: &SE2Pose, path: &[Vector2<f64>]) -> Vector3<f64> {
    assert!(!path.is_empty());
    let final_wp = *path.last().unwrap();
    if (final_wp - current.translation()).norm() < ARRIVAL_RADIUS {
        return Vector3::zeros();
    }
    // arclength of the closest point on the polyline
    let pos = current.translation();
    let mut best = (f64::INFINITY, 0.0);
    let mut acc = 0.0;
    if path.len() == 1 {
        best = ((path[0] - pos).norm(), 0.0);
    }
    for w in path.windows(2) {
        let seg = w[1] - w[0];
        let len = seg.norm();
        let t = if len > 0.0 {
            ((pos - w[0]).dot(&seg) / (len * len)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let proj = w[0] + seg * t;
        let d = (proj - pos).norm();
        if d < best.0 {
            best = (d, acc + t * len);
        }
        acc += len;
    }
    let (lookahead_pt, _) = point_at_arclength(path, best.1 + LOOKAHEAD);
    let to = lookahead_pt - pos;
    let err = normalize_angle(to.y.atan2(to.x) - current.theta);
    if err.abs() > std::f64::consts::FRAC_PI_2 {
        return Vector3::new(0.0, 0.0, MAX_TURN_RATE.copysign(err));
    }
    Vector3::new(
        CRUISE_SPEED,
        0.0,
        (2.0 * err).clamp(-MAX_TURN_RATE, MAX_TURN_RATE),
    )
}
