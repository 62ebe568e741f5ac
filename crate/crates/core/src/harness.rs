//! Mission execution and experiment plumbing: a scripted exploration pass
//! that produces the prior SLAM graph, the receding-horizon mission loop,
//! Monte Carlo trial batches, metrics, and the CSV surface.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::em;
use crate::error::{Error, Result};
use crate::maps::{self, OccupancyMap, VirtualMap};
use crate::planner::{
    self, CandidateAction, PlannerParams, Roadmap, ARRIVAL_RADIUS,
};
use crate::scenario::Scenario;
use crate::se2::{Gaussian3, SE2Pose};
use crate::slam::{LoopClosureConfig, PoseGraph};
use crate::world::{self, World, TICK_DT};

/// Virtual-map prior standard deviation in meters.
pub const PRIOR_SIGMA: f64 = 10.0;
/// New keyframe every meter of travel...
pub const KEYFRAME_DISTANCE: f64 = 1.0;
/// ...or 30 degrees of heading change.
pub const KEYFRAME_ROTATION: f64 = std::f64::consts::PI / 6.0;
/// Hard cap on mission ticks.
pub const STEP_CAP: usize = 10_000;
/// The survey vessel is better instrumented than the mission vehicle;
/// its odometry noise is scaled down by this factor. The prior map must
/// be more accurate than mission dead reckoning for revisiting it to pay.
pub const SURVEY_NOISE_SCALE: f64 = 0.1;

// per-stream RNG derivation: planner draws must never perturb the motion
// or sensor streams
const STREAM_MOTION: u64 = 0x4d4f54;
const STREAM_SENSOR: u64 = 0x53454e;
const STREAM_PLANNER: u64 = 0x504c41;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannerKind {
    ShortestDistance,
    VirtualMap,
    Em,
}

impl PlannerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlannerKind::ShortestDistance => "sd",
            PlannerKind::VirtualMap => "vm",
            PlannerKind::Em => "em",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sd" => Ok(PlannerKind::ShortestDistance),
            "vm" => Ok(PlannerKind::VirtualMap),
            "em" => Ok(PlannerKind::Em),
            other => Err(Error::Validation(format!("unknown planner '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialRow {
    pub t: f64,
    pub distance: f64,
    pub truth: SE2Pose,
    pub estimate: SE2Pose,
    /// det(cov)^(1/3) of the current pose belief.
    pub pose_uncertainty: f64,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub rows: Vec<TrialRow>,
    /// One entry per action selection, in seconds (wall clock around the
    /// utility evaluations only).
    pub eval_times: Vec<f64>,
    pub reached_goal: bool,
    pub aborted: Option<String>,
    pub final_error: f64,
    pub final_uncertainty: f64,
}

pub fn uncertainty_metric(cov: &Matrix3<f64>) -> f64 {
    cov.determinant().max(0.0).cbrt()
}

/// One simulated vehicle: ground truth, dead-reckoned belief, SLAM graph,
/// and the online occupancy map.
struct Sim<'a> {
    world: &'a World,
    sc: &'a Scenario,
    lc: LoopClosureConfig,
    truth: SE2Pose,
    graph: PoseGraph,
    occ: OccupancyMap,
    /// Belief at the last keyframe.
    belief: Gaussian3,
    /// Measured odometry accumulated since the last keyframe.
    accum: Gaussian3,
    since_kf: f64,
    t: f64,
    distance: f64,
    motion_rng: ChaCha8Rng,
    sensor_rng: ChaCha8Rng,
}

fn q_tick(sc: &Scenario) -> Matrix3<f64> {
    let sxy = (sc.odom.sigma_xy * TICK_DT).powi(2);
    let sth = (sc.odom.sigma_theta * TICK_DT).powi(2);
    Matrix3::from_diagonal(&Vector3::new(sxy, sxy, sth))
}

impl<'a> Sim<'a> {
    fn new(sc: &'a Scenario, graph: PoseGraph, occ: OccupancyMap, seed: u64) -> Result<Self> {
        let mut graph = graph;
        if graph.is_dirty() {
            graph.optimize()?;
        }
        let last = graph.len() - 1;
        let start = graph.estimate(last);
        let belief = graph.marginal_covariance(last)?;
        Ok(Self {
            world: &sc.world,
            sc,
            lc: LoopClosureConfig::from_sensor(&sc.sensor),
            truth: start,
            graph,
            occ,
            belief,
            accum: Gaussian3::new(SE2Pose::identity(), Matrix3::zeros())?,
            since_kf: 0.0,
            t: 0.0,
            distance: 0.0,
            motion_rng: ChaCha8Rng::seed_from_u64(seed ^ STREAM_MOTION),
            sensor_rng: ChaCha8Rng::seed_from_u64(seed ^ STREAM_SENSOR),
        })
    }

    /// Fresh simulator whose graph starts with a single prior keyframe at
    /// the scenario start (exploration mode).
    fn fresh(sc: &'a Scenario, seed: u64) -> Result<Self> {
        let mut graph = PoseGraph::new();
        let mut sensor_rng = ChaCha8Rng::seed_from_u64(seed ^ STREAM_SENSOR);
        let scan = world::sense(&sc.start, &sc.world, &sc.sensor, &mut sensor_rng);
        graph.add_keyframe(
            sc.start,
            Matrix3::identity() * 1e6,
            scan.iter().map(|d| d.cartesian).collect(),
        )?;
        let mut occ = OccupancyMap::new(
            sc.world.width,
            sc.world.height,
            sc.world.resolution,
            SE2Pose::identity(),
        );
        occ.update(&sc.start, &scan);
        Ok(Self {
            world: &sc.world,
            sc,
            lc: LoopClosureConfig::from_sensor(&sc.sensor),
            truth: sc.start,
            belief: graph.marginal_covariance(0)?,
            graph,
            occ,
            accum: Gaussian3::new(SE2Pose::identity(), Matrix3::zeros())?,
            since_kf: 0.0,
            t: 0.0,
            distance: 0.0,
            motion_rng: ChaCha8Rng::seed_from_u64(seed ^ STREAM_MOTION),
            sensor_rng,
        })
    }

    fn estimate(&self) -> SE2Pose {
        self.belief.mean.compose(&self.accum.mean)
    }

    /// Current pose belief: last keyframe marginal pushed through the
    /// accumulated odometry.
    fn current_belief(&self) -> Gaussian3 {
        crate::se2::propagate_cov(&self.belief, &self.accum.mean, &self.accum.cov)
            .unwrap_or(self.belief)
    }

    /// Advance one tick; returns true when a keyframe was inserted.
    fn tick(&mut self, cmd: &Vector3<f64>) -> Result<bool> {
        let (truth, meas) = world::step_motion(
            &self.truth,
            cmd,
            TICK_DT,
            &self.sc.odom,
            &mut self.motion_rng,
        );
        let step = (truth.translation() - self.truth.translation()).norm();
        self.distance += step;
        self.since_kf += step;
        self.t += TICK_DT;
        self.truth = truth;
        self.accum = crate::se2::propagate_cov(&self.accum, &meas, &q_tick(self.sc))?;

        if self.since_kf < KEYFRAME_DISTANCE && self.accum.mean.theta.abs() < KEYFRAME_ROTATION {
            return Ok(false);
        }
        // keyframe: sense, extend the graph, look for closures
        let scan = world::sense(&self.truth, self.world, &self.sc.sensor, &mut self.sensor_rng);
        let info = (self.accum.cov + Matrix3::identity() * 1e-8)
            .try_inverse()
            .ok_or(Error::NotPd)?;
        let id = self.graph.add_keyframe(
            self.accum.mean,
            crate::se2::symmetrize3(&info),
            scan.iter().map(|d| d.cartesian).collect(),
        )?;
        let closures = self.graph.propose_loop_closures(id, &self.lc);
        if closures.is_empty() {
            // dead-reckoned extension is already the optimum
            self.occ.update(&self.graph.estimate(id), &scan);
            self.belief = Gaussian3::new(
                self.graph.estimate(id),
                self.current_belief().cov,
            )?;
        } else {
            for f in closures {
                self.graph.add_factor(f)?;
            }
            self.graph.optimize()?;
            self.occ = maps::rebuild_occupancy(&self.graph, &self.occ);
            self.belief = self.graph.marginal_covariance(id)?;
        }
        self.accum = Gaussian3::new(SE2Pose::identity(), Matrix3::zeros())?;
        self.since_kf = 0.0;
        Ok(true)
    }
}

fn truth_occupancy(world: &World) -> OccupancyMap {
    let mut occ = OccupancyMap::new(world.width, world.height, world.resolution, SE2Pose::identity());
    for (ix, iy) in world.occupied_cells() {
        occ.log_odds[iy * world.width + ix] = 10.0;
    }
    occ
}

fn snap_to_free(rm: &Roadmap, p: &Vector2<f64>) -> Option<(usize, usize)> {
    let (cx, cy) = rm.cell_of(p)?;
    if !rm.is_blocked(cx, cy) {
        return Some((cx, cy));
    }
    for r in 1..=3i64 {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx.abs().max(dy.abs()) != r {
                    continue;
                }
                let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                if nx >= 0
                    && ny >= 0
                    && (nx as usize) < rm.width
                    && (ny as usize) < rm.height
                    && !rm.is_blocked(nx as usize, ny as usize)
                {
                    return Some((nx as usize, ny as usize));
                }
            }
        }
    }
    None
}

/// Scripted coverage route: serpentine passes over the band around the
/// mapped structure, then back to the start. Stands in for a human
/// operator driving the survey.
fn exploration_route(sc: &Scenario) -> Vec<Vector2<f64>> {
    let occ = truth_occupancy(&sc.world);
    let rm = Roadmap::build(&occ, sc.planner.virtual_cell);
    let start = sc.start.translation();

    let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (ix, iy) in sc.world.occupied_cells() {
        let c = sc.world.cell_center(ix, iy);
        lo = lo.inf(&c);
        hi = hi.sup(&c);
    }
    if !lo.x.is_finite() {
        return vec![start];
    }
    // stay within half a sensor range of the structure so every pass
    // yields scans dense enough for closures; the transit corridor below
    // is deliberately left unsurveyed
    let margin = 0.5 * sc.sensor.max_range;
    let extent = Vector2::new(
        sc.world.width as f64 * sc.world.resolution,
        sc.world.height as f64 * sc.world.resolution,
    );
    let xmin = (lo.x - margin).max(1.0);
    let xmax = (hi.x + margin).min(extent.x - 1.0);
    let ymin = (lo.y - margin).max(1.0);
    let ymax = (hi.y + margin).min(extent.y - 1.0);

    let spacing = (0.35 * sc.sensor.max_range).max(sc.planner.virtual_cell);
    let mut vias: Vec<(usize, usize)> = Vec::new();
    let mut y = ymin;
    let mut leftward = false;
    while y <= ymax + 1e-9 {
        let mut xs: Vec<f64> = Vec::new();
        let mut x = xmin;
        while x <= xmax + 1e-9 {
            xs.push(x);
            x += spacing;
        }
        if leftward {
            xs.reverse();
        }
        for x in xs {
            if let Some(cell) = snap_to_free(&rm, &Vector2::new(x, y)) {
                if vias.last() != Some(&cell) {
                    vias.push(cell);
                }
            }
        }
        leftward = !leftward;
        y += spacing;
    }

    // stitch the vias (and the return to start) together with A*
    let mut route = vec![start];
    let mut cur = match snap_to_free(&rm, &start) {
        Some(c) => c,
        None => return vec![start],
    };
    let mut targets = vias;
    // leave the band directly above the start so the unclosable descent
    // back home is as short as possible
    if let Some(exit) = snap_to_free(&rm, &Vector2::new(start.x, ymin)) {
        targets.push(exit);
    }
    targets.push(cur);
    for via in targets {
        if via == cur {
            continue;
        }
        if let Ok((cells, _)) = planner::astar(&rm, cur, via) {
            for c in cells.into_iter().skip(1) {
                route.push(rm.cell_center(c));
            }
            cur = via;
        }
    }
    route.push(start);
    route
}

/// Drive the scripted coverage route with SLAM running; the resulting
/// graph (ending back at the start) becomes the mission prior.
pub fn explore(sc: &Scenario, seed: u64) -> Result<(PoseGraph, OccupancyMap)> {
    let route = exploration_route(sc);
    let mut survey = sc.clone();
    survey.odom.sigma_xy *= SURVEY_NOISE_SCALE;
    survey.odom.sigma_theta *= SURVEY_NOISE_SCALE;
    let mut sim = Sim::fresh(&survey, seed)?;
    // the route revisits earlier ground (serpentine legs, return to start),
    // so drive it one waypoint at a time rather than by closest point
    let mut ticks = 0usize;
    'route: for wp in route.iter().skip(1) {
        while (sim.truth.translation() - wp).norm() >= 1.0 {
            ticks += 1;
            if ticks > 4 * STEP_CAP {
                break 'route;
            }
            // the surveyor steers from ground truth
            let to = wp - sim.truth.translation();
            let err = crate::se2::normalize_angle(to.y.atan2(to.x) - sim.truth.theta);
            let cmd = if err.abs() > std::f64::consts::FRAC_PI_2 {
                Vector3::new(0.0, 0.0, err.signum() * planner::MAX_TURN_RATE)
            } else {
                Vector3::new(
                    planner::CRUISE_SPEED,
                    0.0,
                    (2.0 * err).clamp(-planner::MAX_TURN_RATE, planner::MAX_TURN_RATE),
                )
            };
            sim.tick(&cmd)?;
        }
    }
    if sim.graph.is_dirty() {
        sim.graph.optimize()?;
    }
    let occ = maps::rebuild_occupancy(&sim.graph, &sim.occ);
    Ok((sim.graph, occ))
}

fn occupied_coarse_centers(occ: &OccupancyMap, rm: &Roadmap) -> Vec<Vector2<f64>> {
    let (cells, w, h) = occ.coarse_occupied(rm.resolution);
    let mut out = Vec::new();
    for iy in 0..h {
        for ix in 0..w {
            if cells[iy * w + ix] {
                out.push(rm.cell_center((ix, iy)));
            }
        }
    }
    out
}

struct Planned {
    action: CandidateAction,
    eval_seconds: f64,
}

#[allow(clippy::too_many_arguments)]
fn plan_action(
    kind: PlannerKind,
    sim: &Sim,
    vm: &VirtualMap,
    goal: &Vector2<f64>,
    params: &PlannerParams,
    planner_rng: &mut ChaCha8Rng,
) -> Result<Planned> {
    let rm = Roadmap::build(&sim.occ, params.virtual_cell);
    let mut current = sim.estimate();
    if let Some(cell) = rm.cell_of(&current.translation()) {
        if rm.is_blocked(cell.0, cell.1) {
            let snapped = snap_to_free(&rm, &current.translation()).ok_or(Error::NoPath)?;
            let c = rm.cell_center(snapped);
            current = SE2Pose::new(c.x, c.y, current.theta);
        }
    } else {
        return Err(Error::OutOfBounds(current.x, current.y));
    }

    let sd = planner::sd_action(&rm, &current, goal, params)?;
    let mut candidates = vec![sd.clone()];
    if kind != PlannerKind::ShortestDistance {
        let seed = rand::Rng::gen::<u64>(planner_rng);
        let occupied = occupied_coarse_centers(&sim.occ, &rm);
        candidates.extend(planner::pr_actions(
            &rm,
            &occupied,
            &candidates[0].path,
            &current,
            goal,
            params,
            seed,
        ));
    }

    let started = Instant::now();
    let action = match kind {
        PlannerKind::Em => {
            let closure_info = sim.lc.information;
            planner::select_by(&candidates, |c| {
                em::em_utility(
                    &sim.graph,
                    vm,
                    &c.path,
                    &sim.occ,
                    &sim.sc.sensor,
                    &sim.sc.odom,
                    &closure_info,
                    params,
                )
            })?
        }
        _ => planner::select_action(&candidates, vm, params)?,
    };
    let eval_seconds = started.elapsed().as_secs_f64();
    // a revisit target at the current pose would trigger an immediate
    // replan loop; make progress along the direct route instead
    let action = if (action.target.translation() - current.translation()).norm() < ARRIVAL_RADIUS {
        sd
    } else {
        action
    };
    Ok(Planned {
        action,
        eval_seconds,
    })
}

fn path_blocked(rm: &Roadmap, path: &[Vector2<f64>]) -> bool {
    path.iter().any(|p| match rm.cell_of(p) {
        Some((ix, iy)) => rm.is_blocked(ix, iy),
        None => true,
    })
}

/// One mission from the prior graph's final pose to the goal, under the
/// given planner. Deterministic in (scenario, prior, kind, seed).
pub fn run_trial(
    sc: &Scenario,
    prior: &PoseGraph,
    kind: PlannerKind,
    goal_index: usize,
    seed: u64,
    params: &PlannerParams,
) -> Result<TrialResult> {
    let goal = *sc
        .goals
        .get(goal_index)
        .ok_or_else(|| Error::Validation(format!("goal index {goal_index} out of range")))?;
    let template = OccupancyMap::new(
        sc.world.width,
        sc.world.height,
        sc.world.resolution,
        SE2Pose::identity(),
    );
    let mut graph = prior.clone();
    if graph.is_dirty() {
        graph.optimize()?;
    }
    let occ = maps::rebuild_occupancy(&graph, &template);
    let marginals = graph.all_marginals()?;
    // the uncertainty costmap is built once, offline
    let vm = maps::build_virtual_map(
        &graph,
        &marginals,
        &occ,
        &sc.sensor,
        params.virtual_cell,
        PRIOR_SIGMA,
    )?;

    let mut sim = Sim::new(sc, graph, occ, seed)?;
    let mut planner_rng = ChaCha8Rng::seed_from_u64(seed ^ STREAM_PLANNER);
    let mut rows = Vec::new();
    let mut eval_times = Vec::new();
    let mut action: Option<CandidateAction> = None;
    let mut reached = false;
    let mut aborted = None;

    let record = |sim: &Sim, rows: &mut Vec<TrialRow>| {
        let belief = sim.current_belief();
        rows.push(TrialRow {
            t: sim.t,
            distance: sim.distance,
            truth: sim.truth,
            estimate: sim.estimate(),
            pose_uncertainty: uncertainty_metric(&belief.cov),
        });
    };
    record(&sim, &mut rows);

    for _ in 0..STEP_CAP {
        let estimate = sim.estimate();
        if (estimate.translation() - goal).norm() < ARRIVAL_RADIUS {
            reached = true;
            break;
        }
        let need_plan = match &action {
            None => true,
            Some(a) => (estimate.translation() - a.target.translation()).norm() < ARRIVAL_RADIUS,
        };
        if need_plan {
            match plan_action(kind, &sim, &vm, &goal, params, &mut planner_rng) {
                Ok(p) => {
                    eval_times.push(p.eval_seconds);
                    action = Some(p.action);
                }
                Err(Error::NoPath) => {
                    aborted = Some("goal unreachable".into());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let cmd = planner::track(&estimate, &action.as_ref().unwrap().path_to_target);
        if cmd == Vector3::zeros() {
            // arrived at the intermediate target without triggering the
            // replan radius; force a fresh selection
            action = None;
            continue;
        }
        let keyframed = sim.tick(&cmd)?;
        if keyframed {
            record(&sim, &mut rows);
            // discard the tracked path if the updated map blocks it
            let rm = Roadmap::build(&sim.occ, params.virtual_cell);
            if let Some(a) = &action {
                if path_blocked(&rm, &a.path_to_target) {
                    action = None;
                }
            }
        }
    }
    if !reached && aborted.is_none() {
        aborted = Some("step cap reached".into());
    }
    record(&sim, &mut rows);

    let last = rows.last().unwrap();
    Ok(TrialResult {
        final_error: (last.truth.translation() - last.estimate.translation()).norm(),
        final_uncertainty: last.pose_uncertainty,
        rows,
        eval_times,
        reached_goal: reached,
        aborted,
    })
}

/// Position RMSE (truth vs estimate) binned by distance traveled.
pub fn rmse_by_distance(trials: &[Vec<TrialRow>], bin: f64) -> Vec<(f64, f64)> {
    assert!(bin > 0.0);
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for rows in trials {
        for r in rows {
            let idx = (r.distance / bin) as usize;
            if sums.len() <= idx {
                sums.resize(idx + 1, (0.0, 0));
            }
            let e2 = (r.truth.translation() - r.estimate.translation()).norm_squared();
            sums[idx].0 += e2;
            sums[idx].1 += 1;
        }
    }
    sums.iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(i, (s, n))| ((i as f64 + 0.5) * bin, (s / *n as f64).sqrt()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct PlannerRun {
    pub kind: PlannerKind,
    pub trials: Vec<(u64, TrialResult)>,
}

#[derive(Debug, Clone)]
pub struct PlannerSummary {
    pub kind: PlannerKind,
    pub trials: usize,
    pub completed: usize,
    pub mean_final_uncertainty: f64,
    pub final_rmse: f64,
    pub eval_mean: f64,
    pub eval_std: f64,
}

/// Seeds base_seed..base_seed+n per planner; trials are independent and
/// may run in parallel without changing any output byte.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment(
    sc: &Scenario,
    prior: &PoseGraph,
    kinds: &[PlannerKind],
    goal_index: usize,
    n_trials: usize,
    base_seed: u64,
    params: &PlannerParams,
    parallel: bool,
) -> Result<Vec<PlannerRun>> {
    if n_trials == 0 {
        return Err(Error::Validation("need at least one trial".into()));
    }
    let mut runs = Vec::new();
    for &kind in kinds {
        let seeds: Vec<u64> = (0..n_trials as u64).map(|i| base_seed + i).collect();
        let trials: Vec<(u64, TrialResult)> = if parallel {
            seeds
                .par_iter()
                .map(|&s| run_trial(sc, prior, kind, goal_index, s, params).map(|t| (s, t)))
                .collect::<Result<_>>()?
        } else {
            seeds
                .iter()
                .map(|&s| run_trial(sc, prior, kind, goal_index, s, params).map(|t| (s, t)))
                .collect::<Result<_>>()?
        };
        runs.push(PlannerRun { kind, trials });
    }
    Ok(runs)
}

pub fn summarize(runs: &[PlannerRun]) -> Vec<PlannerSummary> {
    runs.iter()
        .map(|run| {
            let completed: Vec<&TrialResult> = run
                .trials
                .iter()
                .filter(|(_, t)| t.reached_goal)
                .map(|(_, t)| t)
                .collect();
            let n = completed.len().max(1) as f64;
            let mean_unc = completed.iter().map(|t| t.final_uncertainty).sum::<f64>() / n;
            let rmse = (completed
                .iter()
                .map(|t| t.final_error * t.final_error)
                .sum::<f64>()
                / n)
                .sqrt();
            let times: Vec<f64> = run
                .trials
                .iter()
                .flat_map(|(_, t)| t.eval_times.iter().copied())
                .collect();
            let tn = times.len().max(1) as f64;
            let mean = times.iter().sum::<f64>() / tn;
            let var = times.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / tn;
            PlannerSummary {
                kind: run.kind,
                trials: run.trials.len(),
                completed: completed.len(),
                mean_final_uncertainty: mean_unc,
                final_rmse: rmse,
                eval_mean: mean,
                eval_std: var.sqrt(),
            }
        })
        .collect()
}

/// Trial CSV. Timing is deliberately kept out of this file so the bytes
/// depend only on (scenario, planner, seed); it goes to the timing CSV.
pub fn trial_csv(rows: &[TrialRow]) -> String {
    let mut out =
        String::from("t,distance,truth_x,truth_y,truth_theta,est_x,est_y,est_theta,pose_uncertainty\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.t,
            r.distance,
            r.truth.x,
            r.truth.y,
            r.truth.theta,
            r.estimate.x,
            r.estimate.y,
            r.estimate.theta,
            r.pose_uncertainty
        );
    }
    out
}

pub fn timing_csv(times: &[f64]) -> String {
    let mut out = String::from("selection,eval_seconds\n");
    for (i, t) in times.iter().enumerate() {
        let _ = writeln!(out, "{i},{t}");
    }
    out
}

pub fn summary_csv(summaries: &[PlannerSummary]) -> String {
    let mut out = String::from(
        "planner,trials,completed,mean_final_uncertainty,final_rmse,eval_mean_s,eval_std_s\n",
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.kind.as_str(),
            s.trials,
            s.completed,
            s.mean_final_uncertainty,
            s.final_rmse,
            s.eval_mean,
            s.eval_std
        );
    }
    out
}

pub fn index_csv(runs: &[PlannerRun]) -> String {
    let mut out = String::from("planner,seed,status,final_error,final_uncertainty\n");
    for run in runs {
        for (seed, t) in &run.trials {
            let status = if t.reached_goal {
                "completed"
            } else {
                "aborted"
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                run.kind.as_str(),
                seed,
                status,
                t.final_error,
                t.final_uncertainty
            );
        }
    }
    out
}

/// Write every experiment artifact into `dir`.
pub fn write_experiment(
    dir: &std::path::Path,
    runs: &[PlannerRun],
    vmap_csv: Option<&str>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for run in runs {
        for (seed, t) in &run.trials {
            let stem = format!("{}_{}", run.kind.as_str(), seed);
            std::fs::write(dir.join(format!("trial_{stem}.csv")), trial_csv(&t.rows))?;
            std::fs::write(
                dir.join(format!("timing_{stem}.csv")),
                timing_csv(&t.eval_times),
            )?;
        }
    }
    std::fs::write(dir.join("summary.csv"), summary_csv(&summarize(runs)))?;
    std::fs::write(dir.join("trials_index.csv"), index_csv(runs))?;
    if let Some(vm) = vmap_csv {
        std::fs::write(dir.join("vmap.csv"), vm)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::load_world;
    use approx::assert_relative_eq;

    fn corridor_scenario(sigma_xy: f64, sigma_theta: f64) -> Scenario {
        let text = format!(
            r#"{{
  "resolution_m": 1.0,
  "grid": [
    "................",
    "................",
    "................",
    "................",
    "................",
    "................"
  ],
  "start": [2.5, 2.5, 0.0],
  "goals": [[13.5, 2.5]],
  "sensor": {{"max_range_m": 4.0, "aperture_deg": [-180, 180], "sigma_r_m": 0.1, "sigma_theta_rad": 0.01}},
  "odom": {{"sigma_xy": {sigma_xy}, "sigma_theta": {sigma_theta}}},
  "planner": {{"alpha": 3.0, "d_sd_m": 5.0, "n_pr": 3, "r_pr_m": 3.0, "d_pr_m": 2.0, "k_clusters": 2, "virtual_cell_m": 2.0}}
}}"#
        );
        load_world(&text).unwrap()
    }

    #[test]
    fn uncertainty_metric_of_identity_is_one() {
        assert_relative_eq!(uncertainty_metric(&Matrix3::identity()), 1.0);
    }

    #[test]
    fn rmse_zero_error_is_zero() {
        let rows = vec![TrialRow {
            t: 0.0,
            distance: 0.4,
            truth: SE2Pose::new(1.0, 2.0, 0.0),
            estimate: SE2Pose::new(1.0, 2.0, 0.0),
            pose_uncertainty: 1e-6,
        }];
        let out = rmse_by_distance(&[rows], 1.0);
        assert_eq!(out, vec![(0.5, 0.0)]);
    }

    fn row_with_error(distance: f64, ex: f64, ey: f64) -> TrialRow {
        TrialRow {
            t: 0.0,
            distance,
            truth: SE2Pose::new(ex, ey, 0.0),
            estimate: SE2Pose::identity(),
            pose_uncertainty: 1e-6,
        }
    }

    #[test]
    fn rmse_three_four_five() {
        let out = rmse_by_distance(&[vec![row_with_error(0.2, 3.0, 4.0)]], 1.0);
        assert_relative_eq!(out[0].1, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn rmse_averages_within_bin() {
        let rows = vec![row_with_error(0.2, 1.0, 0.0), row_with_error(0.7, 7.0, 0.0)];
        let out = rmse_by_distance(&[rows], 1.0);
        // sqrt((1 + 49) / 2) = 5
        assert_relative_eq!(out[0].1, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn rmse_skips_empty_bins() {
        let rows = vec![row_with_error(0.5, 1.0, 0.0), row_with_error(5.5, 1.0, 0.0)];
        let out = rmse_by_distance(&[rows], 1.0);
        assert_eq!(out.len(), 2);
        assert_relative_eq!(out[1].0, 5.5);
    }

    #[test]
    fn zero_noise_trial_reaches_goal_exactly() {
        let sc = corridor_scenario(0.0, 0.0);
        let (graph, _) = explore(&sc, 1).unwrap();
        let t = run_trial(
            &sc,
            &graph,
            PlannerKind::ShortestDistance,
            0,
            1,
            &sc.planner,
        )
        .unwrap();
        assert!(t.reached_goal, "{:?}", t.aborted);
        assert!(t.final_error <= 1e-6, "error {}", t.final_error);
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let sc = corridor_scenario(0.05, 0.01);
        let (graph, _) = explore(&sc, 3).unwrap();
        let a = run_trial(&sc, &graph, PlannerKind::VirtualMap, 0, 7, &sc.planner).unwrap();
        let b = run_trial(&sc, &graph, PlannerKind::VirtualMap, 0, 7, &sc.planner).unwrap();
        assert_eq!(trial_csv(&a.rows), trial_csv(&b.rows));
    }

    #[test]
    fn different_seed_changes_the_truth_stream() {
        let sc = corridor_scenario(0.05, 0.01);
        let (graph, _) = explore(&sc, 3).unwrap();
        let a = run_trial(&sc, &graph, PlannerKind::ShortestDistance, 0, 7, &sc.planner).unwrap();
        let b = run_trial(&sc, &graph, PlannerKind::ShortestDistance, 0, 8, &sc.planner).unwrap();
        assert_ne!(trial_csv(&a.rows), trial_csv(&b.rows));
    }

    #[test]
    fn timing_rows_match_selection_count() {
        let sc = corridor_scenario(0.02, 0.005);
        let (graph, _) = explore(&sc, 3).unwrap();
        let t = run_trial(&sc, &graph, PlannerKind::ShortestDistance, 0, 5, &sc.planner).unwrap();
        assert!(!t.eval_times.is_empty());
        let csv = timing_csv(&t.eval_times);
        assert_eq!(csv.lines().count(), t.eval_times.len() + 1);
    }

    #[test]
    fn single_trial_summary_matches_the_trial() {
        let sc = corridor_scenario(0.02, 0.005);
        let (graph, _) = explore(&sc, 3).unwrap();
        let runs = run_experiment(
            &sc,
            &graph,
            &[PlannerKind::ShortestDistance],
            0,
            1,
            11,
            &sc.planner,
            false,
        )
        .unwrap();
        let s = &summarize(&runs)[0];
        let t = &runs[0].trials[0].1;
        assert_eq!(s.trials, 1);
        assert_relative_eq!(s.mean_final_uncertainty, t.final_uncertainty);
        assert_relative_eq!(s.final_rmse, t.final_error);
    }

    #[test]
    fn serial_and_parallel_agree() {
        let sc = corridor_scenario(0.02, 0.005);
        let (graph, _) = explore(&sc, 3).unwrap();
        let kinds = [PlannerKind::ShortestDistance];
        let serial =
            run_experiment(&sc, &graph, &kinds, 0, 3, 21, &sc.planner, false).unwrap();
        let par = run_experiment(&sc, &graph, &kinds, 0, 3, 21, &sc.planner, true).unwrap();
        for (a, b) in serial[0].trials.iter().zip(&par[0].trials) {
            assert_eq!(trial_csv(&a.1.rows), trial_csv(&b.1.rows));
        }
    }
}
