//! Scenario files: a single JSON document describing the world grid, the
//! sensor and odometry noise, the start pose, goal list, and planner
//! parameters. Row 0 of `grid` is the maximum-y row.

use std::collections::VecDeque;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::planner::PlannerParams;
use crate::se2::SE2Pose;
use crate::world::{OdomConfig, SensorConfig, World};

#[derive(Debug, Deserialize)]
struct SensorDoc {
    max_range_m: f64,
    aperture_deg: [f64; 2],
    sigma_r_m: f64,
    sigma_theta_rad: f64,
    #[serde(default = "default_rate")]
    rate_hz: f64,
}

fn default_rate() -> f64 {
    5.0
}

#[derive(Debug, Deserialize)]
struct OdomDoc {
    sigma_xy: f64,
    sigma_theta: f64,
    #[serde(default = "default_dvl")]
    dvl_rate_hz: f64,
    #[serde(default = "default_imu")]
    imu_rate_hz: f64,
}

fn default_dvl() -> f64 {
    50.0
}

fn default_imu() -> f64 {
    7.0
}

#[derive(Debug, Deserialize)]
struct PlannerDoc {
    alpha: f64,
    d_sd_m: f64,
    n_pr: usize,
    r_pr_m: f64,
    d_pr_m: f64,
    k_clusters: usize,
    virtual_cell_m: f64,
}

#[derive(Debug, Deserialize)]
struct ScenarioDoc {
    resolution_m: f64,
    grid: Vec<String>,
    start: [f64; 3],
    goals: Vec<[f64; 2]>,
    sensor: SensorDoc,
    odom: OdomDoc,
    planner: PlannerDoc,
}

/// A fully validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub world: World,
    pub sensor: SensorConfig,
    pub odom: OdomConfig,
    pub start: SE2Pose,
    pub goals: Vec<nalgebra::Vector2<f64>>,
    pub planner: PlannerParams,
}

fn validate(doc: ScenarioDoc) -> Result<Scenario> {
    if doc.resolution_m <= 0.0 {
        return Err(Error::Validation("resolution_m must be positive".into()));
    }
    if doc.grid.is_empty() {
        return Err(Error::Validation("grid is empty".into()));
    }
    let width = doc.grid[0].chars().count();
    let height = doc.grid.len();
    if width == 0 {
        return Err(Error::Validation("grid rows are empty".into()));
    }
    // row 0 of the document is the maximum-y row; store row 0 at minimum y
    let mut occupied = vec![false; width * height];
    for (row_idx, row) in doc.grid.iter().enumerate() {
        if row.chars().count() != width {
            return Err(Error::Validation(format!(
                "grid row {row_idx} has length {} (expected {width})",
                row.chars().count()
            )));
        }
        let iy = height - 1 - row_idx;
        for (ix, ch) in row.chars().enumerate() {
            occupied[iy * width + ix] = match ch {
                '#' => true,
                '.' => false,
                other => {
                    return Err(Error::Validation(format!(
                        "grid row {row_idx} col {ix}: unexpected character '{other}'"
                    )))
                }
            };
        }
    }
    let world = World::new(occupied, width, height, doc.resolution_m);
    if world.free_count() == 0 {
        return Err(Error::Validation("grid has no free cell".into()));
    }

    let s = &doc.sensor;
    if s.max_range_m <= 0.0 {
        return Err(Error::Validation("sensor.max_range_m must be positive".into()));
    }
    if s.sigma_r_m < 0.0 || s.sigma_theta_rad < 0.0 {
        return Err(Error::Validation("sensor sigmas must be non-negative".into()));
    }
    let ap = (s.aperture_deg[0].to_radians(), s.aperture_deg[1].to_radians());
    if ap.0 > ap.1 || ap.0 < -std::f64::consts::PI - 1e-9 || ap.1 > std::f64::consts::PI + 1e-9 {
        return Err(Error::Validation("sensor aperture outside [-pi, pi]".into()));
    }
    if s.rate_hz <= 0.0 {
        return Err(Error::Validation("sensor.rate_hz must be positive".into()));
    }
    let sensor = SensorConfig {
        max_range: s.max_range_m,
        aperture: ap,
        rate_hz: s.rate_hz,
        sigma_r: s.sigma_r_m,
        sigma_theta: s.sigma_theta_rad,
    };

    let o = &doc.odom;
    if o.sigma_xy < 0.0 || o.sigma_theta < 0.0 {
        return Err(Error::Validation("odom sigmas must be non-negative".into()));
    }
    if o.dvl_rate_hz <= 0.0 || o.imu_rate_hz <= 0.0 {
        return Err(Error::Validation("odom rates must be positive".into()));
    }
    let odom = OdomConfig {
        sigma_xy: o.sigma_xy,
        sigma_theta: o.sigma_theta,
        dvl_rate_hz: o.dvl_rate_hz,
        imu_rate_hz: o.imu_rate_hz,
    };

    let p = &doc.planner;
    if p.alpha <= 0.0
        || p.d_sd_m <= 0.0
        || p.n_pr == 0
        || p.r_pr_m <= 0.0
        || p.d_pr_m <= 0.0
        || p.k_clusters == 0
        || p.virtual_cell_m <= 0.0
    {
        return Err(Error::Validation("planner parameters must be positive".into()));
    }
    let planner = PlannerParams {
        alpha: p.alpha,
        d_sd: p.d_sd_m,
        n_pr: p.n_pr,
        r_pr: p.r_pr_m,
        d_pr: p.d_pr_m,
        k_clusters: p.k_clusters,
        virtual_cell: p.virtual_cell_m,
    };

    let start = SE2Pose::new(doc.start[0], doc.start[1], doc.start[2]);
    let start_cell = world
        .cell_of(&start.translation())
        .ok_or_else(|| Error::Validation("start outside the grid".into()))?;
    if world.is_occupied(start_cell.0, start_cell.1) {
        return Err(Error::Validation("start not in free space".into()));
    }
    if doc.goals.is_empty() {
        return Err(Error::Validation("no goals given".into()));
    }

    // connectivity: 4-connected flood fill from the start cell
    let mut reachable = vec![false; width * height];
    let mut queue = VecDeque::new();
    reachable[start_cell.1 * width + start_cell.0] = true;
    queue.push_back(start_cell);
    while let Some((cx, cy)) = queue.pop_front() {
        let neighbors = [
            (cx.wrapping_sub(1), cy),
            (cx + 1, cy),
            (cx, cy.wrapping_sub(1)),
            (cx, cy + 1),
        ];
        for (nx, ny) in neighbors {
            if nx < width && ny < height && !world.is_occupied(nx, ny) && !reachable[ny * width + nx]
            {
                reachable[ny * width + nx] = true;
                queue.push_back((nx, ny));
            }
        }
    }

    let mut goals = Vec::new();
    for (i, g) in doc.goals.iter().enumerate() {
        let gp = nalgebra::Vector2::new(g[0], g[1]);
        let cell = world
            .cell_of(&gp)
            .ok_or_else(|| Error::Validation(format!("goal {} outside the grid", i + 1)))?;
        if world.is_occupied(cell.0, cell.1) {
            return Err(Error::Validation(format!("goal {} not in free space", i + 1)));
        }
        if !reachable[cell.1 * width + cell.0] {
            return Err(Error::Validation(format!(
                "goal {} not connected to start",
                i + 1
            )));
        }
        goals.push(gp);
    }

    Ok(Scenario {
        world,
        sensor,
        odom,
        start,
        goals,
        planner,
    })
}

/// Parse and validate a scenario document.
pub fn load_world(text: &str) -> Result<Scenario> {
    let doc: ScenarioDoc = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    validate(doc)
}

pub fn load_world_file(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    load_world(&text)
}
