//! Ground-truth world grid, vehicle kinematics with noisy odometry, and a
//! simulated range-bearing sonar that emits one point detection per visible
//! occupied cell.

use nalgebra::Vector2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::se2::{normalize_angle, SE2Pose};

/// Simulation tick, matching a 5 Hz sonar.
pub const TICK_DT: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct World {
    /// Row-major occupancy, row 0 at minimum y.
    occupied: Vec<bool>,
    pub width: usize,
    pub height: usize,
    /// Meters per cell.
    pub resolution: f64,
    /// Pose of the corner of cell (0, 0); the world spans
    /// [origin, origin + dims * resolution).
    pub origin: SE2Pose,
}

impl World {
    pub fn new(occupied: Vec<bool>, width: usize, height: usize, resolution: f64) -> Self {
        assert_eq!(occupied.len(), width * height);
        Self {
            occupied,
            width,
            height,
            resolution,
            origin: SE2Pose::identity(),
        }
    }

    pub fn is_occupied(&self, ix: usize, iy: usize) -> bool {
        self.occupied[iy * self.width + ix]
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Vector2<f64> {
        Vector2::new(
            self.origin.x + (ix as f64 + 0.5) * self.resolution,
            self.origin.y + (iy as f64 + 0.5) * self.resolution,
        )
    }

    pub fn cell_of(&self, p: &Vector2<f64>) -> Option<(usize, usize)> {
        let ix = (p.x - self.origin.x) / self.resolution;
        let iy = (p.y - self.origin.y) / self.resolution;
        if ix < 0.0 || iy < 0.0 {
            return None;
        }
        let (ix, iy) = (ix as usize, iy as usize);
        if ix >= self.width || iy >= self.height {
            return None;
        }
        Some((ix, iy))
    }

    pub fn occupied_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height)
            .flat_map(move |iy| (0..self.width).map(move |ix| (ix, iy)))
            .filter(move |&(ix, iy)| self.is_occupied(ix, iy))
    }

    pub fn free_count(&self) -> usize {
        self.occupied.iter().filter(|o| !**o).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SensorConfig {
    pub max_range: f64,
    /// [min, max] bearing limits in radians.
    pub aperture: (f64, f64),
    pub rate_hz: f64,
    pub sigma_r: f64,
    pub sigma_theta: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct OdomConfig {
    /// Translational noise, meters per second of commanded motion.
    pub sigma_xy: f64,
    /// Heading noise, radians per second.
    pub sigma_theta: f64,
    pub dvl_rate_hz: f64,
    pub imu_rate_hz: f64,
}

/// One sonar return in the sensor frame.
#[derive(Debug, Clone, Copy)]
pub struct Detection {
    pub range: f64,
    pub bearing: f64,
    pub cartesian: Vector2<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        // keep the stream length independent of sigma
        let _ = rng.gen::<f64>();
        let _ = rng.gen::<f64>();
        return 0.0;
    }
    let u1: f64 = rng.gen_range(1e-300..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * sigma
}

/// Advance ground truth by one noiseless tick and emit the corresponding
/// noisy body-frame odometry increment.
pub fn step_motion(
    truth: &SE2Pose,
    control: &nalgebra::Vector3<f64>,
    dt: f64,
    odom: &OdomConfig,
    rng: &mut ChaCha8Rng,
) -> (SE2Pose, SE2Pose) {
    assert!(dt > 0.0);
    let delta = SE2Pose::new(control.x * dt, control.y * dt, control.z * dt);
    let new_truth = truth.compose(&delta);
    let meas = SE2Pose::new(
        delta.x + gaussian(rng, odom.sigma_xy * dt),
        delta.y + gaussian(rng, odom.sigma_xy * dt),
        delta.theta + gaussian(rng, odom.sigma_theta * dt),
    );
    (new_truth, meas)
}

/// Integer Bresenham line between two cells, endpoints included.
pub fn bresenham(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut cells = Vec::new();
    loop {
        cells.push((x0, y0));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    cells
}

/// True when no occupied cell lies strictly between the two cells.
pub fn ray_visible(world: &World, from: (usize, usize), to: (usize, usize)) -> bool {
    let line = bresenham(
        (from.0 as i64, from.1 as i64),
        (to.0 as i64, to.1 as i64),
    );
    for &(x, y) in &line[1..line.len().saturating_sub(1)] {
        if world.is_occupied(x as usize, y as usize) {
            return false;
        }
    }
    true
}

fn bearing_in_aperture(bearing: f64, aperture: (f64, f64)) -> bool {
    bearing >= aperture.0 && bearing <= aperture.1
}

/// Simulated sonar sweep: one noisy detection per occupied cell whose center
/// is in range, inside the aperture, and ray-visible from the sensor.
pub fn sense(
    truth: &SE2Pose,
    world: &World,
    cfg: &SensorConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Detection> {
    let mut out = Vec::new();
    let sensor_cell = match world.cell_of(&truth.translation()) {
        Some(c) => c,
        None => return out,
    };
    for (ix, iy) in world.occupied_cells() {
        let center = world.cell_center(ix, iy);
        let d = center - truth.translation();
        let range = d.norm();
        if range > cfg.max_range {
            continue;
        }
        let bearing = normalize_angle(d.y.atan2(d.x) - truth.theta);
        if !bearing_in_aperture(bearing, cfg.aperture) {
            continue;
        }
        if !ray_visible(world, sensor_cell, (ix, iy)) {
            continue;
        }
        let r = (range + gaussian(rng, cfg.sigma_r))
            .clamp(0.0, cfg.max_range + 3.0 * cfg.sigma_r);
        let b = bearing + gaussian(rng, cfg.sigma_theta);
        out.push(Detection {
            range: r,
            bearing: b,
            cartesian: Vector2::new(r * b.cos(), r * b.sin()),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::SeedableRng;

    fn quiet_odom() -> OdomConfig {
        OdomConfig {
            sigma_xy: 0.0,
            sigma_theta: 0.0,
            dvl_rate_hz: 50.0,
            imu_rate_hz: 7.0,
        }
    }

    fn open_world(w: usize, h: usize, res: f64) -> World {
        World::new(vec![false; w * h], w, h, res)
    }

    fn sensor(range: f64) -> SensorConfig {
        SensorConfig {
            max_range: range,
            aperture: (-std::f64::consts::PI, std::f64::consts::PI),
            rate_hz: 5.0,
            sigma_r: 0.0,
            sigma_theta: 0.0,
        }
    }

    #[test]
    fn zero_control_keeps_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let odom = OdomConfig {
            sigma_xy: 0.1,
            ..quiet_odom()
        };
        let truth = SE2Pose::new(1.0, 2.0, 0.3);
        let (t2, _) = step_motion(&truth, &Vector3::zeros(), 0.2, &odom, &mut rng);
        assert_eq!(t2, truth);
    }

    #[test]
    fn zero_noise_odometry_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (truth, meas) = step_motion(
            &SE2Pose::identity(),
            &Vector3::new(1.0, 0.0, 0.0),
            1.0,
            &quiet_odom(),
            &mut rng,
        );
        assert_eq!(truth, SE2Pose::new(1.0, 0.0, 0.0));
        assert_eq!(meas, SE2Pose::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn odometry_noise_statistics() {
        // statistical oracle on the noise stream: sample std of the x error
        // must sit within 5% of sigma_xy * dt
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let odom = OdomConfig {
            sigma_xy: 0.1,
            ..quiet_odom()
        };
        let dt = 0.02;
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let (_, meas) = step_motion(&SE2Pose::identity(), &Vector3::zeros(), dt, &odom, &mut rng);
            sum += meas.x;
            sum2 += meas.x * meas.x;
        }
        let mean = sum / n as f64;
        let std = ((sum2 / n as f64) - mean * mean).sqrt();
        let expected = 0.1 * dt;
        assert!((std - expected).abs() / expected < 0.05, "std {std}");
        assert!(mean.abs() < 3.0 * expected / (n as f64).sqrt() * 4.0);
    }

    #[test]
    fn sense_dead_ahead_exact() {
        let mut w = open_world(40, 21, 1.0);
        // occupied cell centered at (10.5, 10.5); sensor at its row
        w.occupied[10 * 40 + 10] = true;
        let world = World::new(w.occupied.clone(), 40, 21, 1.0);
        let truth = SE2Pose::new(0.5, 10.5, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dets = sense(&truth, &world, &sensor(30.0), &mut rng);
        assert_eq!(dets.len(), 1);
        assert!((dets[0].range - 10.0).abs() < 1e-12);
        assert!(dets[0].bearing.abs() < 1e-12);
    }

    #[test]
    fn sense_respects_max_range() {
        let mut occ = vec![false; 80 * 3];
        occ[80 + 40] = true; // center (40.5, 1.5)
        let world = World::new(occ, 80, 3, 1.0);
        let truth = SE2Pose::new(9.5, 1.5, 0.0); // range 31
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sense(&truth, &world, &sensor(30.0), &mut rng).is_empty());
        // nudge within range
        let truth = SE2Pose::new(11.5, 1.5, 0.0);
        assert_eq!(sense(&truth, &world, &sensor(30.0), &mut rng).len(), 1);
    }

    #[test]
    fn sense_excludes_cells_behind_walls() {
        let mut occ = vec![false; 30 * 3];
        occ[30 + 10] = true; // wall at x index 10
        occ[30 + 20] = true; // target behind the wall
        let world = World::new(occ, 30, 3, 1.0);
        let truth = SE2Pose::new(0.5, 1.5, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dets = sense(&truth, &world, &sensor(30.0), &mut rng);
        assert_eq!(dets.len(), 1);
        assert!((dets[0].range - 10.0).abs() < 1e-9);

        // brute-force ray-march oracle at 10x resolution agrees
        let visible = |target: (usize, usize)| -> bool {
            let from = truth.translation();
            let to = world.cell_center(target.0, target.1);
            let n = 10 * 30;
            for k in 1..n {
                let p = from + (to - from) * (k as f64 / n as f64);
                if let Some(c) = world.cell_of(&p) {
                    if c != target && c != (0, 1) && world.is_occupied(c.0, c.1) {
                        return false;
                    }
                }
            }
            true
        };
        assert!(visible((10, 1)));
        assert!(!visible((20, 1)));
    }

    #[test]
    fn detection_stream_is_deterministic() {
        let mut occ = vec![false; 100];
        occ[55] = true;
        occ[77] = true;
        let world = World::new(occ, 10, 10, 1.0);
        let cfg = SensorConfig {
            sigma_r: 0.2,
            sigma_theta: 0.02,
            ..sensor(30.0)
        };
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sense(&SE2Pose::new(1.5, 1.5, 0.5), &world, &cfg, &mut rng)
                .iter()
                .map(|d| (d.range, d.bearing))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }
}
