//! Synthetic advecting precipitation and cloud fields.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tencore::Tensor;

use crate::error::{Error, Result};

use super::frames::FrameSequence;

/// Values below this are reported as no rain.
pub const RAIN_CUTOFF: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Round Gaussian rain cells.
    Blobs,
    /// Long narrow rain bands.
    Fronts,
    /// Cloud-type codes 1–15 derived from a smooth cover field.
    Clouds,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Blobs => "blobs",
            SynthKind::Fronts => "fronts",
            SynthKind::Clouds => "clouds",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SynthKind::Blobs, SynthKind::Fronts, SynthKind::Clouds]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown synthetic kind {s:?} (expected blobs, fronts or clouds)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub seed: u64,
    pub sequences: usize,
    /// Side of the square frames.
    pub size: usize,
    pub frames: usize,
    pub step_minutes: u32,
    /// Range of per-sequence speeds in pixels per frame.
    pub speed: (f64, f64),
    /// Range of per-cell multiplicative intensity change per frame.
    pub growth: (f64, f64),
    /// Range of the number of cells per sequence.
    pub cells: (usize, usize),
    /// Static fields: zero velocity and no growth or decay.
    pub zero_motion: bool,
}

impl SynthConfig {
    pub fn new(kind: SynthKind, seed: u64, sequences: usize, size: usize) -> Self {
        let clouds = kind == SynthKind::Clouds;
        Self {
            kind,
            seed,
            sequences,
            size,
            frames: if clouds { 10 } else { 18 },
            step_minutes: if clouds { 15 } else { 5 },
            speed: (0.5, 2.0),
            growth: (0.97, 1.03),
            cells: (3, 6),
            zero_motion: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        if self.size == 0 || self.step_minutes == 0 {
            return Err(Error::config("synthetic frames need a positive size and time step"));
        }
        if !ordered(self.speed) || self.speed.0 < 0.0 || !ordered(self.growth) || self.growth.0 <= 0.0 {
            return Err(Error::config(format!(
                "bad synthetic ranges: speed {:?}, growth {:?}",
                self.speed, self.growth
            )));
        }
        if self.cells.0 == 0 || self.cells.0 > self.cells.1 {
            return Err(Error::config(format!("bad cell count range {:?}", self.cells)));
        }
        Ok(())
    }
}

struct Cell {
    y: f64,
    x: f64,
    /// Unit vector of the long axis.
    axis: (f64, f64),
    sigma_along: f64,
    sigma_across: f64,
    amplitude: f64,
    growth: f64,
}

impl Cell {
    fn value(&self, y: f64, x: f64, t: f64, v: (f64, f64)) -> f64 {
        let dy = y - (self.y + v.0 * t);
        let dx = x - (self.x + v.1 * t);
        let along = dy * self.axis.0 + dx * self.axis.1;
        let across = -dy * self.axis.1 + dx * self.axis.0;
        let e = along * along / (2.0 * self.sigma_along.powi(2)) + across * across / (2.0 * self.sigma_across.powi(2));
        self.amplitude * self.growth.powf(t) * (-e).exp()
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

/// Velocity `(vy, vx)` in pixels per frame and cells for one sequence.
fn draw_sequence(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> ((f64, f64), Vec<Cell>) {
    let size = cfg.size as f64;
    let velocity = if cfg.zero_motion {
        (0.0, 0.0)
    } else {
        let speed = uniform(rng, cfg.speed);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        (speed * angle.sin(), speed * angle.cos())
    };
    let n = rng.random_range(cfg.cells.0..=cfg.cells.1);
    // cells start upwind as well so that rain keeps entering the frame
    let travel = cfg.speed.1 * cfg.frames as f64;
    let cells = (0..n)
        .map(|_| {
            let (sigma_along, sigma_across, axis) = match cfg.kind {
                SynthKind::Fronts => {
                    let theta = rng.random_range(0.0..std::f64::consts::PI);
                    (
                        rng.random_range(size / 3.0..size),
                        rng.random_range(size / 20.0..size / 10.0),
                        (theta.sin(), theta.cos()),
                    )
                }
                _ => {
                    let s = rng.random_range(size / 14.0..size / 6.0);
                    (s, s, (0.0, 1.0))
                }
            };
            let amplitude = match cfg.kind {
                SynthKind::Clouds => rng.random_range(0.5..1.5),
                _ => rng.random_range(0.5..3.0),
            };
            let growth = if cfg.zero_motion { 1.0 } else { uniform(rng, cfg.growth) };
            Cell {
                y: rng.random_range(-travel..size + travel),
                x: rng.random_range(-travel..size + travel),
                axis,
                sigma_along,
                sigma_across,
                amplitude,
                growth,
            }
        })
        .collect();
    (velocity, cells)
}

fn cloud_code(cover: f64) -> f64 {
    // below 0.3: the four cloud-free surface codes, above: 11 cloud codes
    if cover < 0.3 {
        1.0 + (cover / 0.3 * 4.0).floor().clamp(0.0, 3.0)
    } else {
        5.0 + ((cover - 0.3) / 1.2 * 11.0).floor().clamp(0.0, 10.0)
    }
}

fn render(cfg: &SynthConfig, velocity: (f64, f64), cells: &[Cell], t: usize) -> Tensor {
    let n = cfg.size;
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let v: f64 = cells
                .iter()
                .map(|c| c.value(y as f64, x as f64, t as f64, velocity))
                .sum();
            data.push(match cfg.kind {
                SynthKind::Clouds => cloud_code(v),
                _ if v < RAIN_CUTOFF => 0.0,
                _ => v,
            });
        }
    }
    Tensor::new([n, n], data).expect("frame shape")
}

/// The velocity `(vy, vx)` in pixels per frame drawn for each sequence.
pub fn synth_velocities(cfg: &SynthConfig) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.sequences).map(|_| draw_sequence(cfg, &mut rng).0).collect())
}

/// Deterministic sequences of advected cells. Every sequence has its own
/// constant velocity; each cell grows or decays geometrically.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<FrameSequence>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.sequences)
        .map(|i| {
            let (velocity, cells) = draw_sequence(cfg, &mut rng);
            let frames = (0..cfg.frames).map(|t| render(cfg, velocity, &cells, t)).collect();
            let start = i as i64 * 24 * 60;
            FrameSequence::new(format!("{i:04}"), frames, start, cfg.step_minutes)
        })
        .collect()
}
