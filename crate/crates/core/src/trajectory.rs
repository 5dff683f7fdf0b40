//! Desired abduction motions built from rest-to-rest quintic sections.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::TrajectoryError;

/// `phi_hat(t) = sum a_i t^i` on `[0, duration]`, in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct QuinticSection {
    pub coeffs: [f64; 6],
    pub duration: f64,
}

impl QuinticSection {
    /// Rest-to-rest quintic from `p0` to `p1` over `duration` seconds: zero
    /// velocity and acceleration at both ends.
    pub fn fit(p0: f64, p1: f64, duration: f64) -> Result<Self, TrajectoryError> {
        if !(duration > 0.0) {
            return Err(TrajectoryError::NonPositiveDuration(duration));
        }
        let delta = p1 - p0;
        let t3 = duration.powi(3);
        Ok(Self {
            coeffs: [
                p0,
                0.0,
                0.0,
                10.0 * delta / t3,
                -15.0 * delta / (t3 * duration),
                6.0 * delta / (t3 * duration * duration),
            ],
            duration,
        })
    }

    pub fn position(&self, t: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, a| acc * t + a)
    }

    pub fn velocity(&self, t: f64) -> f64 {
        let a = &self.coeffs;
        (((5.0 * a[5] * t + 4.0 * a[4]) * t + 3.0 * a[3]) * t + 2.0 * a[2]) * t + a[1]
    }

    pub fn acceleration(&self, t: f64) -> f64 {
        let a = &self.coeffs;
        ((20.0 * a[5] * t + 12.0 * a[4]) * t + 6.0 * a[3]) * t + 2.0 * a[2]
    }

    pub fn start(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn end(&self) -> f64 {
        self.position(self.duration)
    }
}

/// Sections played back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    sections: Vec<QuinticSection>,
    starts: Vec<f64>,
    total: f64,
}

impl Trajectory {
    pub fn new(sections: Vec<QuinticSection>) -> Result<Self, TrajectoryError> {
        if sections.is_empty() {
            return Err(TrajectoryError::Empty);
        }
        let mut starts = Vec::with_capacity(sections.len());
        let mut total = 0.0;
        for s in &sections {
            starts.push(total);
            total += s.duration;
        }
        Ok(Self {
            sections,
            starts,
            total,
        })
    }

    /// Stacks rest-to-rest sections through `waypoints`, each lasting
    /// `section_duration`.
    pub fn through(waypoints: &[f64], section_duration: f64) -> Result<Self, TrajectoryError> {
        if waypoints.len() < 2 {
            return Err(TrajectoryError::Empty);
        }
        let sections = waypoints
            .windows(2)
            .map(|w| QuinticSection::fit(w[0], w[1], section_duration))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(sections)
    }

    /// A trajectory that holds `phi` for `duration` seconds.
    pub fn constant(phi: f64, duration: f64) -> Result<Self, TrajectoryError> {
        Self::new(vec![QuinticSection::fit(phi, phi, duration)?])
    }

    /// Random rest-to-rest motion. Every waypoint, including the first, is
    /// drawn uniformly from `range`.
    pub fn random(
        seed: u64,
        total_duration: f64,
        section_duration: f64,
        range: (f64, f64),
    ) -> Result<Self, TrajectoryError> {
        if !(section_duration > 0.0) {
            return Err(TrajectoryError::NonPositiveDuration(section_duration));
        }
        let ratio = total_duration / section_duration;
        let count = ratio.round();
        if count < 1.0 || (ratio - count).abs() > 1e-9 {
            return Err(TrajectoryError::BadSectionCount {
                total: total_duration,
                section: section_duration,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = range;
        let waypoints: Vec<f64> = (0..=count as usize)
            .map(|_| {
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            })
            .collect();
        Self::through(&waypoints, section_duration)
    }

    pub fn sections(&self) -> &[QuinticSection] {
        &self.sections
    }

    pub fn duration(&self) -> f64 {
        self.total
    }

    pub fn start_position(&self) -> f64 {
        self.sections[0].start()
    }

    /// Desired `(phi_hat, phi_dot_hat)` at `t`.
    pub fn sample(&self, t: f64) -> Result<(f64, f64), TrajectoryError> {
        // Frame times accumulate as k * dt, so allow a hair past the end.
        const SLACK: f64 = 1e-9;
        if !(t >= -SLACK && t <= self.total + SLACK) {
            return Err(TrajectoryError::OutOfRange {
                t,
                total: self.total,
            });
        }
        let t = t.clamp(0.0, self.total);
        let idx = self.starts.partition_point(|s| *s <= t).saturating_sub(1);
        let section = &self.sections[idx];
        let local = (t - self.starts[idx]).min(section.duration);
        Ok((section.position(local), section.velocity(local)))
    }

    /// Writes `t, phi_hat, phi_dot_hat` rows every `dt` seconds.
    pub fn write_csv<W: Write>(&self, mut out: W, dt: f64) -> io::Result<()> {
        writeln!(out, "t,phi_hat,phi_dot_hat")?;
        let frames = (self.total / dt).round() as usize;
        for k in 0..=frames {
            let t = k as f64 * dt;
            let (p, v) = self
                .sample(t)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
            writeln!(out, "{t},{p},{v}")?;
        }
        Ok(())
    }
}
