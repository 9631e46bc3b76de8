//! Seeded synthetic deformation scenes: a regional linear trend plus
//! Gaussian subsidence bowls, sampled at jittered-lattice measurement points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{PointRecord, PointSet};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnsetShape {
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bowl {
    pub center_easting: f64,
    pub center_northing: f64,
    /// Metres; the Gaussian sigma is half of this.
    pub radius: f64,
    /// Displacement at the bowl centre at the last step, mm (negative = subsidence).
    pub final_depth: f64,
    /// Step after which the bowl starts to deepen.
    pub onset: usize,
    pub shape: OnsetShape,
}

impl Bowl {
    /// Fraction of `final_depth` reached at step `t` of a `t_steps` scene.
    pub fn profile(&self, t: usize, t_steps: usize) -> f64 {
        if t <= self.onset {
            return 0.0;
        }
        let span = t_steps.saturating_sub(1).saturating_sub(self.onset).max(1) as f64;
        let frac = ((t - self.onset) as f64 / span).min(1.0);
        match self.shape {
            OnsetShape::Linear => frac,
            OnsetShape::Quadratic => frac * frac,
        }
    }

    pub fn footprint(&self, easting: f64, northing: f64) -> f64 {
        let sigma = self.radius / 2.0;
        let d2 = (easting - self.center_easting).powi(2) + (northing - self.center_northing).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_points: usize,
    /// Side length of the square study area, metres (origin at 0, 0).
    pub extent: f64,
    pub t_steps: usize,
    #[serde(default)]
    pub bowls: Vec<Bowl>,
    /// mm per step, applied uniformly.
    #[serde(default)]
    pub trend: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    42
}

impl SceneConfig {
    /// The 32×32, 24-step-window acceptance scene: 20×20 points at ~100 m
    /// spacing, one quadratic bowl, 0.05 mm noise, seed 42.
    pub fn reference() -> Self {
        Self {
            n_points: 400,
            extent: 2000.0,
            t_steps: 25,
            bowls: vec![Bowl {
                center_easting: 1000.0,
                center_northing: 1000.0,
                radius: 800.0,
                final_depth: -30.0,
                onset: 4,
                shape: OnsetShape::Quadratic,
            }],
            trend: -0.05,
            noise_std: 0.05,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.n_points < 3 {
            return bad("n_points must be at least 3");
        }
        if !(self.extent > 0.0) || !self.extent.is_finite() {
            return bad("extent must be positive");
        }
        if self.t_steps < 2 {
            return bad("t_steps must be at least 2");
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad("noise_std must be non-negative");
        }
        if !self.trend.is_finite() {
            return bad("trend must be finite");
        }
        for b in &self.bowls {
            if !(b.radius > 0.0) || !b.radius.is_finite() {
                return bad("bowl radius must be positive");
            }
            if !b.final_depth.is_finite() {
                return bad("bowl depth must be finite");
            }
        }
        Ok(())
    }
}

/// Noise-free displacement field of a scene.
#[derive(Debug, Clone)]
pub struct SceneTruth {
    cfg: SceneConfig,
}

impl SceneTruth {
    pub fn displacement(&self, easting: f64, northing: f64, t: usize) -> f64 {
        let bowls: f64 = self
            .cfg
            .bowls
            .iter()
            .map(|b| b.final_depth * b.profile(t, self.cfg.t_steps) * b.footprint(easting, northing))
            .sum();
        self.cfg.trend * t as f64 + bowls
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<(PointSet, SceneTruth), SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nx = (cfg.n_points as f64).sqrt().ceil() as usize;
    let ny = cfg.n_points.div_ceil(nx);
    let (sx, sy) = (cfg.extent / nx as f64, cfg.extent / ny as f64);

    let coords: Vec<(f64, f64)> = (0..cfg.n_points)
        .map(|k| {
            let (i, j) = (k % nx, k / nx);
            let je = rng.random_range(-0.25..=0.25) * sx;
            let jn = rng.random_range(-0.25..=0.25) * sy;
            ((i as f64 + 0.5) * sx + je, (j as f64 + 0.5) * sy + jn)
        })
        .collect();

    let truth = SceneTruth { cfg: cfg.clone() };
    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let records = coords
        .iter()
        .enumerate()
        .map(|(k, &(e, n))| {
            let series = (0..cfg.t_steps)
                .map(|t| {
                    let v = truth.displacement(e, n, t);
                    if cfg.noise_std > 0.0 {
                        v + noise.sample(&mut rng)
                    } else {
                        v
                    }
                })
                .collect();
            PointRecord {
                point_id: format!("P{k:05}"),
                easting: e,
                northing: n,
                series,
            }
        })
        .collect();
    let epoch_labels = (0..cfg.t_steps).map(|t| format!("t{t:04}")).collect();
    Ok((
        PointSet {
            records,
            epoch_labels,
        },
        truth,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{read_csv, CsvSchema};
    use proptest::prelude::*;

    fn flat(trend: f64) -> SceneConfig {
        SceneConfig {
            n_points: 25,
            extent: 500.0,
            t_steps: 10,
            bowls: vec![],
            trend,
            noise_std: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn pure_trend_is_closed_form() {
        let (ps, _) = generate_scene(&flat(-0.1)).unwrap();
        for r in &ps.records {
            for (t, v) in r.series.iter().enumerate() {
                assert_eq!(*v, -0.1 * t as f64);
            }
        }
    }

    #[test]
    fn seeded_determinism() {
        let cfg = SceneConfig::reference();
        let (a, _) = generate_scene(&cfg).unwrap();
        let (b, _) = generate_scene(&cfg).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    #[test]
    fn bowl_centre_reaches_final_depth() {
        let mut cfg = flat(-0.2);
        cfg.bowls.push(Bowl {
            center_easting: 250.0,
            center_northing: 250.0,
            radius: 200.0,
            final_depth: -12.0,
            onset: 3,
            shape: OnsetShape::Quadratic,
        });
        let (_, truth) = generate_scene(&cfg).unwrap();
        let v = truth.displacement(250.0, 250.0, 9);
        assert!((v - (-0.2 * 9.0 - 12.0)).abs() <= 1e-9);
        // quadratic onset: half way through the active span gives a quarter depth
        let mid = truth.displacement(250.0, 250.0, 6) - (-0.2 * 6.0);
        assert!((mid - (-12.0 * 0.25)).abs() <= 1e-9);
    }

    #[test]
    fn invalid_configs() {
        let mut c = flat(0.0);
        c.t_steps = 1;
        assert!(generate_scene(&c).is_err());
        let mut c = flat(0.0);
        c.noise_std = -1.0;
        assert!(generate_scene(&c).is_err());
        let mut c = flat(0.0);
        c.bowls.push(Bowl {
            center_easting: 0.0,
            center_northing: 0.0,
            radius: 0.0,
            final_depth: 1.0,
            onset: 0,
            shape: OnsetShape::Linear,
        });
        assert!(matches!(generate_scene(&c), Err(SynthError::InvalidConfig(_))));
    }

    #[test]
    fn csv_round_trip_through_ingest() {
        let (ps, _) = generate_scene(&SceneConfig::reference()).unwrap();
        let mut buf = Vec::new();
        ps.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(back.records.len(), ps.records.len());
        assert_eq!(back.epoch_labels, ps.epoch_labels);
        for (a, b) in back.records.iter().zip(&ps.records) {
            assert_eq!(a.point_id, b.point_id);
            assert!((a.easting - b.easting).abs() <= 5e-7);
            for (x, y) in a.series.iter().zip(&b.series) {
                assert!((x - y).abs() <= 5e-7);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn linear_scene_steps_by_constant_increment(
            seed in 0u64..1000,
            trend in -0.5f64..0.5,
            depth in -40.0f64..0.0,
            onset in 0usize..5,
        ) {
            let bowl = Bowl {
                center_easting: 300.0,
                center_northing: 200.0,
                radius: 250.0,
                final_depth: depth,
                onset,
                shape: OnsetShape::Linear,
            };
            let cfg = SceneConfig { bowls: vec![bowl.clone()], seed, ..flat(trend) };
            let (ps, _) = generate_scene(&cfg).unwrap();
            let span = (cfg.t_steps - 1 - onset) as f64;
            for r in &ps.records {
                let step = trend + depth / span * bowl.footprint(r.easting, r.northing);
                let t = cfg.t_steps - 1;
                prop_assert!((r.series[t] - (r.series[t - 1] + step)).abs() < 1e-9);
            }
        }

        #[test]
        fn displacement_is_bounded(seed in 0u64..1000, noise in 0.0f64..0.3) {
            let mut cfg = SceneConfig::reference();
            cfg.seed = seed;
            cfg.noise_std = noise;
            let (ps, _) = generate_scene(&cfg).unwrap();
            let bound = cfg.trend.abs() * cfg.t_steps as f64
                + cfg.bowls.iter().map(|b| b.final_depth.abs()).sum::<f64>()
                + 6.0 * noise;
            for r in &ps.records {
                for v in &r.series {
                    prop_assert!(v.abs() <= bound);
                }
            }
        }
    }
}
