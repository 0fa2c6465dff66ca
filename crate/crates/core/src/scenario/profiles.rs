//! Daily load and PV shapes at 1-minute resolution, normalized to rated kW.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ScenarioError;

pub const DAY_S: f64 = 86_400.0;
pub const MINUTE_S: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Residential,
    Commercial,
    Pv,
}

impl ProfileKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProfileKind::Residential => "residential",
            ProfileKind::Commercial => "commercial",
            ProfileKind::Pv => "pv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "residential" => Some(ProfileKind::Residential),
            "commercial" => Some(ProfileKind::Commercial),
            "pv" => Some(ProfileKind::Pv),
            _ => None,
        }
    }
}

/// Samples held constant over `step_s`; time wraps at the end of the series.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub step_s: f64,
    pub values: Vec<f64>,
}

impl Profile {
    pub fn constant(v: f64) -> Self {
        Profile {
            step_s: DAY_S,
            values: vec![v],
        }
    }

    pub fn span_s(&self) -> f64 {
        self.step_s * self.values.len() as f64
    }

    /// Step-held value at time `t_s` (seconds since midnight of day 0).
    pub fn at(&self, t_s: f64) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        let k = (t_s.max(0.0) / self.step_s).floor() as usize;
        self.values[k % self.values.len()]
    }

    pub fn scaled(&self, factor: f64) -> Profile {
        Profile {
            step_s: self.step_s,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Reads `time_s,value_kw` rows (header optional) at a uniform step.
    pub fn load_csv(path: &Path) -> Result<Self, ScenarioError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| ScenarioError::Profile(format!("{}: {e}", path.display())))?;
        let mut rows: Vec<(f64, f64)> = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| ScenarioError::Profile(format!("{}: {e}", path.display())))?;
            if rec.len() != 2 {
                return Err(ScenarioError::Profile(format!(
                    "{}: row {} needs time_s,value_kw",
                    path.display(),
                    k + 1
                )));
            }
            let t = rec[0].parse::<f64>();
            let v = rec[1].parse::<f64>();
            match (t, v) {
                (Ok(t), Ok(v)) => rows.push((t, v)),
                _ if k == 0 => continue,
                _ => {
                    return Err(ScenarioError::Profile(format!(
                        "{}: row {} is not numeric",
                        path.display(),
                        k + 1
                    )))
                }
            }
        }
        if rows.len() < 2 {
            return Err(ScenarioError::Profile(format!(
                "{}: need at least two samples",
                path.display()
            )));
        }
        let step = rows[1].0 - rows[0].0;
        let uniform = rows.windows(2).all(|w| ((w[1].0 - w[0].0) - step).abs() < 1e-9);
        if !(step > 0.0) || !uniform || rows[0].0 != 0.0 {
            return Err(ScenarioError::Profile(format!(
                "{}: samples must start at 0 with a uniform step",
                path.display()
            )));
        }
        if rows.iter().any(|r| !(r.1 >= 0.0)) {
            return Err(ScenarioError::Profile(format!("{}: negative value", path.display())));
        }
        Ok(Profile {
            step_s: step,
            values: rows.into_iter().map(|r| r.1).collect(),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ScenarioError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["time_s", "value_kw"])?;
        for (k, v) in self.values.iter().enumerate() {
            w.write_record([format!("{}", k as f64 * self.step_s), format!("{v}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn hours(t_s: f64) -> f64 {
    t_s / 3600.0
}

/// Smooth bump centred at `mu` hours with width `sigma` hours.
fn bump(h: f64, mu: f64, sigma: f64) -> f64 {
    (-0.5 * ((h - mu) / sigma).powi(2)).exp()
}

/// Clear-sky PV shape between 06:00 and 20:00, peaking at 13:00.
pub fn clear_sky(h: f64) -> f64 {
    if !(6.0..20.0).contains(&h) {
        return 0.0;
    }
    (std::f64::consts::PI * (h - 6.0) / 14.0).sin().powf(1.5)
}

const RES: [f64; 4] = [0.22, 0.10, 0.50, 0.20];

fn residential_shape(h: f64) -> f64 {
    RES[0] + RES[1] * bump(h, 7.5, 1.0) + RES[2] * bump(h, 16.3, 1.3) + RES[3] * bump(h, 20.0, 1.6)
}

fn commercial_shape(h: f64) -> f64 {
    let up = 1.0 / (1.0 + (-(h - 7.5) * 4.0).exp());
    let down = 1.0 / (1.0 + ((h - 18.5) * 4.0).exp());
    0.25 + 0.35 * up * down + 0.35 * bump(h, 15.5, 1.5)
}

/// One day of a normalized profile (values in `[0, 1]`) at `resolution_s`.
pub fn generate_profiles(kind: ProfileKind, resolution_s: f64, seed: u64) -> Profile {
    assert!(resolution_s > 0.0, "resolution must be positive");
    let n = (DAY_S / resolution_s).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut values = vec![0.0; n];
    match kind {
        ProfileKind::Pv => {
            let events = rng.random_range(2..=7);
            let clouds: Vec<(f64, f64, f64)> = (0..events)
                .map(|_| {
                    let start = rng.random_range(8.5..18.0);
                    let dur = rng.random_range(3.0..25.0) / 60.0;
                    let depth = rng.random_range(0.2..0.7);
                    (start, dur, depth)
                })
                .collect();
            for (k, v) in values.iter_mut().enumerate() {
                let h = hours((k as f64 + 0.5) * resolution_s);
                let mut x = clear_sky(h);
                for &(s, d, depth) in &clouds {
                    // Five-minute ramps on each side of the shaded interval.
                    let ramp = 5.0 / 60.0;
                    let w = if h < s - ramp || h > s + d + ramp {
                        0.0
                    } else if h < s {
                        (h - (s - ramp)) / ramp
                    } else if h > s + d {
                        (s + d + ramp - h) / ramp
                    } else {
                        1.0
                    };
                    x *= 1.0 - depth * w;
                }
                *v = x.clamp(0.0, 1.0);
            }
        }
        ProfileKind::Residential | ProfileKind::Commercial => {
            let (shape, noise, jitter_h): (fn(f64) -> f64, f64, f64) = match kind {
                ProfileKind::Residential => (residential_shape, 0.08, 0.5),
                _ => (commercial_shape, 0.03, 0.25),
            };
            let shift = rng.random_range(-jitter_h..jitter_h);
            let scale = rng.random_range(0.9..1.0);
            let mut ar = 0.0;
            for (k, v) in values.iter_mut().enumerate() {
                let h = hours((k as f64 + 0.5) * resolution_s) - shift;
                let e: f64 = rng.random_range(-1.0..1.0);
                ar = 0.9 * ar + noise * e;
                *v = (scale * shape(h.rem_euclid(24.0)) * (1.0 + ar)).clamp(0.0, 1.0);
            }
        }
    }
    Profile {
        step_s: resolution_s,
        values,
    }
}

/// Seed for the profile of one site, derived from the scenario seed.
pub fn site_seed(scenario_seed: u64, bus: u32, kind: ProfileKind) -> u64 {
    let mut x = scenario_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(u64::from(bus) << 8)
        .wrapping_add(kind as u64);
    // splitmix64 finalizer
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pv_is_dark_at_night_and_peaks_midday() {
        for seed in 0..20 {
            let p = generate_profiles(ProfileKind::Pv, MINUTE_S, seed);
            assert_eq!(p.values.len(), 1440);
            assert_eq!(p.at(0.0), 0.0);
            assert_eq!(p.at(23.5 * 3600.0), 0.0);
            let (k, _) = p
                .values
                .iter()
                .enumerate()
                .fold((0, -1.0), |b, (k, v)| if *v > b.1 { (k, *v) } else { b });
            let h = k as f64 / 60.0;
            assert!((11.0..=14.0).contains(&h), "peak at {h}");
        }
    }

    #[test]
    fn loads_are_bounded_and_seeded() {
        for kind in [ProfileKind::Residential, ProfileKind::Commercial] {
            let a = generate_profiles(kind, MINUTE_S, 3);
            let b = generate_profiles(kind, MINUTE_S, 3);
            let c = generate_profiles(kind, MINUTE_S, 4);
            assert_eq!(a, b);
            assert_ne!(a, c);
            assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let com = generate_profiles(ProfileKind::Commercial, MINUTE_S, 1);
        assert!(com.at(12.0 * 3600.0) > 2.0 * com.at(3.0 * 3600.0));
    }

    #[test]
    fn step_hold_and_wrap() {
        let p = Profile {
            step_s: 60.0,
            values: vec![1.0, 2.0],
        };
        assert_eq!(p.at(59.9), 1.0);
        assert_eq!(p.at(60.0), 2.0);
        assert_eq!(p.at(120.0), 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let p = generate_profiles(ProfileKind::Residential, 600.0, 9).scaled(5.0);
        p.write_csv(&path).unwrap();
        let q = Profile::load_csv(&path).unwrap();
        assert_eq!(p.step_s, q.step_s);
        for (a, b) in p.values.iter().zip(&q.values) {
            assert_eq!(a, b);
        }
        std::fs::write(&path, "0,1\n60,-2\n").unwrap();
        assert!(Profile::load_csv(&path).is_err());
    }
}
