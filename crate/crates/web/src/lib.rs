//! wasm-bindgen entry points for the static demo page in `www/`.
//!
//! The plain functions do the work and are tested natively; the exported
//! wrappers only convert arguments and results.

use toa_nav::config::ExperimentConfig;
use toa_nav::experiment::{self, Estimator};
use toa_nav::synth::TrajectoryKind;
use toa_nav::toa_sim::{simulate, NoiseModel, Scenario, Sequence};
use wasm_bindgen::prelude::*;

/// Longest trajectory the page may request, seconds.
pub const MAX_DURATION_S: f64 = 120.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Tracks {
    /// Interleaved x, y pairs.
    pub truth: Vec<f64>,
    pub eskf: Vec<f64>,
    pub pgo: Vec<f64>,
    /// `[ate, e_x, e_y, e_z, rpe_t, rpe_r_deg]` for ESKF then PGO.
    pub metrics: Vec<f64>,
}

fn xy<'a>(points: impl Iterator<Item = &'a nalgebra::Vector3<f64>>) -> Vec<f64> {
    points.flat_map(|p| [p.x, p.y]).collect()
}

pub fn run_tracks(kind: &str, scenario: &str, bs_count: usize, seed: u64, duration_s: f64) -> Result<Tracks, String> {
    let mut cfg = ExperimentConfig::default();
    cfg.input.synthetic.kind = kind.parse::<TrajectoryKind>().map_err(|e| e.to_string())?;
    cfg.input.synthetic.duration_s = duration_s.clamp(1.0, MAX_DURATION_S);
    cfg.input.synthetic.imu_noise = true;
    cfg.stations.count = bs_count;
    // No monotonic clock on wasm32-unknown-unknown.
    cfg.run.record_timing = false;
    cfg.validate().map_err(|e| e.to_string())?;
    let scenario: Scenario = scenario.parse()?;

    let inputs = experiment::load_inputs(&cfg, seed).map_err(|e| e.to_string())?;
    let toa = experiment::simulate_toa(&cfg, &inputs.gt, scenario, seed).map_err(|e| e.to_string())?;
    let mut metrics = Vec::with_capacity(12);
    let mut tracks = Vec::with_capacity(2);
    for e in [Estimator::Eskf, Estimator::Pgo] {
        let r = experiment::estimate(&cfg, &inputs, &toa, scenario, bs_count, e).map_err(|e| e.to_string())?;
        let m = &r.report;
        metrics.extend([m.ate, m.e_x, m.e_y, m.e_z, m.rpe_t, m.rpe_r_deg]);
        tracks.push(xy(r.trajectory.iter().map(|p| &p.position)));
    }
    let pgo = tracks.pop().unwrap_or_default();
    let eskf = tracks.pop().unwrap_or_default();
    Ok(Tracks {
        truth: xy(inputs.gt.iter().map(|g| &g.position)),
        eskf,
        pgo,
        metrics,
    })
}

/// Histogram of simulated range errors for one station. Returns the bin
/// counts followed by `[lo, hi]`, with the range spanning ±4σ about the mean.
pub fn noise_histogram(scenario: &str, bs_id: u32, samples: usize, bins: usize, seed: u64) -> Result<Vec<f64>, String> {
    let scenario: Scenario = scenario.parse()?;
    let stations = toa_nav::toa_sim::reference_stations();
    let idx = stations
        .iter()
        .position(|s| s.id == bs_id)
        .ok_or_else(|| format!("no base station {bs_id}"))?;
    if samples == 0 || bins == 0 {
        return Err("samples and bins must be positive".into());
    }
    let model = NoiseModel::preset(scenario, Sequence::V101, seed);
    let station = [stations[idx].clone()];
    let single = NoiseModel {
        mean: vec![model.mean[idx]],
        std: vec![model.std[idx]],
        seed,
    };
    // A still receiver sampled at 1 Hz gives one draw per second.
    let p = nalgebra::Vector3::new(0.0, 0.0, 1.5);
    let pose = |t: i64| toa_nav::dataset::GroundTruthPose {
        t,
        position: p,
        orientation: toa_nav::geometry::Quat::identity(),
        velocity: None,
        bias_gyro: None,
        bias_accel: None,
    };
    let gt = [pose(0), pose((samples as i64 - 1) * 1_000_000_000)];
    let sim = simulate(&gt, &station, &single, 1.0).map_err(|e| e.to_string())?;
    let truth = (p - station[0].position).norm();

    let spread = 4.0 * single.std[0].max(1e-3);
    let (lo, hi) = (single.mean[0] - spread, single.mean[0] + spread);
    let width = (hi - lo) / bins as f64;
    let mut out = vec![0.0; bins];
    for m in &sim.measurements {
        let e = m.distance - truth;
        if e >= lo && e < hi {
            out[((e - lo) / width) as usize] += 1.0;
        }
    }
    out.extend([lo, hi]);
    Ok(out)
}

#[wasm_bindgen]
pub struct RunResult {
    inner: Tracks,
}

#[wasm_bindgen]
impl RunResult {
    pub fn truth(&self) -> Vec<f64> {
        self.inner.truth.clone()
    }

    pub fn eskf(&self) -> Vec<f64> {
        self.inner.eskf.clone()
    }

    pub fn pgo(&self) -> Vec<f64> {
        self.inner.pgo.clone()
    }

    pub fn metrics(&self) -> Vec<f64> {
        self.inner.metrics.clone()
    }
}

/// Runs both estimators on a synthetic trajectory.
#[wasm_bindgen]
pub fn run(kind: &str, scenario: &str, bs_count: usize, seed: u64, duration_s: f64) -> Result<RunResult, JsError> {
    run_tracks(kind, scenario, bs_count, seed, duration_s)
        .map(|inner| RunResult { inner })
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn histogram(scenario: &str, bs_id: u32, samples: usize, bins: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    noise_histogram(scenario, bs_id, samples, bins, seed).map_err(|e| JsError::new(&e))
}

/// Reference station positions as interleaved x, y, z.
#[wasm_bindgen]
pub fn stations() -> Vec<f64> {
    toa_nav::toa_sim::REFERENCE_STATIONS.iter().flatten().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracks_have_matching_shapes() {
        let t = run_tracks("circle", "mmmagic_78ghz", 5, 1, 4.0).unwrap();
        assert_eq!(t.metrics.len(), 12);
        assert!(t.truth.len() % 2 == 0 && t.truth.len() > 100);
        assert!(!t.eskf.is_empty() && !t.pgo.is_empty());
        assert!(t.metrics.iter().all(|m| m.is_finite() && *m >= 0.0));
        // Five stations and mmMAGIC noise keep both estimators well under a meter.
        assert!(t.metrics[0] < 1.0 && t.metrics[6] < 1.0);
    }

    #[test]
    fn bad_names_are_errors() {
        assert!(run_tracks("spiral", "mmmagic_78ghz", 5, 0, 2.0).is_err());
        assert!(run_tracks("circle", "lte", 5, 0, 2.0).is_err());
        assert!(run_tracks("circle", "mmmagic_78ghz", 1, 0, 2.0).is_err());
        assert!(noise_histogram("industrial_5ghz", 9, 10, 10, 0).is_err());
    }

    #[test]
    fn histogram_matches_preset_moments() {
        let n = 20_000;
        let bins = 80;
        let h = noise_histogram("industrial_5ghz", 1, n, bins, 5).unwrap();
        let (lo, hi) = (h[bins], h[bins + 1]);
        let counts = &h[..bins];
        let total: f64 = counts.iter().sum();
        // ±4σ keeps all but about 6e-5 of a Gaussian.
        assert!(total >= 0.999 * n as f64);
        let width = (hi - lo) / bins as f64;
        let centre = |i: usize| lo + (i as f64 + 0.5) * width;
        let mean = counts.iter().enumerate().map(|(i, c)| c * centre(i)).sum::<f64>() / total;
        let var = counts.iter().enumerate().map(|(i, c)| c * (centre(i) - mean).powi(2)).sum::<f64>() / total;
        assert!((mean - 0.129).abs() < 0.03, "{mean}");
        assert!((var.sqrt() - 0.568).abs() < 0.03, "{}", var.sqrt());
    }

    #[test]
    fn stations_are_flattened() {
        let s = stations();
        assert_eq!(s.len(), 15);
        assert_eq!(&s[..3], &[-10.0, -7.0, 2.0]);
    }
}
