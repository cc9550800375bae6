//! Phantom longitudinal cohorts. Every head is a sphere with an ellipsoidal
//! ventricle and two spherical hippocampal blobs. Converters show ventricle
//! expansion and hippocampal shrinkage proportional to the scan interval;
//! stable subjects differ between scans only by noise.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::cohort::{Cohort, PairRecord, INTERVALS};
use crate::error::{io_err, Result, TafError};
use crate::rng::SeededRng;
use crate::volume::Volume;

const TISSUE: f64 = 0.7;
const CSF_DROP: f64 = 0.5;
const HIPPO_BOOST: f64 = 0.25;
/// Voxels whose soft brain indicator falls below this are background.
const SUPPORT: f64 = 0.05;
const MIN_BRAIN_INTENSITY: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhantomSpec {
    pub grid: usize,
    pub brain_radius_frac: f64,
    /// Ventricle semi-axes `(z, y, x)` as fractions of the brain radius.
    pub ventricle_axes_frac: [f64; 3],
    pub hippocampus_offset_frac: f64,
    pub hippocampus_radius_frac: f64,
    pub noise_sigma: f64,
    /// Relative growth of the ventricle semi-axes per month in converters.
    pub converter_expansion_rate: f64,
    /// Relative shrinkage of the hippocampal radius per month in converters.
    pub converter_shrink_rate: f64,
    pub baseline_matched: bool,
    /// Half-width of the uniform per-subject anatomical scale jitter.
    pub anatomy_jitter: f64,
    /// Extra ventricle scale of converters at baseline when not matched.
    pub unmatched_offset: f64,
    /// Relative ventricle volume excess of the AD-like pretraining class.
    pub pretrain_separation: f64,
    /// Width of the sigmoidal tissue boundaries, voxels.
    pub edge_width: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid: 32,
            brain_radius_frac: 0.8,
            ventricle_axes_frac: [0.25, 0.2, 0.3],
            hippocampus_offset_frac: 0.45,
            hippocampus_radius_frac: 0.16,
            noise_sigma: 0.03,
            converter_expansion_rate: 0.01,
            converter_shrink_rate: 0.005,
            baseline_matched: true,
            anatomy_jitter: 0.15,
            unmatched_offset: 0.2,
            pretrain_separation: 1.0,
            edge_width: 0.5,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [
            self.brain_radius_frac,
            self.ventricle_axes_frac[0],
            self.ventricle_axes_frac[1],
            self.ventricle_axes_frac[2],
            self.hippocampus_offset_frac,
            self.hippocampus_radius_frac,
        ];
        if fracs.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(TafError::Param("geometry fractions must lie in (0, 1)".into()));
        }
        if self.converter_expansion_rate < 0.0 || self.converter_shrink_rate < 0.0 || self.noise_sigma < 0.0 {
            return Err(TafError::Param("rates and noise must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.anatomy_jitter) || self.edge_width <= 0.0 {
            return Err(TafError::Param("jitter must lie in [0, 1) and edge width be positive".into()));
        }
        let r = self.brain_radius_frac * self.grid as f64 / 2.0;
        let smallest = self.ventricle_axes_frac.iter().cloned().fold(f64::INFINITY, f64::min) * r;
        if self.grid < 8 || r + 2.0 * self.edge_width > self.grid as f64 / 2.0 || smallest * (1.0 - self.anatomy_jitter) < 1.0 {
            return Err(TafError::Param(format!("grid {} too small for the phantom geometry", self.grid)));
        }
        if self.hippocampus_radius_frac * r * (1.0 - self.anatomy_jitter) < 1.0 {
            return Err(TafError::Param(format!("grid {} too small for the hippocampal blobs", self.grid)));
        }
        Ok(())
    }
}

/// Geometry of one scan, in voxels.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhantomGeometry {
    pub brain_radius: f64,
    pub ventricle_axes: [f64; 3],
    pub hippocampus_radius: f64,
}

impl PhantomGeometry {
    pub fn ventricle_volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.ventricle_axes.iter().product::<f64>()
    }

    pub fn ventricle_center(grid: usize) -> [f64; 3] {
        let c = (grid as f64 - 1.0) / 2.0;
        [c; 3]
    }

    /// Centres of the left and right hippocampal blobs.
    pub fn hippocampus_centers(&self, spec: &PhantomSpec) -> [[f64; 3]; 2] {
        let c = (spec.grid as f64 - 1.0) / 2.0;
        let r0 = spec.brain_radius_frac * spec.grid as f64 / 2.0;
        let lateral = spec.hippocampus_offset_frac * r0;
        let below = 0.3 * r0;
        [[c - below, c, c - lateral], [c - below, c, c + lateral]]
    }

    /// Geometry after `months` of conversion.
    pub fn progressed(&self, spec: &PhantomSpec, months: f64) -> PhantomGeometry {
        let grow = 1.0 + spec.converter_expansion_rate * months;
        let shrink = (1.0 - spec.converter_shrink_rate * months).max(0.1);
        PhantomGeometry {
            brain_radius: self.brain_radius,
            ventricle_axes: self.ventricle_axes.map(|a| a * grow),
            hippocampus_radius: self.hippocampus_radius * shrink,
        }
    }
}

fn soft(d: f64, width: f64) -> f64 {
    1.0 / (1.0 + (-d / width).exp())
}

/// Renders one noisy phantom. Background is exactly 0; every brain voxel is
/// strictly positive.
pub fn render(spec: &PhantomSpec, geo: &PhantomGeometry, rng: &mut impl Rng) -> Result<Volume> {
    let g = spec.grid;
    let c = (g as f64 - 1.0) / 2.0;
    let hip = geo.hippocampus_centers(spec);
    let va = geo.ventricle_axes;
    let v_scale = (va[0] * va[1] * va[2]).cbrt();
    let w = spec.edge_width;
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| TafError::Param(e.to_string()))?;
    let mut data = Array3::<f32>::zeros((g, g, g));
    for ((z, y, x), out) in data.indexed_iter_mut() {
        let p = [z as f64, y as f64, x as f64];
        let r = ((p[0] - c).powi(2) + (p[1] - c).powi(2) + (p[2] - c).powi(2)).sqrt();
        let brain = soft(geo.brain_radius - r, w);
        if brain < SUPPORT {
            continue;
        }
        let rho = (0..3).map(|a| ((p[a] - c) / va[a]).powi(2)).sum::<f64>().sqrt();
        let vent = soft((1.0 - rho) * v_scale, w);
        let hippo = hip
            .iter()
            .map(|h| {
                let d = ((p[0] - h[0]).powi(2) + (p[1] - h[1]).powi(2) + (p[2] - h[2]).powi(2)).sqrt();
                soft(geo.hippocampus_radius - d, w)
            })
            .fold(0.0, f64::max);
        let mut v = brain * (TISSUE - CSF_DROP * vent + HIPPO_BOOST * hippo);
        if spec.noise_sigma > 0.0 {
            v += noise.sample(rng);
        }
        *out = v.max(MIN_BRAIN_INTENSITY) as f32;
    }
    Volume::raw(data)
}

#[derive(Clone, Debug)]
pub struct SyntheticSubject {
    pub id: String,
    pub label: u8,
    pub baseline: Volume,
    pub baseline_geometry: PhantomGeometry,
    /// `(interval months, volume, geometry)` per follow-up.
    pub followups: Vec<(u32, Volume, PhantomGeometry)>,
}

#[derive(Clone, Debug)]
pub struct SyntheticCohort {
    pub spec: PhantomSpec,
    pub seed: u64,
    pub intervals: Vec<u32>,
    pub converter_fraction: f64,
    pub subjects: Vec<SyntheticSubject>,
}

impl SyntheticCohort {
    pub fn n_pairs(&self) -> usize {
        self.subjects.iter().map(|s| s.followups.len()).sum()
    }
}

fn baseline_geometry(spec: &PhantomSpec, converter: bool, rng: &mut impl Rng) -> PhantomGeometry {
    let r0 = spec.brain_radius_frac * spec.grid as f64 / 2.0;
    let j = spec.anatomy_jitter;
    let brain_radius = r0 * (1.0 + rng.random_range(-0.25 * j..=0.25 * j));
    let mut v_scale = 1.0 + rng.random_range(-j..=j);
    let h_scale = 1.0 + rng.random_range(-0.5 * j..=0.5 * j);
    if converter && !spec.baseline_matched {
        v_scale *= 1.0 + spec.unmatched_offset;
    }
    PhantomGeometry {
        brain_radius,
        ventricle_axes: spec.ventricle_axes_frac.map(|f| f * r0 * v_scale),
        hippocampus_radius: spec.hippocampus_radius_frac * r0 * h_scale,
    }
}

/// Builds the cohort in memory. Labels are assigned by shuffling with `rng`;
/// subject `i` then draws from its own stream seeded with `seed + 1 + i`.
pub fn synthesize_cohort(
    spec: &PhantomSpec,
    n_subjects: usize,
    converter_fraction: f64,
    intervals: &[u32],
    rng: &mut SeededRng,
) -> Result<SyntheticCohort> {
    spec.validate()?;
    if n_subjects < 4 {
        return Err(TafError::Param("need at least 4 subjects".into()));
    }
    if !(converter_fraction > 0.0 && converter_fraction < 1.0) {
        return Err(TafError::Param("converter fraction must lie in (0, 1)".into()));
    }
    if intervals.is_empty() || intervals.iter().any(|i| !INTERVALS.contains(i)) {
        return Err(TafError::Param(format!("intervals {intervals:?} must be a non-empty subset of {{6,12,24}}")));
    }
    let mut intervals = intervals.to_vec();
    intervals.sort_unstable();
    intervals.dedup();
    let n_conv = ((n_subjects as f64 * converter_fraction).round() as usize).clamp(1, n_subjects - 1);
    let mut labels: Vec<u8> = (0..n_subjects).map(|i| u8::from(i < n_conv)).collect();
    labels.shuffle(rng);
    let seed = rng.seed();
    let subjects = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut srng = SeededRng::new(seed.wrapping_add(1 + i as u64));
            let geo = baseline_geometry(spec, label == 1, &mut srng);
            let baseline = render(spec, &geo, &mut srng)?;
            let mut followups = Vec::new();
            for &m in &intervals {
                let fg = if label == 1 { geo.progressed(spec, m as f64) } else { geo.clone() };
                followups.push((m, render(spec, &fg, &mut srng)?, fg));
            }
            Ok(SyntheticSubject { id: format!("sub-{i:04}"), label, baseline, baseline_geometry: geo, followups })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCohort { spec: spec.clone(), seed, intervals, converter_fraction, subjects })
}

#[derive(Serialize)]
struct SpecEcho<'a> {
    generator: &'static str,
    seed: u64,
    rng: &'static str,
    n_subjects: usize,
    converter_fraction: f64,
    intervals: &'a [u32],
    spec: &'a PhantomSpec,
}

/// Writes volumes under `dir/volumes`, `manifest.csv`, `truth.csv` with the
/// ground-truth geometry, and `spec.json`. Returns the written cohort.
pub fn write_cohort(cohort: &SyntheticCohort, dir: impl AsRef<Path>) -> Result<Cohort> {
    let dir = dir.as_ref();
    let vol_dir = dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(io_err(&vol_dir))?;
    let mut pairs = Vec::new();
    let mut truth = String::from("subject_id,scan,label,brain_radius,ventricle_a,ventricle_b,ventricle_c,hippocampus_radius\n");
    let mut row = |id: &str, scan: &str, label: u8, g: &PhantomGeometry| {
        truth.push_str(&format!(
            "{id},{scan},{label},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            g.brain_radius, g.ventricle_axes[0], g.ventricle_axes[1], g.ventricle_axes[2], g.hippocampus_radius
        ));
    };
    for s in &cohort.subjects {
        let bl: PathBuf = vol_dir.join(format!("{}_bl.tafvol", s.id));
        s.baseline.write(&bl)?;
        row(&s.id, "bl", s.label, &s.baseline_geometry);
        for (m, v, g) in &s.followups {
            let fu = vol_dir.join(format!("{}_m{m:02}.tafvol", s.id));
            v.write(&fu)?;
            row(&s.id, &format!("m{m:02}"), s.label, g);
            pairs.push(PairRecord {
                subject_id: s.id.clone(),
                baseline: bl.clone(),
                followup: fu,
                interval_months: *m,
                label: s.label,
            });
        }
    }
    let cohort_out = Cohort::new(pairs)?;
    cohort_out.write_manifest(dir.join("manifest.csv"))?;
    let truth_path = dir.join("truth.csv");
    fs::write(&truth_path, truth).map_err(io_err(&truth_path))?;
    let echo = SpecEcho {
        generator: "phantom-v1",
        seed: cohort.seed,
        rng: crate::rng::ALGORITHM,
        n_subjects: cohort.subjects.len(),
        converter_fraction: cohort.converter_fraction,
        intervals: &cohort.intervals,
        spec: &cohort.spec,
    };
    let spec_path = dir.join("spec.json");
    let json = serde_json::to_string_pretty(&echo).map_err(|e| TafError::Format(e.to_string()))?;
    fs::write(&spec_path, json).map_err(io_err(&spec_path))?;
    Ok(cohort_out)
}

/// Generates the cohort and writes it to `dir`.
pub fn generate_cohort(
    spec: &PhantomSpec,
    n_subjects: usize,
    converter_fraction: f64,
    intervals: &[u32],
    rng: &mut SeededRng,
    dir: impl AsRef<Path>,
) -> Result<(Cohort, SyntheticCohort)> {
    let synth = synthesize_cohort(spec, n_subjects, converter_fraction, intervals, rng)?;
    let cohort = write_cohort(&synth, dir)?;
    Ok((cohort, synth))
}

#[derive(Clone, Debug)]
pub struct PretrainItem {
    pub volume: Volume,
    /// 1 = AD-like (enlarged ventricle), 0 = CN-like.
    pub label: u8,
    pub geometry: PhantomGeometry,
}

/// Single volumes for encoder pretraining, built as matched pairs: both
/// members share the anatomical draw and the AD-like one has its ventricle
/// volume scaled by `1 + pretrain_separation`.
pub fn generate_pretrain_set(spec: &PhantomSpec, n: usize, rng: &mut SeededRng) -> Result<Vec<PretrainItem>> {
    spec.validate()?;
    if spec.pretrain_separation < 0.0 {
        return Err(TafError::Param("pretrain separation must be non-negative".into()));
    }
    let axis_scale = (1.0 + spec.pretrain_separation).cbrt();
    let seed = rng.seed();
    let items: Vec<Vec<PretrainItem>> = (0..n.div_ceil(2))
        .into_par_iter()
        .map(|k| {
            let mut srng = SeededRng::new(seed.wrapping_add(1 + k as u64));
            let cn = baseline_geometry(spec, false, &mut srng);
            let ad = PhantomGeometry { ventricle_axes: cn.ventricle_axes.map(|a| a * axis_scale), ..cn.clone() };
            let first = PretrainItem { volume: render(spec, &cn, &mut srng)?, label: 0, geometry: cn };
            let second = PretrainItem { volume: render(spec, &ad, &mut srng)?, label: 1, geometry: ad };
            Ok(vec![first, second])
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<PretrainItem> = items.into_iter().flatten().collect();
    out.truncate(n);
    Ok(out)
}
