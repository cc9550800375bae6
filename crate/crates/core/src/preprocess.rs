//! Deterministic volume preprocessing: masking, min-max normalisation,
//! Gaussian denoising, noise estimation, centre crop/pad, quality control and
//! synchronised pair augmentation.

use ndarray::{Array3, Axis, Zip};
use rand::Rng;

use crate::error::{Result, TafError};
use crate::volume::{IntensityTag, Volume};

pub const DEFAULT_SIGMA: f64 = 0.5;
pub const DEFAULT_TAU: f32 = 0.5;
/// Minimum brain voxel count at a 128³ grid.
pub const MIN_NONZERO_128: usize = 100_000;
pub const MAX_ANGLE_DEG: f64 = 5.0;
pub const SCALE_RANGE: (f64, f64) = (0.95, 1.05);

#[derive(Clone, Debug, PartialEq)]
pub struct BrainMask {
    mask: Array3<u8>,
    nonzero_count: usize,
}

impl BrainMask {
    pub fn from_array(mask: Array3<u8>) -> Result<Self> {
        if mask.iter().any(|&m| m > 1) {
            return Err(TafError::Data("mask entries must be 0 or 1".into()));
        }
        let nonzero_count = mask.iter().filter(|&&m| m == 1).count();
        Ok(Self { mask, nonzero_count })
    }

    /// Voxels with a strictly positive value.
    pub fn from_positive(v: &Volume) -> Self {
        let mask = v.data().mapv(|x| u8::from(x > 0.0));
        let nonzero_count = mask.iter().filter(|&&m| m == 1).count();
        Self { mask, nonzero_count }
    }

    pub fn mask(&self) -> &Array3<u8> {
        &self.mask
    }

    pub fn nonzero_count(&self) -> usize {
        self.nonzero_count
    }

    pub fn contains(&self, idx: [usize; 3]) -> bool {
        self.mask[idx] == 1
    }
}

/// Produces a brain probability map from a raw volume.
pub trait ExtractorStage {
    fn name(&self) -> &str;
    fn apply(&self, v: &Volume) -> Result<Volume>;
}

/// Aligns a volume to a template.
pub trait RegistrationStage {
    fn name(&self) -> &str;
    fn apply(&self, v: &Volume, template: &Volume) -> Result<Volume>;
}

/// Probability 1 wherever the intensity is positive.
#[derive(Clone, Copy, Debug, Default)]
pub struct ThresholdExtractor;

impl ExtractorStage for ThresholdExtractor {
    fn name(&self) -> &str {
        "threshold"
    }

    fn apply(&self, v: &Volume) -> Result<Volume> {
        v.with_data(v.data().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }), IntensityTag::Unit)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityRegistration;

impl RegistrationStage for IdentityRegistration {
    fn name(&self) -> &str {
        "identity"
    }

    fn apply(&self, v: &Volume, _template: &Volume) -> Result<Volume> {
        Ok(v.clone())
    }
}

fn check_same_shape(a: &Volume, b: &Volume, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TafError::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Thresholds the probability map `p` at `tau` and zeroes `v` outside it.
pub fn apply_mask(v: &Volume, p: &Volume, tau: f32) -> Result<(BrainMask, Volume)> {
    check_same_shape(v, p, "apply_mask")?;
    if p.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(TafError::Data("probability map outside [0, 1]".into()));
    }
    let mask = BrainMask::from_array(p.data().mapv(|x| u8::from(x > tau)))?;
    let out = Zip::from(v.data()).and(mask.mask()).map_collect(|&x, &m| if m == 1 { x } else { 0.0 });
    let tag = if out.iter().all(|x| (0.0..=1.0).contains(x)) { v.tag() } else { IntensityTag::Raw };
    Ok((mask, v.with_data(out, tag)?))
}

/// Maps brain voxels (`v > 0`) linearly onto `[0, 1]` using their own
/// minimum and maximum; background stays exactly 0.
pub fn minmax_normalize(v: &Volume) -> Result<Volume> {
    let brain = v.data().iter().copied().filter(|&x| x > 0.0);
    let (lo, hi) = brain.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if lo > hi {
        return Err(TafError::DegenerateIntensity("no voxel above zero".into()));
    }
    if lo == hi {
        return Err(TafError::DegenerateIntensity("constant brain".into()));
    }
    let (lo, range) = (lo as f64, (hi - lo) as f64);
    let out = v.data().mapv(|x| {
        if x > 0.0 {
            (((x as f64 - lo) / range) as f32).clamp(0.0, 1.0)
        } else {
            0.0
        }
    });
    v.with_data(out, IntensityTag::Unit)
}

/// Normalised one-dimensional Gaussian on `[-r, r]`, `r = ⌈3σ⌉`. The 3D
/// kernel is the outer product of three copies and therefore also sums to 1.
pub fn gaussian_kernel_1d(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(TafError::Param(format!("sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / s).collect())
}

/// Dense `(2r+1)³` kernel.
pub fn gaussian_kernel_3d(sigma: f64) -> Result<Array3<f64>> {
    let k = gaussian_kernel_1d(sigma)?;
    let n = k.len();
    Ok(Array3::from_shape_fn((n, n, n), |(a, b, c)| k[a] * k[b] * k[c]))
}

fn convolve_axis(src: &Array3<f64>, k: &[f64], axis: usize) -> Array3<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = Array3::zeros(src.raw_dim());
    Zip::from(out.lanes_mut(Axis(axis))).and(src.lanes(Axis(axis))).for_each(|mut o, s| {
        let n = s.len() as isize;
        for i in 0..n {
            let mut acc = 0.0;
            for (j, &w) in k.iter().enumerate() {
                let p = i + j as isize - r;
                if (0..n).contains(&p) {
                    acc += w * s[p as usize];
                }
            }
            o[i as usize] = acc;
        }
    });
    out
}

/// Separable Gaussian smoothing with zero padding, then every voxel outside
/// `mask` is reset to exactly 0.
pub fn gaussian_denoise_masked(v: &Volume, mask: &BrainMask, sigma: f64) -> Result<Volume> {
    if v.tag() != IntensityTag::Unit {
        return Err(TafError::Data("denoising expects a normalised (unit) volume".into()));
    }
    if mask.mask().shape() != v.data().shape() {
        return Err(TafError::Shape("mask shape differs from volume".into()));
    }
    let k = gaussian_kernel_1d(sigma)?;
    let mut x = v.data().mapv(|x| x as f64);
    for axis in 0..3 {
        x = convolve_axis(&x, &k, axis);
    }
    let out = Zip::from(&x).and(mask.mask()).map_collect(|&s, &m| if m == 1 { (s as f32).clamp(0.0, 1.0) } else { 0.0 });
    v.with_data(out, IntensityTag::Unit)
}

/// [`gaussian_denoise_masked`] with the background taken as the voxels that
/// are exactly 0 before smoothing.
pub fn gaussian_denoise(v: &Volume, sigma: f64) -> Result<Volume> {
    gaussian_denoise_masked(v, &BrainMask::from_positive(v), sigma)
}

/// `sqrt(mean(Var ∇x, Var ∇y, Var ∇z))` over forward differences, with
/// population variances.
pub fn noise_estimate(v: &Volume) -> Result<f64> {
    if v.shape().iter().any(|&s| s < 2) {
        return Err(TafError::Shape(format!("noise estimate needs ≥ 2 voxels per axis, got {:?}", v.shape())));
    }
    let x = v.data().mapv(|x| x as f64);
    let mut total = 0.0;
    for axis in 0..3 {
        let n = x.len_of(Axis(axis));
        let hi = x.slice_axis(Axis(axis), (1..n).into());
        let lo = x.slice_axis(Axis(axis), (0..n - 1).into());
        let d = &hi - &lo;
        let mean = d.mean().unwrap();
        total += d.mapv(|g| (g - mean) * (g - mean)).mean().unwrap();
    }
    Ok((total / 3.0).max(0.0).sqrt())
}

/// Per-axis centre crop (dropping `⌊(s−t)/2⌋` leading voxels) or zero pad
/// (`⌊(t−s)/2⌋` before, `⌈(t−s)/2⌉` after).
pub fn center_crop_pad(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.contains(&0) {
        return Err(TafError::Param(format!("target extent {target:?} must be ≥ 1")));
    }
    let s = v.shape();
    let offset = |a: usize| s[a] as isize - target[a] as isize;
    let start: [isize; 3] = [0, 1, 2].map(|a| offset(a) / 2);
    let src = v.data();
    let out = Array3::from_shape_fn(target, |(z, y, x)| {
        let p = [z as isize + start[0], y as isize + start[1], x as isize + start[2]];
        if (0..3).all(|a| (0..s[a] as isize).contains(&p[a])) {
            src[[p[0] as usize, p[1] as usize, p[2] as usize]]
        } else {
            0.0
        }
    });
    v.with_data(out, v.tag())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QcReport {
    pub dims_ok: bool,
    pub range_ok: bool,
    pub brain_fraction_ok: bool,
    pub nonzero_count: usize,
    pub flags: Vec<String>,
}

impl QcReport {
    pub fn passed(&self) -> bool {
        self.dims_ok && self.range_ok && self.brain_fraction_ok
    }
}

/// Default minimum nonzero count, scaled from the 128³ threshold by voxel count.
pub fn default_min_nonzero(shape: [usize; 3]) -> usize {
    let n: usize = shape.iter().product();
    ((MIN_NONZERO_128 as f64) * n as f64 / (128.0f64.powi(3))).round() as usize
}

pub fn qc_check(v: &Volume, expected_shape: [usize; 3], min_nonzero: usize) -> QcReport {
    let dims_ok = v.shape() == expected_shape;
    let range_ok = v.data().iter().all(|x| (0.0..=1.0).contains(x));
    let nonzero_count = v.count_nonzero();
    let brain_fraction_ok = nonzero_count >= min_nonzero;
    let mut flags = Vec::new();
    if !dims_ok {
        flags.push(format!("dims {:?} != {:?}", v.shape(), expected_shape));
    }
    if !range_ok {
        flags.push("intensity outside [0,1]".to_string());
    }
    if !brain_fraction_ok {
        flags.push(format!("nonzero {nonzero_count} < {min_nonzero}"));
    }
    QcReport { dims_ok, range_ok, brain_fraction_ok, nonzero_count, flags }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    /// Mirror along the last (left-right) axis.
    pub flip: bool,
    /// Rotations about the three axes, degrees.
    pub angles_deg: [f64; 3],
    pub intensity_scale: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self { flip: false, angles_deg: [0.0; 3], intensity_scale: 1.0 }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let flip = rng.random_bool(0.5);
        let angles_deg = [0; 3].map(|_| rng.random_range(-MAX_ANGLE_DEG..=MAX_ANGLE_DEG));
        let intensity_scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        Self { flip, angles_deg, intensity_scale }
    }

    /// Applies flip, then rotation about the grid centre with trilinear
    /// resampling (zero outside), then intensity scaling. Unit-tagged volumes
    /// are clipped back into `[0, 1]`.
    pub fn apply(&self, v: &Volume) -> Result<Volume> {
        let mut data = v.data().clone();
        if self.flip {
            data.invert_axis(Axis(2));
            data = data.as_standard_layout().into_owned();
        }
        if self.angles_deg.iter().any(|&a| a != 0.0) {
            data = rotate(&data, self.angles_deg);
        }
        if self.intensity_scale != 1.0 {
            let s = self.intensity_scale as f32;
            let unit = v.tag() == IntensityTag::Unit;
            data.mapv_inplace(|x| if unit { (x * s).clamp(0.0, 1.0) } else { x * s });
        }
        v.with_data(data, v.tag())
    }
}

fn rotation_matrix(angles_deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [a, b, c] = angles_deg.map(f64::to_radians);
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| p[i][k] * q[k][j]).sum();
            }
        }
        r
    };
    mul(rz, mul(ry, rx))
}

/// Trilinear sample at a continuous index; zero outside the grid.
pub fn trilinear(src: &Array3<f32>, p: [f64; 3]) -> f64 {
    let s = src.shape();
    let base = p.map(f64::floor);
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let mut acc = 0.0;
    for corner in 0..8 {
        let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let i = base[a] as isize + off[a] as isize;
            w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            if i < 0 || i >= s[a] as isize {
                inside = false;
            } else {
                idx[a] = i as usize;
            }
        }
        if inside && w != 0.0 {
            acc += w * src[idx] as f64;
        }
    }
    acc
}

fn rotate(src: &Array3<f32>, angles_deg: [f64; 3]) -> Array3<f32> {
    let r = rotation_matrix(angles_deg);
    let s = src.shape();
    let c = [0, 1, 2].map(|a| (s[a] as f64 - 1.0) / 2.0);
    Array3::from_shape_fn((s[0], s[1], s[2]), |(z, y, x)| {
        let d = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
        // Inverse mapping: source = Rᵀ·d + c.
        let q = [0, 1, 2].map(|i| (0..3).map(|k| r[k][i] * d[k]).sum::<f64>() + c[i]);
        trilinear(src, q) as f32
    })
}

/// Augments a baseline/follow-up pair with one shared draw of parameters.
/// With `enabled = false` the inputs are returned unchanged.
pub fn augment_pair(bl: &Volume, fu: &Volume, rng: &mut impl Rng, enabled: bool) -> Result<(Volume, Volume, AugmentParams)> {
    check_same_shape(bl, fu, "augment_pair")?;
    if !enabled {
        return Ok((bl.clone(), fu.clone(), AugmentParams::identity()));
    }
    let params = AugmentParams::sample(rng);
    Ok((params.apply(bl)?, params.apply(fu)?, params))
}

#[derive(Clone, Debug)]
pub struct PreprocessConfig {
    pub target_grid: usize,
    pub sigma: f64,
    pub mask_tau: f32,
    /// `None` scales the 128³ default to the target grid.
    pub min_nonzero: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { target_grid: 32, sigma: DEFAULT_SIGMA, mask_tau: DEFAULT_TAU, min_nonzero: None }
    }
}

#[derive(Clone, Debug)]
pub struct PreprocessOutcome {
    pub volume: Volume,
    pub qc: QcReport,
    pub noise_before: f64,
    pub noise_after: f64,
}

/// Extraction, masking, registration, normalisation, denoising and centre
/// crop/pad followed by QC. A constant brain is reported through QC rather
/// than as an error.
pub fn run_pipeline(
    raw: &Volume,
    extractor: &dyn ExtractorStage,
    registration: &dyn RegistrationStage,
    template: &Volume,
    cfg: &PreprocessConfig,
) -> Result<PreprocessOutcome> {
    let target = [cfg.target_grid; 3];
    let min_nonzero = cfg.min_nonzero.unwrap_or_else(|| default_min_nonzero(target));
    let prob = extractor.apply(raw)?;
    let (_, brain) = apply_mask(raw, &prob, cfg.mask_tau)?;
    let registered = registration.apply(&brain, template)?;
    let mask = BrainMask::from_positive(&registered);
    let normalized = match minmax_normalize(&registered) {
        Ok(v) => v,
        Err(TafError::DegenerateIntensity(why)) => {
            let volume = center_crop_pad(&Volume::zeros(registered.shape()).with_tag(IntensityTag::Unit)?, target)?;
            let mut qc = qc_check(&volume, target, min_nonzero);
            qc.brain_fraction_ok = false;
            qc.flags.push(why);
            return Ok(PreprocessOutcome { volume, qc, noise_before: 0.0, noise_after: 0.0 });
        }
        Err(e) => return Err(e),
    };
    let noise_before = noise_estimate(&normalized)?;
    let smoothed = gaussian_denoise_masked(&normalized, &mask, cfg.sigma)?;
    let noise_after = noise_estimate(&smoothed)?;
    let volume = center_crop_pad(&smoothed, target)?;
    let qc = qc_check(&volume, target, min_nonzero);
    Ok(PreprocessOutcome { volume, qc, noise_before, noise_after })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vol(shape: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        Volume::raw(Array3::from_shape_fn(shape, |(z, y, x)| f(z, y, x))).unwrap()
    }

    #[test]
    fn mask_all_and_none() {
        let v = vol([3, 3, 3], |z, y, x| (z + y + x) as f32 + 1.0);
        let p = vol([3, 3, 3], |_, _, _| 0.6);
        let (m, out) = apply_mask(&v, &p, 0.5).unwrap();
        assert_eq!(m.nonzero_count(), 27);
        assert_eq!(out.data(), v.data());
        let p0 = vol([3, 3, 3], |_, _, _| 0.0);
        let (m, out) = apply_mask(&v, &p0, 0.5).unwrap();
        assert_eq!(m.nonzero_count(), 0);
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mask_errors() {
        let v = vol([3, 3, 3], |_, _, _| 1.0);
        assert!(matches!(apply_mask(&v, &vol([2, 3, 3], |_, _, _| 0.5), 0.5), Err(TafError::Shape(_))));
        assert!(matches!(apply_mask(&v, &vol([3, 3, 3], |_, _, _| 1.5), 0.5), Err(TafError::Data(_))));
    }

    #[test]
    fn minmax_three_values() {
        let v = vol([1, 1, 5], |_, _, x| [2.0, 0.0, 4.0, 6.0, 0.0][x]);
        let out = minmax_normalize(&v).unwrap();
        assert_eq!(out.data().as_slice().unwrap(), &[0.0, 0.0, 0.5, 1.0, 0.0]);
        assert_eq!(out.tag(), IntensityTag::Unit);
    }

    #[test]
    fn minmax_degenerate_inputs() {
        assert!(matches!(minmax_normalize(&Volume::zeros([2, 2, 2])), Err(TafError::DegenerateIntensity(_))));
        let c = vol([2, 2, 2], |_, _, _| 3.0);
        assert!(matches!(minmax_normalize(&c), Err(TafError::DegenerateIntensity(_))));
    }

    #[test]
    fn kernel_radius_and_sum() {
        let k = gaussian_kernel_1d(0.5).unwrap();
        assert_eq!(k.len(), 5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(gaussian_kernel_1d(0.0).is_err());
        assert!(gaussian_kernel_1d(-1.0).is_err());
    }

    #[test]
    fn background_next_to_brain_is_reset() {
        let v = vol([5, 5, 5], |z, y, x| if z == 2 && y == 2 && x < 3 { 1.0 } else { 0.0 });
        let v = v.with_tag(IntensityTag::Unit).unwrap();
        let out = gaussian_denoise(&v, 0.5).unwrap();
        assert_eq!(out.data()[[2, 2, 3]], 0.0);
        assert_eq!(out.data()[[2, 1, 1]], 0.0);
        assert!(out.data()[[2, 2, 1]] > 0.0);
    }

    #[test]
    fn denoise_requires_unit_volume() {
        let v = vol([3, 3, 3], |_, _, _| 2.0);
        assert!(gaussian_denoise(&v, 0.5).is_err());
    }

    #[test]
    fn crop_pad_examples() {
        let v = vol([130, 1, 1], |z, _, _| z as f32);
        let c = center_crop_pad(&v, [128, 1, 1]).unwrap();
        assert_eq!(c.data()[[0, 0, 0]], 1.0);
        assert_eq!(c.data()[[127, 0, 0]], 128.0);
        let v = vol([125, 1, 1], |z, _, _| z as f32 + 1.0);
        let p = center_crop_pad(&v, [128, 1, 1]).unwrap();
        assert_eq!(p.data()[[0, 0, 0]], 0.0);
        assert_eq!(p.data()[[1, 0, 0]], 1.0);
        assert_eq!(p.data()[[125, 0, 0]], 125.0);
        assert_eq!(p.data()[[126, 0, 0]], 0.0);
        assert_eq!(p.data()[[127, 0, 0]], 0.0);
    }

    #[test]
    fn qc_flags() {
        let good = vol([4, 4, 4], |_, _, _| 0.5);
        assert!(qc_check(&good, [4, 4, 4], 64).passed());
        let hot = vol([4, 4, 4], |z, _, _| if z == 0 { 1.2 } else { 0.5 });
        let r = qc_check(&hot, [4, 4, 4], 1);
        assert!(!r.range_ok && !r.passed());
        assert!(!qc_check(&good, [4, 4, 5], 1).dims_ok);
        assert!(!qc_check(&good, [4, 4, 4], 65).brain_fraction_ok);
    }

    #[test]
    fn default_threshold_scales_with_grid() {
        assert_eq!(default_min_nonzero([128; 3]), 100_000);
        assert_eq!(default_min_nonzero([64; 3]), 12_500);
        assert_eq!(default_min_nonzero([32; 3]), 1_563);
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let v = vol([4, 4, 4], |z, y, x| (z * 16 + y * 4 + x) as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b, p) = augment_pair(&v, &v, &mut rng, false).unwrap();
        assert_eq!(a.to_bytes(), v.to_bytes());
        assert_eq!(b.to_bytes(), v.to_bytes());
        assert_eq!(p, AugmentParams::identity());
    }

    #[test]
    fn flip_only_matches_reversal() {
        let v = vol([3, 4, 5], |z, y, x| (z * 20 + y * 5 + x) as f32);
        let p = AugmentParams { flip: true, angles_deg: [0.0; 3], intensity_scale: 1.0 };
        let out = p.apply(&v).unwrap();
        for ((z, y, x), &val) in out.data().indexed_iter() {
            assert_eq!(val, v.data()[[z, y, 4 - x]]);
        }
    }

    #[test]
    fn trilinear_at_nodes_is_exact() {
        let a = Array3::from_shape_fn((3, 3, 3), |(z, y, x)| (z * 9 + y * 3 + x) as f32);
        assert_eq!(trilinear(&a, [1.0, 2.0, 0.0]), 15.0);
        assert_eq!(trilinear(&a, [0.5, 0.0, 0.0]), 4.5);
        assert_eq!(trilinear(&a, [-1.0, 0.0, 0.0]), 0.0);
    }
}
