//! Synthetic symmetric scenes with known ground truth, and the noise and
//! occlusion protocols applied to them.

use nalgebra::{DMatrix, Matrix2x3, Quaternion, UnitQuaternion, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CameraPose, ObservationSet, PerImageShapeSet, SymmetryOp, MIN_VISIBLE_PER_IMAGE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of images.
    pub n: usize,
    /// Number of symmetric keypoint pairs.
    pub p: usize,
    /// Shape rank. The first basis is the mean shape with coefficient 1.
    pub k: usize,
    /// Range of the weak-perspective scale.
    pub scale_range: [f64; 2],
    /// Standard deviation of the deformation coefficients.
    pub deform_scale: f64,
    /// Noise level relative to the largest keypoint distance.
    pub noise_s: f64,
    pub occlusion_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 20,
            p: 8,
            k: 2,
            scale_range: [1.0, 1.0],
            deform_scale: 0.3,
            noise_s: 0.0,
            occlusion_rate: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.k == 0 || self.n < 2 * self.k {
            return bad(format!("need K >= 1 and N >= 2K, got N={} K={}", self.n, self.k));
        }
        if self.p < 4 {
            return bad(format!("need at least 4 keypoint pairs, got {}", self.p));
        }
        if !(0.0..0.5).contains(&self.occlusion_rate) {
            return bad(format!("occlusion rate {} outside [0, 0.5)", self.occlusion_rate));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("invalid scale range [{lo}, {hi}]"));
        }
        if !(self.deform_scale >= 0.0 && self.deform_scale.is_finite()) || !(self.noise_s >= 0.0) {
            return bad("deformation and noise levels must be non-negative".into());
        }
        Ok(())
    }
}

/// Clean observations together with the ground truth that produced them.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub obs: ObservationSet,
    pub poses: Vec<CameraPose>,
    /// Half shapes `S_n`; the mirror half of image `n` is `A · S_n`.
    pub shapes: PerImageShapeSet,
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix2x3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let unit = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    unit.to_rotation_matrix().matrix().fixed_rows::<2>(0).into_owned()
}

/// `3 × P` basis with its in-plane coordinates centered and unit Frobenius norm.
fn random_basis(rng: &mut ChaCha8Rng, p: usize, mean_shape: bool) -> DMatrix<f64> {
    let mut b = DMatrix::from_fn(3, p, |_, _| StandardNormal.sample(rng));
    if mean_shape {
        // Keep the half shape on one side of the mirror plane.
        b.row_mut(0).apply(|x: &mut f64| *x = x.abs() + 0.1);
    }
    for r in 1..3 {
        let mean = b.row(r).mean();
        b.row_mut(r).add_scalar_mut(-mean);
    }
    let norm = b.norm();
    b / norm
}

/// Draws a random symmetric non-rigid scene. Deterministic per `cfg.seed`.
///
/// Noise and occlusion settings in `cfg` are ignored here; see [`synthesize`].
pub fn generate_scene(cfg: &SynthConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, p, k) = (cfg.n, cfg.p, cfg.k);
    let mut v = DMatrix::zeros(3 * k, p);
    for j in 0..k {
        v.rows_mut(3 * j, 3).copy_from(&random_basis(&mut rng, p, j == 0));
    }
    let mut z = DMatrix::zeros(n, k);
    for i in 0..n {
        z[(i, 0)] = 1.0;
        for j in 1..k {
            let g: f64 = StandardNormal.sample(&mut rng);
            z[(i, j)] = g * cfg.deform_scale;
        }
    }
    let shapes = PerImageShapeSet::from_bases(z, v)?;
    let translation = Normal::new(0.0, 0.5).expect("positive deviation");
    let a = SymmetryOp::x().matrix();
    let mut y = DMatrix::zeros(2 * n, p);
    let mut y_dag = DMatrix::zeros(2 * n, p);
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        let r = random_rotation(&mut rng);
        let [lo, hi] = cfg.scale_range;
        let c = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let t = Vector2::new(translation.sample(&mut rng), translation.sample(&mut rng));
        let s = shapes.shape(i);
        let cam = DMatrix::from_iterator(2, 3, (r * c).iter().copied());
        let cam_dag = DMatrix::from_iterator(2, 3, (r * a * c).iter().copied());
        let mut proj = &cam * &s;
        let mut proj_dag = &cam_dag * &s;
        for mut col in proj.column_iter_mut().chain(proj_dag.column_iter_mut()) {
            col += t;
        }
        y.rows_mut(2 * i, 2).copy_from(&proj);
        y_dag.rows_mut(2 * i, 2).copy_from(&proj_dag);
        poses.push(CameraPose::new(r, c, t));
    }
    Ok(SyntheticScene { obs: ObservationSet::fully_visible(y, y_dag)?, poses, shapes })
}

/// Largest distance between two visible keypoints of the same image, over all images.
pub fn max_keypoint_distance(obs: &ObservationSet) -> f64 {
    let p = obs.n_points();
    let mut best: f64 = 0.0;
    for i in 0..obs.n_images() {
        let pts: Vec<Vector2<f64>> = (0..p)
            .filter(|&j| obs.vis[(i, j)])
            .map(|j| Vector2::new(obs.y[(2 * i, j)], obs.y[(2 * i + 1, j)]))
            .chain(
                (0..p)
                    .filter(|&j| obs.vis_dag[(i, j)])
                    .map(|j| Vector2::new(obs.y_dag[(2 * i, j)], obs.y_dag[(2 * i + 1, j)])),
            )
            .collect();
        for (a, pa) in pts.iter().enumerate() {
            for pb in &pts[a + 1..] {
                best = best.max((pa - pb).norm());
            }
        }
    }
    best
}

/// Adds i.i.d. Gaussian noise of deviation `s · d_max` to every visible entry.
pub fn add_noise(obs: &ObservationSet, s: f64, seed: u64) -> ObservationSet {
    let mut out = obs.clone();
    if s <= 0.0 {
        return out;
    }
    let sigma = s * max_keypoint_distance(obs);
    let normal = Normal::new(0.0, sigma).expect("finite deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (data, vis) in [(&mut out.y, &obs.vis), (&mut out.y_dag, &obs.vis_dag)] {
        for j in 0..data.ncols() {
            for r in 0..data.nrows() {
                if vis[(r / 2, j)] {
                    data[(r, j)] += normal.sample(&mut rng);
                }
            }
        }
    }
    out
}

/// Hides each (image, point, half) entry independently with probability `rate`.
///
/// Images that would fall below the visibility floor get randomly chosen entries
/// restored until they meet it; their indices are returned alongside.
pub fn apply_occlusion(obs: &ObservationSet, rate: f64, seed: u64) -> (ObservationSet, Vec<usize>) {
    let mut out = obs.clone();
    let (n, p) = obs.vis.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adjusted = Vec::new();
    let floor = MIN_VISIBLE_PER_IMAGE.min(2 * p);
    for i in 0..n {
        for j in 0..p {
            if rng.random_bool(rate.clamp(0.0, 1.0)) {
                out.vis[(i, j)] = false;
            }
            if rng.random_bool(rate.clamp(0.0, 1.0)) {
                out.vis_dag[(i, j)] = false;
            }
        }
        if out.visible_count(i) < floor {
            adjusted.push(i);
            log::warn!("image {i}: occlusion reduced to keep {floor} visible keypoints");
            while out.visible_count(i) < floor {
                let slot = rng.random_range(0..2 * p);
                if slot < p {
                    out.vis[(i, slot)] = true;
                } else {
                    out.vis_dag[(i, slot - p)] = true;
                }
            }
        }
        for j in 0..p {
            for d in 0..2 {
                if !out.vis[(i, j)] {
                    out.y[(2 * i + d, j)] = 0.0;
                }
                if !out.vis_dag[(i, j)] {
                    out.y_dag[(2 * i + d, j)] = 0.0;
                }
            }
        }
    }
    (out, adjusted)
}

/// Scene plus the observations after the configured occlusion and noise.
/// Occlusion uses seed `cfg.seed + 1` and noise `cfg.seed + 2`.
pub fn synthesize(cfg: &SynthConfig) -> Result<(SyntheticScene, ObservationSet)> {
    let scene = generate_scene(cfg)?;
    let (occluded, _) = apply_occlusion(&scene.obs, cfg.occlusion_rate, cfg.seed.wrapping_add(1));
    let noisy = add_noise(&occluded, cfg.noise_s, cfg.seed.wrapping_add(2));
    Ok((scene, noisy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sorted_svd;

    #[test]
    fn rigid_scene_when_deformation_is_zero() {
        let cfg = SynthConfig { deform_scale: 0.0, ..SynthConfig::default() };
        let scene = generate_scene(&cfg).unwrap();
        let first = scene.shapes.shape(0);
        for i in 1..cfg.n {
            assert_eq!(scene.shapes.shape(i), first);
        }
    }

    #[test]
    fn mirror_odd_part_has_rank_at_most_k() {
        let cfg = SynthConfig { k: 3, p: 10, ..SynthConfig::default() };
        let scene = generate_scene(&cfg).unwrap();
        let l = (&scene.obs.y - &scene.obs.y_dag) * 0.5;
        let sv = sorted_svd(&l).s;
        assert!(sv[cfg.k] <= 1e-12 * sv[0]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig { noise_s: 0.05, occlusion_rate: 0.2, seed: 11, ..SynthConfig::default() };
        let (a, oa) = synthesize(&cfg).unwrap();
        let (b, ob) = synthesize(&cfg).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(a.shapes, b.shapes);
        assert_eq!(a.poses, b.poses);
    }

    #[test]
    fn zero_noise_is_identity() {
        let scene = generate_scene(&SynthConfig::default()).unwrap();
        assert_eq!(add_noise(&scene.obs, 0.0, 3), scene.obs);
    }

    #[test]
    fn noise_deviation_matches_request() {
        let cfg = SynthConfig { n: 400, p: 10, ..SynthConfig::default() };
        let scene = generate_scene(&cfg).unwrap();
        let noisy = add_noise(&scene.obs, 0.03, 5);
        let diff: Vec<f64> = (&noisy.y - &scene.obs.y).iter().chain((&noisy.y_dag - &scene.obs.y_dag).iter()).copied().collect();
        assert!(diff.len() >= 10_000);
        let mean = diff.iter().sum::<f64>() / diff.len() as f64;
        let std = (diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diff.len() as f64).sqrt();
        let target = 0.03 * max_keypoint_distance(&scene.obs);
        assert!((std - target).abs() <= 0.05 * target, "std {std} vs {target}");
    }

    #[test]
    fn occlusion_rate_and_floor() {
        let cfg = SynthConfig { n: 50, p: 8, ..SynthConfig::default() };
        let scene = generate_scene(&cfg).unwrap();
        let (none, _) = apply_occlusion(&scene.obs, 0.0, 1);
        assert!(none.is_fully_visible());
        let (occ, _) = apply_occlusion(&scene.obs, 0.2, 1);
        assert!((occ.occluded_fraction() - 0.2).abs() <= 0.03);
        let (heavy, _) = apply_occlusion(&scene.obs, 0.49, 2);
        assert!((0..cfg.n).all(|i| heavy.visible_count(i) >= MIN_VISIBLE_PER_IMAGE));
    }

    #[test]
    fn max_distance_is_the_same_on_either_half() {
        let scene = generate_scene(&SynthConfig::default()).unwrap();
        let swapped = ObservationSet::fully_visible(scene.obs.y_dag.clone(), scene.obs.y.clone()).unwrap();
        assert!((max_keypoint_distance(&swapped) - max_keypoint_distance(&scene.obs)).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate_scene(&SynthConfig { n: 3, k: 2, ..SynthConfig::default() }).is_err());
        assert!(generate_scene(&SynthConfig { p: 3, ..SynthConfig::default() }).is_err());
        assert!(generate_scene(&SynthConfig { occlusion_rate: 0.5, ..SynthConfig::default() }).is_err());
    }
}
