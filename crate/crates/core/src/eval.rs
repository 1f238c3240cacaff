//! Reconstruction error metrics and the noise-sweep experiment.
//!
//! Shapes are compared after per-axis normalization and per-image Procrustes
//! alignment; cameras after removing one gauge transform shared by all images.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix2x3, Matrix3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::model::{full_symmetric_shape, CameraPose};
use crate::numerics::procrustes_rotation;
use crate::pipeline::{reconstruct, Method, MethodConfig};
use crate::synth::{synthesize, SynthConfig};

fn axis_std(row: nalgebra::DVectorView<'_, f64>) -> f64 {
    let n = row.len() as f64;
    let mean = row.sum() / n;
    (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// `3 S / (σx + σy + σz)` with population standard deviations over the points.
pub fn normalize_shape(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    dim_check(s.nrows() == 3 && s.ncols() > 0, || format!("expected a 3 x P shape, got {:?}", s.shape()))?;
    let total: f64 = (0..3).map(|i| axis_std(s.row(i).transpose().as_view())).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateInput("shape has coincident points".into()));
    }
    Ok(s * (3.0 / total))
}

fn centered(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = s.clone();
    for i in 0..3 {
        let m = out.row(i).mean();
        out.row_mut(i).add_scalar_mut(-m);
    }
    out
}

/// Mean point distance after rotating the estimate onto the truth and normalizing both.
///
/// The per-axis normalization depends on the frame a shape is expressed in,
/// so the estimate is brought into the truth's frame before it is normalized.
/// The rotation is then re-estimated on the normalized pair.
fn aligned_distance(est: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<f64> {
    let to_dyn = |r: Matrix3<f64>| DMatrix::from_iterator(3, 3, r.iter().copied());
    let g = centered(&normalize_shape(gt)?);
    let e = centered(est);
    let e = to_dyn(procrustes_rotation(&e, &g)?) * e;
    let e = normalize_shape(&e)?;
    let diff = to_dyn(procrustes_rotation(&e, &g)?) * e - g;
    Ok(diff.column_iter().map(|c| c.norm()).sum::<f64>() / diff.ncols() as f64)
}

/// Per-image shape errors.
///
/// Orthographic reconstructions are determined only up to a depth reflection
/// shared by all images. Both chiralities are scored and the better one kept.
pub fn shape_errors(est: &[DMatrix<f64>], gt: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    dim_check(est.len() == gt.len(), || format!("{} estimated shapes for {} references", est.len(), gt.len()))?;
    let flip = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1.0, -1.0]));
    let direct: Vec<f64> = est.iter().zip(gt).map(|(e, g)| aligned_distance(e, g)).collect::<Result<_>>()?;
    let mirrored: Vec<f64> = est.iter().zip(gt).map(|(e, g)| aligned_distance(&(&flip * e), g)).collect::<Result<_>>()?;
    Ok(if mirrored.iter().sum::<f64>() < direct.iter().sum::<f64>() { mirrored } else { direct })
}

/// Mean distance per point over all images, both halves included.
pub fn shape_error(est: &[DMatrix<f64>], gt: &[DMatrix<f64>]) -> Result<f64> {
    let errs = shape_errors(est, gt)?;
    if errs.is_empty() {
        return Ok(0.0);
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Orthogonal polar factor `U Vᵀ`.
fn polar(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    svd.u.expect("u requested") * svd.v_t.expect("v requested")
}

/// Orthogonal `G` minimizing `Σ_n ‖R_n G − R*_n‖_F`.
///
/// Minimizes the sum of unsquared distances (the quantity being reported) by
/// iteratively reweighted Procrustes, so a few badly estimated cameras do not
/// pull the gauge away from the well estimated majority. Reflections are
/// allowed because the reconstruction's chirality is not observable.
pub fn rotation_gauge(est: &[Matrix2x3<f64>], gt: &[Matrix2x3<f64>]) -> Matrix3<f64> {
    let solve = |weights: &[f64]| -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        for ((e, g), w) in est.iter().zip(gt).zip(weights) {
            m += e.transpose() * g * *w;
        }
        polar(&m)
    };
    let mut g = solve(&vec![1.0; est.len()]);
    for _ in 0..200 {
        let weights: Vec<f64> = est.iter().zip(gt).map(|(e, t)| 1.0 / (e * g - t).norm().max(1e-12)).collect();
        let next = solve(&weights);
        let change = (next - g).norm();
        g = next;
        if change <= 1e-15 {
            break;
        }
    }
    g
}

/// Per-image camera errors after removing the shared gauge.
pub fn rotation_errors(est: &[CameraPose], gt: &[CameraPose]) -> Result<Vec<f64>> {
    dim_check(est.len() == gt.len(), || format!("{} estimated poses for {} references", est.len(), gt.len()))?;
    let e: Vec<Matrix2x3<f64>> = est.iter().map(|p| p.r).collect();
    let t: Vec<Matrix2x3<f64>> = gt.iter().map(|p| p.r).collect();
    let g = rotation_gauge(&e, &t);
    Ok(e.iter().zip(&t).map(|(e, t)| (e * g - t).norm()).collect())
}

pub fn rotation_error(est: &[CameraPose], gt: &[CameraPose]) -> Result<f64> {
    let errs = rotation_errors(est, gt)?;
    if errs.is_empty() {
        return Ok(0.0);
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupErrors {
    pub group: String,
    pub count: usize,
    pub e_s_mean: f64,
    pub e_s_median: f64,
    pub e_r_mean: f64,
    pub e_r_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageErrors {
    pub index: usize,
    pub group: String,
    pub e_s: f64,
    pub e_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub e_r_mean: f64,
    pub e_r_median: f64,
    pub e_s_mean: f64,
    pub e_s_median: f64,
    /// Errors per group label, in label order.
    pub groups: Vec<GroupErrors>,
    pub per_image: Vec<ImageErrors>,
}

/// Scores a reconstruction against ground truth. `groups` labels each image;
/// pass an empty slice to put every image in one unnamed group.
pub fn evaluate(
    est_shapes: &[DMatrix<f64>],
    gt_shapes: &[DMatrix<f64>],
    est_poses: &[CameraPose],
    gt_poses: &[CameraPose],
    groups: &[String],
) -> Result<ErrorReport> {
    let n = est_shapes.len();
    dim_check(groups.is_empty() || groups.len() == n, || format!("{} group labels for {n} images", groups.len()))?;
    let es = shape_errors(est_shapes, gt_shapes)?;
    let er = rotation_errors(est_poses, gt_poses)?;
    dim_check(er.len() == n, || "pose and shape counts differ".into())?;
    let label = |i: usize| groups.get(i).cloned().unwrap_or_default();
    let per_image: Vec<ImageErrors> = (0..n).map(|i| ImageErrors { index: i, group: label(i), e_s: es[i], e_r: er[i] }).collect();
    let mut by_group: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for img in &per_image {
        let entry = by_group.entry(img.group.clone()).or_default();
        entry.0.push(img.e_s);
        entry.1.push(img.e_r);
    }
    let groups = by_group
        .into_iter()
        .map(|(group, (s, r))| GroupErrors {
            group,
            count: s.len(),
            e_s_mean: mean(&s),
            e_s_median: median(&s),
            e_r_mean: mean(&r),
            e_r_median: median(&r),
        })
        .collect();
    Ok(ErrorReport { e_r_mean: mean(&er), e_r_median: median(&er), e_s_mean: mean(&es), e_s_median: median(&es), groups, per_image })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Scene settings; the noise level and seed are overridden per cell.
    pub scene: SynthConfig,
    pub s_values: Vec<f64>,
    pub methods: Vec<Method>,
    pub repetitions: usize,
    pub method: MethodConfig,
}

/// Results of one (method, noise level) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: Method,
    pub s: f64,
    /// Per-repetition mean errors; failed runs are absent.
    pub e_s: Vec<f64>,
    pub e_r: Vec<f64>,
    pub failures: usize,
}

impl SweepCell {
    pub fn e_s_mean(&self) -> Option<f64> {
        (!self.e_s.is_empty()).then(|| mean(&self.e_s))
    }

    pub fn e_r_mean(&self) -> Option<f64> {
        (!self.e_r.is_empty()).then(|| mean(&self.e_r))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub s_values: Vec<f64>,
    pub methods: Vec<Method>,
    /// Method-major, then noise level.
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, method: Method, s: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.method == method && c.s == s)
    }
}

/// Runs one synthetic repetition and returns its `(e_S, e_R)`.
pub fn run_single(scene: &SynthConfig, method: Method, cfg: &MethodConfig) -> Result<(f64, f64)> {
    let (truth, obs) = synthesize(scene)?;
    let rec = reconstruct(&obs, method, cfg)?;
    let gt: Vec<DMatrix<f64>> = (0..truth.shapes.n_images()).map(|n| full_symmetric_shape(&truth.shapes.shape(n))).collect();
    Ok((shape_error(&rec.shapes, &gt)?, rotation_error(&rec.poses, &truth.poses)?))
}

/// Repetition `r` uses scene seed `scene.seed + r` at every noise level, so the
/// scenes, occlusions and noise draws are shared across the grid and only the
/// noise amplitude changes.
pub fn run_noise_sweep(cfg: &SweepConfig) -> SweepTable {
    let jobs: Vec<(usize, usize, usize)> = (0..cfg.methods.len())
        .flat_map(|m| (0..cfg.s_values.len()).flat_map(move |s| (0..cfg.repetitions).map(move |r| (m, s, r))))
        .collect();
    let results: Vec<((usize, usize), Option<(f64, f64)>)> = jobs
        .par_iter()
        .map(|&(m, s, r)| {
            let scene = SynthConfig { noise_s: cfg.s_values[s], seed: cfg.scene.seed.wrapping_add(r as u64), ..cfg.scene };
            let out = run_single(&scene, cfg.methods[m], &cfg.method);
            if let Err(e) = &out {
                log::warn!("{} at s={} rep {r}: {e}", cfg.methods[m], cfg.s_values[s]);
            }
            ((m, s), out.ok())
        })
        .collect();
    let mut cells: Vec<SweepCell> = Vec::new();
    for (m, &method) in cfg.methods.iter().enumerate() {
        for (s, &sv) in cfg.s_values.iter().enumerate() {
            let mut cell = SweepCell { method, s: sv, e_s: Vec::new(), e_r: Vec::new(), failures: 0 };
            for (_, out) in results.iter().filter(|(key, _)| *key == (m, s)) {
                match out {
                    Some((es, er)) => {
                        cell.e_s.push(*es);
                        cell.e_r.push(*er);
                    }
                    None => cell.failures += 1,
                }
            }
            cells.push(cell);
        }
    }
    SweepTable { s_values: cfg.s_values.clone(), methods: cfg.methods.clone(), cells }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, Rotation3, Unit, Vector3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stds(s: &DMatrix<f64>) -> [f64; 3] {
        std::array::from_fn(|i| axis_std(s.row(i).transpose().as_view()))
    }

    fn random_shape(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(3, p, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Unit::new_normalize(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
        *Rotation3::from_axis_angle(&axis, rng.random_range(-3.0..3.0)).matrix()
    }

    fn rotate(q: &Matrix3<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_iterator(3, 3, q.iter().copied()) * s
    }

    fn pose(q: &Matrix3<f64>) -> CameraPose {
        CameraPose::from_rotation(q)
    }

    #[test]
    fn unit_deviation_shapes_are_left_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = random_shape(&mut rng, 12);
        for i in 0..3 {
            let sd = axis_std(s.row(i).transpose().as_view());
            s.row_mut(i).unscale_mut(sd);
        }
        let out = normalize_shape(&s).unwrap();
        assert!((out - s).amax() <= 1e-12);
    }

    #[test]
    fn normalization_ignores_scale_and_sums_deviations_to_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s = random_shape(&mut rng, 10);
            let out = normalize_shape(&s).unwrap();
            assert!((stds(&out).iter().sum::<f64>() - 3.0).abs() <= 1e-12);
            assert!((normalize_shape(&(&s * 7.0)).unwrap() - &out).amax() <= 1e-12);
        }
        let coincident = DMatrix::from_element(3, 4, 0.5);
        assert!(matches!(normalize_shape(&coincident), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn identical_and_rotated_shapes_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt: Vec<DMatrix<f64>> = (0..5).map(|_| random_shape(&mut rng, 16)).collect();
        assert!(shape_error(&gt, &gt).unwrap() <= 1e-14);
        let rotated: Vec<DMatrix<f64>> = gt.iter().map(|s| rotate(&random_rotation(&mut rng), s)).collect();
        assert!(shape_error(&rotated, &gt).unwrap() <= 1e-10);
    }

    /// Normalized, centered truth made of point pairs `a ± d` whose members lie
    /// `gap` apart, and the estimate with every pair swapped. The estimate is a
    /// permutation of the truth, so normalization and centering leave it alone,
    /// and the alignment cross-covariance `2 Σ (a aᵀ − d dᵀ)` is symmetric
    /// positive definite, so the best rotation is the identity.
    fn swapped_pairs(rng: &mut ChaCha8Rng, pairs: usize, gap: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let anchors = random_shape(rng, pairs);
        let dirs: Vec<Vector3<f64>> =
            (0..pairs).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize()).collect();
        let build = |half: f64, swap: bool| {
            let mut s = DMatrix::zeros(3, 2 * pairs);
            for i in 0..pairs {
                let d = dirs[i] * if swap { -half } else { half };
                s.set_column(2 * i, &(anchors.column(i) + d));
                s.set_column(2 * i + 1, &(anchors.column(i) - d));
            }
            s
        };
        // Normalization rescales the gap too; iterate the half-width to its fixed point.
        let mut half = gap / 2.0;
        for _ in 0..100 {
            let total: f64 = stds(&build(half, false)).iter().sum();
            half = gap / 2.0 * total / 3.0;
        }
        let scale = 3.0 / stds(&build(half, false)).iter().sum::<f64>();
        (centered(&(build(half, false) * scale)), centered(&(build(half, true) * scale)))
    }

    #[test]
    fn swapped_pairs_score_their_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (gt, est) = swapped_pairs(&mut rng, 10, 0.1);
        let gaps: Vec<f64> = (0..20).map(|j| (est.column(j) - gt.column(j)).norm()).collect();
        assert!(gaps.iter().all(|g| (g - 0.1).abs() <= 1e-12));
        assert!((shape_error(&[est.clone()], &[gt.clone()]).unwrap() - 0.1).abs() <= 1e-6);
        let moved = rotate(&random_rotation(&mut rng), &(&est * 4.5));
        assert!((shape_error(&[moved], &[gt]).unwrap() - 0.1).abs() <= 1e-6);
    }

    #[test]
    fn one_global_gauge_is_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qs: Vec<Matrix3<f64>> = (0..8).map(|_| random_rotation(&mut rng)).collect();
        let gt: Vec<CameraPose> = qs.iter().map(pose).collect();
        assert!(rotation_error(&gt, &gt).unwrap() <= 1e-14);
        let g = random_rotation(&mut rng);
        let est: Vec<CameraPose> = qs.iter().map(|q| pose(&(q * g))).collect();
        assert!(rotation_error(&est, &gt).unwrap() <= 1e-10);
        let independent: Vec<CameraPose> = qs.iter().map(|q| pose(&(q * random_rotation(&mut rng)))).collect();
        assert!(rotation_error(&independent, &gt).unwrap() > 0.1);
    }

    #[test]
    fn single_in_plane_perturbation_matches_the_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 10;
        let theta = 10f64.to_radians();
        let gt: Vec<CameraPose> = (0..n).map(|_| pose(&random_rotation(&mut rng))).collect();
        let mut est = gt.clone();
        let turn = Matrix2::new(theta.cos(), -theta.sin(), theta.sin(), theta.cos());
        est[3].r = turn * gt[3].r;
        let expected = 2.0 * 2f64.sqrt() * (theta / 2.0).sin() / n as f64;
        assert!((rotation_error(&est, &gt).unwrap() - expected).abs() <= 1e-6);
    }

    #[test]
    fn report_aggregates_by_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt: Vec<DMatrix<f64>> = (0..4).map(|_| random_shape(&mut rng, 6)).collect();
        let est: Vec<DMatrix<f64>> = gt.iter().map(|s| s + DMatrix::from_fn(3, 6, |_, _| rng.random_range(-0.1..0.1))).collect();
        let qs: Vec<CameraPose> = (0..4).map(|_| pose(&random_rotation(&mut rng))).collect();
        let noisy: Vec<CameraPose> = qs.iter().map(|p| pose(&(p.q_completion() * random_rotation(&mut rng)))).collect();
        let labels: Vec<String> = ["b", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let report = evaluate(&est, &gt, &noisy, &qs, &labels).unwrap();
        assert_eq!(report.groups.iter().map(|g| (g.group.as_str(), g.count)).collect::<Vec<_>>(), vec![("a", 1), ("b", 3)]);
        let es: Vec<f64> = report.per_image.iter().map(|i| i.e_s).collect();
        let lo = es.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = es.iter().copied().fold(0.0, f64::max);
        assert!(report.e_s_median >= lo && report.e_s_median <= hi);
        assert!(report.per_image.iter().all(|i| i.e_s >= 0.0 && i.e_r >= 0.0));
        assert_eq!(report.groups[0].e_s_mean, es[1]);
        assert!(evaluate(&est, &gt, &noisy, &qs, &labels[..2]).is_err());
    }

    #[test]
    fn noise_free_sweep_column_equals_a_direct_fit() {
        let scene = SynthConfig { seed: 40, ..SynthConfig::default() };
        let method = MethodConfig { k: 2, ..MethodConfig::default() };
        let cfg = SweepConfig {
            scene,
            s_values: vec![0.0],
            methods: vec![Method::SymPriorFree],
            repetitions: 1,
            method,
        };
        let table = run_noise_sweep(&cfg);
        let cell = table.cell(Method::SymPriorFree, 0.0).unwrap();
        let (es, er) = run_single(&scene, Method::SymPriorFree, &method).unwrap();
        assert_eq!((cell.e_s[0], cell.e_r[0], cell.failures), (es, er, 0));
    }

    #[test]
    fn more_noise_gives_larger_mean_shape_error() {
        let cfg = SweepConfig {
            scene: SynthConfig { seed: 100, ..SynthConfig::default() },
            s_values: vec![0.03, 0.07],
            methods: vec![Method::SymPriorFree],
            repetitions: 10,
            method: MethodConfig { k: 2, ..MethodConfig::default() },
        };
        let table = run_noise_sweep(&cfg);
        let low = table.cell(Method::SymPriorFree, 0.03).unwrap();
        let high = table.cell(Method::SymPriorFree, 0.07).unwrap();
        assert_eq!(low.failures + high.failures, 0);
        assert!(high.e_s_mean().unwrap() >= low.e_s_mean().unwrap());
    }

    proptest! {
        #[test]
        fn shape_error_ignores_rotation_and_scale_of_the_estimate(seed in any::<u64>(), scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_shape(&mut rng, 8);
            let est = &gt + DMatrix::from_fn(3, 8, |_, _| rng.random_range(-0.2..0.2));
            let base = shape_error(&[est.clone()], &[gt.clone()]).unwrap();
            let moved = rotate(&random_rotation(&mut rng), &(&est * scale));
            let again = shape_error(&[moved.clone()], &[gt.clone()]).unwrap();
            prop_assert!((again - base).abs() <= 1e-9);
            prop_assert_eq!(shape_error(&[moved], &[gt]).unwrap(), again);
        }
    }
}
