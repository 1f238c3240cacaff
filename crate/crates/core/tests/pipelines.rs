//! End-to-end runs of every estimator through the public API.

use nalgebra::DMatrix;
use symnrsfm::dataset::Dataset;
use symnrsfm::eval::{rotation_error, shape_error};
use symnrsfm::model::full_symmetric_shape;
use symnrsfm::pipeline::{reconstruct, Method, MethodConfig};
use symnrsfm::synth::{synthesize, SynthConfig, SyntheticScene};
use symnrsfm::Error;

fn truth(scene: &SyntheticScene) -> Vec<DMatrix<f64>> {
    (0..scene.poses.len()).map(|n| full_symmetric_shape(&scene.shapes.shape(n))).collect()
}

/// Basis count per method for a synthetic scene drawn with `scene_k` modes.
/// The EM estimators count deformation bases on top of their mean shape.
fn method_config(method: Method, scene_k: usize) -> MethodConfig {
    let k = match method {
        Method::SymEmPpca | Method::EmPpca => scene_k - 1,
        Method::SymPriorFree | Method::PriorFree => scene_k,
    };
    MethodConfig { k, ..MethodConfig::default() }
}

#[test]
fn every_method_returns_valid_poses_and_full_shapes() {
    let cfg = SynthConfig { occlusion_rate: 0.1, noise_s: 0.01, seed: 7, ..SynthConfig::default() };
    let (scene, obs) = synthesize(&cfg).unwrap();
    for method in Method::ALL {
        let rec = reconstruct(&obs, method, &method_config(method, cfg.k)).unwrap();
        assert_eq!(rec.method, method);
        assert_eq!(rec.poses.len(), cfg.n);
        assert!(rec.shapes.iter().all(|s| s.shape() == (3, 2 * cfg.p) && s.iter().all(|v| v.is_finite())));
        for p in &rec.poses {
            assert!(p.orthonormality_error() <= 1e-8, "{method}");
            assert!((p.q_completion().determinant() - 1.0).abs() <= 1e-8, "{method}");
        }
        assert!(!rec.energy_trace.is_empty());
        let es = shape_error(&rec.shapes, &truth(&scene)).unwrap();
        let er = rotation_error(&rec.poses, &scene.poses).unwrap();
        assert!(es.is_finite() && er.is_finite(), "{method}: {es} {er}");
        // Visible entries are never altered by the occlusion fill.
        let c = &rec.completed;
        for i in 0..cfg.n {
            for j in 0..cfg.p {
                if obs.vis[(i, j)] {
                    let got = c.y[(2 * i, j)] + c.t[i].x;
                    assert!((got - obs.y[(2 * i, j)]).abs() <= 1e-9 * (1.0 + obs.y[(2 * i, j)].abs()), "{method}");
                }
            }
        }
    }
}

#[test]
fn reconstructions_are_deterministic() {
    let (_, obs) = synthesize(&SynthConfig { noise_s: 0.02, seed: 8, ..SynthConfig::default() }).unwrap();
    for method in Method::ALL {
        let cfg = method_config(method, 2);
        let a = reconstruct(&obs, method, &cfg).unwrap();
        let b = reconstruct(&obs, method, &cfg).unwrap();
        assert_eq!(a.shapes, b.shapes, "{method}");
        assert_eq!(a.energy_trace, b.energy_trace, "{method}");
    }
}

#[test]
fn fitting_from_a_dataset_file_matches_fitting_in_memory() {
    let cfg = SynthConfig { occlusion_rate: 0.15, noise_s: 0.01, seed: 9, ..SynthConfig::default() };
    let (scene, obs) = synthesize(&cfg).unwrap();
    let text = Dataset::from_scene(&scene, &obs, Some(cfg.k)).unwrap().to_jsonl().unwrap();
    let ds = Dataset::parse(&text).unwrap();
    let loaded = ds.observations().unwrap();
    let method_cfg = method_config(Method::SymPriorFree, cfg.k);
    let direct = reconstruct(&obs, Method::SymPriorFree, &method_cfg).unwrap();
    let via_file = reconstruct(&loaded, Method::SymPriorFree, &method_cfg).unwrap();
    assert_eq!(direct.shapes, via_file.shapes);
    let gt = ds.ground_truth().unwrap();
    assert_eq!(gt.poses, scene.poses);
}

#[test]
fn noiseless_symmetric_fits_recover_the_scene() {
    let cfg = SynthConfig { scale_range: [0.8, 1.2], seed: 10, ..SynthConfig::default() };
    let (scene, obs) = synthesize(&cfg).unwrap();
    let gt = truth(&scene);
    let pf = reconstruct(&obs, Method::SymPriorFree, &method_config(Method::SymPriorFree, cfg.k)).unwrap();
    assert!(shape_error(&pf.shapes, &gt).unwrap() <= 1e-2);
    assert!(rotation_error(&pf.poses, &scene.poses).unwrap() <= 1e-2);
    let em = reconstruct(&obs, Method::SymEmPpca, &method_config(Method::SymEmPpca, cfg.k)).unwrap();
    assert!(shape_error(&em.shapes, &gt).unwrap() <= 0.05);
    assert!(rotation_error(&em.poses, &scene.poses).unwrap() <= 0.05);
}

#[test]
fn inconsistent_inputs_are_reported() {
    let (_, obs) = synthesize(&SynthConfig::default()).unwrap();
    for method in Method::ALL {
        let err = reconstruct(&obs, method, &MethodConfig { k: 0, ..MethodConfig::default() }).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "{method}: {err}");
    }
    let mut broken = obs.clone();
    broken.y_dag = broken.y_dag.remove_column(0);
    assert!(reconstruct(&broken, Method::SymPriorFree, &MethodConfig::default()).is_err());
}
