//! Line-delimited dataset files.
//!
//! The first line is a header object; every following line is one image
//! record. Serialization is canonical: fields in declaration order, shortest
//! round-trip float formatting, one trailing newline per line. Parsing a
//! canonical file and writing it back reproduces it byte for byte.

use nalgebra::{DMatrix, Matrix2x3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CameraPose, ObservationSet, SymmetryAxis};
use crate::synth::SyntheticScene;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u32,
    pub n: usize,
    pub p: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_hint: Option<usize>,
    pub symmetry_axis: SymmetryAxis,
    pub groups: Vec<String>,
}

/// `(u, v, visible)`.
pub type Keypoint = (f64, f64, bool);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    /// Rows of the `2 × 3` rotation.
    pub r: [[f64; 3]; 2],
    pub c: f64,
    pub t: [f64; 2],
}

impl From<&CameraPose> for PoseRecord {
    fn from(p: &CameraPose) -> Self {
        Self {
            r: [[p.r[(0, 0)], p.r[(0, 1)], p.r[(0, 2)]], [p.r[(1, 0)], p.r[(1, 1)], p.r[(1, 2)]]],
            c: p.c,
            t: [p.t.x, p.t.y],
        }
    }
}

impl From<&PoseRecord> for CameraPose {
    fn from(p: &PoseRecord) -> Self {
        let r = Matrix2x3::new(p.r[0][0], p.r[0][1], p.r[0][2], p.r[1][0], p.r[1][1], p.r[1][2]);
        CameraPose::new(r, p.c, Vector2::new(p.t[0], p.t[1]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    pub group: String,
    /// `[primary half, mirror half]`, `P` keypoints each.
    pub keypoints: [Vec<Keypoint>; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_pose: Option<PoseRecord>,
    /// Primary-half 3D points; the mirror half follows from the symmetry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_shape: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<ImageRecord>,
}

/// Ground truth of every image.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub poses: Vec<CameraPose>,
    /// `3 × P` primary halves.
    pub shapes: Vec<DMatrix<f64>>,
}

fn format_err(line: usize, what: impl std::fmt::Display) -> Error {
    Error::Format(format!("line {line}: {what}"))
}

impl Dataset {
    /// Wraps observations, optionally with ground truth, under generated ids.
    pub fn from_observations(
        obs: &ObservationSet,
        groups: Option<&[String]>,
        truth: Option<&GroundTruth>,
        k_hint: Option<usize>,
    ) -> Result<Self> {
        let n = obs.n_images();
        let p = obs.n_points();
        if let Some(g) = groups {
            if g.len() != n {
                return Err(Error::DimensionMismatch(format!("{} group labels for {n} images", g.len())));
            }
        }
        if let Some(gt) = truth {
            if gt.poses.len() != n || gt.shapes.len() != n || gt.shapes.iter().any(|s| s.shape() != (3, p)) {
                return Err(Error::DimensionMismatch("ground truth does not match the observations".into()));
            }
        }
        let half = |y: &DMatrix<f64>, vis: &DMatrix<bool>, i: usize| -> Vec<Keypoint> {
            let t = obs.t[i];
            (0..p).map(|j| (y[(2 * i, j)] + t.x, y[(2 * i + 1, j)] + t.y, vis[(i, j)])).collect()
        };
        let records = (0..n)
            .map(|i| ImageRecord {
                id: format!("img{i:05}"),
                group: groups.map(|g| g[i].clone()).unwrap_or_else(|| "all".into()),
                keypoints: [half(&obs.y, &obs.vis, i), half(&obs.y_dag, &obs.vis_dag, i)],
                gt_pose: truth.map(|gt| PoseRecord::from(&gt.poses[i])),
                gt_shape: truth.map(|gt| gt.shapes[i].column_iter().map(|c| [c[0], c[1], c[2]]).collect()),
            })
            .collect::<Vec<_>>();
        let mut group_names: Vec<String> = Vec::new();
        for r in &records {
            if !group_names.contains(&r.group) {
                group_names.push(r.group.clone());
            }
        }
        let ds = Self {
            header: DatasetHeader {
                version: FORMAT_VERSION,
                n,
                p,
                k_hint,
                symmetry_axis: SymmetryAxis::X,
                groups: group_names,
            },
            records,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// A synthetic scene's (possibly noisy) observations with its ground truth embedded.
    pub fn from_scene(scene: &SyntheticScene, obs: &ObservationSet, k_hint: Option<usize>) -> Result<Self> {
        let truth = GroundTruth {
            poses: scene.poses.clone(),
            shapes: (0..scene.shapes.n_images()).map(|n| scene.shapes.shape(n)).collect(),
        };
        Self::from_observations(obs, None, Some(&truth), k_hint)
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.version != FORMAT_VERSION {
            return Err(format_err(1, format!("unsupported version {}", h.version)));
        }
        if h.n != self.records.len() {
            return Err(format_err(1, format!("header declares {} images, found {}", h.n, self.records.len())));
        }
        if h.p == 0 {
            return Err(format_err(1, "no keypoints per half"));
        }
        let mut ids = std::collections::HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            let line = i + 2;
            if !ids.insert(r.id.as_str()) {
                return Err(format_err(line, format!("duplicate id {:?}", r.id)));
            }
            if !h.groups.contains(&r.group) {
                return Err(format_err(line, format!("group {:?} is not declared in the header", r.group)));
            }
            for half in &r.keypoints {
                if half.len() != h.p {
                    return Err(format_err(line, format!("{} keypoints, expected {}", half.len(), h.p)));
                }
                if half.iter().any(|(u, v, _)| !u.is_finite() || !v.is_finite()) {
                    return Err(format_err(line, "non-finite keypoint"));
                }
            }
            if let Some(pose) = &r.gt_pose {
                if pose.r.iter().flatten().chain([&pose.c]).chain(&pose.t).any(|x| !x.is_finite()) {
                    return Err(format_err(line, "non-finite pose"));
                }
            }
            if let Some(shape) = &r.gt_shape {
                if shape.len() != h.p {
                    return Err(format_err(line, format!("ground-truth shape has {} points, expected {}", shape.len(), h.p)));
                }
                if shape.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(format_err(line, "non-finite ground-truth shape"));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::Format("empty dataset".into()))?;
        let header: DatasetHeader = serde_json::from_str(first).map_err(|e| format_err(1, e))?;
        let records = lines
            .map(|(i, l)| serde_json::from_str::<ImageRecord>(l).map_err(|e| format_err(i + 1, e)))
            .collect::<Result<Vec<_>>>()?;
        let ds = Self { header, records };
        ds.validate()?;
        Ok(ds)
    }

    /// Canonical text form.
    pub fn to_jsonl(&self) -> Result<String> {
        self.validate()?;
        let mut out = serde_json::to_string(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn observations(&self) -> Result<ObservationSet> {
        let n = self.header.n;
        let p = self.header.p;
        let mut y = DMatrix::zeros(2 * n, p);
        let mut y_dag = DMatrix::zeros(2 * n, p);
        let mut vis = DMatrix::from_element(n, p, false);
        let mut vis_dag = DMatrix::from_element(n, p, false);
        for (i, r) in self.records.iter().enumerate() {
            for (j, &(u, v, seen)) in r.keypoints[0].iter().enumerate() {
                y[(2 * i, j)] = u;
                y[(2 * i + 1, j)] = v;
                vis[(i, j)] = seen;
            }
            for (j, &(u, v, seen)) in r.keypoints[1].iter().enumerate() {
                y_dag[(2 * i, j)] = u;
                y_dag[(2 * i + 1, j)] = v;
                vis_dag[(i, j)] = seen;
            }
        }
        ObservationSet::new(y, y_dag, vis, vis_dag)
    }

    pub fn groups(&self) -> Vec<String> {
        self.records.iter().map(|r| r.group.clone()).collect()
    }

    /// `None` unless every record carries both a pose and a shape.
    pub fn ground_truth(&self) -> Option<GroundTruth> {
        let poses = self.records.iter().map(|r| r.gt_pose.as_ref().map(CameraPose::from)).collect::<Option<Vec<_>>>()?;
        let shapes = self
            .records
            .iter()
            .map(|r| {
                r.gt_shape.as_ref().map(|pts| DMatrix::from_fn(3, pts.len(), |i, j| pts[j][i]))
            })
            .collect::<Option<Vec<_>>>()?;
        Some(GroundTruth { poses, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize, SynthConfig};

    fn sample() -> Dataset {
        let cfg = SynthConfig { n: 6, p: 5, k: 2, noise_s: 0.01, occlusion_rate: 0.2, seed: 3, ..SynthConfig::default() };
        let (scene, obs) = synthesize(&cfg).unwrap();
        Dataset::from_scene(&scene, &obs, Some(2)).unwrap()
    }

    #[test]
    fn canonical_text_round_trips_exactly() {
        let ds = sample();
        let text = ds.to_jsonl().unwrap();
        let back = Dataset::parse(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_jsonl().unwrap(), text);
    }

    #[test]
    fn observations_and_truth_survive_the_file() {
        let cfg = SynthConfig { n: 4, p: 5, seed: 9, occlusion_rate: 0.1, ..SynthConfig::default() };
        let (scene, obs) = synthesize(&cfg).unwrap();
        let ds = Dataset::parse(&Dataset::from_scene(&scene, &obs, None).unwrap().to_jsonl().unwrap()).unwrap();
        let back = ds.observations().unwrap();
        assert_eq!(back.y, obs.y);
        assert_eq!(back.y_dag, obs.y_dag);
        assert_eq!(back.vis, obs.vis);
        assert_eq!(back.vis_dag, obs.vis_dag);
        let gt = ds.ground_truth().unwrap();
        assert_eq!(gt.poses, scene.poses);
        assert_eq!(gt.shapes[2], scene.shapes.shape(2));
    }

    #[test]
    fn inconsistent_files_are_rejected() {
        let ds = sample();
        let text = ds.to_jsonl().unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.pop();
        assert!(matches!(Dataset::parse(&lines.join("\n")), Err(Error::Format(_))));

        let bumped = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(Dataset::parse(&bumped), Err(Error::Format(_))));

        let mut short = ds.clone();
        short.records[0].keypoints[1].pop();
        assert!(short.to_jsonl().is_err());

        assert!(Dataset::parse("").is_err());
        assert!(Dataset::parse("{not json").is_err());
    }

    #[test]
    fn missing_truth_is_reported_as_none() {
        let mut ds = sample();
        ds.records[1].gt_pose = None;
        assert!(ds.ground_truth().is_none());
    }
}
