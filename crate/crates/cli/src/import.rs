//! Conversion of keypoint CSV exports into dataset files.
//!
//! One row per annotated keypoint: `image_id, group, point_id, side, u, v,
//! visible`. `side` names the half (`0`/`1`, `left`/`right`, `primary`/`mirror`).
//! Images and point ids are numbered in order of first appearance; a keypoint
//! absent from the export is treated as occluded.

use nalgebra::DMatrix;
use serde::Deserialize;
use symnrsfm::dataset::Dataset;
use symnrsfm::model::ObservationSet;

use crate::{CliError, CliResult, EXIT_IO};

#[derive(Debug, Deserialize)]
struct Row {
    image_id: String,
    group: String,
    point_id: String,
    side: String,
    u: f64,
    v: f64,
    visible: String,
}

fn bad(line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::new(EXIT_IO, format!("csv line {line}: {msg}"))
}

fn half_index(side: &str) -> Option<usize> {
    match side.trim().to_ascii_lowercase().as_str() {
        "0" | "l" | "left" | "primary" => Some(0),
        "1" | "r" | "right" | "mirror" => Some(1),
        _ => None,
    }
}

fn flag(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

pub fn dataset_from_csv(text: &str, k_hint: Option<usize>) -> CliResult<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut images: Vec<(String, String)> = Vec::new();
    let mut points: Vec<String> = Vec::new();
    let mut entries: Vec<(usize, usize, usize, f64, f64, bool)> = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| bad(line, e))?;
        let half = half_index(&row.side).ok_or_else(|| bad(line, format!("unknown side {:?}", row.side)))?;
        let seen = flag(&row.visible).ok_or_else(|| bad(line, format!("bad visibility {:?}", row.visible)))?;
        if !row.u.is_finite() || !row.v.is_finite() {
            return Err(bad(line, "non-finite coordinate"));
        }
        let img = match images.iter().position(|(id, _)| *id == row.image_id) {
            Some(k) => {
                if images[k].1 != row.group {
                    return Err(bad(line, format!("image {:?} listed under two groups", row.image_id)));
                }
                k
            }
            None => {
                images.push((row.image_id.clone(), row.group.clone()));
                images.len() - 1
            }
        };
        let pt = points.iter().position(|p| *p == row.point_id).unwrap_or_else(|| {
            points.push(row.point_id.clone());
            points.len() - 1
        });
        entries.push((img, pt, half, row.u, row.v, seen));
    }
    if images.is_empty() {
        return Err(CliError::new(EXIT_IO, "csv holds no keypoints"));
    }
    let (n, p) = (images.len(), points.len());
    let mut y = [DMatrix::zeros(2 * n, p), DMatrix::zeros(2 * n, p)];
    let mut vis = [DMatrix::from_element(n, p, false), DMatrix::from_element(n, p, false)];
    let mut filled = [DMatrix::from_element(n, p, false), DMatrix::from_element(n, p, false)];
    for (img, pt, half, u, v, seen) in entries {
        if filled[half][(img, pt)] {
            return Err(CliError::new(EXIT_IO, format!("keypoint {} of image {} listed twice", points[pt], images[img].0)));
        }
        filled[half][(img, pt)] = true;
        y[half][(2 * img, pt)] = u;
        y[half][(2 * img + 1, pt)] = v;
        vis[half][(img, pt)] = seen;
    }
    let [y0, y1] = y;
    let [v0, v1] = vis;
    let obs = ObservationSet::new(y0, y1, v0, v1)?;
    let groups: Vec<String> = images.iter().map(|(_, g)| g.clone()).collect();
    let mut ds = Dataset::from_observations(&obs, Some(&groups), None, k_hint)?;
    for (rec, (id, _)) in ds.records.iter_mut().zip(&images) {
        rec.id = id.clone();
    }
    ds.validate()?;
    Ok(ds)
}
