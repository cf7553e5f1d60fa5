//! Scene directories on disk:
//!
//! ```text
//! <scene>/cameras.json          list of cameras, one per view, in view order
//! <scene>/points.txt            "x y z" per line, '#' comments
//! <scene>/images/<view>/<frame>.ppm
//! ```
//!
//! View directories are matched to cameras in sorted name order; frame files
//! are ordered by their numeric stem and every view must hold the same
//! frames.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::primitives::{read_points, write_points};
use crate::rd_optimizer::TrainView;
use crate::renderer::{read_cameras, read_ppm, write_cameras, write_ppm, Camera, Image};

#[derive(Clone, Debug)]
pub struct Scene {
    pub cameras: Vec<Camera<f64>>,
    /// `frames[t][v]` is view `v` at frame `t`.
    pub frames: Vec<Vec<Image<f64>>>,
    pub points: Vec<Vec3<f64>>,
}

impl Scene {
    pub fn views(&self, frame: usize) -> Vec<TrainView> {
        self.cameras.iter().zip(&self.frames[frame]).map(|(c, im)| TrainView { camera: c.clone(), image: im.clone() }).collect()
    }

    pub fn all_views(&self) -> Vec<Vec<TrainView>> {
        (0..self.frames.len()).map(|t| self.views(t)).collect()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn frame_number(path: &Path) -> Result<u64> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(path.display().to_string(), "frame files must be named <number>.ppm"))
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let cameras = read_cameras(&dir.join("cameras.json"))?;
    let points = read_points(&dir.join("points.txt"))?;
    let image_dir = dir.join("images");
    let views: Vec<PathBuf> = sorted_entries(&image_dir)?.into_iter().filter(|p| p.is_dir()).collect();
    if views.len() != cameras.len() {
        return Err(Error::parse(image_dir.display().to_string(), format!("{} view directories for {} cameras", views.len(), cameras.len())));
    }
    let mut per_view: Vec<Vec<(u64, PathBuf)>> = Vec::with_capacity(views.len());
    for v in &views {
        let mut files: Vec<(u64, PathBuf)> = sorted_entries(v)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .map(|p| Ok((frame_number(&p)?, p)))
            .collect::<Result<_>>()?;
        files.sort();
        if files.is_empty() {
            return Err(Error::parse(v.display().to_string(), "no frames"));
        }
        per_view.push(files);
    }
    let numbers: Vec<u64> = per_view[0].iter().map(|f| f.0).collect();
    for (v, files) in views.iter().zip(&per_view) {
        if files.iter().map(|f| f.0).collect::<Vec<_>>() != numbers {
            return Err(Error::parse(v.display().to_string(), "frame numbers differ from the first view"));
        }
    }
    let mut frames = Vec::with_capacity(numbers.len());
    for t in 0..numbers.len() {
        let mut row = Vec::with_capacity(views.len());
        for (files, cam) in per_view.iter().zip(&cameras) {
            let path = &files[t].1;
            let im = read_ppm(path)?;
            if im.width != cam.width || im.height != cam.height {
                return Err(Error::parse(
                    path.display().to_string(),
                    format!("image is {}x{} but its camera is {}x{}", im.width, im.height, cam.width, cam.height),
                ));
            }
            row.push(im);
        }
        frames.push(row);
    }
    Ok(Scene { cameras, frames, points })
}

pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_cameras(&dir.join("cameras.json"), &scene.cameras)?;
    write_points(&dir.join("points.txt"), &scene.points)?;
    for v in 0..scene.cameras.len() {
        let vd = dir.join("images").join(format!("view_{v:03}"));
        std::fs::create_dir_all(&vd).map_err(|e| Error::io(&vd, e))?;
        for (t, frame) in scene.frames.iter().enumerate() {
            write_ppm(&vd.join(format!("{t:04}.ppm")), &frame[v])?;
        }
    }
    Ok(())
}

/// Scene from per-frame views sharing cameras.
pub fn scene_from_views(frames: &[Vec<TrainView>], points: &[Vec3<f64>]) -> Result<Scene> {
    let first = frames.first().ok_or_else(|| Error::InvalidArgument("no frames".into()))?;
    Ok(Scene {
        cameras: first.iter().map(|v| v.camera.clone()).collect(),
        frames: frames.iter().map(|f| f.iter().map(|v| v.image.clone()).collect()).collect(),
        points: points.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{moving_blob_sequence, SequenceSpec};

    #[test]
    fn scene_round_trips_through_disk() {
        let seq = moving_blob_sequence(&SequenceSpec { frames: 3, views: 2, size: 12, background: 5, blob: 2, ..SequenceSpec::default() }).unwrap();
        let scene = scene_from_views(&seq.frames, &seq.points).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scene(dir.path(), &scene).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back.cameras.len(), 2);
        assert_eq!(back.frames.len(), 3);
        assert_eq!(back.points.len(), scene.points.len());
        for (a, b) in back.frames.iter().flatten().zip(scene.frames.iter().flatten()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        for (a, b) in back.cameras.iter().zip(&scene.cameras) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_and_inconsistent_inputs_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let e = load_scene(dir.path()).unwrap_err().to_string();
        assert!(e.contains("cameras.json"), "{e}");
        let seq = moving_blob_sequence(&SequenceSpec { frames: 2, views: 2, size: 8, background: 3, blob: 1, ..SequenceSpec::default() }).unwrap();
        write_scene(dir.path(), &scene_from_views(&seq.frames, &seq.points).unwrap()).unwrap();
        std::fs::remove_file(dir.path().join("images/view_001/0001.ppm")).unwrap();
        let e = load_scene(dir.path()).unwrap_err().to_string();
        assert!(e.contains("view_001"), "{e}");
    }
}
