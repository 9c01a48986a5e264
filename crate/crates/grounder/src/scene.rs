//! Posed RGB-D scene model: frames, intrinsics, poses, queries.
//!
//! A scene directory lays out one subdirectory per stream:
//!
//! ```text
//! <root>/<scene_id>/color/<frame_id>.jpg|.png   8-bit RGB
//! <root>/<scene_id>/depth/<frame_id>.png        16-bit grayscale, millimeters, 0 = invalid
//! <root>/<scene_id>/pose/<frame_id>.txt         4x4 row-major world-from-camera
//! <root>/<scene_id>/intrinsics_color.txt        4x4, fx=K[0][0] fy=K[1][1] cx=K[0][2] cy=K[1][2]
//! <root>/<scene_id>/intrinsics_depth.txt        same layout at depth resolution
//! ```
//!
//! Frame IDs are five decimal digits; frames are kept sorted ascending.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::RgbImage;
use nalgebra::{Matrix3, Matrix4, Point3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Millimeter-to-meter conversion divisor for raw depth values.
pub const DEFAULT_DEPTH_DIVISOR: f64 = 1000.0;

/// Orthonormality tolerance for pose rotation blocks.
pub const POSE_ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("invalid frame id {name:?} at {path} (expected five digits)")]
    InvalidFrameId { name: String, path: PathBuf },
    #[error("missing {kind} file for frame {frame_id} at {path}")]
    MissingStream {
        kind: &'static str,
        frame_id: String,
        path: PathBuf,
    },
    #[error("malformed 4x4 matrix at {path}: {detail}")]
    MalformedMatrix { path: PathBuf, detail: String },
    #[error("invalid intrinsics at {path}: {detail}")]
    InvalidIntrinsics { path: PathBuf, detail: String },
    #[error("pose for frame {frame_id} is not a rigid transform: {detail}")]
    NonRigidPose { frame_id: String, detail: String },
    #[error("depth image at {path} is not 16-bit grayscale")]
    BadDepthFormat { path: PathBuf },
    #[error("scene {scene_id} has no frames under {path}")]
    EmptyScene { scene_id: String, path: PathBuf },
    #[error("malformed query line {line}: {detail}")]
    MalformedQuery { line: usize, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Pinhole camera intrinsics tied to a raster resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self, path: &Path) -> Result<(), SceneError> {
        let bad = |detail: String| SceneError::InvalidIntrinsics {
            path: path.to_path_buf(),
            detail,
        };
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(bad(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64) {
            return Err(bad(format!("cx={} outside [0, {})", self.cx, self.width)));
        }
        if !(0.0 <= self.cy && self.cy < self.height as f64) {
            return Err(bad(format!("cy={} outside [0, {})", self.cy, self.height)));
        }
        Ok(())
    }
}

/// Rigid world-from-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub world_from_camera: Matrix4<f64>,
}

impl Pose {
    pub fn new(world_from_camera: Matrix4<f64>) -> Self {
        Pose { world_from_camera }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_from_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Checks the rotation block is orthonormal with determinant +1 and the
    /// bottom row is [0 0 0 1], all within [`POSE_ORTHONORMAL_TOL`].
    pub fn validate(&self, frame_id: &str) -> Result<(), SceneError> {
        let bad = |detail: String| SceneError::NonRigidPose {
            frame_id: frame_id.to_string(),
            detail,
        };
        let r = self.rotation();
        let gram = r.transpose() * r;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > POSE_ORTHONORMAL_TOL {
            return Err(bad(format!("R^T R deviates from identity by {dev:.3e}")));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > POSE_ORTHONORMAL_TOL {
            return Err(bad(format!("det(R) = {det}, expected +1")));
        }
        let bottom = self.world_from_camera.row(3);
        let expect = Vector4::new(0.0, 0.0, 0.0, 1.0).transpose();
        if (bottom - expect).abs().max() > POSE_ORTHONORMAL_TOL {
            return Err(bad("bottom row is not [0 0 0 1]".to_string()));
        }
        Ok(())
    }

    /// Maps a camera-frame point into world coordinates.
    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        let h = self.world_from_camera * Vector4::new(p.x, p.y, p.z, 1.0);
        Point3::new(h.x, h.y, h.z)
    }
}

/// Raw 16-bit depth raster plus the divisor that converts values to meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
    pub divisor: f64,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, data: Vec<u16>, divisor: f64) -> Self {
        assert_eq!(
            data.len(),
            (width * height) as usize,
            "depth buffer size mismatch"
        );
        assert!(divisor > 0.0, "depth divisor must be positive");
        DepthMap {
            width,
            height,
            data,
            divisor,
        }
    }

    pub fn raw_at(&self, u: u32, v: u32) -> u16 {
        self.data[(v * self.width + u) as usize]
    }

    /// Depth in meters, `None` where the sensor reported no return (raw 0).
    pub fn meters_at(&self, u: u32, v: u32) -> Option<f64> {
        match self.raw_at(u, v) {
            0 => None,
            d => Some(d as f64 / self.divisor),
        }
    }
}

/// One posed RGB-D frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: String,
    pub color: RgbImage,
    pub depth: DepthMap,
    pub color_intrinsics: CameraIntrinsics,
    pub depth_intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

/// An ordered collection of frames from one capture.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub frames: Vec<Frame>,
}

impl Scene {
    pub fn frame(&self, frame_id: &str) -> Option<&Frame> {
        self.frames.iter().find(|f| f.frame_id == frame_id)
    }

    pub fn frame_index(&self, frame_id: &str) -> Option<usize> {
        self.frames.iter().position(|f| f.frame_id == frame_id)
    }

    /// Keeps frames at sequence indices `0, stride, 2*stride, ...`, preserving
    /// order and IDs. `stride` must be at least 1; stride 1 is the identity.
    pub fn sample_frames(&self, stride: usize) -> Scene {
        assert!(stride >= 1, "stride must be >= 1");
        Scene {
            scene_id: self.scene_id.clone(),
            frames: self.frames.iter().step_by(stride).cloned().collect(),
        }
    }

    /// Renumbers frames to contiguous five-digit IDs `00001, 00002, ...` so
    /// adjacent images carry adjacent IDs in prompts. Returns the renamed
    /// scene and a new-ID to original-ID map.
    pub fn reindexed(&self) -> (Scene, BTreeMap<String, String>) {
        let mut frames = self.frames.clone();
        let mut map = BTreeMap::new();
        for (i, f) in frames.iter_mut().enumerate() {
            let new_id = display_frame_id(i);
            map.insert(new_id.clone(), f.frame_id.clone());
            f.frame_id = new_id;
        }
        (
            Scene {
                scene_id: self.scene_id.clone(),
                frames,
            },
            map,
        )
    }

    /// Writes the scene back out in the directory layout `load_scene` reads.
    ///
    /// Color is saved as PNG so the round trip is lossless.
    pub fn save(&self, root: &Path) -> Result<(), SceneError> {
        let dir = root.join(&self.scene_id);
        for sub in ["color", "depth", "pose"] {
            fs::create_dir_all(dir.join(sub)).map_err(io_err(&dir.join(sub)))?;
        }
        let first = self.frames.first().ok_or_else(|| SceneError::EmptyScene {
            scene_id: self.scene_id.clone(),
            path: dir.clone(),
        })?;
        write_matrix4(
            &dir.join("intrinsics_color.txt"),
            &intrinsics_to_matrix(&first.color_intrinsics),
        )?;
        write_matrix4(
            &dir.join("intrinsics_depth.txt"),
            &intrinsics_to_matrix(&first.depth_intrinsics),
        )?;
        for f in &self.frames {
            let color_path = dir.join("color").join(format!("{}.png", f.frame_id));
            f.color
                .save(&color_path)
                .map_err(|source| SceneError::Image {
                    path: color_path.clone(),
                    source,
                })?;
            let depth_path = dir.join("depth").join(format!("{}.png", f.frame_id));
            let depth_img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
                f.depth.width,
                f.depth.height,
                f.depth.data.clone(),
            )
            .expect("depth buffer size");
            depth_img
                .save(&depth_path)
                .map_err(|source| SceneError::Image {
                    path: depth_path.clone(),
                    source,
                })?;
            write_matrix4(
                &dir.join("pose").join(format!("{}.txt", f.frame_id)),
                &f.pose.world_from_camera,
            )?;
        }
        Ok(())
    }
}

fn intrinsics_to_matrix(k: &CameraIntrinsics) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m[(0, 0)] = k.fx;
    m[(1, 1)] = k.fy;
    m[(0, 2)] = k.cx;
    m[(1, 2)] = k.cy;
    m
}

fn write_matrix4(path: &Path, m: &Matrix4<f64>) -> Result<(), SceneError> {
    let mut s = String::new();
    for r in 0..4 {
        for c in 0..4 {
            if c > 0 {
                s.push(' ');
            }
            // {:?} prints the shortest representation that round-trips f64.
            let _ = write!(s, "{:?}", m[(r, c)]);
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(io_err(path))
}

fn read_matrix4(path: &Path) -> Result<Matrix4<f64>, SceneError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let vals: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse::<f64>).collect();
    let vals = vals.map_err(|e| SceneError::MalformedMatrix {
        path: path.to_path_buf(),
        detail: format!("non-numeric entry: {e}"),
    })?;
    if vals.len() != 16 {
        return Err(SceneError::MalformedMatrix {
            path: path.to_path_buf(),
            detail: format!("expected 16 values, found {}", vals.len()),
        });
    }
    Ok(Matrix4::from_row_slice(&vals))
}

fn is_frame_id(s: &str) -> bool {
    s.len() == 5 && s.bytes().all(|b| b.is_ascii_digit())
}

/// Loads one scene from `<root>/<scene_id>/`, validating IDs, poses, and
/// intrinsics. Frames are returned sorted by ascending frame ID.
/// Display ID for the frame at zero-based sequence position `index`: the
/// one-based, five-digit numbering used when frames are shown to a VLM
/// ("00001" is the first frame).
pub fn display_frame_id(index: usize) -> String {
    format!("{:05}", index + 1)
}

pub fn load_scene(root: &Path, scene_id: &str, depth_divisor: f64) -> Result<Scene, SceneError> {
    let dir = root.join(scene_id);
    let color_dir = dir.join("color");
    let mut ids = Vec::new();
    let entries = fs::read_dir(&color_dir).map_err(io_err(&color_dir))?;
    for entry in entries {
        let entry = entry.map_err(io_err(&color_dir))?;
        let path = entry.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else {
            continue;
        };
        if !matches!(ext, "jpg" | "jpeg" | "png") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if !is_frame_id(&stem) {
            return Err(SceneError::InvalidFrameId { name: stem, path });
        }
        ids.push((stem, path));
    }
    ids.sort();
    if ids.is_empty() {
        return Err(SceneError::EmptyScene {
            scene_id: scene_id.to_string(),
            path: color_dir,
        });
    }

    let k_color_m = read_matrix4(&dir.join("intrinsics_color.txt"))?;
    let k_depth_m = read_matrix4(&dir.join("intrinsics_depth.txt"))?;

    let mut frames = Vec::with_capacity(ids.len());
    for (frame_id, color_path) in ids {
        let depth_path = dir.join("depth").join(format!("{frame_id}.png"));
        if !depth_path.exists() {
            return Err(SceneError::MissingStream {
                kind: "depth",
                frame_id,
                path: depth_path,
            });
        }
        let pose_path = dir.join("pose").join(format!("{frame_id}.txt"));
        if !pose_path.exists() {
            return Err(SceneError::MissingStream {
                kind: "pose",
                frame_id,
                path: pose_path,
            });
        }

        let color = image::open(&color_path)
            .map_err(|source| SceneError::Image {
                path: color_path.clone(),
                source,
            })?
            .to_rgb8();
        let depth_dyn = image::open(&depth_path).map_err(|source| SceneError::Image {
            path: depth_path.clone(),
            source,
        })?;
        let depth_img = match depth_dyn {
            image::DynamicImage::ImageLuma16(img) => img,
            _ => return Err(SceneError::BadDepthFormat { path: depth_path }),
        };
        let depth = DepthMap::new(
            depth_img.width(),
            depth_img.height(),
            depth_img.into_raw(),
            depth_divisor,
        );

        let color_intrinsics = CameraIntrinsics {
            fx: k_color_m[(0, 0)],
            fy: k_color_m[(1, 1)],
            cx: k_color_m[(0, 2)],
            cy: k_color_m[(1, 2)],
            width: color.width(),
            height: color.height(),
        };
        color_intrinsics.validate(&dir.join("intrinsics_color.txt"))?;
        let depth_intrinsics = CameraIntrinsics {
            fx: k_depth_m[(0, 0)],
            fy: k_depth_m[(1, 1)],
            cx: k_depth_m[(0, 2)],
            cy: k_depth_m[(1, 2)],
            width: depth.width,
            height: depth.height,
        };
        depth_intrinsics.validate(&dir.join("intrinsics_depth.txt"))?;

        let pose = Pose::new(read_matrix4(&pose_path)?);
        pose.validate(&frame_id)?;

        frames.push(Frame {
            frame_id,
            color,
            depth,
            color_intrinsics,
            depth_intrinsics,
            pose,
        });
    }
    Ok(Scene {
        scene_id: scene_id.to_string(),
        frames,
    })
}

/// One grounding request, optionally with ground truth for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub scene_id: String,
    pub text: String,
    /// `[xmin, ymin, zmin, xmax, ymax, zmax]` in world coordinates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<[f64; 6]>,
    /// Accuracy-report buckets this query belongs to (e.g. "Unique").
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub splits: Vec<String>,
    /// Candidate boxes for closest-center matching evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_boxes: Option<Vec<[f64; 6]>>,
    /// Index into `gt_boxes` of the true target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_target_index: Option<usize>,
    /// Ground-truth 2D mask PNGs per frame, paths relative to the query file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_masks: Option<BTreeMap<String, String>>,
}

/// Reads queries from a JSON-lines file (one object per non-empty line).
pub fn load_queries(path: &Path) -> Result<Vec<Query>, SceneError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut queries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: Query = serde_json::from_str(line).map_err(|e| SceneError::MalformedQuery {
            line: i + 1,
            detail: e.to_string(),
        })?;
        queries.push(q);
    }
    Ok(queries)
}
