//! Shared scaffolding for integration tests: an analytic box-world renderer,
//! scene and perception-fixture writers, and a scripted end-to-end suite
//! whose geometry is known in closed form.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use grounder::perception::fixtures::FixtureWriter;
use grounder::perception::{BBox2, Detection2D, Mask2D, PixelPair};
use grounder::projection::Aabb3;
use grounder::scene::{CameraIntrinsics, DepthMap, Frame, Pose, Query, Scene};
use image::RgbImage;
use nalgebra::{Matrix4, Point3, Vector3};

/// Axis-aligned solid box in world coordinates; the whole synthetic world is
/// a list of these.
#[derive(Debug, Clone, Copy)]
pub struct Box3 {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl Box3 {
    pub fn cube(center: [f64; 3], side: f64) -> Box3 {
        let h = side / 2.0;
        Box3 {
            min: Point3::new(center[0] - h, center[1] - h, center[2] - h),
            max: Point3::new(center[0] + h, center[1] + h, center[2] + h),
        }
    }

    pub fn aabb(&self) -> Aabb3 {
        Aabb3 {
            min: [self.min.x, self.min.y, self.min.z],
            max: [self.max.x, self.max.y, self.max.z],
        }
    }

    pub fn gt(&self) -> [f64; 6] {
        [
            self.min.x, self.min.y, self.min.z, self.max.x, self.max.y, self.max.z,
        ]
    }

    /// Slab test: parameter of the entry point of `origin + t*dir`, if the
    /// ray hits with the entry in front of the origin.
    fn ray_entry(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-12 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
            } else {
                let ta = (self.min[a] - origin[a]) / dir[a];
                let tb = (self.max[a] - origin[a]) / dir[a];
                let (lo, hi) = if ta <= tb { (ta, tb) } else { (tb, ta) };
                t0 = t0.max(lo);
                t1 = t1.min(hi);
            }
        }
        (t1 >= t0 && t0 > 0.0).then_some(t0)
    }
}

/// Camera pose at `eye` with the optical axis through `target` (world up
/// `+z`, falling back to `+x` when the axis is vertical).
pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> Pose {
    let eye = Point3::new(eye[0], eye[1], eye[2]);
    let target = Point3::new(target[0], target[1], target[2]);
    let fwd = (target - eye).normalize();
    let mut up = Vector3::z();
    if fwd.cross(&up).norm() < 1e-6 {
        up = Vector3::x();
    }
    let x = fwd.cross(&up).normalize();
    let y = fwd.cross(&x);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 1>(0, 0).copy_from(&x);
    m.fixed_view_mut::<3, 1>(0, 1).copy_from(&y);
    m.fixed_view_mut::<3, 1>(0, 2).copy_from(&fwd);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye.coords);
    Pose::new(m)
}

pub fn intrinsics(fx: f64, width: u32, height: u32) -> CameraIntrinsics {
    CameraIntrinsics {
        fx,
        fy: fx,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
    }
}

/// Renders depth (millimetres, 0 = no return) and one visibility mask per
/// world object, by intersecting one ray per pixel centre with every box and
/// keeping the nearest hit.
pub fn render_view(
    world: &[Box3],
    pose: &Pose,
    k: &CameraIntrinsics,
    frame_id: &str,
) -> (Vec<u16>, Vec<Mask2D>) {
    let rot = pose.rotation();
    let eye = Point3::from(pose.world_from_camera.fixed_view::<3, 1>(0, 3).into_owned());
    let mut depth = vec![0u16; (k.width * k.height) as usize];
    let mut masks: Vec<Mask2D> = world
        .iter()
        .map(|_| Mask2D::new(frame_id, k.width, k.height))
        .collect();
    for v in 0..k.height {
        for u in 0..k.width {
            let dir_cam = Vector3::new(
                (u as f64 + 0.5 - k.cx) / k.fx,
                (v as f64 + 0.5 - k.cy) / k.fy,
                1.0,
            );
            let dir = rot * dir_cam;
            let mut nearest: Option<(f64, usize)> = None;
            for (i, b) in world.iter().enumerate() {
                if let Some(t) = b.ray_entry(&eye, &dir) {
                    if nearest.map_or(true, |(tn, _)| t < tn) {
                        nearest = Some((t, i));
                    }
                }
            }
            if let Some((t, i)) = nearest {
                // `dir_cam.z == 1`, so the ray parameter is the camera-space
                // depth directly.
                depth[(v * k.width + u) as usize] = (t * 1000.0).round().min(65535.0) as u16;
                masks[i].set(u, v, true);
            }
        }
    }
    (depth, masks)
}

/// One posed RGB-D frame of the box world, plus per-object masks. Colour is a
/// flat background with each object's visible region tinted.
pub fn make_frame(
    world: &[Box3],
    frame_id: &str,
    eye: [f64; 3],
    target: [f64; 3],
    k: &CameraIntrinsics,
) -> (Frame, Vec<Mask2D>) {
    let pose = look_at(eye, target);
    let (depth, masks) = render_view(world, &pose, k, frame_id);
    let tints = [[200u8, 70, 60], [60, 100, 200], [90, 190, 90]];
    let mut color = RgbImage::from_pixel(k.width, k.height, image::Rgb([88, 88, 88]));
    for (i, mask) in masks.iter().enumerate() {
        let tint = tints[i % tints.len()];
        for (u, v) in mask.iter_true() {
            color.put_pixel(u, v, image::Rgb(tint));
        }
    }
    let frame = Frame {
        frame_id: frame_id.to_string(),
        color,
        depth: DepthMap::new(k.width, k.height, depth, 1000.0),
        color_intrinsics: *k,
        depth_intrinsics: *k,
        pose,
    };
    (frame, masks)
}

/// Tight pixel bounding box (end-exclusive) of a mask's true region.
pub fn tight_bbox(mask: &Mask2D) -> Option<BBox2> {
    let mut bounds: Option<(u32, u32, u32, u32)> = None;
    for (u, v) in mask.iter_true() {
        bounds = Some(match bounds {
            None => (u, v, u, v),
            Some((u0, v0, u1, v1)) => (u0.min(u), v0.min(v), u1.max(u), v1.max(v)),
        });
    }
    bounds.map(|(u0, v0, u1, v1)| BBox2 {
        x0: u0 as f64,
        y0: v0 as f64,
        x1: (u1 + 1) as f64,
        y1: (v1 + 1) as f64,
    })
}

fn world_point(frame: &Frame, u: u32, v: u32) -> Option<Point3<f64>> {
    let d = frame.depth.meters_at(u, v)?;
    let k = &frame.depth_intrinsics;
    let cam = Point3::new(
        (u as f64 + 0.5 - k.cx) / k.fx * d,
        (v as f64 + 0.5 - k.cy) / k.fy * d,
        d,
    );
    Some(frame.pose.world_from_camera.transform_point(&cam))
}

fn camera_point(frame: &Frame, world: &Point3<f64>) -> Point3<f64> {
    let rot = frame.pose.rotation();
    let eye = frame
        .pose
        .world_from_camera
        .fixed_view::<3, 1>(0, 3)
        .into_owned();
    Point3::from(rot.transpose() * (world.coords - eye))
}

/// Pixel correspondences between two views: every `stride`-th source pixel of
/// each object, reprojected through the source depth into the target view and
/// kept when the target sees the same object surface there (2 cm tolerance).
pub fn reproject_matches(
    src: &(Frame, Vec<Mask2D>),
    dst: &(Frame, Vec<Mask2D>),
    stride: u32,
) -> Vec<PixelPair> {
    let (src_frame, src_masks) = src;
    let (dst_frame, dst_masks) = dst;
    let k = &dst_frame.depth_intrinsics;
    let mut pairs = Vec::new();
    for (obj, src_mask) in src_masks.iter().enumerate() {
        if src_mask.count() == 0 || dst_masks[obj].count() == 0 {
            continue;
        }
        for (u, v) in src_mask.iter_true() {
            if u % stride != 0 || v % stride != 0 {
                continue;
            }
            let Some(world) = world_point(src_frame, u, v) else {
                continue;
            };
            let cam = camera_point(dst_frame, &world);
            if cam.z <= 0.05 {
                continue;
            }
            let uc = (k.fx * cam.x / cam.z + k.cx).floor();
            let vc = (k.fy * cam.y / cam.z + k.cy).floor();
            if uc < 0.0 || vc < 0.0 || uc >= k.width as f64 || vc >= k.height as f64 {
                continue;
            }
            let (tu, tv) = (uc as u32, vc as u32);
            if !dst_masks[obj].get(tu, tv) {
                continue;
            }
            match dst_frame.depth.meters_at(tu, tv) {
                Some(d) if (d - cam.z).abs() <= 0.02 => {
                    pairs.push(PixelPair {
                        source: (u, v),
                        target: (tu, tv),
                    });
                }
                _ => continue,
            }
        }
    }
    pairs
}

// ---------------------------------------------------------------------------
// Scripted end-to-end suite
// ---------------------------------------------------------------------------

pub const SCENE_ID: &str = "scene0000_00";
pub const TARGET_CLASS: &str = "box";
/// Query whose script exercises every feedback round.
pub const FEEDBACK_QUERY_TEXT: &str = "the wooden box closest to the round table";
pub const FEEDBACK_CONDITION: &str = "closest to the round table";
/// Views offered to the model after detector preselection (all frames except
/// the one that shows neither object).
pub const PRESELECTED_VIEWS: usize = 11;

/// Paths and ground truth of a generated end-to-end suite.
pub struct E2eSuite {
    pub scene_root: PathBuf,
    pub fixture_root: PathBuf,
    pub queries: PathBuf,
    pub script: PathBuf,
    pub config: PathBuf,
    pub gt_a: [f64; 6],
    pub gt_b: [f64; 6],
}

pub fn analysis_reply(target_class: &str, conditions: &[&str]) -> String {
    serde_json::json!({
        "target_class": target_class,
        "attributes": [],
        "conditions": conditions,
    })
    .to_string()
}

pub fn image_reply(image_id: &str) -> String {
    serde_json::json!({
        "reasoning": "that view shows the object best",
        "target_image_id": image_id,
        "reference_image_ids": [],
    })
    .to_string()
}

pub fn object_reply(object_id: i64) -> String {
    serde_json::json!({
        "reasoning": "the highlighted candidate matches",
        "object_id": object_id,
    })
    .to_string()
}

/// The twelve camera set-ups of the end-to-end scene: a cluster of nearby
/// diagonal viewpoints per cube (so different views share visible surfaces
/// and pass the chamfer gate), one view of both cubes, one empty view.
fn e2e_cameras() -> Vec<([f64; 3], [f64; 3])> {
    let a = [0.0, 0.0, 0.0];
    let b = [2.5, 0.0, 0.0];
    vec![
        ([1.5, 1.2, -1.8], a),                 // 00001: cube A, anchor of q0001
        ([0.0, -4.0, 0.0], [0.0, -10.0, 0.0]), // 00002: sees nothing
        ([1.25, 2.8, -2.8], [1.25, 0.0, 0.0]), // 00003: sees A and B
        ([1.7, 1.0, -1.7], a),                 // 00004
        ([1.3, 1.4, -1.8], a),                 // 00005
        ([1.6, 1.3, -1.5], a),                 // 00006
        ([1.4, 1.1, -1.9], a),                 // 00007
        ([1.55, 1.25, -1.7], a),               // 00008
        ([1.0, 1.2, -1.8], b),                 // 00009: cube B, anchor of q0007
        ([0.8, 1.0, -1.7], b),                 // 00010
        ([1.2, 1.4, -1.8], b),                 // 00011
        ([1.1, 1.1, -2.0], b),                 // 00012
    ]
}

fn write_queries(path: &Path, gt_a: [f64; 6], gt_b: [f64; 6]) {
    let mk = |id: &str, text: &str, gt: [f64; 6]| Query {
        query_id: id.to_string(),
        scene_id: SCENE_ID.to_string(),
        text: text.to_string(),
        gt_box: Some(gt),
        splits: Vec::new(),
        gt_boxes: None,
        gt_target_index: None,
        gt_masks: None,
    };
    let mut queries = vec![
        mk("q0001", "the box in the corner of the room", gt_a),
        mk("q0002", FEEDBACK_QUERY_TEXT, gt_a),
        mk("q0003", "the box seen from the right", gt_a),
        mk("q0004", "the box seen from the left", gt_a),
        mk("q0005", "the box under the window", gt_a),
        mk("q0006", "the box beside the door", gt_a),
        mk("q0007", "the crate near the far wall", gt_b),
        mk("q0008", "the crate next to the shelf", gt_b),
        mk("q0009", "the crate by the radiator", gt_b),
        mk("q0010", "the crate behind the lamp", gt_b),
    ];
    // Two queries also carry distractor boxes for closest-centre matching.
    queries[0].gt_boxes = Some(vec![gt_a, gt_b]);
    queries[0].gt_target_index = Some(0);
    queries[6].gt_boxes = Some(vec![gt_a, gt_b]);
    queries[6].gt_target_index = Some(1);
    let mut lines = String::new();
    for q in &queries {
        lines.push_str(&serde_json::to_string(q).expect("query serializes"));
        lines.push('\n');
    }
    fs::write(path, lines).expect("write queries");
}

fn write_script(path: &Path) {
    let plain = |anchor: &str| vec![analysis_reply(TARGET_CLASS, &[]), image_reply(anchor)];
    let mut script = std::collections::BTreeMap::new();
    script.insert("q0001".to_string(), plain("00001"));
    // Burns the full retry budget: an unknown image ID, a view with no
    // detection of the class, then an out-of-range object ID.
    script.insert(
        "q0002".to_string(),
        vec![
            analysis_reply(TARGET_CLASS, &[FEEDBACK_CONDITION]),
            image_reply("99999"),
            image_reply("00002"),
            image_reply("00003"),
            object_reply(7),
            object_reply(0),
        ],
    );
    script.insert("q0003".to_string(), plain("00004"));
    script.insert("q0004".to_string(), plain("00005"));
    script.insert("q0005".to_string(), plain("00006"));
    script.insert("q0006".to_string(), plain("00007"));
    script.insert("q0007".to_string(), plain("00009"));
    script.insert("q0008".to_string(), plain("00010"));
    script.insert("q0009".to_string(), plain("00011"));
    script.insert("q0010".to_string(), plain("00012"));
    fs::write(
        path,
        serde_json::to_string_pretty(&script).expect("script serializes"),
    )
    .expect("write script");
}

/// Builds the full end-to-end suite under `dir`: a saved scene, perception
/// fixtures (detections, masks, matches), a queries file, a response script,
/// and a config file. Deterministic — two builds are byte-identical.
pub fn build_e2e_suite(dir: &Path) -> E2eSuite {
    let cube_a = Box3::cube([0.0, 0.0, 0.0], 1.0);
    let cube_b = Box3::cube([2.5, 0.0, 0.0], 1.0);
    let world = [cube_a, cube_b];
    let k = intrinsics(280.0, 320, 240);

    let rendered: Vec<(Frame, Vec<Mask2D>)> = e2e_cameras()
        .iter()
        .enumerate()
        .map(|(i, (eye, target))| make_frame(&world, &format!("{:05}", i + 1), *eye, *target, &k))
        .collect();

    let scene_root = dir.join("scans");
    let scene = Scene {
        scene_id: SCENE_ID.to_string(),
        frames: rendered.iter().map(|(f, _)| f.clone()).collect(),
    };
    scene.save(&scene_root).expect("save scene");

    let fixture_root = dir.join("fixtures");
    let mut writer = FixtureWriter::new(&fixture_root, SCENE_ID);
    for (frame, masks) in &rendered {
        for mask in masks {
            let Some(bbox) = tight_bbox(mask) else {
                continue;
            };
            writer.add_detection(&Detection2D {
                frame_id: frame.frame_id.clone(),
                label: TARGET_CLASS.to_string(),
                bbox,
                score: 0.9,
            });
            writer.add_mask(&bbox, mask).expect("write mask");
        }
    }
    for src in &rendered {
        for dst in &rendered {
            if src.0.frame_id == dst.0.frame_id {
                continue;
            }
            let pairs = reproject_matches(src, dst, 4);
            if !pairs.is_empty() {
                writer.add_matches(&src.0.frame_id, &dst.0.frame_id, &pairs);
            }
        }
    }
    writer.finish().expect("write fixtures");

    let queries = dir.join("queries.jsonl");
    write_queries(&queries, cube_a.gt(), cube_b.gt());
    let script = dir.join("script.json");
    write_script(&script);
    let config = dir.join("config.toml");
    fs::write(&config, "frame_stride = 1\n").expect("write config");

    E2eSuite {
        scene_root,
        fixture_root,
        queries,
        script,
        config,
        gt_a: cube_a.gt(),
        gt_b: cube_b.gt(),
    }
}

// ---------------------------------------------------------------------------
// Binary invocation
// ---------------------------------------------------------------------------

pub fn grounder_bin() -> &'static str {
    env!("CARGO_BIN_EXE_grounder")
}

pub fn run_grounder(args: &[&str]) -> Output {
    Command::new(grounder_bin())
        .args(args)
        .output()
        .expect("spawn grounder")
}

pub fn run_grounder_ok(args: &[&str]) -> Output {
    let out = run_grounder(args);
    assert!(
        out.status.success(),
        "grounder {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

pub fn read_json(path: &Path) -> serde_json::Value {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("read {path:?}: {e}"));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parse {path:?}: {e}"))
}
