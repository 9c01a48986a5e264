//! Shared helpers for unit tests across modules.

use image::{Rgb, RgbImage};
use nalgebra::Matrix4;

use crate::scene::{CameraIntrinsics, DepthMap, Frame, Pose, Scene, DEFAULT_DEPTH_DIVISOR};

/// A flat-gray frame with unit depth and centered intrinsics.
pub(crate) fn blank_frame(frame_id: &str, w: u32, h: u32) -> Frame {
    let intrinsics = CameraIntrinsics {
        fx: w as f64,
        fy: w as f64,
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
        width: w,
        height: h,
    };
    Frame {
        frame_id: frame_id.to_string(),
        color: RgbImage::from_pixel(w, h, Rgb([60, 60, 60])),
        depth: DepthMap::new(w, h, vec![1000; (w * h) as usize], DEFAULT_DEPTH_DIVISOR),
        color_intrinsics: intrinsics,
        depth_intrinsics: intrinsics,
        pose: Pose::new(Matrix4::identity()),
    }
}

/// A scene of `n` blank frames with distinct original IDs 00100, 00101, ...
/// (deliberately unlike the 1-based display IDs a grounding loop assigns).
pub(crate) fn blank_scene(n: usize, w: u32, h: u32) -> Scene {
    Scene {
        scene_id: "test-scene".to_string(),
        frames: (0..n)
            .map(|i| blank_frame(&format!("{:05}", 100 + i), w, h))
            .collect(),
    }
}
