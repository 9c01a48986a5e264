//! Lifting 2D instance masks into 3D: mask cleanup, depth unprojection,
//! chamfer-gated multi-view fusion, and axis-aligned box extraction.
//!
//! Each view contributes a point cloud obtained by eroding its mask, keeping
//! the largest connected components, and unprojecting the surviving pixels
//! through the depth map and camera pose. Candidate views whose clouds sit
//! too far (chamfer distance) from the anchor view's cloud are rejected; the
//! remaining clouds are fused, statistically de-noised, and boxed.

pub mod knn;

use image::GrayImage;
use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use knn::PointGrid;

use crate::perception::Mask2D;
use crate::scene::{CameraIntrinsics, DepthMap, Frame, Pose};

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("mask for frame {frame_id} is {got_w}x{got_h} but the frame color raster is {want_w}x{want_h}")]
    MaskDimensionMismatch {
        frame_id: String,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error(
        "anchor frame {frame_id} yielded no 3D points (empty mask after cleanup or no valid depth)"
    )]
    DegenerateAnchor { frame_id: String },
}

/// Tunables for the mask-to-box stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    /// Side of the square erosion kernel applied to each mask (odd).
    pub erosion_kernel: u32,
    /// Number of largest connected components kept after erosion.
    pub top_components: usize,
    /// Maximum anchor-to-view chamfer distance (meters) for a view to be fused.
    pub chamfer_threshold: f64,
    /// Neighbor count for statistical outlier removal.
    pub outlier_nb: usize,
    /// Standard-deviation multiplier for statistical outlier removal.
    pub outlier_std_ratio: f64,
    /// Total views per ensemble, anchor included.
    pub ensemble_n: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            erosion_kernel: 15,
            top_components: 2,
            chamfer_threshold: 0.1,
            outlier_nb: 5,
            outlier_std_ratio: 1.0,
            ensemble_n: 7,
        }
    }
}

/// Binary erosion with a `kernel` x `kernel` square structuring element.
/// Pixels outside the image count as false, so borders always erode away
/// when `kernel > 1`. Implemented with separable window sums.
pub fn erode_mask(mask: &Mask2D, kernel: u32) -> Mask2D {
    assert!(kernel % 2 == 1, "erosion kernel must be odd, got {kernel}");
    if kernel == 1 {
        return mask.clone();
    }
    let (w, h) = (mask.width as usize, mask.height as usize);
    let r = (kernel / 2) as usize;
    if w == 0 || h == 0 {
        return mask.clone();
    }

    // Horizontal pass: true pixels within [u-r, u+r] of each row.
    let mut row_counts = vec![0u32; w * h];
    let mut prefix = vec![0u32; w + 1];
    for v in 0..h {
        for u in 0..w {
            prefix[u + 1] = prefix[u] + u32::from(mask.get(u as u32, v as u32));
        }
        for u in 0..w {
            let leftmost = u.saturating_sub(r);
            let rightmost = (u + r + 1).min(w);
            row_counts[v * w + u] = prefix[rightmost] - prefix[leftmost];
        }
    }

    // Vertical pass over the horizontal counts; full means every pixel of
    // the kernel window is inside the image and set.
    let full = kernel * kernel;
    let mut out = Mask2D::new(mask.frame_id.clone(), mask.width, mask.height);
    let mut col_prefix = vec![0u32; h + 1];
    for u in 0..w {
        for v in 0..h {
            col_prefix[v + 1] = col_prefix[v] + row_counts[v * w + u];
        }
        for v in 0..h {
            let top = v.saturating_sub(r);
            let bottom = (v + r + 1).min(h);
            if col_prefix[bottom] - col_prefix[top] == full {
                out.set(u as u32, v as u32, true);
            }
        }
    }
    out
}

/// 8-connected components of the mask, in discovery order (ascending
/// row-major position of each component's first pixel). Pixels within each
/// component are listed in breadth-first order from that first pixel.
pub fn connected_components(mask: &Mask2D) -> Vec<Vec<(u32, u32)>> {
    let (w, h) = (mask.width, mask.height);
    let mut visited = vec![false; (w as usize) * (h as usize)];
    let idx = |u: u32, v: u32| (v * w + u) as usize;
    let mut components = Vec::new();
    for (u0, v0) in mask.iter_true() {
        if visited[idx(u0, v0)] {
            continue;
        }
        let mut component = Vec::new();
        let mut queue = std::collections::VecDeque::new();
        visited[idx(u0, v0)] = true;
        queue.push_back((u0, v0));
        while let Some((u, v)) = queue.pop_front() {
            component.push((u, v));
            for dv in -1i64..=1 {
                for du in -1i64..=1 {
                    if du == 0 && dv == 0 {
                        continue;
                    }
                    let (nu, nv) = (u as i64 + du, v as i64 + dv);
                    if nu < 0 || nv < 0 || nu >= w as i64 || nv >= h as i64 {
                        continue;
                    }
                    let (nu, nv) = (nu as u32, nv as u32);
                    if mask.get(nu, nv) && !visited[idx(nu, nv)] {
                        visited[idx(nu, nv)] = true;
                        queue.push_back((nu, nv));
                    }
                }
            }
        }
        components.push(component);
    }
    components
}

/// Keeps the `keep` largest 8-connected components (ties resolved toward the
/// component discovered first in row-major order) and drops the rest.
pub fn top_components(mask: &Mask2D, keep: usize) -> Mask2D {
    let mut components = connected_components(mask);
    // Stable sort: equal sizes stay in discovery order.
    components.sort_by(|a, b| b.len().cmp(&a.len()));
    let mut out = Mask2D::new(mask.frame_id.clone(), mask.width, mask.height);
    for component in components.into_iter().take(keep) {
        for (u, v) in component {
            out.set(u, v, true);
        }
    }
    out
}

/// Unprojects every masked pixel with valid depth into world space, in
/// row-major pixel order. The mask must be at the depth raster's resolution.
///
/// A pixel `(u, v)` with depth `d` meters maps to the camera-space point
/// `d * ((u + 0.5 - cx) / fx, (v + 0.5 - cy) / fy, 1)` and then through the
/// camera-to-world pose.
pub fn unproject_mask(
    mask: &Mask2D,
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
) -> Vec<Point3<f64>> {
    debug_assert_eq!((mask.width, mask.height), (depth.width, depth.height));
    let mut points = Vec::new();
    for (u, v) in mask.iter_true() {
        if u >= depth.width || v >= depth.height {
            continue;
        }
        let Some(d) = depth.meters_at(u, v) else {
            continue;
        };
        let x = d * (u as f64 + 0.5 - intrinsics.cx) / intrinsics.fx;
        let y = d * (v as f64 + 0.5 - intrinsics.cy) / intrinsics.fy;
        points.push(pose.transform_point(&Point3::new(x, y, d)));
    }
    points
}

/// Symmetric chamfer distance: the average of mean nearest-neighbor
/// distances in both directions, halved. `None` when either cloud is empty.
pub fn chamfer_l2(a: &[Point3<f64>], b: &[Point3<f64>]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let grid_a = PointGrid::build(a);
    let grid_b = PointGrid::build(b);
    let a_to_b: f64 = a
        .iter()
        .map(|p| grid_b.nearest(p).expect("b non-empty").1)
        .sum::<f64>()
        / a.len() as f64;
    let b_to_a: f64 = b
        .iter()
        .map(|p| grid_a.nearest(p).expect("a non-empty").1)
        .sum::<f64>()
        / b.len() as f64;
    Some(0.5 * (a_to_b + b_to_a))
}

/// Statistical outlier removal: a point is dropped when its mean distance to
/// its `nb` nearest neighbors (itself excluded) exceeds the cloud-wide mean
/// of that statistic by more than `std_ratio` sample standard deviations.
/// Clouds with at most `nb` points are returned unchanged.
pub fn remove_statistical_outliers(
    points: &[Point3<f64>],
    nb: usize,
    std_ratio: f64,
) -> Vec<Point3<f64>> {
    let n = points.len();
    if n <= nb || nb == 0 {
        return points.to_vec();
    }
    let grid = PointGrid::build(points);
    let mean_dists: Vec<f64> = (0..n)
        .map(|i| {
            let neighbors = grid.k_nearest_excluding(&points[i], nb, Some(i));
            neighbors.iter().map(|&(_, d)| d).sum::<f64>() / neighbors.len() as f64
        })
        .collect();
    let mean = mean_dists.iter().sum::<f64>() / n as f64;
    let var = mean_dists
        .iter()
        .map(|d| (d - mean) * (d - mean))
        .sum::<f64>()
        / (n - 1) as f64;
    let threshold = mean + std_ratio * var.sqrt();
    points
        .iter()
        .zip(&mean_dists)
        .filter(|&(_, &d)| d <= threshold)
        .map(|(p, _)| *p)
        .collect()
}

/// Axis-aligned box in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb3 {
    pub fn center(&self) -> [f64; 3] {
        [
            (self.min[0] + self.max[0]) / 2.0,
            (self.min[1] + self.max[1]) / 2.0,
            (self.min[2] + self.max[2]) / 2.0,
        ]
    }

    pub fn size(&self) -> [f64; 3] {
        [
            (self.max[0] - self.min[0]).max(0.0),
            (self.max[1] - self.min[1]).max(0.0),
            (self.max[2] - self.min[2]).max(0.0),
        ]
    }

    pub fn volume(&self) -> f64 {
        let s = self.size();
        s[0] * s[1] * s[2]
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, corner) in out.iter_mut().enumerate() {
            *corner = [
                if i & 1 == 0 { self.min[0] } else { self.max[0] },
                if i & 2 == 0 { self.min[1] } else { self.max[1] },
                if i & 4 == 0 { self.min[2] } else { self.max[2] },
            ];
        }
        out
    }

    /// From center + full extents, the common ground-truth exchange format.
    pub fn from_center_size(center: [f64; 3], size: [f64; 3]) -> Aabb3 {
        Aabb3 {
            min: [
                center[0] - size[0] / 2.0,
                center[1] - size[1] / 2.0,
                center[2] - size[2] / 2.0,
            ],
            max: [
                center[0] + size[0] / 2.0,
                center[1] + size[1] / 2.0,
                center[2] + size[2] / 2.0,
            ],
        }
    }
}

/// Tight bounding box of a cloud; `None` when empty.
pub fn aabb_of(points: &[Point3<f64>]) -> Option<Aabb3> {
    let first = points.first()?;
    let mut min = [first.x, first.y, first.z];
    let mut max = min;
    for p in points {
        for i in 0..3 {
            min[i] = min[i].min(p[i]);
            max[i] = max[i].max(p[i]);
        }
    }
    Some(Aabb3 { min, max })
}

/// One view entering the ensemble: a frame and its instance mask at the
/// frame's color resolution.
pub struct ViewInput<'a> {
    pub frame: &'a Frame,
    pub mask: Mask2D,
}

/// How a view fared in the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewRole {
    Anchor,
    Accepted,
    RejectedChamfer,
    RejectedEmpty,
}

/// Per-view accounting for transcripts and result files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewStat {
    pub frame_id: String,
    pub role: ViewRole,
    /// Chamfer distance to the anchor cloud (absent for the anchor itself
    /// and for views with an empty cloud).
    pub chamfer: Option<f64>,
    /// Points the view contributed before fusion.
    pub points: usize,
}

/// Result of multi-view fusion.
#[derive(Debug, Clone)]
pub struct EnsembleProjection {
    pub bbox: Aabb3,
    pub views: Vec<ViewStat>,
    /// Fused cloud size before outlier removal.
    pub union_points: usize,
    /// Fused cloud size after outlier removal.
    pub kept_points: usize,
    /// The anchor mask after erosion and component selection, at the anchor
    /// frame's color resolution.
    pub anchor_mask: Mask2D,
}

/// Cleans one mask (erosion, then largest components) at color resolution.
fn clean_mask(mask: &Mask2D, cfg: &ProjectionConfig) -> Mask2D {
    top_components(&erode_mask(mask, cfg.erosion_kernel), cfg.top_components)
}

fn check_dims(frame: &Frame, mask: &Mask2D) -> Result<(), ProjectionError> {
    let (want_w, want_h) = (frame.color.width(), frame.color.height());
    if (mask.width, mask.height) != (want_w, want_h) {
        return Err(ProjectionError::MaskDimensionMismatch {
            frame_id: frame.frame_id.clone(),
            got_w: mask.width,
            got_h: mask.height,
            want_w,
            want_h,
        });
    }
    Ok(())
}

/// Cleans, resamples, and unprojects one view's mask. Returns the cleaned
/// color-resolution mask alongside the world-space cloud.
fn project_view(
    view: &ViewInput,
    cfg: &ProjectionConfig,
) -> Result<(Mask2D, Vec<Point3<f64>>), ProjectionError> {
    check_dims(view.frame, &view.mask)?;
    let cleaned = clean_mask(&view.mask, cfg);
    let depth = &view.frame.depth;
    let at_depth = cleaned.resample_nearest(depth.width, depth.height);
    let points = unproject_mask(
        &at_depth,
        depth,
        &view.frame.depth_intrinsics,
        &view.frame.pose,
    );
    Ok((cleaned, points))
}

/// Fuses the anchor view with every candidate whose cloud lies within
/// `chamfer_threshold` of the anchor cloud, removes statistical outliers
/// from the union, and boxes what remains.
///
/// Candidates with an empty cloud (mask erased by cleanup, or no valid
/// depth) are rejected without a chamfer value. An anchor with an empty
/// cloud is an error — there is nothing to gate against.
pub fn ensemble_project(
    anchor: &ViewInput,
    candidates: &[ViewInput],
    cfg: &ProjectionConfig,
) -> Result<EnsembleProjection, ProjectionError> {
    let (anchor_mask, anchor_cloud) = project_view(anchor, cfg)?;
    if anchor_cloud.is_empty() {
        return Err(ProjectionError::DegenerateAnchor {
            frame_id: anchor.frame.frame_id.clone(),
        });
    }

    let mut views = vec![ViewStat {
        frame_id: anchor.frame.frame_id.clone(),
        role: ViewRole::Anchor,
        chamfer: None,
        points: anchor_cloud.len(),
    }];
    let mut union = anchor_cloud.clone();
    for candidate in candidates {
        let (_, cloud) = project_view(candidate, cfg)?;
        let chamfer = chamfer_l2(&anchor_cloud, &cloud);
        let role = match chamfer {
            None => ViewRole::RejectedEmpty,
            Some(d) if d <= cfg.chamfer_threshold => ViewRole::Accepted,
            Some(_) => ViewRole::RejectedChamfer,
        };
        if role == ViewRole::Accepted {
            union.extend_from_slice(&cloud);
        }
        views.push(ViewStat {
            frame_id: candidate.frame.frame_id.clone(),
            role,
            chamfer,
            points: cloud.len(),
        });
    }

    let union_points = union.len();
    let kept = remove_statistical_outliers(&union, cfg.outlier_nb, cfg.outlier_std_ratio);
    let bbox = aabb_of(&kept).expect("anchor cloud is non-empty and never fully filtered");
    Ok(EnsembleProjection {
        bbox,
        views,
        union_points,
        kept_points: kept.len(),
        anchor_mask,
    })
}

/// Renders a mask as an 8-bit gray image (255 = true) for artifact output.
pub fn mask_to_image(mask: &Mask2D) -> GrayImage {
    mask.to_gray()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::DEFAULT_DEPTH_DIVISOR;
    use approx::assert_relative_eq;
    use image::RgbImage;
    use nalgebra::{Matrix4, Vector3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from_rows(rows: &[&str]) -> Mask2D {
        let h = rows.len() as u32;
        let w = rows[0].len() as u32;
        Mask2D::from_fn("00000", w, h, |u, v| {
            rows[v as usize].as_bytes()[u as usize] == b'#'
        })
    }

    fn erode_brute(mask: &Mask2D, kernel: u32) -> Mask2D {
        let r = (kernel / 2) as i64;
        let (w, h) = (mask.width as i64, mask.height as i64);
        Mask2D::from_fn(mask.frame_id.clone(), mask.width, mask.height, |u, v| {
            (-r..=r).all(|dv| {
                (-r..=r).all(|du| {
                    let (x, y) = (u as i64 + du, v as i64 + dv);
                    x >= 0 && y >= 0 && x < w && y < h && mask.get(x as u32, y as u32)
                })
            })
        })
    }

    #[test]
    fn erosion_shrinks_rectangle_by_radius() {
        let mask = Mask2D::from_fn("00000", 20, 16, |u, v| {
            (3..15).contains(&u) && (2..12).contains(&v)
        });
        let eroded = erode_mask(&mask, 5);
        let expect = Mask2D::from_fn("00000", 20, 16, |u, v| {
            (5..13).contains(&u) && (4..10).contains(&v)
        });
        assert_eq!(eroded, expect);
        assert_eq!(erode_mask(&mask, 1), mask);
        // A kernel larger than the blob erases it.
        assert!(erode_mask(&mask, 25).is_empty_mask());
    }

    #[test]
    fn erosion_treats_image_border_as_false() {
        let full = Mask2D::from_fn("00000", 9, 7, |_, _| true);
        let eroded = erode_mask(&full, 3);
        let expect = Mask2D::from_fn("00000", 9, 7, |u, v| {
            (1..8).contains(&u) && (1..6).contains(&v)
        });
        assert_eq!(eroded, expect);
    }

    proptest! {
        #[test]
        fn erosion_matches_brute_force(
            w in 1u32..14,
            h in 1u32..14,
            bits in proptest::collection::vec(any::<bool>(), 0..196),
            kernel_radius in 0u32..4,
        ) {
            let mask = Mask2D::from_fn("00000", w, h, |u, v| {
                bits.get((v * w + u) as usize).copied().unwrap_or(false)
            });
            let kernel = 2 * kernel_radius + 1;
            prop_assert_eq!(erode_mask(&mask, kernel), erode_brute(&mask, kernel));
        }
    }

    #[test]
    fn components_are_eight_connected_and_ranked_by_size() {
        let mask = mask_from_rows(&[
            "##......#.",
            ".#.....#..",
            "..........",
            "....###...",
            "....###...",
        ]);
        // Blobs: 3-pixel diagonal chain (8-connected), 2-pixel anti-diagonal
        // chain at top right, and the 6-pixel rectangle.
        let comps = connected_components(&mask);
        assert_eq!(comps.len(), 3);
        assert_eq!(comps[0].len(), 3); // discovered first at (0,0)
        assert_eq!(comps[1].len(), 2);
        assert_eq!(comps[2].len(), 6);

        let top1 = top_components(&mask, 1);
        assert_eq!(top1.count(), 6);
        assert!(top1.get(5, 3));

        let top2 = top_components(&mask, 2);
        assert_eq!(top2.count(), 9);
        assert!(top2.get(0, 0) && !top2.get(8, 0));

        assert_eq!(top_components(&mask, 9).count(), mask.count());
        assert!(top_components(&mask, 0).is_empty_mask());
    }

    #[test]
    fn component_size_ties_keep_row_major_discovery_order() {
        let mask = mask_from_rows(&["......##..", "##........"]);
        // Both components have two pixels; the one containing the earliest
        // row-major pixel (6,0) wins.
        let top1 = top_components(&mask, 1);
        assert!(top1.get(6, 0) && top1.get(7, 0));
        assert!(!top1.get(0, 1));
    }

    /// Union-find oracle for connected components.
    fn components_brute(mask: &Mask2D) -> Vec<Vec<(u32, u32)>> {
        let (w, h) = (mask.width as i64, mask.height as i64);
        let mut parent: Vec<usize> = (0..(w * h) as usize).collect();
        fn find(parent: &mut Vec<usize>, x: usize) -> usize {
            if parent[x] != x {
                let root = find(parent, parent[x]);
                parent[x] = root;
            }
            parent[x]
        }
        for v in 0..h {
            for u in 0..w {
                if !mask.get(u as u32, v as u32) {
                    continue;
                }
                for dv in -1..=1i64 {
                    for du in -1..=1i64 {
                        let (nu, nv) = (u + du, v + dv);
                        if nu < 0 || nv < 0 || nu >= w || nv >= h {
                            continue;
                        }
                        if mask.get(nu as u32, nv as u32) {
                            let a = find(&mut parent, (v * w + u) as usize);
                            let b = find(&mut parent, (nv * w + nu) as usize);
                            parent[a.max(b)] = a.min(b);
                        }
                    }
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<(u32, u32)>> =
            std::collections::BTreeMap::new();
        for v in 0..h {
            for u in 0..w {
                if mask.get(u as u32, v as u32) {
                    let root = find(&mut parent, (v * w + u) as usize);
                    groups.entry(root).or_default().push((u as u32, v as u32));
                }
            }
        }
        groups.into_values().collect()
    }

    proptest! {
        #[test]
        fn components_match_union_find_oracle(
            w in 1u32..12,
            h in 1u32..12,
            bits in proptest::collection::vec(any::<bool>(), 0..144),
        ) {
            let mask = Mask2D::from_fn("00000", w, h, |u, v| {
                bits.get((v * w + u) as usize).copied().unwrap_or(false)
            });
            let mut got: Vec<Vec<(u32, u32)>> = connected_components(&mask)
                .into_iter()
                .map(|mut c| { c.sort(); c })
                .collect();
            got.sort();
            let mut want = components_brute(&mask);
            for c in &mut want { c.sort(); }
            want.sort();
            prop_assert_eq!(got, want);
        }
    }

    fn identity_pose() -> Pose {
        Pose::new(Matrix4::identity())
    }

    #[test]
    fn unprojection_fixtures() {
        // fx=fy=1, cx=cy=0: pixel (1,1) at 1m -> (1.5, 1.5, 1.0).
        let intr = CameraIntrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 4,
            height: 4,
        };
        let depth = DepthMap::new(4, 4, vec![1000; 16], DEFAULT_DEPTH_DIVISOR);
        let mut mask = Mask2D::new("00000", 4, 4);
        mask.set(1, 1, true);
        let pts = unproject_mask(&mask, &depth, &intr, &identity_pose());
        assert_eq!(pts, vec![Point3::new(1.5, 1.5, 1.0)]);

        // The pixel under the principal point maps to the optical axis.
        let centered = CameraIntrinsics {
            fx: 2.0,
            fy: 2.0,
            cx: 1.5,
            cy: 1.5,
            width: 4,
            height: 4,
        };
        let pts = unproject_mask(&mask, &depth, &centered, &identity_pose());
        assert_eq!(pts, vec![Point3::new(0.0, 0.0, 1.0)]);

        // A pure translation moves the cloud rigidly.
        let mut m = Matrix4::identity();
        m[(0, 3)] = 10.0;
        m[(1, 3)] = -2.0;
        m[(2, 3)] = 0.5;
        let pts = unproject_mask(&mask, &depth, &centered, &Pose::new(m));
        assert_eq!(pts, vec![Point3::new(10.0, -2.0, 1.5)]);

        // Depth scales the ray; invalid (zero) depth drops the pixel.
        let depth2 = DepthMap::new(
            4,
            4,
            {
                let mut d = vec![0u16; 16];
                d[5] = 2000;
                d
            },
            DEFAULT_DEPTH_DIVISOR,
        );
        let mut mask2 = Mask2D::new("00000", 4, 4);
        mask2.set(1, 1, true);
        mask2.set(2, 2, true); // zero depth -> skipped
        let pts = unproject_mask(&mask2, &depth2, &intr, &identity_pose());
        assert_eq!(pts, vec![Point3::new(3.0, 3.0, 2.0)]);
    }

    #[test]
    fn chamfer_fixtures() {
        let a = vec![Point3::new(0.0, 0.0, 0.0)];
        let b = vec![Point3::new(0.3, 0.0, 0.0)];
        assert_relative_eq!(chamfer_l2(&a, &a).unwrap(), 0.0);
        assert_relative_eq!(chamfer_l2(&a, &b).unwrap(), 0.3, epsilon = 1e-12);

        // Asymmetric cloud sizes: a->b means (0 + 1)/2, b->a means 0.
        let a2 = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)];
        let b2 = vec![Point3::new(0.0, 0.0, 0.0)];
        assert_relative_eq!(chamfer_l2(&a2, &b2).unwrap(), 0.25, epsilon = 1e-12);
        // Symmetric by construction.
        assert_relative_eq!(
            chamfer_l2(&a2, &b2).unwrap(),
            chamfer_l2(&b2, &a2).unwrap(),
            epsilon = 1e-12
        );

        assert!(chamfer_l2(&a, &[]).is_none());
        assert!(chamfer_l2(&[], &a).is_none());
    }

    #[test]
    fn chamfer_is_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Point3<f64>> {
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect()
        };
        let a = cloud(&mut rng, 60);
        let b = cloud(&mut rng, 45);
        let base = chamfer_l2(&a, &b).unwrap();

        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let t = Vector3::new(4.0, -2.0, 7.0);
        let map =
            |pts: &[Point3<f64>]| -> Vec<Point3<f64>> { pts.iter().map(|p| rot * p + t).collect() };
        let moved = chamfer_l2(&map(&a), &map(&b)).unwrap();
        assert_relative_eq!(base, moved, epsilon = 1e-9);
    }

    #[test]
    fn outlier_removal_drops_the_lone_far_point() {
        let mut points: Vec<Point3<f64>> = (0..4)
            .flat_map(|i| (0..4).map(move |j| Point3::new(i as f64 * 0.05, j as f64 * 0.05, 0.0)))
            .collect();
        points.push(Point3::new(100.0, 0.0, 0.0));
        let kept = remove_statistical_outliers(&points, 5, 1.0);
        assert_eq!(kept.len(), 16);
        assert!(kept.iter().all(|p| p.x < 1.0));

        // Small clouds pass through untouched.
        let tiny = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(9.0, 9.0, 9.0)];
        assert_eq!(remove_statistical_outliers(&tiny, 5, 1.0), tiny);
        assert_eq!(remove_statistical_outliers(&tiny, 2, 1.0), tiny);
    }

    #[test]
    fn outlier_removal_trims_loose_grid_corners() {
        // 5x5 unit grid, nb = 3: interior and edge points average 1.0 to
        // their three nearest neighbors, corners average (2 + sqrt 2) / 3.
        // That puts exactly the four corners beyond mean + 1 sigma.
        let points: Vec<Point3<f64>> = (0..5)
            .flat_map(|i| (0..5).map(move |j| Point3::new(i as f64, j as f64, 0.0)))
            .collect();
        let kept = remove_statistical_outliers(&points, 3, 1.0);
        assert_eq!(kept.len(), 21);
        for corner in
            [(0.0, 0.0), (0.0, 4.0), (4.0, 0.0), (4.0, 4.0)].map(|(x, y)| Point3::new(x, y, 0.0))
        {
            assert!(!kept.contains(&corner));
        }
    }

    #[test]
    fn outlier_removal_keeps_symmetric_clouds_intact() {
        // Three isolated pairs, each 1.0 apart: with nb = 1 every point has
        // the same statistic, sigma is exactly zero, and nothing is dropped.
        let points = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(10.0, 10.0, 10.0),
            Point3::new(11.0, 10.0, 10.0),
            Point3::new(-5.0, 3.0, 2.0),
            Point3::new(-4.0, 3.0, 2.0),
        ];
        let kept = remove_statistical_outliers(&points, 1, 1.0);
        assert_eq!(kept, points);
    }

    #[test]
    fn aabb_and_conversions() {
        let pts = vec![
            Point3::new(1.0, -2.0, 3.0),
            Point3::new(-1.0, 5.0, 0.0),
            Point3::new(0.0, 0.0, 9.0),
        ];
        let bb = aabb_of(&pts).unwrap();
        assert_eq!(bb.min, [-1.0, -2.0, 0.0]);
        assert_eq!(bb.max, [1.0, 5.0, 9.0]);
        assert_eq!(bb.center(), [0.0, 1.5, 4.5]);
        assert_eq!(bb.size(), [2.0, 7.0, 9.0]);
        assert_relative_eq!(bb.volume(), 2.0 * 7.0 * 9.0);
        assert!(aabb_of(&[]).is_none());

        let c = Aabb3::from_center_size([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]);
        assert_eq!(c.min, [0.0, 0.0, 0.0]);
        assert_eq!(c.max, [2.0, 4.0, 6.0]);
        assert_eq!(c.corners().len(), 8);
    }

    /// Flat-depth frame looking down +z with a controllable plane distance.
    fn plane_frame(frame_id: &str, depth_m: f64) -> Frame {
        let (w, h) = (16u32, 16u32);
        let intr = CameraIntrinsics {
            fx: 8.0,
            fy: 8.0,
            cx: 8.0,
            cy: 8.0,
            width: w,
            height: h,
        };
        Frame {
            frame_id: frame_id.to_string(),
            color: RgbImage::new(w, h),
            depth: DepthMap::new(
                w,
                h,
                vec![(depth_m * 1000.0) as u16; (w * h) as usize],
                DEFAULT_DEPTH_DIVISOR,
            ),
            color_intrinsics: intr,
            depth_intrinsics: intr,
            pose: identity_pose(),
        }
    }

    fn center_square(frame_id: &str) -> Mask2D {
        Mask2D::from_fn(frame_id, 16, 16, |u, v| {
            (4..12).contains(&u) && (4..12).contains(&v)
        })
    }

    fn test_cfg() -> ProjectionConfig {
        ProjectionConfig {
            erosion_kernel: 1,
            top_components: 2,
            chamfer_threshold: 0.1,
            outlier_nb: 3,
            outlier_std_ratio: 1.0,
            ensemble_n: 7,
        }
    }

    #[test]
    fn ensemble_accepts_coincident_views_and_rejects_distant_ones() {
        let a = plane_frame("00000", 1.0);
        let b = plane_frame("00001", 1.0);
        let c = plane_frame("00002", 3.0);
        let cfg = test_cfg();
        let out = ensemble_project(
            &ViewInput {
                frame: &a,
                mask: center_square("00000"),
            },
            &[
                ViewInput {
                    frame: &b,
                    mask: center_square("00001"),
                },
                ViewInput {
                    frame: &c,
                    mask: center_square("00002"),
                },
            ],
            &cfg,
        )
        .unwrap();

        assert_eq!(out.views.len(), 3);
        assert_eq!(out.views[0].role, ViewRole::Anchor);
        assert_eq!(out.views[1].role, ViewRole::Accepted);
        assert_relative_eq!(out.views[1].chamfer.unwrap(), 0.0);
        assert_eq!(out.views[2].role, ViewRole::RejectedChamfer);
        assert!(out.views[2].chamfer.unwrap() > 0.1);

        // Two coincident planes: the union duplicates the anchor cloud.
        assert_eq!(out.union_points, 2 * out.views[0].points);
        assert_eq!(out.kept_points, out.union_points); // uniform plane, no outliers
                                                       // The box hugs the masked plane patch at z = 1.
        assert_relative_eq!(out.bbox.min[2], 1.0);
        assert_relative_eq!(out.bbox.max[2], 1.0);
        assert_relative_eq!(out.bbox.min[0], (4.0 + 0.5 - 8.0) / 8.0);
        assert_relative_eq!(out.bbox.max[0], (11.0 + 0.5 - 8.0) / 8.0);
        // Anchor mask passes through unchanged under a unit kernel.
        assert_eq!(out.anchor_mask, center_square("00000"));
    }

    #[test]
    fn ensemble_flags_empty_candidates_and_degenerate_anchors() {
        let a = plane_frame("00000", 1.0);
        let b = plane_frame("00001", 1.0);
        let cfg = test_cfg();

        let out = ensemble_project(
            &ViewInput {
                frame: &a,
                mask: center_square("00000"),
            },
            &[ViewInput {
                frame: &b,
                mask: Mask2D::new("00001", 16, 16),
            }],
            &cfg,
        )
        .unwrap();
        assert_eq!(out.views[1].role, ViewRole::RejectedEmpty);
        assert_eq!(out.views[1].chamfer, None);
        assert_eq!(out.views[1].points, 0);

        let err = ensemble_project(
            &ViewInput {
                frame: &a,
                mask: Mask2D::new("00000", 16, 16),
            },
            &[],
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, ProjectionError::DegenerateAnchor { .. }));

        let err = ensemble_project(
            &ViewInput {
                frame: &a,
                mask: Mask2D::new("00000", 8, 8),
            },
            &[],
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, ProjectionError::MaskDimensionMismatch { .. }));
    }

    #[test]
    fn erosion_inside_ensemble_trims_mask_borders() {
        let a = plane_frame("00000", 1.0);
        let mut cfg = test_cfg();
        cfg.erosion_kernel = 3;
        let out = ensemble_project(
            &ViewInput {
                frame: &a,
                mask: center_square("00000"),
            },
            &[],
            &cfg,
        )
        .unwrap();
        let expect = Mask2D::from_fn("00000", 16, 16, |u, v| {
            (5..11).contains(&u) && (5..11).contains(&v)
        });
        assert_eq!(out.anchor_mask, expect);
        assert_eq!(out.views[0].points, 36);
    }

    #[test]
    fn default_config_round_trips_through_serde() {
        let cfg = ProjectionConfig::default();
        assert_eq!(cfg.erosion_kernel, 15);
        assert_eq!(cfg.top_components, 2);
        assert_relative_eq!(cfg.chamfer_threshold, 0.1);
        assert_eq!(cfg.outlier_nb, 5);
        assert_relative_eq!(cfg.outlier_std_ratio, 1.0);
        assert_eq!(cfg.ensemble_n, 7);

        let parsed: ProjectionConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed.erosion_kernel, cfg.erosion_kernel);
        let parsed: ProjectionConfig = serde_json::from_str(r#"{"erosion_kernel": 7}"#).unwrap();
        assert_eq!(parsed.erosion_kernel, 7);
        assert_eq!(parsed.ensemble_n, 7);
        assert!(serde_json::from_str::<ProjectionConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
