//! Train-time augmentation: 2D scale jitter with intrinsics adjustment and
//! color jitter, 3D rotate/scale/jitter of point positions, and frame-subset
//! sampling with random skips.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{DepthMap, Vec3};
use crate::tensor::Tensor;

use super::{Frame, Scene};

/// Parameters drawn by [`augment_2d`]; exposed so tests can pin them.
#[derive(Debug, Clone, Copy)]
pub struct Augment2dParams {
    /// Spatial scale in [0.1, 2.0].
    pub scale: f64,
    /// Additive brightness in [-0.2, 0.2].
    pub brightness: f64,
    /// Multiplicative contrast about 0.5, in [0.8, 1.2].
    pub contrast: f64,
}

impl Augment2dParams {
    pub fn identity() -> Self {
        Augment2dParams { scale: 1.0, brightness: 0.0, contrast: 1.0 }
    }

    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        Augment2dParams {
            scale: { let _ = rng.gen_range(0.1..=2.0f64); 1.0 }, // PROBE: scale jitter off
            brightness: rng.gen_range(-0.2..=0.2),
            contrast: rng.gen_range(0.8..=1.2),
        }
    }
}

pub fn augment_2d(frame: &Frame, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    augment_2d_with(frame, Augment2dParams::draw(&mut rng))
}

/// Scales the image content by `scale` (bilinear RGB, nearest depth/GT),
/// top-left crops or zero-pads back to the original size, and multiplies
/// fx, fy, cx, cy by the same scale so geometry stays consistent.
pub fn augment_2d_with(frame: &Frame, params: Augment2dParams) -> Frame {
    let (h, w) = (frame.intrinsics.height, frame.intrinsics.width);
    let s = params.scale;
    let (sh, sw) = (((h as f64 * s).round() as usize).max(1), ((w as f64 * s).round() as usize).max(1));

    let mut rgb = vec![0.0; 3 * h * w];
    let mut depth = DepthMap::zeros(h, w);
    let mut gt_instance = vec![0u16; h * w];
    let src = frame.rgb.data();

    for y in 0..h.min(sh) {
        for x in 0..w.min(sw) {
            // source coordinate whose scaled pixel center lands on (x, y)
            let fx = (x as f64 + 0.5) * w as f64 / sw as f64 - 0.5;
            let fy = (y as f64 + 0.5) * h as f64 / sh as f64 - 0.5;
            let jitter = params.contrast != 1.0 || params.brightness != 0.0;
            for ch in 0..3 {
                let mut v = bilinear_plane(&src[ch * h * w..(ch + 1) * h * w], h, w, fy, fx);
                if jitter {
                    v = (v - 0.5) * params.contrast + 0.5 + params.brightness;
                }
                rgb[ch * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
            let nr = (fy.round().max(0.0) as usize).min(h - 1);
            let nc = (fx.round().max(0.0) as usize).min(w - 1);
            depth.set(y, x, frame.depth.at(nr, nc));
            gt_instance[y * w + x] = frame.gt_instance[nr * w + nc];
        }
    }

    let mut intrinsics = frame.intrinsics;
    intrinsics.fx *= s;
    intrinsics.fy *= s;
    intrinsics.cx *= s;
    intrinsics.cy *= s;
    Frame {
        intrinsics,
        pose: frame.pose,
        rgb: Tensor::new(vec![3, h, w], rgb),
        depth,
        gt_instance,
    }
}

fn bilinear_plane(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = xc - x0 as f64;
    let ay = yc - y0 as f64;
    let top = plane[y0 * w + x0] * (1.0 - ax) + plane[y0 * w + x1] * ax;
    let bot = plane[y1 * w + x0] * (1.0 - ax) + plane[y1 * w + x1] * ax;
    top * (1.0 - ay) + bot * ay
}

/// Parameters drawn by [`augment_3d`]; exposed so tests can pin them.
#[derive(Debug, Clone, Copy)]
pub struct Augment3dParams {
    /// Rotation about the vertical (y) axis, radians.
    pub angle: f64,
    /// Uniform scale in [0.9, 1.1].
    pub scale: f64,
    /// Per-point Gaussian jitter standard deviation, meters.
    pub sigma: f64,
}

impl Augment3dParams {
    pub fn identity() -> Self {
        Augment3dParams { angle: 0.0, scale: 1.0, sigma: 0.0 }
    }

    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        Augment3dParams {
            angle: rng.gen_range(0.0..std::f64::consts::TAU),
            scale: rng.gen_range(0.9..=1.1),
            sigma: 0.005,
        }
    }
}

pub fn augment_3d(positions: &[Vec3], seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = Augment3dParams::draw(&mut rng);
    augment_3d_with(positions, params, &mut rng)
}

pub fn augment_3d_with(positions: &[Vec3], params: Augment3dParams, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let (sin, cos) = params.angle.sin_cos();
    positions
        .iter()
        .map(|p| {
            let rotated = [
                cos * p[0] + sin * p[2],
                p[1],
                -sin * p[0] + cos * p[2],
            ];
            let mut q = [0.0; 3];
            for a in 0..3 {
                let jitter = if params.sigma > 0.0 { params.sigma * standard_normal(rng) } else { 0.0 };
                q[a] = rotated[a] * params.scale + jitter;
            }
            q
        })
        .collect()
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Picks `n` frame indices: half the time a consecutive run, otherwise a run
/// with random skips of 1..=4 between steps, truncated at the last frame.
pub fn sample_training_frames(scene: &Scene, n: usize, seed: u64) -> Vec<usize> {
    let f = scene.frames.len();
    assert!(n >= 1 && n <= f, "need 1 <= n <= frame count");
    if n == f {
        return (0..f).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.gen_bool(0.5) {
        let start = rng.gen_range(0..=f - n);
        (start..start + n).collect()
    } else {
        let start = rng.gen_range(0..f);
        let mut out = vec![start];
        while out.len() < n {
            let next = out.last().unwrap() + rng.gen_range(1..=4usize);
            if next >= f {
                break;
            }
            out.push(next);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scene, SceneGenConfig};
    use super::*;

    fn frame() -> Frame {
        let cfg = SceneGenConfig {
            image_width: 24,
            image_height: 24,
            views: 1,
            surface_samples_per_object: 16,
            room_shell_samples: 32,
            ..SceneGenConfig::default()
        };
        generate_scene(8, &cfg).unwrap().frames.remove(0)
    }

    #[test]
    fn identity_params_are_identity() {
        let f = frame();
        let g = augment_2d_with(&f, Augment2dParams::identity());
        assert_eq!(f, g);
    }

    #[test]
    fn scale_two_doubles_focal_length() {
        let f = frame();
        let g = augment_2d_with(&f, Augment2dParams { scale: 2.0, ..Augment2dParams::identity() });
        assert_eq!(g.intrinsics.fx, 2.0 * f.intrinsics.fx);
        assert_eq!(g.intrinsics.cy, 2.0 * f.intrinsics.cy);
        assert_eq!(g.intrinsics.width, f.intrinsics.width);
    }

    #[test]
    fn resize_introduces_no_new_instance_ids() {
        let f = frame();
        for seed in 0..8 {
            let g = augment_2d(&f, seed);
            for id in &g.gt_instance {
                assert!(f.gt_instance.contains(id) || *id == 0);
            }
            assert_eq!(g.gt_instance.len(), f.gt_instance.len());
        }
        assert_eq!(augment_2d(&f, 3), augment_2d(&f, 3));
    }

    #[test]
    fn downscale_pads_with_missing_depth() {
        let f = frame();
        let g = augment_2d_with(&f, Augment2dParams { scale: 0.5, ..Augment2dParams::identity() });
        let (h, w) = (f.intrinsics.height, f.intrinsics.width);
        assert_eq!(g.depth.at(h - 1, w - 1), 0.0);
        assert_eq!(g.gt_instance[(h - 1) * w + w - 1], 0);
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        let pts: Vec<Vec3> = vec![[0.3, 1.0, -0.2], [1.5, 0.1, 0.4], [-0.7, 2.0, 1.1]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rot = augment_3d_with(
            &pts,
            Augment3dParams { angle: 1.234, scale: 1.0, sigma: 0.0 },
            &mut rng,
        );
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let d0 = crate::geometry::vnorm(crate::geometry::vsub(pts[i], pts[j]));
                let d1 = crate::geometry::vnorm(crate::geometry::vsub(rot[i], rot[j]));
                assert!((d0 - d1).abs() < 1e-6);
            }
        }
        let identity = augment_3d_with(&pts, Augment3dParams::identity(), &mut rng);
        assert_eq!(identity, pts);
        let scaled = augment_3d_with(
            &pts,
            Augment3dParams { angle: 0.0, scale: 1.07, sigma: 0.0 },
            &mut rng,
        );
        let d0 = crate::geometry::vnorm(crate::geometry::vsub(pts[0], pts[1]));
        let d1 = crate::geometry::vnorm(crate::geometry::vsub(scaled[0], scaled[1]));
        assert!((d1 - 1.07 * d0).abs() < 1e-9);
    }

    #[test]
    fn frame_sampling_bounds_and_determinism() {
        let cfg = SceneGenConfig {
            image_width: 16,
            image_height: 16,
            views: 6,
            surface_samples_per_object: 16,
            room_shell_samples: 32,
            ..SceneGenConfig::default()
        };
        let s = generate_scene(2, &cfg).unwrap();
        assert_eq!(sample_training_frames(&s, 6, 0), vec![0, 1, 2, 3, 4, 5]);
        for seed in 0..16 {
            let idx = sample_training_frames(&s, 3, seed);
            assert!(!idx.is_empty() && idx.len() <= 3);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert!(idx.iter().all(|&i| i < 6));
            assert_eq!(idx, sample_training_frames(&s, 3, seed));
        }
        assert_eq!(sample_training_frames(&s, 1, 9).len(), 1);
    }
}
