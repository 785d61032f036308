//! Analytic ray-cast scene renderer: a rectangular room with rejection-
//! sampled cuboids and spheres, cameras on a jittered horizontal ring, and
//! exact per-pixel depth and instance ground truth.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{vadd, vdot, vnormalize, vscale, vsub, CameraIntrinsics, CameraPose, DepthMap, Vec3};
use crate::tensor::Tensor;

use super::{Frame, InstanceLabel, Scene, SceneError, SurfacePoint, Vocabulary, BACKGROUND_CLASS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Cuboid { half_extents: Vec3 },
    Sphere { radius: f64 },
}

/// Generator-internal placed object; the persisted [`Scene`] keeps only its
/// [`InstanceLabel`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub center: Vec3,
    pub albedo: [f64; 3],
    pub class_id: usize,
    pub instance_id: u16,
}

impl SceneObject {
    pub fn aabb(&self) -> (Vec3, Vec3) {
        let r = match self.shape {
            Shape::Cuboid { half_extents: h } => h,
            Shape::Sphere { radius: r } => [r; 3],
        };
        (vsub(self.center, r), vadd(self.center, r))
    }
}

#[derive(Debug, Clone)]
pub struct SceneGenConfig {
    /// Room extents in meters; interior spans x,z in [-sx/2, sx/2] and y in [0, sy].
    pub room_size: Vec3,
    pub object_count_min: usize,
    pub object_count_max: usize,
    /// Full extent (cuboid side / sphere diameter) range in meters.
    pub object_size_min: f64,
    pub object_size_max: f64,
    pub views: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub ring_radius: f64,
    pub camera_height: f64,
    pub surface_samples_per_object: usize,
    pub room_shell_samples: usize,
    /// Divider slab through the room center, rendered as background; makes
    /// view subsets see disjoint halves.
    pub central_occluder: bool,
    /// Pairs of same-class, same-albedo objects mirrored across the divider.
    pub duplicate_pairs: usize,
    /// A layout is rejected unless every object covers at least this many
    /// pixels (at 64x64, scaled with image area) in its best single view;
    /// keeps instances resolvable on the 1/4-stride token grid instead of
    /// leaving unlearnable slivers.
    pub min_visible_pixels: usize,
    pub vocabulary: Vocabulary,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            room_size: [4.0, 3.0, 4.0],
            object_count_min: 3,
            object_count_max: 6,
            // floor sized so objects stay resolvable on the 1/4-stride token
            // grid at 64x64 from ring distance
            object_size_min: 0.5,
            object_size_max: 1.0,
            views: 4,
            image_width: 64,
            image_height: 64,
            ring_radius: 1.6,
            camera_height: 1.5,
            surface_samples_per_object: 512,
            room_shell_samples: 2048,
            central_occluder: false,
            duplicate_pairs: 0,
            min_visible_pixels: 160,
            vocabulary: Vocabulary::default_desk(),
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self, query_budget: usize) -> Result<(), SceneError> {
        if self.room_size.iter().any(|&s| s <= 0.0) {
            return Err(SceneError::Generation("room size must be positive".into()));
        }
        if self.object_count_max > query_budget {
            return Err(SceneError::Generation(format!(
                "object count {} exceeds query budget {}",
                self.object_count_max, query_budget
            )));
        }
        if self.object_count_min > self.object_count_max {
            return Err(SceneError::Generation("object count range empty".into()));
        }
        if self.views < 1 {
            return Err(SceneError::Generation("need at least one view".into()));
        }
        self.vocabulary.validate().map_err(SceneError::Generation)?;
        Ok(())
    }
}

const LIGHT_DIR: Vec3 = [0.3, 0.8, 0.5];
const ROOM_ALBEDO: [f64; 3] = [0.55, 0.55, 0.58];
const MAX_ATTEMPTS: usize = 10_000;

/// Base albedo per object class; per-object jitter keeps classes linearly
/// separable by color.
fn class_albedo(class_id: usize) -> [f64; 3] {
    match class_id {
        1 => [0.85, 0.15, 0.12],
        2 => [0.15, 0.8, 0.18],
        3 => [0.12, 0.2, 0.85],
        4 => [0.88, 0.82, 0.12],
        _ => [0.5, 0.5, 0.5],
    }
}

fn class_is_box(class_id: usize) -> bool {
    class_id == 1 || class_id == 2
}

struct Room {
    half_x: f64,
    height: f64,
    half_z: f64,
}

fn occluder_aabb(room: &Room) -> (Vec3, Vec3) {
    (
        [-0.12, 0.0, -room.half_z * 0.78],
        [0.12, room.height * 0.88, room.half_z * 0.78],
    )
}

fn aabb_overlap(a: (Vec3, Vec3), b: (Vec3, Vec3), margin: f64) -> bool {
    (0..3).all(|i| a.0[i] - margin < b.1[i] && b.0[i] - margin < a.1[i])
}

fn sample_object(
    rng: &mut ChaCha8Rng,
    cfg: &SceneGenConfig,
    room: &Room,
    class_id: usize,
    instance_id: u16,
    side: Option<f64>,
) -> SceneObject {
    let base = class_albedo(class_id);
    let albedo = [
        (base[0] + rng.gen_range(-0.06..0.06)).clamp(0.02, 0.98),
        (base[1] + rng.gen_range(-0.06..0.06)).clamp(0.02, 0.98),
        (base[2] + rng.gen_range(-0.06..0.06)).clamp(0.02, 0.98),
    ];
    let shape = if class_is_box(class_id) {
        let h = [
            rng.gen_range(cfg.object_size_min..cfg.object_size_max) / 2.0,
            rng.gen_range(cfg.object_size_min..cfg.object_size_max) / 2.0,
            rng.gen_range(cfg.object_size_min..cfg.object_size_max) / 2.0,
        ];
        Shape::Cuboid { half_extents: h }
    } else {
        Shape::Sphere { radius: rng.gen_range(cfg.object_size_min..cfg.object_size_max) / 2.0 }
    };
    let (lo, hi) = match shape {
        Shape::Cuboid { half_extents: h } => (h, h),
        Shape::Sphere { radius: r } => ([r; 3], [r; 3]),
    };
    let max_x = (room.half_x - 0.25 - lo[0]).max(0.05);
    let max_z = (room.half_z - 0.25 - lo[2]).max(0.05);
    let x = match side {
        Some(s) => {
            let inner = if cfg.central_occluder { 0.45 + lo[0] } else { 0.1 };
            s * rng.gen_range(inner.min(max_x - 0.01)..max_x)
        }
        None => rng.gen_range(-max_x..max_x),
    };
    let y = rng.gen_range(lo[1] + 0.05..(room.height - hi[1] - 0.3).max(lo[1] + 0.1));
    let z = rng.gen_range(-max_z..max_z);
    SceneObject { shape, center: [x, y, z], albedo, class_id, instance_id }
}

fn place_objects(
    rng: &mut ChaCha8Rng,
    cfg: &SceneGenConfig,
    room: &Room,
) -> Result<Vec<SceneObject>, SceneError> {
    let object_classes = cfg.vocabulary.object_classes();
    if object_classes.is_empty() && (cfg.object_count_min > 0 || cfg.duplicate_pairs > 0) {
        return Err(SceneError::Generation("vocabulary has no object classes".into()));
    }
    let count = if cfg.object_count_min == cfg.object_count_max {
        cfg.object_count_min
    } else {
        rng.gen_range(cfg.object_count_min..=cfg.object_count_max)
    };
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut attempts = 0;
    let mut next_id: u16 = 1;
    let occ = occluder_aabb(room);

    let try_place = |objects: &mut Vec<SceneObject>,
                         rng: &mut ChaCha8Rng,
                         attempts: &mut usize,
                         class_id: usize,
                         id: u16,
                         side: Option<f64>,
                         forced: Option<SceneObject>|
     -> Result<SceneObject, SceneError> {
        loop {
            *attempts += 1;
            if *attempts > MAX_ATTEMPTS {
                return Err(SceneError::Generation(format!(
                    "rejection sampling failed after {} attempts",
                    MAX_ATTEMPTS
                )));
            }
            let cand = match &forced {
                Some(obj) => {
                    let mut o = obj.clone();
                    // mirror across the divider with positional jitter
                    o.center[0] = -o.center[0] + rng.gen_range(-0.05..0.05);
                    o.center[2] += rng.gen_range(-0.3..0.3);
                    o.instance_id = id;
                    o
                }
                None => sample_object(rng, cfg, room, class_id, id, side),
            };
            let bb = cand.aabb();
            let clash = objects.iter().any(|o| aabb_overlap(bb, o.aabb(), 0.04))
                || (cfg.central_occluder && aabb_overlap(bb, occ, 0.04))
                || bb.0[1] < 0.0
                || bb.1[1] > room.height
                || bb.0[0] < -room.half_x
                || bb.1[0] > room.half_x
                || bb.0[2] < -room.half_z
                || bb.1[2] > room.half_z;
            if !clash {
                objects.push(cand.clone());
                return Ok(cand);
            }
        }
    };

    for _ in 0..cfg.duplicate_pairs {
        let class_id = object_classes[rng.gen_range(0..object_classes.len())];
        let first = try_place(&mut objects, rng, &mut attempts, class_id, next_id, Some(1.0), None)?;
        next_id += 1;
        try_place(&mut objects, rng, &mut attempts, class_id, next_id, Some(-1.0), Some(first))?;
        next_id += 1;
    }
    while objects.len() < count.max(2 * cfg.duplicate_pairs) && objects.len() < count {
        let class_id = object_classes[rng.gen_range(0..object_classes.len())];
        let side = if cfg.central_occluder {
            Some(if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        } else {
            None
        };
        try_place(&mut objects, rng, &mut attempts, class_id, next_id, side, None)?;
        next_id += 1;
    }
    Ok(objects)
}

/// Nearest positive hit distance along an unnormalized ray, plus surface
/// normal at the hit.
fn intersect_object(obj: &SceneObject, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3)> {
    match obj.shape {
        Shape::Cuboid { half_extents: h } => {
            let lo = vsub(obj.center, h);
            let hi = vadd(obj.center, h);
            intersect_aabb(lo, hi, origin, dir)
        }
        Shape::Sphere { radius: r } => {
            let oc = vsub(origin, obj.center);
            let a = vdot(dir, dir);
            let b = 2.0 * vdot(oc, dir);
            let c = vdot(oc, oc) - r * r;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t0 = (-b - sq) / (2.0 * a);
            let t1 = (-b + sq) / (2.0 * a);
            let t = if t0 > 1e-9 { t0 } else if t1 > 1e-9 { t1 } else { return None };
            let hit = vadd(origin, vscale(dir, t));
            Some((t, vnormalize(vsub(hit, obj.center))))
        }
    }
}

fn intersect_aabb(lo: Vec3, hi: Vec3, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3)> {
    let mut tmin = -f64::INFINITY;
    let mut tmax = f64::INFINITY;
    let mut axis_min = 0;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut t0, mut t1) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > tmin {
            tmin = t0;
            axis_min = a;
        }
        tmax = tmax.min(t1);
        if tmin > tmax {
            return None;
        }
    }
    if tmin <= 1e-9 {
        return None;
    }
    let mut normal = [0.0; 3];
    normal[axis_min] = if dir[axis_min] > 0.0 { -1.0 } else { 1.0 };
    Some((tmin, normal))
}

/// Exit face of the room seen from inside; the normal points inward.
fn intersect_room_interior(room: &Room, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3)> {
    let lo = [-room.half_x, 0.0, -room.half_z];
    let hi = [room.half_x, room.height, room.half_z];
    let mut tmax = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 1.0;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            continue;
        }
        let inv = 1.0 / dir[a];
        let (t0, t1) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        let texit = t0.max(t1);
        if texit < tmax {
            tmax = texit;
            axis = a;
            sign = if dir[a] > 0.0 { -1.0 } else { 1.0 };
        }
    }
    if !tmax.is_finite() || tmax <= 1e-9 {
        return None;
    }
    let mut normal = [0.0; 3];
    normal[axis] = sign;
    Some((tmax, normal))
}

fn shade(albedo: [f64; 3], normal: Vec3) -> [f64; 3] {
    let l = vnormalize(LIGHT_DIR);
    let lambert = vdot(normal, l).max(0.0);
    let b = 0.45 + 0.55 * lambert;
    [albedo[0] * b, albedo[1] * b, albedo[2] * b]
}

fn quantize8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render_frame(
    cfg: &SceneGenConfig,
    room: &Room,
    objects: &[SceneObject],
    intrinsics: CameraIntrinsics,
    pose: CameraPose,
) -> Frame {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let mut rgb = vec![0.0; 3 * h * w];
    let mut depth = DepthMap::zeros(h, w);
    let mut gt_instance = vec![0u16; h * w];
    let occ = occluder_aabb(room);
    for v in 0..h {
        for u in 0..w {
            // ray with unit optical-axis component: hit t equals depth
            let dir_cam = [
                (u as f64 - intrinsics.cx) / intrinsics.fx,
                (v as f64 - intrinsics.cy) / intrinsics.fy,
                1.0,
            ];
            let dir = crate::geometry::mat_vec(&pose.rotation, dir_cam);
            let origin = pose.translation;
            let mut best: Option<(f64, Vec3, [f64; 3], u16)> = None;
            for obj in objects {
                if let Some((t, n)) = intersect_object(obj, origin, dir) {
                    if best.as_ref().map_or(true, |b| t < b.0) {
                        best = Some((t, n, obj.albedo, obj.instance_id));
                    }
                }
            }
            if cfg.central_occluder {
                if let Some((t, n)) = intersect_aabb(occ.0, occ.1, origin, dir) {
                    if best.as_ref().map_or(true, |b| t < b.0) {
                        best = Some((t, n, ROOM_ALBEDO, 0));
                    }
                }
            }
            if let Some((t, n)) = intersect_room_interior(room, origin, dir) {
                if best.as_ref().map_or(true, |b| t < b.0) {
                    best = Some((t, n, ROOM_ALBEDO, 0));
                }
            }
            if let Some((t, n, albedo, inst)) = best {
                let c = shade(albedo, n);
                for ch in 0..3 {
                    rgb[ch * h * w + v * w + u] = quantize8(c[ch]);
                }
                depth.set(v, u, t);
                gt_instance[v * w + u] = inst;
            }
        }
    }
    Frame {
        intrinsics,
        pose,
        rgb: Tensor::new(vec![3, h, w], rgb),
        depth,
        gt_instance,
    }
}

fn sample_surface(
    rng: &mut ChaCha8Rng,
    objects: &[SceneObject],
    room: &Room,
    cfg: &SceneGenConfig,
) -> Vec<SurfacePoint> {
    let mut cloud = Vec::new();
    for obj in objects {
        for _ in 0..cfg.surface_samples_per_object {
            let p = match obj.shape {
                Shape::Sphere { radius: r } => {
                    // uniform direction via gaussian normalization
                    let d = vnormalize([
                        gaussian(rng),
                        gaussian(rng),
                        gaussian(rng),
                    ]);
                    vadd(obj.center, vscale(d, r))
                }
                Shape::Cuboid { half_extents: h } => {
                    sample_aabb_surface(rng, vsub(obj.center, h), vadd(obj.center, h))
                }
            };
            cloud.push(SurfacePoint {
                position: p,
                instance_id: obj.instance_id,
                class_id: obj.class_id,
            });
        }
    }
    let lo = [-room.half_x, 0.0, -room.half_z];
    let hi = [room.half_x, room.height, room.half_z];
    let mut shell = cfg.room_shell_samples;
    if cfg.central_occluder {
        let occ = occluder_aabb(room);
        let occ_samples = shell / 5;
        shell -= occ_samples;
        for _ in 0..occ_samples {
            cloud.push(SurfacePoint {
                position: sample_aabb_surface(rng, occ.0, occ.1),
                instance_id: 0,
                class_id: BACKGROUND_CLASS,
            });
        }
    }
    for _ in 0..shell {
        cloud.push(SurfacePoint {
            position: sample_aabb_surface(rng, lo, hi),
            instance_id: 0,
            class_id: BACKGROUND_CLASS,
        });
    }
    cloud
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn sample_aabb_surface(rng: &mut ChaCha8Rng, lo: Vec3, hi: Vec3) -> Vec3 {
    let ext = vsub(hi, lo);
    let areas = [
        ext[1] * ext[2], // x faces
        ext[0] * ext[2], // y faces
        ext[0] * ext[1], // z faces
    ];
    let total = 2.0 * (areas[0] + areas[1] + areas[2]);
    let mut r = rng.gen_range(0.0..total);
    for axis in 0..3 {
        for side in 0..2 {
            if r < areas[axis] {
                let mut p = [0.0; 3];
                p[axis] = if side == 0 { lo[axis] } else { hi[axis] };
                let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
                for &a in &others {
                    p[a] = rng.gen_range(lo[a]..hi[a]);
                }
                return p;
            }
            r -= areas[axis];
        }
    }
    lo
}

/// Deterministic scene synthesis; rejects layouts where some object falls
/// below the visibility floor in every view, so every instance is a
/// learnable ground-truth target.
pub fn generate_scene(seed: u64, cfg: &SceneGenConfig) -> Result<Scene, SceneError> {
    cfg.validate(usize::MAX)?;
    let room = Room {
        half_x: cfg.room_size[0] / 2.0,
        height: cfg.room_size[1],
        half_z: cfg.room_size[2] / 2.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for round in 0..256 {
        let objects = place_objects(&mut rng, cfg, &room)?;
        let fov_f = 0.5 * cfg.image_width as f64 / (30f64.to_radians()).tan();
        let intrinsics = CameraIntrinsics {
            fx: fov_f,
            fy: fov_f,
            cx: cfg.image_width as f64 / 2.0,
            cy: cfg.image_height as f64 / 2.0,
            width: cfg.image_width,
            height: cfg.image_height,
        };
        let mut frames = Vec::with_capacity(cfg.views);
        for v in 0..cfg.views {
            let angle = std::f64::consts::TAU * v as f64 / cfg.views as f64
                + rng.gen_range(-0.15..0.15);
            let radius = cfg.ring_radius + rng.gen_range(-0.1..0.1);
            let height = cfg.camera_height + rng.gen_range(-0.1..0.1);
            let eye = [radius * angle.cos(), height, radius * angle.sin()];
            let target = [
                rng.gen_range(-0.1..0.1),
                0.9 + rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            ];
            let pose = CameraPose::look_at(eye, target, [0.0, 1.0, 0.0]);
            frames.push(render_frame(cfg, &room, &objects, intrinsics, pose));
        }
        let area = cfg.image_width * cfg.image_height;
        // Heavily occluded layouts (divider + mirrored pairs) can make the
        // full floor unsatisfiable for some seeds; halve it every 64 rounds
        // so generation always terminates while most scenes keep the full
        // floor.
        let relax = 1usize << (round / 64).min(3);
        let need = (cfg.min_visible_pixels * area / (64 * 64) / relax).max(1);
        let all_visible = objects.iter().all(|o| {
            frames.iter().any(|f| {
                f.gt_instance.iter().filter(|&&i| i == o.instance_id).count() >= need
            })
        });
        if !all_visible {
            continue;
        }
        let gt_surface_cloud = sample_surface(&mut rng, &objects, &room, cfg);
        let labels = objects
            .iter()
            .map(|o| InstanceLabel { instance_id: o.instance_id, class_id: o.class_id })
            .collect();
        return Ok(Scene {
            frames,
            labels,
            gt_surface_cloud,
            vocabulary: cfg.vocabulary.clone(),
        });
    }
    Err(SceneError::Generation(
        "could not produce a scene with all objects visible".into(),
    ))
}

/// Zero depth at a `hole_rate` fraction of pixels whose 4-neighborhood
/// crosses an instance boundary. RGB and ground truth are untouched.
pub fn simulate_depth_holes(scene: &Scene, hole_rate: f64, seed: u64) -> Scene {
    assert!((0.0..=1.0).contains(&hole_rate), "hole rate must be in [0,1]");
    let mut out = scene.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for frame in &mut out.frames {
        let (h, w) = (frame.depth.height, frame.depth.width);
        for r in 0..h {
            for c in 0..w {
                let me = frame.gt_instance[r * w + c];
                let neigh: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
                let boundary = neigh.iter().any(|(dr, dc)| {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    nr >= 0
                        && nc >= 0
                        && nr < h as isize
                        && nc < w as isize
                        && frame.gt_instance[nr as usize * w + nc as usize] != me
                });
                // draw for every boundary pixel so the mask is stable in rate
                if boundary && rng.gen_range(0.0..1.0) < hole_rate {
                    frame.depth.set(r, c, 0.0);
                }
            }
        }
    }
    out
}
