//! Camera models and 2D<->3D geometric primitives: unprojection, projection,
//! depth hole filling, voxelization, k-NN graphs, bilinear and trilinear
//! interpolation. Everything here is a pure function of its inputs.

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn vsub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn vadd(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn vscale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn vdot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn vcross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn vnorm(a: Vec3) -> f64 {
    vdot(a, a).sqrt()
}

pub fn vnormalize(a: Vec3) -> Vec3 {
    let n = vnorm(a);
    vscale(a, 1.0 / n)
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn mat_det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidInput("focal length must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidInput("image size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[k][i] * r[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(GeometryError::InvalidInput(format!(
                        "rotation not orthonormal: RtR[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        if (mat_det(r) - 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidInput("rotation determinant is not +1".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidInput("translation not finite".into()));
        }
        Ok(())
    }

    /// Camera frame: +x right, +y down (image rows), +z forward.
    pub fn look_at(eye: Vec3, target: Vec3, world_up: Vec3) -> Self {
        let forward = vnormalize(vsub(target, eye));
        let right = vnormalize(vcross(forward, world_up));
        let down = vcross(forward, right);
        CameraPose {
            rotation: [
                [right[0], down[0], forward[0]],
                [right[1], down[1], forward[1]],
                [right[2], down[2], forward[2]],
            ],
            translation: eye,
        }
    }

    pub fn cam_to_world(&self, p: Vec3) -> Vec3 {
        vadd(mat_vec(&self.rotation, p), self.translation)
    }

    pub fn world_to_cam(&self, p: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation, vsub(p, self.translation))
    }
}

/// Rotation about the +y (vertical) axis by `angle` radians.
pub fn rotation_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

/// Depth in meters; 0 encodes missing.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width);
        DepthMap { height, width, values }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        DepthMap { height, width, values: vec![0.0; height * width] }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.width + col] = v;
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.values.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(GeometryError::InvalidInput("depth must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Provenance of a 3D point: (view, row, col) of the pixel it was lifted from.
pub type Provenance = (usize, usize, usize);

#[derive(Debug, Clone)]
pub struct FeaturizedPointCloud {
    pub positions: Vec<Vec3>,
    /// [N, F]; F may be zero when the cloud carries geometry only.
    pub features: Tensor,
    pub provenance: Vec<Provenance>,
}

impl FeaturizedPointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    pub origin: Vec3,
    pub pooled_positions: Vec<Vec3>,
    /// [M, F]
    pub pooled_features: Tensor,
    pub point_to_voxel: Vec<usize>,
    pub voxel_to_points: Vec<Vec<usize>>,
}

impl VoxelGrid {
    pub fn num_voxels(&self) -> usize {
        self.pooled_positions.len()
    }
}

#[derive(Debug, Clone)]
pub struct KnnGraph {
    pub k: usize,
    /// M×k, row entry 0 is the query point itself.
    pub neighbor_index: Vec<usize>,
    /// M×k offsets p_i - p_j.
    pub relative_offset: Vec<Vec3>,
}

impl KnnGraph {
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbor_index[i * self.k..(i + 1) * self.k]
    }

    pub fn offsets(&self, i: usize) -> &[Vec3] {
        &self.relative_offset[i * self.k..(i + 1) * self.k]
    }
}

/// Lift every valid-depth pixel to a world-space point via the inverse
/// pinhole model. Pixels with depth 0 are omitted.
pub fn unproject_depth(
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    depth: &DepthMap,
    view: usize,
) -> Result<FeaturizedPointCloud, GeometryError> {
    if depth.height != intrinsics.height || depth.width != intrinsics.width {
        return Err(GeometryError::DimensionMismatch(format!(
            "depth {}x{} vs intrinsics {}x{}",
            depth.height, depth.width, intrinsics.height, intrinsics.width
        )));
    }
    let mut positions = Vec::new();
    let mut provenance = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.at(v, u);
            if d <= 0.0 {
                continue;
            }
            let cam = [
                (u as f64 - intrinsics.cx) * d / intrinsics.fx,
                (v as f64 - intrinsics.cy) * d / intrinsics.fy,
                d,
            ];
            positions.push(pose.cam_to_world(cam));
            provenance.push((view, v, u));
        }
    }
    let n = positions.len();
    Ok(FeaturizedPointCloud {
        positions,
        features: Tensor::zeros(vec![n, 0]),
        provenance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub behind_camera: bool,
}

pub fn project_points(
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    points: &[Vec3],
) -> Vec<ProjectedPoint> {
    points
        .iter()
        .map(|&p| {
            let cam = pose.world_to_cam(p);
            let behind = cam[2] <= 1e-9;
            let z = if behind { 1e-9 } else { cam[2] };
            ProjectedPoint {
                u: intrinsics.fx * cam[0] / z + intrinsics.cx,
                v: intrinsics.fy * cam[1] / z + intrinsics.cy,
                depth: cam[2],
                behind_camera: behind,
            }
        })
        .collect()
}

/// Replace zero pixels by the value of the nearest valid pixel via iterative
/// 4-neighbor dilation. Per wave, a hole takes the value of its first filled
/// neighbor in (smaller row, then smaller column) order. All-zero maps are
/// returned unchanged; valid pixels are never modified.
pub fn fill_depth_holes(depth: &DepthMap) -> DepthMap {
    let (h, w) = (depth.height, depth.width);
    let mut out = depth.clone();
    if out.values.iter().all(|&v| v == 0.0) {
        return out;
    }
    loop {
        let snapshot = out.values.clone();
        let mut changed = false;
        for r in 0..h {
            for c in 0..w {
                if snapshot[r * w + c] != 0.0 {
                    continue;
                }
                // neighbor priority: up, left, right, down
                let neigh: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
                for (dr, dc) in neigh {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let nv = snapshot[nr as usize * w + nc as usize];
                    if nv != 0.0 {
                        out.values[r * w + c] = nv;
                        changed = true;
                        break;
                    }
                }
            }
        }
        if !changed {
            return out;
        }
    }
}

/// Subsample by picking input[y*stride, x*stride].
pub fn nearest_resize_depth(depth: &DepthMap, stride: usize) -> Result<DepthMap, GeometryError> {
    if stride == 0 || depth.height % stride != 0 || depth.width % stride != 0 {
        return Err(GeometryError::DimensionMismatch(format!(
            "stride {} does not divide {}x{}",
            stride, depth.height, depth.width
        )));
    }
    let (oh, ow) = (depth.height / stride, depth.width / stride);
    let mut values = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            values.push(depth.at(y * stride, x * stride));
        }
    }
    Ok(DepthMap::new(oh, ow, values))
}

fn voxel_key(p: Vec3, origin: Vec3, size: f64) -> (i64, i64, i64) {
    (
        ((p[0] - origin[0]) / size).floor() as i64,
        ((p[1] - origin[1]) / size).floor() as i64,
        ((p[2] - origin[2]) / size).floor() as i64,
    )
}

/// Partition a cloud into cubic cells and mean-pool positions and features.
/// Voxel indices are assigned in first-encounter (point) order, so the
/// result is deterministic.
pub fn voxelize(cloud: &FeaturizedPointCloud, voxel_size: f64) -> Result<VoxelGrid, GeometryError> {
    if voxel_size <= 0.0 {
        return Err(GeometryError::InvalidInput("voxel size must be positive".into()));
    }
    let n = cloud.len();
    let f = cloud.features.shape()[1];
    if n == 0 {
        return Ok(VoxelGrid {
            voxel_size,
            origin: [0.0; 3],
            pooled_positions: Vec::new(),
            pooled_features: Tensor::zeros(vec![0, f]),
            point_to_voxel: Vec::new(),
            voxel_to_points: Vec::new(),
        });
    }
    let mut origin = cloud.positions[0];
    for p in &cloud.positions {
        for a in 0..3 {
            origin[a] = origin[a].min(p[a]);
        }
    }
    let mut keymap: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut point_to_voxel = Vec::with_capacity(n);
    let mut voxel_to_points: Vec<Vec<usize>> = Vec::new();
    for (i, &p) in cloud.positions.iter().enumerate() {
        let key = voxel_key(p, origin, voxel_size);
        let vi = *keymap.entry(key).or_insert_with(|| {
            voxel_to_points.push(Vec::new());
            voxel_to_points.len() - 1
        });
        voxel_to_points[vi].push(i);
        point_to_voxel.push(vi);
    }
    let m = voxel_to_points.len();
    let mut pooled_positions = vec![[0.0; 3]; m];
    let mut pooled_features = vec![0.0; m * f];
    for (vi, members) in voxel_to_points.iter().enumerate() {
        let inv = 1.0 / members.len() as f64;
        for &pi in members {
            for a in 0..3 {
                pooled_positions[vi][a] += cloud.positions[pi][a] * inv;
            }
            for j in 0..f {
                pooled_features[vi * f + j] += cloud.features.at2(pi, j) * inv;
            }
        }
    }
    Ok(VoxelGrid {
        voxel_size,
        origin,
        pooled_positions,
        pooled_features: Tensor::new(vec![m, f], pooled_features),
        point_to_voxel,
        voxel_to_points,
    })
}

/// Copy each voxel's feature back to its member points, in point order.
pub fn devoxelize(grid: &VoxelGrid, voxel_features: &Tensor) -> Result<Tensor, GeometryError> {
    let (m, f) = voxel_features.dims2();
    if m != grid.num_voxels() {
        return Err(GeometryError::DimensionMismatch(format!(
            "{} voxel features for {} voxels",
            m,
            grid.num_voxels()
        )));
    }
    let n = grid.point_to_voxel.len();
    let mut out = Vec::with_capacity(n * f);
    for &vi in &grid.point_to_voxel {
        out.extend_from_slice(voxel_features.row(vi));
    }
    Ok(Tensor::new(vec![n, f], out))
}

fn d2(a: Vec3, b: Vec3) -> f64 {
    let d = vsub(a, b);
    vdot(d, d)
}

/// Select the k best candidates by (squared distance, index), with `me`
/// forced to slot 0. Pads by repeating the last valid neighbor when there
/// are fewer than k candidates.
fn finish_row(me: usize, mut cands: Vec<(f64, usize)>, k: usize) -> Vec<usize> {
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut row = Vec::with_capacity(k);
    row.push(me);
    for &(_, j) in cands.iter() {
        if j == me {
            continue;
        }
        if row.len() == k {
            break;
        }
        row.push(j);
    }
    while row.len() < k {
        let last = *row.last().unwrap();
        row.push(last);
    }
    row
}

/// Reference O(M^2) k-NN.
pub fn knn_brute_force(positions: &[Vec3], k: usize) -> KnnGraph {
    assert!(!positions.is_empty() && k >= 1);
    let m = positions.len();
    let mut neighbor_index = Vec::with_capacity(m * k);
    for i in 0..m {
        let cands: Vec<(f64, usize)> = (0..m)
            .map(|j| (d2(positions[i], positions[j]), j))
            .collect();
        neighbor_index.extend(finish_row(i, cands, k));
    }
    with_offsets(positions, k, neighbor_index)
}

/// Spatial-hash accelerated k-NN; returns indices identical to the brute
/// force path.
pub fn knn(positions: &[Vec3], k: usize) -> KnnGraph {
    assert!(!positions.is_empty() && k >= 1);
    let m = positions.len();
    if m <= 64 {
        return knn_brute_force(positions, k);
    }
    let mut lo = positions[0];
    let mut hi = positions[0];
    for p in positions {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let vol: f64 = (0..3).map(|a| (hi[a] - lo[a]).max(1e-9)).product();
    let cell = (vol * k.min(m) as f64 / m as f64).cbrt().max(1e-9);
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, &p) in positions.iter().enumerate() {
        grid.entry(voxel_key(p, lo, cell)).or_default().push(i);
    }
    let mut neighbor_index = Vec::with_capacity(m * k);
    for i in 0..m {
        let center = voxel_key(positions[i], lo, cell);
        let mut cands: Vec<(f64, usize)> = Vec::new();
        let mut ring = 0i64;
        loop {
            // collect cells at Chebyshev distance == ring
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let key = (center.0 + dx, center.1 + dy, center.2 + dz);
                        if let Some(members) = grid.get(&key) {
                            for &j in members {
                                cands.push((d2(positions[i], positions[j]), j));
                            }
                        }
                    }
                }
            }
            // all points within ring*cell of the query cell border are
            // guaranteed collected; stop once the kth candidate is closer
            let guaranteed = ring as f64 * cell;
            if cands.len() >= k.min(m) {
                let mut ds: Vec<f64> = cands.iter().map(|c| c.0).collect();
                ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let kth = ds[k.min(m) - 1].sqrt();
                if kth <= guaranteed {
                    break;
                }
            }
            ring += 1;
            let span = ((hi[0] - lo[0]).max(hi[1] - lo[1]).max(hi[2] - lo[2]) / cell) as i64 + 2;
            if ring > span {
                break;
            }
        }
        neighbor_index.extend(finish_row(i, cands, k));
    }
    with_offsets(positions, k, neighbor_index)
}

fn with_offsets(positions: &[Vec3], k: usize, neighbor_index: Vec<usize>) -> KnnGraph {
    let relative_offset = neighbor_index
        .iter()
        .enumerate()
        .map(|(slot, &j)| vsub(positions[slot / k], positions[j]))
        .collect();
    KnnGraph { k, neighbor_index, relative_offset }
}

/// Bilinear sample of a [C,H,W] map at continuous (u = col, v = row), border
/// clamped. Matches the differentiable grid-sample op exactly.
pub fn bilinear_sample(map: &Tensor, u: f64, v: f64) -> Vec<f64> {
    let (c, h, w) = map.dims3();
    let s = crate::graph::BilinearStencil::new(u, v, h, w);
    (0..c)
        .map(|ch| s.eval(&map.data()[ch * h * w..(ch + 1) * h * w], w))
        .collect()
}

/// Sparse linear interpolation stencil: for each query, a list of
/// (source point index, weight). Weights over each query sum to 1.
pub fn trilinear_combos(
    source_positions: &[Vec3],
    voxel_size: f64,
    queries: &[Vec3],
) -> Vec<Vec<(usize, f64)>> {
    assert!(!source_positions.is_empty());
    let mut origin = source_positions[0];
    for p in source_positions {
        for a in 0..3 {
            origin[a] = origin[a].min(p[a]);
        }
    }
    // occupied lattice cells with their member points
    let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, &p) in source_positions.iter().enumerate() {
        cells.entry(voxel_key(p, origin, voxel_size)).or_default().push(i);
    }
    let mut out = Vec::with_capacity(queries.len());
    for &q in queries {
        // cell centers live at origin + (idx + 0.5) * size
        let g = [
            (q[0] - origin[0]) / voxel_size - 0.5,
            (q[1] - origin[1]) / voxel_size - 0.5,
            (q[2] - origin[2]) / voxel_size - 0.5,
        ];
        let base = [g[0].floor(), g[1].floor(), g[2].floor()];
        let frac = [g[0] - base[0], g[1] - base[1], g[2] - base[2]];
        let mut picks: Vec<((i64, i64, i64), f64)> = Vec::with_capacity(8);
        let mut total = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let key = (
                        base[0] as i64 + dx as i64,
                        base[1] as i64 + dy as i64,
                        base[2] as i64 + dz as i64,
                    );
                    if !cells.contains_key(&key) {
                        continue;
                    }
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                    let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
                    let w = wx * wy * wz;
                    if w > 0.0 {
                        picks.push((key, w));
                        total += w;
                    }
                }
            }
        }
        if picks.is_empty() || total <= 0.0 {
            // no occupied surrounding cell: nearest source point fallback
            let mut best = (f64::INFINITY, 0usize);
            for (i, &p) in source_positions.iter().enumerate() {
                let d = d2(q, p);
                if d < best.0 {
                    best = (d, i);
                }
            }
            out.push(vec![(best.1, 1.0)]);
            continue;
        }
        let mut combo = Vec::new();
        for (key, w) in picks {
            let members = &cells[&key];
            let per = w / total / members.len() as f64;
            for &i in members {
                combo.push((i, per));
            }
        }
        out.push(combo);
    }
    out
}

/// Trilinear transfer of per-point features to query positions over a sparse
/// voxel lattice of mean cell features, with nearest-point fallback.
pub fn trilinear_interpolate(
    source_positions: &[Vec3],
    source_features: &Tensor,
    voxel_size: f64,
    queries: &[Vec3],
) -> Tensor {
    let (n, f) = source_features.dims2();
    assert_eq!(n, source_positions.len());
    let combos = trilinear_combos(source_positions, voxel_size, queries);
    let mut out = vec![0.0; queries.len() * f];
    for (q, combo) in combos.iter().enumerate() {
        for &(src, w) in combo {
            for j in 0..f {
                out[q * f + j] += w * source_features.at2(src, j);
            }
        }
    }
    Tensor::new(vec![queries.len(), f], out)
}
