//! Scene directory format: ASCII intrinsics/poses/labels/vocabulary/surface
//! cloud plus binary PPM color, and 16-bit PGM depth (millimeters) and
//! instance maps. Loads re-validate every structural invariant.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::geometry::{CameraIntrinsics, CameraPose, DepthMap};
use crate::tensor::Tensor;

use super::{Frame, InstanceLabel, Scene, SceneError, SurfacePoint, Vocabulary};

fn io_err(path: &Path, source: std::io::Error) -> SceneError {
    SceneError::Io { path: path.to_path_buf(), source }
}

fn parse_err(path: &Path, msg: impl Into<String>) -> SceneError {
    SceneError::Parse { path: path.to_path_buf(), msg: msg.into() }
}

fn invariant_err(path: &Path, msg: impl Into<String>) -> SceneError {
    SceneError::Invariant { path: path.to_path_buf(), msg: msg.into() }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SceneError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(bytes).map_err(|e| io_err(path, e))
}

fn frame_path(dir: &Path, index: usize, suffix: &str) -> PathBuf {
    dir.join(format!("frame_{:04}.{}", index, suffix))
}

/// Millimeter quantization applied by the depth format; 0 stays missing.
pub fn quantize_depth_mm(d: f64) -> f64 {
    ((d * 1000.0).round().clamp(0.0, 65535.0)) / 1000.0
}

fn encode_pnm16(magic: &str, width: usize, height: usize, values: impl Iterator<Item = u16>) -> Vec<u8> {
    let mut out = format!("{}\n{} {}\n65535\n", magic, width, height).into_bytes();
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn save_scene(scene: &Scene, dir: &Path) -> Result<(), SceneError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let intr = scene.frames[0].intrinsics;
    write_file(
        &dir.join("intrinsics.txt"),
        format!(
            "{} {} {} {} {} {}\n",
            intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height
        )
        .as_bytes(),
    )?;

    for (i, frame) in scene.frames.iter().enumerate() {
        let mut pose_txt = String::new();
        for r in 0..3 {
            for c in 0..3 {
                pose_txt.push_str(&format!("{} ", frame.pose.rotation[r][c]));
            }
            pose_txt.push_str(&format!("{}\n", frame.pose.translation[r]));
        }
        pose_txt.push_str("0 0 0 1\n");
        write_file(&frame_path(dir, i, "pose.txt"), pose_txt.as_bytes())?;

        let (h, w) = (intr.height, intr.width);
        let mut ppm = format!("P6\n{} {}\n255\n", w, h).into_bytes();
        for p in 0..h * w {
            for ch in 0..3 {
                let v = frame.rgb.data()[ch * h * w + p];
                ppm.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        write_file(&frame_path(dir, i, "rgb.ppm"), &ppm)?;

        let depth_mm = frame
            .depth
            .values
            .iter()
            .map(|&d| (d * 1000.0).round().clamp(0.0, 65535.0) as u16);
        write_file(&frame_path(dir, i, "depth.pgm"), &encode_pnm16("P5", w, h, depth_mm))?;
        write_file(
            &frame_path(dir, i, "inst.pgm"),
            &encode_pnm16("P5", w, h, frame.gt_instance.iter().copied()),
        )?;
    }

    let mut labels_txt = String::new();
    for l in &scene.labels {
        labels_txt.push_str(&format!("{} {}\n", l.instance_id, l.class_id));
    }
    write_file(&dir.join("labels.txt"), labels_txt.as_bytes())?;

    let mut surf = String::new();
    for p in &scene.gt_surface_cloud {
        surf.push_str(&format!(
            "{} {} {} {} {}\n",
            p.position[0], p.position[1], p.position[2], p.instance_id, p.class_id
        ));
    }
    write_file(&dir.join("surface.xyz"), surf.as_bytes())?;

    let mut vocab = String::new();
    for (id, name) in &scene.vocabulary.entries {
        vocab.push_str(&format!("{} {}\n", id, name));
    }
    write_file(&dir.join("vocab.txt"), vocab.as_bytes())?;
    Ok(())
}

struct Pnm {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

fn read_pnm(path: &Path, magic: &str) -> Result<Pnm, SceneError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(parse_err(path, format!("expected {} header", magic)));
    }
    // header: magic, width, height, maxval, separated by whitespace with
    // optional '#' comment lines
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, "malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| parse_err(path, "malformed header"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(parse_err(path, "malformed header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    let bytes_per = match (magic, maxval) {
        ("P6", 255) => 3,
        ("P5", 65535) => 2,
        _ => return Err(parse_err(path, format!("unsupported maxval {}", maxval))),
    };
    let expected = width * height * bytes_per;
    let data = bytes[pos..].to_vec();
    if data.len() != expected {
        return Err(parse_err(
            path,
            format!("pixel payload is {} bytes, expected {}", data.len(), expected),
        ));
    }
    Ok(Pnm { width, height, data })
}

fn read_ascii_fields(path: &Path) -> Result<Vec<Vec<String>>, SceneError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

fn parse_f64(path: &Path, s: &str) -> Result<f64, SceneError> {
    s.parse().map_err(|_| parse_err(path, format!("bad float {:?}", s)))
}

fn parse_usize(path: &Path, s: &str) -> Result<usize, SceneError> {
    s.parse().map_err(|_| parse_err(path, format!("bad integer {:?}", s)))
}

pub fn load_scene(dir: &Path) -> Result<Scene, SceneError> {
    let intr_path = dir.join("intrinsics.txt");
    let rows = read_ascii_fields(&intr_path)?;
    let flat: Vec<&String> = rows.iter().flatten().collect();
    if flat.len() != 6 {
        return Err(parse_err(&intr_path, format!("expected 6 fields, found {}", flat.len())));
    }
    let intrinsics = CameraIntrinsics {
        fx: parse_f64(&intr_path, flat[0])?,
        fy: parse_f64(&intr_path, flat[1])?,
        cx: parse_f64(&intr_path, flat[2])?,
        cy: parse_f64(&intr_path, flat[3])?,
        width: parse_usize(&intr_path, flat[4])?,
        height: parse_usize(&intr_path, flat[5])?,
    };
    intrinsics
        .validate()
        .map_err(|e| invariant_err(&intr_path, e.to_string()))?;

    let vocab_path = dir.join("vocab.txt");
    let mut entries = Vec::new();
    for line in read_ascii_fields(&vocab_path)? {
        if line.len() < 2 {
            return Err(parse_err(&vocab_path, "each line needs class_id and a name"));
        }
        let id = parse_usize(&vocab_path, &line[0])?;
        entries.push((id, line[1..].join(" ")));
    }
    let vocabulary = Vocabulary { entries };
    vocabulary
        .validate()
        .map_err(|m| invariant_err(&vocab_path, m))?;

    let labels_path = dir.join("labels.txt");
    let mut labels = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for line in read_ascii_fields(&labels_path)? {
        if line.len() != 2 {
            return Err(parse_err(&labels_path, "each line must be `instance_id class_id`"));
        }
        let instance_id = parse_usize(&labels_path, &line[0])? as u16;
        let class_id = parse_usize(&labels_path, &line[1])?;
        if instance_id == 0 {
            return Err(invariant_err(&labels_path, "instance id 0 is reserved for background"));
        }
        if !seen_ids.insert(instance_id) {
            return Err(invariant_err(&labels_path, format!("duplicate instance id {}", instance_id)));
        }
        if !vocabulary.contains(class_id) {
            return Err(invariant_err(&labels_path, format!("unknown class id {}", class_id)));
        }
        labels.push(InstanceLabel { instance_id, class_id });
    }

    let mut frames = Vec::new();
    for i in 0.. {
        let pose_path = frame_path(dir, i, "pose.txt");
        if !pose_path.exists() {
            break;
        }
        let rows = read_ascii_fields(&pose_path)?;
        let flat: Vec<&String> = rows.iter().flatten().collect();
        if flat.len() != 16 {
            return Err(parse_err(&pose_path, format!("expected 16 fields, found {}", flat.len())));
        }
        let mut m = [0.0f64; 16];
        for (dst, s) in m.iter_mut().zip(&flat) {
            *dst = parse_f64(&pose_path, s)?;
        }
        let pose = CameraPose {
            rotation: [
                [m[0], m[1], m[2]],
                [m[4], m[5], m[6]],
                [m[8], m[9], m[10]],
            ],
            translation: [m[3], m[7], m[11]],
        };
        if m[12..] != [0.0, 0.0, 0.0, 1.0] {
            return Err(invariant_err(&pose_path, "last row must be 0 0 0 1"));
        }
        pose.validate()
            .map_err(|e| invariant_err(&pose_path, e.to_string()))?;

        let rgb_path = frame_path(dir, i, "rgb.ppm");
        let ppm = read_pnm(&rgb_path, "P6")?;
        if ppm.width != intrinsics.width || ppm.height != intrinsics.height {
            return Err(invariant_err(
                &rgb_path,
                format!("{}x{} does not match intrinsics {}x{}", ppm.width, ppm.height, intrinsics.width, intrinsics.height),
            ));
        }
        let (h, w) = (ppm.height, ppm.width);
        let mut rgb = vec![0.0; 3 * h * w];
        for p in 0..h * w {
            for ch in 0..3 {
                rgb[ch * h * w + p] = ppm.data[p * 3 + ch] as f64 / 255.0;
            }
        }

        let depth_path = frame_path(dir, i, "depth.pgm");
        let dpgm = read_pnm(&depth_path, "P5")?;
        if dpgm.width != w || dpgm.height != h {
            return Err(invariant_err(&depth_path, "size does not match intrinsics"));
        }
        let mut depth = DepthMap::zeros(h, w);
        for p in 0..h * w {
            let mm = u16::from_be_bytes([dpgm.data[2 * p], dpgm.data[2 * p + 1]]);
            depth.values[p] = mm as f64 / 1000.0;
        }

        let inst_path = frame_path(dir, i, "inst.pgm");
        let ipgm = read_pnm(&inst_path, "P5")?;
        if ipgm.width != w || ipgm.height != h {
            return Err(invariant_err(&inst_path, "size does not match intrinsics"));
        }
        let mut gt_instance = vec![0u16; h * w];
        for p in 0..h * w {
            let id = u16::from_be_bytes([ipgm.data[2 * p], ipgm.data[2 * p + 1]]);
            if id != 0 && !seen_ids.contains(&id) {
                return Err(invariant_err(&inst_path, format!("instance id {} not in labels.txt", id)));
            }
            gt_instance[p] = id;
        }

        frames.push(Frame {
            intrinsics,
            pose,
            rgb: Tensor::new(vec![3, h, w], rgb),
            depth,
            gt_instance,
        });
    }
    if frames.is_empty() {
        return Err(parse_err(&frame_path(dir, 0, "pose.txt"), "no frames found"));
    }

    let surf_path = dir.join("surface.xyz");
    let mut gt_surface_cloud = Vec::new();
    for line in read_ascii_fields(&surf_path)? {
        if line.len() != 5 {
            return Err(parse_err(&surf_path, "each line must be `x y z instance_id class_id`"));
        }
        let position = [
            parse_f64(&surf_path, &line[0])?,
            parse_f64(&surf_path, &line[1])?,
            parse_f64(&surf_path, &line[2])?,
        ];
        let instance_id = parse_usize(&surf_path, &line[3])? as u16;
        let class_id = parse_usize(&surf_path, &line[4])?;
        if instance_id != 0 && !seen_ids.contains(&instance_id) {
            return Err(invariant_err(&surf_path, format!("instance id {} not in labels.txt", instance_id)));
        }
        if !vocabulary.contains(class_id) {
            return Err(invariant_err(&surf_path, format!("unknown class id {}", class_id)));
        }
        gt_surface_cloud.push(SurfacePoint { position, instance_id, class_id });
    }

    Ok(Scene { frames, labels, gt_surface_cloud, vocabulary })
}
