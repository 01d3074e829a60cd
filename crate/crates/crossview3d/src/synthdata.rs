//! Synthetic paired-view driving scenes: a shared world is rendered from a
//! low vehicle camera and a tall, pitched-down roadside camera, producing
//! images, 3D/2D labels and coarse foreground depth maps. The two views share
//! object identity and appearance while their depth distributions diverge.

use std::fs;
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::geometry::{bev_intersection_area, wrap_angle, Box2D, Box3D, CameraModel, Difficulty};
use crate::parallel::par_map;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not place objects without overlap after {0} attempts")]
    PlacementFailure(usize),
    #[error("no object visible from the {0:?} camera")]
    EmptyView(Domain),
    #[error("scene generation kept failing for sample {0}")]
    ExhaustedRetries(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("bad depth file {0}")]
    BadDepthFile(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Vehicle,
    Roadside,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl Domain {
    pub fn dir(&self) -> &'static str {
        match self {
            Domain::Vehicle => "vehicle",
            Domain::Roadside => "roadside",
        }
    }
}

/// A world shared by both cameras. The world frame equals the vehicle
/// camera's gravity-aligned frame: origin at the vehicle camera, x right,
/// y down, z forward, ground plane at y = vehicle camera height.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<Box3D>,
    pub road_extent: f64,
    pub seed: u64,
    /// Roadside mounting height above ground, randomized per scene.
    pub roadside_height: f64,
    /// Roadside pitch (radians, negative looks down), randomized per scene.
    pub roadside_pitch: f64,
}

pub const VEHICLE_CAM_HEIGHT: f64 = 1.5;
const LANE_X: [f64; 2] = [-2.5, 2.5];
const PLACEMENT_ATTEMPTS: usize = 200;
/// Extra clearance (meters) enforced between footprints during placement.
const CLEARANCE: f64 = 0.6;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stable per-object surface color, identical in every view of the scene.
pub fn albedo(scene_seed: u64, object_id: usize) -> [f64; 3] {
    let h = splitmix64(scene_seed.wrapping_add(0x5851F42D4C957F2Du64.wrapping_mul(object_id as u64 + 1)));
    let chan = |shift: u32| 0.25 + 0.7 * ((h >> shift) & 0xFFFF) as f64 / 65535.0;
    [chan(0), chan(16), chan(32)]
}

/// Deterministic lane-based scene sampling with rejection for overlap.
pub fn generate_scene(
    max_objects: usize,
    road_extent: f64,
    seed: u64,
) -> Result<Scene, SynthError> {
    assert!(max_objects >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roadside_height = rng.gen_range(5.5..6.5);
    let roadside_pitch = -rng.gen_range(0.22..0.30);
    let n_target = rng.gen_range(1..=max_objects);
    let mut objects: Vec<Box3D> = Vec::with_capacity(n_target);
    let z_lo = 8.0;
    let z_hi = road_extent - 10.0;
    for k in 0..n_target {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let lane = LANE_X[rng.gen_range(0..2)];
            let x = lane + rng.gen_range(-0.4..0.4);
            // quadratic pull toward the vehicle end keeps the two cameras'
            // depth distributions apart
            let u: f64 = rng.gen_range(0.0..1.0);
            let z = z_lo + (z_hi - z_lo) * u * u;
            let dims = [
                rng.gen_range(1.4..1.7),
                rng.gen_range(1.6..2.0),
                rng.gen_range(3.8..4.6),
            ];
            let yaw_base = if lane < 0.0 { 0.0 } else { std::f64::consts::PI };
            let yaw = wrap_angle(yaw_base + rng.gen_range(-0.15..0.15));
            let y = VEHICLE_CAM_HEIGHT - dims[0] / 2.0;
            let cand = Box3D::new([x, y, z], dims, yaw);
            let mut inflated = cand;
            inflated.dims[1] += CLEARANCE;
            inflated.dims[2] += CLEARANCE;
            if objects.iter().all(|o| bev_intersection_area(o, &inflated) == 0.0) {
                objects.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            if k == 0 {
                return Err(SynthError::PlacementFailure(PLACEMENT_ATTEMPTS));
            }
            break; // keep the objects that fit
        }
    }
    Ok(Scene {
        objects,
        road_extent,
        seed,
        roadside_height,
        roadside_pitch,
    })
}

pub fn vehicle_camera(image_size: (u32, u32)) -> CameraModel {
    let w = image_size.0 as f64;
    CameraModel {
        fx: 1.1 * w,
        fy: 1.1 * w,
        cx: w / 2.0,
        cy: image_size.1 as f64 / 2.0,
        height_above_ground: VEHICLE_CAM_HEIGHT,
        pitch: 0.0,
        image_size,
    }
}

pub fn roadside_camera(scene: &Scene, image_size: (u32, u32)) -> CameraModel {
    let w = image_size.0 as f64;
    CameraModel {
        fx: 1.1 * w,
        fy: 1.1 * w,
        cx: w / 2.0,
        cy: image_size.1 as f64 / 2.0,
        height_above_ground: scene.roadside_height,
        pitch: scene.roadside_pitch,
        image_size,
    }
}

/// World-frame box expressed in the given domain's gravity-aligned camera
/// frame. The roadside camera sits at the far end of the road looking back.
pub fn object_in_camera(b: &Box3D, domain: Domain, scene: &Scene) -> Box3D {
    match domain {
        Domain::Vehicle => *b,
        Domain::Roadside => {
            let cam_y = VEHICLE_CAM_HEIGHT - scene.roadside_height;
            let mut out = *b;
            out.center = [
                -b.center[0],
                b.center[1] - cam_y,
                scene.road_extent - b.center[2],
            ];
            out.yaw = wrap_angle(b.yaw + std::f64::consts::PI);
            out
        }
    }
}

/// One labeled object in a rendered view (box in that view's camera frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub box3d: Box3D,
    pub box2d: Box2D,
    /// Normalized projected 3D center.
    pub center_proj: [f64; 2],
    /// Gravity-aligned forward distance (meters).
    pub depth: f64,
    /// Scene-wide object identity, shared across views.
    pub object_id: usize,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    /// H*W*3 row-major RGB in [0,1], quantized to 8-bit steps.
    pub image: Vec<f64>,
    pub labels: Vec<Label>,
    /// (H/16)*(W/16) nearest foreground depth per cell; -1 marks background.
    pub depth_gt: Vec<f32>,
    pub domain: Domain,
    pub cam: CameraModel,
}

const DEPTH_CELL: usize = 16;

fn corners_3d(b: &Box3D) -> [[f64; 3]; 8] {
    let (hh, hw, hl) = (b.dims[0] / 2.0, b.dims[1] / 2.0, b.dims[2] / 2.0);
    let (s, c) = b.yaw.sin_cos();
    let mut out = [[0.0; 3]; 8];
    let mut i = 0;
    for sy in [-1.0, 1.0] {
        for sx in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                let lx = sx * hw;
                let lz = sz * hl;
                out[i] = [
                    b.center[0] + lx * c + lz * s,
                    b.center[1] + sy * hh,
                    b.center[2] - lx * s + lz * c,
                ];
                i += 1;
            }
        }
    }
    out
}

// corner index = 4*sy + 2*sx + sz (0 = negative side)
const FACES: [[usize; 4]; 6] = [
    [0, 1, 3, 2], // top (y-)
    [4, 5, 7, 6], // bottom (y+)
    [0, 1, 5, 4], // left (x-)
    [2, 3, 7, 6], // right (x+)
    [0, 2, 6, 4], // rear (z-)
    [1, 3, 7, 5], // front (z+)
];
const FACE_SHADE: [f64; 6] = [1.0, 0.45, 0.8, 0.8, 0.62, 0.62];

fn point_in_convex_quad(p: [f64; 2], q: &[[f64; 2]; 4]) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let a = q[i];
        let b = q[(i + 1) % 4];
        let cr = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cr.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = cr.signum();
        } else if cr.signum() != sign {
            return false;
        }
    }
    true
}

/// Rasterizes the scene from one camera. Labels keep only objects whose
/// projected center is inside the image and whose depth lies in
/// [d_min, d_max]; the depth map and pixels still show everything visible.
pub fn render_view(
    scene: &Scene,
    cam: &CameraModel,
    domain: Domain,
    d_min: f64,
    d_max: f64,
) -> Result<DomainSample, SynthError> {
    let (w, h) = (cam.image_size.0 as usize, cam.image_size.1 as usize);
    let mut image = vec![0.0f64; w * h * 3];
    // ground-to-sky vertical gradient background
    for y in 0..h {
        let t = y as f64 / (h - 1).max(1) as f64;
        let col = [
            0.55 - 0.25 * t,
            0.65 - 0.28 * t,
            0.80 - 0.45 * t,
        ];
        for x in 0..w {
            image[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&col);
        }
    }
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut labels = Vec::new();
    for (oid, obj_w) in scene.objects.iter().enumerate() {
        let b = object_in_camera(obj_w, domain, scene);
        let color = albedo(scene.seed, oid);
        let corners = corners_3d(&b);
        let mut proj_px = [[0.0f64; 2]; 8];
        let mut ok = [false; 8];
        for (i, c3) in corners.iter().enumerate() {
            if let Ok(uv) = cam.project_point(*c3) {
                proj_px[i] = [uv[0] * w as f64, uv[1] * h as f64];
                ok[i] = true;
            }
        }
        for (fi, face) in FACES.iter().enumerate() {
            if face.iter().any(|&i| !ok[i]) {
                continue;
            }
            let quad = [
                proj_px[face[0]],
                proj_px[face[1]],
                proj_px[face[2]],
                proj_px[face[3]],
            ];
            let depth = face.iter().map(|&i| corners[i][2]).sum::<f64>() / 4.0;
            if depth <= 0.1 {
                continue;
            }
            let x0 = quad.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
            let x1 = (quad.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(w);
            let y0 = quad.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
            let y1 = (quad.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(h);
            let shade = FACE_SHADE[fi];
            for py in y0..y1 {
                for px in x0..x1 {
                    let p = [px as f64 + 0.5, py as f64 + 0.5];
                    if !point_in_convex_quad(p, &quad) {
                        continue;
                    }
                    let idx = py * w + px;
                    if depth < zbuf[idx] {
                        zbuf[idx] = depth;
                        for ch in 0..3 {
                            image[idx * 3 + ch] = (color[ch] * shade).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        // label filtering: in-image center and supervisable depth
        if let Ok(uv) = cam.project_point(b.center) {
            let depth = b.center[2];
            let in_img = (0.0..1.0).contains(&uv[0]) && (0.0..1.0).contains(&uv[1]);
            if in_img && depth >= d_min && depth <= d_max {
                let us: Vec<f64> = (0..8).filter(|i| ok[*i]).map(|i| proj_px[i][0] / w as f64).collect();
                let vs: Vec<f64> = (0..8).filter(|i| ok[*i]).map(|i| proj_px[i][1] / h as f64).collect();
                if us.len() == 8 {
                    let (u0, u1) = (
                        us.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0),
                        us.iter().cloned().fold(f64::NEG_INFINITY, f64::max).min(1.0),
                    );
                    let (v0, v1) = (
                        vs.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0),
                        vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).min(1.0),
                    );
                    labels.push(Label {
                        box3d: b,
                        box2d: Box2D::new((u0 + u1) / 2.0, (v0 + v1) / 2.0, u1 - u0, v1 - v0),
                        center_proj: uv,
                        depth,
                        object_id: oid,
                        albedo: color,
                    });
                }
            }
        }
    }
    if labels.is_empty() {
        return Err(SynthError::EmptyView(domain));
    }
    // quantize to the 8-bit grid so a written-and-reread image is identical
    for v in image.iter_mut() {
        *v = (*v * 255.0).round() / 255.0;
    }
    // nearest foreground depth per 16x16 cell
    let (cw, ch) = (w / DEPTH_CELL, h / DEPTH_CELL);
    let mut depth_gt = vec![-1.0f32; cw * ch];
    for cy in 0..ch {
        for cx in 0..cw {
            let mut best = f64::INFINITY;
            for py in cy * DEPTH_CELL..(cy + 1) * DEPTH_CELL {
                for px in cx * DEPTH_CELL..(cx + 1) * DEPTH_CELL {
                    best = best.min(zbuf[py * w + px]);
                }
            }
            if best.is_finite() {
                depth_gt[cy * cw + cx] = best as f32;
            }
        }
    }
    Ok(DomainSample {
        image,
        labels,
        depth_gt,
        domain,
        cam: *cam,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub labels: String,
    pub depth: String,
    pub scene_seed: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SplitEntries {
    pub roadside: Vec<ManifestEntry>,
    pub vehicle: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub image_size: (u32, u32),
    pub n_roadside: usize,
    pub n_vehicle: usize,
    pub n_val_roadside: usize,
    pub n_val_vehicle: usize,
    /// Depth terciles (near, far) per domain used for difficulty bands.
    pub difficulty_thresholds_roadside: [f64; 2],
    pub difficulty_thresholds_vehicle: [f64; 2],
    pub train: SplitEntries,
    pub val: SplitEntries,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleRecord {
    domain: Domain,
    cam: CameraModel,
    labels: Vec<Label>,
}

fn write_depth_bin(path: &Path, depth: &[f32], cw: u32, ch: u32) -> Result<(), SynthError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&ch.to_le_bytes())?;
    f.write_all(&cw.to_le_bytes())?;
    for v in depth {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_depth_bin(path: &Path) -> Result<Vec<f32>, SynthError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 8 {
        return Err(SynthError::BadDepthFile(path.to_path_buf()));
    }
    let ch = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    let cw = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    if buf.len() != 8 + 4 * cw * ch {
        return Err(SynthError::BadDepthFile(path.to_path_buf()));
    }
    Ok(buf[8..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

fn write_png(path: &Path, image: &[f64], w: u32, h: u32) -> Result<(), SynthError> {
    let bytes: Vec<u8> = image.iter().map(|v| (v * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(w, h, bytes).expect("size mismatch");
    img.save(path)?;
    Ok(())
}

fn read_png(path: &Path) -> Result<(Vec<f64>, u32, u32), SynthError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().iter().map(|b| *b as f64 / 255.0).collect();
    Ok((data, w, h))
}

/// Renders both views of scene `i` from a per-index deterministic seed,
/// retrying with perturbed seeds until both cameras see at least one object.
fn render_pair(
    cfg: &Config,
    split: Split,
    i: usize,
) -> Result<(Scene, DomainSample, DomainSample), SynthError> {
    let split_tag = match split {
        Split::Train => 0u64,
        Split::Val => 1u64,
    };
    let size = (cfg.image_width, cfg.image_height);
    for attempt in 0..50u64 {
        let seed = splitmix64(cfg.seed ^ (split_tag << 56) ^ ((i as u64) << 8) ^ attempt);
        let scene = match generate_scene(cfg.max_objects, cfg.road_extent, seed) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let vcam = vehicle_camera(size);
        let rcam = roadside_camera(&scene, size);
        let v = render_view(&scene, &vcam, Domain::Vehicle, cfg.depth_min, cfg.depth_max);
        let r = render_view(&scene, &rcam, Domain::Roadside, cfg.depth_min, cfg.depth_max);
        if let (Ok(v), Ok(r)) = (v, r) {
            return Ok((scene, v, r));
        }
    }
    Err(SynthError::ExhaustedRetries(i))
}

fn quantiles_33_66(mut depths: Vec<f64>) -> [f64; 2] {
    if depths.is_empty() {
        return [0.0, f64::INFINITY];
    }
    depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |f: f64| depths[((depths.len() as f64 * f) as usize).min(depths.len() - 1)];
    [q(1.0 / 3.0), q(2.0 / 3.0)]
}

fn assign_difficulty(labels: &mut [Label], thresholds: [f64; 2]) {
    for l in labels {
        let d = if l.depth <= thresholds[0] {
            Difficulty::Easy
        } else if l.depth <= thresholds[1] {
            Difficulty::Moderate
        } else {
            Difficulty::Hard
        };
        l.box3d = l.box3d.with_difficulty(d);
    }
}

/// Generates and writes the full dataset under `root`. Sample `i` of each
/// domain renders the same scene, so equal indices form true cross-view
/// pairs; the domain counts are independent to allow imbalance.
pub fn build_dataset(cfg: &Config, root: &Path) -> Result<DatasetManifest, SynthError> {
    let splits = [
        (Split::Train, cfg.n_roadside, cfg.n_vehicle),
        (Split::Val, cfg.n_val_roadside, cfg.n_val_vehicle),
    ];
    for (split, _, _) in &splits {
        for domain in [Domain::Roadside, Domain::Vehicle] {
            for sub in ["images", "labels", "depth"] {
                fs::create_dir_all(root.join(domain.dir()).join(split.dir()).join(sub))?;
            }
        }
    }
    // pass 1: render, write images and depth, keep labels in memory
    struct Pending {
        split: Split,
        domain: Domain,
        index: usize,
        scene_seed: u64,
        labels: Vec<Label>,
        cam: CameraModel,
    }
    let mut pending: Vec<Pending> = Vec::new();
    for (split, n_r, n_v) in splits {
        let n_scenes = n_r.max(n_v);
        let cfg2 = cfg.clone();
        let rendered = par_map((0..n_scenes).collect(), move |i| {
            render_pair(&cfg2, split, i)
        });
        for (i, res) in rendered.into_iter().enumerate() {
            let (scene, v, r) = res?;
            for (domain, sample, count) in
                [(Domain::Vehicle, v, n_v), (Domain::Roadside, r, n_r)]
            {
                if i >= count {
                    continue;
                }
                let base = root.join(domain.dir()).join(split.dir());
                let name = format!("{i:05}");
                write_png(
                    &base.join("images").join(format!("{name}.png")),
                    &sample.image,
                    cfg.image_width,
                    cfg.image_height,
                )?;
                write_depth_bin(
                    &base.join("depth").join(format!("{name}.bin")),
                    &sample.depth_gt,
                    cfg.image_width / DEPTH_CELL as u32,
                    cfg.image_height / DEPTH_CELL as u32,
                )?;
                pending.push(Pending {
                    split,
                    domain,
                    index: i,
                    scene_seed: scene.seed,
                    labels: sample.labels,
                    cam: sample.cam,
                });
            }
        }
    }
    // pass 2: per-domain depth terciles over the train split drive difficulty
    let tercile_of = |domain: Domain| {
        quantiles_33_66(
            pending
                .iter()
                .filter(|p| p.split == Split::Train && p.domain == domain)
                .flat_map(|p| p.labels.iter().map(|l| l.depth))
                .collect(),
        )
    };
    let thr_r = tercile_of(Domain::Roadside);
    let thr_v = tercile_of(Domain::Vehicle);
    let mut manifest = DatasetManifest {
        seed: cfg.seed,
        image_size: (cfg.image_width, cfg.image_height),
        n_roadside: cfg.n_roadside,
        n_vehicle: cfg.n_vehicle,
        n_val_roadside: cfg.n_val_roadside,
        n_val_vehicle: cfg.n_val_vehicle,
        difficulty_thresholds_roadside: thr_r,
        difficulty_thresholds_vehicle: thr_v,
        train: SplitEntries::default(),
        val: SplitEntries::default(),
    };
    for p in &mut pending {
        let thr = match p.domain {
            Domain::Roadside => thr_r,
            Domain::Vehicle => thr_v,
        };
        assign_difficulty(&mut p.labels, thr);
        let name = format!("{:05}", p.index);
        let rel = |sub: &str, ext: &str| {
            format!("{}/{}/{sub}/{name}.{ext}", p.domain.dir(), p.split.dir())
        };
        let record = SampleRecord {
            domain: p.domain,
            cam: p.cam,
            labels: p.labels.clone(),
        };
        fs::write(
            root.join(rel("labels", "json")),
            serde_json::to_string_pretty(&record)?,
        )?;
        let entry = ManifestEntry {
            image: rel("images", "png"),
            labels: rel("labels", "json"),
            depth: rel("depth", "bin"),
            scene_seed: p.scene_seed,
        };
        let split_entries = match p.split {
            Split::Train => &mut manifest.train,
            Split::Val => &mut manifest.val,
        };
        match p.domain {
            Domain::Roadside => split_entries.roadside.push(entry),
            Domain::Vehicle => split_entries.vehicle.push(entry),
        }
    }
    fs::write(
        root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest, SynthError> {
    let text = fs::read_to_string(root.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<DomainSample, SynthError> {
    let (image, _, _) = read_png(&root.join(&entry.image))?;
    let depth_gt = read_depth_bin(&root.join(&entry.depth))?;
    let record: SampleRecord = serde_json::from_str(&fs::read_to_string(root.join(&entry.labels))?)?;
    Ok(DomainSample {
        image,
        labels: record.labels,
        depth_gt,
        domain: record.domain,
        cam: record.cam,
    })
}

/// Random crop-and-resize augmentation: crops a window covering `scale` of
/// each axis, resamples nearest-neighbor and drops labels whose center
/// leaves the window. 2D boxes and projected centers are remapped; 3D
/// quantities are untouched.
pub fn random_crop(sample: &DomainSample, rng: &mut ChaCha8Rng, min_scale: f64) -> DomainSample {
    let (w, h) = (sample.cam.image_size.0 as usize, sample.cam.image_size.1 as usize);
    let scale = rng.gen_range(min_scale..=1.0);
    let u0 = rng.gen_range(0.0..=(1.0 - scale));
    let v0 = rng.gen_range(0.0..=(1.0 - scale));
    let mut image = vec![0.0; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let sx = ((u0 + scale * x as f64 / w as f64) * w as f64) as usize;
            let sy = ((v0 + scale * y as f64 / h as f64) * h as f64) as usize;
            let (sx, sy) = (sx.min(w - 1), sy.min(h - 1));
            for ch in 0..3 {
                image[(y * w + x) * 3 + ch] = sample.image[(sy * w + sx) * 3 + ch];
            }
        }
    }
    let (cw, chh) = (w / DEPTH_CELL, h / DEPTH_CELL);
    let mut depth_gt = vec![-1.0f32; cw * chh];
    for cy in 0..chh {
        for cx in 0..cw {
            let sx = ((u0 + scale * cx as f64 / cw as f64) * cw as f64) as usize;
            let sy = ((v0 + scale * cy as f64 / chh as f64) * chh as f64) as usize;
            depth_gt[cy * cw + cx] = sample.depth_gt[sy.min(chh - 1) * cw + sx.min(cw - 1)];
        }
    }
    let remap = |u: f64, v: f64| ((u - u0) / scale, (v - v0) / scale);
    let labels = sample
        .labels
        .iter()
        .filter_map(|l| {
            let (cu, cv) = remap(l.center_proj[0], l.center_proj[1]);
            if !(0.0..1.0).contains(&cu) || !(0.0..1.0).contains(&cv) {
                return None;
            }
            let (bu, bv) = remap(l.box2d.cx, l.box2d.cy);
            let mut out = l.clone();
            out.center_proj = [cu, cv];
            out.box2d = Box2D::new(
                bu.clamp(0.0, 1.0),
                bv.clamp(0.0, 1.0),
                (l.box2d.w / scale).min(1.0),
                (l.box2d.h / scale).min(1.0),
            );
            Some(out)
        })
        .collect();
    DomainSample {
        image,
        labels,
        depth_gt,
        domain: sample.domain,
        cam: sample.cam,
    }
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|p, q| p.partial_cmp(q).unwrap());
    xb.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let mut best: f64 = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < xa.len() && j < xb.len() {
        let cur = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= cur {
            i += 1;
        }
        while j < xb.len() && xb[j] <= cur {
            j += 1;
        }
        let fa = i as f64 / xa.len() as f64;
        let fb = j as f64 / xb.len() as f64;
        best = best.max((fa - fb).abs());
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou_bev;

    fn small_cfg() -> Config {
        let mut c = Config::default();
        c.image_width = 64;
        c.image_height = 32;
        c.max_objects = 4;
        c
    }

    #[test]
    fn scene_deterministic_for_seed() {
        let a = generate_scene(5, 56.0, 0).unwrap();
        let b = generate_scene(5, 56.0, 0).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(5, 56.0, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn max_objects_one_gives_one() {
        for seed in 0..20 {
            assert_eq!(generate_scene(1, 56.0, seed).unwrap().objects.len(), 1);
        }
    }

    #[test]
    fn scenes_never_overlap_in_bev() {
        for seed in 0..1000 {
            let s = generate_scene(6, 56.0, seed).unwrap();
            for i in 0..s.objects.len() {
                for j in (i + 1)..s.objects.len() {
                    assert_eq!(iou_bev(&s.objects[i], &s.objects[j]), 0.0, "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn principal_axis_object_centers_box() {
        let scene = Scene {
            objects: vec![Box3D::new([0.0, VEHICLE_CAM_HEIGHT - 0.75, 10.0], [1.5, 1.8, 4.2], 0.0)],
            road_extent: 56.0,
            seed: 3,
            roadside_height: 6.0,
            roadside_pitch: -0.26,
        };
        let cam = vehicle_camera((64, 32));
        let s = render_view(&scene, &cam, Domain::Vehicle, 2.0, 65.0).unwrap();
        assert_eq!(s.labels.len(), 1);
        assert!((s.labels[0].box2d.cx - 0.5).abs() < 0.01);
        assert!((s.labels[0].center_proj[0] - 0.5).abs() < 1e-9);
        assert!((s.labels[0].depth - 10.0).abs() < 1e-12);
    }

    #[test]
    fn cross_view_identity_and_albedo_match() {
        // mid-road objects that both cameras keep after filtering
        let mk = |x: f64, z: f64| Box3D::new([x, VEHICLE_CAM_HEIGHT - 0.75, z], [1.5, 1.8, 4.2], 0.1);
        let scene = Scene {
            objects: vec![mk(-2.5, 20.0), mk(2.5, 30.0)],
            road_extent: 56.0,
            seed: 9,
            roadside_height: 6.0,
            roadside_pitch: -0.26,
        };
        let v = render_view(&scene, &vehicle_camera((64, 32)), Domain::Vehicle, 2.0, 65.0).unwrap();
        let r = render_view(&scene, &roadside_camera(&scene, (64, 32)), Domain::Roadside, 2.0, 65.0).unwrap();
        assert_eq!(v.labels.len(), r.labels.len());
        let ids = |s: &DomainSample| {
            let mut v: Vec<usize> = s.labels.iter().map(|l| l.object_id).collect();
            v.sort();
            v
        };
        assert_eq!(ids(&v), ids(&r));
        for lv in &v.labels {
            let lr = r.labels.iter().find(|l| l.object_id == lv.object_id).unwrap();
            assert_eq!(lv.albedo, lr.albedo);
            // depths from opposite ends of the road
            assert!((lv.depth + lr.depth - 56.0).abs() < 1.0);
        }
    }

    #[test]
    fn deep_object_excluded_from_labels() {
        let near = Box3D::new([0.0, 0.75, 10.0], [1.5, 1.8, 4.2], 0.0);
        let far = Box3D::new([0.0, 0.75, 70.0], [1.5, 1.8, 4.2], 0.0);
        let scene = Scene {
            objects: vec![near, far],
            road_extent: 90.0,
            seed: 1,
            roadside_height: 6.0,
            roadside_pitch: -0.26,
        };
        let s = render_view(&scene, &vehicle_camera((64, 32)), Domain::Vehicle, 2.0, 65.0).unwrap();
        assert_eq!(s.labels.len(), 1);
        assert_eq!(s.labels[0].object_id, 0);
    }

    #[test]
    fn empty_view_is_an_error() {
        // object behind the vehicle camera
        let scene = Scene {
            objects: vec![Box3D::new([0.0, 0.75, -10.0], [1.5, 1.8, 4.2], 0.0)],
            road_extent: 56.0,
            seed: 1,
            roadside_height: 6.0,
            roadside_pitch: -0.26,
        };
        assert!(matches!(
            render_view(&scene, &vehicle_camera((64, 32)), Domain::Vehicle, 2.0, 65.0),
            Err(SynthError::EmptyView(Domain::Vehicle))
        ));
    }

    #[test]
    fn depth_cells_lie_inside_object_footprints() {
        for seed in 0..20 {
            let scene = generate_scene(4, 56.0, seed).unwrap();
            let cam = vehicle_camera((64, 32));
            let Ok(s) = render_view(&scene, &cam, Domain::Vehicle, 2.0, 65.0) else {
                continue;
            };
            // pixel-space bounds per rendered object
            let rects: Vec<[f64; 4]> = scene
                .objects
                .iter()
                .filter_map(|o| {
                    let b = object_in_camera(o, Domain::Vehicle, &scene);
                    let proj: Vec<[f64; 2]> = corners_3d(&b)
                        .iter()
                        .filter_map(|c| cam.project_point(*c).ok())
                        .map(|uv| [uv[0] * 64.0, uv[1] * 32.0])
                        .collect();
                    if proj.len() < 8 {
                        return None;
                    }
                    Some([
                        proj.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min),
                        proj.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min),
                        proj.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max),
                        proj.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max),
                    ])
                })
                .collect();
            let cell = DEPTH_CELL as f64;
            for cy in 0..2 {
                for cx in 0..4 {
                    let d = s.depth_gt[cy * 4 + cx];
                    if d < 0.0 {
                        continue;
                    }
                    let (x0, y0) = (cx as f64 * cell - cell, cy as f64 * cell - cell);
                    let (x1, y1) = (x0 + 3.0 * cell, y0 + 3.0 * cell);
                    assert!(
                        rects.iter().any(|r| r[0] < x1 && r[2] > x0 && r[1] < y1 && r[3] > y0),
                        "seed {seed} cell ({cx},{cy}) depth {d} outside every footprint"
                    );
                }
            }
        }
    }

    #[test]
    fn dataset_counts_round_trip_and_rebuild() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.n_roadside = 10;
        cfg.n_vehicle = 40;
        cfg.n_val_roadside = 2;
        cfg.n_val_vehicle = 2;
        let m = build_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.train.roadside.len(), 10);
        assert_eq!(m.train.vehicle.len(), 40);
        assert_eq!(m.val.roadside.len(), 2);
        // reading back reproduces the in-memory sample exactly
        let entry = &m.train.roadside[3];
        let loaded = load_sample(dir.path(), entry).unwrap();
        let m2 = load_manifest(dir.path()).unwrap();
        assert_eq!(serde_json::to_string(&m).unwrap(), serde_json::to_string(&m2).unwrap());
        // regenerate in a second directory: identical manifests and files
        let dir2 = tempfile::tempdir().unwrap();
        build_dataset(&cfg, dir2.path()).unwrap();
        let a = fs::read(dir.path().join("manifest.json")).unwrap();
        let b = fs::read(dir2.path().join("manifest.json")).unwrap();
        assert_eq!(a, b);
        let loaded2 = load_sample(dir2.path(), entry).unwrap();
        assert_eq!(loaded, loaded2);
        // the same scene index in both domains shares a scene
        assert_eq!(m.train.roadside[0].scene_seed, m.train.vehicle[0].scene_seed);
    }

    #[test]
    fn written_sample_matches_memory_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.n_roadside = 1;
        cfg.n_vehicle = 1;
        cfg.n_val_roadside = 1;
        cfg.n_val_vehicle = 1;
        let m = build_dataset(&cfg, dir.path()).unwrap();
        let entry = &m.train.vehicle[0];
        let loaded = load_sample(dir.path(), entry).unwrap();
        // re-render the same scene and compare (difficulty comes from the
        // dataset pass, so compare everything except that tag)
        let (_, v, _) = render_pair(&cfg, Split::Train, 0).unwrap();
        assert_eq!(loaded.image, v.image);
        assert_eq!(loaded.depth_gt, v.depth_gt);
        assert_eq!(loaded.labels.len(), v.labels.len());
        for (a, b) in loaded.labels.iter().zip(&v.labels) {
            assert_eq!(a.box2d, b.box2d);
            assert_eq!(a.box3d.center, b.box3d.center);
            assert_eq!(a.depth, b.depth);
        }
    }

    #[test]
    fn depth_distributions_diverge_between_domains() {
        let mut dv = Vec::new();
        let mut dr = Vec::new();
        for seed in 0..500 {
            let scene = generate_scene(4, 56.0, seed).unwrap();
            if let Ok(v) = render_view(&scene, &vehicle_camera((64, 32)), Domain::Vehicle, 2.0, 65.0) {
                dv.extend(v.labels.iter().map(|l| l.depth));
            }
            if let Ok(r) = render_view(
                &scene,
                &roadside_camera(&scene, (64, 32)),
                Domain::Roadside,
                2.0,
                65.0,
            ) {
                dr.extend(r.labels.iter().map(|l| l.depth));
            }
        }
        assert!(dv.len() > 300 && dr.len() > 300);
        let ks = ks_statistic(&dv, &dr);
        assert!(ks > 0.2, "KS statistic {ks} too small; domains too similar");
    }

    #[test]
    fn foreground_depth_cells_in_supervisable_range() {
        for seed in 100..140 {
            let scene = generate_scene(4, 56.0, seed).unwrap();
            let Ok(s) = render_view(&scene, &vehicle_camera((64, 32)), Domain::Vehicle, 2.0, 65.0)
            else {
                continue;
            };
            for d in &s.depth_gt {
                assert!(*d == -1.0 || *d > 0.0);
            }
        }
    }

    #[test]
    fn crop_preserves_label_consistency() {
        let scene = generate_scene(4, 56.0, 7).unwrap();
        let s = render_view(&scene, &vehicle_camera((64, 32)), Domain::Vehicle, 2.0, 65.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = random_crop(&s, &mut rng, 0.8);
        assert_eq!(c.image.len(), s.image.len());
        for l in &c.labels {
            assert!((0.0..1.0).contains(&l.center_proj[0]));
            assert!((0.0..1.0).contains(&l.center_proj[1]));
            // 3D quantities untouched by the 2D crop
            let orig = s.labels.iter().find(|o| o.object_id == l.object_id).unwrap();
            assert_eq!(l.box3d.center, orig.box3d.center);
            assert_eq!(l.depth, orig.depth);
        }
    }

    #[test]
    fn ks_statistic_basics() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(ks_statistic(&a, &a), 0.0);
        let b: Vec<f64> = (0..100).map(|i| i as f64 + 1000.0).collect();
        assert!((ks_statistic(&a, &b) - 1.0).abs() < 1e-12);
    }
}
