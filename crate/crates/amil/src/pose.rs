//! Synthetic stick-figure pose world: sample generation, ground-truth
//! heatmap rendering, image-to-bag region extraction, argmax pose decoding,
//! and flip-averaged inference.
//!
//! Images are S x S grayscale grids in [0, 1]. Heatmaps live on the patch
//! grid (S/P x S/P), one channel per joint, so the generator's FC output
//! head stays small. Coordinates are (x, y) image pixels with y growing
//! downward.

use crate::error::{AmilError, Result};
use crate::net::MilNetwork;
use crate::pooling::InstanceBag;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

/// Joint layout of the 7-joint desk skeleton.
pub const JOINTS_7: [&str; 7] = ["head", "neck", "pelvis", "lhand", "rhand", "lfoot", "rfoot"];

/// Configuration of the synthetic pose world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseConfig {
    pub image_size: usize,
    pub joint_count: usize,
    pub patch_size: usize,
    pub sigma_h: f64,
    pub limb_thickness: f64,
    /// Mask a random rectangle over the image and mark covered joints
    /// invisible.
    pub occlusion: bool,
}

impl Default for PoseConfig {
    fn default() -> Self {
        PoseConfig {
            image_size: 64,
            joint_count: 7,
            patch_size: 8,
            sigma_h: 1.0,
            limb_thickness: 1.5,
            occlusion: false,
        }
    }
}

impl PoseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(AmilError::Config("image and patch sizes must be > 0".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(AmilError::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.joint_count != 7 && self.joint_count != 16 {
            return Err(AmilError::Config(format!(
                "unsupported joint count {} (7 or 16)",
                self.joint_count
            )));
        }
        if self.sigma_h <= 0.0 {
            return Err(AmilError::Config("sigma_h must be > 0".into()));
        }
        Ok(())
    }

    /// Heatmap grid side length.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Instance feature dimension: flattened patch plus normalized (row, col)
    /// patch center.
    pub fn instance_dim(&self) -> usize {
        self.patch_size * self.patch_size + 2
    }

    /// Generator output dimension: one heatmap cell per joint per patch.
    pub fn heatmap_dim(&self) -> usize {
        self.joint_count * self.grid() * self.grid()
    }
}

/// Ordered joint coordinates in image pixels plus visibility flags.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub joints: Vec<(f64, f64)>,
    pub visible: Vec<bool>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }
}

/// Per-joint 2-D confidence grid, channel-major row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Heatmap {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn from_flat(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), channels * height * width);
        Heatmap {
            channels,
            height,
            width,
            values,
        }
    }

    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.values[(c * self.height + r) * self.width + col]
    }

    pub fn set(&mut self, c: usize, r: usize, col: usize, v: f64) {
        self.values[(c * self.height + r) * self.width + col] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let len = self.height * self.width;
        &self.values[c * len..(c + 1) * len]
    }
}

/// One synthetic training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSample {
    /// Row-major S x S grayscale grid, values in [0, 1].
    pub image: Vec<f64>,
    pub keypoints: KeypointSet,
    pub gt_heatmaps: Heatmap,
}

/// Left/right channel pairs swapped when un-mirroring heatmaps.
pub fn flip_pairs(joint_count: usize) -> Result<Vec<(usize, usize)>> {
    match joint_count {
        7 => Ok(vec![(3, 4), (5, 6)]),
        16 => Ok(vec![(0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13)]),
        other => Err(AmilError::Config(format!(
            "no left/right pairing table for {other} joints"
        ))),
    }
}

/// Joint index pair whose segment normalizes PCK distances (the torso).
pub fn torso_segment(joint_count: usize) -> Result<(usize, usize)> {
    match joint_count {
        7 => Ok((2, 1)),  // pelvis -> neck
        16 => Ok((6, 7)), // pelvis -> thorax
        other => Err(AmilError::Config(format!(
            "no torso segment for {other} joints"
        ))),
    }
}

/// Joint index pair whose segment normalizes PCKh distances (the head).
pub fn head_segment(joint_count: usize) -> Result<(usize, usize)> {
    match joint_count {
        7 => Ok((0, 1)),  // head -> neck
        16 => Ok((9, 8)), // head top -> upper neck
        other => Err(AmilError::Config(format!(
            "no head segment for {other} joints"
        ))),
    }
}

fn dir(angle_from_up: f64) -> (f64, f64) {
    (angle_from_up.sin(), -angle_from_up.cos())
}

fn offset(base: (f64, f64), angle: f64, len: f64) -> (f64, f64) {
    let (dx, dy) = dir(angle);
    (base.0 + len * dx, base.1 + len * dy)
}

/// Bones drawn as line segments, as joint index pairs.
fn bones(joint_count: usize) -> Vec<(usize, usize)> {
    match joint_count {
        7 => vec![(2, 1), (1, 0), (1, 3), (1, 4), (2, 5), (2, 6)],
        16 => vec![
            (6, 7),
            (7, 8),
            (8, 9),
            (7, 12),
            (12, 11),
            (11, 10),
            (7, 13),
            (13, 14),
            (14, 15),
            (6, 2),
            (2, 1),
            (1, 0),
            (6, 3),
            (3, 4),
            (4, 5),
        ],
        _ => unreachable!("validated joint count"),
    }
}

fn sample_skeleton(rng: &mut ChaCha8Rng, cfg: &PoseConfig) -> Vec<(f64, f64)> {
    let s = cfg.image_size as f64;
    use std::f64::consts::PI;
    let pelvis = (rng.gen_range(0.30..0.70) * s, rng.gen_range(0.32..0.68) * s);
    let torso_ang = rng.gen_range(-0.5..0.5);
    let neck = offset(pelvis, torso_ang, rng.gen_range(0.20..0.32) * s);
    match cfg.joint_count {
        7 => {
            let head = offset(neck, torso_ang + rng.gen_range(-0.6..0.6), rng.gen_range(0.09..0.15) * s);
            let rhand = offset(neck, rng.gen_range(0.35..2.6), rng.gen_range(0.16..0.30) * s);
            let lhand = offset(neck, -rng.gen_range(0.35..2.6), rng.gen_range(0.16..0.30) * s);
            let rfoot = offset(pelvis, PI - rng.gen_range(0.10..1.10), rng.gen_range(0.18..0.34) * s);
            let lfoot = offset(pelvis, -(PI - rng.gen_range(0.10..1.10)), rng.gen_range(0.18..0.34) * s);
            vec![head, neck, pelvis, lhand, rhand, lfoot, rfoot]
        }
        16 => {
            let upper_neck = offset(neck, torso_ang + rng.gen_range(-0.3..0.3), 0.05 * s);
            let head_top = offset(upper_neck, torso_ang + rng.gen_range(-0.4..0.4), rng.gen_range(0.07..0.12) * s);
            let rsho = offset(neck, PI / 2.0 + rng.gen_range(-0.2..0.2), rng.gen_range(0.08..0.14) * s);
            let lsho = offset(neck, -PI / 2.0 + rng.gen_range(-0.2..0.2), rng.gen_range(0.08..0.14) * s);
            let relb = offset(rsho, rng.gen_range(0.35..2.6), rng.gen_range(0.09..0.16) * s);
            let rwri = offset(relb, rng.gen_range(0.2..2.8), rng.gen_range(0.09..0.16) * s);
            let lelb = offset(lsho, -rng.gen_range(0.35..2.6), rng.gen_range(0.09..0.16) * s);
            let lwri = offset(lelb, -rng.gen_range(0.2..2.8), rng.gen_range(0.09..0.16) * s);
            let rhip = offset(pelvis, PI / 2.0 + rng.gen_range(-0.2..0.2), rng.gen_range(0.05..0.10) * s);
            let lhip = offset(pelvis, -PI / 2.0 + rng.gen_range(-0.2..0.2), rng.gen_range(0.05..0.10) * s);
            let rknee = offset(rhip, PI - rng.gen_range(0.10..0.90), rng.gen_range(0.10..0.18) * s);
            let rank = offset(rknee, PI - rng.gen_range(0.05..0.90), rng.gen_range(0.10..0.18) * s);
            let lknee = offset(lhip, -(PI - rng.gen_range(0.10..0.90)), rng.gen_range(0.10..0.18) * s);
            let lank = offset(lknee, -(PI - rng.gen_range(0.05..0.90)), rng.gen_range(0.10..0.18) * s);
            vec![
                rank, rknee, rhip, lhip, lknee, lank, pelvis, neck, upper_neck, head_top, rwri,
                relb, rsho, lsho, lelb, lwri,
            ]
        }
        _ => unreachable!("validated joint count"),
    }
}

fn draw_segment(image: &mut [f64], s: usize, a: (f64, f64), b: (f64, f64), radius: f64) {
    let min_x = (a.0.min(b.0) - radius - 1.0).floor().max(0.0) as usize;
    let max_x = ((a.0.max(b.0) + radius + 1.0).ceil() as usize).min(s - 1);
    let min_y = (a.1.min(b.1) - radius - 1.0).floor().max(0.0) as usize;
    let max_y = ((a.1.max(b.1) + radius + 1.0).ceil() as usize).min(s - 1);
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    for r in min_y..=max_y {
        for c in min_x..=max_x {
            let px = c as f64 + 0.5;
            let py = r as f64 + 0.5;
            let t = if len2 > 0.0 {
                (((px - a.0) * abx + (py - a.1) * aby) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let qx = a.0 + t * abx;
            let qy = a.1 + t * aby;
            let d2 = (px - qx) * (px - qx) + (py - qy) * (py - qy);
            if d2 <= radius * radius {
                image[r * s + c] = 1.0;
            }
        }
    }
}

/// Generate one synthetic pose sample, deterministically from the seed.
pub fn generate_sample(seed: u64, cfg: &PoseConfig) -> Result<PoseSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    let sf = s as f64;
    let mut joints = sample_skeleton(&mut rng, cfg);
    for j in &mut joints {
        j.0 = j.0.clamp(0.5, sf - 0.5);
        j.1 = j.1.clamp(0.5, sf - 0.5);
    }
    let mut image = vec![0.0; s * s];
    let radius = cfg.limb_thickness / 2.0;
    for (a, b) in bones(cfg.joint_count) {
        draw_segment(&mut image, s, joints[a], joints[b], radius);
    }
    let mut visible = vec![true; joints.len()];
    if cfg.occlusion {
        let w = rng.gen_range(0.10..0.30) * sf;
        let h = rng.gen_range(0.10..0.30) * sf;
        let x0 = rng.gen_range(0.0..(sf - w));
        let y0 = rng.gen_range(0.0..(sf - h));
        for r in (y0 as usize)..((y0 + h) as usize).min(s) {
            for c in (x0 as usize)..((x0 + w) as usize).min(s) {
                image[r * s + c] = 0.0;
            }
        }
        for (i, &(x, y)) in joints.iter().enumerate() {
            if x >= x0 && x < x0 + w && y >= y0 && y < y0 + h {
                visible[i] = false;
            }
        }
    }
    let keypoints = KeypointSet { joints, visible };
    let grid = cfg.grid();
    let gt_heatmaps = render_heatmap(&keypoints, cfg.image_size, grid, grid, cfg.sigma_h)?;
    Ok(PoseSample {
        image,
        keypoints,
        gt_heatmaps,
    })
}

/// Render per-joint Gaussian target heatmaps on an `h x w` grid.
///
/// The keypoint's cell carries exactly 1.0; distances are measured between
/// grid cells so the per-channel maximum is always at the keypoint's cell.
/// Invisible joints get all-zero channels.
pub fn render_heatmap(
    keypoints: &KeypointSet,
    image_size: usize,
    h: usize,
    w: usize,
    sigma_h: f64,
) -> Result<Heatmap> {
    if sigma_h <= 0.0 {
        return Err(AmilError::Config("sigma_h must be > 0".into()));
    }
    let mut hm = Heatmap::zeros(keypoints.len(), h, w);
    let sx = w as f64 / image_size as f64;
    let sy = h as f64 / image_size as f64;
    for (j, (&(x, y), &vis)) in keypoints.joints.iter().zip(keypoints.visible.iter()).enumerate() {
        if !vis {
            continue;
        }
        let cj = ((x * sx).floor() as usize).min(w - 1);
        let rj = ((y * sy).floor() as usize).min(h - 1);
        for r in 0..h {
            for c in 0..w {
                let dr = r as f64 - rj as f64;
                let dc = c as f64 - cj as f64;
                let v = (-(dr * dr + dc * dc) / (2.0 * sigma_h * sigma_h)).exp();
                hm.set(j, r, c, v);
            }
        }
    }
    Ok(hm)
}

/// Partition the image into patches and build one instance per patch:
/// flattened pixels plus the normalized (row, col) patch center.
pub fn image_to_bag(image: &[f64], image_size: usize, patch_size: usize) -> Result<InstanceBag> {
    if patch_size == 0 || image_size % patch_size != 0 {
        return Err(AmilError::Config(format!(
            "image size {image_size} not divisible by patch size {patch_size}"
        )));
    }
    assert_eq!(image.len(), image_size * image_size);
    let grid = image_size / patch_size;
    let mut instances = Vec::with_capacity(grid * grid);
    for gr in 0..grid {
        for gc in 0..grid {
            let mut inst = Vec::with_capacity(patch_size * patch_size + 2);
            for pr in 0..patch_size {
                let row = gr * patch_size + pr;
                let base = row * image_size + gc * patch_size;
                inst.extend_from_slice(&image[base..base + patch_size]);
            }
            let row_center = (gr as f64 + 0.5) * patch_size as f64 / image_size as f64;
            let col_center = (gc as f64 + 0.5) * patch_size as f64 / image_size as f64;
            inst.push(row_center);
            inst.push(col_center);
            instances.push(inst);
        }
    }
    InstanceBag::new(instances, 1, 0)
}

/// Reassemble the image from a bag produced by [`image_to_bag`] (positional
/// features dropped).
pub fn bag_to_image(bag: &InstanceBag, image_size: usize, patch_size: usize) -> Vec<f64> {
    let grid = image_size / patch_size;
    let mut image = vec![0.0; image_size * image_size];
    for (k, inst) in bag.instances.iter().enumerate() {
        let gr = k / grid;
        let gc = k % grid;
        for pr in 0..patch_size {
            let row = gr * patch_size + pr;
            let base = row * image_size + gc * patch_size;
            image[base..base + patch_size]
                .copy_from_slice(&inst[pr * patch_size..(pr + 1) * patch_size]);
        }
    }
    image
}

/// Per-channel argmax decoding back to image coordinates at cell centers.
/// Ties break toward the smallest row-major index.
pub fn decode_pose(hm: &Heatmap, original_size: usize) -> KeypointSet {
    let mut joints = Vec::with_capacity(hm.channels);
    let cell_w = original_size as f64 / hm.width as f64;
    let cell_h = original_size as f64 / hm.height as f64;
    for c in 0..hm.channels {
        let chan = hm.channel(c);
        let mut best = 0;
        for (i, v) in chan.iter().enumerate() {
            if *v > chan[best] {
                best = i;
            }
        }
        let r = best / hm.width;
        let col = best % hm.width;
        joints.push(((col as f64 + 0.5) * cell_w, (r as f64 + 0.5) * cell_h));
    }
    KeypointSet {
        visible: vec![true; joints.len()],
        joints,
    }
}

/// Flip image columns.
pub fn mirror_image(image: &[f64], image_size: usize) -> Vec<f64> {
    let s = image_size;
    let mut out = vec![0.0; s * s];
    for r in 0..s {
        for c in 0..s {
            out[r * s + c] = image[r * s + (s - 1 - c)];
        }
    }
    out
}

/// Flip heatmap columns and swap paired left/right channels.
pub fn mirror_heatmap(hm: &Heatmap, pairs: &[(usize, usize)]) -> Heatmap {
    let mut out = Heatmap::zeros(hm.channels, hm.height, hm.width);
    let mut channel_map: Vec<usize> = (0..hm.channels).collect();
    for &(a, b) in pairs {
        channel_map[a] = b;
        channel_map[b] = a;
    }
    for c in 0..hm.channels {
        let src = channel_map[c];
        for r in 0..hm.height {
            for col in 0..hm.width {
                out.set(c, r, col, hm.get(src, r, hm.width - 1 - col));
            }
        }
    }
    out
}

/// Predict heatmaps for the image and its mirror, un-mirror the second
/// prediction, and return the elementwise mean.
pub fn flip_averaged_heatmaps(
    net: &MilNetwork,
    image: &[f64],
    cfg: &PoseConfig,
) -> Result<Heatmap> {
    let pairs = flip_pairs(cfg.joint_count)?;
    let grid = cfg.grid();
    let direct = predict_heatmap(net, image, cfg)?;
    let mirrored = mirror_image(image, cfg.image_size);
    let flipped_pred = predict_heatmap(net, &mirrored, cfg)?;
    let restored = mirror_heatmap(&flipped_pred, &pairs);
    let mut values = Vec::with_capacity(cfg.joint_count * grid * grid);
    for (a, b) in direct.values.iter().zip(restored.values.iter()) {
        values.push(0.5 * (a + b));
    }
    Ok(Heatmap::from_flat(cfg.joint_count, grid, grid, values))
}

/// Single-pass generator prediction reshaped to a heatmap.
pub fn predict_heatmap(net: &MilNetwork, image: &[f64], cfg: &PoseConfig) -> Result<Heatmap> {
    let bag = image_to_bag(image, cfg.image_size, cfg.patch_size)?;
    let pred = net.infer_score(&bag)?;
    let grid = cfg.grid();
    if pred.len() != cfg.joint_count * grid * grid {
        return Err(AmilError::Config(format!(
            "network output {} does not match heatmap size {}",
            pred.len(),
            cfg.joint_count * grid * grid
        )));
    }
    Ok(Heatmap::from_flat(cfg.joint_count, grid, grid, pred))
}

fn fmt_g6(x: f64) -> String {
    format!("{:.5e}", x)
}

/// Serialize samples in the `AMIL-DATA v1` text format.
pub fn write_dataset<W: Write>(out: &mut W, samples: &[PoseSample], cfg: &PoseConfig) -> Result<()> {
    let io_err = |e: std::io::Error| AmilError::io("<writer>", e);
    writeln!(
        out,
        "AMIL-DATA v1 S={} J={} P={} count={}",
        cfg.image_size,
        cfg.joint_count,
        cfg.patch_size,
        samples.len()
    )
    .map_err(io_err)?;
    for sample in samples {
        let mut line = String::with_capacity(sample.image.len() * 10);
        for (i, v) in sample.image.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{}", fmt_g6(*v));
        }
        writeln!(out, "{line}").map_err(io_err)?;
        let mut kline = String::new();
        for (i, (&(x, y), &vis)) in sample
            .keypoints
            .joints
            .iter()
            .zip(sample.keypoints.visible.iter())
            .enumerate()
        {
            if i > 0 {
                kline.push(' ');
            }
            let _ = write!(kline, "{} {} {}", fmt_g6(x), fmt_g6(y), u8::from(vis));
        }
        writeln!(out, "{kline}").map_err(io_err)?;
    }
    Ok(())
}

pub fn write_dataset_file(path: &Path, samples: &[PoseSample], cfg: &PoseConfig) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| AmilError::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(&mut w, samples, cfg)?;
    w.flush()
        .map_err(|e| AmilError::io(path.display().to_string(), e))
}

/// Parse an `AMIL-DATA v1` stream; ground-truth heatmaps are re-rendered
/// from the parsed keypoints with the given sigma.
pub fn read_dataset<R: Read>(reader: R, sigma_h: f64) -> Result<(Vec<PoseSample>, PoseConfig)> {
    let mut lines = BufReader::new(reader).lines();
    let parse_err = |offset: u64, message: String| AmilError::Parse { offset, message };
    let header = lines
        .next()
        .ok_or_else(|| parse_err(0, "empty dataset file".into()))?
        .map_err(|e| AmilError::io("<reader>", e))?;
    let mut offset = header.len() as u64 + 1;
    let mut s = None;
    let mut j = None;
    let mut p = None;
    let mut count = None;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("AMIL-DATA") || fields.next() != Some("v1") {
        return Err(parse_err(0, format!("bad header: {header}")));
    }
    for field in fields {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| parse_err(0, format!("bad header field: {field}")))?;
        let n: usize = value
            .parse()
            .map_err(|_| parse_err(0, format!("bad header value: {field}")))?;
        match key {
            "S" => s = Some(n),
            "J" => j = Some(n),
            "P" => p = Some(n),
            "count" => count = Some(n),
            _ => return Err(parse_err(0, format!("unknown header key: {key}"))),
        }
    }
    let (s, j, p, count) = match (s, j, p, count) {
        (Some(s), Some(j), Some(p), Some(count)) => (s, j, p, count),
        _ => return Err(parse_err(0, "header missing S/J/P/count".into())),
    };
    let cfg = PoseConfig {
        image_size: s,
        joint_count: j,
        patch_size: p,
        sigma_h,
        ..PoseConfig::default()
    };
    cfg.validate()?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let img_line = lines
            .next()
            .ok_or_else(|| parse_err(offset, format!("missing image line for sample {i}")))?
            .map_err(|e| AmilError::io("<reader>", e))?;
        let image: Vec<f64> = img_line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(offset, format!("bad image value in sample {i}: {e}")))?;
        if image.len() != s * s {
            return Err(parse_err(
                offset,
                format!("sample {i} has {} image values, expected {}", image.len(), s * s),
            ));
        }
        offset += img_line.len() as u64 + 1;
        let kp_line = lines
            .next()
            .ok_or_else(|| parse_err(offset, format!("missing keypoint line for sample {i}")))?
            .map_err(|e| AmilError::io("<reader>", e))?;
        let tokens: Vec<&str> = kp_line.split_whitespace().collect();
        if tokens.len() != 3 * j {
            return Err(parse_err(
                offset,
                format!("sample {i} has {} keypoint tokens, expected {}", tokens.len(), 3 * j),
            ));
        }
        let mut joints = Vec::with_capacity(j);
        let mut visible = Vec::with_capacity(j);
        for t in tokens.chunks(3) {
            let x: f64 = t[0]
                .parse()
                .map_err(|e| parse_err(offset, format!("bad keypoint x: {e}")))?;
            let y: f64 = t[1]
                .parse()
                .map_err(|e| parse_err(offset, format!("bad keypoint y: {e}")))?;
            let v: u8 = t[2]
                .parse()
                .map_err(|e| parse_err(offset, format!("bad visibility flag: {e}")))?;
            joints.push((x, y));
            visible.push(v != 0);
        }
        offset += kp_line.len() as u64 + 1;
        let keypoints = KeypointSet { joints, visible };
        let grid = cfg.grid();
        let gt_heatmaps = render_heatmap(&keypoints, s, grid, grid, sigma_h)?;
        samples.push(PoseSample {
            image,
            keypoints,
            gt_heatmaps,
        });
    }
    Ok((samples, cfg))
}

pub fn read_dataset_file(path: &Path, sigma_h: f64) -> Result<(Vec<PoseSample>, PoseConfig)> {
    let file = std::fs::File::open(path)
        .map_err(|e| AmilError::io(path.display().to_string(), e))?;
    read_dataset(file, sigma_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{MilNetwork, NetworkDims, PoolingMode};

    #[test]
    fn generate_sample_deterministic() {
        let cfg = PoseConfig::default();
        let a = generate_sample(7, &cfg).unwrap();
        let b = generate_sample(7, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(8, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn visible_joints_lie_on_drawn_pixels() {
        let cfg = PoseConfig::default();
        for seed in 0..200 {
            let sample = generate_sample(seed, &cfg).unwrap();
            for (&(x, y), &vis) in sample
                .keypoints
                .joints
                .iter()
                .zip(sample.keypoints.visible.iter())
            {
                if !vis {
                    continue;
                }
                assert!(x >= 0.0 && x < cfg.image_size as f64);
                assert!(y >= 0.0 && y < cfg.image_size as f64);
                let c = x as usize;
                let r = y as usize;
                assert!(
                    sample.image[r * cfg.image_size + c] > 0.0,
                    "seed {seed}: joint at ({x}, {y}) not on a limb pixel"
                );
            }
        }
    }

    #[test]
    fn joint_histogram_covers_half_the_image() {
        let cfg = PoseConfig::default();
        let s = cfg.image_size;
        let mut hit = vec![false; s * s];
        for seed in 0..1000 {
            let sample = generate_sample(seed, &cfg).unwrap();
            for &(x, y) in &sample.keypoints.joints {
                hit[(y as usize) * s + (x as usize)] = true;
            }
        }
        let covered = hit.iter().filter(|h| **h).count();
        assert!(
            covered * 2 >= s * s,
            "only {covered} of {} cells covered",
            s * s
        );
    }

    #[test]
    fn sixteen_joint_skeleton_generates() {
        let cfg = PoseConfig {
            joint_count: 16,
            ..PoseConfig::default()
        };
        let sample = generate_sample(3, &cfg).unwrap();
        assert_eq!(sample.keypoints.len(), 16);
        assert_eq!(sample.gt_heatmaps.channels, 16);
    }

    #[test]
    fn degenerate_config_rejected() {
        let cfg = PoseConfig {
            image_size: 0,
            ..PoseConfig::default()
        };
        assert!(generate_sample(0, &cfg).is_err());
    }

    #[test]
    fn render_heatmap_properties() {
        let kp = KeypointSet {
            joints: vec![(12.0, 20.0), (40.0, 40.0)],
            visible: vec![true, false],
        };
        let hm = render_heatmap(&kp, 64, 8, 8, 1.0).unwrap();
        // visible joint: value 1 at the keypoint cell (12/8=1, 20/8=2)
        assert_eq!(hm.get(0, 2, 1), 1.0);
        let max = hm.channel(0).iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        // value at distance exactly sigma
        assert!((hm.get(0, 3, 1) - (-0.5_f64).exp()).abs() < 1e-12);
        // invisible joint: all zeros
        assert!(hm.channel(1).iter().all(|v| *v == 0.0));
        // all values in [0, 1]
        assert!(hm.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn image_to_bag_shapes_and_roundtrip() {
        let cfg = PoseConfig::default();
        let sample = generate_sample(11, &cfg).unwrap();
        let bag = image_to_bag(&sample.image, 64, 8).unwrap();
        assert_eq!(bag.len(), 64);
        assert_eq!(bag.dim(), 66);
        let rebuilt = bag_to_image(&bag, 64, 8);
        assert_eq!(rebuilt, sample.image);

        // whole image as a single patch: positional center (0.5, 0.5)
        let tiny = vec![0.0; 16];
        let whole = image_to_bag(&tiny, 4, 4).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole.instances[0][16], 0.5);
        assert_eq!(whole.instances[0][17], 0.5);
        // all-zero image: instances zero except positional features
        assert!(whole.instances[0][..16].iter().all(|v| *v == 0.0));

        assert!(image_to_bag(&tiny, 4, 3).is_err());
    }

    #[test]
    fn decode_pose_argmax_and_ties() {
        let mut hm = Heatmap::zeros(1, 4, 4);
        hm.set(0, 2, 3, 0.9);
        let kp = decode_pose(&hm, 32);
        // cell (r=2, c=3) with 8-pixel cells -> center (28, 20)
        assert_eq!(kp.joints[0], (28.0, 20.0));

        let uniform = Heatmap::from_flat(1, 4, 4, vec![0.5; 16]);
        let kp2 = decode_pose(&uniform, 32);
        assert_eq!(kp2.joints[0], (4.0, 4.0));
    }

    #[test]
    fn render_decode_roundtrip_within_half_cell() {
        let cfg = PoseConfig::default();
        let cell = cfg.patch_size as f64;
        for seed in 0..200 {
            let sample = generate_sample(seed, &cfg).unwrap();
            let decoded = decode_pose(&sample.gt_heatmaps, cfg.image_size);
            for ((&(x, y), &(dx, dy)), &vis) in sample
                .keypoints
                .joints
                .iter()
                .zip(decoded.joints.iter())
                .zip(sample.keypoints.visible.iter())
            {
                if !vis {
                    continue;
                }
                assert!((x - dx).abs() <= cell / 2.0 + 1e-9, "seed {seed}");
                assert!((y - dy).abs() <= cell / 2.0 + 1e-9, "seed {seed}");
            }
        }
    }

    #[test]
    fn flip_average_equivariance() {
        let cfg = PoseConfig::default();
        let dims = NetworkDims {
            input_dim: cfg.instance_dim(),
            hidden_dim: 16,
            output_dim: cfg.heatmap_dim(),
            level_count: 2,
        };
        let net = MilNetwork::init(dims, PoolingMode::Adjust { iterations: 2 }, 99).unwrap();
        let sample = generate_sample(21, &cfg).unwrap();
        let pairs = flip_pairs(cfg.joint_count).unwrap();

        // flip_averaged(mirror(image)) == mirror-with-swap of flip_averaged(image)
        let avg = flip_averaged_heatmaps(&net, &sample.image, &cfg).unwrap();
        let mirrored = mirror_image(&sample.image, cfg.image_size);
        let avg_mirrored = flip_averaged_heatmaps(&net, &mirrored, &cfg).unwrap();
        let expected = mirror_heatmap(&avg, &pairs);
        for (a, b) in avg_mirrored.values.iter().zip(expected.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn flip_average_zero_network() {
        let cfg = PoseConfig::default();
        let dims = NetworkDims {
            input_dim: cfg.instance_dim(),
            hidden_dim: 8,
            output_dim: cfg.heatmap_dim(),
            level_count: 2,
        };
        let mut net = MilNetwork::init(dims, PoolingMode::Mean, 5).unwrap();
        let zeros = vec![0.0; net.param_count()];
        net.set_params_flat(&zeros);
        let sample = generate_sample(33, &cfg).unwrap();
        let avg = flip_averaged_heatmaps(&net, &sample.image, &cfg).unwrap();
        assert!(avg.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dataset_roundtrip_is_stable() {
        let cfg = PoseConfig::default();
        let samples: Vec<PoseSample> = (0..5).map(|s| generate_sample(s, &cfg).unwrap()).collect();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &samples, &cfg).unwrap();
        let (parsed, parsed_cfg) = read_dataset(buf.as_slice(), cfg.sigma_h).unwrap();
        assert_eq!(parsed.len(), 5);
        assert_eq!(parsed_cfg.image_size, cfg.image_size);
        // serialize-parse-serialize is byte-stable
        let mut buf2 = Vec::new();
        write_dataset(&mut buf2, &parsed, &parsed_cfg).unwrap();
        assert_eq!(buf, buf2);
        // image content is exact (values are 0/1)
        for (a, b) in samples.iter().zip(parsed.iter()) {
            assert_eq!(a.image, b.image);
        }
    }

    #[test]
    fn dataset_parse_errors() {
        let bad = b"NOT-A-DATASET\n";
        assert!(matches!(
            read_dataset(&bad[..], 1.0),
            Err(AmilError::Parse { .. })
        ));
        // truncated: header promises a sample that is missing
        let truncated = b"AMIL-DATA v1 S=8 J=7 P=8 count=1\n";
        let err = read_dataset(&truncated[..], 1.0).unwrap_err();
        match err {
            AmilError::Parse { offset, .. } => assert!(offset > 0),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn occlusion_marks_covered_joints_invisible() {
        let cfg = PoseConfig {
            occlusion: true,
            ..PoseConfig::default()
        };
        let mut any_invisible = false;
        for seed in 0..100 {
            let sample = generate_sample(seed, &cfg).unwrap();
            for (&(x, y), &vis) in sample
                .keypoints
                .joints
                .iter()
                .zip(sample.keypoints.visible.iter())
            {
                if !vis {
                    any_invisible = true;
                    // masked cell must be empty
                    let c = x as usize;
                    let r = y as usize;
                    assert_eq!(sample.image[r * cfg.image_size + c], 0.0);
                }
            }
        }
        assert!(any_invisible, "occlusion never covered a joint in 100 samples");
    }
}
