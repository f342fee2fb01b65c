//! Heatmap and skeleton dumps: binary PGM/PPM images plus a CSV skeleton.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cylpose::backbone::{forward, BackboneConfig, BackboneError, HeatmapPair, KeypointEstimate};
use cylpose::diffcore::ParamSet;
use cylpose::geom::{drop_boundary_points, minmax_normalize, rotate_z, PointCloud, ViewRotation, BIN_BOUNDARY_EPS};
use cylpose::synthgait::{Pose, JOINT_NAMES, NUM_JOINTS};

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Geom(#[from] cylpose::geom::GeomError),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

/// A single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    /// Min-max quantization to `0..=255`; a constant input maps to zero.
    pub fn quantize(values: &[f32], width: usize, height: usize) -> Self {
        let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        let pixels = values
            .iter()
            .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
            .collect();
        Self { width, height, pixels }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Option<Self> {
        let (dims, body) = parse_netpbm(bytes, b"P5")?;
        (body.len() == dims.0 * dims.1).then(|| Self { width: dims.0, height: dims.1, pixels: body.to_vec() })
    }
}

/// Header fields of a binary netpbm file, and the raster that follows.
fn parse_netpbm<'a>(bytes: &'a [u8], magic: &[u8]) -> Option<((usize, usize), &'a [u8])> {
    if !bytes.starts_with(magic) {
        return None;
    }
    let mut fields = Vec::new();
    let mut pos = magic.len();
    while fields.len() < 3 {
        while bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.parse::<usize>().ok()?);
    }
    Some(((fields[0], fields[1]), &bytes[pos + 1..]))
}

/// Everything `plot` produces for one cloud.
#[derive(Debug, Clone)]
pub struct PlotSet {
    pub heatmaps: HeatmapPair,
    pub keypoints: KeypointEstimate,
    /// Keypoints in the input cloud's frame.
    pub skeleton: Pose,
    pub occupancy_theta_z: Gray,
}

/// Runs the network on `cloud`, optionally rotated by `shift` θ bins after
/// normalization. Points near bin edges are removed first so that shifted
/// renders are exact cyclic shifts of the unshifted ones.
pub fn render(cfg: &BackboneConfig, params: &ParamSet<f32>, cloud: &PointCloud, shift: i64) -> Result<PlotSet, PlotError> {
    let (normed, t) = minmax_normalize(cloud)?;
    let base = drop_boundary_points(&normed, &cfg.grid, BIN_BOUNDARY_EPS);
    let rot = ViewRotation::from_bins(shift, cfg.grid.cube_len);
    let input = rotate_z(&base, rot);
    let (heatmaps, keypoints) = forward(cfg, params, &input)?;
    let unrotated = Pose { joints: keypoints.pose.joints.map(|p| rot.inverse().apply(&p)) };
    let skeleton = t.invert_pose(&unrotated);

    let c = cfg.grid.cube_len;
    let vox = cylpose::geom::voxelize_cylindrical(&input, &cfg.grid)?;
    let mut proj = vec![0f32; c * c];
    for i in 0..c {
        for k in 0..c {
            proj[i * c + k] = (0..c).map(|j| vox.grid.get(i, j, k)).max().unwrap_or(0) as f32;
        }
    }
    Ok(PlotSet { heatmaps, keypoints, skeleton, occupancy_theta_z: Gray::quantize(&proj, c, c) })
}

/// Rows are θ bins, columns are ρ or z bins.
pub fn joint_images(hm: &HeatmapPair, joint: usize) -> (Gray, Gray) {
    let s = hm.hm_theta_r.shape();
    let (h, w) = (s[1], s[2]);
    let per = h * w;
    let slice = |d: &[f32]| Gray::quantize(&d[joint * per..(joint + 1) * per], w, h);
    (slice(hm.hm_theta_r.data()), slice(hm.hm_theta_z.data()))
}

pub fn skeleton_csv(pose: &Pose) -> String {
    let mut s = String::from("x,y,z\n");
    for p in &pose.joints {
        let _ = writeln!(s, "{:.6},{:.6},{:.6}", p.x, p.y, p.z);
    }
    s
}

/// θ-z occupancy in gray with each decoded joint marked red.
pub fn overlay_ppm(set: &PlotSet, cfg: &BackboneConfig, scale: usize) -> Vec<u8> {
    let c = cfg.grid.cube_len;
    let occ = &set.occupancy_theta_z;
    let (w, h) = (c * scale, c * scale);
    let mut rgb = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let v = occ.pixels[(y / scale) * c + x / scale] / 2;
            rgb[(y * w + x) * 3..][..3].copy_from_slice(&[v, v, v]);
        }
    }
    let g = &cfg.grid;
    for j in 0..NUM_JOINTS {
        let ti = ((set.keypoints.theta[j] + std::f64::consts::PI) / g.theta_width()).floor().rem_euclid(c as f64) as usize;
        let zi = ((set.keypoints.z[j] / g.z_max) * c as f64).floor().clamp(0.0, c as f64 - 1.0) as usize;
        for y in ti * scale..(ti + 1) * scale {
            for x in zi * scale..(zi + 1) * scale {
                rgb[(y * w + x) * 3..][..3].copy_from_slice(&[255, 40, 40]);
            }
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    out
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<(), PlotError> {
    fs::write(&path, bytes).map_err(|source| PlotError::Write { path, source })
}

/// Writes `<joint>_theta_r.pgm`, `<joint>_theta_z.pgm`, `skeleton.csv` and
/// `overlay.ppm` into `dir`.
pub fn write_all(set: &PlotSet, cfg: &BackboneConfig, dir: &Path) -> Result<Vec<PathBuf>, PlotError> {
    fs::create_dir_all(dir).map_err(|source| PlotError::Write { path: dir.to_path_buf(), source })?;
    let mut written = Vec::new();
    for (j, name) in JOINT_NAMES.iter().enumerate() {
        let (tr, tz) = joint_images(&set.heatmaps, j);
        for (suffix, img) in [("theta_r", tr), ("theta_z", tz)] {
            let p = dir.join(format!("{name}_{suffix}.pgm"));
            write(p.clone(), &img.to_pgm())?;
            written.push(p);
        }
    }
    let p = dir.join("skeleton.csv");
    write(p.clone(), skeleton_csv(&set.skeleton).as_bytes())?;
    written.push(p);
    let p = dir.join("overlay.ppm");
    write(p.clone(), &overlay_ppm(set, cfg, 4))?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_spans_full_range() {
        let g = Gray::quantize(&[1.0, 2.0, 3.0, 5.0], 2, 2);
        assert_eq!(g.pixels, vec![0, 64, 128, 255]);
        assert_eq!(Gray::quantize(&[4.0; 4], 2, 2).pixels, vec![0; 4]);
    }

    #[test]
    fn pgm_round_trip() {
        let g = Gray { width: 3, height: 2, pixels: vec![0, 1, 2, 10, 32, 255] };
        assert_eq!(Gray::from_pgm(&g.to_pgm()), Some(g));
        assert_eq!(Gray::from_pgm(b"P6\n1 1\n255\n\0"), None);
    }
}
