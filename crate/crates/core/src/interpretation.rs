//! Occlusion sensitivity: mask cubic patches, record how much the patient
//! probability drops, and average the drops per voxel.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::model::MultiTaskModel;
use crate::training::loss::sigmoid;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// Adds a final position flush with the far edge when the stride grid misses it.
    ClampExtraPosition,
    /// Grid positions only; trailing voxels may stay uncovered.
    InteriorOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionConfig {
    pub patch_size: usize,
    pub stride: usize,
    /// Value written into occluded voxels (0 is the mean of a standardized volume).
    pub fill_value: f32,
    pub edge_mode: EdgeMode,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            stride: 4,
            fill_value: 0.0,
            edge_mode: EdgeMode::ClampExtraPosition,
        }
    }
}

impl OcclusionConfig {
    pub fn validate(&self, shape: [usize; 3]) -> Result<()> {
        let min_axis = *shape.iter().min().expect("three axes");
        if !(1 <= self.stride && self.stride <= self.patch_size && self.patch_size <= min_axis) {
            return Err(Error::InvalidConfig(format!(
                "occlusion needs 1 <= stride ({}) <= patch_size ({}) <= smallest axis ({min_axis})",
                self.stride, self.patch_size
            )));
        }
        if !self.fill_value.is_finite() {
            return Err(Error::InvalidConfig("occlusion fill_value must be finite".into()));
        }
        Ok(())
    }
}

/// Patch start offsets along one axis.
pub fn occlusion_positions(axis_len: usize, patch: usize, stride: usize, edge_mode: EdgeMode) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 || patch > axis_len {
        return Err(Error::InvalidInput(format!(
            "patch {patch} with stride {stride} does not fit an axis of length {axis_len}"
        )));
    }
    let last = axis_len - patch;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if edge_mode == EdgeMode::ClampExtraPosition && last % stride != 0 {
        v.push(last);
    }
    Ok(v)
}

/// Anything that maps volumes to patient probabilities.
pub trait PatientScorer {
    fn input_shape(&self) -> [usize; 3];
    fn patient_probabilities(&self, volumes: &[&Volume]) -> Result<Vec<f64>>;
}

impl PatientScorer for MultiTaskModel<f32> {
    fn input_shape(&self) -> [usize; 3] {
        self.config().input_shape
    }

    fn patient_probabilities(&self, volumes: &[&Volume]) -> Result<Vec<f64>> {
        let out = self.forward_volumes(volumes)?;
        Ok(out.dx_logit.iter().map(|&z| sigmoid(z as f64)).collect())
    }
}

/// Per-voxel mean probability drop. Larger = occluding here lowers the patient probability more.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub shape: [usize; 3],
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn to_volume(&self) -> Volume {
        Volume::new(self.shape, self.values.iter().map(|&v| v as f32).collect()).expect("heatmap shape")
    }

    /// Mean inside and outside a voxel mask.
    pub fn region_means(&self, mask: &[bool]) -> (f64, f64) {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &m) in self.values.iter().zip(mask) {
            if m {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
        (si / ni.max(1) as f64, so / no.max(1) as f64)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Occluded copies are scored in groups of this size.
const OCCLUSION_BATCH: usize = 8;

/// Occlusion heatmap of `v`, which must already be z-transformed.
pub fn occlusion_sensitivity<S: PatientScorer>(scorer: &S, v: &Volume, config: &OcclusionConfig) -> Result<Heatmap> {
    let shape = v.shape();
    if shape != scorer.input_shape() {
        return Err(Error::ShapeMismatch {
            got: shape,
            expected: scorer.input_shape(),
        });
    }
    config.validate(shape)?;
    let axis = |len| occlusion_positions(len, config.patch_size, config.stride, config.edge_mode);
    let (px, py, pz) = (axis(shape[0])?, axis(shape[1])?, axis(shape[2])?);
    let mut starts = Vec::with_capacity(px.len() * py.len() * pz.len());
    for &x in &px {
        for &y in &py {
            for &z in &pz {
                starts.push([x, y, z]);
            }
        }
    }

    let p0 = scorer.patient_probabilities(&[v])?[0];
    let n = v.len();
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    let p = config.patch_size;
    for group in starts.chunks(OCCLUSION_BATCH) {
        let occluded: Vec<Volume> = group
            .iter()
            .map(|&[x0, y0, z0]| {
                let mut o = v.clone();
                for x in x0..x0 + p {
                    for y in y0..y0 + p {
                        let row = o.offset(x, y, z0);
                        o.data_mut()[row..row + p].fill(config.fill_value);
                    }
                }
                o
            })
            .collect();
        let refs: Vec<&Volume> = occluded.iter().collect();
        let probs = scorer.patient_probabilities(&refs)?;
        for (&[x0, y0, z0], &pp) in group.iter().zip(&probs) {
            let delta = p0 - pp;
            for x in x0..x0 + p {
                for y in y0..y0 + p {
                    let row = v.offset(x, y, z0);
                    for i in row..row + p {
                        sum[i] += delta;
                        count[i] += 1;
                    }
                }
            }
        }
    }
    let values: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("occlusion heatmap".into()));
    }
    Ok(Heatmap { shape, values })
}

/// Number of patches covering each voxel.
pub fn coverage_counts(shape: [usize; 3], config: &OcclusionConfig) -> Result<Vec<u32>> {
    config.validate(shape)?;
    let pos: Vec<Vec<usize>> = shape
        .iter()
        .map(|&len| occlusion_positions(len, config.patch_size, config.stride, config.edge_mode))
        .collect::<Result<_>>()?;
    let per_axis: Vec<Vec<u32>> = shape
        .iter()
        .zip(&pos)
        .map(|(&len, starts)| {
            let mut c = vec![0u32; len];
            for &s in starts {
                for v in &mut c[s..s + config.patch_size] {
                    *v += 1;
                }
            }
            c
        })
        .collect();
    let mut out = Vec::with_capacity(shape.iter().product());
    for &a in &per_axis[0] {
        for &b in &per_axis[1] {
            for &c in &per_axis[2] {
                out.push(a * b * c);
            }
        }
    }
    Ok(out)
}

/// Orthogonal mid-plane through a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    /// Fixed first axis.
    Sagittal,
    /// Fixed second axis.
    Coronal,
    /// Fixed third axis.
    Axial,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Sagittal, Plane::Coronal, Plane::Axial];

    pub fn label(self) -> &'static str {
        match self {
            Plane::Sagittal => "sagittal",
            Plane::Coronal => "coronal",
            Plane::Axial => "axial",
        }
    }

    /// `(rows, cols, values)` of the mid-plane, rows along the lower-numbered free axis.
    pub fn slice<T: Copy>(self, shape: [usize; 3], data: &[T]) -> (usize, usize, Vec<T>) {
        let at = |x: usize, y: usize, z: usize| data[(x * shape[1] + y) * shape[2] + z];
        let [mx, my, mz] = shape.map(|l| l / 2);
        match self {
            Plane::Sagittal => (
                shape[1],
                shape[2],
                (0..shape[1]).flat_map(|y| (0..shape[2]).map(move |z| (y, z))).map(|(y, z)| at(mx, y, z)).collect(),
            ),
            Plane::Coronal => (
                shape[0],
                shape[2],
                (0..shape[0]).flat_map(|x| (0..shape[2]).map(move |z| (x, z))).map(|(x, z)| at(x, my, z)).collect(),
            ),
            Plane::Axial => (
                shape[0],
                shape[1],
                (0..shape[0]).flat_map(|x| (0..shape[1]).map(move |y| (x, y))).map(|(x, y)| at(x, y, mz)).collect(),
            ),
        }
    }
}

/// Strongest heat blend at the hottest voxel.
pub const OVERLAY_MAX_ALPHA: f64 = 0.6;

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

/// Gray mid-plane of `v` with positive heat blended in red to yellow.
///
/// Heat is scaled by the largest positive value of the whole heatmap, so
/// the three planes share one color scale.
pub fn render_overlay(heatmap: &Heatmap, v: &Volume, plane: Plane) -> Result<RgbImage> {
    if heatmap.shape != v.shape() {
        return Err(Error::ShapeMismatch {
            got: heatmap.shape,
            expected: v.shape(),
        });
    }
    let (height, width, gray) = plane.slice(v.shape(), v.data());
    let (_, _, heat) = plane.slice(heatmap.shape, &heatmap.values);
    let lo = gray.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = gray.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let hmax = heatmap.values.iter().copied().fold(0.0, f64::max);
    let pixels = gray
        .iter()
        .zip(&heat)
        .map(|(&g, &h)| {
            let g = if hi > lo { (g as f64 - lo) / (hi - lo) } else { 0.5 };
            let t = if hmax > 0.0 { (h / hmax).max(0.0) } else { 0.0 };
            let a = OVERLAY_MAX_ALPHA * t;
            let mix = |c: f64| (((1.0 - a) * g + a * c) * 255.0).round().clamp(0.0, 255.0) as u8;
            [mix(1.0), mix(t), mix(0.0)]
        })
        .collect();
    Ok(RgbImage { width, height, pixels })
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    let file = File::create(path).at(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::InvalidInput(format!("{}: {e}", path.display()));
    let mut w = enc.write_header().map_err(png_err)?;
    let bytes: Vec<u8> = img.pixels.iter().flatten().copied().collect();
    w.write_image_data(&bytes).map_err(png_err)?;
    w.finish().map_err(png_err)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayFiles {
    /// Raw heatmap volume; its header sits next to it with a `.json` extension.
    pub heatmap: PathBuf,
    pub slices: Vec<PathBuf>,
}

/// Writes `<subject_id>_heatmap.f32` (+ `.json` header) and one PNG per mid-plane
/// (`<subject_id>_heatmap.<plane>.png`) into `dir`.
pub fn export_overlay(heatmap: &Heatmap, v: &Volume, dir: &Path, subject_id: &str) -> Result<OverlayFiles> {
    std::fs::create_dir_all(dir).at(dir)?;
    let heat_path = dir.join(format!("{subject_id}_heatmap.f32"));
    heatmap.to_volume().with_voxel_size(v.voxel_size_mm()).write(&heat_path)?;
    let mut slices = Vec::new();
    for plane in Plane::ALL {
        let path = dir.join(format!("{subject_id}_heatmap.{}.png", plane.label()));
        write_png(&render_overlay(heatmap, v, plane)?, &path)?;
        slices.push(path);
    }
    Ok(OverlayFiles {
        heatmap: heat_path,
        slices,
    })
}
