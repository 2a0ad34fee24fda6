//! Per-pixel grasp maps: center quality, `cos 2θ`, `sin 2θ` and normalized width.
//!
//! Encoding the doubled angle keeps the representation continuous across the
//! ±π/2 wrap of grasp orientations.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{canonical_angle, GraspPose};

pub const DEFAULT_WIDTH_SCALE: f64 = 150.0;
pub const DEFAULT_QUALITY_FLOOR: f32 = 0.1;

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("grasp {index} center ({x}, {y}) lies outside the {h}x{w} grid")]
    OutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        h: usize,
        w: usize,
    },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("angle undefined for a zero (cos, sin) vector")]
    UndefinedAngle,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("heatmap file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet {
    pub quality: Array2<f32>,
    pub cos2: Array2<f32>,
    pub sin2: Array2<f32>,
    /// Opening divided by the width scale, clipped to `[0, 1]`.
    pub width: Array2<f32>,
}

impl HeatmapSet {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            quality: Array2::zeros((h, w)),
            cos2: Array2::zeros((h, w)),
            sin2: Array2::zeros((h, w)),
            width: Array2::zeros((h, w)),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.quality.dim()
    }

    fn planes(&self) -> [&Array2<f32>; 4] {
        [&self.quality, &self.cos2, &self.sin2, &self.width]
    }

    pub fn is_consistent(&self) -> bool {
        let d = self.dims();
        self.planes().iter().all(|p| p.dim() == d)
    }
}

/// Cells painted for one grasp: the center region spans `opening/3` along the
/// grasp axis and `jaw_size/2` across it. Cell `(row, col)` sits at pixel
/// coordinate `(col, row)`. The cell holding the grasp center is always painted.
pub fn center_region(g: &GraspPose, h: usize, w: usize) -> Vec<(usize, usize)> {
    let half_len = g.opening / 6.0;
    let half_across = g.jaw_size / 4.0;
    let (s, c) = g.angle.sin_cos();
    let reach = half_len.hypot(half_across);
    let r0 = (g.center_y - reach).floor().max(0.0) as usize;
    let c0 = (g.center_x - reach).floor().max(0.0) as usize;
    let r1 = ((g.center_y + reach).ceil() as usize).min(h.saturating_sub(1));
    let c1 = ((g.center_x + reach).ceil() as usize).min(w.saturating_sub(1));

    let mut cells = Vec::new();
    for r in r0..=r1 {
        for col in c0..=c1 {
            let dx = col as f64 - g.center_x;
            let dy = r as f64 - g.center_y;
            let along = dx * c + dy * s;
            let across = -dx * s + dy * c;
            if along.abs() <= half_len && across.abs() <= half_across {
                cells.push((r, col));
            }
        }
    }
    let own = (
        (g.center_y.round() as usize).min(h - 1),
        (g.center_x.round() as usize).min(w - 1),
    );
    if !cells.contains(&own) {
        cells.push(own);
    }
    cells
}

/// Paints each grasp's center region; later grasps overwrite earlier ones.
pub fn encode(grasps: &[GraspPose], dims: (usize, usize), width_scale: f64) -> Result<HeatmapSet, HeatmapError> {
    let (h, w) = dims;
    if h == 0 || w == 0 {
        return Err(HeatmapError::Parameter("grid dimensions must be positive".into()));
    }
    if width_scale.is_nan() || width_scale <= 0.0 {
        return Err(HeatmapError::Parameter("width_scale must be positive".into()));
    }
    let mut maps = HeatmapSet::zeros(h, w);
    for (index, g) in grasps.iter().enumerate() {
        if !(g.center_x >= 0.0 && g.center_y >= 0.0 && g.center_x < w as f64 && g.center_y < h as f64) {
            return Err(HeatmapError::OutOfBounds {
                index,
                x: g.center_x,
                y: g.center_y,
                h,
                w,
            });
        }
        let (s2, c2) = (2.0 * g.angle).sin_cos();
        let width = (g.opening.min(width_scale) / width_scale) as f32;
        for cell in center_region(g, h, w) {
            maps.quality[cell] = 1.0;
            maps.cos2[cell] = c2 as f32;
            maps.sin2[cell] = s2 as f32;
            maps.width[cell] = width;
        }
    }
    Ok(maps)
}

/// Grasp angle from the doubled-angle components; magnitude is ignored.
pub fn recover_angle(c: f64, s: f64) -> Result<f64, HeatmapError> {
    if c == 0.0 && s == 0.0 {
        return Err(HeatmapError::UndefinedAngle);
    }
    Ok(canonical_angle(s.atan2(c) / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub top_k: usize,
    pub width_scale: f64,
    pub jaw_size: f64,
    pub quality_floor: f32,
    /// Gaussian sigma (cells) applied to the quality map before peak search.
    pub smoothing: Option<f64>,
}

impl DecodeConfig {
    pub fn new(top_k: usize, width_scale: f64, jaw_size: f64) -> Self {
        Self {
            top_k,
            width_scale,
            jaw_size,
            quality_floor: DEFAULT_QUALITY_FLOOR,
            smoothing: None,
        }
    }
}

/// A decoded grasp with its peak quality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedGrasp {
    pub pose: GraspPose,
    pub quality: f32,
    pub row: usize,
    pub col: usize,
}

/// Local maxima of `q` over the 8-neighborhood.
///
/// A plateau of equal values counts as one maximum when every cell bordering
/// it is strictly lower; it is reported at its lowest row-major index.
/// Output is ordered by value descending, then index ascending.
pub fn find_peaks(q: &Array2<f32>) -> Vec<(usize, usize)> {
    let (h, w) = q.dim();
    let mut visited = Array2::<bool>::default((h, w));
    let mut peaks = Vec::new();
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if visited[(r, c)] {
                continue;
            }
            let v = q[(r, c)];
            // flood the equal-valued plateau containing (r, c)
            let mut is_max = true;
            stack.push((r, c));
            visited[(r, c)] = true;
            while let Some((pr, pc)) = stack.pop() {
                for (nr, nc) in neighbors(pr, pc, h, w) {
                    let nv = q[(nr, nc)];
                    if nv == v {
                        if !visited[(nr, nc)] {
                            visited[(nr, nc)] = true;
                            stack.push((nr, nc));
                        }
                    } else if nv > v {
                        is_max = false;
                    }
                }
            }
            // (r, c) is the first plateau cell in row-major order
            if is_max {
                peaks.push((r, c));
            }
        }
    }
    peaks.sort_by(|a, b| {
        q[*b]
            .partial_cmp(&q[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    peaks
}

fn neighbors(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    (-1i64..=1)
        .flat_map(move |dr| (-1i64..=1).map(move |dc| (dr, dc)))
        .filter(|&(dr, dc)| dr != 0 || dc != 0)
        .filter_map(move |(dr, dc)| {
            let nr = r as i64 + dr;
            let nc = c as i64 + dc;
            (nr >= 0 && nc >= 0 && nr < h as i64 && nc < w as i64).then_some((nr as usize, nc as usize))
        })
}

fn gaussian_blur(src: &Array2<f32>, sigma: f64) -> Array2<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let (h, w) = src.dim();
    let pass = |input: &Array2<f32>, horizontal: bool| {
        Array2::from_shape_fn((h, w), |(r, c)| {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (k, wt) in kernel.iter().enumerate() {
                let off = k as i64 - radius;
                let (rr, cc) = if horizontal {
                    (r as i64, c as i64 + off)
                } else {
                    (r as i64 + off, c as i64)
                };
                if rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64 {
                    acc += wt * f64::from(input[(rr as usize, cc as usize)]);
                    norm += wt;
                }
            }
            (acc / norm) as f32
        })
    };
    pass(&pass(src, true), false)
}

/// Ranked grasps from predicted maps, best first. May be empty.
pub fn decode(maps: &HeatmapSet, cfg: &DecodeConfig) -> Vec<DecodedGrasp> {
    if cfg.top_k == 0 || !maps.is_consistent() {
        return Vec::new();
    }
    let smoothed;
    let quality = match cfg.smoothing {
        Some(sigma) if sigma > 0.0 => {
            smoothed = gaussian_blur(&maps.quality, sigma);
            &smoothed
        }
        _ => &maps.quality,
    };
    let mut out = Vec::new();
    for (row, col) in find_peaks(quality) {
        if out.len() == cfg.top_k {
            break;
        }
        let qv = quality[(row, col)];
        if qv < cfg.quality_floor {
            // peaks are sorted, nothing further qualifies
            break;
        }
        let Ok(angle) = recover_angle(f64::from(maps.cos2[(row, col)]), f64::from(maps.sin2[(row, col)])) else {
            continue;
        };
        let opening = f64::from(maps.width[(row, col)]) * cfg.width_scale;
        if let Ok(pose) = GraspPose::new(col as f64, row as f64, angle, opening, cfg.jaw_size) {
            out.push(DecodedGrasp {
                pose,
                quality: qv,
                row,
                col,
            });
        }
    }
    out
}

/// Mean-squared-error terms per map and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_center: f64,
    pub l_cos: f64,
    pub l_sin: f64,
    pub l_width: f64,
    pub l_overall: f64,
}

fn mse(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum();
    sum / n as f64
}

pub fn loss(pred: &HeatmapSet, target: &HeatmapSet) -> Result<LossBreakdown, HeatmapError> {
    for (p, t) in pred.planes().iter().zip(target.planes()) {
        if p.dim() != t.dim() {
            return Err(HeatmapError::Shape(p.dim(), t.dim()));
        }
    }
    let l_center = mse(&pred.quality, &target.quality);
    let l_cos = mse(&pred.cos2, &target.cos2);
    let l_sin = mse(&pred.sin2, &target.sin2);
    let l_width = mse(&pred.width, &target.width);
    Ok(LossBreakdown {
        l_center,
        l_cos,
        l_sin,
        l_width,
        l_overall: l_center + l_cos + l_sin + l_width,
    })
}

/// Resolution of the width plane, in pixels of opening.
pub fn width_quantum(width_scale: f64) -> f64 {
    width_scale * f64::from(f32::EPSILON)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Header {
    h: usize,
    w: usize,
    width_scale: f64,
}

/// Serializes maps as one JSON header line followed by four row-major
/// little-endian `f32` planes (quality, cos2, sin2, width).
pub fn write_heatmaps(out: &mut impl Write, maps: &HeatmapSet, width_scale: f64) -> Result<(), HeatmapError> {
    if !maps.is_consistent() {
        return Err(HeatmapError::Format("planes differ in shape".into()));
    }
    let (h, w) = maps.dims();
    let header =
        serde_json::to_string(&Header { h, w, width_scale }).map_err(|e| HeatmapError::Format(e.to_string()))?;
    out.write_all(header.as_bytes())?;
    out.write_all(b"\n")?;
    for plane in maps.planes() {
        for v in plane.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Inverse of [`write_heatmaps`]; returns the maps and their width scale.
pub fn read_heatmaps(input: &mut impl Read) -> Result<(HeatmapSet, f64), HeatmapError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| HeatmapError::Format("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| HeatmapError::Format(e.to_string()))?;
    let body = &bytes[nl + 1..];
    let n = header.h * header.w;
    if body.len() != 4 * n * 4 {
        return Err(HeatmapError::Format(format!(
            "expected {} body bytes, found {}",
            16 * n,
            body.len()
        )));
    }
    let plane = |k: usize| -> Result<Array2<f32>, HeatmapError> {
        let vals: Vec<f32> = body[k * n * 4..(k + 1) * n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Array2::from_shape_vec((header.h, header.w), vals).map_err(|e| HeatmapError::Format(e.to_string()))
    };
    Ok((
        HeatmapSet {
            quality: plane(0)?,
            cos2: plane(1)?,
            sin2: plane(2)?,
            width: plane(3)?,
        },
        header.width_scale,
    ))
}

pub fn save_heatmaps(path: &Path, maps: &HeatmapSet, width_scale: f64) -> Result<(), HeatmapError> {
    let mut buf = Vec::new();
    write_heatmaps(&mut buf, maps, width_scale)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_heatmaps(path: &Path) -> Result<(HeatmapSet, f64), HeatmapError> {
    read_heatmaps(&mut fs::File::open(path)?)
}
