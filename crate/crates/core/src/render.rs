//! Axial slice rendering: lung-windowed grayscale, lobe fills, candidate
//! outline and an optional color legend, encoded as 8-bit RGBA PNG.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{CtVolume, LobeMap, NoduleCandidate};

pub type Rgba = [u8; 4];

/// Okabe-Ito hues for labels 1..=5 (LUL, LLL, RUL, RML, RLL).
pub const DEFAULT_LOBE_COLORS: [Rgba; 5] = [
    [230, 159, 0, 255],
    [86, 180, 233, 255],
    [0, 158, 115, 255],
    [240, 228, 66, 255],
    [0, 114, 178, 255],
];
pub const DEFAULT_OUTLINE_COLOR: Rgba = [213, 94, 0, 255];
pub const DEFAULT_WINDOW_LEVEL: f64 = -600.0;
pub const DEFAULT_WINDOW_WIDTH: f64 = 1500.0;
/// Narrower width used when the region of interest is highlighted.
pub const ROI_WINDOW_WIDTH: f64 = 1000.0;

pub const LEGEND_MARGIN: u32 = 2;
pub const LEGEND_SWATCH: u32 = 10;
pub const LEGEND_GAP: u32 = 2;
pub const LEGEND_SWATCHES: u32 = 6;

/// Top-left pixel of legend swatch `k` (0..5 lobes, 5 outline).
pub fn legend_swatch_origin(k: u32) -> (u32, u32) {
    (LEGEND_MARGIN + k * (LEGEND_SWATCH + LEGEND_GAP), LEGEND_MARGIN)
}

fn legend_extent() -> (u32, u32) {
    let (x, y) = legend_swatch_origin(LEGEND_SWATCHES - 1);
    (x + LEGEND_SWATCH + LEGEND_MARGIN, y + LEGEND_SWATCH + LEGEND_MARGIN)
}

/// Half-open voxel rectangle `[x0, x1) x [y0, y1)` on a slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CropBox {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }
    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub slice: usize,
    pub window_level: f64,
    pub window_width: f64,
    pub lobe_colors: [Rgba; 5],
    pub outline_color: Rgba,
    /// Blend weight of lobe fills over the grayscale.
    pub fill_opacity: f64,
    pub show_lobes: bool,
    pub show_outline: bool,
    pub include_color_legend: bool,
    pub crop: Option<CropBox>,
    /// Paint voxels outside every lobe black.
    pub suppress_exterior: bool,
    pub gamma: f64,
    pub output_dims: [u32; 2],
}

impl RenderSpec {
    pub fn new(slice: usize) -> Self {
        RenderSpec {
            slice,
            window_level: DEFAULT_WINDOW_LEVEL,
            window_width: DEFAULT_WINDOW_WIDTH,
            lobe_colors: DEFAULT_LOBE_COLORS,
            outline_color: DEFAULT_OUTLINE_COLOR,
            fill_opacity: 0.35,
            show_lobes: true,
            show_outline: true,
            include_color_legend: false,
            crop: None,
            suppress_exterior: false,
            gamma: 1.0,
            output_dims: [256, 256],
        }
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if !(self.window_width.is_finite() && self.window_width > 0.0) {
            return Err(Error::input("window width must be > 0"));
        }
        if !self.window_level.is_finite() {
            return Err(Error::input("window level must be finite"));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::input("gamma must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.fill_opacity) {
            return Err(Error::input("fill opacity must lie in [0, 1]"));
        }
        if self.slice >= dims[2] {
            return Err(Error::input(format!(
                "slice {} out of range for depth {}",
                self.slice, dims[2]
            )));
        }
        let [w, h] = self.output_dims;
        if w == 0 || h == 0 {
            return Err(Error::input("output dims must be nonzero"));
        }
        if self.include_color_legend {
            let (lw, lh) = legend_extent();
            if w < lw || h < lh {
                return Err(Error::input(format!(
                    "output {w}x{h} too small for the {lw}x{lh} legend"
                )));
            }
        }
        if let Some(c) = self.crop {
            if c.width() == 0 || c.height() == 0 {
                return Err(Error::input(format!("degenerate crop {c:?}")));
            }
            if c.x1 > dims[0] || c.y1 > dims[1] {
                return Err(Error::input(format!("crop {c:?} exceeds slice {}x{}", dims[0], dims[1])));
            }
        }
        Ok(())
    }
}

/// Windowed intensity in [0, 1], before gamma.
pub fn window_gray(hu: f64, level: f64, width: f64) -> f64 {
    ((hu - (level - width / 2.0)) / width).clamp(0.0, 1.0)
}

fn blend(base: u8, over: u8, alpha: f64) -> u8 {
    (base as f64 * (1.0 - alpha) + over as f64 * alpha).round() as u8
}

fn on_outline(c: &NoduleCandidate, x: usize, y: usize, z: usize) -> bool {
    let b = &c.bbox;
    let inside = (b.min[0]..=b.max[0]).contains(&x)
        && (b.min[1]..=b.max[1]).contains(&y)
        && (b.min[2]..=b.max[2]).contains(&z);
    inside && (x == b.min[0] || x == b.max[0] || y == b.min[1] || y == b.max[1])
}

/// Renders one axial slice to raw RGBA rows (width, height, pixels).
pub fn render_rgba(
    volume: &CtVolume,
    lobes: &LobeMap,
    candidate: &NoduleCandidate,
    spec: &RenderSpec,
) -> Result<(u32, u32, Vec<u8>)> {
    let dims = volume.dims();
    if lobes.dims() != dims {
        return Err(Error::input("lobe map does not match volume dims"));
    }
    spec.validate(dims)?;
    let crop = spec.crop.unwrap_or(CropBox {
        x0: 0,
        y0: 0,
        x1: dims[0],
        y1: dims[1],
    });
    let [w, h] = spec.output_dims;
    // Letterboxed nearest-neighbour fit: integer arithmetic keeps it exact.
    let (cw, ch) = (crop.width() as u64, crop.height() as u64);
    let (dw, dh) = if (w as u64) * ch <= (h as u64) * cw {
        (w as u64, ((w as u64) * ch / cw).max(1))
    } else {
        (((h as u64) * cw / ch).max(1), h as u64)
    };
    let (offx, offy) = ((w as u64 - dw) / 2, (h as u64 - dh) / 2);

    let z = spec.slice;
    let mut px = vec![0u8; (w as usize) * (h as usize) * 4];
    for oy in 0..h as u64 {
        for ox in 0..w as u64 {
            let i = ((oy * w as u64 + ox) * 4) as usize;
            px[i + 3] = 255;
            if ox < offx || ox >= offx + dw || oy < offy || oy >= offy + dh {
                continue;
            }
            let x = crop.x0 + ((ox - offx) * cw / dw) as usize;
            let y = crop.y0 + ((oy - offy) * ch / dh) as usize;
            let label = lobes.get([x, y, z]);
            let mut rgb = if spec.suppress_exterior && label == 0 {
                [0, 0, 0]
            } else {
                let g = window_gray(volume.get([x, y, z]) as f64, spec.window_level, spec.window_width)
                    .powf(spec.gamma);
                let v = (g * 255.0).round() as u8;
                [v, v, v]
            };
            if spec.show_lobes && label > 0 {
                let c = spec.lobe_colors[label as usize - 1];
                for k in 0..3 {
                    rgb[k] = blend(rgb[k], c[k], spec.fill_opacity);
                }
            }
            if spec.show_outline && on_outline(candidate, x, y, z) {
                rgb.copy_from_slice(&spec.outline_color[..3]);
            }
            px[i..i + 3].copy_from_slice(&rgb);
        }
    }
    if spec.include_color_legend {
        let colors: Vec<Rgba> = spec
            .lobe_colors
            .iter()
            .copied()
            .chain(std::iter::once(spec.outline_color))
            .collect();
        for (k, c) in colors.iter().enumerate() {
            let (sx, sy) = legend_swatch_origin(k as u32);
            for yy in sy..sy + LEGEND_SWATCH {
                for xx in sx..sx + LEGEND_SWATCH {
                    let i = ((yy * w + xx) * 4) as usize;
                    px[i..i + 4].copy_from_slice(c);
                }
            }
        }
    }
    Ok((w, h, px))
}

pub fn encode_png(width: u32, height: u32, rgba: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(rgba)?;
        writer.finish()?;
    }
    Ok(out)
}

/// Decodes an 8-bit RGBA PNG back to (width, height, pixels).
pub fn decode_png(bytes: &[u8]) -> Result<(u32, u32, Vec<u8>)> {
    let bad = |e: png::DecodingError| Error::input(format!("invalid PNG: {e}"));
    let mut reader = png::Decoder::new(std::io::Cursor::new(bytes))
        .read_info()
        .map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::input("PNG too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.color_type != png::ColorType::Rgba || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::input("expected 8-bit RGBA PNG"));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width, info.height, buf))
}

pub fn render_slice(
    volume: &CtVolume,
    lobes: &LobeMap,
    candidate: &NoduleCandidate,
    spec: &RenderSpec,
) -> Result<Vec<u8>> {
    let (w, h, px) = render_rgba(volume, lobes, candidate, spec)?;
    encode_png(w, h, &px)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceMode {
    #[default]
    Centroid,
    Random,
}

/// Slices whose bbox footprint holds at least one labelled lobe voxel.
pub fn qualifying_slices(candidate: &NoduleCandidate, lobes: &LobeMap) -> Vec<usize> {
    let b = &candidate.bbox;
    let dims = lobes.dims();
    if !b.fits_in(dims) {
        return Vec::new();
    }
    (b.min[2]..=b.max[2])
        .filter(|&z| {
            (b.min[1]..=b.max[1])
                .any(|y| (b.min[0]..=b.max[0]).any(|x| lobes.get([x, y, z]) != 0))
        })
        .collect()
}

fn id_seed(id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Centroid mode returns the centroid slice, or the nearest qualifying one
/// when the centroid slice carries no lobe label. Random mode draws
/// uniformly from the qualifying slices, seeded by `seed` and the id.
pub fn select_slice(
    candidate: &NoduleCandidate,
    lobes: &LobeMap,
    mode: SliceMode,
    seed: u64,
) -> Result<usize> {
    let slices = qualifying_slices(candidate, lobes);
    if slices.is_empty() {
        return Err(Error::input(format!(
            "candidate {} has no slice showing both nodule and lobe",
            candidate.id
        )));
    }
    match mode {
        SliceMode::Centroid => {
            let cz = candidate.centroid_voxel()[2];
            Ok(*slices
                .iter()
                .min_by_key(|&&z| (z.abs_diff(cz), z))
                .expect("nonempty"))
        }
        SliceMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id_seed(&candidate.id));
            Ok(slices[rng.random_range(0..slices.len())])
        }
    }
}

/// Bounding rectangle of all labelled voxels on slice `z`, padded by
/// `margin`. None when the slice holds no lobe voxel.
pub fn lung_crop(lobes: &LobeMap, z: usize, margin: usize) -> Option<CropBox> {
    let [nx, ny, _] = lobes.dims();
    let mut acc: Option<CropBox> = None;
    for y in 0..ny {
        for x in 0..nx {
            if lobes.get([x, y, z]) == 0 {
                continue;
            }
            let c = acc.get_or_insert(CropBox {
                x0: x,
                y0: y,
                x1: x + 1,
                y1: y + 1,
            });
            c.x0 = c.x0.min(x);
            c.y0 = c.y0.min(y);
            c.x1 = c.x1.max(x + 1);
            c.y1 = c.y1.max(y + 1);
        }
    }
    acc.map(|c| CropBox {
        x0: c.x0.saturating_sub(margin),
        y0: c.y0.saturating_sub(margin),
        x1: (c.x1 + margin).min(nx),
        y1: (c.y1 + margin).min(ny),
    })
}

/// Square-ish window around the candidate, at least `min_side` voxels per
/// side where the slice allows it.
pub fn roi_crop(candidate: &NoduleCandidate, dims: [usize; 3], min_side: usize) -> CropBox {
    let b = &candidate.bbox;
    let axis = |a: usize| {
        let n = dims[a];
        let lo = b.min[a];
        let hi = b.max[a] + 1;
        let side = (hi - lo + 8).max(min_side).min(n);
        let center = (lo + hi) / 2;
        let start = center.saturating_sub(side / 2).min(n - side);
        (start, start + side)
    };
    let (x0, x1) = axis(0);
    let (y0, y1) = axis(1);
    CropBox { x0, y0, x1, y1 }
}

/// Crop intersection, None when empty.
pub fn intersect(a: CropBox, b: CropBox) -> Option<CropBox> {
    let c = CropBox {
        x0: a.x0.max(b.x0),
        y0: a.y0.max(b.y0),
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
    };
    (c.width() > 0 && c.height() > 0).then_some(c)
}
