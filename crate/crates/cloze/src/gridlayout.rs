//! Grid-layout composition: context rows and the query concatenated into one
//! canvas, binary infilling masks, and 3-axis (t, y, x) token positions.
//!
//! The canvas is (C+1) rows by L columns of fixed-size cells; the query sits
//! in the last row with a blank target cell. The inference mask covers
//! exactly the target cell (last row, last column); the training mask
//! additionally covers one random condition cell with probability 0.5.

use crate::error::{ClozeError, Result};
use crate::image::RasterImage;
use crate::rng::SeededRng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Grid geometry: C context rows, L images per row, fixed cell size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(rename = "C")]
    pub context_rows: usize,
    #[serde(rename = "L")]
    pub images_per_row: usize,
    #[serde(rename = "cell")]
    pub cell: (usize, usize),
}

impl GridSpec {
    pub fn new(context_rows: usize, images_per_row: usize, cell_w: usize, cell_h: usize) -> Self {
        GridSpec { context_rows, images_per_row, cell: (cell_w, cell_h) }
    }

    pub fn cell_w(&self) -> usize {
        self.cell.0
    }

    pub fn cell_h(&self) -> usize {
        self.cell.1
    }

    pub fn rows(&self) -> usize {
        self.context_rows + 1
    }

    /// Canvas pixel size (width, height) = (L*cellW, (C+1)*cellH).
    pub fn canvas_size(&self) -> (usize, usize) {
        (self.images_per_row * self.cell_w(), self.rows() * self.cell_h())
    }

    /// Uniform row shapes for position assignment.
    pub fn row_shapes(&self) -> Vec<(usize, usize)> {
        vec![(self.images_per_row * self.cell_w(), self.cell_h()); self.rows()]
    }
}

/// Binary mask over the canvas; 1 marks pixels to be generated.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl MaskMatrix {
    pub fn zeros(width: usize, height: usize) -> Self {
        MaskMatrix { width, height, data: vec![0; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn ones_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    fn fill_cell(&mut self, spec: &GridSpec, row: usize, col: usize) {
        let (cw, ch) = spec.cell;
        for y in row * ch..(row + 1) * ch {
            for x in col * cw..(col + 1) * cw {
                self.set(x, y, 1);
            }
        }
    }

    /// Debug export as a 1-channel 0/255 PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let w = std::io::BufWriter::new(file);
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
        writer.write_image_data(&bytes)?;
        Ok(())
    }
}

/// Per-token (t, y, x) coordinates at patch granularity, in canonical token
/// order: rows in temporal order, then y, then x across the row.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTable {
    pub patch: usize,
    pub row_shapes: Vec<(usize, usize)>,
    pub positions: Vec<[u32; 3]>,
}

impl PositionTable {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn all_unique(&self) -> bool {
        let mut set = std::collections::BTreeSet::new();
        self.positions.iter().all(|p| set.insert(*p))
    }
}

/// The composed canvas plus its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCanvas {
    pub image: RasterImage,
    pub spec: GridSpec,
}

pub const BLANK_SENTINEL: f32 = 0.5;

fn place_cell(canvas: &mut RasterImage, spec: &GridSpec, row: usize, col: usize, img: &RasterImage) {
    let (cw, ch) = spec.cell;
    let resized;
    let src = if img.width == cw && img.height == ch {
        img
    } else {
        resized = img.resize_nearest(cw, ch);
        &resized
    };
    for y in 0..ch {
        for x in 0..cw {
            canvas.set_pixel(col * cw + x, row * ch + y, src.pixel(x, y));
        }
    }
}

/// Context rows (each complete with L images) above the query row
/// (L-1 conditions plus a blank target cell).
pub fn compose_grid(
    context_rows: &[Vec<RasterImage>],
    query_conditions: &[RasterImage],
    spec: &GridSpec,
) -> Result<GridCanvas> {
    if context_rows.len() != spec.context_rows {
        return Err(ClozeError::ShapeMismatch(format!(
            "expected {} context rows, got {}",
            spec.context_rows,
            context_rows.len()
        )));
    }
    if query_conditions.len() + 1 != spec.images_per_row {
        return Err(ClozeError::ShapeMismatch(format!(
            "expected {} query conditions, got {}",
            spec.images_per_row - 1,
            query_conditions.len()
        )));
    }
    let (w, h) = spec.canvas_size();
    let mut image = RasterImage::filled(w, h, [BLANK_SENTINEL; 3]);
    for (r, row) in context_rows.iter().enumerate() {
        if row.len() != spec.images_per_row {
            return Err(ClozeError::ShapeMismatch(format!(
                "context row {r} has {} images, expected {}",
                row.len(),
                spec.images_per_row
            )));
        }
        for (c, img) in row.iter().enumerate() {
            place_cell(&mut image, spec, r, c, img);
        }
    }
    for (c, img) in query_conditions.iter().enumerate() {
        place_cell(&mut image, spec, spec.context_rows, c, img);
    }
    Ok(GridCanvas { image, spec: *spec })
}

/// Fully populated grid: every row, including the query, carries L images.
/// Used for training targets and reverse-direction inference inputs.
pub fn compose_full_grid(rows: &[Vec<RasterImage>], spec: &GridSpec) -> Result<GridCanvas> {
    if rows.len() != spec.rows() {
        return Err(ClozeError::ShapeMismatch(format!(
            "expected {} rows, got {}",
            spec.rows(),
            rows.len()
        )));
    }
    let (w, h) = spec.canvas_size();
    let mut image = RasterImage::filled(w, h, [BLANK_SENTINEL; 3]);
    for (r, row) in rows.iter().enumerate() {
        if row.len() != spec.images_per_row {
            return Err(ClozeError::ShapeMismatch(format!(
                "row {r} has {} images, expected {}",
                row.len(),
                spec.images_per_row
            )));
        }
        for (c, img) in row.iter().enumerate() {
            place_cell(&mut image, spec, r, c, img);
        }
    }
    Ok(GridCanvas { image, spec: *spec })
}

/// Reads back cell (row, col) as its own image.
pub fn read_cell(canvas: &GridCanvas, row: usize, col: usize) -> RasterImage {
    let (cw, ch) = canvas.spec.cell;
    let mut out = RasterImage::new(cw, ch);
    for y in 0..ch {
        for x in 0..cw {
            out.set_pixel(x, y, canvas.image.pixel(col * cw + x, row * ch + y));
        }
    }
    out
}

/// Overwrites cell (row, col) in place.
pub fn write_cell(canvas: &mut GridCanvas, row: usize, col: usize, img: &RasterImage) {
    let spec = canvas.spec;
    place_cell(&mut canvas.image, &spec, row, col, img);
}

/// Mask covering exactly one cell.
pub fn build_cell_mask(spec: &GridSpec, row: usize, col: usize) -> MaskMatrix {
    let (w, h) = spec.canvas_size();
    let mut m = MaskMatrix::zeros(w, h);
    m.fill_cell(spec, row, col);
    m
}

/// Inference mask: the target cell in the last row and last column.
pub fn build_inference_mask(spec: &GridSpec) -> MaskMatrix {
    build_cell_mask(spec, spec.context_rows, spec.images_per_row - 1)
}

/// Training mask: the inference mask, plus (with probability 0.5) the full
/// cell of one uniformly chosen condition column in the query row.
pub fn build_training_mask(spec: &GridSpec, rng: &mut SeededRng) -> MaskMatrix {
    let mut m = build_inference_mask(spec);
    if spec.images_per_row >= 2 && rng.gen::<f64>() < 0.5 {
        let col = rng.gen_range(0..spec.images_per_row - 1);
        m.fill_cell(spec, spec.context_rows, col);
    }
    m
}

/// Token coordinates for rows of possibly different pixel shapes: tokens of
/// row r get t = r; (y, x) span the row's patch lattice.
pub fn assign_positions(row_shapes: &[(usize, usize)], patch: usize) -> Result<PositionTable> {
    if patch == 0 {
        return Err(ClozeError::ShapeMismatch("patch size must be positive".into()));
    }
    let mut positions = Vec::new();
    for (r, &(w, h)) in row_shapes.iter().enumerate() {
        if w % patch != 0 || h % patch != 0 {
            return Err(ClozeError::ShapeMismatch(format!(
                "row {r} shape {w}x{h} not divisible by patch {patch}"
            )));
        }
        for y in 0..h / patch {
            for x in 0..w / patch {
                positions.push([r as u32, y as u32, x as u32]);
            }
        }
    }
    Ok(PositionTable { patch, row_shapes: row_shapes.to_vec(), positions })
}

/// Crops the target cell (last row, last column).
pub fn crop_target(canvas: &GridCanvas) -> RasterImage {
    read_cell(canvas, canvas.spec.context_rows, canvas.spec.images_per_row - 1)
}

/// Converts a pixel mask to a per-token mask in canonical token order.
/// Masks are cell-aligned, so every patch is uniformly masked or clear.
pub fn token_mask(mask: &MaskMatrix, spec: &GridSpec, patch: usize) -> Result<Vec<bool>> {
    let (w, h) = spec.canvas_size();
    if mask.width != w || mask.height != h {
        return Err(ClozeError::ShapeMismatch(format!(
            "mask {}x{} does not match canvas {w}x{h}",
            mask.width, mask.height
        )));
    }
    let ch = spec.cell_h();
    let mut out = Vec::with_capacity((w / patch) * (h / patch));
    for r in 0..spec.rows() {
        for py in 0..ch / patch {
            for px in 0..w / patch {
                let x0 = px * patch;
                let y0 = r * ch + py * patch;
                let first = mask.get(x0, y0);
                for dy in 0..patch {
                    for dx in 0..patch {
                        if mask.get(x0 + dx, y0 + dy) != first {
                            return Err(ClozeError::ShapeMismatch(format!(
                                "mask not uniform within patch at ({x0},{y0})"
                            )));
                        }
                    }
                }
                out.push(first == 1);
            }
        }
    }
    Ok(out)
}
