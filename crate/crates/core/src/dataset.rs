//! Dataset directory layout and the annotation JSON schema.
//!
//! One PNG plus one JSON per sample. Boxes are quadrilaterals as four
//! [x, y] pixel-float pairs; separator lines are K-point polylines.

use crate::geometry::{
    build_grid, resolve_merges, Axis, Point2D, Polyline, Quad, Separator, SeparatorSet,
};
use crate::raster::GrayImage;
use crate::synth::AnnotatedSample;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("output directory {0} is not empty (use force to overwrite)")]
    NotEmpty(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CellAnno {
    pub row: usize,
    pub col: usize,
    pub row_span: usize,
    pub col_span: usize,
    #[serde(rename = "box")]
    pub quad: Vec<[f64; 2]>,
    pub empty: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TextLineAnno {
    #[serde(rename = "box")]
    pub quad: Vec<[f64; 2]>,
    pub cell: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SeparatorAnno {
    pub top: Vec<[f64; 2]>,
    pub center: Vec<[f64; 2]>,
    pub bottom: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Annotation {
    pub image_size: (usize, usize),
    pub cells: Vec<CellAnno>,
    pub text_lines: Vec<TextLineAnno>,
    pub row_separators: Vec<SeparatorAnno>,
    pub col_separators: Vec<SeparatorAnno>,
}

fn quad_points(q: &Quad) -> Vec<[f64; 2]> {
    q.corners().iter().map(|p| [p.x, p.y]).collect()
}

fn polyline_points(l: &Polyline) -> Vec<[f64; 2]> {
    l.points.iter().map(|p| [p.x, p.y]).collect()
}

fn points_polyline(pts: &[[f64; 2]], axis: Axis) -> Polyline {
    Polyline { points: pts.iter().map(|p| Point2D::new(p[0], p[1])).collect(), axis }
}

impl Annotation {
    pub fn from_sample(s: &AnnotatedSample) -> Self {
        let sep_anno = |sep: &Separator| SeparatorAnno {
            top: polyline_points(&sep.top),
            center: polyline_points(&sep.center),
            bottom: polyline_points(&sep.bottom),
        };
        Annotation {
            image_size: (s.image.w, s.image.h),
            cells: s
                .gt_grid
                .final_cells
                .iter()
                .enumerate()
                .map(|(id, c)| CellAnno {
                    row: c.row,
                    col: c.col,
                    row_span: c.row_span,
                    col_span: c.col_span,
                    quad: quad_points(&c.quad),
                    empty: s.cells_empty[id],
                })
                .collect(),
            text_lines: s
                .text_boxes
                .iter()
                .map(|t| TextLineAnno { quad: quad_points(&t.quad), cell: t.cell })
                .collect(),
            row_separators: s.gt_row_seps.separators.iter().map(sep_anno).collect(),
            col_separators: s.gt_col_seps.separators.iter().map(sep_anno).collect(),
        }
    }

    pub fn to_sample(&self, image: GrayImage, path: &Path) -> Result<AnnotatedSample, DatasetError> {
        let seps = |annos: &[SeparatorAnno], axis: Axis| SeparatorSet {
            axis,
            separators: annos
                .iter()
                .map(|a| Separator {
                    top: points_polyline(&a.top, axis),
                    center: points_polyline(&a.center, axis),
                    bottom: points_polyline(&a.bottom, axis),
                    confidence: 1.0,
                })
                .collect(),
        };
        let gt_row_seps = seps(&self.row_separators, Axis::Row);
        let gt_col_seps = seps(&self.col_separators, Axis::Column);
        let base = build_grid(&gt_row_seps, &gt_col_seps, self.image_size).map_err(|e| {
            DatasetError::Format { path: path.to_path_buf(), message: e.to_string() }
        })?;
        let mut decisions = Vec::new();
        for c in &self.cells {
            for i in c.row..c.row + c.row_span {
                for j in c.col..c.col + c.col_span {
                    if j + 1 < c.col + c.col_span {
                        decisions.push((((i, j), (i, j + 1)), true));
                    }
                    if i + 1 < c.row + c.row_span {
                        decisions.push((((i, j), (i + 1, j)), true));
                    }
                }
            }
        }
        let gt_grid = resolve_merges(&base, &decisions);
        let mut cells_empty = vec![true; gt_grid.final_cells.len()];
        // final ids are row-major by anchor; map annotation cells onto them
        for c in &self.cells {
            let id = gt_grid.final_id(c.row, c.col);
            cells_empty[id] = c.empty;
        }
        let text_boxes = self
            .text_lines
            .iter()
            .map(|tl| {
                // the stored index refers to the cells array; remap by anchor
                let anno = &self.cells[tl.cell];
                let id = gt_grid.final_id(anno.row, anno.col);
                crate::synth::TextBox {
                    quad: Quad([
                        Point2D::new(tl.quad[0][0], tl.quad[0][1]),
                        Point2D::new(tl.quad[1][0], tl.quad[1][1]),
                        Point2D::new(tl.quad[2][0], tl.quad[2][1]),
                        Point2D::new(tl.quad[3][0], tl.quad[3][1]),
                    ]),
                    cell: id,
                }
            })
            .collect();
        Ok(AnnotatedSample { image, gt_row_seps, gt_col_seps, gt_grid, text_boxes, cells_empty })
    }
}

pub fn save_png(img: &GrayImage, path: &Path) -> Result<(), DatasetError> {
    let buf =
        image::GrayImage::from_raw(img.w as u32, img.h as u32, img.data.clone()).expect("raw size");
    buf.save(path).map_err(|e| DatasetError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_png(path: &Path) -> Result<GrayImage, DatasetError> {
    let img = image::open(path)
        .map_err(|e| DatasetError::Format { path: path.to_path_buf(), message: e.to_string() })?
        .into_luma8();
    Ok(GrayImage { w: img.width() as usize, h: img.height() as usize, data: img.into_raw() })
}

/// Write `samples` as NNNNN.png / NNNNN.json pairs.
pub fn save_dataset(
    dir: &Path,
    samples: &[AnnotatedSample],
    force: bool,
) -> Result<(), DatasetError> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if non_empty && !force {
            return Err(DatasetError::NotEmpty(dir.to_path_buf()));
        }
    } else {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let png = dir.join(format!("{i:05}.png"));
        let json = dir.join(format!("{i:05}.json"));
        save_png(&s.image, &png)?;
        let anno = Annotation::from_sample(s);
        let text = serde_json::to_string_pretty(&anno).expect("serializable");
        std::fs::write(&json, text).map_err(io_err(&json))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<AnnotatedSample>, DatasetError> {
    let mut stems: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    stems.sort();
    let mut out = Vec::with_capacity(stems.len());
    for json in stems {
        let png = json.with_extension("png");
        let text = std::fs::read_to_string(&json).map_err(io_err(&json))?;
        let anno: Annotation = serde_json::from_str(&text).map_err(|e| DatasetError::Format {
            path: json.clone(),
            message: e.to_string(),
        })?;
        let img = load_png(&png)?;
        out.push(anno.to_sample(img, &json)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sample, Difficulty, WarpLevel};

    #[test]
    fn annotation_roundtrip_fixpoint() {
        let s = generate_sample(17, Difficulty::Spans, WarpLevel::Mild).unwrap();
        let anno = Annotation::from_sample(&s);
        let text = serde_json::to_string(&anno).unwrap();
        let parsed: Annotation = serde_json::from_str(&text).unwrap();
        assert_eq!(anno, parsed, "parse -> serialize -> parse fixpoint");
        let text2 = serde_json::to_string(&parsed).unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn sample_reconstruction_preserves_structure() {
        let s = generate_sample(23, Difficulty::Spans, WarpLevel::None).unwrap();
        let anno = Annotation::from_sample(&s);
        let rebuilt = anno.to_sample(s.image.clone(), Path::new("test")).unwrap();
        assert_eq!(rebuilt.gt_grid.final_cells.len(), s.gt_grid.final_cells.len());
        assert_eq!(rebuilt.gt_grid.merge_map, s.gt_grid.merge_map);
        assert_eq!(rebuilt.text_boxes.len(), s.text_boxes.len());
        assert_eq!(rebuilt.cells_empty, s.cells_empty);
        for (a, b) in rebuilt.text_boxes.iter().zip(&s.text_boxes) {
            assert_eq!(a.cell, b.cell);
        }
    }
}
