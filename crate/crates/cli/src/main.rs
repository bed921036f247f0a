//! tsrlab: synthetic table dataset generation, staged training,
//! evaluation, and single-image inference.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;
use tsrlab_core::config::{load_checkpoint, RunConfig};
use tsrlab_core::dataset;
use tsrlab_core::geometry::Axis;
use tsrlab_core::infer::{evaluate, infer_table, InferOutput};
use tsrlab_core::model::TsrModel;
use tsrlab_core::raster::RgbImage;
use tsrlab_core::synth::{generate_dataset, Difficulty, DifficultyChoice, WarpLevel};
use tsrlab_core::train::{staged_train, TrainOptions};

#[derive(Parser)]
#[command(name = "tsrlab", version, about = "Table structure recognition lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DifficultyArg {
    Plain,
    Spans,
    Empties,
    Dense,
    Mixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum WarpArg {
    None,
    Mild,
    Strong,
}

impl From<WarpArg> for WarpLevel {
    fn from(w: WarpArg) -> Self {
        match w {
            WarpArg::None => WarpLevel::None,
            WarpArg::Mild => WarpLevel::Mild,
            WarpArg::Strong => WarpLevel::Strong,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate an annotated synthetic dataset (PNG + JSON per sample).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = DifficultyArg::Mixed)]
        difficulty: DifficultyArg,
        #[arg(long, value_enum, default_value_t = WarpArg::None)]
        warp: WarpArg,
        /// Overwrite a non-empty output directory.
        #[arg(long, default_value_t = false)]
        force: bool,
    },
    /// Train the staged pipeline on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Preset: paper, desk or light.
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Optional key = value config file applied over the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Text-assignment limitation threshold.
        #[arg(long, default_value_t = 0.5)]
        limitation: f64,
        /// Comma-separated IoU thresholds.
        #[arg(long, default_value = "0.6,0.7,0.8,0.9")]
        iou: String,
        /// Where to write the report JSON (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run inference on one image; write grid JSON and optional overlay.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        grid_out: Option<PathBuf>,
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn env_seed(default: u64) -> u64 {
    std::env::var("TSRLAB_SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn resolve_ckpt(path: &PathBuf) -> PathBuf {
    if path.is_dir() {
        path.join("model.ckpt")
    } else {
        path.clone()
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::GenData { out, n, seed, difficulty, warp, force } => {
            let seed = env_seed(seed);
            let choice = match difficulty {
                DifficultyArg::Plain => DifficultyChoice::Fixed(Difficulty::Plain),
                DifficultyArg::Spans => DifficultyChoice::Fixed(Difficulty::Spans),
                DifficultyArg::Empties => DifficultyChoice::Fixed(Difficulty::Empties),
                DifficultyArg::Dense => DifficultyChoice::Fixed(Difficulty::Dense),
                DifficultyArg::Mixed => DifficultyChoice::Mixed,
            };
            let samples =
                generate_dataset(n, seed, choice, warp.into()).map_err(|e| e.to_string())?;
            dataset::save_dataset(&out, &samples, force).map_err(|e| e.to_string())?;
            println!("wrote {} samples to {}", samples.len(), out.display());
            Ok(())
        }
        Command::Train { data, out, preset, config, quiet } => {
            let mut run_cfg = RunConfig::preset(&preset).map_err(|e| e.to_string())?;
            if let Some(path) = &config {
                run_cfg.apply_file(path).map_err(|e| e.to_string())?;
            }
            run_cfg.apply_env();
            let samples = dataset::load_dataset(&data).map_err(|e| e.to_string())?;
            let mut model =
                TsrModel::new(run_cfg.model, run_cfg.seed).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let opts = TrainOptions { out_dir: Some(out.clone()), quiet, ..Default::default() };
            let result =
                staged_train(&mut model, &run_cfg, &samples, opts).map_err(|e| e.to_string())?;
            println!(
                "trained {} steps over {} samples; checkpoints: {}",
                result.log.len(),
                samples.len(),
                result
                    .checkpoints
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            Ok(())
        }
        Command::Eval { data, ckpt, limitation, iou, out } => {
            let ious: Vec<f64> = iou
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| format!("bad iou '{v}': {e}")))
                .collect::<Result<_, _>>()?;
            let (model, run_cfg) =
                load_checkpoint(&resolve_ckpt(&ckpt)).map_err(|e| e.to_string())?;
            let samples = dataset::load_dataset(&data).map_err(|e| e.to_string())?;
            let report = evaluate(&model, &samples, limitation, &ious, &run_cfg)
                .map_err(|e| e.to_string())?;
            let text = serde_json::to_string_pretty(&report).expect("report json");
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| e.to_string())?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Infer { image, ckpt, grid_out, overlay } => {
            let (model, run_cfg) =
                load_checkpoint(&resolve_ckpt(&ckpt)).map_err(|e| e.to_string())?;
            let img = dataset::load_png(&image).map_err(|e| e.to_string())?;
            let output = infer_table(&model, &img, run_cfg.schedule.test_longer_side)
                .map_err(|e| e.to_string())?;
            let json = grid_json(&output);
            match &grid_out {
                Some(path) => std::fs::write(path, serde_json::to_string_pretty(&json).unwrap())
                    .map_err(|e| e.to_string())?,
                None => println!("{}", serde_json::to_string_pretty(&json).unwrap()),
            }
            if let Some(path) = &overlay {
                let rgb = draw_overlay(&img, &output);
                save_rgb(&rgb, path)?;
            }
            Ok(())
        }
    }
}

fn grid_json(out: &InferOutput) -> serde_json::Value {
    let quad = |q: &tsrlab_core::geometry::Quad| -> serde_json::Value {
        serde_json::json!(q.corners().iter().map(|p| [p.x, p.y]).collect::<Vec<_>>())
    };
    let sep = |s: &tsrlab_core::geometry::Separator| -> serde_json::Value {
        let line = |l: &tsrlab_core::geometry::Polyline| {
            serde_json::json!(l.points.iter().map(|p| [p.x, p.y]).collect::<Vec<_>>())
        };
        serde_json::json!({
            "confidence": s.confidence,
            "top": line(&s.top),
            "center": line(&s.center),
            "bottom": line(&s.bottom),
        })
    };
    serde_json::json!({
        "n_rows": out.grid.n_rows,
        "n_cols": out.grid.n_cols,
        "cells": out.grid.final_cells.iter().map(|c| serde_json::json!({
            "row": c.row,
            "col": c.col,
            "row_span": c.row_span,
            "col_span": c.col_span,
            "box": quad(&c.quad),
        })).collect::<Vec<_>>(),
        "row_separators": out.row_seps.separators.iter().map(sep).collect::<Vec<_>>(),
        "col_separators": out.col_seps.separators.iter().map(sep).collect::<Vec<_>>(),
    })
}

/// Overlay: separator center lines solid, boundaries dashed, final cell
/// boxes in green.
fn draw_overlay(img: &tsrlab_core::raster::GrayImage, out: &InferOutput) -> RgbImage {
    let mut rgb = RgbImage::from_gray(img);
    for cell in &out.grid.final_cells {
        rgb.draw_quad(&cell.quad, [40, 180, 60]);
    }
    let red = [220, 40, 40];
    let blue = [50, 80, 220];
    for s in &out.row_seps.separators {
        let (t0, t1) = (0.0, img.w as f64 - 1.0);
        rgb.draw_polyline(&s.center, t0, t1, red, false);
        rgb.draw_polyline(&s.top, t0, t1, blue, true);
        rgb.draw_polyline(&s.bottom, t0, t1, blue, true);
    }
    for s in &out.col_seps.separators {
        let (t0, t1) = (0.0, img.h as f64 - 1.0);
        debug_assert_eq!(s.center.axis, Axis::Column);
        rgb.draw_polyline(&s.center, t0, t1, red, false);
        rgb.draw_polyline(&s.top, t0, t1, blue, true);
        rgb.draw_polyline(&s.bottom, t0, t1, blue, true);
    }
    rgb
}

fn save_rgb(img: &RgbImage, path: &PathBuf) -> Result<(), String> {
    let buf = image::RgbImage::from_raw(img.w as u32, img.h as u32, img.data.clone())
        .ok_or("overlay buffer size mismatch")?;
    buf.save(path).map_err(|e| e.to_string())
}
