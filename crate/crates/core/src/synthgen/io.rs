//! On-disk dataset layout.
//!
//! A dataset directory holds two files:
//!
//! * `manifest.jsonl`: one JSON record per line. The first line is the header
//!   (`"record": "header"`), followed by one `"polyp"` record per polyp and one
//!   `"frame"` record per frame. Frame records carry ids, intrinsics, boxes,
//!   hidden distance, background luminance, map dimensions and the byte offsets
//!   of the frame's two maps in the payload.
//! * `payload.bin`: for each frame in manifest order, the relative-depth map
//!   followed by the appearance map, each `map_height × map_width` little-endian
//!   IEEE-754 `f32` values in row-major order. No padding, no trailer.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, FrameId, FrameSample, PatientId, PolypId, PolypInstance, SynthError};
use crate::bbox::BBox;
use crate::geometry::CameraIntrinsics;
use crate::grid::Grid;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PAYLOAD_FILE: &str = "payload.bin";
const FORMAT: &str = "polyp-audit-dataset";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header {
        format: String,
        version: u32,
        n_polyps: usize,
        n_frames: usize,
    },
    Polyp(PolypInstance),
    Frame(FrameRecord),
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameRecord {
    frame_id: FrameId,
    polyp_id: PolypId,
    patient_id: PatientId,
    center: u32,
    intrinsics: CameraIntrinsics,
    hidden_true_z_mm: f64,
    apparent_bbox: BBox,
    gt_mask_bbox: BBox,
    background_luminance: f64,
    map_width: usize,
    map_height: usize,
    depth_offset: u64,
    appearance_offset: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn put_map(out: &mut Vec<u8>, map: &Grid<f32>) {
    for v in map.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let payload_path = dir.join(PAYLOAD_FILE);
    let mut manifest =
        BufWriter::new(File::create(&manifest_path).map_err(io_err(&manifest_path))?);
    let mut payload = BufWriter::new(File::create(&payload_path).map_err(io_err(&payload_path))?);

    let mut line = |record: &Record| -> Result<(), SynthError> {
        let text = serde_json::to_string(record).expect("records serialize");
        writeln!(manifest, "{text}").map_err(io_err(&manifest_path))
    };
    line(&Record::Header {
        format: FORMAT.into(),
        version: VERSION,
        n_polyps: dataset.cohort.len(),
        n_frames: dataset.frames.len(),
    })?;
    for p in &dataset.cohort {
        line(&Record::Polyp(p.clone()))?;
    }
    let mut offset = 0u64;
    let mut bytes = Vec::new();
    for f in &dataset.frames {
        let map_bytes = (f.relative_depth.len() * 4) as u64;
        if f.appearance.width() != f.relative_depth.width()
            || f.appearance.height() != f.relative_depth.height()
        {
            return Err(SynthError::DimensionMismatch(format!(
                "frame {}: appearance and depth maps differ in shape",
                f.frame_id.0
            )));
        }
        line(&Record::Frame(FrameRecord {
            frame_id: f.frame_id,
            polyp_id: f.polyp_id,
            patient_id: f.patient_id,
            center: f.center,
            intrinsics: f.intrinsics,
            hidden_true_z_mm: f.hidden_true_z_mm,
            apparent_bbox: f.apparent_bbox,
            gt_mask_bbox: f.gt_mask_bbox,
            background_luminance: f.background_luminance,
            map_width: f.relative_depth.width(),
            map_height: f.relative_depth.height(),
            depth_offset: offset,
            appearance_offset: offset + map_bytes,
        }))?;
        offset += 2 * map_bytes;
        bytes.clear();
        put_map(&mut bytes, &f.relative_depth);
        put_map(&mut bytes, &f.appearance);
        payload.write_all(&bytes).map_err(io_err(&payload_path))?;
    }
    drop(line);
    manifest.flush().map_err(io_err(&manifest_path))?;
    payload.flush().map_err(io_err(&payload_path))?;
    Ok(())
}

fn take_map(
    payload: &[u8],
    offset: u64,
    width: usize,
    height: usize,
    frame: u32,
) -> Result<Grid<f32>, SynthError> {
    let start = offset as usize;
    let end = start + width * height * 4;
    if end > payload.len() {
        return Err(SynthError::DimensionMismatch(format!(
            "frame {frame}: map at bytes {start}..{end} exceeds payload of {} bytes",
            payload.len()
        )));
    }
    let values = payload[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Grid::from_vec(width, height, values).expect("sized by construction"))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let payload_path = dir.join(PAYLOAD_FILE);
    let manifest = BufReader::new(File::open(&manifest_path).map_err(io_err(&manifest_path))?);
    let payload = fs::read(&payload_path).map_err(io_err(&payload_path))?;

    let mut header = None;
    let mut cohort = Vec::new();
    let mut frames = Vec::new();
    let mut expected_bytes = 0usize;
    for (i, text) in manifest.lines().enumerate() {
        let lineno = i + 1;
        let text = text.map_err(io_err(&manifest_path))?;
        if text.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&text).map_err(|e| SynthError::Manifest {
            line: lineno,
            message: e.to_string(),
        })?;
        match record {
            Record::Header {
                format,
                version,
                n_polyps,
                n_frames,
            } => {
                if lineno != 1 || header.is_some() {
                    return Err(SynthError::Manifest {
                        line: lineno,
                        message: "header must be the first and only header record".into(),
                    });
                }
                if format != FORMAT || version != VERSION {
                    return Err(SynthError::Manifest {
                        line: lineno,
                        message: format!("unsupported format {format} v{version}"),
                    });
                }
                header = Some((n_polyps, n_frames));
            }
            _ if header.is_none() => {
                return Err(SynthError::Manifest {
                    line: lineno,
                    message: "missing header record".into(),
                })
            }
            Record::Polyp(p) => cohort.push(p),
            Record::Frame(r) => {
                let map_bytes = r.map_width * r.map_height * 4;
                let relative_depth = take_map(
                    &payload,
                    r.depth_offset,
                    r.map_width,
                    r.map_height,
                    r.frame_id.0,
                )?;
                let appearance = take_map(
                    &payload,
                    r.appearance_offset,
                    r.map_width,
                    r.map_height,
                    r.frame_id.0,
                )?;
                expected_bytes += 2 * map_bytes;
                frames.push(FrameSample {
                    frame_id: r.frame_id,
                    polyp_id: r.polyp_id,
                    patient_id: r.patient_id,
                    center: r.center,
                    intrinsics: r.intrinsics,
                    hidden_true_z_mm: r.hidden_true_z_mm,
                    apparent_bbox: r.apparent_bbox,
                    gt_mask_bbox: r.gt_mask_bbox,
                    relative_depth,
                    background_luminance: r.background_luminance,
                    appearance,
                });
            }
        }
    }
    let (n_polyps, n_frames) = header.ok_or(SynthError::Manifest {
        line: 0,
        message: "empty manifest".into(),
    })?;
    if cohort.len() != n_polyps || frames.len() != n_frames {
        return Err(SynthError::Manifest {
            line: 1,
            message: format!(
                "header declares {n_polyps} polyps / {n_frames} frames, found {} / {}",
                cohort.len(),
                frames.len()
            ),
        });
    }
    if expected_bytes != payload.len() {
        return Err(SynthError::DimensionMismatch(format!(
            "manifest declares {expected_bytes} payload bytes, file has {}",
            payload.len()
        )));
    }
    Dataset::new(cohort, frames)
}
