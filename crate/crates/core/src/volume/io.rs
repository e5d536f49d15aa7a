use super::nifti::{self, NiftiExtension, Payload, ECODE_COMMENT};
use super::{
    Dims3, DynVolume, FrameSchedule, LabelInfo, LabeledMask, Mask, Result, Tac, VolumeError,
};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// JSON sidecar carried next to every 4D volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: [usize; 4],
    pub voxel_mm: [f64; 3],
    pub frame_durations_s: Vec<f64>,
    pub offset_s: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `<stem>.json` next to the data file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes through a temporary file in the same directory and renames it into
/// place, so readers never observe a half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io_err(path)(e)
    })
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| VolumeError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            VolumeError::MissingSidecar(path.to_path_buf())
        } else {
            io_err(path)(e)
        }
    })?;
    serde_json::from_str(&text).map_err(|source| VolumeError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn is_nifti(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("nii"))
}

/// Saves a volume as float32 little-endian plus a JSON sidecar.
///
/// A `.nii` path gets a NIfTI-1 container around the payload; any other
/// extension gets the bare payload.
pub fn save_volume(vol: &DynVolume, path: &Path) -> Result<()> {
    let d = vol.dims();
    let dims4 = [d.nx, d.ny, d.nz, vol.n_frames()];
    let bytes = if is_nifti(path) {
        nifti::encode(&dims4, vol.voxel_mm(), Payload::Float32(vol.data()), &[])?
    } else {
        let mut b = Vec::with_capacity(vol.data().len() * 4);
        vol.data()
            .iter()
            .for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
        b
    };
    atomic_write(path, &bytes)?;
    let sidecar = Sidecar {
        dims: dims4,
        voxel_mm: vol.voxel_mm(),
        frame_durations_s: vol.schedule().durations_s().to_vec(),
        offset_s: vol.schedule().offset_s(),
    };
    write_json(&sidecar_path(path), &sidecar)
}

fn volume_from_parts(sidecar: &Sidecar, data: Vec<f32>) -> Result<DynVolume> {
    let [nx, ny, nz, nt] = sidecar.dims;
    if sidecar.frame_durations_s.len() != nt {
        return Err(VolumeError::SchedulingMismatch {
            schedule: sidecar.frame_durations_s.len(),
            frames: nt,
        });
    }
    let schedule = FrameSchedule::new(sidecar.frame_durations_s.clone(), sidecar.offset_s)?;
    DynVolume::new(Dims3::new(nx, ny, nz), sidecar.voxel_mm, schedule, data)
}

/// Reads a NIfTI-1 4D volume; frame timing comes from the `<stem>.json` sidecar.
pub fn load_nifti(path: &Path) -> Result<DynVolume> {
    let img = nifti::read(path)?;
    let sidecar = read_sidecar(&sidecar_path(path))?;
    let [nx, ny, nz] = img.spatial_dims();
    let nt = img.n_volumes();
    if [nx, ny, nz] != sidecar.dims[..3] {
        return Err(VolumeError::DimsMismatch(format!(
            "header {:?} vs sidecar {:?}",
            [nx, ny, nz, nt],
            sidecar.dims
        )));
    }
    if nt != sidecar.frame_durations_s.len() {
        return Err(VolumeError::SchedulingMismatch {
            schedule: sidecar.frame_durations_s.len(),
            frames: nt,
        });
    }
    let sidecar = Sidecar {
        dims: [nx, ny, nz, nt],
        ..sidecar
    };
    volume_from_parts(&sidecar, img.data)
}

fn load_raw(path: &Path) -> Result<DynVolume> {
    let sidecar = read_sidecar(&sidecar_path(path))?;
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let n: usize = sidecar.dims.iter().product();
    if bytes.len() < 4 * n {
        return Err(VolumeError::Truncated {
            expected: 4 * n,
            actual: bytes.len(),
        });
    }
    let data = bytes[..4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    volume_from_parts(&sidecar, data)
}

/// Loads either container written by [`save_volume`], chosen by extension.
pub fn load_volume(path: &Path) -> Result<DynVolume> {
    if is_nifti(path) {
        load_nifti(path)
    } else {
        load_raw(path)
    }
}

fn read_3d(path: &Path) -> Result<(Dims3, [f64; 3], nifti::NiftiImage)> {
    let img = nifti::read(path)?;
    if img.n_volumes() != 1 {
        return Err(VolumeError::DimsMismatch(format!(
            "{}: expected a 3D image, found dims {:?}",
            path.display(),
            img.dims
        )));
    }
    let [nx, ny, nz] = img.spatial_dims();
    Ok((Dims3::new(nx, ny, nz), img.pixdim, img))
}

pub fn save_mask(mask: &Mask, voxel_mm: [f64; 3], path: &Path) -> Result<()> {
    let data: Vec<i16> = mask.bits().iter().map(|&b| i16::from(b)).collect();
    let bytes = nifti::encode(
        &mask.dims().as_array(),
        voxel_mm,
        Payload::Int16(&data),
        &[],
    )?;
    atomic_write(path, &bytes)
}

/// Any nonzero voxel is part of the mask.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let (dims, _, img) = read_3d(path)?;
    Mask::from_bits(dims, img.data.iter().map(|&v| v != 0.0).collect())
}

#[derive(Serialize, Deserialize)]
struct LabelTableDoc {
    labels: Vec<LabelInfo>,
}

/// Saves labels as int16 with the label table embedded as a JSON extension.
pub fn save_atlas(atlas: &LabeledMask, voxel_mm: [f64; 3], path: &Path) -> Result<()> {
    let data: Vec<i16> = atlas
        .labels()
        .iter()
        .map(|&l| {
            i16::try_from(l).map_err(|_| VolumeError::BadHeader(format!("label {l} exceeds int16")))
        })
        .collect::<Result<_>>()?;
    let doc = LabelTableDoc {
        labels: atlas.table().to_vec(),
    };
    let ext = NiftiExtension {
        code: ECODE_COMMENT,
        data: serde_json::to_vec(&doc).map_err(|source| VolumeError::Json {
            path: path.to_path_buf(),
            source,
        })?,
    };
    let bytes = nifti::encode(
        &atlas.dims().as_array(),
        voxel_mm,
        Payload::Int16(&data),
        &[ext],
    )?;
    atomic_write(path, &bytes)
}

/// Loads an atlas label volume. The label table comes from `labels_json` when
/// given, else from an embedded JSON extension, else generic names.
pub fn load_atlas(path: &Path, labels_json: Option<&Path>) -> Result<LabeledMask> {
    let (dims, _, img) = read_3d(path)?;
    let labels: Vec<u32> = img
        .data
        .iter()
        .map(|&v| if v > 0.0 { v.round() as u32 } else { 0 })
        .collect();
    let table = if let Some(p) = labels_json {
        let text = std::fs::read_to_string(p).map_err(io_err(p))?;
        let doc: LabelTableDoc =
            serde_json::from_str(&text).map_err(|source| VolumeError::Json {
                path: p.to_path_buf(),
                source,
            })?;
        Some(doc.labels)
    } else {
        img.extensions
            .iter()
            .filter(|e| e.code == ECODE_COMMENT)
            .find_map(|e| {
                let end = e.data.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1);
                serde_json::from_slice::<LabelTableDoc>(&e.data[..end]).ok()
            })
            .map(|d| d.labels)
    };
    match table {
        Some(t) => LabeledMask::new(dims, labels, t),
        None => LabeledMask::with_generic_names(dims, labels),
    }
}

/// Saves a 3D float map; `None` voxels are written as NaN.
pub fn save_parametric_map(
    dims: Dims3,
    voxel_mm: [f64; 3],
    values: &[Option<f64>],
    path: &Path,
) -> Result<()> {
    let data: Vec<f32> = values
        .iter()
        .map(|v| v.map_or(f32::NAN, |x| x as f32))
        .collect();
    let bytes = nifti::encode(&dims.as_array(), voxel_mm, Payload::Float32(&data), &[])?;
    atomic_write(path, &bytes)
}

/// Reads a 3D float map without clamping; NaN voxels come back as `None`.
pub fn load_parametric_map(path: &Path) -> Result<(Dims3, [f64; 3], Vec<Option<f64>>)> {
    let (dims, pixdim, img) = read_3d(path)?;
    let values = img
        .data
        .iter()
        .map(|&v| v.is_finite().then_some(v as f64))
        .collect();
    Ok((dims, pixdim, values))
}

const TAC_HEADER: [&str; 2] = ["time_min", "activity_kBq_per_mL"];

/// Two-column CSV with header `time_min,activity_kBq_per_mL`. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn tac_to_csv(tac: &Tac, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| VolumeError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    w.write_record(TAC_HEADER).map_err(csv_err)?;
    for (t, v) in tac.times().iter().zip(tac.values()) {
        w.write_record([t.to_string(), v.to_string()])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| VolumeError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    atomic_write(path, &bytes)
}

/// Row numbers in errors are 1-based file lines (the header is line 1).
pub fn tac_from_csv(path: &Path) -> Result<Tac> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| VolumeError::ParseError {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != 2 {
            return Err(VolumeError::ParseError {
                row,
                message: format!("expected 2 columns, found {}", rec.len()),
            });
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|_| VolumeError::ParseError {
                row,
                message: format!("not a number: {s:?}"),
            })
        };
        let t = parse(&rec[0])?;
        let v = parse(&rec[1])?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(VolumeError::NonMonotonicTimes { row });
            }
        }
        times.push(t);
        values.push(v);
    }
    Tac::new(times, values)
}
