use super::{Modality, Slice};
use crate::error::{Error, Result};
use ndarray::{Array2, ArrayD, Axis, Ix3};
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use std::path::Path;

/// Axial slices of a 3D volume plus its voxel-to-world affine.
#[derive(Clone, Debug)]
pub struct Volume {
    pub slices: Vec<Slice>,
    pub affine: [[f32; 4]; 4],
}

fn ingest(path: &Path, e: impl ToString) -> Error {
    Error::Ingestion { path: path.to_path_buf(), message: e.to_string() }
}

fn read_3d(path: &Path) -> Result<(ArrayD<f32>, [[f32; 4]; 4])> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| ingest(path, e))?;
    let h = obj.header();
    let affine = [h.srow_x, h.srow_y, h.srow_z, [0.0, 0.0, 0.0, 1.0]];
    let mut data = obj.into_volume().into_ndarray::<f32>().map_err(|e| ingest(path, e))?;
    // drop trailing singleton dimensions (e.g. a time axis of length 1)
    while data.ndim() > 3 && data.shape()[data.ndim() - 1] == 1 {
        let last = data.ndim() - 1;
        data = data.index_axis_move(Axis(last), 0);
    }
    if data.ndim() != 3 {
        let shape = data.shape().to_vec();
        return Err(ingest(path, format!("expected a 3D volume, found shape {shape:?}")));
    }
    Ok((data, affine))
}

/// Load a NIfTI volume (`.nii` or `.nii.gz`) as slices along the third axis.
///
/// Without a mask file the mask is the nonzero-intensity support.
pub fn load_volume(path: &Path, mask_path: Option<&Path>, modality: Modality) -> Result<Volume> {
    let (data, affine) = read_3d(path)?;
    let mask = match mask_path {
        Some(mp) => {
            let (m, _) = read_3d(mp)?;
            if m.shape() != data.shape() {
                return Err(Error::Validation(format!(
                    "volume {} has shape {:?} but mask {} has {:?}",
                    path.display(),
                    data.shape(),
                    mp.display(),
                    m.shape()
                )));
            }
            m.mapv(|v| v != 0.0)
        }
        None => data.mapv(|v| v != 0.0),
    };
    let data = data.into_dimensionality::<Ix3>().expect("checked 3D");
    let mask = mask.into_dimensionality::<Ix3>().expect("checked 3D");
    let subject_id = path
        .file_name()
        .map(|f| f.to_string_lossy().trim_end_matches(".gz").trim_end_matches(".nii").to_string())
        .unwrap_or_default();
    let mut slices = Vec::with_capacity(data.shape()[2]);
    for k in 0..data.shape()[2] {
        let pixels: Array2<f32> = data.index_axis(Axis(2), k).mapv(|v| if v.is_finite() { v } else { 0.0 });
        let m = mask.index_axis(Axis(2), k).to_owned();
        slices.push(Slice::new(pixels, m, modality, subject_id.clone(), k)?);
    }
    Ok(Volume { slices, affine })
}
