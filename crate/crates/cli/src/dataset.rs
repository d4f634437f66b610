//! Labelled image sets: `manifest.json` plus `images.bin`, a row-major
//! little-endian f32 array of `count` images.

use std::path::Path;

use dfpq::Tensor;
use serde::{Deserialize, Serialize};

use crate::container::{check_header, create_dir, read_file, to_json, write_file, ContainerError, Dtype, MANIFEST};

pub const IMAGES: &str = "images.bin";
const DATASET_KIND: &str = "dfpq-dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub container: String,
    pub version: u32,
    pub dtype: Dtype,
    /// Shape of one image.
    pub shape: Vec<usize>,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: Vec<usize>,
    pub images: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn write(&self, dir: &Path) -> Result<(), ContainerError> {
        let manifest = DatasetManifest {
            container: DATASET_KIND.into(),
            version: 1,
            dtype: Dtype::F32,
            shape: self.shape.clone(),
            count: self.images.len(),
            labels: self.labels.clone(),
        };
        let bytes: Vec<u8> = self.images.iter().flat_map(|t| t.data.iter().flat_map(|v| v.to_le_bytes())).collect();
        create_dir(dir)?;
        write_file(&dir.join(MANIFEST), &to_json(&manifest))?;
        write_file(&dir.join(IMAGES), &bytes)
    }

    pub fn read(dir: &Path) -> Result<Self, ContainerError> {
        let m: DatasetManifest = serde_json::from_slice(&read_file(&dir.join(MANIFEST))?)?;
        check_header(&m.container, DATASET_KIND, m.version)?;
        if m.dtype != Dtype::F32 {
            return Err(ContainerError::Dtype { name: IMAGES.into(), expected: Dtype::F32, found: m.dtype });
        }
        let bytes = read_file(&dir.join(IMAGES))?;
        let per_image: usize = m.shape.iter().product();
        let expected = (per_image * m.count * 4) as u64;
        if bytes.len() as u64 != expected {
            return Err(ContainerError::Length { name: IMAGES.into(), shape: m.shape, expected, length: bytes.len() as u64 });
        }
        if m.labels.as_ref().is_some_and(|l| l.len() != m.count) {
            return Err(ContainerError::Length {
                name: "labels".into(),
                shape: vec![m.count],
                expected: m.count as u64,
                length: m.labels.as_ref().map_or(0, |l| l.len()) as u64,
            });
        }
        let values: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let images = if per_image == 0 {
            Vec::new()
        } else {
            values.chunks(per_image).map(|c| Tensor::new(m.shape.clone(), c.to_vec())).collect()
        };
        Ok(Dataset { shape: m.shape, images, labels: m.labels })
    }
}
