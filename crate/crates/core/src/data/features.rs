//! Instance features, either read from a binary feature file or synthesized.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! "RKF1"  d_c: i32  count: u32
//! count x { id_len: u32, id: [u8; id_len] (UTF-8), n: i32, values: [f32; n * d_c] }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use super::{ImageRecord, InstanceSet};
use crate::error::{Error, Result};
use crate::nn::labeled_rng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RKF1";

/// Noise added to a class prototype for each synthetic instance.
const SYNTHETIC_NOISE: f64 = 0.35;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct FeatureFile {
    pub dim: usize,
    pub images: BTreeMap<String, Tensor>,
}

impl FeatureFile {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            images: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, image_id: &str, features: Tensor) -> Result<()> {
        if features.cols() != self.dim && features.rows() > 0 {
            return Err(Error::dim(format!(
                "features for {image_id} have {} columns, file stores {}",
                features.cols(),
                self.dim
            )));
        }
        self.images.insert(image_id.to_string(), features);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dim as i32).to_le_bytes());
        out.extend_from_slice(&(self.images.len() as u32).to_le_bytes());
        for (id, t) in &self.images {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&(t.rows() as i32).to_le_bytes());
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Validation("feature file does not start with RKF1".into()));
        }
        let dim = r.i32()?;
        if dim < 0 {
            return Err(Error::Validation(format!("negative feature dimension {dim}")));
        }
        let dim = dim as usize;
        let count = r.u32()? as usize;
        let mut file = FeatureFile::new(dim);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Validation(format!("image id is not UTF-8: {e}")))?
                .to_string();
            let n = r.i32()?;
            if n < 0 {
                return Err(Error::Validation(format!("negative instance count for {id}")));
            }
            let n = n as usize;
            let mut data = Vec::with_capacity(n * dim);
            for _ in 0..n * dim {
                data.push(f64::from(r.f32()?));
            }
            file.images.insert(id, Tensor::matrix(n, dim, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Validation("trailing bytes after feature records".into()));
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Validation("feature file is truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
}

/// Where instance features come from.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    File(FeatureFile),
    /// Class prototype plus per-instance noise, derived from
    /// `(seed, image_id, gt class)`.
    Synthetic { seed: u64, dim: usize },
}

impl FeatureSource {
    pub fn dim(&self) -> usize {
        match self {
            FeatureSource::File(f) => f.dim,
            FeatureSource::Synthetic { dim, .. } => *dim,
        }
    }
}

fn class_prototype(seed: u64, class: usize, dim: usize) -> Vec<f64> {
    let mut rng = labeled_rng(seed, &format!("feature-prototype/{class}"));
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn synthetic_features(seed: u64, dim: usize, image_id: &str, classes: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(classes.len() * dim);
    for (i, &c) in classes.iter().enumerate() {
        let proto = class_prototype(seed, c, dim);
        let mut rng = labeled_rng(seed, &format!("feature-noise/{image_id}/{i}"));
        data.extend(proto.iter().map(|p| {
            let z: f64 = StandardNormal.sample(&mut rng);
            p + SYNTHETIC_NOISE * z
        }));
    }
    Tensor::matrix(classes.len(), dim, data).expect("consistent shape")
}

/// Returns `instances` with features attached from `source`.
///
/// `expected_dim` guards against feature files built for a different model.
pub fn load_instance_set(
    source: &FeatureSource,
    image_id: &str,
    instances: &InstanceSet,
    expected_dim: usize,
) -> Result<InstanceSet> {
    if source.dim() != expected_dim {
        return Err(Error::dim(format!(
            "feature dimension {} does not match configured {expected_dim}",
            source.dim()
        )));
    }
    let features = match source {
        FeatureSource::File(file) => {
            let t = file
                .images
                .get(image_id)
                .ok_or_else(|| Error::Lookup(format!("no features for image {image_id:?}")))?;
            if t.rows() != instances.len() {
                return Err(Error::dim(format!(
                    "image {image_id}: {} feature rows for {} instances",
                    t.rows(),
                    instances.len()
                )));
            }
            t.clone()
        }
        FeatureSource::Synthetic { seed, dim } => {
            let classes = instances.gt_classes.as_ref().ok_or_else(|| {
                Error::Validation(format!(
                    "image {image_id}: synthetic features need ground-truth classes"
                ))
            })?;
            synthetic_features(*seed, *dim, image_id, classes)
        }
    };
    let mut out = instances.clone();
    out.features = features;
    out.validate()?;
    Ok(out)
}

/// Attaches features to every record in place.
pub fn attach_features(records: &mut [ImageRecord], source: &FeatureSource, dim: usize) -> Result<()> {
    for r in records {
        r.instances = load_instance_set(source, &r.image_id, &r.instances, dim)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn instances(classes: Vec<usize>) -> InstanceSet {
        let boxes = (0..classes.len())
            .map(|i| [i as f64, 0.0, i as f64 + 1.0, 1.0])
            .collect();
        InstanceSet::from_ground_truth(classes, boxes, 5, 20.0, 20.0).unwrap()
    }

    #[test]
    fn same_class_features_are_closer() {
        let src = FeatureSource::Synthetic { seed: 11, dim: 32 };
        let set = load_instance_set(&src, "img", &instances(vec![2, 2, 0, 4]), 32).unwrap();
        let f = &set.features;
        let same = cosine(f.row_slice(0), f.row_slice(1));
        for other in [2, 3] {
            assert!(same > cosine(f.row_slice(0), f.row_slice(other)));
            assert!(same > cosine(f.row_slice(1), f.row_slice(other)));
        }
        let again = load_instance_set(&src, "img", &instances(vec![2, 2, 0, 4]), 32).unwrap();
        assert_eq!(again, set);
    }

    #[test]
    fn file_round_trip_is_bit_identical() {
        let mut file = FeatureFile::new(3);
        let t = Tensor::matrix(2, 3, vec![0.5, -1.25, 3.0, 1e-3f32 as f64, 2.0, -0.0]).unwrap();
        file.insert("a", t.clone()).unwrap();
        file.insert("b", Tensor::zeros(&[0, 3])).unwrap();
        let tmp = tempfile::NamedTempFile::new().unwrap();
        file.write(tmp.path()).unwrap();
        let back = FeatureFile::read(tmp.path()).unwrap();
        assert_eq!(back, file);
        let bits: Vec<u64> = back.images["a"].data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn lookup_and_dimension_errors() {
        let mut file = FeatureFile::new(2);
        file.insert("a", Tensor::zeros(&[1, 2])).unwrap();
        let src = FeatureSource::File(file);
        let set = instances(vec![1]);
        assert!(matches!(load_instance_set(&src, "zzz", &set, 2), Err(Error::Lookup(_))));
        assert!(matches!(load_instance_set(&src, "a", &set, 3), Err(Error::Dimension(_))));
        assert!(load_instance_set(&src, "a", &set, 2).is_ok());
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        assert!(FeatureFile::from_bytes(b"XXXX").is_err());
        let mut file = FeatureFile::new(2);
        file.insert("a", Tensor::zeros(&[1, 2])).unwrap();
        let bytes = file.to_bytes();
        assert!(FeatureFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
