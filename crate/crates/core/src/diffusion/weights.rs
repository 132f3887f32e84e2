//! The "EPSW" weight container and the network-backed predictor.
//!
//! Layout: magic `EPSW`, version u32, manifest length u32, manifest JSON,
//! then little-endian f32 tensor data. Tensor offsets are bytes from the
//! start of the data block.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{TensorMap, UNet, UNetConfig, ARCHITECTURE};
use super::{EpsilonPredictor, NoiseSchedule, NormalizationSpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EPSW";
pub const VERSION: u32 = 1;
/// Agreement required between recorded and recomputed check outputs.
pub const CHECK_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    #[serde(flatten)]
    pub config: UNetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub t: usize,
    pub betas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckVector {
    pub input: Vec<f32>,
    pub t: usize,
    pub output: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub architecture: Architecture,
    pub tensors: Vec<TensorEntry>,
    pub schedule: ScheduleSpec,
    pub normalization: NormalizationSpec,
    #[serde(default)]
    pub check_vectors: Vec<CheckVector>,
    /// Free-form training metadata (seed, environment, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

/// Parsed container contents.
#[derive(Debug, Clone)]
pub struct WeightFile {
    pub manifest: Manifest,
    pub tensors: TensorMap,
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("truncated EPSW header".into()))
}

impl WeightFile {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an EPSW file".into()));
        }
        let version = read_u32(bytes, 4)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported EPSW version {version}")));
        }
        let len = read_u32(bytes, 8)? as usize;
        let manifest_bytes = bytes
            .get(12..12 + len)
            .ok_or_else(|| Error::Format("truncated EPSW manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(manifest_bytes)?;
        let data = &bytes[12 + len..];
        let mut tensors = TensorMap::new();
        for entry in &manifest.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Format(format!(
                    "tensor {} has dtype {}",
                    entry.name, entry.dtype
                )));
            }
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let raw = data
                .get(start..start + 4 * count)
                .ok_or_else(|| Error::Format(format!("tensor {} runs past the end of the file", entry.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors
                .insert(entry.name.clone(), (entry.shape.clone(), values))
                .is_some()
            {
                return Err(Error::Format(format!("duplicate tensor {}", entry.name)));
            }
        }
        Ok(Self { manifest, tensors })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Serialize, rewriting the tensor table from `tensors` in name order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut names: Vec<&String> = self.tensors.keys().collect();
        names.sort();
        let mut manifest = self.manifest.clone();
        manifest.tensors.clear();
        let mut data = Vec::new();
        for name in names {
            let (shape, values) = &self.tensors[name];
            if shape.iter().product::<usize>() != values.len() {
                return Err(Error::Format(format!("tensor {name} data does not match its shape")));
            }
            manifest.tensors.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                dtype: "f32".into(),
                offset: data.len() as u64,
            });
            for v in values {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(12 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), &self.to_bytes()?)
    }
}

/// Noise predictor backed by the serialized network.
#[derive(Debug, Clone)]
pub struct UnetPredictor {
    net: UNet,
    schedule: NoiseSchedule,
    normalization: NormalizationSpec,
    check_vectors: Vec<CheckVector>,
}

impl UnetPredictor {
    pub fn from_weights(file: WeightFile) -> Result<Self> {
        let m = file.manifest;
        if m.architecture.name != ARCHITECTURE {
            return Err(Error::Format(format!(
                "unknown architecture {:?}, expected {ARCHITECTURE:?}",
                m.architecture.name
            )));
        }
        if m.schedule.betas.len() != m.schedule.t {
            return Err(Error::Format(format!(
                "schedule lists {} betas for T = {}",
                m.schedule.betas.len(),
                m.schedule.t
            )));
        }
        m.normalization.validate()?;
        if m.normalization.n != m.architecture.config.image_size {
            return Err(Error::Format(format!(
                "normalization is for n = {} but the network takes {}",
                m.normalization.n, m.architecture.config.image_size
            )));
        }
        let schedule = NoiseSchedule::from_betas(m.schedule.betas)?;
        let net = UNet::from_tensors(m.architecture.config, file.tensors)?;
        Ok(Self {
            net,
            schedule,
            normalization: m.normalization,
            check_vectors: m.check_vectors,
        })
    }

    /// The training schedule recorded in the container.
    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn normalization(&self) -> &NormalizationSpec {
        &self.normalization
    }

    pub fn network(&self) -> &UNet {
        &self.net
    }

    /// Largest deviation over the recorded check vectors.
    pub fn check_deviation(&self) -> Result<f32> {
        let mut worst = 0.0f32;
        for cv in &self.check_vectors {
            if cv.t == 0 || cv.t > self.schedule.len() {
                return Err(Error::Format(format!("check vector step {} out of range", cv.t)));
            }
            let out = self.net.forward(&cv.input, cv.t)?;
            if out.len() != cv.output.len() {
                return Err(Error::shape(cv.output.len(), out.len()));
            }
            for (a, b) in out.iter().zip(&cv.output) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }

    pub fn check_vector_count(&self) -> usize {
        self.check_vectors.len()
    }
}

impl EpsilonPredictor for UnetPredictor {
    fn size(&self) -> usize {
        self.net.config().image_size
    }

    fn predict(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        if t == 0 || t > self.schedule.len() {
            return Err(Error::invalid(format!("step {t} outside 1..={}", self.schedule.len())));
        }
        let input: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        Ok(self.net.forward(&input, t)?.into_iter().map(f64::from).collect())
    }
}

/// Load a predictor and verify its recorded check vectors.
pub fn load_predictor(path: impl AsRef<Path>) -> Result<UnetPredictor> {
    let p = UnetPredictor::from_weights(WeightFile::read(path)?)?;
    let dev = p.check_deviation()?;
    if dev > CHECK_TOLERANCE {
        return Err(Error::Format(format!(
            "check vectors deviate by {dev:e} (tolerance {CHECK_TOLERANCE:e})"
        )));
    }
    Ok(p)
}

/// As [`load_predictor`], additionally requiring an `n × n` network.
pub fn load_predictor_for(path: impl AsRef<Path>, n: usize) -> Result<UnetPredictor> {
    let p = load_predictor(path)?;
    if p.size() != n {
        return Err(Error::shape(format!("{n}x{n} network"), format!("{0}x{0}", p.size())));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::default_schedule;

    fn tiny_file() -> WeightFile {
        let config = UNetConfig {
            base_channels: 4,
            channel_mults: vec![1, 2],
            groups: 2,
            image_size: 4,
        };
        let mut k = 0u32;
        let tensors: TensorMap = config
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let v = (0..len)
                    .map(|_| {
                        k += 1;
                        0.2 * ((k as f32) * 0.713).sin()
                    })
                    .collect();
                (name, (shape, v))
            })
            .collect();
        WeightFile {
            manifest: Manifest {
                architecture: Architecture {
                    name: ARCHITECTURE.into(),
                    config,
                },
                tensors: vec![],
                schedule: ScheduleSpec {
                    t: 1000,
                    betas: default_schedule().betas().to_vec(),
                },
                normalization: NormalizationSpec::identity(4),
                check_vectors: vec![],
                metadata: None,
            },
            tensors,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let f = tiny_file();
        let bytes = f.to_bytes().unwrap();
        let g = WeightFile::from_bytes(&bytes).unwrap();
        assert_eq!(g.tensors, f.tensors);
        assert_eq!(g.manifest.schedule, f.manifest.schedule);
        let p = UnetPredictor::from_weights(g).unwrap();
        assert_eq!(p.size(), 4);
        assert_eq!(p.schedule().len(), 1000);
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = tiny_file().to_bytes().unwrap();
        for cut in [0, 3, 7, 11, 12, 40, bytes.len() - 1] {
            assert!(WeightFile::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn bad_header() {
        let mut bytes = tiny_file().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(WeightFile::from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(WeightFile::from_bytes(&bytes).is_err());
    }

    #[test]
    fn check_vectors_gate_loading() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = tiny_file();
        let p = UnetPredictor::from_weights(f.clone()).unwrap();
        let input: Vec<f32> = (0..16).map(|k| k as f32 * 0.1).collect();
        let output = p.network().forward(&input, 17).unwrap();
        f.manifest.check_vectors = vec![CheckVector {
            input: input.clone(),
            t: 17,
            output: output.clone(),
        }];
        let good = dir.path().join("good.epsw");
        f.write(&good).unwrap();
        assert!(load_predictor(&good).is_ok());
        assert!(load_predictor_for(&good, 4).is_ok());
        assert!(load_predictor_for(&good, 8).is_err());

        f.manifest.check_vectors[0].output[3] += 1e-3;
        let bad = dir.path().join("bad.epsw");
        f.write(&bad).unwrap();
        assert!(load_predictor(&bad).is_err());
    }

    #[test]
    fn normalization_size_must_match() {
        let mut f = tiny_file();
        f.manifest.normalization.n = 8;
        assert!(UnetPredictor::from_weights(f).is_err());
    }
}
