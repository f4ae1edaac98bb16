//! The serialized artifact format: raw little-endian fp32 blobs with a fixed
//! 32-byte header, plus a JSON manifest carrying the component inventory,
//! checksums, and the fully resolved run configuration.
//!
//! Layout of a bundle directory:
//!
//! ```text
//! bundle/
//!   manifest.json     deterministic: inventory, checksums, config echo, seeds
//!   attrs.json        volatile: timestamp, hardware, wall-clock
//!   priors_mu.bin     [C, LPC, d]          (distributional mode)
//!   priors_logvar.bin [C, LPC, d]          (distributional mode)
//!   prototypes.bin    [C, LPC, d]          (fixed mode: means only)
//!   decoder.bin       flat parameter + running-stat vector
//!   soft_labels.bin   [C, LPC, C_local]
//! ```

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

use crate::data::PreprocStats;
use crate::decoder::{DecoderParams, DecoderSpec};
use crate::error::{Error, Result};
use crate::latent::LatentPriorSet;
use crate::util::hardware_descriptor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DSTLTNSR";
const DTYPE_F32: u32 = 1;

// ---------------------------------------------------------------------------
// Blob format
// ---------------------------------------------------------------------------

/// Write a tensor blob: 32-byte header (magic, dtype, rank, dims), then raw
/// little-endian f32 payload.
pub fn write_blob(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    if shape.len() > 4 {
        return Err(Error::Shape(format!("blob rank {} exceeds 4", shape.len())));
    }
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::Shape(format!(
            "shape {:?} wants {count} elements, got {}",
            shape,
            data.len()
        )));
    }
    let mut header = Vec::with_capacity(32);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&DTYPE_F32.to_le_bytes());
    header.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for i in 0..4 {
        let d = shape.get(i).copied().unwrap_or(0) as u32;
        header.extend_from_slice(&d.to_le_bytes());
    }
    debug_assert_eq!(header.len(), 32);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&header).map_err(|e| Error::io(path, e))?;
    let mut payload = Vec::with_capacity(4 * data.len());
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&payload).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a tensor blob written by [`write_blob`].
pub fn read_blob(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    if buf.len() < 32 || &buf[..8] != MAGIC {
        return Err(Error::Corruption {
            component: name,
            msg: "bad magic or truncated header".into(),
        });
    }
    let dtype = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if dtype != DTYPE_F32 {
        return Err(Error::Corruption {
            component: name,
            msg: format!("unknown dtype code {dtype}"),
        });
    }
    let rank = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    if rank > 4 {
        return Err(Error::Corruption { component: name, msg: format!("rank {rank} exceeds 4") });
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 16 + 4 * i;
        shape.push(u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize);
    }
    let count: usize = shape.iter().product();
    let payload = &buf[32..];
    if payload.len() != 4 * count {
        return Err(Error::Corruption {
            component: name,
            msg: format!("payload {} bytes, header promises {}", payload.len(), 4 * count),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&buf);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

// ---------------------------------------------------------------------------
// Bundle types
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepresentationMode {
    Distributional,
    Fixed,
}

/// Reference to the preprocessing applied to the source dataset: enough to
/// invert channel standardization anywhere, and to recompute the ZCA
/// transform from the dataset root when one was used (the d x d matrix itself
/// is never shipped inside a bundle).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreprocRef {
    pub dataset: String,
    pub per_channel_mean: Vec<f64>,
    pub per_channel_std: Vec<f64>,
    pub zca_epsilon: Option<f64>,
}

impl PreprocRef {
    pub fn from_stats(dataset: &str, stats: &PreprocStats) -> Self {
        PreprocRef {
            dataset: dataset.to_string(),
            per_channel_mean: stats.per_channel_mean.clone(),
            per_channel_std: stats.per_channel_std.clone(),
            zca_epsilon: stats.zca_epsilon,
        }
    }

    pub fn to_stats(&self) -> PreprocStats {
        PreprocStats {
            per_channel_mean: self.per_channel_mean.clone(),
            per_channel_std: self.per_channel_std.clone(),
            zca_matrix: None,
            zca_mean: None,
            zca_epsilon: self.zca_epsilon,
        }
    }
}

/// Deterministic run metadata embedded in the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub mode: RepresentationMode,
    /// Global class ids this bundle covers (sorted).
    pub task_classes: Vec<usize>,
    pub image_shape: (usize, usize, usize),
    pub seed: u64,
    pub alpha_final: f64,
    pub steps_run: usize,
    pub init_var0: f64,
    /// Fully resolved configuration echo.
    pub config: serde_json::Value,
}

/// The complete distilled artifact.
#[derive(Clone, Debug)]
pub struct DistilledBundle {
    pub priors: LatentPriorSet,
    pub decoder: DecoderParams,
    /// [C, LPC, C_local]; rows are probability vectors over the local classes.
    pub soft_labels: ArrayD<f64>,
    pub preproc: PreprocRef,
    pub meta: RunMeta,
}

impl DistilledBundle {
    pub fn class_count(&self) -> usize {
        self.meta.task_classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.priors.validate()?;
        if self.priors.class_ids != self.meta.task_classes {
            return Err(Error::Config(
                "prior class ids disagree with manifest task classes".into(),
            ));
        }
        let c = self.class_count();
        let want = [c, self.priors.priors_per_class, c];
        if self.soft_labels.shape() != want {
            return Err(Error::Shape(format!(
                "soft labels must be {:?}, got {:?}",
                want,
                self.soft_labels.shape()
            )));
        }
        let flat = self
            .soft_labels
            .view()
            .into_shape_with_order((c * self.priors.priors_per_class, c))
            .expect("soft label flatten");
        for row in flat.rows() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-5 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::Numeric(format!(
                    "soft label row off the simplex (sum {s})"
                )));
            }
        }
        if self.decoder.spec.output_shape != self.meta.image_shape {
            return Err(Error::Shape(
                "decoder output shape disagrees with manifest image shape".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComponentEntry {
    pub name: String,
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Payload bytes (file size minus the 32-byte header).
    pub byte_len: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentShape {
    pub priors_per_class: usize,
    pub latent_dim: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub meta: RunMeta,
    pub latent: LatentShape,
    pub decoder_spec: DecoderSpec,
    pub preproc: PreprocRef,
    pub components: Vec<ComponentEntry>,
}

/// Volatile sidecar: excluded from the bit-identical manifest contract.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleAttrs {
    pub created_unix: u64,
    pub hardware: String,
    pub wallclock_minutes: f64,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ATTRS_FILE: &str = "attrs.json";

fn component(dir: &Path, name: &str, file: &str, shape: &[usize]) -> Result<ComponentEntry> {
    let path = dir.join(file);
    let len = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
    Ok(ComponentEntry {
        name: name.to_string(),
        file: file.to_string(),
        dtype: "f32".to_string(),
        shape: shape.to_vec(),
        byte_len: len - 32,
        sha256: sha256_hex(&path)?,
    })
}

/// Serialize a bundle into `dir`, returning the manifest.
pub fn serialize_bundle(
    bundle: &DistilledBundle,
    dir: &Path,
    wallclock_minutes: f64,
) -> Result<BundleManifest> {
    bundle.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = &bundle.priors;
    let c = p.class_count();
    let prior_shape = [c, p.priors_per_class, p.latent_dim];

    let mut components = Vec::new();
    match bundle.meta.mode {
        RepresentationMode::Distributional => {
            write_blob(&dir.join("priors_mu.bin"), &prior_shape, &tof32(&p.mu))?;
            write_blob(&dir.join("priors_logvar.bin"), &prior_shape, &tof32(&p.log_var))?;
            components.push(component(dir, "priors", "priors_mu.bin", &prior_shape)?);
            components.push(component(dir, "priors", "priors_logvar.bin", &prior_shape)?);
        }
        RepresentationMode::Fixed => {
            write_blob(&dir.join("prototypes.bin"), &prior_shape, &tof32(&p.mu))?;
            components.push(component(dir, "prototypes", "prototypes.bin", &prior_shape)?);
        }
    }

    let dec_flat = bundle.decoder.flatten();
    write_blob(&dir.join("decoder.bin"), &[dec_flat.len()], &dec_flat)?;
    components.push(component(dir, "decoder", "decoder.bin", &[dec_flat.len()])?);

    let sl_shape = bundle.soft_labels.shape().to_vec();
    write_blob(&dir.join("soft_labels.bin"), &sl_shape, &tof32(&bundle.soft_labels))?;
    components.push(component(dir, "soft_labels", "soft_labels.bin", &sl_shape)?);

    let manifest = BundleManifest {
        format_version: FORMAT_VERSION,
        meta: bundle.meta.clone(),
        latent: LatentShape {
            priors_per_class: p.priors_per_class,
            latent_dim: p.latent_dim,
        },
        decoder_spec: bundle.decoder.spec.clone(),
        preproc: bundle.preproc.clone(),
        components,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    std::fs::write(dir.join(MANIFEST_FILE), manifest_json)
        .map_err(|e| Error::io(dir.join(MANIFEST_FILE), e))?;

    let attrs = BundleAttrs {
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        hardware: hardware_descriptor(),
        wallclock_minutes,
    };
    std::fs::write(
        dir.join(ATTRS_FILE),
        serde_json::to_string_pretty(&attrs).expect("attrs serialization"),
    )
    .map_err(|e| Error::io(dir.join(ATTRS_FILE), e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: BundleManifest = serde_json::from_str(&text).map_err(|e| Error::Corruption {
        component: MANIFEST_FILE.into(),
        msg: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version { found: manifest.format_version, expected: FORMAT_VERSION });
    }
    Ok(manifest)
}

/// Verify every component checksum in `dir` against the manifest.
pub fn verify_components(dir: &Path, manifest: &BundleManifest) -> Result<()> {
    for entry in &manifest.components {
        let path = dir.join(&entry.file);
        let got = sha256_hex(&path)?;
        if got != entry.sha256 {
            return Err(Error::Corruption {
                component: entry.name.clone(),
                msg: format!("checksum mismatch for {}", entry.file),
            });
        }
    }
    Ok(())
}

/// Load a bundle from `dir`, verifying version and checksums.
pub fn deserialize_bundle(dir: &Path) -> Result<DistilledBundle> {
    let manifest = read_manifest(dir)?;
    verify_components(dir, &manifest)?;

    let (mu, log_var) = match manifest.meta.mode {
        RepresentationMode::Distributional => {
            let (mshape, mdata) = read_blob(&dir.join("priors_mu.bin"))?;
            let (lshape, ldata) = read_blob(&dir.join("priors_logvar.bin"))?;
            if mshape != lshape {
                return Err(Error::Corruption {
                    component: "priors".into(),
                    msg: "mu and log_var shapes differ".into(),
                });
            }
            (fromf32(&mshape, &mdata), fromf32(&lshape, &ldata))
        }
        RepresentationMode::Fixed => {
            let (mshape, mdata) = read_blob(&dir.join("prototypes.bin"))?;
            let mu = fromf32(&mshape, &mdata);
            let lv = ArrayD::from_elem(IxDyn(&mshape), manifest.meta.init_var0.ln());
            (mu, lv)
        }
    };
    let priors = LatentPriorSet {
        class_ids: manifest.meta.task_classes.clone(),
        priors_per_class: manifest.latent.priors_per_class,
        latent_dim: manifest.latent.latent_dim,
        mu,
        log_var,
    };
    let (_, dec_data) = read_blob(&dir.join("decoder.bin"))?;
    let decoder = DecoderParams::unflatten(&manifest.decoder_spec, &dec_data)?;
    let (sl_shape, sl_data) = read_blob(&dir.join("soft_labels.bin"))?;
    let soft_labels = fromf32(&sl_shape, &sl_data);

    let bundle = DistilledBundle {
        priors,
        decoder,
        soft_labels,
        preproc: manifest.preproc.clone(),
        meta: manifest.meta.clone(),
    };
    bundle.validate()?;
    Ok(bundle)
}

fn tof32(a: &ArrayD<f64>) -> Vec<f32> {
    a.iter().map(|&v| v as f32).collect()
}

fn fromf32(shape: &[usize], data: &[f32]) -> ArrayD<f64> {
    crate::util::from_f32(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{build_decoder, DecoderSpec};
    use crate::latent::{init_priors, InitConfig};

    fn toy_bundle() -> DistilledBundle {
        let priors = init_priors(&[0, 1], 2, 4, InitConfig::default(), 3).unwrap();
        let spec = DecoderSpec::custom(4, 1, 8, (8, 8, 3)).unwrap();
        let decoder = build_decoder(&spec, 4).unwrap();
        let soft_labels = ArrayD::from_elem(IxDyn(&[2, 2, 2]), 0.5);
        DistilledBundle {
            priors,
            decoder,
            soft_labels,
            preproc: PreprocRef {
                dataset: "desk2".into(),
                per_channel_mean: vec![0.0; 3],
                per_channel_std: vec![1.0; 3],
                zca_epsilon: None,
            },
            meta: RunMeta {
                mode: RepresentationMode::Distributional,
                task_classes: vec![0, 1],
                image_shape: (8, 8, 3),
                seed: 9,
                alpha_final: 0.02,
                steps_run: 5,
                init_var0: 1.0,
                config: serde_json::json!({"toy": true}),
            },
        }
    }

    #[test]
    fn blob_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_blob(&path, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 32 + 24); // header + 6 f32
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 3);
        let (shape, data) = read_blob(&path).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn bundle_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = toy_bundle();
        serialize_bundle(&b, dir.path(), 0.1).unwrap();
        let b2 = deserialize_bundle(dir.path()).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        serialize_bundle(&b2, dir2.path(), 0.2).unwrap();
        for f in ["priors_mu.bin", "priors_logvar.bin", "decoder.bin", "soft_labels.bin"] {
            let a = std::fs::read(dir.path().join(f)).unwrap();
            let c = std::fs::read(dir2.path().join(f)).unwrap();
            assert_eq!(a, c, "{f} not bit-identical");
        }
        let m1 = std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let m2 = std::fs::read(dir2.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m1, m2, "deterministic manifest differs");
    }

    #[test]
    fn corrupted_blob_is_detected_with_component_name() {
        let dir = tempfile::tempdir().unwrap();
        let b = toy_bundle();
        serialize_bundle(&b, dir.path(), 0.0).unwrap();
        let path = dir.path().join("decoder.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        match deserialize_bundle(dir.path()) {
            Err(Error::Corruption { component, .. }) => assert_eq!(component, "decoder"),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let b = toy_bundle();
        serialize_bundle(&b, dir.path(), 0.0).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        let text = text.replace("\"format_version\": 1", "\"format_version\": 9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            deserialize_bundle(dir.path()),
            Err(Error::Version { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn soft_label_simplex_enforced_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = toy_bundle();
        b.soft_labels[[0, 0, 0]] = 0.9; // row sums to 1.4
        assert!(matches!(
            serialize_bundle(&b, dir.path(), 0.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn fixed_mode_stores_prototypes_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = toy_bundle();
        b.meta.mode = RepresentationMode::Fixed;
        serialize_bundle(&b, dir.path(), 0.0).unwrap();
        assert!(dir.path().join("prototypes.bin").exists());
        assert!(!dir.path().join("priors_mu.bin").exists());
        let b2 = deserialize_bundle(dir.path()).unwrap();
        let mu32: Vec<f32> = b.priors.mu.iter().map(|&v| v as f32).collect();
        let mu32b: Vec<f32> = b2.priors.mu.iter().map(|&v| v as f32).collect();
        assert_eq!(mu32, mu32b);
        assert!(b2.priors.log_var.iter().all(|&v| v == 0.0)); // ln(var0 = 1)
    }
}
