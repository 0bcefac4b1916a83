//! Architecture JSON and flat parameter blobs.
//!
//! A checkpoint directory holds `arch.json` ([`ArchDoc`]), `params.bin`
//! (little-endian values, concatenated in manifest order) and `params.json`
//! (the shape manifest).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, LayerSpec, ModelGraph};
use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

pub const ARCH_FORMAT: &str = "chanprune-arch/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchLayer {
    #[serde(flatten)]
    pub spec: LayerSpec,
    /// Number of mask entries (output units) for prunable layers.
    pub mask_len: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchDoc {
    pub format: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<ArchLayer>,
}

impl ArchDoc {
    pub fn of<T: Real>(model: &ModelGraph<T>) -> Self {
        ArchDoc {
            format: ARCH_FORMAT.to_string(),
            input_shape: model.input_shape,
            num_classes: model.num_classes,
            layers: model.specs().into_iter().map(|spec| ArchLayer { mask_len: spec.mask_len(), spec }).collect(),
        }
    }

    /// Zero-initialized model with this architecture.
    pub fn build<T: Real>(&self) -> Result<ModelGraph<T>> {
        if self.format != ARCH_FORMAT {
            return Err(Error::invalid(format!("unknown architecture format {:?}", self.format)));
        }
        let specs: Vec<LayerSpec> = self.layers.iter().map(|l| l.spec.clone()).collect();
        for (i, l) in self.layers.iter().enumerate() {
            if l.mask_len != l.spec.mask_len() {
                return Err(Error::invalid(format!("layer {i}: mask_len {:?} disagrees with spec", l.mask_len)));
            }
        }
        let m = ModelGraph::from_specs(self.input_shape, &specs)?;
        if m.num_classes != self.num_classes {
            return Err(Error::shape(format!("architecture yields {} classes, document says {}", m.num_classes, self.num_classes)));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamManifestEntry {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub dtype: String,
    pub entries: Vec<ParamManifestEntry>,
}

/// Every stored tensor of a layer: trainable parameters then BN running stats.
fn stored<T: Real>(layer: &Layer<T>) -> Vec<(&'static str, Vec<usize>, &[T])> {
    let mut out: Vec<(&'static str, Vec<usize>, &[T])> = layer
        .param_names()
        .iter()
        .zip(layer.params())
        .map(|(&n, t)| (n, t.shape().to_vec(), t.data()))
        .collect();
    if let Layer::BatchNorm(b) = layer {
        out.push(("running_mean", vec![b.running_mean.len()], &b.running_mean));
        out.push(("running_var", vec![b.running_var.len()], &b.running_var));
    }
    out
}

/// Serializes all parameters into a flat blob plus manifest.
pub fn write_params<T: Real>(model: &ModelGraph<T>) -> (Vec<u8>, ParamManifest) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        for (name, shape, data) in stored(layer) {
            entries.push(ParamManifestEntry { layer: i, name: name.to_string(), shape, offset: blob.len() });
            for &v in data {
                v.to_le_bytes_vec(&mut blob);
            }
        }
    }
    (blob, ParamManifest { dtype: T::NAME.to_string(), entries })
}

/// Fills `model`'s parameters from a blob written by [`write_params`].
pub fn read_params<T: Real>(model: &mut ModelGraph<T>, blob: &[u8], manifest: &ParamManifest) -> Result<()> {
    let width = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::invalid(format!("unsupported dtype {other}"))),
    };
    let decode = |bytes: &[u8]| -> T {
        if width == 4 {
            T::lit(f32::from_le_bytes(bytes.try_into().unwrap()) as f64)
        } else {
            T::lit(f64::from_le_bytes(bytes.try_into().unwrap()))
        }
    };
    let mut it = manifest.entries.iter();
    for (i, layer) in model.layers.iter_mut().enumerate() {
        let names: Vec<(&'static str, Vec<usize>)> = stored(layer).into_iter().map(|(n, s, _)| (n, s)).collect();
        for (name, shape) in names {
            let e = it.next().ok_or_else(|| Error::invalid(format!("manifest ends before layer {i} {name}")))?;
            if e.layer != i || e.name != name || e.shape != shape {
                return Err(Error::shape(format!("manifest entry {e:?} does not match layer {i} {name} {shape:?}")));
            }
            let n: usize = shape.iter().product();
            let end = e.offset + n * width;
            let bytes = blob.get(e.offset..end).ok_or_else(|| Error::invalid(format!("blob too short for layer {i} {name}")))?;
            let vals: Vec<T> = bytes.chunks_exact(width).map(decode).collect();
            match (layer as &mut Layer<T>, name) {
                (Layer::BatchNorm(b), "running_mean") => b.running_mean = vals,
                (Layer::BatchNorm(b), "running_var") => b.running_var = vals,
                (l, _) => {
                    let idx = l.param_names().iter().position(|&p| p == name).expect("known name");
                    *l.params_mut()[idx] = Tensor::new(shape, vals)?;
                }
            }
        }
    }
    if it.next().is_some() {
        return Err(Error::invalid("manifest has extra entries"));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `arch.json`, `params.bin` and `params.json` into `dir`.
/// Returns the parameter blob size in bytes.
pub fn save_checkpoint<T: Real>(model: &ModelGraph<T>, dir: &Path) -> Result<u64> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("arch.json"), serde_json::to_string_pretty(&ArchDoc::of(model))?.as_bytes())?;
    let (blob, manifest) = write_params(model);
    write_file(&dir.join("params.bin"), &blob)?;
    write_file(&dir.join("params.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(blob.len() as u64)
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<ModelGraph<T>> {
    let arch: ArchDoc = serde_json::from_slice(&read_file(&dir.join("arch.json"))?)?;
    let manifest: ParamManifest = serde_json::from_slice(&read_file(&dir.join("params.json"))?)?;
    let blob = read_file(&dir.join("params.bin"))?;
    let mut model = arch.build()?;
    read_params(&mut model, &blob, &manifest)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{he_init, tiny_vgg};

    #[test]
    fn checkpoint_round_trip() {
        let mut m = tiny_vgg::<f32>(10, 0.125).unwrap();
        he_init(&mut m, 9);
        if let Layer::BatchNorm(b) = &mut m.layers[1] {
            b.running_mean[0] = 0.25;
        }
        let dir = tempfile::tempdir().unwrap();
        let bytes = save_checkpoint(&m, dir.path()).unwrap();
        let stats: usize = m.layers.iter().map(|l| match l {
            Layer::BatchNorm(b) => 2 * b.running_mean.len(),
            _ => 0,
        }).sum();
        assert_eq!(bytes as usize, 4 * (m.param_count() + stats));
        let back: ModelGraph<f32> = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);

        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("arch.json")).unwrap()).unwrap();
        assert_eq!(json["layers"][0]["kind"], "conv");
        assert_eq!(json["layers"][0]["mask_len"], 8);
    }

    #[test]
    fn mismatched_manifest_is_rejected() {
        let m = tiny_vgg::<f32>(10, 0.125).unwrap();
        let (blob, mut manifest) = write_params(&m);
        manifest.entries[0].shape = vec![1];
        let mut target = m.clone();
        assert!(read_params(&mut target, &blob, &manifest).is_err());
        let (_, manifest) = write_params(&m);
        assert!(read_params(&mut target, &blob[..10], &manifest).is_err());
    }
}
