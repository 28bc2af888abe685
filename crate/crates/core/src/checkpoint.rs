//! Unified checkpoint: every object field, the scale network and the scene
//! bounds in one file.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, JSON header,
//! then the tensors listed in the header as little-endian values of their
//! declared dtype.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compositor::{render_view, RenderedView};
use crate::error::{Error, Result};
use crate::geometry::{Pose, ScaleBounds, ScaleCombination};
use crate::nn::{Dense, Mlp};
use crate::objectfield::{Aabb, FieldShape, RenderConfig, VmField, VmParams};
use crate::scalenet::ScaleMlp;
use crate::scenegen::SceneBundle;

pub const MAGIC: &[u8; 8] = b"OBJSCALE";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub section: String,
    pub name: String,
    pub dtype: Dtype,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub shape: FieldShape,
    pub aabb: Aabb,
    pub encode_directions: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub num_objects: usize,
    pub bounds: ScaleBounds,
    /// Scene object index of each checkpoint object; entry 0 is the anchor.
    pub order: Vec<usize>,
    pub samples_per_ray: usize,
    pub fields: Vec<FieldHeader>,
    pub scalenet_widths: Vec<usize>,
    pub tensors: Vec<TensorEntry>,
}

/// Trained scene model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub fields: Vec<VmField<f32>>,
    pub scalenet: ScaleMlp,
    pub bounds: ScaleBounds,
    pub order: Vec<usize>,
    /// Samples per ray used for composite rendering.
    pub samples_per_ray: usize,
}

fn mlp_tensor_names(prefix: &str, layers: usize) -> Vec<String> {
    (0..layers)
        .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
        .collect()
}

impl Checkpoint {
    pub fn num_objects(&self) -> usize {
        self.fields.len()
    }

    /// `bundle` (in scene order) permuted into this checkpoint's object order.
    pub fn ordered_bundle(&self, bundle: &SceneBundle) -> Result<SceneBundle> {
        if bundle.num_objects() != self.num_objects() {
            return Err(Error::Dimension {
                what: "scene objects",
                expected: self.num_objects(),
                got: bundle.num_objects(),
            });
        }
        Ok(bundle.reordered(&self.order))
    }

    /// Scales given either as the free values or with the anchor's leading 1.
    pub fn combination(&self, scales: &[f64]) -> Result<ScaleCombination> {
        let k = self.num_objects();
        let free = if scales.len() == k && k > 0 {
            if scales[0] != 1.0 {
                return Err(Error::Domain("the anchor scale must be 1".into()));
            }
            &scales[1..]
        } else if scales.len() + 1 == k {
            scales
        } else {
            return Err(Error::Dimension {
                what: "scales",
                expected: k - 1,
                got: scales.len(),
            });
        };
        ScaleCombination::from_free(free, &self.bounds)
    }

    /// Composite render config over the scene range.
    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            samples_per_ray: self.samples_per_ray,
            near: self.bounds.near_scene,
            far: self.bounds.far_scene,
            white_background: false,
            weight_threshold: 1e-4,
        }
    }

    /// Image with objects placed as at `frame` of `bundle` (checkpoint
    /// order), seen from the anchor camera of that frame or from `camera`
    /// (camera-to-anchor) when given.
    pub fn render_frame(
        &self,
        bundle: &SceneBundle,
        scales: &ScaleCombination,
        frame: usize,
        camera: Option<&Pose>,
        width: usize,
        height: usize,
    ) -> Result<RenderedView> {
        if frame >= bundle.num_frames() {
            return Err(Error::MissingFrame {
                frame,
                frames: bundle.num_frames(),
            });
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("image size must be positive".into()));
        }
        let poses: Vec<Pose> = bundle.poses.iter().map(|t| t[frame].clone()).collect();
        let camera = camera.unwrap_or(&poses[0]);
        let intr = bundle.intrinsics().resized(width, height);
        render_view(&self.fields, &poses, 0, camera, &intr, scales, &self.render_config())
    }

    fn header(&self) -> Header {
        let mut tensors = Vec::new();
        for (k, f) in self.fields.iter().enumerate() {
            for (name, t) in f.params().tensor_names().into_iter().zip(f.params().tensors()) {
                tensors.push(TensorEntry {
                    section: format!("field{k}"),
                    name,
                    dtype: Dtype::F32,
                    len: t.len(),
                });
            }
        }
        let names = mlp_tensor_names("mlp", self.scalenet.net.layers.len());
        for (name, t) in names.into_iter().zip(self.scalenet.net.tensors()) {
            tensors.push(TensorEntry {
                section: "scalenet".into(),
                name,
                dtype: Dtype::F64,
                len: t.len(),
            });
        }
        Header {
            num_objects: self.fields.len(),
            bounds: self.bounds.clone(),
            order: self.order.clone(),
            samples_per_ray: self.samples_per_ray,
            fields: self
                .fields
                .iter()
                .map(|f| FieldHeader {
                    shape: f.shape.clone(),
                    aabb: f.aabb,
                    encode_directions: f.encode_directions,
                })
                .collect(),
            scalenet_widths: self.scalenet.net.widths(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for f in &self.fields {
            for t in f.params().tensors() {
                for v in t {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        for t in self.scalenet.net.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut cursor = 20 + hlen;
        let expected: usize = header.tensors.iter().map(|t| t.len * t.dtype.size()).sum();
        if bytes.len() != cursor + expected {
            return Err(bad(format!(
                "expected {} tensor bytes, found {}",
                expected,
                bytes.len() - cursor
            )));
        }
        if header.fields.len() != header.num_objects || header.order.len() != header.num_objects {
            return Err(bad("object count mismatch in header".into()));
        }
        let mut entries = header.tensors.iter();
        let mut fields = Vec::with_capacity(header.num_objects);
        for (k, fh) in header.fields.iter().enumerate() {
            let mut params = VmParams::<f32>::zeros(&fh.shape);
            let names = params.tensor_names();
            for (dst, name) in params.tensors_mut().into_iter().zip(names) {
                let e = entries.next().ok_or_else(|| bad("missing tensor entries".into()))?;
                if e.section != format!("field{k}") || e.name != name || e.len != dst.len() || e.dtype != Dtype::F32 {
                    return Err(bad(format!("unexpected tensor {}/{}", e.section, e.name)));
                }
                for v in dst.iter_mut() {
                    *v = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().expect("4 bytes"));
                    cursor += 4;
                }
            }
            let mut f = VmField::from_params(fh.shape.clone(), fh.aabb, params);
            f.encode_directions = fh.encode_directions;
            fields.push(f);
        }
        let mut net = Mlp::<f64> {
            layers: header
                .scalenet_widths
                .windows(2)
                .map(|w| Dense::zeros(w[0], w[1]))
                .collect(),
        };
        for dst in net.tensors_mut() {
            let e = entries.next().ok_or_else(|| bad("missing scalenet tensors".into()))?;
            if e.section != "scalenet" || e.len != dst.len() || e.dtype != Dtype::F64 {
                return Err(bad(format!("unexpected tensor {}/{}", e.section, e.name)));
            }
            for v in dst.iter_mut() {
                *v = f64::from_le_bytes(bytes[cursor..cursor + 8].try_into().expect("8 bytes"));
                cursor += 8;
            }
        }
        let scalenet = ScaleMlp { net };
        if scalenet.num_objects() != header.num_objects {
            return Err(bad("scale network input does not match object count".into()));
        }
        header.bounds.validate()?;
        Ok(Self {
            fields,
            scalenet,
            bounds: header.bounds,
            order: header.order,
            samples_per_ray: header.samples_per_ray,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
