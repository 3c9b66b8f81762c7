//! Pretrained VGG-19 backend over a portable ONNX graph.
//!
//! The model file must expose the five post-activation outputs named in its
//! manifest (default `relu1_1..relu5_1`). A JSON sidecar at `<model>.json`
//! can override output names and input normalization, so alternative weight
//! exports remain usable without code changes.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use tract_onnx::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Image};

use super::{FeaturePyramid, LayerTap};

type Plan = TypedSimplePlan<TypedModel>;

fn model_err(context: &str, e: impl std::fmt::Display) -> Error {
    Error::ModelLoad(format!("{context}: {e}"))
}

/// Input-normalization and output-naming contract of a model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    #[serde(default = "default_outputs")]
    pub outputs: Vec<String>,
    #[serde(default = "default_mean")]
    pub mean: [f32; 3],
    #[serde(default = "default_std")]
    pub std: [f32; 3],
    #[serde(default = "default_input_range")]
    pub input_range: String,
}

fn default_outputs() -> Vec<String> {
    LayerTap::ALL.iter().map(|t| t.name().to_string()).collect()
}

// Standard normalization for the reference VGG-19 weights.
fn default_mean() -> [f32; 3] {
    [0.485, 0.456, 0.406]
}

fn default_std() -> [f32; 3] {
    [0.229, 0.224, 0.225]
}

fn default_input_range() -> String {
    "unit".into()
}

impl Default for ModelManifest {
    fn default() -> Self {
        Self {
            outputs: default_outputs(),
            mean: default_mean(),
            std: default_std(),
            input_range: default_input_range(),
        }
    }
}

impl ModelManifest {
    /// Reads `<model>.json` when present, otherwise the defaults above.
    pub fn for_model(model_path: &Path) -> Result<Self> {
        let mut os: OsString = model_path.as_os_str().to_owned();
        os.push(".json");
        let sidecar = PathBuf::from(os);
        if !sidecar.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&sidecar)?;
        let manifest: ModelManifest = serde_json::from_str(&text)
            .map_err(|e| model_err("manifest parse", e))?;
        if manifest.outputs.len() != LayerTap::ALL.len() {
            return Err(Error::ModelLoad(format!(
                "manifest must name {} outputs, found {}",
                LayerTap::ALL.len(),
                manifest.outputs.len()
            )));
        }
        match manifest.input_range.as_str() {
            "unit" | "255" => {}
            other => {
                return Err(Error::ModelLoad(format!(
                    "unsupported input_range {other:?}"
                )))
            }
        }
        Ok(manifest)
    }

    fn range_scale(&self) -> f32 {
        if self.input_range == "255" {
            255.0
        } else {
            1.0
        }
    }
}

pub struct PretrainedVgg {
    path: PathBuf,
    manifest: ModelManifest,
    template: InferenceModel,
    /// Optimized plans keyed by input size; concretizing the graph for a new
    /// size is slow, running it is not.
    plans: Mutex<HashMap<(usize, usize), Arc<Plan>>>,
}

impl PretrainedVgg {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let manifest = ModelManifest::for_model(&path)?;
        let mut template = tract_onnx::onnx()
            .model_for_path(&path)
            .map_err(|e| model_err("onnx parse", e))?;
        template
            .set_output_names(&manifest.outputs)
            .map_err(|e| model_err("output selection", e))?;
        Ok(Self {
            path,
            manifest,
            template,
            plans: Mutex::new(HashMap::new()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    fn plan_for(&self, height: usize, width: usize) -> Result<Arc<Plan>> {
        if let Some(plan) = self.plans.lock().unwrap().get(&(height, width)) {
            return Ok(plan.clone());
        }
        let mut model = self.template.clone();
        model
            .set_input_fact(0, f32::fact([1, 3, height, width]).into())
            .map_err(|e| model_err("input fact", e))?;
        let plan = model
            .into_optimized()
            .map_err(|e| model_err("optimize", e))?
            .into_runnable()
            .map_err(|e| model_err("plan", e))?;
        let plan = Arc::new(plan);
        self.plans
            .lock()
            .unwrap()
            .insert((height, width), plan.clone());
        Ok(plan)
    }

    pub fn encode(&self, img: &Image, taps: &[LayerTap]) -> Result<FeaturePyramid> {
        let (h, w) = (img.height(), img.width());
        let scale = self.manifest.range_scale();
        let mut input = vec![0f32; 3 * h * w];
        for c in 0..3 {
            let mean = self.manifest.mean[c];
            let std = self.manifest.std[c];
            let src = img.channel(c);
            let dst = &mut input[c * h * w..(c + 1) * h * w];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v * scale - mean) / std;
            }
        }
        let tensor = Tensor::from_shape(&[1, 3, h, w], &input)
            .map_err(|e| model_err("input tensor", e))?;

        let plan = self.plan_for(h, w)?;
        let outputs = plan
            .run(tvec![tensor.into()])
            .map_err(|e| model_err("inference", e))?;

        let mut pairs = Vec::with_capacity(taps.len());
        for tap in taps {
            let idx = tap.index() as usize - 1;
            let view = outputs[idx]
                .to_array_view::<f32>()
                .map_err(|e| model_err("output dtype", e))?;
            let shape = view.shape();
            if shape.len() != 4 || shape[0] != 1 {
                return Err(Error::ModelLoad(format!(
                    "{tap} output has shape {shape:?}, expected (1, C, H, W)"
                )));
            }
            if shape[1] != tap.channels() {
                return Err(Error::ModelLoad(format!(
                    "{tap} output has {} channels, contract requires {}",
                    shape[1],
                    tap.channels()
                )));
            }
            let data: Vec<f32> = view.iter().copied().collect();
            pairs.push((
                *tap,
                FeatureMap::new(shape[1], shape[2], shape[3], data)?,
            ));
        }
        FeaturePyramid::new(pairs, (h, w))
    }
}
