//! Browser bindings: render a synthetic identity, defend it with a trained
//! defender checkpoint, and JPEG-compress the result.
//!
//! Images cross the boundary as row-major `Float32Array`s in `[-1, 1]`.

use std::path::Path;

use wasm_bindgen::prelude::*;

use rid_core::diffusion::ImageBatch;
use rid_core::harness::checkpoint::Bundle;
use rid_core::harness::dataset::{render, IdentityParams, Pose};
use rid_core::numerics::{Rng, Tensor};
use rid_core::postprocess::{jpeg_like, JpegConfig};
use rid_core::rid::{defend, DefenderNet};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn batch(pixels: &[f32], res: usize) -> Result<ImageBatch, JsError> {
    if pixels.len() != res * res {
        return Err(JsError::new(&format!(
            "expected {} pixels, got {}",
            res * res,
            pixels.len()
        )));
    }
    let t = Tensor::new(vec![1, 1, res, res], pixels.to_vec()).map_err(js_err)?;
    ImageBatch::new(t, vec![0]).map_err(js_err)
}

/// Identity `seed` under pose `pose_seed` at `res × res`.
#[wasm_bindgen]
pub fn render_identity(seed: u64, pose_seed: u64, res: usize) -> Vec<f32> {
    let id = IdentityParams::sample(&mut Rng::new(seed, 0));
    let pose = if pose_seed == 0 {
        Pose::NEUTRAL
    } else {
        Pose::sample(&mut Rng::new(pose_seed, 1))
    };
    render(&id, &pose, res)
}

/// A defender loaded from checkpoint bytes.
#[wasm_bindgen]
pub struct Defender {
    net: DefenderNet,
}

#[wasm_bindgen]
impl Defender {
    #[wasm_bindgen(constructor)]
    pub fn new(bytes: &[u8]) -> Result<Defender, JsError> {
        let b = Bundle::from_bytes(bytes, Path::new("upload")).map_err(js_err)?;
        Ok(Defender {
            net: DefenderNet::from_bundle(b).map_err(js_err)?,
        })
    }

    /// Side length the defender was trained for.
    pub fn res(&self) -> usize {
        self.net.arch.res
    }

    /// Budget in `[0, 1]` pixel units times 255.
    pub fn eps_255(&self) -> f32 {
        self.net.eps_budget / 2.0 * 255.0
    }

    /// Defended image, one forward pass.
    pub fn defend(&self, pixels: &[f32]) -> Result<Vec<f32>, JsError> {
        let x = batch(pixels, self.net.arch.res)?;
        let (_, y) = defend(&self.net, &x).map_err(js_err)?;
        Ok(y.images().data().to_vec())
    }
}

/// Block-DCT quantisation at `quality` in `[1, 100]`.
#[wasm_bindgen]
pub fn jpeg(pixels: &[f32], res: usize, quality: u8) -> Result<Vec<f32>, JsError> {
    let x = batch(pixels, res)?;
    let y = jpeg_like(&x, &JpegConfig { quality }).map_err(js_err)?;
    Ok(y.images().data().to_vec())
}
