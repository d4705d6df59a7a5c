//! Inference with trained parameters.

use super::{Checkpoint, Mode, ModelConfig};
use crate::appearance::{encode_appearance, AppearanceVector};
use crate::cameras::{CameraIntrinsics, CameraPose, SceneBounds};
use crate::datagen::Dataset;
use crate::diffcore::ParameterSet;
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, Image, Mask};
use crate::metrics::{mask_iou, psnr, ssim, EvalReport, ImageScore, VisibilityScore};
use crate::occlusion;
use crate::renderer::{render_image, Sampling};

/// Trained parameters with what is needed to render them.
#[derive(Clone, Debug)]
pub struct Model {
    pub mode: Mode,
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub samples_per_ray: usize,
    pub bounds: SceneBounds,
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Self {
            mode: ckpt.config.mode,
            config: ckpt.config.model.clone(),
            params: ckpt.params.clone(),
            samples_per_ray: ckpt.config.samples_per_ray,
            bounds: ckpt.config.bounds,
        }
    }

    pub fn zero_appearance(&self) -> AppearanceVector {
        AppearanceVector::zeros(self.config.field.appearance_dim)
    }

    /// Encoded appearance of `image`; modes without an encoder always
    /// render with the zero vector.
    pub fn appearance(&self, image: &Image) -> Result<AppearanceVector> {
        if self.mode.uses_appearance() {
            encode_appearance(&self.params, &self.config.encoder, image)
        } else {
            Ok(self.zero_appearance())
        }
    }

    /// Deterministic render at bin midpoints.
    pub fn render(
        &self,
        intr: &CameraIntrinsics,
        pose: &CameraPose,
        appearance: &AppearanceVector,
    ) -> Result<Image> {
        if appearance.dim() != self.config.field.appearance_dim {
            return Err(Error::Input(format!(
                "appearance vector has {} components, model expects {}",
                appearance.dim(),
                self.config.field.appearance_dim
            )));
        }
        render_image(
            &self.params,
            &self.config.field,
            intr,
            pose,
            appearance.as_slice(),
            self.samples_per_ray,
            Sampling::Midpoints,
            &self.bounds,
        )
    }

    /// Visibility of every pixel of training image `image_id`.
    pub fn visibility_map(
        &self,
        image_id: usize,
        width: usize,
        height: usize,
    ) -> Result<GrayImage> {
        if !self.mode.uses_visibility() {
            return Err(Error::Input(format!(
                "{} mode has no visibility field",
                self.mode
            )));
        }
        occlusion::visibility_map(
            &self.params,
            &self.config.visibility,
            image_id,
            width,
            height,
        )
    }

    /// Renders every test view and scores it.
    ///
    /// Each view is conditioned on the appearance of its perturbed variant
    /// and compared with that variant (`psnr`, `ssim`) and with the clean
    /// ground truth (`psnr_clean`, `ssim_clean`). In visibility modes,
    /// pixels with `M < 0.5` are compared with each training image's
    /// occluder mask.
    pub fn evaluate(
        &self,
        dataset: &Dataset,
        config: serde_json::Value,
    ) -> Result<(EvalReport, Vec<Image>)> {
        let intr = &dataset.intrinsics;
        let mut scores = Vec::with_capacity(dataset.test.len());
        let mut renders = Vec::with_capacity(dataset.test.len());
        for view in &dataset.test {
            let app = self.appearance(&view.image)?;
            let img = self.render(intr, &view.pose, &app)?;
            scores.push(ImageScore {
                id: view.id,
                psnr: psnr(&img, &view.image)?,
                ssim: ssim(&img, &view.image)?,
                psnr_clean: psnr(&img, &view.clean)?,
                ssim_clean: ssim(&img, &view.clean)?,
            });
            renders.push(img);
        }
        let mut visibility = Vec::new();
        if self.mode.uses_visibility() {
            let (w, h) = (intr.width as usize, intr.height as usize);
            for (i, view) in dataset.train.iter().enumerate() {
                let Some(truth) = &view.mask else { continue };
                let map = self.visibility_map(i, w, h)?;
                visibility.push(VisibilityScore {
                    id: view.id,
                    iou: mask_iou(&occluded(&map), truth),
                });
            }
        }
        Ok((
            EvalReport::new(self.mode.as_str(), scores, visibility, config),
            renders,
        ))
    }
}

/// Pixels the visibility map assigns to occluders (`M < 0.5`).
pub fn occluded(map: &GrayImage) -> Mask {
    Mask {
        width: map.width,
        height: map.height,
        data: map.data.iter().map(|&m| m < 0.5).collect(),
    }
}
