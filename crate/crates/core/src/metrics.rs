//! Image quality and mask agreement metrics, and the evaluation report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Input(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n)
}

/// `−10·log10(MSE)` for unit dynamic range, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `w×h` plane.
fn filter(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luminance channels over every valid
/// 11×11 Gaussian window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let (x, y) = (a.luminance(), b.luminance());
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mu_x = filter(&x, w, h, &k);
    let mu_y = filter(&y, w, h, &k);
    let xx = filter(&prod(&x, &x), w, h, &k);
    let yy = filter(&prod(&y, &y), w, h, &k);
    let xy = filter(&prod(&x, &y), w, h, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// `|A ∩ B| / |A ∪ B|`, defined as 1 when both masks are empty.
pub fn mask_iou(predicted: &Mask, truth: &Mask) -> f64 {
    assert_eq!(
        (predicted.width, predicted.height),
        (truth.width, truth.height),
        "mask sizes differ"
    );
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in predicted.data.iter().zip(&truth.data) {
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: usize,
    /// Against the appearance-conditioned target.
    pub psnr: f64,
    pub ssim: f64,
    /// Against the unperturbed ground truth.
    pub psnr_clean: f64,
    pub ssim_clean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilityScore {
    pub id: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

impl Summary {
    fn of(v: &[f64]) -> Self {
        Self {
            mean: mean(v),
            median: median(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub images: Vec<ImageScore>,
    pub psnr: Summary,
    pub ssim: Summary,
    pub psnr_clean: Summary,
    pub ssim_clean: Summary,
    pub visibility: Vec<VisibilityScore>,
    pub visibility_iou: Summary,
    pub lpips: Option<f64>,
    pub notes: Vec<String>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn new(
        mode: impl Into<String>,
        images: Vec<ImageScore>,
        visibility: Vec<VisibilityScore>,
        config: serde_json::Value,
    ) -> Self {
        let col = |f: fn(&ImageScore) -> f64| images.iter().map(f).collect::<Vec<_>>();
        let ious: Vec<f64> = visibility.iter().map(|v| v.iou).collect();
        Self {
            mode: mode.into(),
            psnr: Summary::of(&col(|s| s.psnr)),
            ssim: Summary::of(&col(|s| s.ssim)),
            psnr_clean: Summary::of(&col(|s| s.psnr_clean)),
            ssim_clean: Summary::of(&col(|s| s.ssim_clean)),
            visibility_iou: Summary::of(&ious),
            images,
            visibility,
            lpips: None,
            notes: vec!["LPIPS not computed: it requires a pretrained network".into()],
            config,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One row: mode, mean PSNR, mean SSIM, mean clean PSNR, mean clean SSIM,
    /// median visibility IoU.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
        let mut s = String::from("mode,psnr,ssim,psnr_clean,ssim_clean,lpips,visibility_iou\n");
        let _ = writeln!(
            s,
            "{},{},{},{},{},,{}",
            self.mode,
            f(self.psnr.mean),
            f(self.ssim.mean),
            f(self.psnr_clean.mean),
            f(self.ssim_clean.mean),
            f(self.visibility_iou.median)
        );
        s
    }
}
