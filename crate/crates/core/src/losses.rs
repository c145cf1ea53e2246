//! Training objectives: SSIM-based depth distillation, masked multiclass
//! cross-entropy, and their unweighted sum.
//!
//! All losses are built from differentiable tensor ops and work in any
//! float dtype, so gradient checks can run in f64.

use candle_core::{DType, Device, Tensor, D};

use crate::data::{LabelMask, IGNORE_INDEX};
use crate::depth::{DepthPyramid, PseudoLabelPyramid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    /// Odd Gaussian window side.
    pub window: usize,
    pub sigma: f64,
    pub dynamic_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            dynamic_range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimParams {
    pub fn with_window(window: usize) -> Self {
        Self {
            window,
            ..Self::default()
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "SSIM window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.sigma > 0.0 && self.c1() > 0.0 && self.c2() > 0.0) {
            return Err(Error::Config("SSIM sigma and constants must be positive".into()));
        }
        Ok(())
    }

    /// Normalised 1-D Gaussian taps.
    pub fn gaussian_taps(&self) -> Vec<f64> {
        let c = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Reshapes (..., H, W) to (N, 1, H, W).
fn as_maps(x: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() < 2 {
        return Err(Error::Input(format!("SSIM needs a 2-D map, got shape {dims:?}")));
    }
    let h = dims[dims.len() - 2];
    let w = dims[dims.len() - 1];
    let n: usize = dims[..dims.len() - 2].iter().product();
    Ok(x.reshape((n, 1, h, w))?)
}

fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let s = x.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::Input(format!("{what} contains NaN or infinite values")));
    }
    Ok(())
}

/// Mean SSIM over all valid (unpadded) Gaussian windows and all maps.
/// Falls back to a single global window when the map is smaller than the
/// window. Returns a scalar tensor.
pub fn ssim(x: &Tensor, y: &Tensor, p: &SsimParams) -> Result<Tensor> {
    p.validate()?;
    if x.dims() != y.dims() {
        return Err(Error::Input(format!(
            "SSIM shape mismatch: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    ensure_finite(x, "SSIM input X")?;
    ensure_finite(y, "SSIM input Y")?;
    let x = as_maps(x)?;
    let y = as_maps(y)?;
    let (n, _, h, w) = x.dims4()?;
    let (c1, c2) = (p.c1(), p.c2());

    let stacked = Tensor::cat(&[&x, &y, &x.sqr()?, &y.sqr()?, &(&x * &y)?], 0)?;
    let filtered = if p.window > h || p.window > w {
        stacked.mean_keepdim((2, 3))?
    } else {
        let taps = p.gaussian_taps();
        let k = p.window;
        let row = Tensor::from_vec(taps.clone(), (1, 1, 1, k), &Device::Cpu)?.to_dtype(x.dtype())?;
        let col = Tensor::from_vec(taps, (1, 1, k, 1), &Device::Cpu)?.to_dtype(x.dtype())?;
        stacked.conv2d(&row, 0, 1, 1, 1)?.conv2d(&col, 0, 1, 1, 1)?
    };
    let mu_x = filtered.narrow(0, 0, n)?;
    let mu_y = filtered.narrow(0, n, n)?;
    let e_xx = filtered.narrow(0, 2 * n, n)?;
    let e_yy = filtered.narrow(0, 3 * n, n)?;
    let e_xy = filtered.narrow(0, 4 * n, n)?;

    let mu_xy = (&mu_x * &mu_y)?;
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let var_x = (e_xx - &mu_xx)?;
    let var_y = (e_yy - &mu_yy)?;
    let cov = (e_xy - &mu_xy)?;

    let num = (((mu_xy * 2.0)? + c1)? * ((cov * 2.0)? + c2)?)?;
    let den = (((mu_xx + mu_yy)? + c1)? * ((var_x + var_y)? + c2)?)?;
    Ok((num / den)?.mean_all()?)
}

pub fn ssim_value(x: &Tensor, y: &Tensor, p: &SsimParams) -> Result<f64> {
    Ok(ssim(x, y, p)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Batches per-tile pseudo-label pyramids into three (B, 1, h, w) targets.
pub fn pseudo_label_targets(labels: &[PseudoLabelPyramid], dtype: DType) -> Result<Vec<Tensor>> {
    if labels.is_empty() {
        return Err(Error::Input("no pseudo-labels in batch".into()));
    }
    let scales = labels[0].maps.len();
    (0..scales)
        .map(|s| {
            let (h, w) = labels[0].maps[s].dim();
            let mut data = Vec::with_capacity(labels.len() * h * w);
            for l in labels {
                if l.maps[s].dim() != (h, w) {
                    return Err(Error::ShapeMismatch(format!(
                        "pseudo-label `{}` scale {s} is {:?}, expected {:?}",
                        l.tile_id,
                        l.maps[s].dim(),
                        (h, w)
                    )));
                }
                data.extend(l.maps[s].iter().copied());
            }
            Ok(Tensor::from_vec(data, (labels.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
        })
        .collect()
}

/// Mean over the three scales of 1 − SSIM(pred_s, target_s).
pub fn depth_loss(pred: &DepthPyramid, targets: &[Tensor], p: &SsimParams) -> Result<Tensor> {
    if pred.maps.len() != targets.len() || targets.is_empty() {
        return Err(Error::Input(format!(
            "{} predicted depth scales vs {} targets",
            pred.maps.len(),
            targets.len()
        )));
    }
    let mut terms = Vec::with_capacity(targets.len());
    for (x, y) in pred.maps.iter().zip(targets) {
        let y = y.to_dtype(x.dtype())?;
        terms.push(ssim(x, &y, p)?.affine(-1.0, 1.0)?);
    }
    let k = terms.len() as f64;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / k)?)
}

/// Class indices and validity weights for a batch of masks, flattened in
/// (B, H, W) order.
pub struct LabelTargets {
    pub indices: Tensor,
    pub weights: Tensor,
    pub valid: usize,
}

pub fn label_targets(masks: &[&LabelMask], num_classes: usize, dtype: DType) -> Result<LabelTargets> {
    let mut idx = Vec::new();
    let mut wts = Vec::new();
    let mut valid = 0usize;
    for m in masks {
        for &c in m.classes().iter() {
            if c == IGNORE_INDEX {
                idx.push(0u32);
                wts.push(0.0f64);
            } else if (c as usize) < num_classes {
                idx.push(c as u32);
                wts.push(1.0);
                valid += 1;
            } else {
                return Err(Error::IllegalClass {
                    value: c,
                    context: format!("labels for a {num_classes}-class loss"),
                });
            }
        }
    }
    let n = idx.len();
    Ok(LabelTargets {
        indices: Tensor::from_vec(idx, (n, 1), &Device::Cpu)?,
        weights: Tensor::from_vec(wts, (n, 1), &Device::Cpu)?.to_dtype(dtype)?,
        valid,
    })
}

/// Mean multiclass cross-entropy −log softmax(logits)[y] over non-ignored
/// pixels. `logits` is (B, N, H, W).
pub fn class_loss(logits: &Tensor, masks: &[&LabelMask]) -> Result<Tensor> {
    let (b, n, h, w) = logits.dims4()?;
    if masks.len() != b {
        return Err(Error::ShapeMismatch(format!("{} masks for a batch of {b}", masks.len())));
    }
    for m in masks {
        if m.classes().dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} vs logits {h}x{w}",
                m.classes().dim()
            )));
        }
    }
    ensure_finite(logits, "logits")?;
    let targets = label_targets(masks, n, logits.dtype())?;
    if targets.valid == 0 {
        return Err(Error::UndefinedLoss("every pixel is ignored".into()));
    }
    let logp = candle_nn::ops::log_softmax(logits, 1)?
        .permute((0, 2, 3, 1))?
        .reshape((b * h * w, n))?;
    let picked = logp.gather(&targets.indices, D::Minus1)?;
    let total = (picked * &targets.weights)?.sum_all()?;
    Ok((total.neg()? / targets.valid as f64)?)
}

/// Per-step loss values. `depth_loss` is absent when the depth pathway is
/// detached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub depth_loss: Option<f64>,
    pub class_loss: f64,
    pub total: f64,
}

/// Unweighted sum L = L_D + L_cls.
pub fn total_loss(depth_loss: Option<f64>, class_loss: f64) -> LossReport {
    LossReport {
        depth_loss,
        class_loss,
        total: depth_loss.unwrap_or(0.0) + class_loss,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn t64(data: Vec<f64>, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(data, (1, 1, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn ssim_identity_and_constants() {
        let x = Tensor::rand(0f64, 1f64, (1, 1, 16, 16), &Device::Cpu).unwrap();
        let s = ssim_value(&x, &x, &SsimParams::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-7);

        let zeros = t64(vec![0.0; 256], 16, 16);
        let ones = t64(vec![1.0; 256], 16, 16);
        let p = SsimParams::default();
        let c1 = p.c1();
        let s = ssim_value(&zeros, &ones, &p).unwrap();
        assert!((s - c1 / (1.0 + c1)).abs() < 1e-9, "{s}");
        assert!((s - 9.999e-5).abs() < 1e-7);
    }

    #[test]
    fn ssim_errors() {
        let a = Tensor::zeros((4, 4), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((4, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(ssim(&a, &b, &SsimParams::default()), Err(Error::Input(_))));
        let nan = Tensor::new(&[[f64::NAN, 0.0], [0.0, 0.0]], &Device::Cpu).unwrap();
        let z = nan.zeros_like().unwrap();
        assert!(matches!(ssim(&nan, &z, &SsimParams::default()), Err(Error::Input(_))));
        assert!(SsimParams::with_window(4).validate().is_err());
    }

    #[test]
    fn ssim_global_fallback_on_small_maps() {
        // 2x2 maps, window 11: single global window.
        let x = t64(vec![0.0, 1.0, 0.0, 1.0], 2, 2);
        let y = t64(vec![0.0, 1.0, 1.0, 1.0], 2, 2);
        let p = SsimParams::default();
        let (mx, my) = (0.5, 0.75);
        let vx = 0.25;
        let vy = (0.75f64.powi(2) + 3.0 * 0.25f64.powi(2)) / 4.0;
        let cov = ((-0.5) * (-0.75) + 0.5 * 0.25 + (-0.5) * 0.25 + 0.5 * 0.25) / 4.0;
        let want = ((2.0 * mx * my + p.c1()) * (2.0 * cov + p.c2()))
            / ((mx * mx + my * my + p.c1()) * (vx + vy + p.c2()));
        let got = ssim_value(&x, &y, &p).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_analytic_values() {
        let mask = LabelMask::new(Array2::from_shape_fn((4, 4), |(i, j)| ((i + j) % 7) as u8)).unwrap();
        let uniform = Tensor::zeros((1, 7, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let l = class_loss(&uniform, &[&mask]).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-9);

        let mut data = vec![0f64; 7 * 16];
        for (px, &c) in mask.classes().iter().enumerate() {
            data[c as usize * 16 + px] = 1000.0;
        }
        let saturated = Tensor::from_vec(data, (1, 7, 4, 4), &Device::Cpu).unwrap();
        let l = class_loss(&saturated, &[&mask]).unwrap().to_scalar::<f64>().unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn cross_entropy_ignore_handling() {
        let all_ignored = LabelMask::new(Array2::from_elem((2, 2), IGNORE_INDEX)).unwrap();
        let logits = Tensor::zeros((1, 7, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            class_loss(&logits, &[&all_ignored]),
            Err(Error::UndefinedLoss(_))
        ));
        let mut classes = Array2::from_elem((2, 2), IGNORE_INDEX);
        classes[[0, 0]] = 3;
        let partial = LabelMask::new(classes).unwrap();
        let mut data = vec![0f64; 7 * 4];
        data[3 * 4] = 2.0; // class 3 at pixel 0
        data[5 * 4 + 1] = 50.0; // ignored pixel would dominate if counted
        let logits = Tensor::from_vec(data, (1, 7, 2, 2), &Device::Cpu).unwrap();
        let l = class_loss(&logits, &[&partial]).unwrap().to_scalar::<f64>().unwrap();
        let want = -(2f64.exp() / (2f64.exp() + 6.0)).ln();
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn total_is_exact_sum() {
        assert_eq!(total_loss(Some(0.0), 0.0).total, 0.0);
        let r = total_loss(Some(0.3), 1.2);
        assert!((r.total - 1.5).abs() < 1e-15);
        assert_eq!(r.total - (r.depth_loss.unwrap() + r.class_loss), 0.0);
        assert_eq!(total_loss(None, 0.7).total, 0.7);
    }

    fn map(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, n * n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ssim_is_symmetric_and_bounded(x in map(12), y in map(12)) {
            let p = SsimParams::with_window(5);
            let xy = ssim_value(&t64(x.clone(), 12, 12), &t64(y.clone(), 12, 12), &p).unwrap();
            let yx = ssim_value(&t64(y, 12, 12), &t64(x, 12, 12), &p).unwrap();
            prop_assert!((xy - yx).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&xy));
        }

        #[test]
        fn depth_loss_bounds_and_self_match(a in map(8), b in map(8)) {
            let p = SsimParams::with_window(3);
            let pyramid = |v: &[f64]| {
                let t = t64(v.to_vec(), 8, 8);
                let maps = vec![
                    t.clone(),
                    t.avg_pool2d(2).unwrap(),
                    t.avg_pool2d(4).unwrap(),
                ];
                DepthPyramid { maps }
            };
            let (pa, pb) = (pyramid(&a), pyramid(&b));
            let l = depth_loss(&pa, &pb.maps, &p).unwrap().to_scalar::<f64>().unwrap();
            prop_assert!((0.0..=2.0).contains(&l));
            let own = depth_loss(&pa, &pa.maps, &p).unwrap().to_scalar::<f64>().unwrap();
            prop_assert!(own.abs() < 1e-7);
        }

        #[test]
        fn class_loss_is_non_negative(
            z in proptest::collection::vec(-20.0f64..20.0, 7 * 16),
            labels in proptest::collection::vec(0u8..7, 16),
        ) {
            let logits = Tensor::from_vec(z, (1, 7, 4, 4), &Device::Cpu).unwrap();
            let m = LabelMask::new(Array2::from_shape_vec((4, 4), labels).unwrap()).unwrap();
            let l = class_loss(&logits, &[&m]).unwrap().to_scalar::<f64>().unwrap();
            prop_assert!(l >= 0.0 && l.is_finite());
        }
    }
}
