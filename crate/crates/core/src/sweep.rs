//! Denoising every ladder level and scoring input and output against ground truth.

use crate::data::model_input;
use crate::error::Result;
use crate::metrics::{bland_altman, cnr, magnitude, masked_mean, psnr, ssim, BlandAltman, MetricsReport, MAX_VALUE};
use crate::model::Model;
use crate::mrsim::{level_sigma, mean_g_over, ComplexSeries, GFactorMap, LadderLevel, Phantom};
use crate::tensor::{Dims5, Tensor5D};

pub struct SweepResult {
    pub rows: Vec<MetricsReport>,
    /// One entry per level: output vs ground-truth region means.
    pub bland_altman: Vec<(String, BlandAltman)>,
    /// Denoised series per level.
    pub outputs: Vec<ComplexSeries>,
}

/// Per-frame blood and myocardium means, blood first.
pub fn region_means(img: &Tensor5D<f64>, phantom: &Phantom) -> Result<Vec<f64>> {
    let d = img.dims();
    let frame = |t: &Tensor5D<f64>, f: usize| -> Result<Tensor5D<f64>> {
        let p = d.plane();
        Tensor5D::new(Dims5 { f: 1, ..d }, t.data()[f * p..(f + 1) * p].to_vec())
    };
    let mut out = Vec::with_capacity(2 * d.f);
    for mask in [&phantom.blood_mask, &phantom.myo_mask] {
        for f in 0..d.f {
            out.push(masked_mean(&frame(img, f)?, &frame(mask, f)?)?);
        }
    }
    Ok(out)
}

/// Runs `model` on every level and scores input and output magnitudes.
pub fn sweep(model: &Model<f32>, phantom: &Phantom, g: &GFactorMap, levels: &[LadderLevel]) -> Result<SweepResult> {
    let gt = magnitude(&phantom.series.to_channels())?;
    let mg = mean_g_over(g, &[&phantom.blood_mask, &phantom.myo_mask])?;
    let gt_means = region_means(&gt, phantom)?;
    let mut result = SweepResult { rows: vec![], bland_altman: vec![], outputs: vec![] };
    for (i, lvl) in levels.iter().enumerate() {
        let case = format!("level{i}");
        let out = model.forward(&model_input(&lvl.noisy, g)?, None)?.cast::<f64>();
        let m_in = magnitude(&lvl.noisy.to_channels())?;
        let m_out = magnitude(&out)?;
        let sigma = level_sigma(lvl.nn, mg);
        let c = |img: &Tensor5D<f64>| cnr(img, &phantom.blood_mask, &phantom.myo_mask, sigma);
        let ba = bland_altman(&region_means(&m_out, phantom)?, &gt_means)?;
        result.rows.push(MetricsReport {
            case: case.clone(),
            target_snr: lvl.target,
            psnr_db: psnr(&m_out, &gt, MAX_VALUE)?,
            ssim: ssim(&m_out, &gt, MAX_VALUE)?,
            cnr_in: c(&m_in)?,
            cnr_out: c(&m_out)?,
            cnr_gt: c(&gt)?,
            psnr_in_db: psnr(&m_in, &gt, MAX_VALUE)?,
            ssim_in: ssim(&m_in, &gt, MAX_VALUE)?,
            bland_altman: Some(ba),
        });
        result.bland_altman.push((case, ba));
        result.outputs.push(ComplexSeries::from_channels(&out, 0)?);
    }
    Ok(result)
}
