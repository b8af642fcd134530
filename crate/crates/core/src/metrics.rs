//! Image and depth quality metrics.

use std::io::Write;

use crate::dataset::RgbImage;
use crate::error::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;

fn same_size(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::InvalidArgument(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_size(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of the luma channels over every fully contained 11x11 window.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_size(a, b)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let (la, lb) = (a.luma(), b.luma());
    let g = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..SSIM_WINDOW {
                for i in 0..SSIM_WINDOW {
                    let wt = g[i] * g[j];
                    let idx = (y0 + j) * w + x0 + i;
                    let (p, q) = (la[idx], lb[idx]);
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthError {
    /// NaN when no pixel survives.
    pub rmse: f64,
    pub count: usize,
}

/// Depth RMSE over pixels where `valid` holds. With `sigma_k = Some(k)`
/// only pixels with `|error| <= k * std(error)` are kept, `std` being the
/// population standard deviation of the valid errors.
pub fn depth_rmse(pred: &[f64], gt: &[f64], valid: &[bool], sigma_k: Option<f64>) -> Result<DepthError> {
    if pred.len() != gt.len() || gt.len() != valid.len() {
        return Err(Error::InvalidArgument("depth buffers differ in length".into()));
    }
    let errors: Vec<f64> = (0..pred.len()).filter(|&i| valid[i]).map(|i| pred[i] - gt[i]).collect();
    let rms = |e: &mut dyn Iterator<Item = f64>| {
        let (mut s, mut n) = (0.0, 0usize);
        for v in e {
            s += v * v;
            n += 1;
        }
        DepthError {
            rmse: if n == 0 { f64::NAN } else { (s / n as f64).sqrt() },
            count: n,
        }
    };
    match sigma_k {
        None => Ok(rms(&mut errors.iter().copied())),
        Some(k) => {
            if errors.is_empty() {
                return Ok(rms(&mut std::iter::empty()));
            }
            let n = errors.len() as f64;
            let mean = errors.iter().sum::<f64>() / n;
            let std = (errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n).sqrt();
            Ok(rms(&mut errors.iter().copied().filter(|e| e.abs() <= k * std)))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse_1sigma: f64,
    pub rmse_2sigma: f64,
    pub rmse: f64,
}

fn cell(v: f64, digits: usize) -> String {
    if v.is_finite() {
        format!("{v:.digits$}")
    } else {
        "n/a".to_string()
    }
}

/// Tab-separated results table; LPIPS is not computed and printed as `n/a`.
pub fn write_table(mut w: impl Write, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(w, "method\tPSNR\tSSIM\tLPIPS\tRMSE@1sigma\tRMSE@2sigma\tRMSE")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\tn/a\t{}\t{}\t{}",
            r.name,
            cell(r.psnr, 2),
            cell(r.ssim, 4),
            cell(r.rmse_1sigma, 3),
            cell(r.rmse_2sigma, 3),
            cell(r.rmse, 3)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(w: u32, h: u32, f: impl Fn(u32, u32) -> f64) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| [f(x, y); 3])
    }

    #[test]
    fn psnr_closed_forms() {
        let a = img(8, 8, |_, _| 0.0);
        let b = img(8, 8, |_, _| 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &img(4, 8, |_, _| 0.0)).is_err());
    }

    #[test]
    fn ssim_identity_and_negative() {
        let a = img(24, 20, |x, y| 0.5 + 0.4 * ((x as f64 * 0.7).sin() * (y as f64 * 0.4).cos()));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = img(24, 20, |x, y| 0.5 - 0.4 * ((x as f64 * 0.7).sin() * (y as f64 * 0.4).cos()));
        assert!(ssim(&a, &neg).unwrap() < 0.0);
        let c = img(16, 16, |_, _| 0.5);
        let c2 = img(16, 16, |_, _| 0.5 + 1e-6);
        assert!(ssim(&c, &c2).unwrap() > 1.0 - 1e-8);
    }

    #[test]
    fn depth_bias() {
        let gt = vec![5.0; 10];
        let pred = vec![6.0; 10];
        let valid = vec![true; 10];
        assert_eq!(depth_rmse(&gt, &gt, &valid, None).unwrap().rmse, 0.0);
        assert!((depth_rmse(&pred, &gt, &valid, None).unwrap().rmse - 1.0).abs() < 1e-12);
        let mut half = valid.clone();
        half[..5].fill(false);
        assert_eq!(depth_rmse(&pred, &gt, &half, None).unwrap().count, 5);
    }

    #[test]
    fn table_marks_lpips_missing() {
        let mut out = Vec::new();
        let row = MetricsRow {
            name: "m".into(),
            psnr: 21.5,
            ssim: 0.7,
            rmse_1sigma: 1.0,
            rmse_2sigma: f64::NAN,
            rmse: 3.0,
        };
        write_table(&mut out, &[row]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("m\t21.50\t0.7000\tn/a\t1.000\tn/a\t3.000"));
    }

    proptest! {
        #[test]
        fn trimmed_rmse_matches_brute_force(errs in prop::collection::vec(-5.0f64..5.0, 1..60)) {
            let gt: Vec<f64> = (0..errs.len()).map(|i| 10.0 + i as f64).collect();
            let pred: Vec<f64> = gt.iter().zip(&errs).map(|(g, e)| g + e).collect();
            let valid = vec![true; errs.len()];
            let full = depth_rmse(&pred, &gt, &valid, None).unwrap();
            let one = depth_rmse(&pred, &gt, &valid, Some(1.0)).unwrap();
            let two = depth_rmse(&pred, &gt, &valid, Some(2.0)).unwrap();
            // Brute force: sort by |error| and keep a prefix.
            let e: Vec<f64> = pred.iter().zip(&gt).map(|(p, g)| p - g).collect();
            let n = e.len() as f64;
            let mean = e.iter().sum::<f64>() / n;
            let sd = (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let kept: Vec<f64> = e.iter().copied().filter(|v| v.abs() <= sd).collect();
            prop_assert_eq!(one.count, kept.len());
            if !kept.is_empty() {
                let r = (kept.iter().map(|v| v * v).sum::<f64>() / kept.len() as f64).sqrt();
                prop_assert!((one.rmse - r).abs() < 1e-12);
            }
            prop_assert!(two.count >= one.count);
            if one.count > 0 {
                prop_assert!(one.rmse <= two.rmse + 1e-12);
            }
            if two.count > 0 {
                prop_assert!(two.rmse <= full.rmse + 1e-12);
            }
        }

        #[test]
        fn psnr_matches_formula(v in prop::collection::vec(0.0f64..1.0, 48), w in prop::collection::vec(0.0f64..1.0, 48)) {
            let a = RgbImage::new(4, 4, v.clone()).unwrap();
            let b = RgbImage::new(4, 4, w.clone()).unwrap();
            let m: f64 = v.iter().zip(&w).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 48.0;
            prop_assert!((psnr(&a, &b).unwrap() - (-10.0 * m.log10()).min(PSNR_CAP)).abs() < 1e-9);
        }
    }
}
