//! Image quality metrics on `[0, 1]` images.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::ImageGrid;

/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
/// PSNR peak for normalized images.
pub const PEAK: f64 = 1.0;

fn check_shapes(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse(reference: &ImageGrid, test: &ImageGrid) -> Result<f64> {
    check_shapes(reference, test)?;
    let n = reference.pixels().len() as f64;
    Ok(reference
        .pixels()
        .iter()
        .zip(test.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(peak^2 / MSE)`; identical images are an error.
pub fn psnr(reference: &ImageGrid, test: &ImageGrid, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("peak {peak} must be positive")));
    }
    let m = mse(reference, test)?;
    if m == 0.0 {
        return Err(Error::IdenticalImages);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// `||ref - test||^2 / ||ref||^2`.
pub fn nmse(reference: &ImageGrid, test: &ImageGrid) -> Result<f64> {
    check_shapes(reference, test)?;
    let den: f64 = reference.pixels().iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num: f64 = reference
        .pixels()
        .iter()
        .zip(test.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(num / den)
}

/// Summed-area table with a zero border: `(h + 1) x (w + 1)`.
fn integral(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(y * w + x);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn window_sum(s: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let w1 = w + 1;
    s[(y + k) * w1 + x + k] - s[y * w1 + x + k] - s[(y + k) * w1 + x] + s[y * w1 + x]
}

/// Mean SSIM over all 8x8 windows at stride 1, uniform weights and
/// population statistics.
pub fn ssim(reference: &ImageGrid, test: &ImageGrid) -> Result<f64> {
    check_shapes(reference, test)?;
    let (h, w) = (reference.height(), reference.width());
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::TooSmall(format!("{h}x{w} is smaller than the {k}x{k} window")));
    }
    let (a, b) = (reference.pixels(), test.pixels());
    let sa = integral(h, w, |i| a[i]);
    let sb = integral(h, w, |i| b[i]);
    let saa = integral(h, w, |i| a[i] * a[i]);
    let sbb = integral(h, w, |i| b[i] * b[i]);
    let sab = integral(h, w, |i| a[i] * b[i]);
    let n = (k * k) as f64;
    let mut total = 0.0;
    let windows = (h - k + 1) * (w - k + 1);
    for y in 0..=h - k {
        for x in 0..=w - k {
            let ma = window_sum(&sa, w, y, x, k) / n;
            let mb = window_sum(&sb, w, y, x, k) / n;
            let va = window_sum(&saa, w, y, x, k) / n - ma * ma;
            let vb = window_sum(&sbb, w, y, x, k) / n - mb * mb;
            let cov = window_sum(&sab, w, y, x, k) / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / windows as f64)
}

/// Mean metrics over a set of image pairs at one acceleration factor.
/// `psnr` is `None` when some pair is identical, so the mean is unbounded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub af: u32,
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub nmse: f64,
    pub n_images: usize,
}

#[derive(Serialize)]
struct Protocol {
    ssim_window: usize,
    ssim_c1: f64,
    ssim_c2: f64,
    psnr_peak: f64,
    intensity_range: [f64; 2],
}

#[derive(Serialize)]
struct ReportJson<'a> {
    #[serde(flatten)]
    report: &'a MetricReport,
    protocol: Protocol,
}

impl MetricReport {
    pub fn evaluate(af: u32, pairs: &[(ImageGrid, ImageGrid)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = pairs.len() as f64;
        let (mut p, mut s, mut e) = (Some(0.0), 0.0, 0.0);
        for (reference, test) in pairs {
            p = match (p, psnr(reference, test, PEAK)) {
                (Some(acc), Ok(v)) => Some(acc + v),
                (_, Err(Error::IdenticalImages)) | (None, Ok(_)) => None,
                (_, Err(err)) => return Err(err),
            };
            s += ssim(reference, test)?;
            e += nmse(reference, test)?;
        }
        Ok(Self {
            af,
            psnr: p.map(|v| v / n),
            ssim: s / n,
            nmse: e / n,
            n_images: pairs.len(),
        })
    }

    pub const CSV_HEADER: &'static str = "af,psnr,ssim,nmse,n_images";

    pub fn csv_row(&self) -> String {
        let psnr = self.psnr.map(|v| v.to_string()).unwrap_or_else(|| "inf".into());
        format!("{},{},{},{},{}", self.af, psnr, self.ssim, self.nmse, self.n_images)
    }

    pub fn write_csv<W: Write>(mut w: W, reports: &[MetricReport]) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in reports {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    }

    fn json_doc(&self) -> ReportJson<'_> {
        ReportJson {
            report: self,
            protocol: Protocol {
                ssim_window: SSIM_WINDOW,
                ssim_c1: SSIM_C1,
                ssim_c2: SSIM_C2,
                psnr_peak: PEAK,
                intensity_range: [0.0, 1.0],
            },
        }
    }

    /// JSON object with the report fields plus the metric constants used.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.json_doc()).expect("report serializes")
    }

    /// JSON array of [`MetricReport::to_json`] objects.
    pub fn list_to_json(reports: &[MetricReport]) -> String {
        let docs: Vec<_> = reports.iter().map(|r| r.json_doc()).collect();
        serde_json::to_string_pretty(&docs).expect("report serializes")
    }
}
