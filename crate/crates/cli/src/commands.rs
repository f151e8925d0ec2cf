use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use kanrecon_core::diffusion::{sample_reconstruct, train, write_trace, SamplerConfig, TcKanRecon};
use kanrecon_core::kspace::{fft2, undersample, zero_fill, ImageGrid, KSpaceGrid, SamplingMask};
use kanrecon_core::metrics::MetricReport;
use kanrecon_core::phantom::{generate_set, read_dataset, write_dataset, write_pgm};
use kanrecon_core::rng::SplitMix64;

use crate::config::RunConfig;
use crate::error::{exit, CliError, CliResult};
use crate::fsutil::{atomic_write, atomic_write_with, read};

pub const TRAIN_FILE: &str = "train.krec";
pub const EVAL_FILE: &str = "eval.krec";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.krec";
pub const ZERO_FILLED_FILE: &str = "zero_filled.krec";
pub const RECON_FILE: &str = "recon.krec";

/// Derived seed offsets so the data splits never share phantoms.
const EVAL_SEED_OFFSET: u64 = 1 << 32;
const SAMPLER_TAG: u64 = 0x5a4d;

pub fn af_dir(out: &Path, accel: u32) -> PathBuf {
    out.join(format!("af{accel}"))
}

/// Loss-curve CSV written next to a checkpoint.
pub fn loss_csv_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".loss.csv");
    ckpt.with_file_name(name)
}

fn load_images(path: &Path) -> CliResult<Vec<ImageGrid>> {
    let bytes = read(path)?;
    read_dataset(&bytes[..]).map_err(|e| CliError::from(e).context(path.display()))
}

fn check_size(cfg: &RunConfig, images: &[ImageGrid], path: &Path) -> CliResult<()> {
    let n = cfg.data.size;
    if let Some(img) = images.iter().find(|i| i.height() != n || i.width() != n) {
        return Err(CliError::config(format!(
            "{}: images are {}x{} but data.size is {n}",
            path.display(),
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

fn observe(images: &[ImageGrid], mask: &SamplingMask) -> CliResult<Vec<KSpaceGrid>> {
    images
        .iter()
        .map(|img| Ok(undersample(&fft2(img)?, mask)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub train: PathBuf,
    pub eval: PathBuf,
    pub n_train: usize,
    pub n_eval: usize,
}

/// Write the training and evaluation phantom sets into `out_dir`.
pub fn gen_data(cfg: &RunConfig, out_dir: &Path) -> CliResult<GenSummary> {
    let d = &cfg.data;
    let train_set = generate_set(d.size, d.n_train, d.seed)?;
    let eval_set = generate_set(d.size, d.n_eval, d.seed.wrapping_add(EVAL_SEED_OFFSET))?;
    let summary = GenSummary {
        train: out_dir.join(TRAIN_FILE),
        eval: out_dir.join(EVAL_FILE),
        n_train: train_set.len(),
        n_eval: eval_set.len(),
    };
    atomic_write_with(&summary.train, |b| Ok(write_dataset(b, &train_set)?))?;
    atomic_write_with(&summary.eval, |b| Ok(write_dataset(b, &eval_set)?))?;
    Ok(summary)
}

/// Train on `data_dir/train.krec`; writes the checkpoint and its loss CSV.
/// Item `i` is observed through the mask of the `i mod n`-th configured
/// acceleration.
pub fn train_model(cfg: &RunConfig, data_dir: &Path, ckpt: &Path) -> CliResult<Vec<f64>> {
    let path = data_dir.join(TRAIN_FILE);
    let images = load_images(&path)?;
    check_size(cfg, &images, &path)?;
    let masks: Vec<SamplingMask> = cfg.accelerations().into_iter().map(|a| cfg.mask(a)).collect::<CliResult<_>>()?;
    let obs = images
        .iter()
        .enumerate()
        .map(|(i, img)| Ok(undersample(&fft2(img)?, &masks[i % masks.len()])?))
        .collect::<CliResult<Vec<_>>>()?;
    let sched = cfg.schedule()?;
    let mut model = TcKanRecon::new(cfg.ukan_config()?, cfg.train.seed)?;
    log::info!(
        "training {} parameters on {} images for {} epochs",
        model.store.named().map(|(_, t)| t.numel()).sum::<usize>(),
        images.len(),
        cfg.train.epochs
    );
    let losses = train(&mut model, &images, &obs, &sched, &cfg.train_config(), |_, _| {})?;
    atomic_write_with(ckpt, |b| Ok(model.save(b)?))?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(csv, "{},{l}", i + 1).expect("string write");
    }
    atomic_write(&loss_csv_path(ckpt), csv.as_bytes())?;
    Ok(losses)
}

pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> CliResult<TcKanRecon> {
    let bytes = read(ckpt)?;
    TcKanRecon::load(&bytes[..], cfg.ukan_config()?).map_err(|e| {
        let e = CliError::from(e).context(ckpt.display());
        if e.code == exit::INTERNAL {
            CliError::new(exit::CHECKPOINT, e.message)
        } else {
            e
        }
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReconOptions {
    pub trace: bool,
    pub threads: usize,
    pub zero_filled_only: bool,
}

/// Map `f` over `0..n` on up to `threads` scoped threads, keeping order.
fn par_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> CliResult<T> + Sync) -> CliResult<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    let chunks: Vec<CliResult<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| s.spawn(move || (w..n).step_by(threads).map(f).collect::<CliResult<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut per_worker = chunks.into_iter().collect::<CliResult<Vec<_>>>()?;
    let mut iters: Vec<_> = per_worker.iter_mut().map(|v| v.drain(..)).collect();
    Ok((0..n).map(|i| iters[i % threads].next().expect("one result per index")).collect())
}

fn write_pgm_file(path: &Path, img: &ImageGrid) -> CliResult<()> {
    atomic_write_with(path, |b| Ok(write_pgm(b, img)?))
}

/// Reconstruct every evaluation image at every configured acceleration into
/// `out_dir/af{N}/`: `{i}_gt.pgm`, `{i}_zf.pgm`, `{i}_recon.pgm`, optional
/// `{i}_trace.csv`, and `.krec` stacks of each kind for evaluation.
pub fn reconstruct(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    data_dir: &Path,
    out_dir: &Path,
    opts: ReconOptions,
) -> CliResult<usize> {
    let path = data_dir.join(EVAL_FILE);
    let images = load_images(&path)?;
    check_size(cfg, &images, &path)?;
    let model = match (opts.zero_filled_only, ckpt) {
        (true, _) => None,
        (false, Some(p)) => Some(load_model(cfg, p)?),
        (false, None) => return Err(CliError::config("reconstruct needs a checkpoint unless --zero-filled-only")),
    };
    let sched = cfg.schedule()?;
    let clip = cfg.clip()?;
    let mut written = 0;
    for accel in cfg.accelerations() {
        let mask = cfg.mask(accel)?;
        let obs = observe(&images, &mask)?;
        let dir = af_dir(out_dir, accel);
        let zf: Vec<ImageGrid> = obs.iter().map(zero_fill).collect();
        for (i, (gt, z)) in images.iter().zip(&zf).enumerate() {
            write_pgm_file(&dir.join(format!("{i:03}_gt.pgm")), gt)?;
            write_pgm_file(&dir.join(format!("{i:03}_zf.pgm")), z)?;
            written += 2;
        }
        if let Some(model) = &model {
            let recon = par_map(images.len(), opts.threads, |i| {
                let seed = SplitMix64::derive(cfg.train.seed, &[SAMPLER_TAG, accel as u64, i as u64]).next_u64();
                let sc = SamplerConfig {
                    clip,
                    dc_every: cfg.diffusion.dc_every,
                    seed,
                };
                let out = sample_reconstruct(model, &obs[i], &mask, &sched, &sc, Some(&images[i]))?;
                log::debug!("af{accel} image {i} done");
                Ok(out)
            })?;
            for (i, out) in recon.iter().enumerate() {
                write_pgm_file(&dir.join(format!("{i:03}_recon.pgm")), &out.image)?;
                written += 1;
                if opts.trace {
                    atomic_write_with(&dir.join(format!("{i:03}_trace.csv")), |b| Ok(write_trace(b, &out.trace)?))?;
                }
            }
            let stack: Vec<ImageGrid> = recon.into_iter().map(|o| o.image).collect();
            atomic_write_with(&dir.join(RECON_FILE), |b| Ok(write_dataset(b, &stack)?))?;
        }
        atomic_write_with(&dir.join(GROUND_TRUTH_FILE), |b| Ok(write_dataset(b, &images)?))?;
        atomic_write_with(&dir.join(ZERO_FILLED_FILE), |b| Ok(write_dataset(b, &zf)?))?;
        log::info!("af{accel}: wrote {}", dir.display());
    }
    Ok(written)
}

/// Which reconstruction stack to score against the ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Source {
    Recon,
    ZeroFilled,
}

impl Source {
    fn file(self) -> &'static str {
        match self {
            Self::Recon => RECON_FILE,
            Self::ZeroFilled => ZERO_FILLED_FILE,
        }
    }
}

fn load_for_eval(path: &Path) -> CliResult<Vec<ImageGrid>> {
    if !path.exists() {
        return Err(CliError::new(
            exit::MISSING_OUTPUTS,
            format!("missing reconstruction output {}", path.display()),
        ));
    }
    load_images(path)
}

/// Score the reconstructions in `out_dir` for every configured acceleration.
pub fn evaluate(cfg: &RunConfig, out_dir: &Path, source: Source) -> CliResult<Vec<MetricReport>> {
    cfg.accelerations()
        .into_iter()
        .map(|accel| {
            let dir = af_dir(out_dir, accel);
            let gt = load_for_eval(&dir.join(GROUND_TRUTH_FILE))?;
            let test = load_for_eval(&dir.join(source.file()))?;
            if gt.len() != test.len() || gt.is_empty() {
                return Err(CliError::new(
                    exit::MISSING_OUTPUTS,
                    format!("{}: {} ground-truth images, {} reconstructions", dir.display(), gt.len(), test.len()),
                ));
            }
            let pairs: Vec<_> = gt.into_iter().zip(test).collect();
            Ok(MetricReport::evaluate(accel, &pairs)?)
        })
        .collect()
}

/// Write `reports` as `<report>.csv` and `<report>.json`.
pub fn write_reports(report: &Path, reports: &[MetricReport]) -> CliResult<(PathBuf, PathBuf)> {
    let csv = report.with_extension("csv");
    let json = report.with_extension("json");
    atomic_write_with(&csv, |b| Ok(MetricReport::write_csv(b, reports)?))?;
    atomic_write(&json, MetricReport::list_to_json(reports).as_bytes())?;
    Ok((csv, json))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub mf: bool,
    pub tokkan: bool,
    pub dynamic_clip: bool,
    pub report: MetricReport,
}

pub const ABLATION_HEADER: &str = "variant,mf,tokkan,dynamic_clip,af,psnr,ssim,nmse,n_images";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.variant,
            self.mf,
            self.tokkan,
            self.dynamic_clip,
            self.report.csv_row()
        )
    }
}

/// Train and evaluate the full model and one variant per removed component.
/// The clipping variant reuses the full model's checkpoint since clipping
/// only affects sampling. Writes `out_dir/ablation.csv`.
pub fn ablate(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, opts: ReconOptions) -> CliResult<Vec<AblationRow>> {
    let variants: [(&str, bool, bool, bool); 4] = [
        ("full", true, true, true),
        ("no_mf", false, true, true),
        ("no_tokkan", true, false, true),
        ("no_dynamic_clip", true, true, false),
    ];
    let mut rows = Vec::new();
    for (name, mf, tokkan, dynamic_clip) in variants {
        let mut v = cfg.clone();
        v.ablation.mf = mf;
        v.ablation.tokkan = tokkan;
        v.ablation.dynamic_clip = dynamic_clip;
        let ckpt_name = if name == "no_dynamic_clip" { "full" } else { name };
        let ckpt = out_dir.join(format!("{ckpt_name}.ckpt"));
        if ckpt_name == name {
            log::info!("ablation {name}: training");
            train_model(&v, data_dir, &ckpt)?;
        }
        let dir = out_dir.join(name);
        reconstruct(&v, Some(&ckpt), data_dir, &dir, opts)?;
        for report in evaluate(&v, &dir, Source::Recon)? {
            rows.push(AblationRow {
                variant: name,
                mf,
                tokkan,
                dynamic_clip,
                report,
            });
        }
    }
    atomic_write_with(&out_dir.join("ablation.csv"), |b| {
        writeln!(b, "{ABLATION_HEADER}")?;
        for r in &rows {
            writeln!(b, "{}", r.csv_row())?;
        }
        Ok(())
    })?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order() {
        for threads in [1, 2, 3, 8] {
            let v = par_map(7, threads, |i| Ok(i * i)).unwrap();
            assert_eq!(v, vec![0, 1, 4, 9, 16, 25, 36]);
        }
        let e = par_map(5, 2, |i| if i == 3 { Err(CliError::config("x")) } else { Ok(i) });
        assert!(e.is_err());
    }

    #[test]
    fn loss_csv_sits_next_to_checkpoint() {
        assert_eq!(loss_csv_path(Path::new("run/model.ckpt")), Path::new("run/model.ckpt.loss.csv"));
    }
}
