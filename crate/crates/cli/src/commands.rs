use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pat_core::baseline::lsqr_wave;
use pat_core::data::{
    export_pgm, load_dataset, DataError, mip, mse, psnr, read_traces, read_volume, simulate_dataset, slice, write_volume, Axis,
    Normalization,
};
use pat_core::unroll::{load_plan, load_stages, reconstruct as run_plan, save_plan, train_greedy, EpochLoss};
use pat_core::wave::{Volume, WaveOperator};

use crate::config::{Resolved, RunConfig};
use crate::error::{io, CliError};

fn existing_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_dir() {
        return Err(CliError::Config(format!("{what} directory {} does not exist", path.display())));
    }
    Ok(())
}

fn writable_file(path: &Path) -> Result<(), CliError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    existing_dir(parent, "output")
}

pub fn simulate(cfg: &RunConfig, r: &Resolved, out: Option<PathBuf>, n: Option<usize>) -> Result<(), CliError> {
    let out = out.unwrap_or_else(|| cfg.paths.dataset.clone());
    existing_dir(&out, "output")?;
    let n = n.unwrap_or(cfg.data.n_samples);
    let m = simulate_dataset(n, &r.grid, &r.geometry, &cfg.noise_spec(), &cfg.phantom_spec(), &out)?;
    println!("dataset {}", out.display());
    println!(
        "samples {} grid {}x{}x{} nt {} receivers {} (factor {}, {:?}) snr {} dB",
        m.n_samples,
        m.grid.nx,
        m.grid.ny,
        m.grid.nz,
        m.grid.nt,
        m.geometry.n_active,
        m.geometry.subsample_factor,
        m.geometry.scheme,
        m.noise.snr_db
    );
    println!("pde solves {} (forward)", m.forward_solves);
    Ok(())
}

/// One line per epoch: index, mean loss, seconds since the stage started.
fn write_history(path: &Path, history: &[EpochLoss]) -> Result<(), DataError> {
    let mut text = String::new();
    for h in history {
        writeln!(text, "{} {:.17e} {:.3}", h.epoch, h.mean_loss, h.seconds).expect("string write");
    }
    fs::write(path, text).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

pub fn train(cfg: &RunConfig, dataset: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
    let dataset = dataset.unwrap_or_else(|| cfg.paths.dataset.clone());
    let out = out.unwrap_or_else(|| cfg.paths.checkpoints.clone());
    existing_dir(&out, "checkpoint")?;
    let ds = load_dataset(&dataset)?;
    let two_d = ds.grid.is_2d();
    let (manifest, done) = load_stages::<f32>(&out)?;
    if let Some(m) = &manifest {
        if m.arch != cfg.arch || m.two_d != two_d {
            return Err(CliError::Config(format!(
                "checkpoints in {} were trained with a different architecture",
                out.display()
            )));
        }
    }
    let k = cfg.plan.n_stages;
    if done.len() >= k {
        println!("all {k} stages already trained in {}", out.display());
        return Ok(());
    }
    if !done.is_empty() {
        println!("resuming after {} trained stage(s)", done.len());
    }
    let op = WaveOperator::new(&ds.grid, &ds.geometry)?;
    let tcfg = cfg.train_config();
    let plan = train_greedy(&op, &ds.samples, &cfg.arch, two_d, k, &tcfg, done, |i, stages, history| {
        save_plan(&out, stages)?;
        write_history(&out.join(format!("loss_stage_{i}.txt")), history)?;
        match (history.first(), history.last()) {
            (Some(a), Some(b)) => println!(
                "stage {i}: {} epochs, loss {:.6e} -> {:.6e}, {:.1} s",
                history.len(),
                a.mean_loss,
                b.mean_loss,
                b.seconds
            ),
            _ => println!("stage {i}: 0 epochs (identity)"),
        }
        Ok(())
    })?;
    println!("plan {} with {} stage(s); pde solves {}", out.join("plan.json").display(), plan.n_stages(), op.counter().total());
    Ok(())
}

pub fn reconstruct(
    cfg: &RunConfig,
    r: &Resolved,
    checkpoint: Option<PathBuf>,
    traces: &Path,
    out: &Path,
) -> Result<(), CliError> {
    writable_file(out)?;
    let checkpoint = checkpoint.unwrap_or_else(|| cfg.paths.checkpoints.clone());
    let plan = load_plan::<f32>(&checkpoint)?;
    if plan.stages[0].two_d != r.grid.is_2d() {
        return Err(CliError::Config("plan dimensionality does not match the configured grid".into()));
    }
    let y = read_traces(traces, &r.geometry)?;
    let op = WaveOperator::new(&r.grid, &r.geometry)?;
    let rec = run_plan(&op, &y, &plan)?;
    if rec.x.values().iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numerical("reconstruction contains non-finite values".into()));
    }
    write_volume(out, &rec.x)?;
    for (i, m) in rec.misfits.iter().enumerate() {
        println!("stage {i} misfit {m:.6e}");
    }
    println!(
        "pde solves {} (forward {}, adjoint {})",
        rec.solves.total(),
        rec.solves.forward,
        rec.solves.adjoint
    );
    Ok(())
}

pub fn lsqr(cfg: &RunConfig, r: &Resolved, traces: &Path, out: &Path, history: Option<PathBuf>) -> Result<(), CliError> {
    writable_file(out)?;
    let history = history.unwrap_or_else(|| out.with_extension("residuals.txt"));
    writable_file(&history)?;
    let y = read_traces(traces, &r.geometry)?;
    let op = WaveOperator::new(&r.grid, &r.geometry)?;
    let res = lsqr_wave(&op, &y, &cfg.lsqr)?;
    if res.volume.values().iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numerical("LSQR iterate contains non-finite values".into()));
    }
    write_volume(out, &res.volume)?;
    let mut text = String::new();
    for (k, v) in res.result.residual_history.iter().enumerate() {
        writeln!(text, "{k} {v:.17e}").expect("string write");
    }
    fs::write(&history, text).map_err(io(&history))?;
    println!("iterations {} stop {:?}", res.result.iterations, res.result.stop);
    if let Some(last) = res.result.residual_history.last() {
        println!("relative residual {last:.6e}");
    }
    println!(
        "pde solves {} total (forward {}, adjoint {}), {} in iterations",
        res.solves.total(),
        res.solves.forward,
        res.solves.adjoint,
        res.body_solves()
    );
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "volume".into())
}

fn write_panels(dir: &Path, name: &str, v: &Volume, norm: Normalization) -> Result<usize, CliError> {
    let mut written = 0;
    for axis in Axis::ALL {
        let mid = v.dims()[axis as usize] / 2;
        let panels = [("mip", mip(v, axis)), ("slice", slice(v, axis, mid)?)];
        for (kind, img) in panels {
            export_pgm(&img, &dir.join(format!("{name}_{kind}_{}.pgm", axis.name())), norm)?;
            written += 1;
        }
    }
    Ok(written)
}

pub fn eval(
    cfg: &RunConfig,
    r: &Resolved,
    truth: &Path,
    estimates: &[PathBuf],
    traces: Option<PathBuf>,
    panels: Option<PathBuf>,
) -> Result<(), CliError> {
    let panels = panels.unwrap_or_else(|| cfg.paths.output.clone());
    existing_dir(&panels, "panel")?;
    let gt = read_volume(truth)?;
    let peak = gt.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let peak = if peak > 0.0 { peak } else { 1.0 };
    let fixed = Normalization::Fixed(peak);
    let mut count = write_panels(&panels, "truth", &gt, fixed)?;
    if let Some(t) = traces {
        if gt.dims() != r.grid.dims() {
            return Err(CliError::Config(format!("truth dims {:?} differ from the grid {:?}", gt.dims(), r.grid.dims())));
        }
        let y = read_traces(&t, &r.geometry)?;
        let op = WaveOperator::new(&r.grid, &r.geometry)?;
        let g = op.adjoint(&y)?.scaled(-1.0);
        count += write_panels(&panels, "gradient", &g, Normalization::Minmax)?;
    }
    for e in estimates {
        let est = read_volume(e)?;
        if est.dims() != gt.dims() {
            return Err(CliError::Config(format!(
                "{} has dims {:?}, truth has {:?}",
                e.display(),
                est.dims(),
                gt.dims()
            )));
        }
        let m = mse(&gt, &est)?;
        let p = psnr(&gt, &est, peak)?;
        let p = if p.is_infinite() { "inf".to_string() } else { format!("{p:.4}") };
        println!("{} mse {m:.6e} psnr {p} dB", e.display());
        count += write_panels(&panels, &stem(e), &est, fixed)?;
    }
    println!("panels {count} written to {}", panels.display());
    Ok(())
}
