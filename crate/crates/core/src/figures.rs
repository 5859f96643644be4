//! Figures for a finished training run directory.

use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::cli::{read_metrics, RunManifest};
use crate::error::Result;
use crate::evalviz;
use crate::plot;
use crate::synthdata::{self, SynthSample};
use crate::trainer::{self, PldaModel};

fn run_model(run: &Path) -> Result<(RunManifest, PldaModel, Vec<SynthSample>)> {
    let manifest = RunManifest::load(run)?;
    let model = Checkpoint::load(&run.join("checkpoint.json"))?.to_model()?;
    let val = match &manifest.artifacts.dataset {
        Some(dir) => synthdata::load_dataset(dir)?.2,
        None => synthdata::generate_dataset(&manifest.config.data)?.1,
    };
    Ok((manifest, model, val))
}

/// Loss and mIoU curves, the threshold sweep, CAM overlays and the
/// similarity histograms (overlaid with `baseline` when given).
pub fn render_run(run: &Path, baseline: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let log = read_metrics(&run.join("metrics.jsonl"))?;

    let rows: Vec<Vec<f64>> = log
        .iter()
        .map(|r| vec![r.epoch as f64, r.lr, r.cls, r.uda, r.cps_s, r.cps_t, r.total, r.val_miou.unwrap_or(f64::NAN)])
        .collect();
    let p = out.join("losses.csv");
    plot::write_csv(&p, &["epoch", "lr", "cls", "uda", "cps_s", "cps_t", "total", "val_miou"], &rows)?;
    written.push(p);
    let series = |k: usize| rows.iter().map(|r| (r[0], r[k])).collect::<Vec<_>>();
    let p = out.join("losses.png");
    plot::render_curves(&p, &[series(2), series(3), series(4), series(5), series(6)])?;
    written.push(p);
    let p = out.join("val_miou.png");
    plot::render_curves(&p, &[series(7)])?;
    written.push(p);

    let (manifest, model, val) = run_model(run)?;
    let grid = evalviz::default_grid();
    let sweep = trainer::evaluate(&model, &val, &grid)?;
    let p = out.join("sweep.csv");
    plot::write_csv(&p, &["threshold", "miou"], &sweep.curve.iter().map(|&(t, m)| vec![t, m]).collect::<Vec<_>>())?;
    written.push(p);
    let p = out.join("sweep.png");
    plot::render_curves(&p, &[sweep.curve.clone()])?;
    written.push(p);

    let refs: Vec<&SynthSample> = val.iter().take(4).collect();
    for (s, (_, cam)) in refs.iter().zip(model.cams(&refs)?) {
        let up = evalviz::upsample_bilinear(&cam.normalized, s.height(), s.width());
        let p = out.join(format!("cam_{}.png", s.sample_id));
        plot::render_cam_overlay(&p, &s.image, &up)?;
        written.push(p);
    }

    let alpha = manifest.config.train.alpha;
    let seed = manifest.config.train.seed;
    let sim = trainer::similarity_diagnostic(&model, &val, alpha, 64, 20, seed)?;
    let mut hists = vec![sim.source_hist.clone(), sim.target_hist.clone()];
    let mut header = vec!["bin_center", "source", "target"];
    if let Some(b) = baseline {
        let (bm, bmodel, bval) = run_model(b)?;
        let bs = trainer::similarity_diagnostic(&bmodel, &bval, bm.config.train.alpha, 64, 20, bm.config.train.seed)?;
        hists.push(bs.source_hist.clone());
        hists.push(bs.target_hist.clone());
        header.extend(["baseline_source", "baseline_target"]);
        log::info!("similarity gap: run {:.4}, baseline {:.4}", sim.gap(), bs.gap());
    }
    let rows: Vec<Vec<f64>> = (0..sim.bins)
        .map(|i| {
            let mut r = vec![(i as f64 + 0.5) / sim.bins as f64];
            r.extend(hists.iter().map(|h| h[i]));
            r
        })
        .collect();
    let p = out.join("similarity.csv");
    plot::write_csv(&p, &header, &rows)?;
    written.push(p);
    let p = out.join("similarity.png");
    let refs: Vec<&[f64]> = hists.iter().map(|h| h.as_slice()).collect();
    plot::render_histograms(&p, &refs)?;
    written.push(p);
    Ok(written)
}
