use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sacnn_core::data::{
    load_dataset, read_dataset, synth_generate, write_dataset, Dataset, SynthSpec,
};
use sacnn_core::density::{downsample_sum, render_density};
use sacnn_core::eval::evaluate;
use sacnn_core::layers::{layer_suite, GradCheckOptions, GradCheckReport};
use sacnn_core::model::{
    build_model, crop_window, model_grad_check, Checkpoint, Init, ModelConfig, Variant, Widths,
};
use sacnn_core::training::{
    train, write_loss_csv, CheckpointPolicy, CountLossKind, PhaseSwitch, TrainConfig,
};
use sacnn_core::{Error, Rng};

use crate::settings::{hidden, key, switch, Settings};
use crate::{CliError, Subcommand};

/// Worst relative error the gradient check accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn load(manifest: &Path) -> Result<Dataset, CliError> {
    let ds = if manifest.is_dir() {
        read_dataset(manifest)?
    } else {
        load_dataset(manifest)?
    };
    Ok(ds)
}

fn model_config(s: &Settings) -> Result<ModelConfig, CliError> {
    let variant: Variant = s.required::<String>("variant")?.parse()?;
    let widths = Widths::preset(&s.required::<String>("preset")?)?;
    Ok(ModelConfig::new(variant, widths))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

pub const SYNTH: Subcommand = Subcommand {
    name: "synth",
    about: "Generate a synthetic crowd dataset",
    outputs: "  <out>/manifest.jsonl   one record per image\n  <out>/images/NNNNN.pgm  8-bit grayscale images",
    keys: &[
        key("seed", Some("0"), "random seed"),
        key("n", Some("10"), "number of images"),
        key("size", Some("64"), "image side in pixels"),
        key("min_count", Some("5"), "fewest heads per image"),
        key("max_count", Some("15"), "most heads per image"),
        key("out", None, "output directory"),
        switch("force", "false", "overwrite an existing manifest"),
    ],
    run: cmd_synth,
};

fn cmd_synth(s: &Settings) -> Result<(), CliError> {
    let out: PathBuf = s.required("out")?;
    let size = s.required("size")?;
    let spec = SynthSpec {
        seed: s.required("seed")?,
        n_images: s.required("n")?,
        height: size,
        width: size,
        min_count: s.required("min_count")?,
        max_count: s.required("max_count")?,
    };
    let ds = synth_generate(&spec)?;
    let manifest = write_dataset(&ds, &out, s.required("force")?)?;
    println!("wrote {} images to {}", ds.len(), manifest.display());
    Ok(())
}

pub const GEN_DENSITY: Subcommand = Subcommand {
    name: "gen-density",
    about: "Render ground-truth density maps",
    outputs: "  <out>/NNNNN.pgm    16-bit density heatmap per image, in manifest order;\n                     the header comment records the value of one grey level\n  <out>/density.csv  id,integral,head_count",
    keys: &[
        key("manifest", None, "manifest file or dataset directory"),
        key("sigma", Some("4"), "Gaussian standard deviation in pixels"),
        key("factor", Some("1"), "sum-pool the map by this factor after rendering"),
        key("out", None, "output directory"),
    ],
    run: cmd_gen_density,
};

fn cmd_gen_density(s: &Settings) -> Result<(), CliError> {
    let manifest: PathBuf = s.required("manifest")?;
    let out: PathBuf = s.required("out")?;
    let sigma: f64 = s.required("sigma")?;
    let factor: usize = s.required("factor")?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(CliError::Usage(format!(
            "--sigma must be positive, got {sigma}"
        )));
    }
    if factor == 0 {
        return Err(CliError::Usage("--factor must be ≥ 1".into()));
    }
    let ds = load(&manifest)?;
    create_dir(&out)?;
    let mut csv = String::from("id,integral,head_count\n");
    for (i, rec) in ds.images.iter().enumerate() {
        // Crop to a multiple of the factor so every output cell covers a full block.
        let (top, left, h, w) = crop_window(rec.height(), rec.width(), factor)
            .map_err(|e| Error::Data(format!("{}: {e}", rec.id)))?;
        let rec = rec.crop(top, left, h, w)?;
        let mut map = render_density(rec.heads(), h, w, sigma)?;
        if factor > 1 {
            map = downsample_sum(&map, factor)?;
        }
        map.write_pgm16(&out.join(format!("{i:05}.pgm")))?;
        writeln!(csv, "{},{},{}", rec.id, map.integral(), rec.count()).unwrap();
    }
    write_file(&out.join("density.csv"), csv.as_bytes())?;
    println!("wrote {} density maps to {}", ds.len(), out.display());
    Ok(())
}

pub const TRAIN: Subcommand = Subcommand {
    name: "train",
    about: "Two-phase training: density loss, then density plus count loss",
    outputs: "  <ckpt-dir>/final.ckpt        parameters after the last epoch\n  <ckpt-dir>/phase1.ckpt       parameters when joint training began\n  <ckpt-dir>/epoch_NNNN.ckpt   every --ckpt-every epochs\n  <loss-csv>                   epoch,iteration,phase,density_loss,count_loss,joint_loss,lr\n                               (default <ckpt-dir>/loss.csv)",
    keys: &[
        key("manifest", None, "manifest file or dataset directory"),
        key("variant", Some("scale-adaptive"), "single-scale, two-scale or scale-adaptive"),
        key("preset", Some("full"), "channel widths: full or tiny"),
        key("init", Some("gaussian:0.01"), "weight init: gaussian:<stddev> or he"),
        key("epochs", Some("250"), "training epochs"),
        key("lr", Some("1e-6"), "initial learning rate"),
        key("momentum", Some("0.9"), "SGD momentum"),
        key("count_weight", Some("0.1"), "count loss weight in phase 2"),
        key("lr_end", Some("1e-8"), "learning rate floor"),
        key("milestones", Some("100,200"), "epochs at which the learning rate drops 10x"),
        key("density_weight", Some("1"), "density loss weight"),
        key("count_loss", Some("relative"), "relative, absolute or none"),
        key("phase1_window", Some("5"), "epochs per window in the phase-1 convergence test"),
        key("phase1_tol", Some("0.01"), "switch when a window improves L_D by less than this fraction"),
        key("phase1_max_epochs", Some("none"), "switch to joint training after this many epochs"),
        key("sigma", Some("4"), "ground-truth Gaussian width"),
        switch("augment", "true", "train on nine random quarter patches per image"),
        key("seed", Some("0"), "random seed"),
        key("ckpt_dir", Some("checkpoints"), "checkpoint directory"),
        key("ckpt_every", Some("none"), "also checkpoint every N epochs"),
        key("loss_csv", None, "loss curve path"),
    ],
    run: cmd_train,
};

fn cmd_train(s: &Settings) -> Result<(), CliError> {
    let manifest: PathBuf = s.required("manifest")?;
    let mut model_cfg = model_config(s)?;
    model_cfg.init = s.required::<String>("init")?.parse::<Init>()?;
    let ckpt_dir: PathBuf = s.required("ckpt_dir")?;
    let loss_csv = s
        .optional::<PathBuf>("loss_csv")?
        .unwrap_or_else(|| ckpt_dir.join("loss.csv"));
    let cfg = TrainConfig {
        lr_start: s.required("lr")?,
        lr_end: s.required("lr_end")?,
        lr_milestones: s.list("milestones")?,
        momentum: s.required("momentum")?,
        epochs: s.required("epochs")?,
        density_weight: s.required("density_weight")?,
        count_weight: s.required("count_weight")?,
        count_loss: s
            .required::<String>("count_loss")?
            .parse::<CountLossKind>()?,
        phase1: PhaseSwitch {
            window: s.required("phase1_window")?,
            min_rel_improvement: s.optional("phase1_tol")?,
            max_epochs: s.optional("phase1_max_epochs")?,
        },
        sigma: s.required("sigma")?,
        augment: s.required("augment")?,
        seed: s.required("seed")?,
        checkpoint: Some(CheckpointPolicy {
            dir: ckpt_dir.clone(),
            every: s.optional("ckpt_every")?,
        }),
    };
    let ds = load(&manifest)?;
    let started = Instant::now();
    let outcome = train(&ds, model_cfg, &cfg)?;
    if let Some(parent) = loss_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_loss_csv(&outcome.history, &loss_csv)?;
    if let Some(params) = outcome.phase1_params {
        let mut m = outcome.model.clone();
        m.set_params(params)?;
        Checkpoint::from_graph(&m).save(&ckpt_dir.join("phase1.ckpt"))?;
    }
    let last = outcome.history.last();
    println!(
        "iterations={} phase2_epoch={} final_density_loss={} elapsed={:.1}s",
        outcome.history.len(),
        outcome
            .phase2_epoch
            .map_or("none".into(), |e| e.to_string()),
        last.map_or(f64::NAN, |r| r.density),
        started.elapsed().as_secs_f64()
    );
    println!("checkpoint {}", ckpt_dir.join("final.ckpt").display());
    Ok(())
}

pub const EVAL: Subcommand = Subcommand {
    name: "eval",
    about: "Score a checkpoint's counts against annotations",
    outputs: "  <report>                 id,predicted,ground_truth,abs_error plus a summary comment\n  <report>.json            {\"n\", \"mae\", \"mse\"} (report path with a .json extension)",
    keys: &[
        key("manifest", None, "manifest file or dataset directory"),
        key("ckpt", None, "checkpoint file"),
        key("variant", Some("scale-adaptive"), "architecture the checkpoint was trained with"),
        key("preset", Some("full"), "channel widths the checkpoint was trained with"),
        key("report", Some("eval.csv"), "per-image report path"),
    ],
    run: cmd_eval,
};

fn cmd_eval(s: &Settings) -> Result<(), CliError> {
    let manifest: PathBuf = s.required("manifest")?;
    let ckpt_path: PathBuf = s.required("ckpt")?;
    let report_path: PathBuf = s.required("report")?;
    let cfg = model_config(s)?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let mut model = build_model(cfg, &mut Rng::seed(0))?;
    ckpt.restore_into(&mut model)?;
    let ds = load(&manifest)?;
    let report = evaluate(&mut model, &ds)?;
    if let Some(parent) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    report.write_csv(&report_path)?;
    let json = serde_json::to_string_pretty(&report.summary_json()).expect("plain JSON value");
    write_file(&report_path.with_extension("json"), json.as_bytes())?;
    println!("MAE={} MSE={}", report.mae, report.mse);
    Ok(())
}

pub const GRADCHECK: Subcommand = Subcommand {
    name: "gradcheck",
    about: "Compare every backward pass with central finite differences",
    outputs: "  stdout only: worst relative error per layer kind and per model",
    keys: &[
        key("variant", Some("all"), "model variant to check, or all"),
        key("preset", Some("tiny"), "channel widths"),
        key("seed", Some("0"), "random seed"),
        key(
            "samples",
            Some("16"),
            "coordinates checked per model parameter tensor (layers are checked exhaustively)",
        ),
        hidden("corrupt_backward", "false"),
    ],
    run: cmd_gradcheck,
};

fn cmd_gradcheck(s: &Settings) -> Result<(), CliError> {
    let variant: String = s.required("variant")?;
    let variants: Vec<Variant> = if variant == "all" {
        Variant::ALL.to_vec()
    } else {
        vec![variant.parse()?]
    };
    let widths = Widths::preset(&s.required::<String>("preset")?)?;
    let opts = GradCheckOptions {
        max_samples_per_tensor: Some(s.required("samples")?),
        analytic_perturbation: if s.required("corrupt_backward")? {
            0.05
        } else {
            0.0
        },
        ..GradCheckOptions::default()
    };
    let mut rng = Rng::seed(s.required("seed")?);
    let started = Instant::now();
    let layer_opts = GradCheckOptions {
        max_samples_per_tensor: None,
        ..opts.clone()
    };
    let mut results: Vec<(String, GradCheckReport)> = layer_suite(&mut rng, &layer_opts)?
        .into_iter()
        .map(|(kind, r)| (kind.to_string(), r))
        .collect();
    for v in variants {
        let r = model_grad_check(ModelConfig::new(v, widths), &mut rng, &opts)?;
        results.push((format!("model({v})"), r));
    }
    let mut offenders = Vec::new();
    for (name, r) in &results {
        let ok = r.max_rel_error < GRADCHECK_TOLERANCE;
        print!(
            "{name:<24} worst_rel_error={:.3e} checked={} kinks_skipped={} {}",
            r.max_rel_error,
            r.checked,
            r.kinks,
            if ok { "ok" } else { "FAIL" }
        );
        match (ok, r.worst_values) {
            (false, Some((a, n))) => println!(" analytic={a:e} numeric={n:e}"),
            _ => println!(),
        }
        if !ok {
            offenders.push(name.as_str());
        }
    }
    println!("elapsed={:.2}s", started.elapsed().as_secs_f64());
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "relative error ≥ {GRADCHECK_TOLERANCE:e} in: {}",
            offenders.join(", ")
        )))
    }
}
