use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::*;
use super::pipeline::*;
use super::*;
use crate::metrics::gap_report;

/// A run small enough for unit tests: tiny encoder, a few steps and epochs.
pub(crate) fn micro() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.name = "micro".into();
    cfg.encoder = "tiny".into();
    cfg.input_shape = None;
    cfg.dataset.pretrain = 4;
    cfg.dataset.train = 3;
    cfg.dataset.val = 1;
    cfg.dataset.test = 5;
    cfg.methods = vec![Method::Simmim];
    cfg.shots = vec![Shots::Count(2)];
    cfg.seeds = vec![0];
    cfg.pretrain = PretrainBlock { steps: 3, batch_size: 2, warmup_steps: 1, lr: 1e-3 };
    cfg.finetune.epochs = 2;
    cfg.finetune.eval_every = 1;
    cfg.analysis.cka_probes = 6;
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, cfg.to_json()).unwrap();
    p
}

#[test]
fn config_roundtrips_and_validates() {
    let cfg = ExperimentConfig::desk();
    cfg.validate().unwrap();
    let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(cfg.models().len(), 10);
    assert_eq!(cfg.models()[0], SCRATCH);
    assert_eq!(finetune_jobs(&cfg).len(), 10 * 2 * 4 * 3);

    let broken = [
        ExperimentConfig { shots: vec![Shots::Count(10), Shots::Count(5)], ..cfg.clone() },
        ExperimentConfig { seeds: vec![], ..cfg.clone() },
        ExperimentConfig { encoder: "huge".into(), ..cfg.clone() },
        ExperimentConfig { shots: vec![Shots::Count(41)], ..cfg.clone() },
        ExperimentConfig { methods: vec![], scratch: false, ..cfg.clone() },
    ];
    for b in broken {
        assert!(matches!(b.validate(), Err(CliError::Config(_))), "{:?}", b.shots);
    }
}

#[test]
fn config_schema_version_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::desk().to_json()).unwrap();
    v["schema_version"] = 99.into();
    let p = dir.path().join("c.json");
    fs::write(&p, v.to_string()).unwrap();
    let e = ExperimentConfig::load(&p).unwrap_err();
    assert!(e.to_string().contains("schema_version 99"), "{e}");
    v.as_object_mut().unwrap().remove("schema_version");
    fs::write(&p, v.to_string()).unwrap();
    assert_eq!(ExperimentConfig::load(&p).unwrap_err().exit_code(), 2);
}

#[test]
fn exit_codes() {
    assert_eq!(main_with(["sslbench", "--bogus", "run"]), 2);
    assert_eq!(main_with(["sslbench", "--help"]), 0);
    assert_eq!(main_with(["sslbench", "run", "--config", "/nonexistent/config.json", "--out", "/tmp/x"]), 2);
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), &micro());
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(main_with(["sslbench", "finetune", "--model", "nope", "--config", p.to_str().unwrap(), "--out", out]), 2);
    let ckpt = dir.path().join("missing.ckpt");
    assert_eq!(main_with(["sslbench", "infer", "--checkpoint", ckpt.to_str().unwrap(), "--volume", "/nonexistent.vol", "--out", out]), 3);
}

#[test]
fn output_root_comes_from_the_environment() {
    std::env::set_var(OUT_ENV, "/tmp/from-env");
    let cli = <Cli as clap::Parser>::try_parse_from(["sslbench", "phantom"]).unwrap();
    std::env::remove_var(OUT_ENV);
    assert_eq!(cli.out.as_deref(), Some(Path::new("/tmp/from-env")));
    let cli = <Cli as clap::Parser>::try_parse_from(["sslbench", "sweep", "--sizes", "0,50,200", "--jobs", "2", "--resume"]).unwrap();
    assert!(matches!(cli.command, Command::Sweep { ref sizes } if sizes == &[0, 50, 200]));
    assert!(cli.resume && cli.jobs == 2);
}

#[test]
fn parallel_keeps_order_and_reports_first_failure() {
    let out = parallel(7, 3, |i| Ok(i * i)).unwrap();
    assert_eq!(out, vec![0, 1, 4, 9, 16, 25, 36]);
    let err = parallel(7, 3, |i| if i % 3 == 2 { Err(CliError::Config(format!("job {i}"))) } else { Ok(i) }).unwrap_err();
    assert_eq!(err.to_string(), "config error: job 2");
}

#[test]
fn micro_run_is_complete_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro();
    let opts = RunOptions::new(dir.path().join("run"));
    let report = run_experiment(&cfg, &opts).unwrap();
    assert_eq!(report.models, vec![SCRATCH.to_string(), "simmim".into()]);
    assert_eq!(report.rows.iter().filter(|r| r.model == "simmim").count(), 2);
    assert_eq!(report.rows.len(), 2 * 2);
    assert_eq!(report.cells.len(), 2);
    assert_eq!(report.cka.len(), 1);
    assert_eq!(report.cka[0].taps.len(), crate::encoder::EncoderConfig::tiny().num_blocks() + 1);
    assert_eq!(report.modality_gaps.len(), 2);

    for c in &report.cells {
        let (best, _) = c.mean_dsc.iter().fold((None, f64::NEG_INFINITY), |(b, v), (k, x)| if *x > v { (Some(k), *x) } else { (b, v) });
        assert_eq!(c.gap.as_ref().unwrap().reference, *best.unwrap());
        let rows: Vec<f64> = report.rows.iter().filter(|r| r.task == c.task && r.modality == c.modality && r.shots == c.shots).map(|r| r.mean_dsc).collect();
        let brute = rows.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(c.mean_dsc.values().copied().fold(f64::NEG_INFINITY, f64::max), brute);
    }

    let json = fs::read(opts.out.join("report.json")).unwrap();
    assert_eq!(String::from_utf8(json.clone()).unwrap(), report.to_json());
    for f in ["dsc_bars", "structure_dsc", "fewshot_gap", "modality_gap", "training_curves", "cka_profile", "cka_heatmap_simmim"] {
        assert!(opts.out.join("plots").join(format!("{f}.svg")).exists(), "{f}");
        assert!(opts.out.join("plots").join(format!("{f}.csv")).exists(), "{f}");
    }

    assert!(matches!(run_experiment(&cfg, &opts), Err(CliError::Config(_))));
    let ckpt = opts.out.join("finetune/simmim/organs_A/2/seed0/segmentor.ckpt");
    let stamp = fs::metadata(&ckpt).unwrap().modified().unwrap();
    let again = run_experiment(&cfg, &RunOptions { resume: true, ..opts.clone() }).unwrap();
    assert_eq!(again, report);
    assert_eq!(fs::metadata(&ckpt).unwrap().modified().unwrap(), stamp);
    assert_eq!(fs::read(opts.out.join("report.json")).unwrap(), json);

    let rebuilt = run_experiment(&cfg, &RunOptions { existing_only: true, ..opts.clone() }).unwrap();
    assert_eq!(rebuilt, report);
    let other = ExperimentConfig { seeds: vec![5], ..cfg.clone() };
    assert!(matches!(run_experiment(&other, &RunOptions { resume: true, ..opts.clone() }), Err(CliError::Config(_))));
    fs::remove_file(&ckpt).unwrap();
    let e = run_experiment(&cfg, &RunOptions { existing_only: true, ..opts.clone() }).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("finetune simmim") && e.to_string().contains("seed 0"), "{e}");
}

#[test]
fn plotted_gaps_equal_metrics_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro();
    let opts = RunOptions::new(dir.path().join("run"));
    let report = run_experiment(&cfg, &opts).unwrap();
    let csv = fs::read_to_string(opts.out.join("plots/fewshot_gap.csv")).unwrap();
    for c in &report.cells {
        let direct = gap_report(&c.shots.to_string(), &c.mean_dsc).unwrap();
        for (model, gap) in &direct.gaps {
            let line = format!("{} {} {},{model},{gap}", c.task, c.modality, c.shots);
            assert!(csv.lines().any(|l| l == line), "{line} missing from\n{csv}");
        }
    }
    let bars = plots::dsc_bars(&report);
    assert_eq!(bars.series.len(), 2);
    assert!(bars.values.iter().all(|row| row.len() == 2 && row.iter().all(|v| v.is_some())));
}

#[test]
fn self_comparison_heatmap_is_flat() {
    let cfg = micro();
    let enc = cfg.encoder_config().unwrap();
    let params = reference_encoder(&enc, 1);
    let probes: Vec<(String, Vec<f64>)> = (0..6u64)
        .map(|i| {
            let (v, _) = crate::phantom::generate_phantom(i, crate::phantom::Modality::A, [16; 3]).unwrap();
            (v.id().to_string(), center_crop(v.voxels(), [16; 3], [8; 3]))
        })
        .collect();
    let refs: Vec<(&str, &[f64])> = probes.iter().map(|(i, v)| (i.as_str(), v.as_slice())).collect();
    let taps = crate::cka::default_taps(&enc);
    let m = crate::cka::layerwise_cka(&enc, &params, &params, &refs, &taps, crate::cka::CkaScheme::Full).unwrap();
    assert!(m.diagonal().iter().all(|v| (v - 1.0).abs() < 1e-8));
    let lines = plots::Lines {
        title: "self".into(),
        x_label: "tap".into(),
        y_label: "CKA".into(),
        series: vec![("self".into(), taps.iter().zip(m.diagonal()).map(|(t, v)| (*t as f64, v)).collect())],
    };
    assert!(lines.csv().lines().skip(1).all(|l| (l.rsplit(',').next().unwrap().parse::<f64>().unwrap() - 1.0).abs() < 1e-8));
}

#[test]
fn sweep_counts_points_and_rejects_oversized_pools() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro();
    cfg.dataset.modalities = vec![crate::phantom::Modality::A];
    let opts = RunOptions::new(dir.path().join("sweep"));
    assert!(matches!(sweep_pretrain_size(&cfg, &[0, 5], &opts), Err(CliError::Config(_))));
    assert!(matches!(sweep_pretrain_size(&cfg, &[2, 0], &opts), Err(CliError::Config(_))));
    let r = sweep_pretrain_size(&cfg, &[0], &opts).unwrap();
    assert_eq!(r.points.len(), 1);
    assert!(!opts.out.join("sweep/size0/pretrain").exists());
    let opts = RunOptions::new(dir.path().join("sweep2"));
    let r = sweep_pretrain_size(&cfg, &[0, 2, 4], &opts).unwrap();
    assert_eq!(r.points.len(), 3);
    assert_eq!(r.points.iter().map(|p| p.size).collect::<Vec<_>>(), vec![0, 2, 4]);
    assert!(opts.out.join("plots/size_curve.svg").exists());
    let by_size: BTreeMap<usize, usize> = r.points.iter().map(|p| (p.size, p.per_seed.len())).collect();
    assert!(by_size.values().all(|&n| n == 1));
}
