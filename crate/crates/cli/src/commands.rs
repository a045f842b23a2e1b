//! One function per subcommand.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use pcmamba::data::{read_dataset, write_dataset, Dataset, DatasetManifest, LesionParams};
use pcmamba::kv::{parse_list, parse_size, KvText};
use pcmamba::metrics::{evaluate_labels, render_csv, summarize, write_summary, MetricsRow};
use pcmamba::network::{build_variant, ForwardCtx, Network, NetworkConfig, VariantKind, NETWORK_KEYS};
use pcmamba::params::ParamStore;
use pcmamba::pcblock::{crn_forward, init_crn, ppm_forward, CrnConfig, FeatureMap, PpmConfig};
use pcmamba::ssm::{selective_scan, SsmParams};
use pcmamba::tensor::Tensor;
use pcmamba::train::{train_on, TrainConfig, TRAIN_KEYS};
use pcmamba::verify::{
    bias_variance_probe, convergence_experiment, data_efficiency_probe, grad_suite, load_reports, probe_train_config,
    render_summary, scan_oracle_suite, smoothness_probe, BiasVarianceConfig, GradProfile, ProbeReport,
};

use crate::error::{CliError, Result};
use crate::{BenchArgs, BenchOp, EvalArgs, GenDataArgs, ReportArgs, SplitArg, Suite, TrainArgs, VerifyArgs};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn size_arg(s: &str) -> Result<(usize, usize)> {
    parse_size(s).map_err(|e| usage(format!("--size: {e}")))
}

fn list_arg<V: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<V>>
where
    V::Err: std::fmt::Display,
{
    parse_list(s).map_err(|e| usage(format!("{flag}: {e}")))
}

/// Reads a settings file and rejects keys neither the network nor training understands.
fn read_config(path: Option<&Path>) -> Result<KvText> {
    let Some(path) = path else {
        return Ok(KvText::new());
    };
    let kv = KvText::parse(&fs::read_to_string(path)?)?;
    let known: Vec<&str> = NETWORK_KEYS.iter().chain(TRAIN_KEYS).copied().collect();
    kv.reject_unknown(&known)?;
    Ok(kv)
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let (height, width) = size_arg(&a.size)?;
    let mut manifest = DatasetManifest {
        n_samples: a.n,
        height,
        width,
        seed: a.seed,
        ..DatasetManifest::default()
    };
    if let Some(s) = a.noise {
        manifest.noise_sigma = s;
    }
    if let Some(spec) = &a.lesions {
        manifest.lesions = match spec.as_str() {
            "none" => LesionParams::NONE,
            s => s.parse().map_err(|e| usage(format!("--lesions: {e}")))?,
        };
    }
    if let Some(s) = &a.split {
        let parts: Vec<f64> = list_arg("--split", s)?;
        manifest.split = parts.try_into().map_err(|_| usage("--split needs three fractions"))?;
    }
    manifest.validate().map_err(|e| usage(e.to_string()))?;
    let data = Dataset::generate(&manifest)?;
    write_dataset(&data, &a.out)?;
    let split = data.split();
    println!(
        "wrote {} samples ({}x{}) to {}: {} train, {} val, {} test",
        data.len(),
        height,
        width,
        a.out.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

/// Defaults, then the settings file, then flags.
fn resolve_training(a: &TrainArgs, data: &Dataset) -> Result<(NetworkConfig, TrainConfig)> {
    let kv = read_config(a.config.as_deref())?;
    let mut network = NetworkConfig::default();
    network.apply_kv(&kv)?;
    let size = (data.manifest.height, data.manifest.width);
    if kv.get("input_size").is_some() && network.input_size != size {
        return Err(usage(format!(
            "config input_size {:?} does not match the dataset's {size:?}",
            network.input_size
        )));
    }
    network.input_size = size;
    if let Some(v) = a.variant {
        network.variant = v.into();
    }
    if let Some(s) = a.init_seed {
        network.seed = s;
    }
    network.validate()?;

    let mut train = TrainConfig::default();
    train.apply_kv(&kv)?;
    if let Some(v) = a.epochs {
        train.epochs = v;
    }
    if let Some(v) = a.lr {
        train.lr0 = v;
        train.lr_min = train.lr_min.min(v);
    }
    if let Some(v) = a.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = a.seed {
        train.seed = v;
    }
    train.dry_run = a.dry_run;
    train.checkpoint_dir = Some(a.out.clone());
    train.validate()?;
    Ok((network, train))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let (network, cfg) = resolve_training(a, &data)?;
    fs::create_dir_all(&a.out)?;
    let mut resolved = network.to_kv().render();
    resolved.push_str(&cfg.to_kv().render());
    fs::write(a.out.join("config.txt"), resolved)?;

    let split = data.split();
    let mut net = build_variant::<f32>(&network)?;
    eprintln!(
        "training {} ({} parameters) on {} samples, validating on {}",
        network.variant,
        net.num_parameters(),
        split.train.len(),
        split.val.len()
    );
    let out = train_on(&mut net, &data.samples, &split.train, &split.val, &cfg)?;
    for e in &out.history.epochs {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  train {:.4}  val {:.4}  dice {:.4}  {:.1}s",
            e.epoch + 1,
            e.lr,
            e.train_loss,
            e.val_loss,
            e.mean_val_dice(),
            e.seconds
        );
    }
    println!(
        "best epoch {} with mean val dice {:.4}; checkpoints in {}",
        out.best_epoch + 1,
        out.history.best_dice(),
        a.out.display()
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let net = Network::<f32>::load(&a.checkpoint)?;
    let size = (data.manifest.height, data.manifest.width);
    if net.config.input_size != size {
        return Err(usage(format!(
            "checkpoint expects {:?} images, dataset has {size:?}",
            net.config.input_size
        )));
    }
    let split = data.split();
    let indices: Vec<usize> = match a.split {
        SplitArg::All => (0..data.len()).collect(),
        SplitArg::Train => split.train,
        SplitArg::Val => split.val,
        SplitArg::Test => split.test,
    };
    if indices.is_empty() {
        return Err(usage(format!("the {:?} split of this dataset is empty", a.split)));
    }
    let ctx = ForwardCtx {
        mask_seed: a.seed,
        ..ForwardCtx::default()
    };
    let k = net.config.num_classes;
    let per_sample: Vec<Vec<MetricsRow>> = indices
        .par_iter()
        .map(|&i| -> Result<Vec<MetricsRow>> {
            let s = &data.samples[i];
            let pred = net.segment(&s.image, &ctx)?;
            let metrics = evaluate_labels(&pred, &s.label, s.height, s.width, k, a.spacing)?;
            Ok(metrics
                .into_iter()
                .enumerate()
                .map(|(c, metrics)| MetricsRow {
                    sample: i,
                    class: c as u8 + 1,
                    metrics,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<MetricsRow> = per_sample.into_iter().flatten().collect();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, render_csv(&rows))?;
    let summary = summarize(&rows);
    write_summary(&summary, a.out.with_extension("summary.json"))?;
    for c in &summary.classes {
        println!(
            "class {}: dice {:.4}  iou {:.4}  hd95 {}  asd {}",
            c.class,
            c.dice,
            c.iou,
            c.hd95.map_or("n/a".into(), |v| format!("{v:.3}")),
            c.asd.map_or("n/a".into(), |v| format!("{v:.3}")),
        );
    }
    println!("mean dice {:.4} over {} samples", summary.mean_dice, indices.len());
    Ok(())
}

/// Settings shared by the training-based probes.
struct ProbeSetup {
    data: Dataset,
    network: NetworkConfig,
    train: TrainConfig,
}

fn probe_setup(a: &VerifyArgs) -> Result<ProbeSetup> {
    let (height, width) = size_arg(&a.size)?;
    let manifest = DatasetManifest {
        n_samples: a.n,
        height,
        width,
        ..DatasetManifest::default()
    };
    manifest.validate().map_err(|e| usage(e.to_string()))?;
    let kv = read_config(a.config.as_deref())?;
    let mut network = NetworkConfig::default();
    network.apply_kv(&kv)?;
    network.input_size = (height, width);
    network.validate()?;
    let mut train = probe_train_config();
    train.apply_kv(&kv)?;
    train.validate()?;
    Ok(ProbeSetup {
        data: Dataset::generate(&manifest)?,
        network,
        train,
    })
}

const PAIR: [VariantKind; 2] = [VariantKind::FullPc, VariantKind::PlainE2e];

pub fn verify(a: &VerifyArgs) -> Result<()> {
    let seeds: Vec<u64> = list_arg("--seeds", &a.seeds)?;
    if seeds.is_empty() {
        return Err(usage("--seeds needs at least one seed"));
    }
    let wants = |s: Suite| a.suite == s || a.suite == Suite::All;
    let trains = [
        Suite::Convergence,
        Suite::Smoothness,
        Suite::Biasvar,
        Suite::DataEfficiency,
    ]
    .into_iter()
    .any(wants);
    let setup = if trains { Some(probe_setup(a)?) } else { None };

    let mut reports: Vec<ProbeReport> = Vec::new();
    let mut keep = |r: ProbeReport| -> Result<()> {
        let path = r.save(&a.out)?;
        eprintln!(
            "{}: {} ({:.1}s) -> {}",
            r.probe,
            if r.passed { "pass" } else { "FAIL" },
            r.seconds,
            path.display()
        );
        reports.push(r);
        Ok(())
    };
    if wants(Suite::Scan) {
        let scan_seeds: Vec<u64> = (0..a.scan_seeds).collect();
        keep(scan_oracle_suite(&[1, 2, 3, 8, 64, 257, 1024], &scan_seeds)?)?;
    }
    if wants(Suite::Grad) {
        keep(grad_suite::<f64>(GradProfile::F64)?)?;
        keep(grad_suite::<f32>(GradProfile::F32)?)?;
    }
    if let Some(s) = &setup {
        if wants(Suite::Convergence) {
            let train = TrainConfig {
                epochs: a.epochs,
                ..s.train.clone()
            };
            keep(convergence_experiment(
                &PAIR,
                &s.data,
                &s.network,
                &train,
                a.dice_threshold,
                a.target_epochs,
                &seeds,
            )?)?;
        }
        if wants(Suite::Smoothness) {
            let split = s.data.split();
            let batch: Vec<_> = split.train.iter().take(4).map(|&i| s.data.samples[i].clone()).collect();
            keep(smoothness_probe(
                &PAIR, &batch, &s.network, &s.train, a.pairs, a.radius, &seeds,
            )?)?;
        }
        if wants(Suite::Biasvar) {
            let cfg = BiasVarianceConfig {
                network: s.network.clone(),
                train: TrainConfig {
                    epochs: a.resample_epochs,
                    ..s.train.clone()
                },
                manifest: s.data.manifest.clone(),
                pool_size: a.pool,
                n_resamples: a.resamples,
                probe_points: a.probe_points,
                ..BiasVarianceConfig::default()
            };
            keep(bias_variance_probe(&PAIR, &cfg, &seeds)?)?;
        }
        if wants(Suite::DataEfficiency) {
            let train = TrainConfig {
                epochs: a.epochs.min(5),
                ..s.train.clone()
            };
            keep(data_efficiency_probe(
                VariantKind::FullPc,
                &s.data,
                &s.network,
                &train,
                0.1,
                0.95,
                seeds[0],
            )?)?;
        }
    }
    print!("{}", render_summary(&reports));
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.probe.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Threshold(format!("checks failed in {}", failed.join(", "))))
    }
}

fn time_reps(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / reps as f64;
    Ok((mean, times.iter().copied().fold(f64::INFINITY, f64::min)))
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let sizes: Vec<usize> = list_arg("--sizes", &a.sizes)?;
    if sizes.is_empty() || sizes.contains(&0) || a.reps == 0 || a.channels == 0 {
        return Err(usage("--sizes, --reps and --channels must be positive"));
    }
    let c = a.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    println!("op       size   reps   mean_ms    min_ms");
    for &n in &sizes {
        let (mean, min) = match a.op {
            BenchOp::Scan => {
                let p = SsmParams::<f32>::random(c, 8, &mut rng);
                let u = Tensor::<f32>::randn(vec![n, c], 1.0, &mut rng);
                time_reps(a.reps, || selective_scan(&u, &p).map(|_| ()).map_err(Into::into))?
            }
            BenchOp::Ppm => {
                let f = FeatureMap::new(Tensor::<f32>::randn(vec![n, n, c], 1.0, &mut rng))?;
                let cfg = PpmConfig::default();
                time_reps(a.reps, || ppm_forward(&f, &cfg).map(|_| ()).map_err(Into::into))?
            }
            BenchOp::Crn => {
                let f = FeatureMap::new(Tensor::<f32>::randn(vec![n, n, c], 1.0, &mut rng))?;
                let cfg = CrnConfig::default();
                let mut store = ParamStore::new();
                init_crn(&mut store, a.seed, "crn", c, &cfg)?;
                time_reps(a.reps, || {
                    crn_forward(&f, &cfg, &store, "crn").map(|_| ()).map_err(Into::into)
                })?
            }
            BenchOp::Forward => {
                let network = NetworkConfig {
                    input_size: (n, n),
                    seed: a.seed,
                    ..NetworkConfig::default()
                };
                network.validate().map_err(|e| usage(e.to_string()))?;
                let net = build_variant::<f32>(&network)?;
                let image = Tensor::<f32>::uniform(vec![1, n, n], 0.0, 1.0, &mut rng);
                time_reps(a.reps, || {
                    net.forward(&image, &ForwardCtx::default())
                        .map(|_| ())
                        .map_err(Into::into)
                })?
            }
        };
        let op = format!("{:?}", a.op).to_lowercase();
        println!("{op:<8} {n:>5} {:>6} {:>9.3} {:>9.3}", a.reps, mean * 1e3, min * 1e3);
    }
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let reports = load_reports(&a.dir)?;
    if reports.is_empty() {
        return Err(usage(format!("no reports in {}", a.dir.display())));
    }
    print!("{}", render_summary(&reports));
    Ok(())
}
