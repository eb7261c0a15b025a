use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;

use super::{
    run_training, tail_stats, ExperimentConfig, ExperimentError, ExperimentKind, RunManifest,
    RunSinks, TrainRunConfig,
};
use crate::data::TokenGrid;
use crate::model::{
    forward_with, init_model, ForwardOptions, ModelConfig, Position, TokenKind, TokenSequence,
};
use crate::telemetry::{categorize_lines, expected_step_cost, parse_telemetry_csv, CostModel};
use crate::tensor::{streams, RngStream};
use crate::theory::{
    build_task_pair, closed_form_inner_product, decay_bound, mixture_eigenvalues,
    simulate_image_only, simulate_mixture_gd, MixtureSpec,
};
use crate::train::{TrainError, TrainMode};

/// Tolerance of the closed-form check on the theory trajectory.
pub const CLOSED_FORM_TOL: f64 = 1e-10;
/// Allowed relative deviation of the measured attention ratio from `T²`.
pub const FLOP_RATIO_TOL: f64 = 0.15;

/// Runs `cfg` end to end inside `out`, writing artifacts and the manifest.
///
/// Configuration and I/O problems are errors; failed invariant assertions
/// are recorded in the returned manifest (nonzero [`RunManifest::exit_code`]).
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest, ExperimentError> {
    cfg.validate()?;
    let start = Instant::now();
    fs::create_dir_all(out)?;
    let mut m = RunManifest {
        kind: cfg.kind.name().to_string(),
        config: cfg.canonical(),
        ..Default::default()
    };
    fs::write(out.join("config.toml"), &m.config)?;
    m.add_artifact(out, "config.toml")?;
    match cfg.kind {
        ExperimentKind::Theory => run_theory(cfg, out, &mut m)?,
        ExperimentKind::Train => run_train(cfg, out, &mut m)?,
        ExperimentKind::Pcgrad => run_pcgrad(cfg, out, &mut m)?,
        ExperimentKind::Cost => run_cost(cfg, out, &mut m)?,
        ExperimentKind::MotionCat => run_motion_cat(cfg, out, &mut m)?,
    }
    m.check(!cfg.force_failure, "forced_failure", || {
        "force_failure is set".into()
    });
    m.duration_ms = start.elapsed().as_millis();
    m.write(out)?;
    Ok(m)
}

fn run_theory(
    cfg: &ExperimentConfig,
    out: &Path,
    m: &mut RunManifest,
) -> Result<(), ExperimentError> {
    let t = &cfg.theory;
    let pair = build_task_pair(&t.eig1, &t.eig2, cfg.seed, t.perturbation_scale)?;
    let spec = MixtureSpec {
        p: cfg.p,
        eta: t.eta,
        z0: t.z0.clone(),
        steps: t.steps,
    };
    let seeds: Vec<u64> = if t.stochastic {
        cfg.seed_list().collect()
    } else {
        vec![cfg.seed]
    };
    let exact = !t.stochastic && pair.is_commuting();
    let c0 = pair.coords(&DVector::from_vec(t.z0.clone()));
    let mu = mixture_eigenvalues(&pair, cfg.p);
    for &seed in &seeds {
        let mut rng = RngStream::new(seed, streams::TASK_SWITCH);
        let traj = simulate_mixture_gd(&pair, &spec, t.stochastic, &mut rng)?;
        let rel = if t.stochastic {
            format!("seed_{seed}/trajectory.csv")
        } else {
            "trajectory.csv".into()
        };
        let path = out.join(&rel);
        fs::create_dir_all(path.parent().unwrap_or(out))?;
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "step,A,closed_form,bound,phi,norm1,norm2")?;
        let (mut worst_rel, mut bound_ok) = (0.0f64, true);
        for step in 0..traj.len() {
            let a = traj.inner_product[step];
            let (cf, bound) = if exact {
                let cf = closed_form_inner_product(&pair, &spec, step)?;
                // Sum of absolute terms: the natural scale when signs mix.
                let scale: f64 = (0..pair.dim())
                    .map(|k| {
                        (pair.eig1()[k] * pair.eig2()[k]).abs()
                            * (1.0 - t.eta * mu[k]).powi(2 * step as i32)
                            * c0[k]
                            * c0[k]
                    })
                    .sum();
                if scale > 0.0 {
                    worst_rel = worst_rel.max((a - cf).abs() / scale);
                }
                let bound = decay_bound(&pair, &spec, step).ok();
                if let Some(b) = bound {
                    bound_ok &= a.abs() <= b * (1.0 + 1e-12) + 1e-300;
                }
                (cf, bound.unwrap_or(f64::NAN))
            } else {
                (f64::NAN, f64::NAN)
            };
            writeln!(
                w,
                "{step},{a},{cf},{bound},{},{},{}",
                traj.cosine[step], traj.norm1[step], traj.norm2[step]
            )?;
        }
        w.flush()?;
        drop(w);
        m.add_artifact(out, &rel)?;
        if exact {
            m.record("closed_form_max_rel_err", num(worst_rel));
            m.check(worst_rel < CLOSED_FORM_TOL, "closed_form_match", || {
                format!("max relative error {worst_rel:e} >= {CLOSED_FORM_TOL:e}")
            });
            m.check(bound_ok, "decay_bound", || {
                "|A_t| exceeded the decay bound".into()
            });
        }
        let last = traj.len() - 1;
        m.record(
            format!("seed_{seed}.final_A"),
            num(traj.inner_product[last]),
        );
        m.record(format!("seed_{seed}.final_phi"), num(traj.cosine[last]));
    }
    if cfg.p == 0.0 {
        match simulate_image_only(&pair, t.eta, &t.z0, t.steps) {
            Ok((traj, limit)) => {
                m.record("image_only.limit", num(limit.limit));
                m.record("image_only.horizon", limit.horizon);
                m.record("image_only.final_phi", num(traj.cosine[traj.len() - 1]));
            }
            Err(e) => m.record(
                "image_only.limit",
                format!("undefined ({e})").replace(' ', "_"),
            ),
        }
    }
    Ok(())
}

/// Trains one seed into `out/rel`, returning tail statistics of the
/// telemetry. Live invariant violations become manifest failures.
fn train_one(
    cfg: &TrainRunConfig,
    seed: u64,
    out: &Path,
    rel: &str,
    m: &mut RunManifest,
) -> Result<Option<super::TailStats>, ExperimentError> {
    let dir = out.join(rel);
    let ckpt = dir.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    let mut tel = BufWriter::new(File::create(dir.join("telemetry.csv"))?);
    let mut log = BufWriter::new(File::create(dir.join("steps.jsonl"))?);
    let result = run_training(
        cfg,
        seed,
        RunSinks {
            telemetry_csv: Some(&mut tel),
            step_log: Some(&mut log),
            checkpoint_dir: Some(&ckpt),
        },
    );
    tel.flush()?;
    log.flush()?;
    drop((tel, log));
    let outcome = match result {
        Ok(o) => o,
        Err(ExperimentError::Train(e @ TrainError::Invariant { .. })) => {
            m.check(false, "training_invariant", || format!("{rel}: {e}"));
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    for file in ["telemetry.csv", "steps.jsonl"] {
        m.add_artifact(out, &format!("{rel}/{file}"))?;
    }
    let mut ckpts: Vec<String> = fs::read_dir(&ckpt)?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_, _>>()?;
    ckpts.sort();
    for c in ckpts {
        m.add_artifact(out, &format!("{rel}/checkpoints/{c}"))?;
    }
    m.check(
        outcome.base_fingerprint_before == outcome.base_fingerprint_after,
        "frozen_base",
        || format!("{rel}: base weights changed during training"),
    );
    m.check(
        outcome
            .telemetry
            .iter()
            .all(|r| r.norm_img.is_finite() && r.norm_vid.is_finite()),
        "finite_telemetry",
        || format!("{rel}: non-finite gradient norm"),
    );
    m.record(
        format!("{rel}.base_sha256"),
        &outcome.base_fingerprint_after,
    );
    let last = outcome
        .telemetry
        .last()
        .expect("step-0 measurement always exists");
    m.record(format!("{rel}.final_loss_img"), num(last.loss_img));
    m.record(format!("{rel}.final_loss_vid"), num(last.loss_vid));
    let rows = parse_telemetry_csv(&fs::read_to_string(dir.join("telemetry.csv"))?)?;
    let stats = tail_stats(&rows).ok();
    if let Some(s) = stats {
        m.record(format!("{rel}.phi_band"), num(s.band));
        m.record(format!("{rel}.phi_center"), num(s.center));
        m.record(format!("{rel}.norm_floor"), num(s.norm_floor));
    }
    let min_norm = rows
        .iter()
        .map(|r| r.norm_img.min(r.norm_vid))
        .fold(f64::INFINITY, f64::min);
    m.record(format!("{rel}.min_norm"), num(min_norm));
    Ok(stats)
}

/// Shortest round-trip form, with an exponent for very small or large values.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn run_train(
    cfg: &ExperimentConfig,
    out: &Path,
    m: &mut RunManifest,
) -> Result<(), ExperimentError> {
    let train = cfg.train_config();
    let mut bands = Vec::new();
    for seed in cfg.seed_list() {
        if let Some(s) = train_one(&train, seed, out, &format!("seed_{seed}"), m)? {
            bands.push(s.band);
        }
    }
    if !bands.is_empty() {
        m.record("mean_phi_band", num(mean(&bands)));
    }
    Ok(())
}

fn run_pcgrad(
    cfg: &ExperimentConfig,
    out: &Path,
    m: &mut RunManifest,
) -> Result<(), ExperimentError> {
    let switching = TrainRunConfig {
        mode: TrainMode::Switching,
        ..cfg.train_config()
    };
    let projected = TrainRunConfig {
        mode: cfg.pcgrad.mode,
        ..cfg.train_config()
    };
    let mut gaps = Vec::new();
    for seed in cfg.seed_list() {
        let s = train_one(&switching, seed, out, &format!("seed_{seed}/switching"), m)?;
        let p = train_one(
            &projected,
            seed,
            out,
            &format!("seed_{seed}/{}", cfg.pcgrad.mode.name()),
            m,
        )?;
        if let (Some(s), Some(p)) = (s, p) {
            let gap = (s.center - p.center).abs();
            m.record(format!("seed_{seed}.center_gap"), num(gap));
            gaps.push(gap);
        }
    }
    if !gaps.is_empty() {
        m.record("mean_center_gap", num(mean(&gaps)));
    }
    Ok(())
}

/// Attention multiply-accumulates of one forward pass over `frames × N`
/// noisy visual tokens (no reference, CLS or text tokens).
pub fn visual_attention_macs(
    model: &ModelConfig,
    tokens_per_frame: usize,
    frames: usize,
    seed: u64,
) -> Result<u64, ExperimentError> {
    let params = init_model(model, seed)?;
    let rows = tokens_per_frame * frames;
    let mut rng = RngStream::new(seed, streams::DATA);
    let data = (0..rows * model.dim).map(|_| rng.normal()).collect();
    let seq = TokenSequence {
        tokens: TokenGrid::new(rows, model.dim, data)?,
        positions: (0..rows)
            .map(|i| Position {
                frame: i / tokens_per_frame + 1,
                spatial: i % tokens_per_frame,
            })
            .collect(),
        kinds: vec![TokenKind::NoisyVisual; rows],
    };
    let (_, stats) = forward_with(&params, &seq, 0, ForwardOptions::default())?;
    Ok(stats.attention_macs)
}

fn run_cost(
    cfg: &ExperimentConfig,
    out: &Path,
    m: &mut RunManifest,
) -> Result<(), ExperimentError> {
    let c = &cfg.cost;
    let model = CostModel {
        tokens_per_frame: c.tokens_per_frame,
        latent_frames: c.latent_frames,
        p: cfg.p,
    };
    let (ratio, expected) = expected_step_cost(&model)?;
    m.record("cost_ratio", num(ratio));
    m.record("expected_cost", num(expected));
    if c.measure_flops {
        let image = visual_attention_macs(&cfg.train.model, c.tokens_per_frame, 1, cfg.seed)?;
        let video = visual_attention_macs(
            &cfg.train.model,
            c.tokens_per_frame,
            c.latent_frames,
            cfg.seed,
        )?;
        let measured = video as f64 / image as f64;
        let mut w = BufWriter::new(File::create(out.join("cost.csv"))?);
        writeln!(
            w,
            "frames,attention_macs\n1,{image}\n{},{video}",
            c.latent_frames
        )?;
        w.flush()?;
        drop(w);
        m.add_artifact(out, "cost.csv")?;
        m.record("measured_flop_ratio", num(measured));
        let dev = (measured - ratio).abs() / ratio;
        m.check(dev <= FLOP_RATIO_TOL, "flop_ratio", || {
            format!("measured {measured} deviates {dev:.3} from {ratio}")
        });
    }
    Ok(())
}

fn run_motion_cat(
    cfg: &ExperimentConfig,
    out: &Path,
    m: &mut RunManifest,
) -> Result<(), ExperimentError> {
    if cfg.motion_cat.input.is_empty() {
        return Err(ExperimentError::Config(
            "motion_cat.input is required".into(),
        ));
    }
    let input = File::open(&cfg.motion_cat.input).map_err(|e| {
        ExperimentError::Config(format!("cannot open {}: {e}", cfg.motion_cat.input))
    })?;
    let mut labels = Vec::new();
    let n = categorize_lines(BufReader::new(input), &mut labels)?;
    fs::write(out.join("labels.txt"), &labels)?;
    m.add_artifact(out, "labels.txt")?;
    m.record("labelled", n);
    let text = String::from_utf8_lossy(&labels);
    for label in ["discarded", "small", "medium", "large"] {
        m.record(
            format!("count.{label}"),
            text.lines().filter(|l| *l == label).count(),
        );
    }
    Ok(())
}
