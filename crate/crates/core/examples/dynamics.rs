//! Seed sweep of switching vs image-only vs buffered-PCGrad telemetry.
//! Usage: `dynamics [SEEDS] [TOML experiment overlay]`.
use dualtask::experiment::*;
use dualtask::telemetry::TelemetryRow;
use dualtask::train::TrainMode;
use rayon::prelude::*;

fn stats(out: &TrainOutcome) -> TailStats {
    let rows: Vec<TelemetryRow> = out
        .telemetry
        .iter()
        .map(|r| TelemetryRow {
            step: r.step,
            phi: r.phi.unwrap_or(f64::NAN),
            norm_img: r.norm_img,
            norm_vid: r.norm_vid,
        })
        .collect();
    tail_stats(&rows).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(5);
    let overlay = args.get(2).cloned().unwrap_or_default();
    let base = parse_config(&format!("kind = \"train\"\n{overlay}"))
        .unwrap()
        .train_config();
    let res: Vec<_> = (0..seeds)
        .into_par_iter()
        .map(|seed| {
            [
                (base.switch.p, TrainMode::Switching),
                (0.0, TrainMode::Switching),
                (base.switch.p, TrainMode::PcgradBuffered),
            ]
            .map(|(p, mode)| {
                let mut cfg = base.clone();
                cfg.switch.p = p;
                cfg.mode = mode;
                let out = run_training(&cfg, seed, RunSinks::default()).unwrap();
                let last = out.telemetry.last().unwrap().clone();
                let floor = out
                    .telemetry
                    .iter()
                    .map(|r| r.norm_img.min(r.norm_vid))
                    .fold(f64::INFINITY, f64::min);
                (stats(&out), last.loss_img, last.loss_vid, floor)
            })
        })
        .collect();
    let (mut c8, mut c9) = (0, 0);
    for (seed, r) in res.iter().enumerate() {
        let (s, i, b) = (&r[0].0, &r[1].0, &r[2].0);
        c8 += (s.band < i.band && r[0].3 > 1e-8) as usize;
        c9 += (s.band < 0.3 && b.band < 0.3 && (s.center - b.center).abs() < 0.15) as usize;
        println!(
            "seed {seed}: switch {:.3} c{:+.3} L {:.3}/{:.3} | image {:.3} c{:+.3} L {:.3}/{:.3} | pcbuf {:.3} c{:+.3}",
            s.band, s.center, r[0].1, r[0].2, i.band, i.center, r[1].1, r[1].2, b.band, b.center
        );
    }
    println!("crit8 {c8}/{seeds} crit9 {c9}/{seeds}");
}
