//! Prints one run's telemetry trajectory. Usage: `trace SEED P MODE [TOML overlay]`.
use dualtask::experiment::*;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let seed: u64 = a[1].parse().unwrap();
    let mut cfg: TrainRunConfig =
        toml::from_str(a.get(4).map(String::as_str).unwrap_or("")).unwrap();
    cfg.switch.p = a[2].parse().unwrap();
    cfg.mode = toml::from_str::<toml::Value>(&format!("m = \"{}\"", a[3])).unwrap()["m"]
        .clone()
        .try_into()
        .unwrap();
    let out = run_training(&cfg, seed, RunSinks::default()).unwrap();
    for r in &out.telemetry {
        let g: Vec<String> = r
            .groups
            .values()
            .map(|s| format!("{:+.2}", s.phi.unwrap_or(f64::NAN)))
            .collect();
        println!(
            "{:5} phi {:+.3} n {:.3e} {:.3e} L {:.4} {:.4} groups {}",
            r.step,
            r.phi.unwrap_or(f64::NAN),
            r.norm_img,
            r.norm_vid,
            r.loss_img,
            r.loss_vid,
            g.join(" ")
        );
    }
}
