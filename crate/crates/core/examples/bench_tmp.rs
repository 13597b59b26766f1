use noarb::sim::*;
use std::time::Instant;
fn main() {
    let suite = regression_suite();
    let args: Vec<String> = std::env::args().collect();
    let idx: usize = args[1].parse().unwrap();
    let steps: u32 = args[2].parse().unwrap();
    let kappa: f64 = args[3].parse().unwrap();
    let n: usize = args[4].parse().unwrap();
    let m = &suite[idx].1;
    let cfg = SimConfig {
        dt: if kappa > 0.0 {
            DtPolicy::Adaptive { steps, kappa }
        } else {
            DtPolicy::Uniform { steps }
        },
        ..Default::default()
    };
    let t = Instant::now();
    let d = martingale_defect_direct(m, &cfg, n, 1).unwrap();
    println!(
        "{} direct {:.5} ± {:.5} flagged {} ({:?})",
        suite[idx].0,
        d.mean,
        d.stderr,
        d.flagged,
        t.elapsed()
    );
    if args.len() > 5 {
        return;
    }
    let t = Instant::now();
    let e = explosion_probability(&girsanov_tilt(m), &cfg, n, 2).unwrap();
    println!(
        "  survival {:.5} ± {:.5} plateau {} ({:?})",
        e.estimate.mean,
        e.estimate.stderr,
        e.plateaued,
        t.elapsed()
    );
    let s: Vec<String> = e
        .levels
        .iter()
        .map(|l| format!("{:.4}", l.survival))
        .collect();
    println!("  {}", s.join(" "));
}
