// Development probe: entropy dynamics + fidelity of the default config.
use nova::engine::{compare_runs, run_generation, RunConfig, RunOptions, Selector};
use nova::schedule::SchedulerMode;

fn main() {
    let mut detected = 0;
    let mut min_agree_detected: Vec<(u64, f64)> = vec![];
    for seed in 0..20u64 {
        let mut dense = RunConfig::default_with_seed(seed);
        dense.mode = SchedulerMode::Off;
        let d = run_generation(&dense, &RunOptions::default()).unwrap();
        let nova_cfg = RunConfig::default_with_seed(seed);
        let n = run_generation(&nova_cfg, &RunOptions::default()).unwrap();
        if n.report.activation_scale.is_some() {
            detected += 1;
            let cmp = compare_runs(&d, &n).unwrap();
            let min = cmp.token_agreement.iter().cloned().fold(f64::INFINITY, f64::min);
            min_agree_detected.push((seed, min));
        }
    }
    println!("natural detection in {detected}/20 seeds");
    println!("min per-scale agreement when detected: {:?}",
        min_agree_detected.iter().map(|(s, m)| format!("s{s}:{m:.2}")).collect::<Vec<_>>());

    // per-layer lens entropies, seed 0, dense run
    let mut dense = RunConfig::default_with_seed(0);
    dense.mode = SchedulerMode::Off;
    let d = run_generation(&dense, &RunOptions { observe_layers: true }).unwrap();
    for t in [5usize, 8, 10] {
        let row: Vec<String> = d.layer_maps.iter()
            .filter(|m| m.scale == t)
            .map(|m| {
                let mean: f64 = m.values.iter().sum::<f64>() / m.values.len() as f64;
                format!("{mean:.2}")
            })
            .collect();
        println!("scale {t} per-layer lens means: {row:?}");
    }

    // hook-forced worked trace (activation at 8) for seeds 0..6
    let forced: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 5.4, 5.5, 5.55, 5.575, 5.5875];
    for seed in 0..6u64 {
        let mut dense = RunConfig::default_with_seed(seed);
        dense.mode = SchedulerMode::Off;
        let d = run_generation(&dense, &RunOptions::default()).unwrap();
        let mut cfg = RunConfig::default_with_seed(seed);
        cfg.synthetic_means = Some(forced.clone());
        let n = run_generation(&cfg, &RunOptions::default()).unwrap();
        let cmp = compare_runs(&d, &n).unwrap();
        println!("forced seed {seed}: act {:?} ratios {:?} agree {:?} speedup {:.2}",
            n.report.activation_scale,
            n.report.base_ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>(),
            cmp.token_agreement.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>(),
            cmp.ledger_speedup);
        let _ = Selector::Entropy;
    }
}
