//! Scratch calibration harness for the synthetic benchmark defaults.

use ssdg::config::TrainConfig;
use ssdg::data::{generate_synthetic, SyntheticSpec};
use ssdg::trainer::train;

fn arm_config(arm: &str, seed: u64) -> TrainConfig {
    let mut c = TrainConfig { seed, ..Default::default() };
    match arm {
        "ours" => {}
        "supone" => c = c.supone(),
        "naive-pl" => c.gamma = 1.0,
        "no-dapl" => c.use_dapl = false,
        "no-dc" => c.use_dual_classifier = false,
        "no-mixup" => c.use_mixup = false,
        "no-entropy" => c.use_entropy = false,
        _ => panic!("unknown arm"),
    }
    c
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3);
    let grid_sep: Vec<f64> = vec![1.5, 2.0, 3.0];
    let grid_noise: Vec<f64> = vec![1.5, 2.5];
    let grid_shift: Vec<f64> = vec![0.25, 0.4];

    for &sep in &grid_sep {
        for &noise in &grid_noise {
            for &shift in &grid_shift {
                let spec = SyntheticSpec {
                    class_separation: sep,
                    noise_std: noise,
                    shift_magnitude: shift,
                    ..Default::default()
                };
                print!("sep={sep:<4} noise={noise:<4} shift={shift:<5}|");
                for arm in ["ours", "supone", "naive-pl", "no-dapl"] {
                    let mut accs = Vec::new();
                    let mut pacc = Vec::new();
                    let mut half_epoch = Vec::new();
                    for seed in 0..seeds {
                        let mut spec_s = spec.clone();
                        spec_s.seed = seed;
                        let data = generate_synthetic(&spec_s).unwrap();
                        let outcome = train(arm_config(arm, seed), &data, None).unwrap();
                        let last = outcome.summaries.last().unwrap();
                        accs.push(last.target_accuracy.unwrap());
                        if let Some(p) = last.pseudo_label_accuracy {
                            pacc.push(p);
                        }
                        let n_u = data.initial_state().num_unlabeled();
                        let he = outcome
                            .summaries
                            .iter()
                            .find(|s| s.pseudo_set_size * 2 >= n_u)
                            .map(|s| s.epoch as i64)
                            .unwrap_or(-1);
                        half_epoch.push(he);
                    }
                    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                    let pmean = if pacc.is_empty() {
                        -1.0
                    } else {
                        pacc.iter().sum::<f64>() / pacc.len() as f64
                    };
                    let he: f64 =
                        half_epoch.iter().sum::<i64>() as f64 / half_epoch.len() as f64;
                    print!(" {arm}:acc={mean:.3},pl={pmean:.3},t50={he:.0}|");
                }
                println!();
            }
        }
    }
}
