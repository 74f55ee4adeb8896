// Scratch experiment harness (not part of the deliverable).
use detcal::toydet::{train, ToyDataset, TrainConfig, TrainMode};

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn main() {
    let seeds: Vec<u64> = (0..3).collect();
    let mut arms: Vec<(String, TrainConfig)> = vec![(
        "baseline".into(),
        TrainConfig {
            epochs: 50,
            learning_rate: 0.08,
            batch_size: 8,
            mode: TrainMode::Baseline,
            ..Default::default()
        },
    )];
    for beta in [0.01, 1.0] {
        arms.push((
            format!("mccl beta={beta}"),
            TrainConfig {
                epochs: 50,
                learning_rate: 0.08,
                batch_size: 8,
                beta,
                dropout: 0.1,
                mc_passes: 5,
                mode: TrainMode::Mccl,
                ..Default::default()
            },
        ));
    }
    for (name, base_cfg) in arms {
        let mut ins = vec![];
        let mut shs = vec![];
        let mut aps = vec![];
        for &seed in &seeds {
            let data = ToyDataset::generate(3, 128, 192, 1.0, seed).unwrap();
            let cfg = TrainConfig { seed, ..base_cfg.clone() };
            let out = train(&cfg, &data).unwrap();
            ins.push(out.final_in_domain.dece);
            shs.push(out.final_shifted.dece);
            aps.push(out.final_in_domain.ap50);
        }
        println!(
            "{name}: in={:.4} sh={:.4} ap={:.3}  (sh per-seed: {:?})",
            median(&ins),
            median(&shs),
            median(&aps),
            shs.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
}
