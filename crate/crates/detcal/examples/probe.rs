// Scratch probe (not part of the deliverable).
use detcal::matching::{match_detections, MatchParams};
use detcal::metrics::{compute_dece, BinGrid, Dimension};
use detcal::toydet::{train, SyntheticScene, ToyDataset, ToyDetector, TrainConfig, TrainMode};

fn deces(model: &ToyDetector, scenes: &[SyntheticScene]) -> (f64, f64, f64) {
    let dets: Vec<_> = scenes.iter().flat_map(|s| model.infer(s, 0.3)).collect();
    let gts: Vec<_> = scenes.iter().flat_map(|s| s.objects.clone()).collect();
    let matched = match_detections(&dets, &gts, &MatchParams::default()).unwrap();
    let conf_only = compute_dece(&matched, &BinGrid::conf_only(10).unwrap(), 0.5)
        .unwrap()
        .dece;
    let spatial = compute_dece(
        &matched,
        &BinGrid::new(
            vec![Dimension::Conf, Dimension::Cx, Dimension::Cy],
            vec![10, 5, 5],
        )
        .unwrap(),
        0.5,
    )
    .unwrap()
    .dece;
    let full = compute_dece(
        &matched,
        &BinGrid::new(
            vec![
                Dimension::Conf,
                Dimension::Cx,
                Dimension::Cy,
                Dimension::W,
                Dimension::H,
            ],
            vec![10, 5, 5, 5, 5],
        )
        .unwrap(),
        0.5,
    )
    .unwrap()
    .dece;
    (conf_only, spatial, full)
}

fn main() {
    for seed in 0..3u64 {
        let data = ToyDataset::generate(3, 128, 192, 1.0, seed).unwrap();
        for (label, mode) in [("base", TrainMode::Baseline), ("mccl", TrainMode::Mccl)] {
            let out = train(
                &TrainConfig {
                    epochs: 50,
                    learning_rate: 0.08,
                    batch_size: 8,
                    beta: 1.0,
                    dropout: 0.1,
                    mc_passes: 5,
                    mode,
                    seed,
                    ..Default::default()
                },
                &data,
            )
            .unwrap();
            let (ic, is, ifu) = deces(&out.model, &data.val_in_domain);
            let (sc, ss, sfu) = deces(&out.model, &data.val_shifted);
            println!(
                "seed {seed} {label}: in conf={ic:.4} spatial={is:.4} full={ifu:.4} | sh conf={sc:.4} spatial={ss:.4} full={sfu:.4} ap={:.3}",
                out.final_in_domain.ap50
            );
        }
    }
}
