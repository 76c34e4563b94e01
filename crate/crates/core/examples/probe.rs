use selfheal::datagen::{self, CorruptionMode, CorruptionSpec, DgpParams, LabeledBatch};

fn main() {
    let specs = datagen::diabetes_features();
    let names: Vec<String> = specs.iter().map(|f| f.name.clone()).collect();
    let x = datagen::generate_features(10_000, &specs, 900);
    let dgp = DgpParams { intercept: 0.0, coefficients: datagen::DIABETES_BETA_POST.to_vec(), noise_std: 0.2 };
    let y = datagen::generate_labels(&x, 8, &dgp, 901).unwrap();
    let batch = LabeledBatch::new(x, y, 8, 0);
    let corrupted = datagen::corrupt(
        &batch,
        &names,
        &CorruptionSpec {
            columns: vec!["Age".into(), "PhysicalActivity".into()],
            fraction: 0.05,
            outlier_factor: 6.0,
            mode: CorruptionMode::Multiply,
        },
        902,
    );
    let eval = LabeledBatch::new(corrupted.x[..2000 * 8].to_vec(), corrupted.y[..2000].to_vec(), 8, 0);
    for n in [500usize, 2000] {
        let mut accs = Vec::new();
        for s in 0..5 {
            let start = 2000 + s * 1000;
            let fit_data = LabeledBatch::new(
                corrupted.x[start * 8..(start + n) * 8].to_vec(),
                corrupted.y[start..start + n].to_vec(),
                8,
                0,
            );
            let model = selfheal::models::fit(&[fit_data]).unwrap();
            accs.push(selfheal::models::accuracy(&model, &eval));
        }
        let mean: f64 = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("fit on {n} corrupted rows -> acc {mean:.4} (per-seed {accs:?})");
    }
    // export for the cross-language check
    let bundle = datagen::StreamBundle {
        train: eval.clone(),
        batches: vec![corrupted.clone()],
        shift_index: 0,
        feature_names: names,
    };
    datagen::export_stream_csv(&bundle, std::path::Path::new("/tmp/probe.csv")).unwrap();
}
