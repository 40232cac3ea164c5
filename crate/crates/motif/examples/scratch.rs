// temporary diagnostic: full-variant stabilization
use motif::data::{generate_synthetic_with_prefix, SyntheticSpec};
use motif::train::{fit, TrainConfig};

fn main() {
    let base = SyntheticSpec {
        classes: 5, concepts: 20, t_min: 10, t_max: 20, motif_len: 4,
        amplitude: 3.0, noise_sigma: 0.5, samples_per_class: 60, seed: 42,
        distractors_per_sample: 0,
    };
    let mut test_spec = base.clone();
    test_spec.samples_per_class = 20;
    test_spec.seed = 43;
    let (train, _) = generate_synthetic_with_prefix(&base, "train").unwrap();
    let (test, _) = generate_synthetic_with_prefix(&test_spec, "test").unwrap();

    let mk = |wd: f64, lr: f64, ep: usize, lsp: f64, seed: u64| TrainConfig {
        variant: "full".into(), heads: 1, weight_decay: wd, learning_rate: lr,
        epochs: ep, lambda_sparse: lsp, seed, ..Default::default()
    };
    for (name, wd, lr, ep, lsp) in [
        ("lr3e-4 ep300 wd1e-1", 1e-1, 3e-4, 300, 1e-3),
        ("lsp1e-2 wd1e-1", 1e-1, 1e-3, 100, 1e-2),
        ("lr3e-4 ep300 lsp1e-2 wd1e-1", 1e-1, 3e-4, 300, 1e-2),
    ] {
        println!("{name}:");
        let mut worst: f64 = 1.0;
        for seed in [39u64, 40, 41, 42, 43] {
            let r = fit(&train, &test, &mk(wd, lr, ep, lsp, seed)).unwrap();
            worst = worst.min(r.report.best_test_acc);
            println!("  seed {seed}: best {:.3} final {:.3}", r.report.best_test_acc, r.report.final_test_acc);
        }
        println!("  worst best-acc: {worst:.3}");
    }
}
