use scenegen::ingest::window_to_graph;
use scenegen::model::{evaluate_classification, prepare_graphs, train, ModelConfig};
use scenegen::ontology::Ontology;
use scenegen::synth::{generate_synthetic, synth_windows, SynthConfig};

#[test]
#[ignore]
fn diag_overfit_grid() {
    let ont = Ontology::builtin();
    let dseed: u64 = std::env::var("DSEED").ok().and_then(|v| v.parse().ok()).unwrap_or(7);
    let mseed: u64 = std::env::var("MSEED").ok().and_then(|v| v.parse().ok()).unwrap_or(7);
    let epochs: usize = std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(500);
    let cfg = SynthConfig {
        n_scenarios: 32,
        rng_seed: dseed,
        agents_min: 1,
        agents_max: 2,
        traffic_light_prob: 0.2,
        action_weights: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ..SynthConfig::default()
    };
    let files = generate_synthetic(&cfg, ont).unwrap();
    let graphs: Vec<_> = synth_windows(&files).unwrap().iter()
        .map(|w| window_to_graph(w, ont).unwrap()).collect();
    let mcfg = ModelConfig { epochs, rng_seed: mseed, ..ModelConfig::default() };
    let (model, report) = train(mcfg.clone(), &graphs, &[], ont).unwrap();
    let items = prepare_graphs(&graphs, ont, &mcfg).unwrap();
    let m = evaluate_classification(&model, &items).unwrap();
    println!(
        "dseed={dseed} mseed={mseed} loss={:.4} trainF1={:.4}",
        report.history.last().unwrap().train_loss,
        m.f1
    );
}
