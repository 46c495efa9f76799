use std::time::Duration;

use sbart::data::{gen_friedman, gen_logistic_binary};
use sbart::problem::{Mode, Problem};
use sbart::runtime::{train, TrainOptions, TransportKind};
use sbart::sampler::SamplerConfig;

fn options(workers: usize, transport: TransportKind) -> TrainOptions {
    TrainOptions {
        workers,
        transport,
        timeout: Duration::from_secs(60),
    }
}

#[test]
fn classification_posterior_is_identical_across_transports() {
    let ds = gen_logistic_binary(400, 4, 8).unwrap();
    let problem = Problem::new(&ds, Mode::Classification).unwrap();
    let config = SamplerConfig {
        mode: Mode::Classification,
        trees: 6,
        iterations: 40,
        burn_in: 10,
        seed: 4,
        ..Default::default()
    };
    let serial = train(&problem, &config, options(1, TransportKind::InProc)).unwrap();
    for (k, transport) in [(3, TransportKind::InProc), (5, TransportKind::Tcp)] {
        let run = train(&problem, &config, options(k, transport)).unwrap();
        assert_eq!(run.posterior.encode(), serial.posterior.encode(), "K = {k} over {transport:?}");
        assert_eq!(run.chain.counters, serial.chain.counters);
    }
}

#[test]
fn every_tree_update_uses_two_reductions() {
    let ds = gen_friedman(300, 5, 1.0, 2).unwrap();
    let problem = Problem::new(&ds, Mode::Regression).unwrap();
    let config = SamplerConfig {
        trees: 7,
        iterations: 30,
        burn_in: 0,
        seed: 5,
        ..Default::default()
    };
    let run = train(&problem, &config, options(3, TransportKind::InProc)).unwrap();
    let counters = &run.chain.counters;
    assert_eq!(counters.tree_updates, 7 * 30);
    assert_eq!(counters.max_reductions_per_update, 2);
    assert_eq!(run.comm.stat_reductions, 2 * counters.tree_updates);
    // The master's own partial plus one from each of the two remote workers.
    assert_eq!(run.comm.partial_messages, 3 * run.comm.stat_reductions);
}

#[test]
fn more_workers_than_rows_is_rejected() {
    let ds = gen_friedman(8, 5, 1.0, 2).unwrap();
    let problem = Problem::new(&ds, Mode::Regression).unwrap();
    let err = train(&problem, &SamplerConfig::default(), options(9, TransportKind::InProc)).unwrap_err();
    assert!(err.to_string().contains("9"), "{err}");
}
