use ctsan::corpus::{generate_synthetic, Dataset, Sample, Split, SyntheticSpec};
use ctsan::models::{LossWeights, Task, TaskModel};
use ctsan::train::{tiny_corpus, tiny_train_config, train, TrainConfig};
use ctsan::{ParamStore, Tape};

fn loss_on(model: &TaskModel<f64>, dataset: &Dataset, batch: &[&Sample], config: &TrainConfig) -> f64 {
    let targets: Vec<Vec<f64>> = batch.iter().map(|s| dataset.concept_targets(&s.caption)).collect();
    let weights = LossWeights { lambda1: config.lambda1, lambda2: config.lambda2, margin: config.margin() };
    let mut tape = Tape::new();
    let parts = model.batch_loss(&mut tape, batch, &targets, &dataset.vocab, weights, None).unwrap();
    tape.item(parts.total).unwrap()
}

fn same_params(a: &ParamStore<f64>, b: &ParamStore<f64>) -> bool {
    a.iter().zip(b.iter()).all(|((na, x), (nb, y))| na == nb && x.data() == y.data())
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let d = tiny_corpus().unwrap();
    let c = TrainConfig { epochs: 2, batch_size: 4, lr: 1e-2, dropout: 0.3, ..tiny_train_config(Task::Mc) };
    let a = train::<f64>(&d, &c).unwrap();
    let b = train::<f64>(&d, &c).unwrap();
    assert!(same_params(&a.model.store, &b.model.store));
    assert_eq!(a.metrics_csv(), b.metrics_csv());
}

#[test]
fn zero_epochs_returns_the_initialisation() {
    let d = tiny_corpus().unwrap();
    let c = TrainConfig { epochs: 0, ..tiny_train_config(Task::Fib) };
    let out = train::<f64>(&d, &c).unwrap();
    let fresh = TaskModel::<f64>::new(Task::Fib, c.model_config(&d).unwrap(), c.seed).unwrap();
    assert!(same_params(&out.model.store, &fresh.store));
    assert!(out.rows.is_empty());
}

#[test]
fn small_gradient_step_lowers_the_loss() {
    let d = tiny_corpus().unwrap();
    let batch: Vec<&Sample> = d.split(Split::Train).into_iter().take(4).collect();
    let mut lowered = 0;
    for seed in 0..10 {
        let c = TrainConfig { seed, lambda1: 0.0, lambda2: 0.0, ..tiny_train_config(Task::Description) };
        let mut model = TaskModel::<f64>::new(c.task, c.model_config(&d).unwrap(), seed).unwrap();
        let before = loss_on(&model, &d, &batch, &c);
        let targets: Vec<Vec<f64>> = batch.iter().map(|s| d.concept_targets(&s.caption)).collect();
        let weights = LossWeights { lambda1: 0.0, lambda2: 0.0, margin: c.margin() };
        let mut tape = Tape::new();
        let total = model.batch_loss(&mut tape, &batch, &targets, &d.vocab, weights, None).unwrap().total;
        tape.backward(total).unwrap();
        model.store.absorb(&tape);
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let t = model.store.get_mut(id);
            let g = t.grad.take().unwrap_or_default();
            t.data_mut().iter_mut().zip(&g).for_each(|(w, g)| *w -= 1e-6 * g);
        }
        let after = loss_on(&model, &d, &batch, &c);
        if after < before {
            lowered += 1;
        }
    }
    assert!(lowered >= 9, "loss decreased for {lowered} of 10 seeds");
}

#[test]
fn tiny_description_run_halves_the_training_loss() {
    let spec = SyntheticSpec { concepts: 7, frames: 3, channels: 8, train: 24, val: 0, test: 0, seed: 3, ..SyntheticSpec::default() };
    let d = generate_synthetic(&spec).unwrap().dataset;
    let c = TrainConfig { epochs: 30, batch_size: 4, lr: 1e-2, ..tiny_train_config(Task::Description) };
    let batch = d.split(Split::Train);
    let fresh = TaskModel::<f64>::new(c.task, c.model_config(&d).unwrap(), c.seed).unwrap();
    let initial = loss_on(&fresh, &d, &batch, &c);
    let out = train::<f64>(&d, &c).unwrap();
    let last = loss_on(&out.model, &d, &batch, &c);
    assert!(last < 0.5 * initial, "initial {initial:.4}, final {last:.4}");
}
