mod common;

use common::{finite_difference_errors, tiny_config, GradProblem};
use vlprobe::model::ToyModelParams;

#[test]
fn analytic_gradients_match_central_differences() {
    let cfg = tiny_config();
    for seed in [1, 2] {
        let params = ToyModelParams::<f64>::init(cfg, seed).unwrap();
        let problem = GradProblem::standard(seed + 10, &cfg);
        for (name, err) in finite_difference_errors(&problem, &params, 1e-4) {
            assert!(err < 1e-4, "seed {seed}: {name} relative error {err:e}");
        }
    }
}

#[test]
fn two_layer_gradients_match_too() {
    let mut cfg = tiny_config();
    cfg.n_layers = 2;
    let params = ToyModelParams::<f64>::init(cfg, 5).unwrap();
    let problem = GradProblem::standard(6, &cfg);
    for (name, err) in finite_difference_errors(&problem, &params, 1e-4) {
        assert!(err < 1e-4, "{name} relative error {err:e}");
    }
}

#[test]
fn itm_head_gradient_is_exactly_zero_under_mlm_loss() {
    let cfg = tiny_config();
    let params = ToyModelParams::<f64>::init(cfg, 3).unwrap();
    let mut problem = GradProblem::standard(4, &cfg);
    problem.itm_label = None;
    let g = problem.gradient(&params);
    assert!(g.itm_head.iter().all(|&v| v == 0.0));
    assert!(g.text_embed.iter().any(|&v| v != 0.0));
}

#[test]
fn doubling_the_loss_doubles_the_gradient() {
    let cfg = tiny_config();
    let params = ToyModelParams::<f64>::init(cfg, 8).unwrap();
    let mut problem = GradProblem::standard(9, &cfg);
    let g1 = problem.gradient(&params);
    problem.scale = 2.0;
    let g2 = problem.gradient(&params);
    for ((name, a), (_, b)) in g1.tensors().into_iter().zip(g2.tensors()) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(2.0 * x, *y, "{name}");
        }
    }
}
