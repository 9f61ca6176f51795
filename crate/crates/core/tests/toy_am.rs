use proxygrad::am::{run_am, run_am_problem, slope_sweep, AmConfig, InitSpec, Regularizer, SweepMode};
use proxygrad::netspec::load_network;
use proxygrad::toy::WhiteImageProblem;
use proxygrad::{ActivationRule, Rng, Tensor};

fn config(lr: f64, iters: usize, seed: u64) -> AmConfig {
    AmConfig {
        learning_rate: lr,
        iterations: iters,
        init: InitSpec {
            seed,
            ..InitSpec::default()
        },
        ..AmConfig::default()
    }
}

#[test]
fn relu_freezes_negative_pixels_proxy_whitens() {
    let pr = WhiteImageProblem::f1(16, 16);
    let relu = run_am_problem(&pr, ActivationRule::relu(), &config(0.5, 100, 3)).unwrap();
    let proxy = run_am_problem(&pr, ActivationRule::proxy(0.1).unwrap(), &config(0.5, 100, 3)).unwrap();
    assert_eq!(relu.initial_image, proxy.initial_image);
    for (x0, x) in relu.initial_image.data().iter().zip(relu.final_image.data()) {
        if *x0 < 0.0 {
            assert_eq!(x0.to_bits(), x.to_bits());
        } else {
            assert_eq!(*x, 1.0);
        }
    }
    assert_eq!(proxy.final_objective(), 256.0);
}

#[test]
fn race_of_patterns_scales_with_inverse_slope() {
    let mu = 0.01;
    let mut times = Vec::new();
    for s in [0.1, 0.2] {
        let pr = WhiteImageProblem::f2(s, 4, 4).unwrap();
        let mut c = config(mu, 700, 0);
        c.init = InitSpec {
            background: -0.5,
            noise_std: 0.0,
            seed: 0,
        };
        let t = run_am_problem(&pr, pr.forward_rule(), &c).unwrap();
        times.push(t.crossings[0].unwrap() as f64);
    }
    let ratio = times[0] / times[1];
    assert!((ratio - 2.0).abs() < 0.01, "{times:?}");
}

#[test]
fn f3_trap_and_escape_share_an_init() {
    let pr = WhiteImageProblem::f3(0.1, 0.2, 12, 12).unwrap();
    let c = config(0.1, 200, 8);
    let leaky = run_am_problem(&pr, pr.forward_rule(), &c).unwrap();
    let proxy = run_am_problem(&pr, ActivationRule::new(0.1, 0.5).unwrap(), &c).unwrap();
    assert!(leaky.final_objective() < 0.6 * proxy.final_objective());
    let (_, fstar) = pr.optimum();
    assert!((proxy.final_objective() - fstar).abs() <= 1e-3 * fstar);
}

#[test]
fn proxy_sweep_beats_leaky_sweep_on_conv() {
    let pr = WhiteImageProblem::conv(0.1, 0.2, 10, 10).unwrap();
    let g = pr.build_graph(pr.forward_rule()).unwrap();
    let c = config(0.5, 200, 1);
    let leaky = slope_sweep(&g, "x", &pr.shape(), &[0.1, 0.3], SweepMode::Leaky, &c).unwrap();
    let proxy = slope_sweep(&g, "x", &pr.shape(), &[0.3, 0.5], SweepMode::Proxy, &c).unwrap();
    let best_leaky = leaky.iter().map(|p| p.score).fold(f64::MIN, f64::max);
    assert!(proxy.iter().all(|p| p.score >= best_leaky), "{leaky:?} {proxy:?}");
    assert!(proxy[0].score > leaky[0].score);
}

#[test]
fn regularized_runs_stay_in_box_and_repeat() {
    let pr = WhiteImageProblem::f3(0.1, 0.2, 9, 9).unwrap();
    let mut c = config(0.2, 40, 2);
    c.normalize_gradient = true;
    c.regularizers = vec![Regularizer::DEFAULT_BLUR, Regularizer::DEFAULT_ROTATE];
    let rule = ActivationRule::new(0.1, 0.5).unwrap();
    let a = run_am_problem(&pr, rule, &c).unwrap();
    assert!(a.final_image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(a, run_am_problem(&pr, rule, &c).unwrap());
}

#[test]
fn am_on_json_network() {
    let json = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/white-f1.json")).unwrap();
    let net = load_network(&json, ActivationRule::proxy(0.2).unwrap(), &mut Rng::new(0)).unwrap();
    let t = run_am(&net.graph, &net.input, &net.input_shape, &config(0.5, 60, 0)).unwrap();
    assert_eq!(t.final_image, Tensor::ones(&[1, 1, 6, 6]).unwrap());

    let json = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tiny-net.json")).unwrap();
    let net = load_network(&json, ActivationRule::proxy(0.3).unwrap(), &mut Rng::new(0)).unwrap();
    let t = run_am(&net.graph, &net.input, &net.input_shape, &config(0.05, 50, 0)).unwrap();
    assert!(t.best_objective() >= t.objective[0]);
}
