use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tapm_bench::{images, payoff};
use tapm_core::analysis;
use tapm_core::attack::{self, Algorithm, AttackConfig};
use tapm_core::game;
use tapm_core::model::{Architecture, Classifier, Network};

fn forward_backward(c: &mut Criterion) {
    let x = images(64, 1);
    let y: Vec<usize> = (0..64).map(|i| i % 4).collect();
    let mut g = c.benchmark_group("train_step");
    for arch in Architecture::ALL {
        let net = Network::new(arch, [3, 12, 12], 4, 7).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(arch), &net, |b, net| {
            b.iter(|| net.loss_and_param_grads(&x, &y).unwrap())
        });
    }
    g.finish();
}

fn attack_steps(c: &mut Criterion) {
    let x = images(64, 2);
    let y: Vec<usize> = (0..64).map(|i| i % 4).collect();
    let net = Network::new(Architecture::CnnSmall, [3, 12, 12], 4, 3).unwrap();
    let mut g = c.benchmark_group("attack_5_steps");
    for alg in [Algorithm::Pgd, Algorithm::Di, Algorithm::Admix, Algorithm::AutoPgdDlr] {
        let cfg = AttackConfig::new(alg, 0.03, 5);
        g.bench_function(alg.name(), |b| {
            b.iter(|| attack::generate(&cfg, &net as &dyn Classifier, Some(&net), &x, &y, 9).unwrap())
        });
    }
    g.finish();
}

fn solvers(c: &mut Criterion) {
    let r = payoff(8, 8, 5);
    c.bench_function("lp_8x8", |b| b.iter(|| game::solve_zero_sum_lp(&r).unwrap()));
    c.bench_function("mw_8x8_10k", |b| b.iter(|| game::solve_multiplicative_weights(&r, 10_000, 0.5).unwrap()));
    let rows = payoff(48, 432, 6);
    c.bench_function("pca_48x432", |b| b.iter(|| analysis::pca_explained_variance(&rows).unwrap()));
}

criterion_group!(benches, forward_backward, attack_steps, solvers);
criterion_main!(benches);
