use tapm_bench::{images, payoff};

#[test]
fn fixtures_are_deterministic_and_in_range() {
    let a = images(3, 4);
    assert_eq!(a, images(3, 4));
    assert_eq!(a.shape(), &[3, 3, 12, 12]);
    assert!(a.data().iter().all(|v| (0.0..1.0).contains(v)));
    let p = payoff(2, 5, 1);
    assert_eq!((p.len(), p[0].len()), (2, 5));
}
