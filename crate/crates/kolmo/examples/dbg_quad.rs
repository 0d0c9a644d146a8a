fn main() {
    use kolmo::state::State;
    use kolmo::density::*;
    use std::time::Instant;
    let budget = QuadBudget::balanced();
    for (x, y, u, v, t) in [(0.3, 0.1, 0.5, 0.0, 1.0), (1.0, -0.3, 0.4, 0.2, 2.0)] {
        let pt = DensityPoint::new(State::new(x, y), State::new(u, v), t);
        let t0 = Instant::now(); let a = p_killed_route_a(&pt, &budget).unwrap(); let ta = t0.elapsed();
        let t0 = Instant::now(); let b = p_killed_route_b(&pt, &budget).unwrap(); let tb = t0.elapsed();
        println!("A={:.8e}±{:.1e} [{:.1?}] B={:.8e}±{:.1e} [{:.1?}] rel={:.1e} ok={}",
            a.value, a.error_estimate, ta, b.value, b.error_estimate, tb,
            (a.value-b.value).abs()/a.value, (a.value-b.value).abs() <= a.error_estimate+b.error_estimate);
    }
    for alpha in [0.2f64, 0.05] {
        let y = alpha; let x = alpha.powi(3);
        let pt = DensityPoint::new(State::new(x, y), State::new(0.5, 0.5), 1.0);
        let t0 = Instant::now();
        let b = p_killed_route_b(&pt, &budget).unwrap();
        let h = kolmo::specfun::h_hypergeometric(State::new(x, y)).unwrap();
        println!("alpha={alpha}: pbar/h = {:.6} [{:.1?}]", b.value/h, t0.elapsed());
    }
    let t0 = Instant::now();
    let s = survival_probability(State::new(0.5, 0.0), 1.0, SurvivalMethod::Quadrature(budget)).unwrap();
    println!("P((0.5,0),1) = {:.6}±{:.1e} [{:.1?}]", s.p, s.stderr, t0.elapsed());
}
