use std::time::Instant;
use hetsa_core::design::latin_hypercube;
use hetsa_core::gp::*;
use hetsa_core::hetgp::*;
use hetsa_core::domain::Domain;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn bench_fit_sizes() {
    // Timing probe, not an assertion test.
    let t0 = Instant::now();
    let n = 550usize;
    let p = 5usize;
    let x = latin_hypercube(n, p, 3);
    let mut rng = hetsa_core::rng::stream(4);
    let y = DVector::from_fn(n, |i, _| {
        let r: f64 = rng.sample(StandardNormal);
        (x[(i,0)]*6.0).sin() + 2.0*x[(i,1)] + 0.2*r
    });
    let d = collapse_replicates(&x, &y, 1e-9).unwrap();
    println!("setup {:?}", t0.elapsed());

    let t1 = Instant::now();
    let c = hetsa_core::kernel::cov_matrix(&d.unique_x, &hetsa_core::kernel::LengthScales::constant(0.5, p).unwrap(), 1e-8).unwrap();
    println!("cov build {:?}", t1.elapsed());
    let t2 = Instant::now();
    let ch = nalgebra::Cholesky::new(c.clone()).unwrap();
    println!("chol {:?}", t2.elapsed());
    let t3 = Instant::now();
    let _inv = ch.inverse();
    println!("inverse {:?}", t3.elapsed());
    let t4 = Instant::now();
    let _m = &c * &c;
    println!("matmul {:?}", t4.elapsed());

    let t5 = Instant::now();
    let b = GpBounds::default_for(&d);
    let hom = fit_gp(&d, &b, 1, 7).unwrap();
    println!("hom fit restarts=1: {:?} (ll {})", t5.elapsed(), hom.loglik);

    let t6 = Instant::now();
    let f = fit_hetgp(&d, &b, 1, 7, Domain::unit(p), &FitOptions::refit()).unwrap();
    println!("het refit profile: {:?} (ll {})", t6.elapsed(), f.loglik);
}
