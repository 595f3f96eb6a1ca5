use eagle_core::dist::{fuse, local_update, run_distributed, DistConfig, RoundMessage, WorkerState};
use eagle_core::eagle::{rel_diff, step, IterState, RhoPolicy, SolverConfig};
use eagle_core::matcore::{least_squares_min_norm, power_iteration, sym_eig, Mat, POWER_MAX_ITER, POWER_TOL};
use eagle_core::problemgen::{generate, partition, BlockProblem, GenKind, GenSpec};
use eagle_core::reference::{gd_run, BaselineConfig, GdMode};
use eagle_core::rng::Stream;
use eagle_core::sketch::sample_sketch;
use proptest::prelude::*;

fn gauss(r: usize, c: usize, seed: u64) -> Mat {
    let mut s = Stream::new(seed, "property");
    Mat::from_fn(r, c, |_, _| s.gaussian())
}

fn noiseless(d: usize, n: usize, rank: usize, kappa: f64, seed: u64) -> BlockProblem {
    generate(&GenSpec::svd(d, n, 2, 2, rank, kappa), seed).unwrap()
}

fn spectral_norm(m: &Mat) -> f64 {
    sym_eig(&m.gram_rows()).unwrap().top().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn transpose_of_product(seed in any::<u64>()) {
        let a = gauss(8, 8, seed);
        let b = gauss(8, 8, seed ^ 1);
        let lhs = a.matmul(&b).transpose();
        let rhs = b.transpose().matmul(&a.transpose());
        prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-14 * a.frobenius() * b.frobenius());
    }

    #[test]
    fn spectral_norm_between_column_and_frobenius_bounds(seed in any::<u64>(), d in 1usize..10, n in 1usize..10) {
        let a = gauss(d, n, seed);
        let s = power_iteration(&a, POWER_TOL, POWER_MAX_ITER).unwrap().value;
        let col_max = (0..n).map(|j| a.col(j).iter().map(|x| x * x).sum::<f64>()).fold(0.0, f64::max);
        prop_assert!(s >= col_max / n as f64 * (1.0 - 1e-12));
        prop_assert!(s <= a.frobenius_sq() * (1.0 + 1e-12));
    }

    #[test]
    fn sym_eig_reconstructs(seed in any::<u64>(), d in 1usize..12) {
        let g = gauss(d, d + 3, seed);
        let e = g.gram_rows();
        let eig = sym_eig(&e).unwrap();
        prop_assert!(eig.reconstruct().sub(&e).frobenius() <= 1e-8 * e.frobenius());
        prop_assert!(eig.vectors.t_matmul(&eig.vectors).sub(&Mat::identity(d)).max_abs() <= 1e-10);
        prop_assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn eigenstructure_commutes_with_initial_energy(seed in any::<u64>(), kappa in 2.0f64..500.0) {
        let p = noiseless(16, 16, 16, kappa, seed);
        let cfg = SolverConfig::default();
        let e0 = p.a.gram_rows();
        let mut st = IterState::new(&p, &cfg).unwrap();
        for _ in 0..10 {
            st = step(&st, &cfg).unwrap();
            let el = st.a.gram_rows();
            let defect = e0.matmul(&el).sub(&el.matmul(&e0)).frobenius();
            prop_assert!(defect <= 1e-9 * e0.frobenius() * el.frobenius());
        }
    }

    #[test]
    fn kernel_of_initial_energy_is_preserved(seed in any::<u64>(), d in 6usize..14) {
        let p = noiseless(d, d + 2, d / 2, 20.0, seed);
        let cfg = SolverConfig::default();
        let kernel = sym_eig(&p.a.gram_rows()).unwrap().kernel_basis();
        prop_assert!(kernel.cols() >= d - d / 2);
        let mut st = IterState::new(&p, &cfg).unwrap();
        for _ in 0..10 {
            st = step(&st, &cfg).unwrap();
            let el = st.a.gram_rows();
            let norm = sym_eig(&el).unwrap().top();
            prop_assert!(el.matmul(&kernel).frobenius() <= 1e-10 * norm * (kernel.cols() as f64).sqrt());
        }
    }

    #[test]
    fn scaling_the_blocks_scales_every_iterate_exactly(seed in any::<u64>(), power in -4i32..5) {
        let c = 2f64.powi(power);
        let p = noiseless(8, 10, 8, 40.0, seed);
        let cfg = SolverConfig::default();
        let mut s1 = IterState::new(&p, &cfg).unwrap();
        let mut sc = IterState::new(&p.scaled(c), &cfg).unwrap();
        for _ in 0..8 {
            s1 = step(&s1, &cfg).unwrap();
            sc = step(&sc, &cfg).unwrap();
            prop_assert_eq!(&sc.d, &s1.d.scale(c));
        }
    }

    #[test]
    fn analytic_rescale_is_newton_schulz(seed in any::<u64>(), kappa in 2.0f64..1000.0) {
        let p = noiseless(10, 14, 10, kappa, seed);
        let cfg = SolverConfig { rho_policy: RhoPolicy::AnalyticRescale, ..SolverConfig::default() };
        let mut st = IterState::new(&p, &cfg).unwrap();
        for _ in 0..10 {
            let next = step(&st, &cfg).unwrap();
            let abar = st.a.scale(1.0 / spectral_norm(&st.a));
            let mut ns = abar.scale(3.0);
            ns.axpy(-1.0, &abar.gram_rows().matmul(&abar));
            let ns = ns.scale(0.5);
            let actual = next.a.scale(1.0 / spectral_norm(&next.a));
            prop_assert!(rel_diff(&actual, &ns) <= 1e-9);
            st = next;
        }
    }

    #[test]
    fn sketches_are_orthonormal(seed in any::<u64>(), n in 1usize..64, frac in 0.0f64..1.0, iter in 0usize..1000) {
        let r = 1 + ((n - 1) as f64 * frac) as usize;
        let sk = sample_sketch(n, r, seed, iter).unwrap();
        prop_assert_eq!(sk.s.shape(), (n, r));
        prop_assert!(sk.orthogonality_defect() <= 1e-10);
    }

    #[test]
    fn fuse_ignores_arrival_order(seed in any::<u64>(), m in 1usize..7) {
        let msgs: Vec<RoundMessage> = (0..m).map(|mu| RoundMessage::new(mu, gauss(5, 2, seed + mu as u64), gauss(2, 2, seed ^ mu as u64))).collect();
        let mut shuffled = msgs.clone();
        let perm = Stream::new(seed, "order").permutation(m);
        for (i, &j) in perm.iter().enumerate() {
            shuffled[i] = msgs[j].clone();
        }
        prop_assert_eq!(fuse(&msgs, m).unwrap(), fuse(&shuffled, m).unwrap());
    }

    #[test]
    fn shards_keep_the_global_map(seed in any::<u64>(), m in 1usize..6) {
        let p = noiseless(8, 24, 8, 30.0, seed);
        let w = least_squares_min_norm(&p.a, &p.b);
        let part = partition(&p, m, 0.0, seed).unwrap();
        for s in &part.shards {
            prop_assert_eq!(&s.a, &p.a.select_cols(&s.columns));
            prop_assert_eq!(&s.b, &p.b.select_cols(&s.columns));
            prop_assert!(s.b.sub(&w.matmul(&s.a)).frobenius() <= 1e-9 * s.b.frobenius().max(1e-300));
        }
    }

    #[test]
    fn per_machine_v_stays_w_star_times_e(seed in any::<u64>(), m in 1usize..5) {
        let p = noiseless(8, 24, 8, 50.0, seed);
        let part = partition(&p, m, 0.0, seed).unwrap();
        let w_star = least_squares_min_norm(&p.a, &p.b);
        let cfg = DistConfig::default();
        let mut workers: Vec<WorkerState> =
            part.shards.iter().enumerate().map(|(mu, s)| WorkerState::setup(mu, &s.a, &s.b, &part.c).unwrap()).collect();
        for _ in 0..12 {
            for w in &workers {
                let e = w.a.gram_rows();
                let v = w.b.matmul_t(&w.a);
                prop_assert!(v.sub(&w_star.matmul(&e)).frobenius() <= 1e-9 * w_star.frobenius() * e.frobenius());
            }
            let (next, msgs): (Vec<_>, Vec<_>) = workers.iter().map(|w| local_update(w, 1.0, true, &cfg).unwrap()).unzip();
            let (c, d) = fuse(&msgs, m).unwrap();
            workers = next;
            for w in &mut workers {
                w.c = c.clone();
                w.d = d.clone();
            }
        }
    }

    #[test]
    fn replicas_and_ledger_after_a_run(seed in any::<u64>(), m in 1usize..6, rounds in 1usize..20) {
        let p = noiseless(10, 30, 10, 20.0, seed);
        let part = partition(&p, m, 0.0, seed).unwrap();
        let run = run_distributed(&part, &DistConfig { max_iter: rounds, stop_tau: 0.0, ..DistConfig::default() }).unwrap();
        for w in &run.workers {
            prop_assert_eq!(&w.c, &run.workers[0].c);
            prop_assert_eq!(&w.d, &run.workers[0].d);
        }
        prop_assert_eq!(run.ledger.total(), (rounds * m * (10 + 2) * 2) as u64);
        let cums: Vec<u64> = run.trace.rows.iter().map(|r| r.comm_floats_cum).collect();
        prop_assert!(cums.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn parallel_workers_match_serial(seed in any::<u64>(), m in 2usize..6) {
        let p = noiseless(10, 30, 10, 20.0, seed);
        let part = partition(&p, m, 0.0, seed).unwrap();
        let serial = run_distributed(&part, &DistConfig { max_iter: 15, ..DistConfig::default() }).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let par = pool.install(|| run_distributed(&part, &DistConfig { max_iter: 15, parallel: true, ..DistConfig::default() })).unwrap();
        prop_assert_eq!(serial.d, par.d);
        prop_assert_eq!(serial.trace.errors(), par.trace.errors());
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>(), k in 0usize..7) {
        let spec = GenSpec::new(GenKind::ALL[k], 9, 11, 2, 3, 5);
        match (generate(&spec, seed), generate(&spec, seed)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(a), Err(b)) => prop_assert_eq!(a.to_string(), b.to_string()),
            _ => prop_assert!(false, "outcomes differ"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn gd_objective_never_increases(seed in any::<u64>(), kappa in 2.0f64..50.0) {
        let p = noiseless(8, 12, 8, kappa, seed);
        let cfg = BaselineConfig { max_iter: 300, tol: 0.0, wall_clock: false, ..BaselineConfig::default() };
        let (_, tr) = gd_run(&p.a, &p.b, &p.c, GdMode::Central, &cfg).unwrap();
        let obj: Vec<f64> = tr.rows.iter().filter_map(|r| r.objective).collect();
        prop_assert!(obj.len() > 1);
        for w in obj.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-300);
        }
    }
}
