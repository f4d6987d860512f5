//! Acceptance checks. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Run a subset with `cargo test --release --test acceptance -- 1 2 7`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgns::config::{ExperimentConfig, Setup};
use sgns::galerkin::{GalerkinState, Linearization, StochasticSolution};
use sgns::gpc::{smolyak_rule, MultiIndexSet, TripleProducts};
use sgns::krylov::FgmresConfig;
use sgns::nonlinear::{hybrid_solve, solve_stochastic_stokes, step_iterations, NonlinearConfig, StepKind};
use sgns::postproc::{
    compare_methods, integrated_variance, inter_quantile_range, moments, probe_pdf, relative_difference, MethodOutput,
    PdfCurve, Probe, ProbeField,
};
use sgns::precond::{CouplingCost, PreconditionerSpec};
use sgns::sampling::{collocation, deterministic_solve, monte_carlo, SamplingOptions};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn setup(json: &str) -> (ExperimentConfig, Setup) {
    let cfg: ExperimentConfig = serde_json::from_str(json).expect("config parses");
    cfg.validate().expect("config valid");
    let s = cfg.setup().expect("setup builds");
    (cfg, s)
}

fn obstacle(cov: f64) -> (ExperimentConfig, Setup) {
    setup(&format!(r#"{{"cov": {cov}}}"#))
}

fn probes() -> Vec<Probe> {
    vec![Probe::new(4.01, -0.4339, ProbeField::Ux), Probe::new(2.0, 0.5, ProbeField::Ux)]
}

fn combinatorics() -> Outcome {
    let cases = [(2, 3, 10), (4, 3, 35), (2, 6, 28)];
    let got: Vec<usize> = cases
        .iter()
        .map(|&(n, p, _)| MultiIndexSet::total_degree(n, p).unwrap().len())
        .collect();
    let pass = cases.iter().zip(&got).all(|(c, g)| c.2 == *g);
    Outcome::new(pass, format!("M = {got:?}, expected [10, 35, 28]"))
}

fn triple_products() -> Outcome {
    let h = TripleProducts::new(2, 3, 6).unwrap();
    let h0 = h.matrix(0).to_dense();
    let id_err = (h0 - nalgebra::DMatrix::<f64>::identity(10, 10)).abs().max();
    let lower: Vec<usize> = [1, 3, 6, 10, 28].iter().map(|&m| h.accumulated_lower_nnz(m)).collect();
    let pass = id_err <= 1e-12 && lower == [0, 12, 21, 43, 63] && h.total_nnz() == 203;
    Outcome::new(
        pass,
        format!("|H_0 - I| = {id_err:.1e}, lower nnz {lower:?}, total {}", h.total_nnz()),
    )
}

fn operator_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for (n, p) in [(1, 2), (2, 1)] {
        let (_, s) = setup(&format!(
            r#"{{"geometry": {{"kind": "cavity"}}, "nx": 8, "ny": 8, "cov": 0.3, "dim": {n}, "degree": {p}}}"#
        ));
        let layout = s.problem.layout();
        let v: Vec<f64> = (0..layout.ngdof()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let state = GalerkinState::new(StochasticSolution::from_vec(layout, v).unwrap());
        let op = s.problem.linearized_operator(&state, Linearization::Newton).unwrap();
        let global = op.assemble_global();
        for _ in 0..20 {
            let x: Vec<f64> = (0..layout.ngdof()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let xs = StochasticSolution::from_vec(layout, x.clone()).unwrap();
            let y1 = sgns::galerkin::kron_matvec(&op, &xs, op.truncation()).unwrap();
            let mut y2 = vec![0.0; x.len()];
            global.matvec(&x, &mut y2);
            let d: Vec<f64> = y1.as_slice().iter().zip(&y2).map(|(a, b)| a - b).collect();
            worst = worst.max(norm(&d) / norm(&y2));
        }
    }
    Outcome::new(worst <= 1e-12, format!("max relative error {worst:.2e} over 40 products"))
}

fn deterministic_limit() -> Outcome {
    let (cfg, s) = setup(r#"{"geometry": {"kind": "cavity"}, "nx": 16, "ny": 16, "re": 100, "cov": 0.0}"#);
    let nl = cfg.nonlinear_config().unwrap();
    let (sol, report) = hybrid_solve(&s.problem, &nl).unwrap();
    let det = deterministic_solve(&s.space, s.visc.coeff(0), &nl, None).unwrap();
    let mut block = sol.velocity(0).to_vec();
    block.extend_from_slice(sol.pressure(0));
    let rel = relative_difference(&block, &det.block());
    let higher = (1..sol.layout().m)
        .map(|k| {
            let mut b = sol.velocity(k).to_vec();
            b.extend_from_slice(sol.pressure(k));
            norm(&b)
        })
        .fold(0.0, f64::max);
    let pass = report.converged() && det.report.converged() && rel <= 1e-8 && higher <= 1e-10;
    Outcome::new(pass, format!("mode 0 relative difference {rel:.2e}, max higher-mode norm {higher:.2e}"))
}

fn jacobian_consistency() -> Outcome {
    let (cfg, s) = setup(r#"{"geometry": {"kind": "cavity"}, "nx": 8, "ny": 8, "re": 100, "cov": 0.3, "dim": 2, "degree": 2}"#);
    let prob = &s.problem;
    let layout = prob.layout();
    let (stokes, _) = solve_stochastic_stokes(prob, &cfg.nonlinear_config().unwrap().linear).unwrap();
    let mask = prob.dirichlet_mask();
    let n = mask.len();
    let pin = prob.pressure_pin();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut v = stokes.into_vec();
    let mut d = vec![0.0; layout.ngdof()];
    for k in 0..layout.m {
        for (i, idx) in layout.velocity_range(k).enumerate() {
            if !mask[i % n] {
                v[idx] += 0.1 * rng.random_range(-1.0..1.0);
                d[idx] = rng.random_range(-1.0..1.0);
            }
        }
        for (i, idx) in layout.pressure_range(k).enumerate() {
            if Some(i) != pin {
                d[idx] = rng.random_range(-1.0..1.0);
            }
        }
    }
    let v = StochasticSolution::from_vec(layout, v).unwrap();
    let op = prob
        .linearized_operator(&GalerkinState::new(v.clone()), Linearization::Newton)
        .unwrap();
    let mut jd = vec![0.0; d.len()];
    op.matvec(&d, &mut jd);
    let r0 = prob.residual_at(&v).unwrap();
    let errs: Vec<f64> = [1e-3, 1e-4, 1e-5]
        .iter()
        .map(|&eps| {
            let moved: Vec<f64> = v.as_slice().iter().zip(&d).map(|(a, b)| a + eps * b).collect();
            let r1 = prob.residual_at(&StochasticSolution::from_vec(layout, moved).unwrap()).unwrap();
            let fd: Vec<f64> = r1
                .as_slice()
                .iter()
                .zip(r0.as_slice())
                .zip(&jd)
                .map(|((a, b), j)| (a - b) / eps + j)
                .collect();
            norm(&fd) / norm(&jd)
        })
        .collect();
    let ratios = [errs[0] / errs[1], errs[1] / errs[2]];
    let pass = ratios.iter().all(|r| (8.0..=12.0).contains(r));
    Outcome::new(
        pass,
        format!(
            "errors {:.2e} {:.2e} {:.2e}, decade ratios {:.2} {:.2}",
            errs[0], errs[1], errs[2], ratios[0], ratios[1]
        ),
    )
}

fn nonlinear_counts() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for (cov, max_newton) in [(0.1, 3), (0.3, 4)] {
        let (cfg, s) = obstacle(cov);
        let exact = cfg.nonlinear_config().unwrap();
        let (_, rep) = hybrid_solve(&s.problem, &exact).unwrap();
        let (pic, newt) = (rep.count(StepKind::Picard), rep.count(StepKind::Newton));
        let ok = rep.converged() && pic == 6 && newt <= max_newton;
        pass &= ok;
        lines.push(format!("exact CoV {cov}: {pic} Picard + {newt} Newton {:?}", rep.status));

        let inexact = NonlinearConfig {
            inexact_picard: true,
            ..exact
        };
        let (_, irep) = hybrid_solve(&s.problem, &inexact).unwrap();
        let inewt = irep.count(StepKind::Newton);
        let iok = if cov < 0.2 {
            irep.converged() && inewt <= newt + 1
        } else {
            !irep.converged()
        };
        pass &= iok;
        lines.push(format!(
            "inexact CoV {cov}: {} Picard + {inewt} Newton {:?}{}",
            irep.count(StepKind::InexactPicard),
            irep.status,
            if iok { "" } else { " (unexpected)" }
        ));
    }
    Outcome::new(pass, lines.join("; "))
}

struct BenchRow {
    cov: f64,
    picard: Vec<(String, usize)>,
    newton: Vec<(String, usize)>,
}

impl BenchRow {
    fn get(list: &[(String, usize)], name: &str) -> usize {
        list.iter().find(|r| r.0 == name).map(|r| r.1).expect("benchmarked")
    }
}

fn bench_specs(with_truncations: bool) -> Vec<(String, PreconditionerSpec)> {
    let mut specs: Vec<(String, PreconditionerSpec)> = ["mb", "k", "bgs", "ahgs"]
        .iter()
        .map(|n| (n.to_string(), n.parse().unwrap()))
        .collect();
    let ahgs: PreconditionerSpec = "ahgs".parse().unwrap();
    specs.push(("ahgs-lt0".into(), ahgs.with_truncation(0)));
    if with_truncations {
        specs.push(("ahgs-lt2".into(), ahgs.with_truncation(2)));
        specs.push(("ahgs-lt6".into(), ahgs.with_truncation(6)));
    }
    specs
}

fn bench_row(cov: f64, newton: bool) -> BenchRow {
    let (cfg, s) = obstacle(cov);
    let nl = cfg.nonlinear_config().unwrap();
    let fg = FgmresConfig::default();
    let specs = bench_specs(newton);
    let stokes = GalerkinState::new(solve_stochastic_stokes(&s.problem, &nl.linear).unwrap().0);
    let run = |state: &GalerkinState, lin| {
        specs
            .iter()
            .map(|(name, spec)| {
                let (it, ok) = step_iterations(&s.problem, state, lin, *spec, &fg).unwrap();
                assert!(ok, "{name} did not converge");
                (name.clone(), it)
            })
            .collect::<Vec<_>>()
    };
    let picard = run(&stokes, Linearization::Picard);
    let newton = if newton {
        let picard_only = NonlinearConfig { max_newton: 0, ..nl };
        let state = GalerkinState::new(hybrid_solve(&s.problem, &picard_only).unwrap().0);
        run(&state, Linearization::Newton)
    } else {
        Vec::new()
    };
    BenchRow { cov, picard, newton }
}

fn format_counts(list: &[(String, usize)]) -> String {
    list.iter().map(|(n, i)| format!("{n}={i}")).collect::<Vec<_>>().join(" ")
}

fn precond_ordering(rows: &[BenchRow]) -> Outcome {
    let top = rows.last().unwrap();
    let it = |name: &str| BenchRow::get(&top.picard, name);
    let mut checks = vec![
        ("ahGS <= K <= MB", it("ahgs") <= it("k") && it("k") <= it("mb")),
        (
            "|ahGS - bGS| small",
            (it("ahgs") as f64 - it("bgs") as f64).abs() <= (0.1 * it("bgs") as f64).max(3.0),
        ),
        ("ahGS(l_t=0) == MB", it("ahgs-lt0") == it("mb")),
    ];
    let monotone = ["mb", "k", "bgs", "ahgs"].iter().all(|name| {
        rows.windows(2)
            .all(|w| BenchRow::get(&w[0].picard, name) <= BenchRow::get(&w[1].picard, name))
    });
    checks.push(("nondecreasing in CoV", monotone));
    let newton_ge = ["mb", "k", "bgs", "ahgs"]
        .iter()
        .all(|name| BenchRow::get(&top.newton, name) >= BenchRow::get(&top.picard, name));
    checks.push(("Newton >= Picard", newton_ge));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let mut detail: Vec<String> = rows
        .iter()
        .map(|r| format!("Picard CoV {}: {}", r.cov, format_counts(&r.picard)))
        .collect();
    detail.push(format!("Newton CoV {}: {}", top.cov, format_counts(&top.newton)));
    if !failed.is_empty() {
        detail.push(format!("violated: {}", failed.join(", ")));
    }
    Outcome::new(failed.is_empty(), detail.join("; "))
}

fn truncation_sweet_spot(top: &BenchRow) -> Outcome {
    let h = TripleProducts::new(2, 3, 6).unwrap();
    let cost = CouplingCost::new(&h, 2);
    let accounting = cost.used_lower_nnz == 21 && cost.total_nnz == 203;
    let p2 = BenchRow::get(&top.picard, "ahgs-lt2");
    let p6 = BenchRow::get(&top.picard, "ahgs-lt6");
    let n2 = BenchRow::get(&top.newton, "ahgs-lt2");
    let n6 = BenchRow::get(&top.newton, "ahgs-lt6");
    let pass = accounting && p2 <= p6 && n2 <= n6;
    Outcome::new(
        pass,
        format!(
            "Picard l_t=2: {p2}, l_t=6: {p6}; Newton l_t=2: {n2}, l_t=6: {n6}; used {}/{} = {:.1}%",
            cost.used_lower_nnz,
            cost.total_nnz,
            100.0 * cost.fraction()
        ),
    )
}

struct GalerkinRun {
    output: MethodOutput,
    samples: Vec<Vec<f64>>,
    integrated_var: f64,
}

fn galerkin_run(cov: f64) -> GalerkinRun {
    let (cfg, s) = obstacle(cov);
    let (sol, rep) = hybrid_solve(&s.problem, &cfg.nonlinear_config().unwrap()).unwrap();
    assert!(rep.converged(), "Galerkin solve at CoV {cov} did not converge");
    gpc_output("galerkin", &cfg, &s, &sol)
}

fn gpc_output(name: &str, cfg: &ExperimentConfig, s: &Setup, sol: &StochasticSolution) -> GalerkinRun {
    let basis = MultiIndexSet::total_degree(cfg.dim, cfg.degree).unwrap();
    let mut pdfs = Vec::new();
    let mut samples = Vec::new();
    for (i, p) in probes().iter().enumerate() {
        let (pdf, smp) = probe_pdf(sol, &basis, &s.mesh, p, i as u64 + 1).unwrap();
        pdfs.push(pdf);
        samples.push(smp);
    }
    let m = moments(sol);
    let integrated_var = integrated_variance(&s.space.lumped_velocity_mass(), &m.var_u);
    GalerkinRun {
        output: MethodOutput {
            name: name.into(),
            probe_means: samples.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect(),
            moments: m,
            probe_pdfs: pdfs,
        },
        samples,
        integrated_var,
    }
}

fn sampling_options(cfg: &ExperimentConfig) -> SamplingOptions {
    let defaults = SamplingOptions::default();
    SamplingOptions {
        nonlinear: NonlinearConfig {
            n_picard: cfg.nonlinear_config().unwrap().n_picard,
            ..defaults.nonlinear
        },
        probes: probes(),
        ..defaults
    }
}

fn cross_method(g10: &GalerkinRun) -> Outcome {
    let (cfg, s) = obstacle(0.1);
    let opts = sampling_options(&cfg);
    let rule = smolyak_rule(4, cfg.dim).unwrap();
    let coll = collocation(&s.space, &s.visc, &rule, cfg.degree, &opts).unwrap();
    let c = gpc_output("collocation", &cfg, &s, &coll.solution);
    let cmp = compare_methods(&c.output, &g10.output, &probes()).unwrap();
    let l1 = cmp.probes.iter().map(|p| p.l1_distance).fold(0.0, f64::max);
    let mut pass = cmp.mean_u_rel <= 1e-3 && cmp.var_u_rel <= 1e-3 && l1 <= 0.05 && coll.ensemble.failures() == 0;
    let mut detail = format!(
        "collocation ({} points): mean rel {:.2e}, variance rel {:.2e}, max pdf L1 {:.2e}",
        rule.len(),
        cmp.mean_u_rel,
        cmp.var_u_rel,
        l1
    );

    let mc = monte_carlo(&s.space, &s.visc, 1000, cfg.seed, &opts).unwrap();
    for (i, vals) in mc.ensemble.probe_values.iter().enumerate() {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let se = sd / n.sqrt();
        let g = g10.output.probe_means[i];
        let z = (mean - g).abs() / se;
        pass &= z <= 3.0;
        detail.push_str(&format!("; MC probe {i}: {mean:.6} vs {g:.6} ({z:.2} SE)"));
    }
    detail.push_str(&format!("; MC failures {}", mc.ensemble.failures()));
    Outcome::new(pass, detail)
}

fn variance_scaling(g10: &GalerkinRun, g30: &GalerkinRun) -> Outcome {
    let ratio = g30.integrated_var / g10.integrated_var;
    Outcome::new(
        (5.0..=15.0).contains(&ratio),
        format!(
            "integrated variance {:.3e} / {:.3e} = {ratio:.2}",
            g30.integrated_var, g10.integrated_var
        ),
    )
}

fn is_spike(pdf: &PdfCurve, center: f64) -> bool {
    let w = 1e-6 * center.abs().max(1.0);
    pdf.mass_between(center - w, center + w) >= 0.99
}

fn pdf_behavior(g10: &GalerkinRun, g30: &GalerkinRun) -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for i in 0..probes().len() {
        let (a, b) = (inter_quantile_range(&g10.samples[i]), inter_quantile_range(&g30.samples[i]));
        pass &= b > a;
        detail.push(format!("probe {i} IQR {a:.4e} -> {b:.4e}"));
    }
    let (cfg, s) = obstacle(0.0);
    let (sol, rep) = hybrid_solve(&s.problem, &cfg.nonlinear_config().unwrap()).unwrap();
    let g0 = gpc_output("galerkin", &cfg, &s, &sol);
    for (i, pdf) in g0.output.probe_pdfs.iter().enumerate() {
        let spike = rep.converged() && is_spike(pdf, g0.output.probe_means[i]);
        pass &= spike;
        detail.push(format!("CoV 0 probe {i} spike {spike} (bandwidth {:.1e})", pdf.bandwidth));
    }
    Outcome::new(pass, detail.join("; "))
}

struct Harness {
    selected: Vec<usize>,
    failures: Vec<usize>,
}

impl Harness {
    fn wants(&self, ids: &[usize]) -> bool {
        self.selected.is_empty() || ids.iter().any(|i| self.selected.contains(i))
    }

    fn report(&mut self, id: usize, budget: Duration, elapsed: Duration, o: Outcome) {
        let within = elapsed <= budget;
        let pass = o.pass && within;
        if !pass {
            self.failures.push(id);
        }
        println!(
            "criterion {id:>2}: {} [{:.1}s of {}s] {}{}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs(),
            o.detail,
            if within { "" } else { " (over time budget)" }
        );
    }

    fn run(&mut self, id: usize, budget: Duration, f: impl FnOnce() -> Outcome) {
        if !self.wants(&[id]) {
            return;
        }
        let t = Instant::now();
        let o = f();
        self.report(id, budget, t.elapsed(), o);
    }
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut h = Harness {
        selected,
        failures: Vec::new(),
    };
    let secs = Duration::from_secs;

    h.run(1, secs(1), combinatorics);
    h.run(2, secs(5), triple_products);
    h.run(3, secs(30), operator_oracle);
    h.run(4, secs(60), deterministic_limit);
    h.run(5, secs(60), jacobian_consistency);
    h.run(6, secs(15 * 60), nonlinear_counts);

    if h.wants(&[7, 8]) {
        let t = Instant::now();
        let rows: Vec<BenchRow> = [0.1, 0.2, 0.3].iter().map(|&c| bench_row(c, c > 0.25)).collect();
        let elapsed = t.elapsed();
        if h.wants(&[7]) {
            h.report(7, secs(20 * 60), elapsed, precond_ordering(&rows));
        }
        if h.wants(&[8]) {
            h.report(8, secs(10 * 60), elapsed, truncation_sweet_spot(rows.last().unwrap()));
        }
    }

    if h.wants(&[9, 10, 11]) {
        let t = Instant::now();
        let g10 = galerkin_run(0.1);
        let g30 = galerkin_run(0.3);
        let shared = t.elapsed();
        if h.wants(&[9]) {
            let t = Instant::now();
            let o = cross_method(&g10);
            h.report(9, secs(30 * 60), shared + t.elapsed(), o);
        }
        if h.wants(&[10]) {
            h.report(10, secs(30 * 60), shared, variance_scaling(&g10, &g30));
        }
        if h.wants(&[11]) {
            let t = Instant::now();
            let o = pdf_behavior(&g10, &g30);
            h.report(11, secs(5 * 60), t.elapsed(), o);
        }
    }

    if !h.failures.is_empty() {
        println!("failed criteria: {:?}", h.failures);
        std::process::exit(1);
    }
}

