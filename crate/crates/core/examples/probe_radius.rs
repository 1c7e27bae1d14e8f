// Scratch calibration: cluster-center radius for the circle experiments.
use specnorm::datagen::gen_circle_clusters;
use specnorm::graph::build_affinity;
use specnorm::lanczos::LanczosOpts;
use specnorm::norm::{embedding_norm, sweep_i, WeightSpec};
use specnorm::spectral::markov_spectrum_with;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let radius: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1.15);
    println!("== center radius {radius} ==");

    // K=10, delta=0.1 toy at k_st=8
    let pc = gen_circle_clusters(5000, 10, 0.1, 0.01, 0.02, radius, 1).unwrap();
    let g = build_affinity(pc.points.view(), 64, 8, true).unwrap();
    let opts = LanczosOpts { tol: 1e-6, ..Default::default() };
    let t = Instant::now();
    match markov_spectrum_with(&g, 100, &opts) {
        Err(e) => println!("lanczos m=100 failed: {e}"),
        Ok(es) => {
            println!("lanczos m=100: {:.1}s, d_ortho {:.1e}", t.elapsed().as_secs_f64(), es.d_ortho_residual());
            let truth = pc.truth.as_ref().unwrap();
            let rows = sweep_i(&es, 2, 100, WeightSpec::Constant, 0.9, truth).unwrap();
            let best = rows.iter().max_by(|a, b| a.f1.total_cmp(&b.f1)).unwrap();
            let near: Vec<usize> = rows.iter().filter(|r| r.f1 >= best.f1 - 0.05).map(|r| r.i_size).collect();
            let mut runs: Vec<(usize, usize)> = Vec::new();
            let mut start = 0usize;
            for i in 1..=near.len() {
                if i == near.len() || near[i] != near[i - 1] + 1 {
                    runs.push((near[start], near[i - 1]));
                    start = i;
                }
            }
            runs.sort_by_key(|(a, b)| a + 10000 - b); // longest first-ish
            println!("K=10 kst=8: best F1 {:.4} at |I|={} | plateau runs {:?}", best.f1, best.i_size, &runs[..runs.len().min(4)]);
        }
    }

    // K=1, delta=0.01 (Figure-1 shape)
    let pc = gen_circle_clusters(5000, 1, 0.01, 0.01, 0.02, radius, 2).unwrap();
    let g = build_affinity(pc.points.view(), 64, 8, true).unwrap();
    let t = Instant::now();
    match markov_spectrum_with(&g, 48, &opts) {
        Err(e) => println!("fig1 lanczos failed: {e}"),
        Ok(es) => {
            println!("fig1 m=48: {:.1}s | 8th eig {:.6}", t.elapsed().as_secs_f64(), es.eigenvalue(7));
            let truth = pc.truth.as_ref().unwrap();
            let nr = embedding_norm(&es, 40, WeightSpec::Constant).unwrap();
            let min_c = (0..5000).filter(|&x| truth[x]).map(|x| nr.s[x]).fold(f64::INFINITY, f64::min);
            let max_b = (0..5000).filter(|&x| !truth[x]).map(|x| nr.s[x]).fold(f64::NEG_INFINITY, f64::max);
            println!("fig1 |I|=40 t=1: min_C {:.3e} max_B {:.3e} margin {:+.3e}", min_c, max_b, min_c - max_b);
        }
    }
}
