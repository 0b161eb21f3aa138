//! Desk-scale acceptance run. Prints one PASS/FAIL line per criterion and a
//! summary. Exits 0 unless SANET_ACCEPTANCE_STRICT=1 is set and a criterion
//! failed, so a red criterion is reported without breaking `cargo test`.
//! SANET_ACCEPTANCE_ONLY=1,7 restricts the run to the listed criteria.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Schur};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use sanet::affinity::{AffinityGraph, AffinityKind, AffinityStorage};
use sanet::clustering::{kmeans, spectral_cluster};
use sanet::config::{LayerSpec, PipelineConfig};
use sanet::dataset::LabeledDataset;
use sanet::eigen::{
    dense_eigh, lanczos_smallest, max_principal_angle, minibatch_stiefel_traced, nystrom_factor, SolverBudget,
    SolverKind,
};
use sanet::laplacian::{laplacian, LaplacianKind};
use sanet::layers::{rw_from_sym, ProcedureSpec};
use sanet::metrics::{accuracy, ari, nmi, pairwise_f1};
use sanet::pipeline::{load_config, load_dataset, run_pipeline, RunReport};
use sanet::points::PointSet;
use sanet::rng;
use sanet::sparse::CsrMatrix;

type Outcome = Result<(bool, String), String>;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

fn graph(n: usize, triplets: Vec<(usize, usize, f64)>) -> AffinityGraph {
    AffinityGraph { n, kind: AffinityKind::Knn(1), storage: AffinityStorage::Sparse(CsrMatrix::from_triplets(n, n, triplets)) }
}

/// Symmetric weighted edges; duplicates are merged by the CSR builder.
fn edges_to_triplets(edges: &[(usize, usize, f64)]) -> Vec<(usize, usize, f64)> {
    edges.iter().flat_map(|&(i, j, w)| [(i, j, w), (j, i, w)]).collect()
}

fn random_connected_graph(r: &mut impl Rng, n: usize, extra: usize) -> Vec<(usize, usize, f64)> {
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push((i, r.random_range(0..i), r.random_range(0.1..1.0)));
    }
    for _ in 0..extra {
        let (i, j) = (r.random_range(0..n), r.random_range(0..n));
        if i != j {
            edges.push((i, j, r.random_range(0.1..1.0)));
        }
    }
    edges
}

fn criterion1() -> Outcome {
    let mut r = rng::stream(1, "acceptance/c1");
    let (mut worst_val, mut worst_angle, mut checked) = (0.0f64, 0.0f64, 0);
    for case in 0..50u64 {
        let n = r.random_range(50..=500);
        let density: f64 = r.random_range(0.005..0.05);
        let per_row = ((density * n as f64) / 2.0).floor().max(1.0) as usize;
        let mut t = Vec::new();
        for i in 0..n {
            for _ in 0..per_row {
                let j = r.random_range(0..n);
                let v: f64 = r.random_range(-1.0..1.0);
                t.push((i, j, v));
                t.push((j, i, v));
            }
        }
        let a = CsrMatrix::from_triplets(n, n, t);
        if a.nnz() as f64 > 0.05 * (n * n) as f64 {
            return Err(format!("case {case}: density {} above 5%", a.nnz() as f64 / (n * n) as f64));
        }
        let k = 6;
        // the Krylov size spectral layers use by default
        let budget = SolverBudget::new(k, case).with_iter(200);
        let e = lanczos_smallest(&a, &budget).map_err(|e| e.to_string())?;
        let d = dense_eigh(&a.to_dense(), n).map_err(|e| e.to_string())?;
        for c in 0..k {
            worst_val = worst_val.max((e.eigenvalues[c] - d.eigenvalues[c]).abs());
        }
        // the bottom-k subspace is only defined when the k-th gap is open
        if d.eigenvalues[k] - d.eigenvalues[k - 1] > 1e-6 {
            let sub = d.vectors.columns(0, k).into_owned();
            worst_angle = worst_angle.max(max_principal_angle(&e.vectors, &sub));
            checked += 1;
        }
    }
    Ok((
        worst_val <= 1e-8 && worst_angle <= 1e-6 && checked > 0,
        format!("max |dλ| = {worst_val:.2e}, max angle = {worst_angle:.2e} over {checked}/50 subspaces"),
    ))
}

fn criterion2() -> Outcome {
    let mut r = rng::stream(2, "acceptance/c2");
    let (mut worst_val, mut worst_angle, mut worst_resid) = (0.0f64, 0.0f64, 0.0f64);
    let mut schur_fallbacks = 0;
    for _ in 0..50 {
        let n = r.random_range(5..=100);
        let extra = r.random_range(0..3 * n);
        let g = graph(n, edges_to_triplets(&random_connected_graph(&mut r, n, extra)));
        let sym = laplacian(&g, LaplacianKind::Sym).map_err(|e| e.to_string())?;
        let rw = laplacian(&g, LaplacianKind::Rw).map_err(|e| e.to_string())?;
        let ls = dense_eigh(&sym.to_dense(), n).map_err(|e| e.to_string())?;
        // independent oracle: eigenvalues of the non-symmetric L_rw by real
        // Schur, or the smallest singular value of L_rw − λE when Schur stalls
        let lrw = rw.to_dense();
        match Schur::try_new(lrw.clone(), 1e-15, 100_000) {
            Some(schur) => {
                let mut rw_vals: Vec<f64> = schur.complex_eigenvalues().iter().map(|c| c.re).collect();
                rw_vals.sort_by(f64::total_cmp);
                for (a, b) in rw_vals.iter().zip(&ls.eigenvalues) {
                    worst_val = worst_val.max((a - b).abs());
                }
            }
            None => {
                schur_fallbacks += 1;
                for &lambda in &ls.eigenvalues {
                    let shifted = &lrw - DMatrix::identity(n, n) * lambda;
                    let sigma = shifted.singular_values().min();
                    worst_val = worst_val.max(sigma);
                }
            }
        }
        let v_rw = rw_from_sym(&ls, &sym.degrees);
        let resid = &lrw * &v_rw.vectors - &v_rw.vectors * DMatrix::from_diagonal(&DVector::from_vec(v_rw.eigenvalues.clone()));
        worst_resid = worst_resid.max(resid.amax());
        // D^{1/2} v_rw against L_sym eigenvectors, one eigenspace at a time
        let half = DMatrix::from_diagonal(&DVector::from_iterator(n, sym.degrees.iter().map(|d| d.sqrt())));
        let back = &half * &v_rw.vectors;
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && ls.eigenvalues[end] - ls.eigenvalues[end - 1] < 1e-8 {
                end += 1;
            }
            let a = back.columns(start, end - start).into_owned();
            let b = ls.vectors.columns(start, end - start).into_owned();
            worst_angle = worst_angle.max(max_principal_angle(&a, &b));
            start = end;
        }
    }
    Ok((
        worst_val <= 1e-8 && worst_angle <= 1e-6 && worst_resid <= 1e-8,
        format!("max |λ_rw − λ_sym| = {worst_val:.2e}, eigenspace angle {worst_angle:.2e}, L_rw residual {worst_resid:.2e}, {schur_fallbacks} singular-value fallbacks"),
    ))
}

fn union_find_components(n: usize, edges: &[(usize, usize, f64)]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(i, j, _) in edges {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        parent[a] = b;
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

fn criterion3() -> Outcome {
    let mut r = rng::stream(3, "acceptance/c3");
    let mut mismatches = Vec::new();
    let mut total_components = 0;
    for case in 0..100 {
        let n = r.random_range(4..=50);
        // random block assignment, every vertex gets at least one edge inside its block
        let blocks = r.random_range(1..=(n / 2).min(6));
        let block: Vec<usize> = (0..n).map(|i| if i < 2 * blocks { i / 2 } else { r.random_range(0..blocks) }).collect();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); blocks];
        for (i, &b) in block.iter().enumerate() {
            members[b].push(i);
        }
        let mut edges = Vec::new();
        for i in 0..n {
            let m = &members[block[i]];
            for _ in 0..r.random_range(1..=2) {
                let j = m[r.random_range(0..m.len())];
                if j != i {
                    edges.push((i, j, r.random_range(0.1..1.0)));
                } else {
                    let other = *m.iter().find(|&&x| x != i).unwrap();
                    edges.push((i, other, r.random_range(0.1..1.0)));
                }
            }
        }
        let want = union_find_components(n, &edges);
        total_components += want;
        let g = graph(n, edges_to_triplets(&edges));
        for kind in [LaplacianKind::Unnormalized, LaplacianKind::Sym] {
            let l = laplacian(&g, kind).map_err(|e| e.to_string())?;
            let d = dense_eigh(&l.to_dense(), n).map_err(|e| e.to_string())?;
            let zeros = d.eigenvalues.iter().filter(|v| v.abs() <= 1e-10).count();
            if zeros != want {
                mismatches.push(format!("case {case} {kind:?}: {zeros} zeros, {want} components"));
            }
        }
    }
    Ok((
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("200 Laplacians (L and L_sym) of 100 graphs, {total_components} components in total")
        } else {
            mismatches.join("; ")
        },
    ))
}

fn gaussian_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *r))
}

fn nystrom_error(m: &DMatrix<f64>, l_col: usize, seed: u64) -> Result<f64, String> {
    let f = nystrom_factor(m, &SolverBudget::new(1, seed).with_l_col(l_col)).map_err(|e| e.to_string())?;
    Ok((f.reconstruct() - m).norm() / m.norm())
}

fn criterion4() -> Outcome {
    let mut r = rng::stream(4, "acceptance/c4");
    let mut worst_exact = 0.0f64;
    for _ in 0..20 {
        let rank = r.random_range(1..=16);
        let b = gaussian_matrix(&mut r, 200, rank);
        let m = &b * b.transpose();
        let l_col = r.random_range(rank..=24);
        worst_exact = worst_exact.max(nystrom_error(&m, l_col, 0)?);
    }
    let mut increases = Vec::new();
    for seed in 0..10u64 {
        let mut s = rng::stream(seed, "acceptance/c4/decay");
        // full-rank PSD matrix with a decaying spectrum
        let q = gaussian_matrix(&mut s, 200, 200).qr().q();
        let vals = DVector::from_fn(200, |i, _| (-(i as f64) / 8.0).exp());
        let m = &q * DMatrix::from_diagonal(&vals) * q.transpose();
        let errs: Vec<f64> = [2, 4, 8, 16, 24, 32, 48, 64].iter().map(|&l| nystrom_error(&m, l, seed)).collect::<Result<_, _>>()?;
        if errs.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-9)) {
            increases.push(format!("seed {seed}: {errs:?}"));
        }
    }
    Ok((
        worst_exact <= 1e-6 && increases.is_empty(),
        if increases.is_empty() {
            format!("max rank-r error {worst_exact:.2e}; error non-increasing in l_col on 10 seeds")
        } else {
            format!("max rank-r error {worst_exact:.2e}; increases: {}", increases.join("; "))
        },
    ))
}

fn criterion5() -> Outcome {
    let mut s = rng::stream(5, "acceptance/c5");
    let q = gaussian_matrix(&mut s, 64, 64).qr().q();
    let mut values = vec![0.1];
    values.extend((1..64).map(|i| i as f64));
    let l = &q * DMatrix::from_diagonal(&DVector::from_vec(values)) * q.transpose();
    let oracle = dense_eigh(&l, 4).map_err(|e| e.to_string())?;
    let mut angles = Vec::new();
    let mut histories = Vec::new();
    for seed in 0..5u64 {
        let b = SolverBudget::new(4, seed).with_iter(3000).with_tol(0.0);
        let (e, h) = minibatch_stiefel_traced(&l, &b).map_err(|e| e.to_string())?;
        angles.push(max_principal_angle(&e.vectors, &oracle.vectors));
        histories.push(h);
    }
    let median_at = |step: usize| -> Option<f64> {
        let v: Option<Vec<f64>> = histories.iter().map(|h| h.iter().find(|p| p.0 == step).map(|p| p.1)).collect();
        v.map(median)
    };
    let mut descent = true;
    let mut t = 50;
    while 2 * t <= 3000 {
        match (median_at(t), median_at(2 * t)) {
            (Some(a), Some(b)) => descent &= b <= a + 1e-12,
            _ => return Err(format!("trace history has no sample at step {t} or {}", 2 * t)),
        }
        t *= 2;
    }
    let angle = median(angles);
    Ok((angle <= 1e-2 && descent, format!("median principal angle {angle:.2e}, median trace non-increasing: {descent}")))
}

fn rings_config(procs: &[&str], n_eig: usize, seed: u64) -> Result<PipelineConfig, String> {
    let list: String = procs
        .iter()
        .map(|a| format!("  {{ affinity = \"{a}\", laplacian = \"sym\", solver = \"dense\", n_eig = {n_eig} }},\n"))
        .collect();
    let text = format!(
        "seed = {seed}\n[dataset]\nkind = \"two_rings\"\nn_per = 100\nnoise = 0.03\nseed = 0\n[kmeans]\nk = 2\n\
         [[layers]]\ntype = \"spectral\"\npatch = {{ h = 1, w = 1, stride = 1, normalize = false }}\nprocedures = [\n{list}]\n"
    );
    PipelineConfig::parse(&text).map_err(|e| e.to_string())
}

fn final_acc(report: &RunReport) -> f64 {
    report.metrics.as_ref().map_or(f64::NAN, |m| m.acc)
}

fn run_acc(cfg: &PipelineConfig) -> Result<f64, String> {
    let data = load_dataset(cfg).map_err(|e| e.to_string())?;
    Ok(final_acc(&run_pipeline(cfg, &data).map_err(|e| e.to_string())?.report))
}

fn criterion6() -> Outcome {
    let procs = ["full:0.03", "full:0.1", "selftune:7"];
    let mut single = Vec::new();
    for p in procs {
        single.push(run_acc(&rings_config(&[p], 2, 0)?)?);
    }
    let joint = run_acc(&rings_config(&procs, 2, 0)?)?;
    let max_single = single.iter().copied().fold(0.0, f64::max);
    let each_imperfect = single.iter().all(|&a| a < 1.0);
    Ok((
        each_imperfect && joint == 1.0 && joint >= max_single,
        format!(
            "rings (noise 0.03): single ACC {} = {:.3?}, concatenated ACC {joint:.3}",
            procs.join(" / "),
            single
        ),
    ))
}

fn criterion7() -> Outcome {
    let cfg = load_config(&repo().join("configs/two_rings.toml")).map_err(|e| e.to_string())?;
    let data = load_dataset(&cfg).map_err(|e| e.to_string())?;
    let report = run_pipeline(&cfg, &data).map_err(|e| e.to_string())?.report;
    let ch_after = |layer: usize| {
        report
            .variants
            .iter()
            .find(|v| v.after_layer == layer)
            .and_then(|v| v.metrics.as_ref())
            .and_then(|m| m.ch)
            .ok_or_else(|| format!("no CH for the variant after layer {layer}"))
    };
    let (one, two) = (ch_after(0)?, ch_after(1)?);
    Ok((two > one, format!("CH one layer {one:.1}, two layers {two:.1}")))
}

fn brute_force_acc(truth: &[usize], pred: &[usize]) -> f64 {
    let k = truth.iter().chain(pred).copied().max().unwrap_or(0) + 1;
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    // Heap's algorithm over all k! relabelings
    fn heap(k: usize, perm: &mut Vec<usize>, truth: &[usize], pred: &[usize], best: &mut usize) {
        if k <= 1 {
            let hits = truth.iter().zip(pred).filter(|(t, p)| perm[**p] == **t).count();
            *best = (*best).max(hits);
            return;
        }
        for i in 0..k {
            heap(k - 1, perm, truth, pred, best);
            if k % 2 == 0 { perm.swap(i, k - 1) } else { perm.swap(0, k - 1) }
        }
    }
    heap(k, &mut perm, truth, pred, &mut best);
    best as f64 / truth.len() as f64
}

fn pair_counts(truth: &[usize], pred: &[usize]) -> [f64; 4] {
    // [same/same, same/diff, diff/same, diff/diff]
    let mut c = [0.0; 4];
    for i in 0..truth.len() {
        for j in i + 1..truth.len() {
            let st = truth[i] == truth[j];
            let sp = pred[i] == pred[j];
            c[match (st, sp) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            }] += 1.0;
        }
    }
    c
}

fn oracle_nmi(truth: &[usize], pred: &[usize]) -> f64 {
    let n = truth.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut pt: HashMap<usize, f64> = HashMap::new();
    let mut pp: HashMap<usize, f64> = HashMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        *joint.entry((t, p)).or_default() += 1.0 / n;
        *pt.entry(t).or_default() += 1.0 / n;
        *pp.entry(p).or_default() += 1.0 / n;
    }
    let h = |m: &HashMap<usize, f64>| -m.values().map(|p| p * p.ln()).sum::<f64>();
    let (ht, hp) = (h(&pt), h(&pp));
    if pt.len() == 1 && pp.len() == 1 {
        return 1.0;
    }
    if pt.len() == 1 || pp.len() == 1 {
        return 0.0;
    }
    let mi: f64 = joint.iter().map(|(&(t, p), &pj)| pj * (pj / (pt[&t] * pp[&p])).ln()).sum();
    mi / (ht * hp).sqrt()
}

fn criterion8() -> Outcome {
    let mut r = rng::stream(8, "acceptance/c8");
    let mut acc_bad = 0;
    for _ in 0..200 {
        let k = r.random_range(1..=6);
        let n = r.random_range(1..=40);
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let got = accuracy(&truth, &pred).map_err(|e| e.to_string())?;
        if got != brute_force_acc(&truth, &pred) {
            acc_bad += 1;
        }
    }
    let (mut d_ari, mut d_nmi, mut d_f1) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let kt = r.random_range(1..=8);
        let kp = r.random_range(1..=8);
        let n = r.random_range(2..=80);
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..kt)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..kp)).collect();
        let [a, b, c, d] = pair_counts(&truth, &pred);
        let den = (a + b) * (b + d) + (a + c) * (c + d);
        let ari_oracle = if den == 0.0 { 1.0 } else { 2.0 * (a * d - b * c) / den };
        let f1_oracle = if a == 0.0 { 0.0 } else { 2.0 * a / (2.0 * a + b + c) };
        d_ari = d_ari.max((ari(&truth, &pred).map_err(|e| e.to_string())? - ari_oracle).abs());
        d_f1 = d_f1.max((pairwise_f1(&truth, &pred).map_err(|e| e.to_string())? - f1_oracle).abs());
        d_nmi = d_nmi.max((nmi(&truth, &pred).map_err(|e| e.to_string())? - oracle_nmi(&truth, &pred).clamp(0.0, 1.0)).abs());
    }
    Ok((
        acc_bad == 0 && d_ari <= 1e-12 && d_nmi <= 1e-12 && d_f1 <= 1e-12,
        format!("ACC mismatches {acc_bad}/200; max |d| ARI {d_ari:.1e}, NMI {d_nmi:.1e}, F1 {d_f1:.1e}"),
    ))
}

/// Results shared by criteria 9 to 11.
struct Mnist {
    cfg: PipelineConfig,
    seeds: Vec<u64>,
    full: BTreeMap<u64, RunReport>,
}

fn mnist_run(cfg: &PipelineConfig, seed: u64) -> Result<(RunReport, LabeledDataset), String> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let data = load_dataset(&cfg).map_err(|e| e.to_string())?;
    let report = run_pipeline(&cfg, &data).map_err(|e| e.to_string())?.report;
    Ok((report, data))
}

fn variant_acc(report: &RunReport, structure: &str) -> f64 {
    if report.structure == structure {
        return final_acc(report);
    }
    report
        .variants
        .iter()
        .find(|v| v.structure == structure)
        .and_then(|v| v.metrics.as_ref())
        .map_or(f64::NAN, |m| m.acc)
}

fn criterion9(m: &mut Mnist) -> Outcome {
    let (mut full, mut no_cl, mut no_bl_cl, mut raw, mut spec) = (vec![], vec![], vec![], vec![], vec![]);
    let baseline = ProcedureSpec::new(AffinityKind::Knn(10), LaplacianKind::Sym, SolverKind::Dense, 10);
    for &seed in &m.seeds {
        let (report, data) = mnist_run(&m.cfg, seed)?;
        let truth = data.labels.clone().ok_or("dataset has no labels")?;
        let rows: Vec<Vec<f64>> = data.images.iter().map(|im| im.data.clone()).collect();
        let pixels = PointSet::from_rows(&rows);
        let k = m.cfg.kmeans.k;
        let km = kmeans(&pixels, k, m.cfg.kmeans.restarts, seed).map_err(|e| e.to_string())?;
        let (sc, _) = spectral_cluster(&pixels, k, &baseline, m.cfg.kmeans.restarts, seed).map_err(|e| e.to_string())?;
        raw.push(accuracy(&truth, &km.labels).map_err(|e| e.to_string())?);
        spec.push(accuracy(&truth, &sc.labels).map_err(|e| e.to_string())?);
        full.push(final_acc(&report));
        no_cl.push(variant_acc(&report, "SAL-SAL-PL-BL"));
        no_bl_cl.push(variant_acc(&report, "SAL-SAL-PL"));
        println!(
            "    seed {seed}: SA-Net-2 {:.3} (no CL {:.3}, no BL/CL {:.3}), raw k-means {:.3}, spectral knn:10 {:.3}, {:.0} s",
            full.last().unwrap(),
            no_cl.last().unwrap(),
            no_bl_cl.last().unwrap(),
            raw.last().unwrap(),
            spec.last().unwrap(),
            report.timings.total
        );
        m.full.insert(seed, report);
    }
    // pooling with stride 2 instead of 1
    let mut pool2 = m.cfg.clone();
    for layer in &mut pool2.layers {
        if let LayerSpec::Pool { stride, .. } = layer {
            *stride = Some(2);
        }
    }
    pool2.validate().map_err(|e| e.to_string())?;
    let mut pooled = vec![];
    for &seed in &m.seeds {
        pooled.push(final_acc(&mnist_run(&pool2, seed)?.0));
    }
    let (f, c, b, r, s) = (median(full), median(no_cl), median(no_bl_cl), median(raw), median(spec));
    let beats = f >= r + 0.05 && f >= s + 0.05;
    let ordered = f >= c && c >= b;
    Ok((
        beats && ordered,
        format!(
            "medians: SA-Net-2 {f:.3}, raw k-means {r:.3}, spectral {s:.3} (margin >= 0.05: {beats}); \
             full {f:.3} >= no CL {c:.3} >= no BL/CL {b:.3}: {ordered}; pool stride 2 variant {:.3}",
            median(pooled)
        ),
    ))
}

fn criterion10(m: &Mnist) -> Outcome {
    let one = m.cfg.clone().with_procedures_prefix(1).map_err(|e| e.to_string())?;
    let mut acc1 = vec![];
    let mut acc8 = vec![];
    for &seed in &m.seeds {
        acc1.push(final_acc(&mnist_run(&one, seed)?.0));
        acc8.push(final_acc(m.full.get(&seed).ok_or("criterion 9 results are missing")?));
    }
    let (a1, a8) = (median(acc1.clone()), median(acc8.clone()));
    Ok((a8 >= a1, format!("median ACC M=8 {a8:.3} vs M=1 {a1:.3} (per seed {acc8:.3?} vs {acc1:.3?})")))
}

fn criterion11(m: &Mnist) -> Outcome {
    let seed = m.seeds[0];
    let reference = m.full.get(&seed).ok_or("criterion 9 results are missing")?;
    let threads = if rayon::current_num_threads() == 1 { 3 } else { 1 };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
    let rerun = pool.install(|| mnist_run(&m.cfg, seed))?.0;
    let same = rerun.labels == reference.labels
        && rerun.metrics == reference.metrics
        && rerun.without_timings() == reference.without_timings();
    Ok((
        same,
        format!("seed {seed} rerun with {threads} threads (reference {}): identical report {same}", rayon::current_num_threads()),
    ))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("SANET_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |c: usize| only.as_ref().is_none_or(|o| o.contains(&c));
    let limits = [60.0, 30.0, 30.0, 60.0, 120.0, 60.0, 120.0, 60.0, 1800.0, 2700.0, 600.0];

    let cfg = load_config(&repo().join("configs/mnist_desk.toml")).expect("desk config loads");
    let mut mnist = Mnist { cfg, seeds: vec![1, 2, 3], full: BTreeMap::new() };

    let mut results = Vec::new();
    for c in 1..=11 {
        if !wanted(c) {
            continue;
        }
        if c >= 10 && mnist.full.is_empty() {
            // criteria 10 and 11 reuse the criterion 9 runs
            if let Err(e) = criterion9(&mut mnist) {
                println!("criterion 9 runs failed: {e}");
            }
        }
        let start = Instant::now();
        let outcome = match c {
            1 => criterion1(),
            2 => criterion2(),
            3 => criterion3(),
            4 => criterion4(),
            5 => criterion5(),
            6 => criterion6(),
            7 => criterion7(),
            8 => criterion8(),
            9 => criterion9(&mut mnist),
            10 => criterion10(&mnist),
            _ => criterion11(&mnist),
        };
        let secs = start.elapsed().as_secs_f64();
        let limit = limits[c - 1];
        let (pass, detail) = match outcome {
            Ok((p, d)) => (p && secs < limit, d),
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "criterion {c:>2}: {} ({secs:.1} s, limit {limit:.0} s) {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        results.push((c, pass));
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        if std::env::var("SANET_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
