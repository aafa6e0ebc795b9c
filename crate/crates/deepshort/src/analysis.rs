//! Representation diagnostics: covariance spectra, effective rank, and the
//! two evaluation probes (nearest-neighbour and linear).
//!
//! Effective rank is the Shannon entropy (natural log) of the normalized
//! singular values of the sample covariance of CLS features: sigma_bar_i =
//! sigma_i / sum(sigma), rho = -sum(sigma_bar_i ln sigma_bar_i). All spectra
//! come from a cyclic Jacobi eigensolver in f64; nothing here touches the
//! autodiff tape.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, transpose_into, Rng, Tensor};

/// Center each feature dimension (column) across samples, then form the
/// sample-by-sample Gram scaled by 1/(d-1): A[i][j] is the covariance of
/// samples i and j across feature dimensions.
pub fn feature_covariance(features: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, d) = features.dims2();
    if n < 2 {
        return Err(Error::invalid(
            "covariance needs at least two samples (rows)",
        ));
    }
    if d < 2 {
        return Err(Error::invalid(
            "covariance needs at least two feature dimensions",
        ));
    }
    let centered = center_columns(features);
    let mut t = vec![0.0f64; n * d];
    transpose_into(centered.as_slice(), &mut t, n, d);
    let mut a = vec![0.0f64; n * n];
    matmul_acc(centered.as_slice(), &t, &mut a, n, d, n);
    let scale = 1.0 / (d as f64 - 1.0);
    for v in &mut a {
        *v *= scale;
    }
    Tensor::from_vec(vec![n, n], a)
}

fn center_columns(features: &Tensor<f64>) -> Tensor<f64> {
    let (n, d) = features.dims2();
    let mut means = vec![0.0f64; d];
    for i in 0..n {
        for (j, m) in means.iter_mut().enumerate() {
            *m += features.at(i, j);
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut out = features.clone();
    for i in 0..n {
        for j in 0..d {
            let v = out.at(i, j) - means[j];
            out.set(i, j, v);
        }
    }
    out
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix: returns
/// (eigenvalues, eigenvectors-as-columns) with A = Q diag(w) Q^T. The input
/// is scaled by its largest absolute entry first, and sweeps run until the
/// off-diagonal Frobenius norm of the scaled matrix drops below 1e-12.
pub fn jacobi_eigh(a: &Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)> {
    let (n, m) = a.dims2();
    if n != m {
        return Err(Error::invalid(format!("eigh on non-square {n}x{m}")));
    }
    let asym = max_asymmetry(a);
    if asym > 1e-8 {
        return Err(Error::invalid(format!(
            "matrix asymmetry {asym:.3e} exceeds 1e-8"
        )));
    }
    let mut q = identity(n);
    if n == 0 {
        return Ok((Vec::new(), q));
    }
    let scale = a
        .as_slice()
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if scale == 0.0 {
        return Ok((vec![0.0; n], q));
    }
    // Work on the symmetrized, scaled copy.
    let mut w = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            w[i * n + j] = 0.5 * (a.at(i, j) + a.at(j, i)) / scale;
        }
    }
    let off = |w: &[f64]| {
        let mut acc = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += w[i * n + j] * w[i * n + j];
                }
            }
        }
        acc.sqrt()
    };
    let mut sweeps = 0;
    while off(&w) >= 1e-12 {
        sweeps += 1;
        if sweeps > 100 {
            return Err(Error::invalid(
                "jacobi eigensolver failed to converge in 100 sweeps",
            ));
        }
        for p in 0..n - 1 {
            for qx in p + 1..n {
                let apq = w[p * n + qx];
                if apq == 0.0 {
                    continue;
                }
                let app = w[p * n + p];
                let aqq = w[qx * n + qx];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // A <- J^T A J for the (p, q) rotation.
                w[p * n + p] = app - t * apq;
                w[qx * n + qx] = aqq + t * apq;
                w[p * n + qx] = 0.0;
                w[qx * n + p] = 0.0;
                for i in 0..n {
                    if i != p && i != qx {
                        let aip = w[i * n + p];
                        let aiq = w[i * n + qx];
                        w[i * n + p] = c * aip - s * aiq;
                        w[p * n + i] = w[i * n + p];
                        w[i * n + qx] = s * aip + c * aiq;
                        w[qx * n + i] = w[i * n + qx];
                    }
                }
                for i in 0..n {
                    let qip = q.at(i, p);
                    let qiq = q.at(i, qx);
                    q.set(i, p, c * qip - s * qiq);
                    q.set(i, qx, s * qip + c * qiq);
                }
            }
        }
    }
    let values = (0..n).map(|i| w[i * n + i] * scale).collect();
    Ok((values, q))
}

fn identity(n: usize) -> Tensor<f64> {
    let mut q = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        q.set(i, i, 1.0);
    }
    q
}

fn max_asymmetry(a: &Tensor<f64>) -> f64 {
    let (n, _) = a.dims2();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((a.at(i, j) - a.at(j, i)).abs());
        }
    }
    worst
}

/// Eigenvalues of a symmetric PSD matrix, clamped at zero and sorted
/// descending; for PSD input these are its singular values.
pub fn singular_values(a: &Tensor<f64>) -> Result<Vec<f64>> {
    let (mut values, _) = jacobi_eigh(a)?;
    for v in &mut values {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    values.sort_by(|x, y| y.total_cmp(x));
    Ok(values)
}

/// Shannon entropy (natural log) of the normalized spectrum. Zero terms
/// contribute zero; an all-zero spectrum is an error.
pub fn effective_rank(sigma: &[f64]) -> Result<f64> {
    let mut total = 0.0f64;
    for &s in sigma {
        if s < -1e-12 {
            return Err(Error::invalid(format!("negative singular value {s}")));
        }
        total += s.max(0.0);
    }
    if total <= 0.0 {
        return Err(Error::invalid("all-zero singular spectrum"));
    }
    let mut rho = 0.0f64;
    for &s in sigma {
        let p = s.max(0.0) / total;
        if p > 0.0 {
            rho -= p * p.ln();
        }
    }
    Ok(rho)
}

/// Spectrum and entropy of the sample covariance of a feature matrix.
#[derive(Debug, Clone)]
pub struct RankReport {
    /// Descending singular values of the n x n covariance. When d < n the
    /// omitted n - d structural zeros are appended explicitly.
    pub singular_values: Vec<f64>,
    pub normalized: Vec<f64>,
    pub effective_rank: f64,
}

/// Covariance spectrum of `features` [n x d]. The eigenproblem is solved on
/// whichever Gram side is smaller (the nonzero spectra coincide), so large
/// evaluation sets stay cheap while the report still describes the n x n
/// sample covariance.
pub fn rank_report(features: &Tensor<f64>) -> Result<RankReport> {
    let (n, d) = features.dims2();
    if !features.all_finite() {
        return Err(Error::invalid("non-finite feature matrix"));
    }
    let mut values = if n <= d {
        singular_values(&feature_covariance(features)?)?
    } else {
        if n < 2 || d < 2 {
            return Err(Error::invalid("rank report needs n >= 2 and d >= 2"));
        }
        let centered = center_columns(features);
        let mut t = vec![0.0f64; n * d];
        transpose_into(centered.as_slice(), &mut t, n, d);
        let mut g = vec![0.0f64; d * d];
        matmul_acc(&t, centered.as_slice(), &mut g, d, n, d);
        let scale = 1.0 / (d as f64 - 1.0);
        for v in &mut g {
            *v *= scale;
        }
        singular_values(&Tensor::from_vec(vec![d, d], g)?)?
    };
    values.resize(n, 0.0);
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("all-zero covariance spectrum"));
    }
    let normalized: Vec<f64> = values.iter().map(|v| v / total).collect();
    let rho = effective_rank(&values)?;
    Ok(RankReport {
        singular_values: values,
        normalized,
        effective_rank: rho,
    })
}

fn normalize_rows(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, d) = x.dims2();
    let mut out = x.clone();
    for i in 0..n {
        let mut norm = 0.0f64;
        for j in 0..d {
            norm += x.at(i, j) * x.at(i, j);
        }
        let norm = norm.sqrt();
        if norm > 0.0 {
            for j in 0..d {
                out.set(i, j, x.at(i, j) / norm);
            }
        }
    }
    out
}

/// K-nearest-neighbour classification under cosine similarity. Majority
/// vote; ties break by summed similarity within the tied labels, then by
/// the lowest label id. Zero-norm rows get similarity 0 to everything.
pub fn knn_classify(
    train: &Tensor<f64>,
    labels: &[usize],
    query: &Tensor<f64>,
    k: usize,
) -> Result<Vec<usize>> {
    let (n, d) = train.dims2();
    let (m, dq) = query.dims2();
    if n == 0 {
        return Err(Error::invalid("empty training set"));
    }
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{n} training rows but {} labels",
            labels.len()
        )));
    }
    if d != dq {
        return Err(Error::ShapeMismatch {
            op: "knn_classify",
            lhs: vec![n, d],
            rhs: vec![m, dq],
        });
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "K = {k} outside 1..={n} training points"
        )));
    }
    let tn = normalize_rows(train);
    let qn = normalize_rows(query);
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut predictions = Vec::with_capacity(m);
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(n);
    for qi in 0..m {
        sims.clear();
        for ti in 0..n {
            let mut dot = 0.0f64;
            for j in 0..d {
                dot += qn.at(qi, j) * tn.at(ti, j);
            }
            sims.push((dot, ti));
        }
        // Highest similarity first; equal similarities keep ascending index.
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; n_classes];
        let mut sum_sim = vec![0.0f64; n_classes];
        for &(s, ti) in &sims[..k] {
            votes[labels[ti]] += 1;
            sum_sim[labels[ti]] += s;
        }
        let mut best = 0usize;
        for c in 1..n_classes {
            if votes[c] > votes[best]
                || (votes[c] == votes[best] && sum_sim[c] > sum_sim[best])
            {
                best = c;
            }
        }
        predictions.push(best);
    }
    Ok(predictions)
}

pub fn accuracy(predictions: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predictions.len(), truth.len());
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p == t)
        .count();
    hits as f64 / predictions.len() as f64
}

/// Evaluation-probe settings. `k` drives the nearest-neighbour probe; the
/// rest configure the linear probe (single dense layer on frozen features,
/// softmax cross-entropy, SGD with momentum 0.9, cosine learning rate to 0).
#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub k: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            k: 20,
            epochs: 200,
            batch: 1024,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Train a linear classifier on frozen features and return held-out
/// accuracy. Weights start at zero; batches reshuffle each epoch from a
/// seeded stream, so the result is a pure function of the inputs and seed.
pub fn linear_probe(
    train: &Tensor<f64>,
    train_labels: &[usize],
    test: &Tensor<f64>,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let (n, d) = train.dims2();
    let (m, dq) = test.dims2();
    if train_labels.len() != n || test_labels.len() != m {
        return Err(Error::invalid(
            "feature row count does not match label count",
        ));
    }
    if d != dq {
        return Err(Error::ShapeMismatch {
            op: "linear_probe",
            lhs: vec![n, d],
            rhs: vec![m, dq],
        });
    }
    if n == 0 || m == 0 {
        return Err(Error::invalid("empty probe split"));
    }
    let n_classes = train_labels
        .iter()
        .chain(test_labels)
        .copied()
        .max()
        .unwrap_or(0)
        + 1;
    let batch = cfg.batch.min(n).max(1);
    let mut w = vec![0.0f64; d * n_classes];
    let mut b = vec![0.0f64; n_classes];
    let mut vw = vec![0.0f64; d * n_classes];
    let mut vb = vec![0.0f64; n_classes];
    let momentum = 0.9;
    let mut order: Vec<usize> = (0..n).collect();
    let key = Rng::new(cfg.seed).derive("probe.order");

    for epoch in 0..cfg.epochs {
        let lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        let mut stream = key.derive_u64(epoch as u64).stream();
        stream.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let bsz = chunk.len();
            // logits, softmax, and gradient, all in ascending order
            let mut gw = vec![0.0f64; d * n_classes];
            let mut gb = vec![0.0f64; n_classes];
            let mut probs = vec![0.0f64; n_classes];
            for &i in chunk {
                for (c, p) in probs.iter_mut().enumerate() {
                    let mut acc = b[c];
                    for j in 0..d {
                        acc += train.at(i, j) * w[j * n_classes + c];
                    }
                    *p = acc;
                }
                let max = probs.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let mut z = 0.0f64;
                for p in probs.iter_mut() {
                    *p = (*p - max).exp();
                    z += *p;
                }
                for (c, p) in probs.iter_mut().enumerate() {
                    *p /= z;
                    let err = (*p - if c == train_labels[i] { 1.0 } else { 0.0 }) / bsz as f64;
                    gb[c] += err;
                    for j in 0..d {
                        gw[j * n_classes + c] += train.at(i, j) * err;
                    }
                }
            }
            for (v, g) in vw.iter_mut().zip(&gw) {
                *v = momentum * *v + g;
            }
            for (v, g) in vb.iter_mut().zip(&gb) {
                *v = momentum * *v + g;
            }
            for (wv, v) in w.iter_mut().zip(&vw) {
                *wv -= lr * v;
            }
            for (bv, v) in b.iter_mut().zip(&vb) {
                *bv -= lr * v;
            }
        }
    }

    let mut hits = 0usize;
    for i in 0..m {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..n_classes {
            let mut acc = b[c];
            for j in 0..d {
                acc += test.at(i, j) * w[j * n_classes + c];
            }
            if acc > best_score {
                best_score = acc;
                best = c;
            }
        }
        if best == test_labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / m as f64)
}

/// One checkpoint's worth of representation metrics; `status` is "ok" or a
/// warning such as "missing".
#[derive(Debug, Clone)]
pub struct DynamicsRow {
    pub epoch: u64,
    pub alpha_min: f64,
    pub eff_rank: f64,
    pub probe_acc: f64,
    pub knn_acc: f64,
    pub status: String,
}

pub fn dynamics_csv(rows: &[DynamicsRow]) -> String {
    let mut out = String::from("epoch,alpha_min,eff_rank,probe_acc,knn_acc,status\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.4},{:.6},{:.6},{:.6},{}",
            r.epoch, r.alpha_min, r.eff_rank, r.probe_acc, r.knn_acc, r.status
        )
        .unwrap();
    }
    out
}
