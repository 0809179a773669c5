//! Evaluation harnesses: link prediction over held-out edges and multi-label
//! node classification over latent codes, plus the repeat/ablation/sweep
//! drivers that train models per split and aggregate metrics across seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::elaine::{train_model, AblationVariant, ElaineConfig};
use crate::error::{ElaineError, Result};
use crate::graph::{EdgeAttributes, Graph, NodeLabels};

/// Cutoffs at which ranked precision is reported; entries beyond the
/// candidate count are dropped.
pub const PRECISION_GRID: [usize; 8] = [2, 10, 100, 200, 300, 500, 800, 1000];

/// L2 strength of the node classifier.
pub const CLASSIFIER_L2: f64 = 1e-4;

/// One train/test partition of a graph's edges. Candidate pairs are all
/// unordered pairs among the evaluation nodes that are not training edges;
/// the positives are the held-out edges inside that pool.
#[derive(Debug, Clone)]
pub struct LinkPredSplit {
    pub train: Graph,
    pub held_out: Vec<(usize, usize)>,
    pub eval_nodes: Vec<usize>,
    pub candidates: Vec<(usize, usize)>,
    pub positives: BTreeSet<(usize, usize)>,
}

/// Remove `round(m * holdout_fraction)` edges for evaluation. Evaluation
/// nodes are a uniform sample of at most `max_eval_nodes` nodes, kept
/// sorted.
pub fn make_split(
    g: &Graph,
    holdout_fraction: f64,
    max_eval_nodes: usize,
    seed: u64,
) -> Result<LinkPredSplit> {
    if !holdout_fraction.is_finite() || holdout_fraction <= 0.0 || holdout_fraction >= 1.0 {
        return Err(ElaineError::Validation(format!(
            "holdout fraction must lie strictly between 0 and 1, got {holdout_fraction}"
        )));
    }
    if max_eval_nodes < 2 {
        return Err(ElaineError::Validation(
            "need at least two evaluation nodes".into(),
        ));
    }
    let m = g.num_edges();
    let h = (m as f64 * holdout_fraction).round() as usize;
    if h == 0 {
        return Err(ElaineError::Validation(format!(
            "holdout of {holdout_fraction} selects no edges out of {m}"
        )));
    }
    if h >= m {
        return Err(ElaineError::Validation(format!(
            "holdout of {holdout_fraction} leaves no training edges out of {m}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let held_idx: BTreeSet<usize> = order[..h].iter().copied().collect();
    let mut held_out = Vec::with_capacity(h);
    let mut kept = Vec::with_capacity(m - h);
    for (i, &(u, v, w)) in g.edges().iter().enumerate() {
        if held_idx.contains(&i) {
            held_out.push((u, v));
        } else {
            kept.push((u, v, w));
        }
    }
    let train = Graph::from_edges(g.num_nodes(), kept)?;

    let mut nodes: Vec<usize> = (0..g.num_nodes()).collect();
    nodes.shuffle(&mut rng);
    nodes.truncate(max_eval_nodes.min(g.num_nodes()));
    nodes.sort_unstable();
    let eval_set: BTreeSet<usize> = nodes.iter().copied().collect();

    let mut candidates = Vec::new();
    for (a, &u) in nodes.iter().enumerate() {
        for &v in nodes.iter().skip(a + 1) {
            if !train.has_edge(u, v) {
                candidates.push((u, v));
            }
        }
    }
    let positives: BTreeSet<(usize, usize)> = held_out
        .iter()
        .copied()
        .filter(|&(u, v)| eval_set.contains(&u) && eval_set.contains(&v))
        .collect();

    Ok(LinkPredSplit {
        train,
        held_out,
        eval_nodes: nodes,
        candidates,
        positives,
    })
}

/// Score every candidate and sort by descending score, pair order breaking
/// ties. Scores must be finite.
pub fn rank_candidates(
    candidates: &[(usize, usize)],
    score: impl Fn(usize, usize) -> f64,
) -> Vec<((usize, usize), f64)> {
    let mut scored: Vec<((usize, usize), f64)> = candidates
        .iter()
        .map(|&(u, v)| {
            let s = score(u, v);
            assert!(s.is_finite(), "score for ({u}, {v}) is not finite");
            ((u, v), s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored
}

/// Fraction of relevant entries among the first `k` of a ranked hit list.
pub fn precision_at_k(hits: &[bool], k: usize) -> f64 {
    assert!(k >= 1, "precision needs a positive cutoff");
    assert!(
        k <= hits.len(),
        "cutoff {k} exceeds {} ranked entries",
        hits.len()
    );
    hits[..k].iter().filter(|&&h| h).count() as f64 / k as f64
}

/// Average precision of one ranked hit list; the list must contain at least
/// one relevant entry.
pub fn average_precision(hits: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut acc = 0.0;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            found += 1;
            acc += found as f64 / (i + 1) as f64;
        }
    }
    assert!(
        found > 0,
        "average precision needs at least one relevant entry"
    );
    acc / found as f64
}

/// Mean of per-list average precisions.
pub fn mean_average_precision(lists: &[Vec<bool>]) -> Result<f64> {
    if lists.is_empty() {
        return Err(ElaineError::Validation(
            "no ranked list contains a relevant pair".into(),
        ));
    }
    let total: f64 = lists.iter().map(|l| average_precision(l)).sum();
    Ok(total / lists.len() as f64)
}

/// Metrics of one split under one scorer.
#[derive(Debug, Clone)]
pub struct LinkPredOutcome {
    pub map: f64,
    pub precision_at: Vec<(usize, f64)>,
    pub num_candidates: usize,
    pub num_positives: usize,
}

/// Rank the split's candidates and compute ranked precision on the global
/// list plus mean average precision over per-node lists. A node contributes
/// to the mean when at least one of its held-out edges is in the candidate
/// pool.
pub fn evaluate_split(
    split: &LinkPredSplit,
    score: impl Fn(usize, usize) -> f64,
) -> Result<LinkPredOutcome> {
    if split.candidates.is_empty() {
        return Err(ElaineError::Validation("no candidate pairs to rank".into()));
    }
    let ranked = rank_candidates(&split.candidates, score);
    let hits: Vec<bool> = ranked
        .iter()
        .map(|(pair, _)| split.positives.contains(pair))
        .collect();
    let precision_at: Vec<(usize, f64)> = PRECISION_GRID
        .iter()
        .copied()
        .filter(|&k| k <= hits.len())
        .map(|k| (k, precision_at_k(&hits, k)))
        .collect();

    // Global order restricted to one node is already (-score, partner id):
    // for ties, pair order sorts a node's smaller partners first.
    let mut per_node: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    for (&((u, v), _), &hit) in ranked.iter().zip(hits.iter()) {
        per_node.entry(u).or_default().push(hit);
        per_node.entry(v).or_default().push(hit);
    }
    let contributing: Vec<Vec<bool>> = per_node
        .into_values()
        .filter(|l| l.iter().any(|&h| h))
        .collect();
    let map = mean_average_precision(&contributing)?;
    Ok(LinkPredOutcome {
        map,
        precision_at,
        num_candidates: split.candidates.len(),
        num_positives: split.positives.len(),
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// L2-regularized logistic regression by plain gradient descent. The step
/// is `1 / L` with `L` the curvature bound `max_i |x_i|^2 / 4 + lambda`;
/// iteration stops when no parameter moves more than 1e-6, or after 2000
/// rounds. The final column of `x` is the bias and is not regularized.
fn logistic_regression(x: &Array2<f64>, y: &Array1<f64>, lambda: f64) -> Array1<f64> {
    let n = x.nrows();
    let d = x.ncols();
    assert!(n > 0 && n == y.len());
    let max_sq = x.outer_iter().map(|r| r.dot(&r)).fold(0.0f64, f64::max);
    let lr = 1.0 / (max_sq / 4.0 + lambda).max(1e-12);
    let mut w = Array1::zeros(d);
    for _ in 0..2000 {
        let p = x.dot(&w).mapv(sigmoid);
        let err = &p - y;
        let mut grad = x.t().dot(&err) / n as f64;
        for j in 0..d - 1 {
            grad[j] += lambda * w[j];
        }
        let step = grad.mapv(|g| lr * g);
        let largest = step.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
        w -= &step;
        if largest < 1e-6 {
            break;
        }
    }
    w
}

/// Micro- and macro-averaged F1 between predicted and true label sets.
/// Macro averages over all `num_labels` labels; empty denominators score 0.
pub fn f1_scores(
    pred: &[BTreeSet<usize>],
    truth: &[BTreeSet<usize>],
    num_labels: usize,
) -> (f64, f64) {
    assert_eq!(pred.len(), truth.len());
    let mut tp = vec![0usize; num_labels];
    let mut fp = vec![0usize; num_labels];
    let mut fn_ = vec![0usize; num_labels];
    for (p, t) in pred.iter().zip(truth.iter()) {
        for &l in p {
            if t.contains(&l) {
                tp[l] += 1;
            } else {
                fp[l] += 1;
            }
        }
        for &l in t {
            if !p.contains(&l) {
                fn_[l] += 1;
            }
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let micro = f1(
        tp.iter().sum::<usize>(),
        fp.iter().sum::<usize>(),
        fn_.iter().sum::<usize>(),
    );
    let macro_ = (0..num_labels)
        .map(|l| f1(tp[l], fp[l], fn_[l]))
        .sum::<f64>()
        / num_labels as f64;
    (micro, macro_)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationOutcome {
    pub micro_f1: f64,
    pub macro_f1: f64,
}

/// One-vs-rest logistic classification of nodes from their embedding rows.
/// A `train_ratio` fraction of nodes (rounded to nearest) trains the
/// classifiers; every label occurring in the graph must appear in the
/// training set, redrawing with stepped seeds up to ten times. Predicted
/// labels are those with probability above one half, falling back to the
/// highest-probability label (lowest id on ties).
pub fn node_classification(
    emb: &Array2<f64>,
    labels: &NodeLabels,
    train_ratio: f64,
    seed: u64,
) -> Result<ClassificationOutcome> {
    let n = emb.nrows();
    if n != labels.num_nodes() {
        return Err(ElaineError::Validation(format!(
            "embedding has {n} rows but labels cover {} nodes",
            labels.num_nodes()
        )));
    }
    if !train_ratio.is_finite() || train_ratio <= 0.0 || train_ratio >= 1.0 {
        return Err(ElaineError::Validation(format!(
            "train ratio must lie strictly between 0 and 1, got {train_ratio}"
        )));
    }
    if n < 2 {
        return Err(ElaineError::Validation(
            "classification needs at least two nodes".into(),
        ));
    }
    let num_labels = labels.num_labels();
    let occurring: BTreeSet<usize> = (0..n).flat_map(|u| labels.of(u).iter().copied()).collect();
    let n_train = ((n as f64 * train_ratio).round() as usize).clamp(1, n - 1);

    let mut split: Option<(Vec<usize>, Vec<usize>)> = None;
    for attempt in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (tr, te) = order.split_at(n_train);
        let covered: BTreeSet<usize> = tr
            .iter()
            .flat_map(|&u| labels.of(u).iter().copied())
            .collect();
        if occurring.is_subset(&covered) {
            split = Some((tr.to_vec(), te.to_vec()));
            break;
        }
    }
    let (train_nodes, test_nodes) = split.ok_or_else(|| {
        ElaineError::Validation(
            "could not draw a training split covering every occurring label".into(),
        )
    })?;

    // Design matrices with a trailing bias column.
    let d = emb.ncols();
    let design = |nodes: &[usize]| {
        let mut x = Array2::ones((nodes.len(), d + 1));
        for (r, &u) in nodes.iter().enumerate() {
            for c in 0..d {
                x[[r, c]] = emb[[u, c]];
            }
        }
        x
    };
    let x_train = design(&train_nodes);
    let x_test = design(&test_nodes);

    let mut probs = Array2::zeros((test_nodes.len(), num_labels));
    for l in 0..num_labels {
        if !occurring.contains(&l) {
            continue;
        }
        let y = Array1::from_iter(train_nodes.iter().map(|&u| {
            if labels.has_label(u, l) {
                1.0
            } else {
                0.0
            }
        }));
        let w = logistic_regression(&x_train, &y, CLASSIFIER_L2);
        let p = x_test.dot(&w).mapv(sigmoid);
        for (r, &v) in p.iter().enumerate() {
            probs[[r, l]] = v;
        }
    }

    let mut pred = Vec::with_capacity(test_nodes.len());
    for r in 0..test_nodes.len() {
        let mut set: BTreeSet<usize> = (0..num_labels).filter(|&l| probs[[r, l]] > 0.5).collect();
        if set.is_empty() {
            let mut best = 0usize;
            for l in 1..num_labels {
                if probs[[r, l]] > probs[[r, best]] {
                    best = l;
                }
            }
            set.insert(best);
        }
        pred.push(set);
    }
    let truth: Vec<BTreeSet<usize>> = test_nodes.iter().map(|&u| labels.of(u).clone()).collect();
    let (micro_f1, macro_f1) = f1_scores(&pred, &truth, num_labels);
    Ok(ClassificationOutcome { micro_f1, macro_f1 })
}

/// Mean and population standard deviation over repeat values.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatStats {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl RepeatStats {
    pub fn from_values(values: Vec<f64>) -> RepeatStats {
        assert!(!values.is_empty(), "stats need at least one value");
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        RepeatStats {
            mean,
            std: var.sqrt(),
            values,
        }
    }
}

/// Shared knobs of the repeat-based evaluations.
#[derive(Debug, Clone, Copy)]
pub struct EvalParams {
    pub holdout_fraction: f64,
    pub max_eval_nodes: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            holdout_fraction: 0.2,
            max_eval_nodes: 1024,
            repeats: 5,
            seed: 0,
        }
    }
}

/// Link-prediction metrics aggregated over repeats.
#[derive(Debug, Clone)]
pub struct LinkPredReport {
    pub map: RepeatStats,
    pub precision_at: Vec<(usize, RepeatStats)>,
    pub repeats_attempted: usize,
    pub failures: usize,
}

fn make_splits(g: &Graph, params: &EvalParams) -> Result<Vec<LinkPredSplit>> {
    if params.repeats == 0 {
        return Err(ElaineError::Validation("repeats must be positive".into()));
    }
    (0..params.repeats)
        .map(|i| {
            make_split(
                g,
                params.holdout_fraction,
                params.max_eval_nodes,
                params.seed.wrapping_add(i as u64),
            )
        })
        .collect()
}

fn aggregate_outcomes(outcomes: Vec<Result<LinkPredOutcome>>) -> Result<LinkPredReport> {
    let attempted = outcomes.len();
    let mut maps = Vec::new();
    let mut pk: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut failures = 0usize;
    let mut last_err = String::new();
    for o in outcomes {
        match o {
            Ok(out) => {
                maps.push(out.map);
                for (k, p) in out.precision_at {
                    pk.entry(k).or_default().push(p);
                }
            }
            Err(e) => {
                log::warn!("evaluation repeat failed: {e}");
                failures += 1;
                last_err = e.to_string();
            }
        }
    }
    if maps.is_empty() {
        return Err(ElaineError::Validation(format!(
            "all {attempted} evaluation repeats failed; last error: {last_err}"
        )));
    }
    Ok(LinkPredReport {
        map: RepeatStats::from_values(maps),
        precision_at: pk
            .into_iter()
            .map(|(k, v)| (k, RepeatStats::from_values(v)))
            .collect(),
        repeats_attempted: attempted,
        failures,
    })
}

/// Train one configuration per split (seeds stepped per repeat) and collect
/// the outcomes by configuration. Jobs run in parallel; results are grouped
/// by index so the output order never depends on scheduling.
fn evaluate_configs_on_splits(
    attrs: Option<&EdgeAttributes>,
    configs: &[ElaineConfig],
    splits: &[LinkPredSplit],
    cache_dir: Option<&Path>,
) -> Vec<Result<LinkPredReport>> {
    let jobs: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..splits.len()).map(move |s| (c, s)))
        .collect();
    let mut results: Vec<Vec<Option<Result<LinkPredOutcome>>>> = (0..configs.len())
        .map(|_| (0..splits.len()).map(|_| None).collect())
        .collect();
    let raw: Vec<((usize, usize), Result<LinkPredOutcome>)> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let mut cfg = configs[c].clone();
            cfg.seed = cfg.seed.wrapping_add(s as u64);
            let split = &splits[s];
            let sub = attrs.map(|a| a.subset_for(&split.train));
            let outcome =
                train_model(&split.train, sub.as_ref(), &cfg, cache_dir).and_then(|trained| {
                    let scorer = trained.edge_scorer();
                    evaluate_split(split, |u, v| scorer.score(u, v))
                });
            ((c, s), outcome)
        })
        .collect();
    for ((c, s), outcome) in raw {
        results[c][s] = Some(outcome);
    }
    results
        .into_iter()
        .map(|per_split| aggregate_outcomes(per_split.into_iter().map(Option::unwrap).collect()))
        .collect()
}

/// Repeated link prediction for one configuration.
pub fn run_link_prediction(
    g: &Graph,
    attrs: Option<&EdgeAttributes>,
    cfg: &ElaineConfig,
    params: &EvalParams,
    cache_dir: Option<&Path>,
) -> Result<LinkPredReport> {
    cfg.validate()?;
    let splits = make_splits(g, params)?;
    evaluate_configs_on_splits(attrs, std::slice::from_ref(cfg), &splits, cache_dir)
        .pop()
        .unwrap()
}

/// Run the whole ablation ladder over one shared set of splits, so every
/// variant sees identical train graphs and candidate pools.
pub fn run_ablation(
    g: &Graph,
    attrs: Option<&EdgeAttributes>,
    base: &ElaineConfig,
    params: &EvalParams,
    cache_dir: Option<&Path>,
) -> Result<Vec<(AblationVariant, LinkPredReport)>> {
    base.validate()?;
    if attrs.is_none() {
        return Err(ElaineError::Validation(
            "the ablation ladder needs edge attributes".into(),
        ));
    }
    let splits = make_splits(g, params)?;
    let configs: Vec<ElaineConfig> = AblationVariant::ALL.iter().map(|v| v.apply(base)).collect();
    let reports = evaluate_configs_on_splits(attrs, &configs, &splits, cache_dir);
    AblationVariant::ALL
        .iter()
        .zip(reports)
        .map(|(v, r)| r.map(|r| (*v, r)))
        .collect()
}

/// One hyperparameter axis to sweep while everything else stays fixed.
#[derive(Debug, Clone)]
pub enum SweepAxis {
    Dim(Vec<usize>),
    Alpha1(Vec<f64>),
}

impl SweepAxis {
    fn configs(&self, base: &ElaineConfig) -> Vec<(String, ElaineConfig)> {
        match self {
            SweepAxis::Dim(vals) => vals
                .iter()
                .map(|&d| {
                    let mut cfg = base.clone();
                    cfg.dim = d;
                    (format!("dim={d}"), cfg)
                })
                .collect(),
            SweepAxis::Alpha1(vals) => vals
                .iter()
                .map(|&a| {
                    let mut cfg = base.clone();
                    cfg.alpha1 = a;
                    (format!("alpha1={a}"), cfg)
                })
                .collect(),
        }
    }
}

/// Sweep one axis over one shared set of splits; all values are evaluated
/// on identical candidate pools.
pub fn run_sweep(
    g: &Graph,
    attrs: Option<&EdgeAttributes>,
    base: &ElaineConfig,
    axis: &SweepAxis,
    params: &EvalParams,
    cache_dir: Option<&Path>,
) -> Result<Vec<(String, LinkPredReport)>> {
    base.validate()?;
    let labeled = axis.configs(base);
    if labeled.is_empty() {
        return Err(ElaineError::Validation("sweep has no values".into()));
    }
    let splits = make_splits(g, params)?;
    let configs: Vec<ElaineConfig> = labeled.iter().map(|(_, c)| c.clone()).collect();
    let reports = evaluate_configs_on_splits(attrs, &configs, &splits, cache_dir);
    labeled
        .into_iter()
        .zip(reports)
        .map(|((label, _), r)| r.map(|r| (label, r)))
        .collect()
}

/// Classification quality per training ratio. The embedding is trained once
/// on the full graph; repeats redraw the node split.
pub fn run_node_classification(
    g: &Graph,
    attrs: Option<&EdgeAttributes>,
    labels: &NodeLabels,
    cfg: &ElaineConfig,
    ratios: &[f64],
    repeats: usize,
    seed: u64,
    cache_dir: Option<&Path>,
) -> Result<Vec<(f64, RepeatStats, RepeatStats)>> {
    cfg.validate()?;
    if ratios.is_empty() {
        return Err(ElaineError::Validation("no training ratios given".into()));
    }
    if repeats == 0 {
        return Err(ElaineError::Validation("repeats must be positive".into()));
    }
    let trained = train_model(g, attrs, cfg, cache_dir)?;
    let emb = trained.embed();
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut micro = Vec::new();
        let mut macro_ = Vec::new();
        let mut last_err = String::new();
        for rep in 0..repeats {
            // Stride keeps redraw attempts of neighboring repeats disjoint.
            match node_classification(&emb.y, labels, ratio, seed.wrapping_add(100 * rep as u64)) {
                Ok(out) => {
                    micro.push(out.micro_f1);
                    macro_.push(out.macro_f1);
                }
                Err(e) => {
                    log::warn!("classification repeat failed at ratio {ratio}: {e}");
                    last_err = e.to_string();
                }
            }
        }
        if micro.is_empty() {
            return Err(ElaineError::Validation(format!(
                "all classification repeats failed at ratio {ratio}; last error: {last_err}"
            )));
        }
        rows.push((
            ratio,
            RepeatStats::from_values(micro),
            RepeatStats::from_values(macro_),
        ));
    }
    Ok(rows)
}

/// Spearman rank correlation with averaged ranks on ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    assert!(a.len() >= 2, "correlation needs at least two points");
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap());
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let mean = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// One aggregated metric row of a report table.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub label: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub repeats: usize,
}

pub fn linkpred_rows(label: &str, report: &LinkPredReport) -> Vec<CsvRow> {
    let mut rows = vec![CsvRow {
        label: label.to_string(),
        metric: "map".into(),
        mean: report.map.mean,
        std: report.map.std,
        repeats: report.map.values.len(),
    }];
    for (k, stats) in &report.precision_at {
        rows.push(CsvRow {
            label: label.to_string(),
            metric: format!("p@{k}"),
            mean: stats.mean,
            std: stats.std,
            repeats: stats.values.len(),
        });
    }
    rows
}

pub fn nodeclass_rows(rows_in: &[(f64, RepeatStats, RepeatStats)]) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for (ratio, micro, macro_) in rows_in {
        rows.push(CsvRow {
            label: format!("ratio={ratio}"),
            metric: "micro_f1".into(),
            mean: micro.mean,
            std: micro.std,
            repeats: micro.values.len(),
        });
        rows.push(CsvRow {
            label: format!("ratio={ratio}"),
            metric: "macro_f1".into(),
            mean: macro_.mean,
            std: macro_.std,
            repeats: macro_.values.len(),
        });
    }
    rows
}

/// Write rows as `label,metric,mean,std,repeats` CSV.
pub fn write_csv(path: impl AsRef<Path>, rows: &[CsvRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("label,metric,mean,std,repeats\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.label, r.metric, r.mean, r.std, r.repeats
        ));
    }
    std::fs::write(path, out).map_err(|e| ElaineError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SbmConfig;
    use rand::Rng;

    fn chain(n: usize) -> Graph {
        Graph::from_edges(n, (0..n - 1).map(|i| (i, i + 1, 1.0))).unwrap()
    }

    fn er_graph(n: usize, p: f64, seed: u64) -> Graph {
        let cfg = SbmConfig {
            blocks: 1,
            nodes_per_block: n,
            p_in: p,
            p_out: 0.0,
            edge_topics: 1,
            attr_noise: 0.0,
            seed,
        };
        crate::graph::generate_sbm(&cfg).unwrap().0
    }

    #[test]
    fn split_holds_out_a_rounded_share_of_edges() {
        let g = chain(11); // 10 edges
        let split = make_split(&g, 0.2, 1024, 7).unwrap();
        assert_eq!(split.held_out.len(), 2);
        assert_eq!(split.train.num_edges(), 8);
        // 0.25 of 10 rounds up.
        let split = make_split(&g, 0.25, 1024, 7).unwrap();
        assert_eq!(split.held_out.len(), 3);

        // Held-out plus training edges recover the original edge set.
        let mut all: Vec<(usize, usize)> = split
            .train
            .edges()
            .iter()
            .map(|&(u, v, _)| (u, v))
            .chain(split.held_out.iter().copied())
            .collect();
        all.sort_unstable();
        let orig: Vec<(usize, usize)> = g.edges().iter().map(|&(u, v, _)| (u, v)).collect();
        assert_eq!(all, orig);
    }

    #[test]
    fn split_candidates_are_nontrain_pairs_of_eval_nodes() {
        let g = er_graph(20, 0.3, 3);
        let split = make_split(&g, 0.3, 8, 11).unwrap();
        assert_eq!(split.eval_nodes.len(), 8);
        assert!(split.eval_nodes.windows(2).all(|w| w[0] < w[1]));

        // Brute-force recomputation of the candidate pool.
        let mut want = Vec::new();
        for (a, &u) in split.eval_nodes.iter().enumerate() {
            for &v in split.eval_nodes.iter().skip(a + 1) {
                if !split.train.has_edge(u, v) {
                    want.push((u, v));
                }
            }
        }
        assert_eq!(split.candidates, want);
        for p in &split.positives {
            assert!(split.candidates.contains(p));
            assert!(split.held_out.contains(p));
        }
    }

    #[test]
    fn split_rejects_degenerate_requests() {
        let g = chain(11);
        assert!(make_split(&g, 0.0, 16, 0).is_err());
        assert!(make_split(&g, 1.0, 16, 0).is_err());
        assert!(make_split(&g, 0.01, 16, 0).is_err()); // rounds to zero edges
        assert!(make_split(&g, 0.2, 1, 0).is_err());
        let tiny = chain(2); // one edge: removing it leaves nothing
        assert!(make_split(&tiny, 0.9, 16, 0).is_err());
    }

    #[test]
    fn precision_fixture() {
        let hits = [true, false, true, false];
        assert_eq!(precision_at_k(&hits, 1), 1.0);
        assert_eq!(precision_at_k(&hits, 2), 0.5);
        assert!((precision_at_k(&hits, 3) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(precision_at_k(&hits, 4), 0.5);
    }

    #[test]
    #[should_panic(expected = "positive cutoff")]
    fn precision_rejects_zero_cutoff() {
        precision_at_k(&[true], 0);
    }

    #[test]
    fn average_precision_fixtures() {
        // Hits at ranks 1 and 3: (1/1 + 2/3) / 2.
        assert!((average_precision(&[true, false, true]) - 5.0 / 6.0).abs() < 1e-15);
        // Two lists: AP 1 and AP 1/2 average to 3/4.
        let lists = vec![vec![true], vec![false, true]];
        assert!((mean_average_precision(&lists).unwrap() - 0.75).abs() < 1e-15);
        assert!(mean_average_precision(&[]).is_err());
    }

    #[test]
    fn ranking_orders_by_score_then_pair() {
        let cands = vec![(0, 1), (0, 2), (1, 2), (2, 3)];
        let ranked = rank_candidates(&cands, |u, v| if (u, v) == (1, 2) { 2.0 } else { 1.0 });
        let pairs: Vec<(usize, usize)> = ranked.iter().map(|&(p, _)| p).collect();
        assert_eq!(pairs, vec![(1, 2), (0, 1), (0, 2), (2, 3)]);
    }

    #[test]
    fn perfect_scorer_reaches_map_one() {
        let g = er_graph(24, 0.25, 5);
        let split = make_split(&g, 0.3, 24, 2).unwrap();
        assert!(!split.positives.is_empty());
        let pos = split.positives.clone();
        let out = evaluate_split(&split, |u, v| {
            if pos.contains(&(u.min(v), u.max(v))) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        assert_eq!(out.map, 1.0);
        assert_eq!(out.num_positives, pos.len());
        for (k, p) in &out.precision_at {
            if *k <= pos.len() {
                assert_eq!(*p, 1.0, "p@{k}");
            }
        }
    }

    #[test]
    fn random_scores_match_the_exact_ranking_expectation() {
        // Oracle: with scores drawn iid, a node's list of C candidates
        // containing R relevant ones is a uniform random ranking, so
        //   E[AP] = (R-1)/(C-1) + (H_C / C) * (1 - (R-1)/(C-1)),
        // and the expected mean is the average over contributing nodes.
        let g = er_graph(64, 0.2, 9);
        let split = make_split(&g, 0.3, 64, 4).unwrap();

        let mut per_node: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for &(u, v) in &split.candidates {
            per_node.entry(u).or_default().0 += 1;
            per_node.entry(v).or_default().0 += 1;
        }
        for &(u, v) in &split.positives {
            per_node.get_mut(&u).unwrap().1 += 1;
            per_node.get_mut(&v).unwrap().1 += 1;
        }
        let harmonic = |c: usize| (1..=c).map(|i| 1.0 / i as f64).sum::<f64>();
        let expected_ap = |c: usize, r: usize| {
            let lead = (r - 1) as f64 / (c - 1) as f64;
            lead + harmonic(c) / c as f64 * (1.0 - lead)
        };
        let contributing: Vec<(usize, usize)> =
            per_node.values().copied().filter(|&(_, r)| r > 0).collect();
        assert!(!contributing.is_empty());
        let oracle: f64 = contributing
            .iter()
            .map(|&(c, r)| expected_ap(c, r))
            .sum::<f64>()
            / contributing.len() as f64;

        let trials = 20;
        let mut maps = Vec::with_capacity(trials);
        for t in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + t as u64);
            let scores: BTreeMap<(usize, usize), f64> = split
                .candidates
                .iter()
                .map(|&p| (p, rng.gen::<f64>()))
                .collect();
            let out = evaluate_split(&split, |u, v| scores[&(u.min(v), u.max(v))]).unwrap();
            maps.push(out.map);
        }
        let stats = RepeatStats::from_values(maps);
        let sem = stats.std / (trials as f64).sqrt();
        assert!(
            (stats.mean - oracle).abs() < 4.0 * sem.max(1e-4),
            "empirical {} vs oracle {oracle} (sem {sem})",
            stats.mean
        );
    }

    #[test]
    fn repeat_stats_use_the_population_deviation() {
        let s = RepeatStats::from_values(vec![2.0, 4.0]);
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.std, 1.0);
        let one = RepeatStats::from_values(vec![0.42]);
        assert_eq!(one.std, 0.0);
    }

    #[test]
    fn f1_matches_an_independent_confusion_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let num_labels = 5;
        let n = 40;
        let rand_sets = |rng: &mut ChaCha8Rng| {
            (0..n)
                .map(|_| {
                    (0..num_labels)
                        .filter(|_| rng.gen_bool(0.3))
                        .collect::<BTreeSet<usize>>()
                })
                .collect::<Vec<_>>()
        };
        let pred = rand_sets(&mut rng);
        let truth = rand_sets(&mut rng);
        let (micro, macro_) = f1_scores(&pred, &truth, num_labels);

        // Recount through explicit per-(node, label) booleans.
        let mut g_tp = 0usize;
        let mut g_fp = 0usize;
        let mut g_fn = 0usize;
        let mut per_label = vec![0.0; num_labels];
        for l in 0..num_labels {
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut fn_ = 0usize;
            for i in 0..n {
                let p = pred[i].contains(&l);
                let t = truth[i].contains(&l);
                match (p, t) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            g_tp += tp;
            g_fp += fp;
            g_fn += fn_;
            per_label[l] = if 2 * tp + fp + fn_ == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            };
        }
        let want_micro = 2.0 * g_tp as f64 / (2 * g_tp + g_fp + g_fn) as f64;
        let want_macro = per_label.iter().sum::<f64>() / num_labels as f64;
        assert!((micro - want_micro).abs() < 1e-15);
        assert!((macro_ - want_macro).abs() < 1e-15);
    }

    #[test]
    fn one_hot_embeddings_classify_perfectly() {
        let n = 30;
        let blocks = 3;
        let mut y = Array2::zeros((n, blocks));
        let mut label_sets = Vec::new();
        for u in 0..n {
            let b = u % blocks;
            y[[u, b]] = 1.0;
            label_sets.push(BTreeSet::from([b]));
        }
        let labels = NodeLabels::new(label_sets);
        let out = node_classification(&y, &labels, 0.5, 3).unwrap();
        assert_eq!(out.micro_f1, 1.0);
        assert_eq!(out.macro_f1, 1.0);
    }

    #[test]
    fn classification_requires_label_coverage() {
        // Two nodes with distinct labels and a one-node training set can
        // never cover both labels.
        let labels = NodeLabels::new(vec![BTreeSet::from([0]), BTreeSet::from([1])]);
        let y = Array2::from_shape_fn((2, 2), |(i, j)| if i == j { 1.0 } else { 0.0 });
        assert!(node_classification(&y, &labels, 0.5, 0).is_err());
    }

    #[test]
    fn spearman_fixtures() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [10.0, 20.0, 30.0, 40.0];
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-15);
        let rev = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &rev) + 1.0).abs() < 1e-15);
        // Tied pair takes the average rank 2.5.
        let tied = [1.0, 2.0, 2.0, 3.0];
        let want = 1.125 / (1.125f64 * 1.25).sqrt();
        assert!((spearman(&tied, &a) - want).abs() < 1e-12);
        // Constant input has no ordering information.
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
    }

    #[test]
    fn link_prediction_runs_end_to_end() {
        let g = er_graph(24, 0.3, 21);
        let attrs = {
            let mut a = EdgeAttributes::new(2).unwrap();
            for &(u, v, _) in g.edges() {
                a.insert(u, v, vec![0.2, 0.8]).unwrap();
            }
            a
        };
        let cfg = ElaineConfig {
            dim: 4,
            encoder_hidden: vec![8],
            epochs: 10,
            walks_per_node: 3,
            walk_length: 3,
            ..ElaineConfig::default()
        };
        let params = EvalParams {
            repeats: 2,
            max_eval_nodes: 24,
            ..EvalParams::default()
        };
        let report = run_link_prediction(&g, Some(&attrs), &cfg, &params, None).unwrap();
        assert_eq!(report.repeats_attempted, 2);
        assert_eq!(report.failures, 0);
        assert_eq!(report.map.values.len(), 2);
        assert!(report.map.mean >= 0.0 && report.map.mean <= 1.0);
        assert!(!report.precision_at.is_empty());

        // Same call, same numbers.
        let again = run_link_prediction(&g, Some(&attrs), &cfg, &params, None).unwrap();
        assert_eq!(report.map.values, again.map.values);
    }

    #[test]
    fn ablation_covers_the_ladder_on_shared_splits() {
        let g = er_graph(20, 0.3, 33);
        let attrs = {
            let mut a = EdgeAttributes::new(2).unwrap();
            for &(u, v, _) in g.edges() {
                a.insert(u, v, vec![0.5, 0.5]).unwrap();
            }
            a
        };
        let cfg = ElaineConfig {
            dim: 3,
            encoder_hidden: vec![6],
            epochs: 3,
            walks_per_node: 2,
            walk_length: 2,
            ..ElaineConfig::default()
        };
        let params = EvalParams {
            repeats: 2,
            max_eval_nodes: 20,
            ..EvalParams::default()
        };
        let rows = run_ablation(&g, Some(&attrs), &cfg, &params, None).unwrap();
        assert_eq!(rows.len(), 6);
        let names: Vec<&str> = rows.iter().map(|(v, _)| v.name()).collect();
        assert_eq!(
            names,
            vec!["AE", "VAE", "VAE+HO", "VAE+HO-R", "NA-ELAINE", "ELAINE"]
        );
        for (_, r) in &rows {
            assert_eq!(r.map.values.len(), 2);
        }
        assert!(run_ablation(&g, None, &cfg, &params, None).is_err());
    }

    #[test]
    fn sweep_labels_follow_the_axis() {
        let g = er_graph(18, 0.3, 40);
        let cfg = ElaineConfig {
            dim: 3,
            encoder_hidden: vec![5],
            epochs: 2,
            walks_per_node: 2,
            walk_length: 2,
            edge_attr_mode: crate::elaine::EdgeAttrMode::Off,
            use_roles: false,
            ..ElaineConfig::default()
        };
        let params = EvalParams {
            repeats: 2,
            max_eval_nodes: 18,
            ..EvalParams::default()
        };
        let rows = run_sweep(&g, None, &cfg, &SweepAxis::Dim(vec![2, 4]), &params, None).unwrap();
        assert_eq!(rows[0].0, "dim=2");
        assert_eq!(rows[1].0, "dim=4");
        let rows = run_sweep(&g, None, &cfg, &SweepAxis::Alpha1(vec![0.1]), &params, None).unwrap();
        assert_eq!(rows[0].0, "alpha1=0.1");
    }

    #[test]
    fn csv_rows_serialize_with_header() {
        let report = LinkPredReport {
            map: RepeatStats::from_values(vec![0.5, 0.7]),
            precision_at: vec![(2, RepeatStats::from_values(vec![1.0, 0.5]))],
            repeats_attempted: 2,
            failures: 0,
        };
        let rows = linkpred_rows("ELAINE", &report);
        assert_eq!(rows.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("label,metric,mean,std,repeats"));
        assert_eq!(lines.next(), Some("ELAINE,map,0.6,0.09999999999999998,2"));
        assert!(text.contains("ELAINE,p@2,0.75,0.25,2"));
    }

    proptest::proptest! {
        #[test]
        fn ranked_metrics_stay_in_the_unit_interval(
            hits in proptest::collection::vec(proptest::bool::ANY, 1..40),
            k in 1usize..40,
        ) {
            let k = k.min(hits.len());
            let p = precision_at_k(&hits, k);
            proptest::prop_assert!((0.0..=1.0).contains(&p));
            if hits.iter().any(|&h| h) {
                let ap = average_precision(&hits);
                proptest::prop_assert!(ap > 0.0 && ap <= 1.0);
            }
        }
    }
}
