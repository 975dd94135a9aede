//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero when any criterion fails.
//!
//! Criteria 7-12 run on the default desk model (blobs, depth 24, width 48)
//! built exactly as `collapse-lab experiment` builds it, for seeds 42, 43
//! and 44. Training and the shared Magnitude grid are computed once per
//! seed and their cost is charged to every criterion that uses them.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use collapse_lab::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use collapse_lab::datasets::Dataset;
use collapse_lab::diagnostics::{cumulative_variance_projection, normalized_hamming, prediction_histogram, variance_ratio_report};
use collapse_lab::math::fisher::FisherStorage;
use collapse_lab::math::{fisher_inverse_vector, FisherBlock};
use collapse_lab::pruning::{
    build_mask, estimate_fisher, joint_obs_update, obs_single_update, prune_pipeline, quadratic_increase, score_weights,
    FisherConfig, FisherEstimate, PruneMask, PruneMethod, UpdateMode,
};
use collapse_lab::reflow::{
    apply_reflow, collect_bn_stats_from, layerwise_recalibration_sweep, steps_to_fraction_of_gain, CalibrationSpec,
    RecalibratedStats, SweepDirection,
};
use collapse_lab::training::{accuracy, loss_and_gradient, per_sample_gradients_all, per_sample_losses, train, TrainConfig};
use collapse_lab::{BnMode, Model, ModelConfig, RngState, TensorF};
use collapse_lab_cli::config::ExperimentConfig;
use collapse_lab_cli::experiment::{diagnostics_probe, fisher_sample, load_data, run_experiment};
use collapse_lab_cli::records::*;
use nalgebra::{DMatrix, DVector};

const SEEDS: [u64; 3] = [42, 43, 44];
const GRID: [f64; 6] = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Outcome of one criterion: pass flag plus one line of evidence.
struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new() -> Self {
        Self {
            pass: true,
            detail: String::new(),
        }
    }

    fn check(&mut self, ok: bool, note: impl AsRef<str>) {
        self.pass &= ok;
        if !self.detail.is_empty() {
            self.detail.push_str("; ");
        }
        if !ok {
            self.detail.push_str("FAILED ");
        }
        self.detail.push_str(note.as_ref());
    }
}

// Shared desk runs

struct Desk {
    train: Dataset,
    eval: Dataset,
    probe: Dataset,
    model: Model,
    spec: CalibrationSpec,
    fisher_cfg: FisherConfig,
    cost: Duration,
}

struct GridCell {
    sparsity: f64,
    pruned: Model,
    pruned_acc: f64,
    stats: RecalibratedStats,
    reflowed: Model,
    reflowed_acc: f64,
}

struct MagnitudeGrid {
    cells: Vec<GridCell>,
    cost: Duration,
}

static DESKS: [OnceLock<Desk>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
static GRIDS: [OnceLock<MagnitudeGrid>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
static FISHERS: [OnceLock<(FisherEstimate, Duration)>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];

fn slot(seed: u64) -> usize {
    SEEDS.iter().position(|&s| s == seed).expect("acceptance seed")
}

fn desk(seed: u64) -> &'static Desk {
    DESKS[slot(seed)].get_or_init(|| {
        let start = Instant::now();
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let (train_set, eval) = load_data(&cfg).unwrap();
        let init = Model::init(&cfg.model, &RngState::new(seed)).unwrap();
        let (model, _) = train(&init, &train_set, &cfg.train.with_seed(seed)).unwrap();
        Desk {
            probe: diagnostics_probe(&eval, cfg.diagnostics.probe_size, seed),
            spec: cfg.reflow.spec(seed),
            fisher_cfg: cfg.prune.fisher.clone(),
            train: train_set,
            eval,
            model,
            cost: start.elapsed(),
        }
    })
}

fn grid(seed: u64) -> &'static MagnitudeGrid {
    GRIDS[slot(seed)].get_or_init(|| {
        let d = desk(seed);
        let start = Instant::now();
        let rng = RngState::new(seed);
        let cells = GRID
            .iter()
            .map(|&k| {
                let (pruned, report) = prune_pipeline(
                    &d.model,
                    PruneMethod::Magnitude,
                    k,
                    UpdateMode::SelectionOnly,
                    &d.train,
                    &d.eval,
                    &d.fisher_cfg,
                    None,
                    &rng,
                )
                .unwrap();
                let stats = collect_bn_stats_from(&pruned, &d.train, &d.spec).unwrap();
                let reflowed = apply_reflow(&pruned, &stats, None).unwrap();
                GridCell {
                    sparsity: k,
                    pruned_acc: report.post_accuracy,
                    reflowed_acc: accuracy(&reflowed, &d.eval).unwrap(),
                    pruned,
                    stats,
                    reflowed,
                }
            })
            .collect();
        MagnitudeGrid {
            cells,
            cost: start.elapsed(),
        }
    })
}

fn fisher(seed: u64) -> &'static (FisherEstimate, Duration) {
    FISHERS[slot(seed)].get_or_init(|| {
        let d = desk(seed);
        let start = Instant::now();
        let sample = fisher_sample(&d.train, d.fisher_cfg.n_samples, seed).unwrap();
        let blocks: Vec<usize> = (0..d.model.block_count()).collect();
        let f = estimate_fisher(&d.model, &sample, d.fisher_cfg.n_samples, d.fisher_cfg.damping_rel, &blocks).unwrap();
        (f, start.elapsed())
    })
}

impl MagnitudeGrid {
    fn at(&self, k: f64) -> &GridCell {
        self.cells.iter().find(|c| c.sparsity == k).expect("grid sparsity")
    }
}

// Oracles

fn random_gradients(rng: &mut RngState, n: usize, d: usize) -> Vec<f64> {
    // Uneven column scales give a spread of curvatures.
    let scales: Vec<f64> = (0..d).map(|_| 0.2 + 2.0 * rng.uniform()).collect();
    (0..n * d).map(|i| rng.normal() * scales[i % d]).collect()
}

fn spd_from_gradients(rng: &mut RngState, d: usize) -> (FisherBlock, DMatrix<f64>) {
    let n = d + rng.below(2 * d + 1);
    let g = random_gradients(rng, n, d);
    let block = FisherBlock::from_gradients(n, d, g, 1e-3).unwrap();
    let h = DMatrix::from_row_slice(d, d, &block.damped());
    (block, h)
}

/// `argmin 1/2 delta^T H delta` subject to `delta_P = -theta_P`, via the
/// full KKT system solved by LU.
fn kkt_oracle(h: &DMatrix<f64>, theta: &[f64], pruned: &[usize]) -> Vec<f64> {
    let d = h.nrows();
    let p = pruned.len();
    let mut a = DMatrix::zeros(d + p, d + p);
    a.view_mut((0, 0), (d, d)).copy_from(h);
    let mut rhs = DVector::zeros(d + p);
    for (j, &i) in pruned.iter().enumerate() {
        a[(i, d + j)] = 1.0;
        a[(d + j, i)] = 1.0;
        rhs[d + j] = -theta[i];
    }
    let sol = a.lu().solve(&rhs).expect("KKT system is nonsingular");
    sol.rows(0, d).iter().copied().collect()
}

fn quad(h: &DMatrix<f64>, delta: &[f64]) -> f64 {
    let v = DVector::from_column_slice(delta);
    0.5 * v.dot(&(h * &v))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

fn elapsed_ok(v: &mut Verdict, spent: Duration, limit_secs: f64) {
    let s = spent.as_secs_f64();
    v.check(s < limit_secs, format!("runtime {s:.2}s < {limit_secs}s"));
}

// Criteria

fn c01_paper_constant() -> Verdict {
    let start = Instant::now();
    let mut v = Verdict::new();
    let p = cumulative_variance_projection(&[0.9; 25]);
    v.check((p - 0.0718).abs() <= 5e-4, format!("projection {p:.6} vs 0.0718 +/- 5e-4"));
    elapsed_ok(&mut v, start.elapsed(), 1.0);
    v
}

fn c02_obs_oracle() -> Verdict {
    let start = Instant::now();
    let mut v = Verdict::new();
    let mut rng = RngState::new(42).derive("acceptance/obs");
    let (mut worst_delta, mut worst_rel) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let d = 2 + rng.below(19);
        let (block, h) = spd_from_gradients(&mut rng, d);
        let theta: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let i = rng.below(d);
        let h_t = TensorF::matrix(d, d, block.damped()).unwrap();
        let delta = obs_single_update(&theta, &h_t, i).unwrap();
        worst_delta = worst_delta.max(max_abs_diff(&delta, &kkt_oracle(&h, &theta, &[i])));
        // Score through the library's inverse diagonal, loss through the
        // oracle's quadratic form.
        let z = theta[i] * theta[i] / (2.0 * block.inverse_diagonal().unwrap()[i]);
        let loss = quad(&h, &delta);
        worst_rel = worst_rel.max((loss - z).abs() / z.abs());
    }
    v.check(worst_delta <= 1e-8, format!("update max-norm error {worst_delta:.2e} <= 1e-8"));
    v.check(worst_rel <= 1e-10, format!("loss increase vs score rel error {worst_rel:.2e} <= 1e-10"));
    elapsed_ok(&mut v, start.elapsed(), 5.0);
    v
}

fn c03_joint_oracle() -> Verdict {
    let start = Instant::now();
    let mut v = Verdict::new();
    let mut rng = RngState::new(42).derive("acceptance/joint");
    let (mut single, mut dense, mut excess) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    for trial in 0..100 {
        let d = 2 + rng.below(29);
        let (block, h) = spd_from_gradients(&mut rng, d);
        let theta: Vec<f64> = (0..d).map(|_| rng.normal()).collect();

        let i = rng.below(d);
        let keep: Vec<bool> = (0..d).map(|j| j != i).collect();
        let joint = joint_obs_update(&theta, &block, &keep).unwrap();
        let h_t = TensorF::matrix(d, d, block.damped()).unwrap();
        let obs: Vec<f64> = obs_single_update(&theta, &h_t, i)
            .unwrap()
            .iter()
            .zip(&theta)
            .map(|(dl, t)| t + dl)
            .collect();
        single = single.max(max_abs_diff(&joint, &obs));

        // Random pruned set of size 1..d-1, plus the low-rank storage path on
        // every other trial.
        let mut perm = rng.permutation(d);
        perm.truncate(1 + rng.below(d - 1));
        let keep: Vec<bool> = (0..d).map(|j| !perm.contains(&j)).collect();
        let block = if trial % 2 == 0 {
            block
        } else {
            FisherBlock::with_damping(
                block.sample_count(),
                d,
                block.gradients().to_vec(),
                block.damping(),
                FisherStorage::LowRank,
            )
            .unwrap()
        };
        let joint = joint_obs_update(&theta, &block, &keep).unwrap();
        let delta: Vec<f64> = joint.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let oracle = kkt_oracle(&h, &theta, &perm);
        dense = dense.max(max_abs_diff(&delta, &oracle));
        let none: Vec<f64> = (0..d).map(|j| if keep[j] { 0.0 } else { -theta[j] }).collect();
        let (q_joint, q_none) = (quadratic_increase(&block, &delta), quadratic_increase(&block, &none));
        excess = excess.max(q_joint - q_none);
    }
    v.check(single <= 1e-10, format!("|P|=1 vs single OBS {single:.2e} <= 1e-10"));
    v.check(dense <= 1e-8, format!("random P vs dense KKT {dense:.2e} <= 1e-8"));
    v.check(excess <= 0.0, format!("max(q_joint - q_no_update) = {excess:.2e} <= 0"));
    elapsed_ok(&mut v, start.elapsed(), 10.0);
    v
}

fn c04_fisher() -> Verdict {
    let start = Instant::now();
    let mut v = Verdict::new();
    let mut rng = RngState::new(42).derive("acceptance/fisher");
    let (mut outer, mut inv) = (0.0f64, 0.0f64);
    for (n, d) in [(40, 12), (64, 100), (300, 250), (128, 500)] {
        let g = random_gradients(&mut rng, n, d);
        let mut explicit = vec![0.0; d * d];
        for row in g.chunks_exact(d) {
            for a in 0..d {
                for b in 0..d {
                    explicit[a * d + b] += row[a] * row[b];
                }
            }
        }
        explicit.iter_mut().for_each(|x| *x /= n as f64);
        for storage in [FisherStorage::Dense, FisherStorage::LowRank] {
            let block = FisherBlock::from_gradients_with(n, d, g.clone(), 1e-4, storage).unwrap();
            if storage == FisherStorage::Dense {
                outer = outer.max(max_abs_diff(&block.undamped(), &explicit));
            }
            let mut h = DMatrix::from_row_slice(d, d, &explicit);
            for i in 0..d {
                h[(i, i)] += block.damping();
            }
            let chol = h.cholesky().expect("damped Fisher is SPD");
            for _ in 0..3 {
                let rhs: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                let want: Vec<f64> = chol.solve(&DVector::from_column_slice(&rhs)).iter().copied().collect();
                let got = block.inverse_vector(&rhs).unwrap();
                let via_tensor = fisher_inverse_vector(&block, &TensorF::vector(rhs).unwrap()).unwrap();
                let scale = max_abs(&want);
                inv = inv.max(max_abs_diff(&got, &want) / scale);
                inv = inv.max(max_abs_diff(via_tensor.data(), &want) / scale);
            }
        }
    }
    // Real gradients: one block of a small model.
    let cfg = ModelConfig {
        input_dim: 8,
        width: 16,
        depth: 2,
        num_classes: 3,
        ..ModelConfig::default()
    };
    let model = Model::init(&cfg, &RngState::new(5)).unwrap();
    let x: Vec<f64> = (0..64 * 8).map(|_| rng.normal()).collect();
    let y: Vec<usize> = (0..64).map(|i| i % 3).collect();
    let stacks = per_sample_gradients_all(&model, &TensorF::matrix(64, 8, x).unwrap(), &y).unwrap();
    let s = &stacks[1];
    let block = FisherBlock::from_gradients(s.n, s.dim, s.rows.clone(), 1e-4).unwrap();
    let mut explicit = vec![0.0; s.dim * s.dim];
    for i in 0..s.n {
        let r = s.row(i);
        for a in 0..s.dim {
            for b in 0..s.dim {
                explicit[a * s.dim + b] += r[a] * r[b] / s.n as f64;
            }
        }
    }
    outer = outer.max(max_abs_diff(&block.undamped(), &explicit));
    v.check(outer <= 1e-12, format!("dense F vs explicit outer-product mean {outer:.2e} <= 1e-12"));
    v.check(inv <= 1e-8, format!("inverse products vs dense solve rel {inv:.2e} <= 1e-8 (d <= 500)"));
    elapsed_ok(&mut v, start.elapsed(), 10.0);
    v
}

fn c05_gradient_check() -> Verdict {
    let start = Instant::now();
    let mut v = Verdict::new();
    let cfg = ModelConfig {
        input_dim: 6,
        width: 10,
        depth: 3,
        num_classes: 4,
        ..ModelConfig::default()
    };
    let init = Model::init(&cfg, &RngState::new(42)).unwrap();
    let mut rng = RngState::new(42).derive("acceptance/gradcheck");
    let n = 48;
    let x: Vec<f64> = (0..n * cfg.input_dim).map(|_| rng.normal()).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % cfg.num_classes).collect();
    let batch = TensorF::matrix(n, cfg.input_dim, x).unwrap();
    // A little training so BN running statistics and affine terms are not
    // at their initial values.
    let data = collapse_lab::datasets::Dataset::new(batch.clone(), labels.clone(), cfg.num_classes, collapse_lab::datasets::Split::Train).unwrap();
    let (model, _) = train(&init, &data, &TrainConfig { epochs: 3, batch_size: 16, ..TrainConfig::default() }).unwrap();
    v.check(model.param_count() <= 1000, format!("{} dense parameters", model.param_count()));

    let stacks = per_sample_gradients_all(&model, &batch, &labels).unwrap();
    let h = 1e-5;
    let losses = |m: &Model| per_sample_losses(&m.forward(&batch, false).unwrap().0, &labels).unwrap();
    let mut worst = 0.0f64;
    for (b, stack) in stacks.iter().enumerate() {
        let base = model.block(b).unwrap().params();
        let mut fd = vec![0.0; n * stack.dim];
        for j in 0..stack.dim {
            let mut m = model.clone();
            let mut p = base.clone();
            p[j] = base[j] + h;
            m.block_mut(b).unwrap().set_params(&p);
            let up = losses(&m);
            p[j] = base[j] - h;
            m.block_mut(b).unwrap().set_params(&p);
            let down = losses(&m);
            for s in 0..n {
                fd[s * stack.dim + j] = (up[s] - down[s]) / (2.0 * h);
            }
        }
        for s in 0..n {
            let g = stack.row(s);
            let f = &fd[s * stack.dim..(s + 1) * stack.dim];
            let num: f64 = g.iter().zip(f).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            let den: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(f.iter().map(|a| a * a).sum::<f64>().sqrt());
            if den > 0.0 {
                worst = worst.max(num / den);
            }
        }
    }
    v.check(worst < 1e-6, format!("per-sample vs central differences rel {worst:.2e} < 1e-6"));

    let (_, grads) = loss_and_gradient(&model, &batch, &labels, BnMode::RunningStats).unwrap();
    let mean: Vec<f64> = stacks.iter().flat_map(|s| s.mean_row()).collect();
    let diff = max_abs_diff(&mean, &grads.flat_dense());
    v.check(diff <= 1e-12, format!("row mean vs batch gradient {diff:.2e} <= 1e-12"));
    elapsed_ok(&mut v, start.elapsed(), 10.0);
    v
}

fn c06_hamming() -> Verdict {
    let start = Instant::now();
    let mut v = Verdict::new();
    let cfg = ModelConfig {
        depth: 6,
        ..ModelConfig::default()
    };
    let model = Model::init(&cfg, &RngState::new(42)).unwrap();
    let d = model.param_count();
    v.check(d >= 10_000, format!("d = {d}"));
    let magnitude = score_weights(&model, PruneMethod::Magnitude, None, None).unwrap();
    let mut stream = RngState::new(42).derive("acceptance/hamming");
    for k in [0.3, 0.5, 0.7] {
        let random = score_weights(&model, PruneMethod::Random, None, Some(&mut stream)).unwrap();
        let h = normalized_hamming(&build_mask(&random, k).unwrap(), &build_mask(&magnitude, k).unwrap()).unwrap();
        let p = 2.0 * k * (1.0 - k);
        let sigma = (p * (1.0 - p) / d as f64).sqrt();
        let z = (h.normalized - p) / sigma;
        v.check(z.abs() <= 3.0, format!("k={k}: {:.4} vs {p:.4} ({z:+.2} sigma)", h.normalized));
    }
    elapsed_ok(&mut v, start.elapsed(), 5.0);
    v
}

/// Builds (or fetches) the shared desk pieces and returns their total cost,
/// so criteria can time only their own work and add this on top.
fn shared_cost(with_grid: bool, with_fisher: bool) -> Duration {
    SEEDS
        .iter()
        .map(|&s| {
            desk(s).cost
                + if with_grid { grid(s).cost } else { Duration::ZERO }
                + if with_fisher { fisher(s).1 } else { Duration::ZERO }
        })
        .sum()
}

fn last6(ratios: &[f64]) -> f64 {
    ratios[ratios.len() - 6..].iter().sum::<f64>() / 6.0
}

fn c07_collapse() -> Verdict {
    let shared = shared_cost(true, false);
    let start = Instant::now();
    let mut v = Verdict::new();
    for seed in SEEDS {
        let (d, g) = (desk(seed), grid(seed));
        let r09 = variance_ratio_report(&d.model, &g.at(0.9).pruned, &d.probe.features).unwrap().ratios();
        let r04 = variance_ratio_report(&d.model, &g.at(0.4).pruned, &d.probe.features).unwrap().ratios();
        let fin = *r09.last().unwrap();
        v.check(fin < 0.2, format!("s{seed} final ratio at 0.9 = {fin:.4} < 0.2"));
        let (a, b) = (last6(&r09), last6(&r04));
        v.check(a < b, format!("s{seed} last-6 mean {a:.4} (0.9) < {b:.4} (0.4)"));
    }
    elapsed_ok(&mut v, start.elapsed() + shared, 180.0);
    v
}

fn c08_prediction_collapse() -> Verdict {
    let shared = shared_cost(true, false);
    let start = Instant::now();
    let mut v = Verdict::new();
    for seed in SEEDS {
        let (d, g) = (desk(seed), grid(seed));
        let pruned = prediction_histogram(&g.at(0.9).pruned, &d.eval).unwrap().modal_fraction;
        let base = prediction_histogram(&d.model, &d.eval).unwrap().modal_fraction;
        v.check(pruned >= 0.6, format!("s{seed} modal at 0.9 = {pruned:.3} >= 0.6"));
        v.check(base <= 0.2, format!("s{seed} unpruned modal = {base:.3} <= 0.2"));
    }
    elapsed_ok(&mut v, start.elapsed() + shared, 180.0);
    v
}

fn c09_reflow_recovery() -> Verdict {
    let shared = shared_cost(true, false);
    let start = Instant::now();
    let mut v = Verdict::new();
    for seed in SEEDS {
        let (d, g) = (desk(seed), grid(seed));
        let c = g.at(0.8);
        v.check(
            c.reflowed_acc >= c.pruned_acc + 10.0,
            format!("s{seed} k=0.8 REFLOW {:.1} vs MP {:.1}", c.reflowed_acc, c.pruned_acc),
        );
        let worst = g.cells.iter().map(|c| c.reflowed_acc - c.pruned_acc).fold(f64::INFINITY, f64::min);
        v.check(worst >= -1.0, format!("s{seed} min(REFLOW - MP) over grid = {worst:+.1} >= -1"));
        let ratios = variance_ratio_report(&d.model, &c.reflowed, &d.probe.features).unwrap().ratios();
        let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        v.check(
            lo >= 0.85 && hi <= 1.15,
            format!("s{seed} post-REFLOW ratios at 0.8 in [{lo:.3}, {hi:.3}] within [0.85, 1.15]"),
        );
    }
    elapsed_ok(&mut v, start.elapsed() + shared, 180.0);
    v
}

fn selection_only_untouched(base: &Model, pruned: &Model, mask: &PruneMask) -> bool {
    let (a, b) = (base.params(), pruned.params());
    let dense = mask
        .keep
        .iter()
        .enumerate()
        .all(|(i, &k)| if k { a[i].to_bits() == b[i].to_bits() } else { b[i] == 0.0 });
    dense && base.norms == pruned.norms
}

fn c10_decoupling() -> Verdict {
    let shared = shared_cost(false, true);
    let start = Instant::now();
    let mut v = Verdict::new();
    for seed in SEEDS {
        let d = desk(seed);
        let f = &fisher(seed).0;
        let rng = RngState::new(seed);
        for k in [0.7, 0.8] {
            let run = |method, mode| {
                prune_pipeline(&d.model, method, k, mode, &d.train, &d.eval, &d.fisher_cfg, Some(f), &rng).unwrap()
            };
            let (mp, mp_r) = run(PruneMethod::Magnitude, UpdateMode::SelectionOnly);
            let (obd, obd_r) = run(PruneMethod::Obd, UpdateMode::SelectionOnly);
            let (obs, obs_r) = run(PruneMethod::Obs, UpdateMode::SelectionOnly);
            let (_, mpu_r) = run(PruneMethod::Magnitude, UpdateMode::FisherUpdate);
            let gap = (obd_r.post_accuracy - mp_r.post_accuracy).abs();
            v.check(
                gap <= 3.0,
                format!("s{seed} k={k} |OBD-S {:.1} - MP {:.1}| <= 3", obd_r.post_accuracy, mp_r.post_accuracy),
            );
            v.check(
                mpu_r.post_accuracy >= mp_r.post_accuracy,
                format!("s{seed} k={k} MP-U {:.1} >= MP {:.1}", mpu_r.post_accuracy, mp_r.post_accuracy),
            );
            let untouched = selection_only_untouched(&d.model, &mp, &mp_r.mask)
                && selection_only_untouched(&d.model, &obd, &obd_r.mask)
                && selection_only_untouched(&d.model, &obs, &obs_r.mask);
            v.check(untouched, format!("s{seed} k={k} selection-only keep sets bit-unchanged"));
        }
    }
    elapsed_ok(&mut v, start.elapsed() + shared, 300.0);
    v
}

fn c11_sweep_shape() -> Verdict {
    let shared = shared_cost(true, false);
    let start = Instant::now();
    let mut v = Verdict::new();
    for seed in SEEDS {
        let (d, g) = (desk(seed), grid(seed));
        let c = g.at(0.8);
        let fwd = layerwise_recalibration_sweep(&c.pruned, &c.stats, &d.eval, SweepDirection::Forward).unwrap();
        let bwd = layerwise_recalibration_sweep(&c.pruned, &c.stats, &d.eval, SweepDirection::Backward).unwrap();
        let (hf, hb) = (steps_to_fraction_of_gain(&fwd, 0.5), steps_to_fraction_of_gain(&bwd, 0.5));
        v.check(
            matches!((hb, hf), (Some(b), Some(f)) if b < f),
            format!("s{seed} half-gain step backward {hb:?} < forward {hf:?}"),
        );
        let ends = [fwd.last().unwrap(), bwd.last().unwrap()];
        let exact = ends.iter().all(|p| p.step_k == d.model.depth() && p.cumulative_accuracy_pct.to_bits() == c.reflowed_acc.to_bits());
        v.check(exact, format!("s{seed} k=L endpoints equal full REFLOW {:.2}", c.reflowed_acc));
    }
    elapsed_ok(&mut v, start.elapsed() + shared, 180.0);
    v
}

fn c12_calibration_size() -> Verdict {
    let shared = shared_cost(true, false);
    let start = Instant::now();
    let mut v = Verdict::new();
    for seed in SEEDS {
        let (d, g) = (desk(seed), grid(seed));
        let pruned = &g.at(0.8).pruned;
        let acc: Vec<(usize, f64)> = [1, 5, 10, 50, 100]
            .iter()
            .map(|&n| {
                let spec = CalibrationSpec {
                    batch_count: n,
                    ..d.spec.clone()
                };
                let stats = collect_bn_stats_from(pruned, &d.train, &spec).unwrap();
                (n, accuracy(&apply_reflow(pruned, &stats, None).unwrap(), &d.eval).unwrap())
            })
            .collect();
        let curve = acc.iter().map(|(n, a)| format!("N{n}={a:.1}")).collect::<Vec<_>>().join(" ");
        let monotone = acc[..4].windows(2).all(|w| w[1].1 >= w[0].1 - 1.0);
        v.check(monotone, format!("s{seed} non-decreasing within 1 point: {curve}"));
        let gap = (acc[3].1 - acc[4].1).abs();
        v.check(gap <= 1.0, format!("s{seed} |N50 - N100| = {gap:.1} <= 1"));
    }
    elapsed_ok(&mut v, start.elapsed() + shared, 180.0);
    v
}

fn trimmed_config(out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.depth = 8;
    cfg.model.width = 24;
    if let collapse_lab_cli::config::DataConfig::Blobs(b) = &mut cfg.data {
        b.n_per_class_train = 100;
        b.n_per_class_eval = 30;
    }
    cfg.train.epochs = 5;
    cfg.prune.sparsities = vec![0.0, 0.5, 0.8];
    cfg.prune.fisher.n_samples = 256;
    cfg.reflow.batch_count = 10;
    cfg.reflow.batch_size = 64;
    cfg.ablations.batch_counts = vec![1, 10];
    cfg.ablations.batch_sizes = vec![32, 64];
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn strip_volatile(path: &std::path::Path) -> Vec<String> {
    let rows: Vec<MetricsRow> = read_csv(path).unwrap();
    rows.iter()
        .map(|r| {
            format!(
                "{},{},{},{:?},{:?},{:?},{:?}",
                r.method, r.update_mode, r.reflow, r.sparsity, r.accuracy_pct, r.modal_fraction, r.final_variance_ratio
            )
        })
        .collect()
}

fn c13_determinism() -> Verdict {
    let start = Instant::now();
    let mut v = Verdict::new();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = run_experiment(&trimmed_config(&a)).unwrap();
    let rb = run_experiment(&trimmed_config(&b)).unwrap();
    let (ma, mb) = (strip_volatile(&a.join(METRICS_CSV)), strip_volatile(&b.join(METRICS_CSV)));
    v.check(!ma.is_empty() && ma == mb, format!("metrics.csv identical across runs ({} rows, volatile columns excluded)", ma.len()));
    // Byte-level check of the raw file with the two volatile columns blanked.
    let blank = |p: &std::path::Path| {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                f[0] = "";
                let last = f.len() - 1;
                f[last] = "";
                f.join(",")
            })
            .collect::<Vec<_>>()
    };
    v.check(blank(&a.join(METRICS_CSV)) == blank(&b.join(METRICS_CSV)), "metrics.csv byte-identical outside run_id/wall_ms");
    let same_files = [VARIANCE_CSV, PREDICTIONS_CSV, HAMMING_CSV, SWEEP_CSV, ABLATION_CSV, HISTORY_CSV]
        .iter()
        .all(|f| fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap());
    v.check(same_files, "every other report byte-identical");

    let mut exact = true;
    for p in ra.pruned_checkpoints.iter().chain(&ra.reflowed_checkpoints).chain([&ra.baseline_checkpoint]) {
        let m = load_checkpoint(p).unwrap();
        let bytes = fs::read(p).unwrap();
        exact &= encode(&m) == bytes && decode(&bytes).unwrap() == m;
        let twin = rb.out_dir.join(p.strip_prefix(&ra.out_dir).unwrap());
        exact &= fs::read(twin).unwrap() == bytes;
    }
    let base = load_checkpoint(&ra.baseline_checkpoint).unwrap();
    let resaved = dir.path().join("resaved.rflw");
    save_checkpoint(&base, &resaved).unwrap();
    exact &= fs::read(&resaved).unwrap() == fs::read(&ra.baseline_checkpoint).unwrap();
    v.check(exact, format!("{} checkpoints round-trip bit-exactly", 1 + ra.pruned_checkpoints.len() + ra.reflowed_checkpoints.len()));

    let good = fs::read(&ra.baseline_checkpoint).unwrap();
    let mut rejected = 0;
    let positions = [0, 5, 17, good.len() / 2, good.len() - 1];
    for &i in &positions {
        let mut bad = good.clone();
        bad[i] ^= 0x40;
        rejected += decode(&bad).is_err() as usize;
    }
    rejected += decode(&good[..good.len() - 3]).is_err() as usize;
    let total = positions.len() + 1;
    v.check(rejected == total, format!("{rejected}/{total} corrupted checkpoints rejected"));
    elapsed_ok(&mut v, start.elapsed(), 300.0);
    v
}

fn main() -> ExitCode {
    // libtest passes flags such as --nocapture; nothing here takes any.
    let criteria: [(&str, fn() -> Verdict); 13] = [
        ("paper constant", c01_paper_constant),
        ("OBS oracle", c02_obs_oracle),
        ("joint-update oracle", c03_joint_oracle),
        ("Fisher correctness", c04_fisher),
        ("gradient check", c05_gradient_check),
        ("Hamming statistics", c06_hamming),
        ("collapse reproduction", c07_collapse),
        ("prediction collapse", c08_prediction_collapse),
        ("REFLOW recovery", c09_reflow_recovery),
        ("decoupling reproduction", c10_decoupling),
        ("layer-wise sweep shape", c11_sweep_shape),
        ("calibration-size ablation", c12_calibration_size),
        ("determinism and formats", c13_determinism),
    ];
    let suite = Instant::now();
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict {
                pass: false,
                detail: format!("panicked: {msg}"),
            }
        });
        let tag = if verdict.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:2} {tag} {name}: {}", verdict.detail);
        if !verdict.pass {
            failed.push(n);
        }
    }
    let total = suite.elapsed().as_secs_f64();
    println!("acceptance: {}/13 passed in {total:.1}s", 13 - failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
