//! Outer HPO drivers running against a cached benchmark table: the
//! checkpoint-aware deep-kernel method and its ablations, the weight-free
//! deep-kernel baseline, a plain GP over encoded hyperparameters, and random
//! search.
//!
//! Every trace event charges exactly one epoch (the fantasize increment).
//! The deep-kernel methods re-select a `(configuration, budget)` pair each
//! step by multifidelity expected improvement and refit the surrogate after
//! every evaluation — 1000 Adam steps per evaluation for the first ten
//! evaluations, 50 afterwards. The plain-GP and random baselines train one
//! configuration at a time to full budget.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::acquisition::{
    candidate_budgets, select_by_ei, select_by_ei_features, ConfigProgress, IncumbentTable,
};
use crate::benchhub::BenchmarkTable;
use crate::error::{FmsError, Result};
use crate::linalg;
use crate::space::{HyperparameterConfig, LearningCurve};
use crate::surrogate::{ExtractorConfig, RowInput, SurrogateState, WeightEncoder};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trace::{EvalEvent, HpoTrace, SnapshotEvent, TraceEvent, TraceHeader, TRACE_VERSION};

/// Fresh-candidate pool size per proposal.
pub const DEFAULT_POOL_SIZE: usize = 1000;
/// Budget fractions at which ranking snapshots are emitted.
pub const DEFAULT_SNAPSHOT_FRACS: [f64; 2] = [0.5, 1.0];
/// Adam steps per kernel refit of the plain-GP baseline.
const GP_BASELINE_FIT_STEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MethodId {
    FmsGmn,
    FmsFlat,
    FmsGmnNoCnn,
    FmsFlatNoCnn,
    Dyhpo,
    DyhpoNoCnn,
    DyhpoPtmIndex,
    Gp,
    Random,
}

impl MethodId {
    pub fn all() -> [MethodId; 9] {
        [
            MethodId::FmsGmn,
            MethodId::FmsFlat,
            MethodId::FmsGmnNoCnn,
            MethodId::FmsFlatNoCnn,
            MethodId::Dyhpo,
            MethodId::DyhpoNoCnn,
            MethodId::DyhpoPtmIndex,
            MethodId::Gp,
            MethodId::Random,
        ]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodId::FmsGmn => "fms-gmn",
            MethodId::FmsFlat => "fms-flat",
            MethodId::FmsGmnNoCnn => "fms-gmn-nocnn",
            MethodId::FmsFlatNoCnn => "fms-flat-nocnn",
            MethodId::Dyhpo => "dyhpo",
            MethodId::DyhpoNoCnn => "dyhpo-nocnn",
            MethodId::DyhpoPtmIndex => "dyhpo-ptm-index",
            MethodId::Gp => "gp",
            MethodId::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        MethodId::all()
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| FmsError::UnknownMethod(s.to_string()))
    }

    /// Deep-kernel methods run the multifidelity surrogate loop.
    pub fn uses_deep_kernel(&self) -> bool {
        !matches!(self, MethodId::Gp | MethodId::Random)
    }

    pub fn weight_encoder(&self) -> WeightEncoder {
        match self {
            MethodId::FmsGmn | MethodId::FmsGmnNoCnn => WeightEncoder::Gmn,
            MethodId::FmsFlat | MethodId::FmsFlatNoCnn => WeightEncoder::Flat,
            _ => WeightEncoder::None,
        }
    }

    pub fn use_curve_cnn(&self) -> bool {
        !matches!(
            self,
            MethodId::FmsGmnNoCnn
                | MethodId::FmsFlatNoCnn
                | MethodId::DyhpoNoCnn
                | MethodId::Gp
                | MethodId::Random
        )
    }

    /// Whether the model index enters the extractor as a one-hot. The plain
    /// weight-free baseline gets no model identity at all; the "ptm-index"
    /// variant adds the one-hot without any weight branch.
    pub fn include_model_onehot(&self) -> bool {
        !matches!(self, MethodId::Dyhpo | MethodId::DyhpoNoCnn)
    }
}

impl std::fmt::Display for MethodId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MethodId {
    type Err = FmsError;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::parse(s)
    }
}

#[derive(Debug, Clone)]
pub struct MethodConfig {
    pub method: MethodId,
    pub total_budget: u64,
    pub pool_size: usize,
    pub warm_start: Option<PathBuf>,
    pub snapshot_fracs: Vec<f64>,
}

impl MethodConfig {
    pub fn new(method: MethodId, total_budget: u64) -> Self {
        MethodConfig {
            method,
            total_budget,
            pool_size: DEFAULT_POOL_SIZE,
            warm_start: None,
            snapshot_fracs: DEFAULT_SNAPSHOT_FRACS.to_vec(),
        }
    }

    fn snapshot_ticks(&self) -> Vec<u64> {
        let mut ticks: Vec<u64> = self
            .snapshot_fracs
            .iter()
            .map(|f| (f * self.total_budget as f64).floor() as u64)
            .filter(|&t| t >= 1)
            .collect();
        ticks.sort_unstable();
        ticks.dedup();
        ticks
    }
}

/// One observed `(configuration, budget)` evaluation; element of the dataset.
#[derive(Debug, Clone)]
pub struct EvaluationRecord {
    pub config_id: usize,
    pub config: HyperparameterConfig,
    pub budget: usize,
    /// `Y₁..Y_j`; the last entry is the observed performance.
    pub curve: LearningCurve,
    pub y: f64,
}

/// Append-only evaluation history with a per-configuration index. Budgets of
/// each configuration form a contiguous prefix `1..j_max`.
#[derive(Debug, Clone, Default)]
pub struct HistoryDataset {
    records: Vec<EvaluationRecord>,
    by_config: BTreeMap<usize, Vec<usize>>,
}

impl HistoryDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EvaluationRecord] {
        &self.records
    }

    pub fn push(&mut self, record: EvaluationRecord) -> Result<()> {
        let expected = self.last_budget(record.config_id).map_or(1, |b| b + 1);
        if record.budget != expected {
            return Err(FmsError::InvalidArgument(format!(
                "config {} budget {} breaks the fantasize prefix (expected {expected})",
                record.config_id, record.budget
            )));
        }
        if record.curve.len() != record.budget {
            return Err(FmsError::InvalidArgument(
                "record curve length must equal its budget".into(),
            ));
        }
        let last = *record.curve.0.last().unwrap();
        if last != record.y {
            return Err(FmsError::InvalidArgument(
                "record y must equal the curve's last entry".into(),
            ));
        }
        let idx = self.records.len();
        self.by_config
            .entry(record.config_id)
            .or_default()
            .push(idx);
        self.records.push(record);
        Ok(())
    }

    pub fn last_budget(&self, config_id: usize) -> Option<usize> {
        self.by_config
            .get(&config_id)
            .map(|v| self.records[*v.last().unwrap()].budget)
    }

    pub fn started(&self, config_id: usize) -> bool {
        self.by_config.contains_key(&config_id)
    }

    /// Started configurations in first-evaluation order.
    pub fn in_progress(&self, b_max: usize) -> Vec<ConfigProgress> {
        let mut firsts: Vec<(usize, usize)> = self
            .by_config
            .iter()
            .map(|(&cfg, idxs)| (idxs[0], cfg))
            .collect();
        firsts.sort_unstable();
        firsts
            .into_iter()
            .filter_map(|(_, cfg)| {
                let last = self.last_budget(cfg).unwrap();
                (last < b_max).then_some(ConfigProgress {
                    config_id: cfg,
                    last_budget: last,
                })
            })
            .collect()
    }

    pub fn incumbents(&self) -> IncumbentTable {
        IncumbentTable::from_observations(self.records.iter().map(|r| (r.budget, r.y)))
    }

    /// Best observed value per configuration (used for the random baseline's
    /// ranking snapshots), 0 for unobserved configurations.
    pub fn best_observed_scores(&self, n_configs: usize) -> Vec<f64> {
        let mut scores = vec![0.0; n_configs];
        for r in &self.records {
            if r.y > scores[r.config_id] {
                scores[r.config_id] = r.y;
            }
        }
        scores
    }
}

fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn make_header(cfg: &MethodConfig, bench: &BenchmarkTable, seed: u64) -> TraceHeader {
    TraceHeader {
        format_version: TRACE_VERSION,
        method: cfg.method.as_str().to_string(),
        seed,
        hub_hash: bench.manifest.spec_hash.clone(),
        total_budget: cfg.total_budget,
        b_max: bench.b_max(),
        n_configs: bench.n_configs(),
        y_opt: bench.y_opt(),
        true_final_accuracies: bench.final_accuracies(),
        warm_start: cfg
            .warm_start
            .as_ref()
            .map(|p| p.display().to_string()),
    }
}

/// Run one HPO method against a benchmark table. Deterministic: identical
/// arguments produce identical traces.
pub fn run(cfg: &MethodConfig, bench: &BenchmarkTable, seed: u64) -> Result<HpoTrace> {
    if cfg.total_budget == 0 {
        return Err(FmsError::InvalidArgument("total budget must be >= 1".into()));
    }
    match cfg.method {
        MethodId::Random => run_random(cfg, bench, seed),
        MethodId::Gp => run_gp_baseline(cfg, bench, seed),
        _ => run_deep_kernel(cfg, bench, seed),
    }
}

// ── Deep-kernel methods (multifidelity loop) ─────────────────────────────

fn run_deep_kernel(cfg: &MethodConfig, bench: &BenchmarkTable, seed: u64) -> Result<HpoTrace> {
    let method = cfg.method;
    let space = bench.space();
    let uses_weights = method.weight_encoder() != WeightEncoder::None;
    let x_dim = space.encoded_dim(method.include_model_onehot());
    let ex_cfg = ExtractorConfig::new(
        x_dim,
        bench.b_max(),
        method.use_curve_cnn(),
        method.weight_encoder(),
    );

    let mut surrogate = match &cfg.warm_start {
        Some(path) => {
            let state = SurrogateState::load(path)?;
            if state.config != ex_cfg {
                return Err(FmsError::InvalidArgument(format!(
                    "warm-start state was trained with an incompatible extractor \
                     configuration ({:?} vs {:?})",
                    state.config, ex_cfg
                )));
            }
            state
        }
        None => SurrogateState::init(ex_cfg.clone(), derive_seed(seed, "surrogate-init")),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "proposals"));
    let mut history = HistoryDataset::new();
    let mut rows: Vec<RowInput> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut events = Vec::new();
    let mut incumbent = f64::NEG_INFINITY;
    let ticks = cfg.snapshot_ticks();

    for step in 1..=cfg.total_budget {
        let unstarted: Vec<usize> = (0..bench.n_configs())
            .filter(|id| !history.started(*id))
            .collect();
        let in_progress = history.in_progress(bench.b_max());
        let candidates = candidate_budgets(
            &unstarted,
            &in_progress,
            cfg.pool_size,
            bench.b_max(),
            &mut rng,
        );
        if candidates.is_empty() {
            break; // every configuration exhausted at B_max
        }

        let mut cand_rows = Vec::with_capacity(candidates.len());
        let mut cand_budgets = Vec::with_capacity(candidates.len());
        for &(id, j) in &candidates {
            let weights = if uses_weights && j > 1 {
                Some(bench.prepared_weights(id, j - 1)?)
            } else {
                None
            };
            cand_rows.push(RowInput::build(
                &ex_cfg,
                space,
                bench.config(id),
                &bench.curve_prefix(id, j - 1),
                j,
                weights,
            )?);
            cand_budgets.push(j);
        }

        let posterior = surrogate.posterior(&rows, &ys)?;
        let z_cands = surrogate.features_batch(&cand_rows)?;
        let incumbents = history.incumbents();
        let winner = select_by_ei_features(
            &posterior,
            z_cands.data(),
            &cand_budgets,
            &incumbents,
        )?;
        let (config_id, budget) = candidates[winner];

        let y = bench.accuracy(config_id, budget)?;
        let curve = bench.curve_prefix(config_id, budget);
        history.push(EvaluationRecord {
            config_id,
            config: bench.config(config_id).clone(),
            budget,
            curve: curve.clone(),
            y,
        })?;
        let record_weights = if uses_weights {
            Some(bench.prepared_weights(config_id, budget)?)
        } else {
            None
        };
        rows.push(RowInput::build(
            &ex_cfg,
            space,
            bench.config(config_id),
            &curve,
            budget,
            record_weights,
        )?);
        ys.push(y);

        incumbent = incumbent.max(y);
        events.push(TraceEvent::Eval(EvalEvent {
            step,
            config_id,
            budget,
            epochs_spent: 1,
            y,
            cumulative_epochs: step,
            incumbent,
        }));

        surrogate.note_evaluation();
        if rows.len() >= 2 {
            surrogate.fit(&rows, &ys, surrogate.fit_steps_for_phase())?;
        }

        if ticks.contains(&step) {
            let scores =
                surrogate_ranking_snapshot(&surrogate, bench, &history, &rows, &ys)?;
            events.push(TraceEvent::Snapshot(SnapshotEvent {
                budget_spent: step,
                scores,
            }));
        }
    }

    Ok(HpoTrace {
        header: make_header(cfg, bench, seed),
        events,
    })
}

/// Predicted mean at full budget for every configuration in the table, using
/// each configuration's latest stored checkpoint and curve where available
/// and the weight-free path otherwise.
pub fn surrogate_ranking_snapshot(
    surrogate: &SurrogateState,
    bench: &BenchmarkTable,
    history: &HistoryDataset,
    rows: &[RowInput],
    ys: &[f64],
) -> Result<Vec<f64>> {
    let space = bench.space();
    let uses_weights = surrogate.config.weight_encoder != WeightEncoder::None;
    let mut query_rows = Vec::with_capacity(bench.n_configs());
    for id in 0..bench.n_configs() {
        let (curve, weights) = match history.last_budget(id) {
            Some(last) => {
                let weights = if uses_weights {
                    Some(bench.prepared_weights(id, last)?)
                } else {
                    None
                };
                (bench.curve_prefix(id, last), weights)
            }
            None => (LearningCurve::default(), None),
        };
        query_rows.push(RowInput::build(
            &surrogate.config,
            space,
            bench.config(id),
            &curve,
            bench.b_max(),
            weights,
        )?);
    }
    let posterior = surrogate.posterior(rows, ys)?;
    let z = surrogate.features_batch(&query_rows)?;
    Ok((0..bench.n_configs())
        .map(|i| {
            posterior
                .predict(&z.data()[i * crate::surrogate::FEATURE_DIM..(i + 1) * crate::surrogate::FEATURE_DIM])
                .0
        })
        .collect())
}

/// Fit a fresh surrogate on randomly drawn evaluations from one or more
/// hubs and return it for use as a transfer warm start. The evaluation
/// counter is set to the number of pretraining records, so a warm-started
/// run resumes in the refine phase once past the initial-phase threshold.
pub fn pretrain_surrogate(
    method: MethodId,
    hubs: &[&BenchmarkTable],
    records_per_hub: usize,
    steps: usize,
    seed: u64,
) -> Result<SurrogateState> {
    if !method.uses_deep_kernel() {
        return Err(FmsError::InvalidArgument(format!(
            "method {method} has no surrogate to pretrain"
        )));
    }
    let first = hubs
        .first()
        .ok_or_else(|| FmsError::InvalidArgument("no hubs given".into()))?;
    let space = first.space();
    let uses_weights = method.weight_encoder() != WeightEncoder::None;
    let ex_cfg = ExtractorConfig::new(
        space.encoded_dim(method.include_model_onehot()),
        first.b_max(),
        method.use_curve_cnn(),
        method.weight_encoder(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain"));
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for hub in hubs {
        if hub.b_max() != first.b_max()
            || hub.space().encoded_dim(method.include_model_onehot())
                != space.encoded_dim(method.include_model_onehot())
        {
            return Err(FmsError::InvalidArgument(
                "pretraining hubs must share B_max and search-space shape".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        while seen.len() < records_per_hub.min(hub.n_configs() * hub.b_max()) {
            let id = rng.random_range(0..hub.n_configs());
            let budget = rng.random_range(1..=hub.b_max());
            if !seen.insert((id, budget)) {
                continue;
            }
            let weights = if uses_weights {
                Some(hub.prepared_weights(id, budget)?)
            } else {
                None
            };
            rows.push(RowInput::build(
                &ex_cfg,
                hub.space(),
                hub.config(id),
                &hub.curve_prefix(id, budget),
                budget,
                weights,
            )?);
            ys.push(hub.accuracy(id, budget)?);
        }
    }
    let mut state = SurrogateState::init(ex_cfg, derive_seed(seed, "pretrain-init"));
    state.fit(&rows, &ys, steps)?;
    state.evals_seen = rows.len() as u64;
    Ok(state)
}

// ── Random search ────────────────────────────────────────────────────────
//
// Classic random search under epoch accounting: sample a configuration
// uniformly, train it one epoch per step to full budget, then sample the
// next.

fn run_random(cfg: &MethodConfig, bench: &BenchmarkTable, seed: u64) -> Result<HpoTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "random-search"));
    let mut history = HistoryDataset::new();
    let mut events = Vec::new();
    let mut incumbent = f64::NEG_INFINITY;
    let ticks = cfg.snapshot_ticks();
    let mut current: Option<usize> = None;

    for step in 1..=cfg.total_budget {
        if current.is_none() {
            let unstarted: Vec<usize> = (0..bench.n_configs())
                .filter(|id| !history.started(*id))
                .collect();
            current = if !unstarted.is_empty() {
                Some(unstarted[rng.random_range(0..unstarted.len())])
            } else {
                // Everything started; continue the earliest unfinished one.
                history
                    .in_progress(bench.b_max())
                    .first()
                    .map(|p| p.config_id)
            };
        }
        let Some(config_id) = current else {
            break;
        };
        let budget = history.last_budget(config_id).map_or(1, |b| b + 1);
        let y = bench.accuracy(config_id, budget)?;
        history.push(EvaluationRecord {
            config_id,
            config: bench.config(config_id).clone(),
            budget,
            curve: bench.curve_prefix(config_id, budget),
            y,
        })?;
        incumbent = incumbent.max(y);
        events.push(TraceEvent::Eval(EvalEvent {
            step,
            config_id,
            budget,
            epochs_spent: 1,
            y,
            cumulative_epochs: step,
            incumbent,
        }));
        if budget == bench.b_max() {
            current = None;
        }
        if ticks.contains(&step) {
            events.push(TraceEvent::Snapshot(SnapshotEvent {
                budget_spent: step,
                scores: history.best_observed_scores(bench.n_configs()),
            }));
        }
    }

    Ok(HpoTrace {
        header: make_header(cfg, bench, seed),
        events,
    })
}

// ── Plain-GP baseline ────────────────────────────────────────────────────
//
// Standard full-budget Bayesian optimization: a squared-exponential kernel
// directly over the encoded hyperparameters, expected improvement with the
// global incumbent, one configuration trained to completion at a time.

#[derive(Debug)]
pub struct PlainGp {
    log_ell: Tensor,
    log_sf: Tensor,
    log_sn: Tensor,
    adam: crate::adam::AdamState,
}

impl PlainGp {
    fn new() -> Self {
        PlainGp {
            log_ell: Tensor::scalar(0.0),
            log_sf: Tensor::scalar(0.0),
            log_sn: Tensor::scalar(0.1f64.ln()),
            adam: crate::adam::AdamState::new(&[1, 1, 1]),
        }
    }

    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let ell2 = (2.0 * self.log_ell.item()).exp();
        let sf2 = (2.0 * self.log_sf.item()).exp();
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        sf2 * (-d2 / (2.0 * ell2)).exp()
    }

    fn fit(&mut self, x: &[Vec<f64>], y: &[f64], steps: usize) -> Result<()> {
        if x.len() < 2 {
            return Ok(());
        }
        let n = x.len();
        let dim = x[0].len();
        let flat: Vec<f64> = x.iter().flatten().copied().collect();
        for _ in 0..steps {
            let mut tape = Tape::new();
            let log_ell = tape.param(self.log_ell.clone());
            let log_sf = tape.param(self.log_sf.clone());
            let log_sn = tape.param(self.log_sn.clone());
            let z = tape.leaf(Tensor::matrix(n, dim, flat.clone()));
            let d2 = tape.sqdist(z, z)?;
            let inv_ell2 = tape.scale(log_ell, -2.0);
            let inv_ell2 = tape.exp(inv_ell2);
            let scaled = tape.mul_scalar(d2, inv_ell2)?;
            let scaled = tape.scale(scaled, -0.5);
            let e = tape.exp(scaled);
            let sf2 = tape.scale(log_sf, 2.0);
            let sf2 = tape.exp(sf2);
            let k = tape.mul_scalar(e, sf2)?;
            let sn2 = tape.scale(log_sn, 2.0);
            let sn2 = tape.exp(sn2);
            let kn = tape.add_diag(k, sn2)?;
            let yv = tape.leaf(Tensor::vector(y.to_vec()));
            let loss = match tape.gp_nlml(kn, yv) {
                Ok(l) => l,
                Err(FmsError::NotPositiveDefinite { .. }) => return Ok(()),
                Err(other) => return Err(other),
            };
            if !tape.value(loss).item().is_finite() {
                return Ok(());
            }
            let grads = tape.backward(loss)?;
            let g_ell = grads.get_or_zeros(log_ell, &[1]);
            let g_sf = grads.get_or_zeros(log_sf, &[1]);
            let g_sn = grads.get_or_zeros(log_sn, &[1]);
            self.adam.update(
                &mut [
                    self.log_ell.data_mut(),
                    self.log_sf.data_mut(),
                    self.log_sn.data_mut(),
                ],
                &[g_ell.data(), g_sf.data(), g_sn.data()],
            );
        }
        Ok(())
    }

    /// Predictive mean/variance over encoded points.
    fn predict(&self, x: &[Vec<f64>], y: &[f64], query: &[f64]) -> Result<(f64, f64)> {
        let sf2 = (2.0 * self.log_sf.item()).exp();
        let sn2 = (2.0 * self.log_sn.item()).exp();
        let n = x.len();
        if n == 0 {
            return Ok((0.0, sf2));
        }
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = self.kernel(&x[i], &x[j]);
            }
            k[i * n + i] += sn2;
        }
        let chol = linalg::cholesky_with_jitter(n, &k)?;
        let alpha = linalg::cholesky_solve(n, &chol.factor, y);
        let kstar: Vec<f64> = x.iter().map(|xi| self.kernel(xi, query)).collect();
        let mu: f64 = kstar.iter().zip(&alpha).map(|(k, a)| k * a).sum();
        let mut w = kstar;
        linalg::solve_lower(n, &chol.factor, &mut w);
        let var = (sf2 - w.iter().map(|v| v * v).sum::<f64>()).max(crate::surrogate::VARIANCE_FLOOR);
        Ok((mu, var))
    }
}

/// One configuration-selection step of the plain-GP baseline, exposed for
/// tests: empty history falls back to a uniform random choice.
pub fn baseline_gp_step(
    gp: &PlainGp,
    encodings: &[Vec<f64>],
    unstarted: &[usize],
    full_obs: &[(usize, f64)],
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if unstarted.is_empty() {
        return Err(FmsError::NoCandidates);
    }
    if full_obs.is_empty() {
        return Ok(unstarted[rng.random_range(0..unstarted.len())]);
    }
    let x: Vec<Vec<f64>> = full_obs.iter().map(|&(id, _)| encodings[id].clone()).collect();
    let y: Vec<f64> = full_obs.iter().map(|&(_, v)| v).collect();
    let global_incumbent = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let incumbents = IncumbentTable::from_observations([(1usize, global_incumbent)]);
    let budgets = vec![1usize; unstarted.len()];
    let preds: Result<Vec<(f64, f64)>> = unstarted
        .iter()
        .map(|&id| gp.predict(&x, &y, &encodings[id]))
        .collect();
    let preds = preds?;
    let winner = select_by_ei(unstarted.len(), &budgets, &incumbents, |i| preds[i])?;
    Ok(unstarted[winner])
}

fn run_gp_baseline(cfg: &MethodConfig, bench: &BenchmarkTable, seed: u64) -> Result<HpoTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gp-baseline"));
    let space = bench.space();
    let encodings: Vec<Vec<f64>> = (0..bench.n_configs())
        .map(|id| space.encode(bench.config(id), true))
        .collect();
    let mut gp = PlainGp::new();
    let mut full_obs: Vec<(usize, f64)> = Vec::new();
    let mut history = HistoryDataset::new();
    let mut events = Vec::new();
    let mut incumbent = f64::NEG_INFINITY;
    let ticks = cfg.snapshot_ticks();
    let mut current: Option<usize> = None;

    for step in 1..=cfg.total_budget {
        if current.is_none() {
            let unstarted: Vec<usize> = (0..bench.n_configs())
                .filter(|id| !history.started(*id))
                .collect();
            if unstarted.is_empty() {
                break;
            }
            gp.fit(
                &full_obs
                    .iter()
                    .map(|&(id, _)| encodings[id].clone())
                    .collect::<Vec<_>>(),
                &full_obs.iter().map(|&(_, v)| v).collect::<Vec<_>>(),
                GP_BASELINE_FIT_STEPS,
            )?;
            current = Some(baseline_gp_step(
                &gp,
                &encodings,
                &unstarted,
                &full_obs,
                &mut rng,
            )?);
        }
        let Some(config_id) = current else { break };
        let budget = history.last_budget(config_id).map_or(1, |b| b + 1);
        let y = bench.accuracy(config_id, budget)?;
        history.push(EvaluationRecord {
            config_id,
            config: bench.config(config_id).clone(),
            budget,
            curve: bench.curve_prefix(config_id, budget),
            y,
        })?;
        incumbent = incumbent.max(y);
        events.push(TraceEvent::Eval(EvalEvent {
            step,
            config_id,
            budget,
            epochs_spent: 1,
            y,
            cumulative_epochs: step,
            incumbent,
        }));
        if budget == bench.b_max() {
            full_obs.push((config_id, y));
            current = None;
        }
        if ticks.contains(&step) {
            let scores = if full_obs.len() >= 1 {
                let x: Vec<Vec<f64>> =
                    full_obs.iter().map(|&(id, _)| encodings[id].clone()).collect();
                let yv: Vec<f64> = full_obs.iter().map(|&(_, v)| v).collect();
                (0..bench.n_configs())
                    .map(|id| gp.predict(&x, &yv, &encodings[id]).map(|p| p.0))
                    .collect::<Result<Vec<f64>>>()?
            } else {
                vec![0.0; bench.n_configs()]
            };
            events.push(TraceEvent::Snapshot(SnapshotEvent {
                budget_spent: step,
                scores,
            }));
        }
    }

    Ok(HpoTrace {
        header: make_header(cfg, bench, seed),
        events,
    })
}
