//! Data-parallel training loop: one master, `p` workers.
//!
//! Each iteration has a left and a right phase. In a phase every worker
//! codes its shard against the current pair, accumulates partial sums and
//! sends them up; the master reduces them in ascending node order, solves
//! for one dictionary and broadcasts it. Only the small partial-sum matrices
//! travel, so per-phase traffic depends on `m`, `n1`, `n2` and `p` but not
//! on the number of samples.

pub mod metrics;
pub mod transport;

use std::thread;
use std::time::Instant;

use log::{debug, info};
use thiserror::Error;

use crate::data::{shard_dataset, DataError, PatchSet, Shard};
use crate::dictupdate::{
    accumulate_left, accumulate_left_cross, accumulate_right, accumulate_right_cross, update_left_general_with,
    update_left_ortho, update_right_general_with, update_right_ortho, DictMode, DictionaryPair, GeneralUpdate,
    NormScaling, PartialBody, PartialSums, Side, UpdateError,
};
use crate::numerics::{polar_factor, Mat};
use crate::rng::{gaussian_mat, seeded, unit_column_mat};
use crate::sparse2d::{CodingStop, SparseCode, SparseCoder};

pub use metrics::{rmse_from_objective, IterationMetrics, PhaseBytes, RunMetrics};
#[cfg(unix)]
pub use transport::SocketTransport;
pub use transport::{
    ChannelLink, DictSide, Envelope, InMemoryTransport, Link, LinkPair, NextStep, Payload, PhaseStats, StreamLink,
    Transport, TransportError, MASTER,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("worker {node_id} failed: {reason}")]
    WorkerFailure { node_id: usize, reason: String, metrics: Box<RunMetrics> },
    #[error(transparent)]
    Reduce(#[from] ReduceError),
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReduceError {
    #[error("expected {expected} partial sums, got {got}")]
    WrongCount { expected: usize, got: usize },
    #[error("no partial sums from node {0}")]
    MissingNode(usize),
    #[error("node {0} sent more than one partial sum")]
    DuplicateNode(usize),
    #[error("partial sums disagree on phase or shape")]
    PhaseMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitPolicy {
    /// Seeded Gaussian columns (normalized) or polar factors of Gaussian matrices.
    Random,
    Given(DictionaryPair),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: DictMode,
    pub n1: usize,
    pub n2: usize,
    /// Target sparsity of every code.
    pub s: usize,
    pub iters: usize,
    pub nodes: usize,
    pub seed: u64,
    pub init: InitPolicy,
    /// Retry singular least-squares solves with a tiny ridge.
    pub ridge: bool,
    /// Keep the dictionary pair after every iteration in [`TrainOutput::history`].
    pub keep_history: bool,
}

impl TrainConfig {
    pub fn new(mode: DictMode, n1: usize, n2: usize, s: usize, iters: usize, nodes: usize, seed: u64) -> Self {
        TrainConfig { mode, n1, n2, s, iters, nodes, seed, init: InitPolicy::Random, ridge: true, keep_history: false }
    }

    pub fn validate(&self, m: usize, samples: usize) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.iters == 0 {
            return bad("iteration count must be >= 1".into());
        }
        if self.nodes == 0 {
            return bad("node count must be >= 1".into());
        }
        if self.nodes > samples {
            return bad(format!("{} nodes for {samples} samples", self.nodes));
        }
        if self.s == 0 {
            return bad("sparsity must be >= 1".into());
        }
        if self.n1 == 0 || self.n2 == 0 {
            return bad("dictionary sizes must be >= 1".into());
        }
        match self.mode {
            DictMode::General if self.s > self.n1 * self.n2 => {
                bad(format!("sparsity {} exceeds n1*n2 = {}", self.s, self.n1 * self.n2))
            }
            DictMode::Orthonormal if self.n1 != m || self.n2 != m => {
                bad(format!("orthonormal mode needs n1 = n2 = m = {m}"))
            }
            DictMode::Orthonormal if self.s > m * m => bad(format!("sparsity {} exceeds m^2 = {}", self.s, m * m)),
            _ => Ok(()),
        }?;
        if let InitPolicy::Given(d) = &self.init {
            if d.mode() != self.mode || d.m() != m || d.n1() != self.n1 || d.n2() != self.n2 {
                return bad("initial dictionaries do not match mode/shape".into());
            }
        }
        Ok(())
    }
}

pub struct TrainOutput {
    pub dict: DictionaryPair,
    pub metrics: RunMetrics,
    /// Final codes indexed by global sample index, compensated for the last
    /// normalization so that `dict.reconstruct(code)` is the fitted patch.
    pub codes: Vec<SparseCode>,
    /// Dictionary pair after each iteration, when requested.
    pub history: Vec<DictionaryPair>,
}

/// Initial dictionaries, seeded independently of the shard shuffle.
pub fn init_dictionaries(config: &TrainConfig, data: &PatchSet) -> Result<DictionaryPair, TrainError> {
    if let InitPolicy::Given(d) = &config.init {
        return Ok(d.clone());
    }
    let m = data.m();
    let mut rng = seeded(config.seed ^ 0x5eed_d1c7_0000_0001);
    let pair = match config.mode {
        DictMode::General => {
            let d1 = unit_column_mat(&mut rng, m, config.n1);
            let d2 = unit_column_mat(&mut rng, m, config.n2);
            DictionaryPair::new(DictMode::General, d1, d2)?
        }
        DictMode::Orthonormal => {
            let d1 = polar_factor(&gaussian_mat(&mut rng, m, m)).map_err(UpdateError::from)?.q;
            let d2 = polar_factor(&gaussian_mat(&mut rng, m, m)).map_err(UpdateError::from)?.q;
            DictionaryPair::new(DictMode::Orthonormal, d1, d2)?
        }
    };
    Ok(pair)
}

/// `Σₖ ‖Yₖ − D1 Xₖ D2ᵀ‖_F²`, summed in sample order.
pub fn objective(data: &PatchSet, codes: &[SparseCode], dict: &DictionaryPair) -> Result<f64, TrainError> {
    if codes.len() != data.len() {
        return Err(TrainError::ShapeMismatch(format!("{} codes for {} samples", codes.len(), data.len())));
    }
    if data.m() != dict.m() {
        return Err(TrainError::ShapeMismatch(format!("patch side {} vs dictionary rows {}", data.m(), dict.m())));
    }
    let mut total = 0.0;
    for (k, (y, x)) in data.patches().iter().zip(codes).enumerate() {
        if x.n1() != dict.n1() || x.n2() != dict.n2() {
            return Err(TrainError::ShapeMismatch(format!("code {k} is {}x{}", x.n1(), x.n2())));
        }
        total += y.sub(&dict.reconstruct(x)).frobenius_sq();
    }
    Ok(total)
}

/// Per-pixel RMSE `sqrt(objective / (N m²))`.
pub fn rmse(data: &PatchSet, codes: &[SparseCode], dict: &DictionaryPair) -> Result<f64, TrainError> {
    Ok(rmse_from_objective(objective(data, codes, dict)?, data.len(), data.m()))
}

/// Sums one partial per node in ascending `node_id` order.
pub fn reduce_partials(mut parts: Vec<PartialSums>, expected: usize) -> Result<PartialSums, ReduceError> {
    parts.sort_by_key(|p| p.node_id);
    for w in parts.windows(2) {
        if w[0].node_id == w[1].node_id {
            return Err(ReduceError::DuplicateNode(w[0].node_id));
        }
    }
    for (k, p) in parts.iter().enumerate() {
        if p.node_id != k {
            return Err(ReduceError::MissingNode(k));
        }
    }
    if parts.len() != expected {
        return match parts.len() < expected {
            true => Err(ReduceError::MissingNode(parts.len())),
            false => Err(ReduceError::WrongCount { expected, got: parts.len() }),
        };
    }
    let mut iter = parts.into_iter();
    let mut total = iter.next().ok_or(ReduceError::WrongCount { expected, got: 0 })?;
    for p in iter {
        if !total.body.same_layout(&p.body) {
            return Err(ReduceError::PhaseMismatch);
        }
        total.body.add_assign(&p.body);
        total.sample_count += p.sample_count;
    }
    total.node_id = 0;
    Ok(total)
}

/// Trains with a seeded balanced shard split.
pub fn train(config: &TrainConfig, data: &PatchSet, transport: &dyn Transport) -> Result<TrainOutput, TrainError> {
    if config.nodes == 0 || config.nodes > data.len() {
        config.validate(data.m(), data.len())?;
    }
    let shards = shard_dataset(data, config.nodes, config.seed)?;
    train_with_shards(config, data, shards, transport)
}

/// Trains with an explicit shard assignment (one shard per node).
pub fn train_with_shards(
    config: &TrainConfig,
    data: &PatchSet,
    shards: Vec<Shard>,
    transport: &dyn Transport,
) -> Result<TrainOutput, TrainError> {
    config.validate(data.m(), data.len())?;
    check_shards(&shards, config.nodes, data.len())?;
    let dict = init_dictionaries(config, data)?;
    let links = transport.connect(config.nodes)?;
    if links.len() != config.nodes {
        return Err(TrainError::InvalidConfig(format!("transport returned {} links", links.len())));
    }
    let (master_links, worker_links): (Vec<_>, Vec<_>) = links.into_iter().unzip();
    let ctx = WorkerContext { data, mode: config.mode, s: config.s, n1: config.n1, n2: config.n2 };

    thread::scope(|scope| {
        let handles: Vec<_> = worker_links
            .into_iter()
            .enumerate()
            .map(|(node, link)| {
                let ctx = &ctx;
                thread::Builder::new()
                    .name(format!("sepdl-worker-{node}"))
                    .spawn_scoped(scope, move || run_worker(ctx, node, link))
                    .expect("spawn worker thread")
            })
            .collect();
        let mut master = Master::new(config, data, master_links);
        let result = master.run(dict, shards);
        // closing the master ends drop every link, which releases idle workers
        let metrics = master.metrics.clone();
        drop(master);
        let mut panicked = None;
        for (node, h) in handles.into_iter().enumerate() {
            if h.join().is_err() && panicked.is_none() {
                panicked = Some(node);
            }
        }
        match (result, panicked) {
            (Ok(out), None) => Ok(out),
            (Ok(_), Some(node)) => Err(TrainError::WorkerFailure {
                node_id: node,
                reason: "worker thread panicked".into(),
                metrics: Box::new(metrics),
            }),
            (Err(e), _) => Err(e),
        }
    })
}

fn check_shards(shards: &[Shard], nodes: usize, count: usize) -> Result<(), TrainError> {
    if shards.len() != nodes {
        return Err(TrainError::InvalidConfig(format!("{} shards for {nodes} nodes", shards.len())));
    }
    let mut seen = vec![false; count];
    for (k, shard) in shards.iter().enumerate() {
        if shard.node_id != k {
            return Err(TrainError::InvalidConfig(format!("shard {k} has node id {}", shard.node_id)));
        }
        if shard.sample_indices.is_empty() {
            return Err(TrainError::InvalidConfig(format!("shard {k} is empty")));
        }
        for &i in &shard.sample_indices {
            if i >= count || seen[i] {
                return Err(TrainError::InvalidConfig(format!("sample {i} is out of range or assigned twice")));
            }
            seen[i] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(TrainError::InvalidConfig("shards do not cover every sample".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// master

struct Master<'a> {
    config: &'a TrainConfig,
    data: &'a PatchSet,
    links: Vec<Box<dyn Link>>,
    metrics: RunMetrics,
    history: Vec<DictionaryPair>,
}

impl<'a> Master<'a> {
    fn new(config: &'a TrainConfig, data: &'a PatchSet, links: Vec<Box<dyn Link>>) -> Self {
        let metrics =
            RunMetrics { nodes: config.nodes, samples: data.len(), patch_side: data.m(), ..Default::default() };
        Master { config, data, links, metrics, history: Vec::new() }
    }

    fn worker_failure(&self, node_id: usize, reason: impl Into<String>) -> TrainError {
        TrainError::WorkerFailure { node_id, reason: reason.into(), metrics: Box::new(self.metrics.clone()) }
    }

    fn send(&mut self, node: usize, payload: Payload) -> Result<u64, TrainError> {
        match self.links[node].send(Envelope::new(MASTER, payload)) {
            Ok(n) => Ok(n as u64),
            Err(TransportError::Disconnected) => Err(self.worker_failure(node, "disconnected")),
            Err(e) => Err(e.into()),
        }
    }

    fn recv(&mut self, node: usize) -> Result<(Envelope, u64), TrainError> {
        let env = match self.links[node].recv() {
            Ok(env) => env,
            Err(TransportError::Disconnected) => return Err(self.worker_failure(node, "disconnected")),
            Err(e) => return Err(e.into()),
        };
        if let Payload::Failure { message } = &env.payload {
            return Err(self.worker_failure(node, message.clone()));
        }
        if env.sender as usize != node {
            return Err(self.worker_failure(node, format!("message claims sender {}", env.sender)));
        }
        let size = env.byte_size() as u64;
        Ok((env, size))
    }

    fn broadcast(
        &mut self,
        left: Option<DictSide>,
        right: Option<DictSide>,
        next: NextStep,
    ) -> Result<u64, TrainError> {
        let mut bytes = 0;
        for node in 0..self.links.len() {
            let payload = Payload::BroadcastDicts { left: left.clone(), right: right.clone(), next };
            bytes += self.send(node, payload)?;
        }
        Ok(bytes)
    }

    /// Collects one partial per node, in node order.
    fn gather(&mut self, side: Side) -> Result<(Vec<PartialSums>, Vec<PhaseStats>, u64), TrainError> {
        let mut sums = Vec::with_capacity(self.links.len());
        let mut stats = Vec::with_capacity(self.links.len());
        let mut bytes = 0;
        for node in 0..self.links.len() {
            let (env, size) = self.recv(node)?;
            bytes += size;
            match (side, env.payload) {
                (Side::Left, Payload::PartialLeft { sums: s, stats: st })
                | (Side::Right, Payload::PartialRight { sums: s, stats: st }) => {
                    sums.push(s);
                    stats.push(st);
                }
                (_, other) => {
                    let kind = Envelope::new(node as u32, other).kind_name();
                    return Err(self.worker_failure(node, format!("unexpected {kind} message")));
                }
            }
        }
        Ok((sums, stats, bytes))
    }

    /// Solves for one side and fills dead atoms from node 0's worst-fit samples.
    fn solve(&mut self, reduced: PartialSums) -> Result<(Mat, Option<NormScaling>, u64, u64), TrainError> {
        let ridge = self.config.ridge;
        let mut extra_up = 0;
        let mut extra_down = 0;
        let (atoms, scaling) = match reduced.body {
            PartialBody::LeftCross { s1 } => (update_left_ortho(&s1)?, None),
            PartialBody::RightCross { s2 } => (update_right_ortho(&s2)?, None),
            PartialBody::Left { p, r } => {
                let upd = update_left_general_with(&p, &r, ridge)?;
                let (a, w) = self.fill_dead(upd, &mut extra_up, &mut extra_down)?;
                (a, Some(w))
            }
            PartialBody::Right { m, n } => {
                let upd = update_right_general_with(&m, &n, ridge)?;
                let (a, w) = self.fill_dead(upd, &mut extra_up, &mut extra_down)?;
                (a, Some(w))
            }
        };
        Ok((atoms, scaling, extra_up, extra_down))
    }

    fn fill_dead(
        &mut self,
        mut upd: GeneralUpdate,
        up: &mut u64,
        down: &mut u64,
    ) -> Result<(Mat, NormScaling), TrainError> {
        if !upd.dead.is_empty() {
            debug!("replacing {} dead {:?} atoms", upd.dead.len(), upd.scaling.side);
            let count = upd.dead.len() as u32;
            *down += self.send(0, Payload::ReplacementRequest { side: upd.scaling.side, count })?;
            let (env, size) = self.recv(0)?;
            *up += size;
            match env.payload {
                Payload::Replacement { atoms } => upd.replace_dead(&atoms),
                _ => return Err(self.worker_failure(0, "expected replacement atoms")),
            }
        }
        Ok(upd.finish()?)
    }

    fn run(&mut self, mut dict: DictionaryPair, shards: Vec<Shard>) -> Result<TrainOutput, TrainError> {
        let k_iters = self.config.iters;
        for shard in shards {
            let indices = shard.sample_indices;
            self.metrics.setup_bytes += self.send(shard.node_id, Payload::ShardAssign { indices })?;
        }
        let both = (
            Some(DictSide { atoms: dict.d1().clone(), scaling: None }),
            Some(DictSide { atoms: dict.d2().clone(), scaling: None }),
        );
        self.metrics.setup_bytes += self.broadcast(both.0, both.1, NextStep::CodeLeft)?;

        let start = Instant::now();
        self.metrics.iterations.push(IterationMetrics::default());
        for it in 1..=k_iters {
            let mut row = IterationMetrics { iter: it, ..Default::default() };

            // left phase
            let t0 = Instant::now();
            let (parts, stats, up) = self.gather(Side::Left)?;
            row.code_seconds += t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            row.left_before = stats.iter().map(|s| s.objective_before).sum();
            if it == 1 {
                let first = &mut self.metrics.iterations[0];
                first.objective = row.left_before;
                first.objective_mid = row.left_before;
                first.rmse = rmse_from_objective(row.left_before, self.data.len(), self.data.m());
            } else {
                self.close_previous(&stats);
            }
            let reduced = reduce_partials(parts, self.links.len())?;
            let (d1, w1, extra_up, extra_down) = self.solve(reduced)?;
            dict = dict.with_left(d1.clone())?;
            let down =
                self.broadcast(Some(DictSide { atoms: d1, scaling: w1.map(|w| w.diag) }), None, NextStep::CodeRight)?;
            row.left_bytes = PhaseBytes { up: up + extra_up, down: down + extra_down };
            row.update_seconds += t1.elapsed().as_secs_f64();

            // right phase
            let t2 = Instant::now();
            let (parts, stats, up) = self.gather(Side::Right)?;
            row.code_seconds += t2.elapsed().as_secs_f64();
            let t3 = Instant::now();
            row.left_after = sum_prev_after(&stats);
            row.objective_mid = row.left_after;
            row.right_before = stats.iter().map(|s| s.objective_before).sum();
            let reduced = reduce_partials(parts, self.links.len())?;
            let (d2, w2, extra_up, extra_down) = self.solve(reduced)?;
            dict = dict.with_right(d2.clone())?;
            let next = if it == k_iters { NextStep::Report } else { NextStep::CodeLeft };
            let down = self.broadcast(None, Some(DictSide { atoms: d2, scaling: w2.map(|w| w.diag) }), next)?;
            row.right_bytes = PhaseBytes { up: up + extra_up, down: down + extra_down };
            row.update_seconds += t3.elapsed().as_secs_f64();

            debug!(
                "iter {it}: left {:.6e} -> {:.6e}, right {:.6e} -> (pending)",
                row.left_before, row.left_after, row.right_before
            );
            self.metrics.iterations.push(row);
            if self.config.keep_history {
                self.history.push(dict.clone());
            }
        }
        self.metrics.total_seconds = start.elapsed().as_secs_f64();

        // final report: last after-right objective and the codes
        let mut codes: Vec<Option<SparseCode>> = vec![None; self.data.len()];
        let mut final_objective = 0.0;
        for node in 0..self.links.len() {
            let (env, _) = self.recv(node)?;
            match env.payload {
                Payload::FinalReport { objective, codes: part } => {
                    final_objective += objective;
                    for (idx, code) in part {
                        if idx >= codes.len() {
                            return Err(self.worker_failure(node, format!("code for unknown sample {idx}")));
                        }
                        codes[idx] = Some(code);
                    }
                }
                _ => return Err(self.worker_failure(node, "expected final report")),
            }
        }
        self.set_final(final_objective);
        let codes = codes
            .into_iter()
            .enumerate()
            .map(|(k, c)| c.ok_or_else(|| TrainError::ShapeMismatch(format!("no code returned for sample {k}"))))
            .collect::<Result<Vec<_>, _>>()?;
        info!(
            "trained {} iterations on {} samples with {} nodes in {:.3}s, final rmse {:.6e}",
            k_iters,
            self.data.len(),
            self.links.len(),
            self.metrics.total_seconds,
            self.metrics.iterations.last().map_or(f64::NAN, |r| r.rmse)
        );
        Ok(TrainOutput { dict, metrics: self.metrics.clone(), codes, history: std::mem::take(&mut self.history) })
    }

    fn close_previous(&mut self, stats: &[PhaseStats]) {
        let after = sum_prev_after(stats);
        self.set_final(after);
    }

    fn set_final(&mut self, objective: f64) {
        let (n, m) = (self.data.len(), self.data.m());
        if let Some(last) = self.metrics.iterations.last_mut() {
            last.right_after = objective;
            last.objective = objective;
            last.rmse = rmse_from_objective(objective, n, m);
        }
    }
}

fn sum_prev_after(stats: &[PhaseStats]) -> f64 {
    stats.iter().map(|s| s.objective_prev_after.unwrap_or(f64::NAN)).sum()
}

// ---------------------------------------------------------------------------
// worker

struct WorkerContext<'a> {
    data: &'a PatchSet,
    mode: DictMode,
    s: usize,
    n1: usize,
    n2: usize,
}

struct WorkerState {
    node: usize,
    indices: Vec<usize>,
    d1: Option<Mat>,
    d2: Option<Mat>,
    codes: Vec<SparseCode>,
    pending_after: Option<f64>,
}

fn run_worker(ctx: &WorkerContext<'_>, node: usize, mut link: Box<dyn Link>) {
    let indices = match link.recv() {
        Ok(Envelope { payload: Payload::ShardAssign { indices }, .. }) => indices,
        Ok(_) => {
            let _ = link.send(failure(node, "expected shard assignment"));
            return;
        }
        Err(_) => return,
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= ctx.data.len()) {
        let _ = link.send(failure(node, format!("sample index {bad} out of range")));
        return;
    }
    let mut state = WorkerState { node, indices, d1: None, d2: None, codes: Vec::new(), pending_after: None };
    loop {
        let env = match link.recv() {
            Ok(env) => env,
            Err(_) => return,
        };
        let reply = match handle(ctx, &mut state, env.payload) {
            Ok(Some(payload)) => Envelope::new(node as u32, payload),
            Ok(None) => continue,
            Err(msg) => {
                let _ = link.send(failure(node, msg));
                return;
            }
        };
        let done = matches!(reply.payload, Payload::FinalReport { .. });
        if link.send(reply).is_err() || done {
            return;
        }
    }
}

fn failure(node: usize, message: impl Into<String>) -> Envelope {
    Envelope::new(node as u32, Payload::Failure { message: message.into() })
}

fn handle(ctx: &WorkerContext<'_>, st: &mut WorkerState, payload: Payload) -> Result<Option<Payload>, String> {
    match payload {
        Payload::BroadcastDicts { left, right, next } => {
            let have_codes = !st.codes.is_empty();
            for (side, update) in [(Side::Left, left), (Side::Right, right)] {
                let Some(ds) = update else { continue };
                if let (true, Some(diag)) = (have_codes, ds.scaling) {
                    let w = NormScaling { side, diag };
                    st.codes.iter_mut().for_each(|c| w.compensate(c));
                }
                match side {
                    Side::Left => st.d1 = Some(ds.atoms),
                    Side::Right => st.d2 = Some(ds.atoms),
                }
            }
            let (d1, d2) = match (&st.d1, &st.d2) {
                (Some(a), Some(b)) => (a.clone(), b.clone()),
                _ => return Err("dictionaries not initialized".into()),
            };
            let dict = DictionaryPair::new(ctx.mode, d1, d2).map_err(|e| e.to_string())?;
            if have_codes {
                st.pending_after = Some(shard_objective(ctx, st, &dict));
            }
            match next {
                NextStep::CodeLeft | NextStep::CodeRight => {
                    code_shard(ctx, st, &dict)?;
                    let before = shard_objective(ctx, st, &dict);
                    let samples = st.indices.iter().map(|&i| ctx.data.get(i)).zip(&st.codes);
                    let sums = match (next, ctx.mode) {
                        (NextStep::CodeLeft, DictMode::General) => accumulate_left(st.node, samples, dict.d2(), ctx.n1),
                        (NextStep::CodeLeft, DictMode::Orthonormal) => {
                            accumulate_left_cross(st.node, samples, dict.d2(), ctx.n1)
                        }
                        (_, DictMode::General) => accumulate_right(st.node, samples, dict.d1(), ctx.n2),
                        (_, DictMode::Orthonormal) => accumulate_right_cross(st.node, samples, dict.d1(), ctx.n2),
                    }
                    .map_err(|e| e.to_string())?;
                    let stats = PhaseStats { objective_before: before, objective_prev_after: st.pending_after.take() };
                    Ok(Some(match next {
                        NextStep::CodeLeft => Payload::PartialLeft { sums, stats },
                        _ => Payload::PartialRight { sums, stats },
                    }))
                }
                NextStep::Report => {
                    let objective = st.pending_after.take().unwrap_or_else(|| shard_objective(ctx, st, &dict));
                    let codes = st.indices.iter().copied().zip(std::mem::take(&mut st.codes)).collect();
                    Ok(Some(Payload::FinalReport { objective, codes }))
                }
            }
        }
        Payload::ReplacementRequest { side, count } => {
            let (d1, d2) = match (&st.d1, &st.d2) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err("dictionaries not initialized".into()),
            };
            Ok(Some(Payload::Replacement { atoms: replacement_atoms(ctx, st, d1, d2, side, count as usize) }))
        }
        other => Err(format!("unexpected {} message", Envelope::new(MASTER, other).kind_name())),
    }
}

fn code_shard(ctx: &WorkerContext<'_>, st: &mut WorkerState, dict: &DictionaryPair) -> Result<(), String> {
    let coder = SparseCoder::for_dict(dict);
    let stop = CodingStop::FixedSparsity(ctx.s);
    st.codes = st
        .indices
        .iter()
        .map(|&i| coder.code(ctx.data.get(i), stop))
        .collect::<Result<_, _>>()
        .map_err(|e| format!("sparse coding failed: {e}"))?;
    Ok(())
}

fn shard_objective(ctx: &WorkerContext<'_>, st: &WorkerState, dict: &DictionaryPair) -> f64 {
    st.indices.iter().zip(&st.codes).map(|(&i, x)| ctx.data.get(i).sub(&dict.reconstruct(x)).frobenius_sq()).sum()
}

/// Candidate atoms from the worst-represented samples of this shard: the
/// largest-norm column (left) or row (right) of each residual, normalized.
fn replacement_atoms(
    ctx: &WorkerContext<'_>,
    st: &WorkerState,
    d1: &Mat,
    d2: &Mat,
    side: Side,
    count: usize,
) -> Vec<Vec<f64>> {
    let m = ctx.data.m();
    let mut residuals: Vec<(f64, usize, Mat)> = st
        .indices
        .iter()
        .zip(&st.codes)
        .map(|(&i, x)| {
            let e = ctx.data.get(i).sub(&crate::dictupdate::reconstruct(d1, d2, x));
            (e.frobenius_sq(), i, e)
        })
        .collect();
    residuals.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    (0..count)
        .map(|k| {
            let fallback = || {
                let mut v = vec![0.0; m];
                v[k % m] = 1.0;
                v
            };
            if residuals.is_empty() {
                return fallback();
            }
            let e = &residuals[k % residuals.len()].2;
            let e = match side {
                Side::Left => e.clone(),
                Side::Right => e.transpose(),
            };
            let best = (0..m).max_by(|&a, &b| e.col_norm(a).total_cmp(&e.col_norm(b)).then(b.cmp(&a)));
            match best {
                Some(j) if e.col_norm(j) > 0.0 => {
                    let n = e.col_norm(j);
                    e.col(j).iter().map(|v| v / n).collect()
                }
                _ => fallback(),
            }
        })
        .collect()
}
