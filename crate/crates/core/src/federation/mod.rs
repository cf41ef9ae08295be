//! Server loop: select clients, dispatch the global model, run local
//! search on worker threads, aggregate, anneal, evaluate.

mod aggregate;

pub use aggregate::{derive_seed, fedavg, select_clients, Aggregate};

use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::meta::{client_search, count_correct, EpisodeSizes, LearnerConfig, Params};
use crate::metrics::{ClientEpochRecord, MetricsSink, RoundMetrics};
use crate::prune::{finalize, fix_orphans, DiscreteModel, PruneMask};
use crate::search::{anneal, ArchParams, Mode, SuperNet};
use crate::tensor::Tape;
use crate::wire::{read_frame, write_frame, RoundMessage};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    /// Encoded messages over in-process channels.
    #[default]
    Channel,
    /// The same bytes, length-prefixed, over loopback TCP.
    Tcp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSchedule {
    pub lambda_0: f32,
    pub rate: f32,
    pub lambda_min: f32,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            lambda_0: 5.0,
            rate: 0.025,
            lambda_min: 0.1,
        }
    }
}

impl AnnealSchedule {
    pub fn at(&self, round: usize) -> f32 {
        anneal(self.lambda_0, round, self.rate, self.lambda_min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub seed: u64,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub learner: LearnerConfig,
    pub episode: EpisodeSizes,
    pub anneal: AnnealSchedule,
    pub prune_threshold: f32,
    pub prune_period: usize,
    /// Worker threads running client searches within a round.
    pub workers: usize,
    pub transport: Transport,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 10,
            clients_per_round: 5,
            learner: LearnerConfig::default(),
            episode: EpisodeSizes::default(),
            anneal: AnnealSchedule::default(),
            prune_threshold: crate::prune::DEFAULT_THRESHOLD,
            prune_period: crate::prune::DEFAULT_PERIOD,
            workers: 1,
            transport: Transport::Channel,
        }
    }
}

/// Global model state held by the server.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub params: Params,
    pub mask: PruneMask,
    pub lambda: f32,
    pub round: usize,
}

impl ServerState {
    pub fn arch(&self, net: &SuperNet) -> ArchParams {
        ArchParams {
            logits: self.params.alpha.clone(),
            lambda: self.lambda,
            combo_size: net.geometry.combo_size,
        }
    }
}

pub struct FederationOutcome {
    pub state: ServerState,
    pub rounds: Vec<RoundMetrics>,
    pub discrete: DiscreteModel,
}

/// Loss and accuracy of a set of logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub loss: f64,
    pub accuracy: f64,
    pub n: usize,
}

/// Mean cross-entropy and accuracy of precomputed logits.
pub fn score_logits(logits: &crate::tensor::Tensor, labels: &[usize]) -> Result<Score> {
    if labels.is_empty() {
        return Err(Error::Federation("evaluation set is empty".into()));
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone())?;
    let loss = tape.cross_entropy(l, labels)?;
    Ok(Score {
        loss: tape.value(loss)?.data()[0] as f64,
        accuracy: count_correct(logits.data(), labels) as f64 / labels.len() as f64,
        n: labels.len(),
    })
}

/// Noise-free evaluation of the masked supernet.
pub fn evaluate_supernet(net: &SuperNet, state: &ServerState, batch: &Batch) -> Result<Score> {
    if batch.is_empty() {
        return Err(Error::Federation("evaluation set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = net.predict(
        &state.params.w,
        &state.arch(net),
        state.mask.entries(),
        Mode::Eval,
        &batch.inputs,
        &mut rng,
    )?;
    score_logits(&logits, &batch.labels)
}

fn validate(cfg: &FederationConfig, data: &Dataset, plan: &PartitionPlan) -> Result<()> {
    cfg.learner.validate()?;
    let n = plan.n_clients();
    if cfg.clients_per_round == 0 || cfg.clients_per_round > n {
        return Err(Error::Federation(format!(
            "clients_per_round must be in 1..={n}, got {}",
            cfg.clients_per_round
        )));
    }
    if data.test.is_empty() {
        return Err(Error::Federation("dataset has no test split for server evaluation".into()));
    }
    let need = cfg.episode.support + cfg.episode.query;
    if let Some((k, s)) = plan.client_shards.iter().enumerate().find(|(_, s)| s.len() < need) {
        return Err(Error::Federation(format!(
            "client {k} holds {} samples, fewer than one episode ({need})",
            s.len()
        )));
    }
    Ok(())
}

struct Job<'a> {
    client: usize,
    shard: &'a [usize],
}

fn run_client(
    cfg: &FederationConfig,
    net: &SuperNet,
    state: &ServerState,
    data: &Dataset,
    job: &Job,
) -> Result<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, state.round as u64, job.client as u64]));
    let out = client_search(
        &cfg.learner,
        net,
        &state.params,
        &state.mask,
        state.lambda,
        data,
        job.shard,
        cfg.episode,
        state.round * cfg.learner.epochs,
        &mut rng,
    )?;
    let msg = RoundMessage {
        client_id: job.client,
        round: state.round,
        n_k: job.shard.len() as u64,
        weights: out.params.w,
        alpha: out.params.alpha,
        geometry_hash: net.geometry.hash(),
        mask: out.mask,
        metrics: out.metrics,
    };
    Ok(msg.encode())
}

type Outcome = (usize, Result<Vec<u8>>);

/// Runs every job on `workers` threads and returns the encoded messages
/// keyed by client id, sorted by client id.
fn dispatch(
    cfg: &FederationConfig,
    net: &SuperNet,
    state: &ServerState,
    data: &Dataset,
    jobs: &[Job],
) -> Result<Vec<Outcome>> {
    let workers = cfg.workers.clamp(1, jobs.len().max(1));
    let listener = match cfg.transport {
        Transport::Tcp => {
            let l = TcpListener::bind(("127.0.0.1", 0))?;
            l.set_nonblocking(true)?;
            Some(l)
        }
        Transport::Channel => None,
    };
    let addr = listener.as_ref().map(|l| l.local_addr()).transpose()?;
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<Outcome>();
    let mut results = std::thread::scope(|s| -> Result<Vec<Outcome>> {
        let acceptor = listener.as_ref().map(|l| s.spawn(|| accept_all(l, &stop)));
        for wid in 0..workers {
            let tx = tx.clone();
            s.spawn(move || {
                for job in jobs.iter().skip(wid).step_by(workers) {
                    let res = match (run_client(cfg, net, state, data, job), addr) {
                        (Ok(bytes), Some(addr)) => match send_tcp(addr, job.client, &bytes) {
                            Ok(()) => continue,
                            Err(e) => Err(e),
                        },
                        (r, _) => r,
                    };
                    if tx.send((job.client, res)).is_err() {
                        return;
                    }
                }
            });
        }
        drop(tx);
        // Closes once every worker has exited.
        let mut out: Vec<Outcome> = rx.iter().collect();
        stop.store(true, Ordering::SeqCst);
        if let Some(h) = acceptor {
            let received = h
                .join()
                .map_err(|_| Error::Federation("acceptor thread panicked".into()))??;
            out.extend(received.into_iter().map(|(c, b)| (c, Ok(b))));
        }
        Ok(out)
    })?;
    results.sort_by_key(|(c, _)| *c);
    let ids: Vec<usize> = results.iter().map(|(c, _)| *c).collect();
    let expected: Vec<usize> = jobs.iter().map(|j| j.client).collect();
    if ids != expected {
        return Err(Error::Federation(format!("expected messages from {expected:?}, received {ids:?}")));
    }
    Ok(results)
}

/// Accepts connections until `stop` is set and the backlog is drained.
fn accept_all(listener: &TcpListener, stop: &AtomicBool) -> Result<Vec<(usize, Vec<u8>)>> {
    let mut out = Vec::new();
    loop {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                let mut reader = BufReader::new(stream);
                let id = read_frame(&mut reader)?;
                let id: [u8; 4] = id
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::Federation("malformed client id frame".into()))?;
                out.push((u32::from_le_bytes(id) as usize, read_frame(&mut reader)?));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if stop.load(Ordering::SeqCst) {
                    return Ok(out);
                }
                std::thread::sleep(std::time::Duration::from_millis(1));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// One connection per message: a frame with the client id, then a frame
/// with the encoded message.
fn send_tcp(addr: std::net::SocketAddr, client: usize, bytes: &[u8]) -> Result<()> {
    let stream = TcpStream::connect(addr)?;
    let mut w = BufWriter::new(stream);
    write_frame(&mut w, &(client as u32).to_le_bytes())?;
    write_frame(&mut w, bytes)?;
    Ok(())
}

/// Runs `cfg.rounds` rounds from `initial` and finalizes the result.
pub fn run_federation(
    cfg: &FederationConfig,
    net: &SuperNet,
    initial: Params,
    data: &Dataset,
    plan: &PartitionPlan,
    sink: &mut dyn MetricsSink,
) -> Result<FederationOutcome> {
    validate(cfg, data, plan)?;
    let mut state = ServerState {
        params: initial,
        mask: PruneMask::open(net.layout.len(), cfg.prune_threshold, cfg.prune_period),
        lambda: cfg.anneal.at(0),
        round: 0,
    };
    let test = data.test_batch();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        state.round = t;
        state.lambda = cfg.anneal.at(t);
        let ids = select_clients(plan.n_clients(), cfg.clients_per_round, cfg.seed, t)?;
        let jobs: Vec<Job> = ids
            .iter()
            .map(|&client| Job {
                client,
                shard: &plan.client_shards[client],
            })
            .collect();
        let mut messages = Vec::with_capacity(jobs.len());
        for (client, res) in dispatch(cfg, net, &state, data, &jobs)? {
            let wrap = |e: Error| Error::Client {
                round: t,
                client,
                source: Box::new(e),
            };
            let bytes = res.map_err(wrap)?;
            let msg = RoundMessage::decode(&bytes).map_err(|e| wrap(e.into()))?;
            if msg.round != t || msg.client_id != client {
                return Err(wrap(Error::Federation(format!(
                    "message tagged round {} client {}",
                    msg.round, msg.client_id
                ))));
            }
            messages.push(msg);
        }
        let agg = fedavg(&messages)?;
        for m in &messages {
            for e in &m.metrics {
                sink.client_epoch(&ClientEpochRecord {
                    round: t,
                    client: m.client_id,
                    metrics: e.clone(),
                })?;
            }
        }
        let mean_q = messages
            .iter()
            .map(|m| m.metrics.last().map_or(0.0, |e| e.query_acc))
            .sum::<f64>()
            / messages.len() as f64;
        state.params = agg.params;
        state.mask = fix_orphans(&net.layout, &state.arch(net), &agg.mask).0;
        state.lambda = cfg.anneal.at(t + 1);
        let score = evaluate_supernet(net, &state, &test)?;
        let rec = RoundMetrics {
            round: t,
            server_acc: score.accuracy,
            server_loss: score.loss,
            mean_client_query_acc: mean_q,
            lambda: state.lambda as f64,
            open_categoricals: state.mask.open_count(),
        };
        sink.round(&rec)?;
        rounds.push(rec);
    }
    state.round = cfg.rounds;
    let discrete = finalize(net, &state.params.w, &state.arch(net), &state.mask)?;
    Ok(FederationOutcome {
        state,
        rounds,
        discrete,
    })
}
