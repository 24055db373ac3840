//! Low-latency gating service over newline-delimited JSON.
//!
//! One request per line, one response per line, order preserved per
//! connection. Models and the policy are loaded once and immutable for
//! the process lifetime; each decision is a pure function of the request
//! and the loaded artifacts.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibrate::ThresholdPolicy;
use crate::error::{Error, Result};
use crate::events::FeatureBag;
use crate::features::{FeatureKind, Stage};
use crate::gbdt::Ensemble;
use crate::util::derived_rng;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Trigger,
    Filter,
}

/// Wire request: `{"v":1,"id":"...","kind":"trigger","features":{...}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateRequest {
    pub v: u32,
    pub id: String,
    pub kind: GateKind,
    pub features: FeatureBag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateResponse {
    pub v: u32,
    pub id: String,
    pub pass: bool,
    pub score: f64,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_hit: Option<String>,
    pub latency_us: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
    pub detail: String,
}

/// Immutable serving state shared across connections.
pub struct GateService {
    pub trigger: Ensemble,
    pub filter: Ensemble,
    pub policy: ThresholdPolicy,
    unknown_feature_warnings: AtomicU64,
}

impl GateService {
    pub fn new(trigger: Ensemble, filter: Ensemble, policy: ThresholdPolicy) -> Result<Self> {
        if trigger.stage != Stage::Trigger || filter.stage != Stage::Filter {
            return Err(Error::InvalidConfig(
                "serve needs a trigger-stage and a filter-stage model".to_string(),
            ));
        }
        if trigger.schema_hash != filter.schema_hash {
            return Err(Error::SchemaHashMismatch {
                expected: trigger.schema_hash.clone(),
                found: filter.schema_hash.clone(),
            });
        }
        Ok(Self {
            trigger,
            filter,
            policy,
            unknown_feature_warnings: AtomicU64::new(0),
        })
    }

    pub fn unknown_feature_warnings(&self) -> u64 {
        self.unknown_feature_warnings.load(Ordering::Relaxed)
    }

    fn count_unknown_features(&self, bag: &FeatureBag) {
        let schema = &self.trigger.encoder.schema;
        let unknown = bag
            .scalars
            .keys()
            .chain(bag.categoricals.keys())
            .chain(bag.flags.keys())
            .filter(|name| schema.entry(name).is_none())
            .count() as u64;
        if unknown > 0 {
            self.unknown_feature_warnings.fetch_add(unknown, Ordering::Relaxed);
            log::warn!("{unknown} unknown feature name(s) ignored in request");
        }
    }

    /// Decide one request. Unknown feature names are ignored (counted);
    /// missing known features take the schema missing marker.
    pub fn decide(&self, request: &GateRequest) -> Result<GateResponse> {
        if request.v != PROTOCOL_VERSION {
            return Err(Error::BadRequest(format!(
                "unsupported protocol version {}",
                request.v
            )));
        }
        let started = Instant::now();
        self.count_unknown_features(&request.features);
        let (score, threshold, rule_hit) = match request.kind {
            GateKind::Trigger => (
                self.trigger.score_bag(&request.features)?,
                self.policy.trigger_threshold,
                None,
            ),
            GateKind::Filter => {
                let compilable = request.features.flags.get("compilable").copied();
                // a rule needs evidence: an absent flag cannot fire it
                let rule_hit = self
                    .policy
                    .hard_rules
                    .hit(compilable.unwrap_or(true))
                    .map(|s| s.to_string());
                (
                    self.filter.score_bag(&request.features)?,
                    self.policy.filter_threshold,
                    rule_hit,
                )
            }
        };
        let pass = rule_hit.is_none() && score >= threshold;
        Ok(GateResponse {
            v: PROTOCOL_VERSION,
            id: request.id.clone(),
            pass,
            score,
            threshold,
            rule_hit,
            latency_us: started.elapsed().as_micros() as u64,
        })
    }
}

/// A running server; connections are handled one thread each.
pub struct Server {
    pub addr: std::net::SocketAddr,
    shutdown: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl Server {
    /// Binds and starts accepting. `bind` may use port 0 for an ephemeral
    /// port; the resolved address is in `addr`.
    pub fn spawn(service: Arc<GateService>, bind: impl ToSocketAddrs) -> Result<Server> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let shutdown_accept = shutdown.clone();
        listener.set_nonblocking(true)?;
        let handle = std::thread::spawn(move || {
            let mut workers = Vec::new();
            loop {
                if shutdown_accept.load(Ordering::Relaxed) {
                    break;
                }
                match listener.accept() {
                    Ok((stream, _)) => {
                        let service = service.clone();
                        let shutdown = shutdown_accept.clone();
                        workers.push(std::thread::spawn(move || {
                            if let Err(err) = handle_connection(stream, &service, &shutdown) {
                                log::debug!("connection ended: {err}");
                            }
                        }));
                    }
                    Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(std::time::Duration::from_millis(2));
                    }
                    Err(err) => {
                        log::warn!("accept failed: {err}");
                        break;
                    }
                }
            }
            for w in workers {
                let _ = w.join();
            }
        });
        Ok(Server {
            addr,
            shutdown,
            handle: Some(handle),
        })
    }

    pub fn shutdown(mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(stream: TcpStream, service: &GateService) -> Result<()> {
    stream.set_nodelay(true)?;
    let reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<GateRequest>(&line) {
            Ok(request) => match service.decide(&request) {
                Ok(response) => {
                    serde_json::to_writer(&mut writer, &response)?;
                }
                Err(err) => {
                    serde_json::to_writer(
                        &mut writer,
                        &ErrorResponse {
                            error: err.code().to_string(),
                            detail: err.to_string(),
                        },
                    )?;
                }
            },
            Err(err) => {
                // malformed line: answer and keep the connection open
                serde_json::to_writer(
                    &mut writer,
                    &ErrorResponse {
                        error: "bad_request".to_string(),
                        detail: format!("malformed request line: {err}"),
                    },
                )?;
            }
        }
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub requests: usize,
    pub concurrency: usize,
    pub p50_us: u64,
    pub p90_us: u64,
    pub p99_us: u64,
    pub throughput_rps: f64,
}

/// Deterministic request corpus: random feature bags drawn from the
/// schema embedded in the trigger model.
pub fn bench_corpus(service: &GateService, n: usize, seed: u64) -> Vec<GateRequest> {
    use rand::Rng;
    let mut rng = derived_rng(seed, "bench-corpus");
    let schema = &service.filter.encoder.schema;
    (0..n)
        .map(|i| {
            let kind = if i % 2 == 0 { GateKind::Trigger } else { GateKind::Filter };
            let view = match kind {
                GateKind::Trigger => Stage::Trigger,
                GateKind::Filter => Stage::Filter,
            };
            let mut bag = FeatureBag::new();
            for entry in schema.view_entries(view) {
                if rng.gen_bool(0.06) {
                    continue; // leave some features missing
                }
                match &entry.kind {
                    FeatureKind::Scalar { .. } => {
                        bag.set_scalar(&entry.name, rng.gen_range(0.0..1000.0))
                    }
                    FeatureKind::Categorical { domain } => {
                        if domain.is_empty() {
                            continue;
                        }
                        let pick = rng.gen_range(0..domain.len());
                        bag.set_categorical(&entry.name, &domain[pick]);
                    }
                    FeatureKind::Flag => bag.set_flag(&entry.name, rng.gen_bool(0.5)),
                }
            }
            GateRequest {
                v: PROTOCOL_VERSION,
                id: format!("r{i:07}"),
                kind,
                features: bag,
                context: None,
            }
        })
        .collect()
}

/// Drives `n` requests at the given concurrency and reports round-trip
/// latency percentiles measured at the client.
pub fn bench(addr: &str, n: usize, concurrency: usize, seed: u64, service: &GateService) -> Result<BenchReport> {
    if n == 0 {
        return Ok(BenchReport {
            requests: 0,
            concurrency,
            p50_us: 0,
            p90_us: 0,
            p99_us: 0,
            throughput_rps: 0.0,
        });
    }
    let corpus = bench_corpus(service, n, seed);
    let chunk = n.div_ceil(concurrency.max(1));
    let started = Instant::now();
    let mut handles = Vec::new();
    for part in corpus.chunks(chunk) {
        let part: Vec<GateRequest> = part.to_vec();
        let addr = addr.to_string();
        handles.push(std::thread::spawn(move || -> Result<Vec<u64>> {
            let stream = TcpStream::connect(&addr)?;
            stream.set_nodelay(true)?;
            let mut reader = BufReader::new(stream.try_clone()?);
            let mut writer = BufWriter::new(stream);
            let mut latencies = Vec::with_capacity(part.len());
            let mut line = String::new();
            for request in &part {
                let sent = Instant::now();
                serde_json::to_writer(&mut writer, request)?;
                writer.write_all(b"\n")?;
                writer.flush()?;
                line.clear();
                reader.read_line(&mut line)?;
                latencies.push(sent.elapsed().as_micros() as u64);
                let response: GateResponse = serde_json::from_str(&line)?;
                debug_assert_eq!(response.id, request.id);
            }
            Ok(latencies)
        }));
    }
    let mut latencies = Vec::with_capacity(n);
    for handle in handles {
        latencies.extend(handle.join().expect("bench worker")?);
    }
    let elapsed = started.elapsed().as_secs_f64();
    latencies.sort_unstable();
    let pct = |q: f64| latencies[((q * latencies.len() as f64).ceil() as usize).clamp(1, latencies.len()) - 1];
    Ok(BenchReport {
        requests: latencies.len(),
        concurrency,
        p50_us: pct(0.50),
        p90_us: pct(0.90),
        p99_us: pct(0.99),
        throughput_rps: latencies.len() as f64 / elapsed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::HardRules;
    use crate::events::{Label, Split as DataSplit};
    use crate::features::{default_schema, fit_encoder};
    use crate::gbdt::{train, Matrix, TrainConfig};
    use rand::Rng;

    fn toy_service() -> Arc<GateService> {
        // fit a small real model on synthetic bags so encoder + schema are
        // fully wired
        let schema = default_schema();
        let mut rng = derived_rng(4, "serve-fixture");
        let mut bags = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..400 {
            let mut bag = FeatureBag::new();
            let speed: f64 = rng.gen_range(0.5..6.0);
            bag.set_scalar("typing_speed", speed);
            bag.set_scalar("prefix_length", rng.gen_range(0.0..80.0));
            bag.set_categorical("node_kind", if rng.gen_bool(0.5) { "identifier" } else { "comment" });
            bag.set_flag("in_comment", rng.gen_bool(0.1));
            bag.set_scalar("mean_token_logprob", -rng.gen_range(0.1..4.0));
            bag.set_flag("compilable", rng.gen_bool(0.9));
            labels.push(if rng.gen_bool((6.0 - speed) / 6.0) {
                Label::Positive
            } else {
                Label::Negative
            });
            bags.push(bag);
        }
        let refs: Vec<&FeatureBag> = bags.iter().collect();
        let encoder = fit_encoder(&refs, &labels, &schema, 5, 1, DataSplit::Train).unwrap();
        let config = TrainConfig { trees: 10, max_depth: 3, ..TrainConfig::default() };

        let make = |stage: Stage| {
            let rows: Vec<Vec<f64>> = bags
                .iter()
                .map(|b| crate::features::transform(b, &encoder, stage).unwrap())
                .collect();
            let matrix = Matrix::from_rows(rows).unwrap();
            let (booster, _) = train(&matrix, &labels, &vec![1.0; labels.len()], &config).unwrap();
            Ensemble::assemble(booster, encoder.clone(), stage)
        };
        let policy = ThresholdPolicy {
            trigger_threshold: 0.25,
            filter_threshold: 0.3,
            hard_rules: HardRules { block_non_compilable: true },
        };
        Arc::new(GateService::new(make(Stage::Trigger), make(Stage::Filter), policy).unwrap())
    }

    fn roundtrip(addr: std::net::SocketAddr, lines: &[String]) -> Vec<String> {
        let stream = TcpStream::connect(addr).unwrap();
        stream.set_nodelay(true).unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut writer = BufWriter::new(stream);
        let mut out = Vec::new();
        for line in lines {
            writer.write_all(line.as_bytes()).unwrap();
            writer.write_all(b"\n").unwrap();
            writer.flush().unwrap();
            let mut response = String::new();
            reader.read_line(&mut response).unwrap();
            out.push(response.trim().to_string());
        }
        out
    }

    #[test]
    fn trigger_request_decision() {
        let service = toy_service();
        let server = Server::spawn(service.clone(), ("127.0.0.1", 0)).unwrap();
        let mut bag = FeatureBag::new();
        bag.set_scalar("typing_speed", 0.6); // slow typing scores high
        let request = GateRequest {
            v: 1,
            id: "a".to_string(),
            kind: GateKind::Trigger,
            features: bag,
            context: None,
        };
        let line = serde_json::to_string(&request).unwrap();
        let responses = roundtrip(server.addr, &[line]);
        let response: GateResponse = serde_json::from_str(&responses[0]).unwrap();
        assert_eq!(response.id, "a");
        assert_eq!(response.threshold, 0.25);
        assert_eq!(response.pass, response.score >= 0.25);
        server.shutdown();
    }

    #[test]
    fn non_compilable_filter_request_hits_rule_regardless_of_score() {
        let service = toy_service();
        let server = Server::spawn(service.clone(), ("127.0.0.1", 0)).unwrap();
        let mut bag = FeatureBag::new();
        bag.set_scalar("mean_token_logprob", -0.1);
        bag.set_flag("compilable", false);
        let request = GateRequest {
            v: 1,
            id: "x".to_string(),
            kind: GateKind::Filter,
            features: bag,
            context: None,
        };
        let responses = roundtrip(server.addr, &[serde_json::to_string(&request).unwrap()]);
        let response: GateResponse = serde_json::from_str(&responses[0]).unwrap();
        assert!(!response.pass);
        assert_eq!(response.rule_hit.as_deref(), Some("non_compilable"));
        server.shutdown();
    }

    #[test]
    fn garbage_line_keeps_connection_alive() {
        let service = toy_service();
        let server = Server::spawn(service.clone(), ("127.0.0.1", 0)).unwrap();
        let mut bag = FeatureBag::new();
        bag.set_scalar("typing_speed", 3.0);
        let valid = serde_json::to_string(&GateRequest {
            v: 1,
            id: "ok".to_string(),
            kind: GateKind::Trigger,
            features: bag,
            context: None,
        })
        .unwrap();
        let responses = roundtrip(server.addr, &["{{{".to_string(), valid]);
        let err: ErrorResponse = serde_json::from_str(&responses[0]).unwrap();
        assert_eq!(err.error, "bad_request");
        let ok: GateResponse = serde_json::from_str(&responses[1]).unwrap();
        assert_eq!(ok.id, "ok");
        server.shutdown();
    }

    #[test]
    fn unknown_features_are_ignored_and_counted() {
        let service = toy_service();
        let mut bag = FeatureBag::new();
        bag.set_scalar("typing_speed", 3.0);
        bag.set_scalar("totally_new_feature", 1.0);
        let request = GateRequest {
            v: 1,
            id: "n".to_string(),
            kind: GateKind::Trigger,
            features: bag.clone(),
            context: None,
        };
        let before = service.unknown_feature_warnings();
        let response = service.decide(&request).unwrap();
        assert_eq!(service.unknown_feature_warnings(), before + 1);

        // the unknown name must not change the decision
        let mut known_only = bag.clone();
        known_only.scalars.remove("totally_new_feature");
        let clean = service
            .decide(&GateRequest {
                v: 1,
                id: "n2".to_string(),
                kind: GateKind::Trigger,
                features: known_only,
                context: None,
            })
            .unwrap();
        assert_eq!(response.score.to_bits(), clean.score.to_bits());
    }

    #[test]
    fn decision_parity_with_library_path() {
        let service = toy_service();
        let server = Server::spawn(service.clone(), ("127.0.0.1", 0)).unwrap();
        let corpus = bench_corpus(&service, 300, 11);
        let lines: Vec<String> = corpus
            .iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .collect();
        let responses = roundtrip(server.addr, &lines);
        for (request, response) in corpus.iter().zip(&responses) {
            let served: GateResponse = serde_json::from_str(response).unwrap();
            let local = service.decide(request).unwrap();
            assert_eq!(served.id, request.id, "order preserved per connection");
            assert_eq!(served.pass, local.pass);
            assert_eq!(served.score.to_bits(), local.score.to_bits(), "bit-exact parity");
        }
        server.shutdown();
    }

    #[test]
    fn bench_empty_and_deterministic_corpus() {
        let service = toy_service();
        let server = Server::spawn(service.clone(), ("127.0.0.1", 0)).unwrap();
        let report = bench(&server.addr.to_string(), 0, 4, 1, &service).unwrap();
        assert_eq!(report.requests, 0);
        assert_eq!(report.p99_us, 0);
        let a = bench_corpus(&service, 50, 77);
        let b = bench_corpus(&service, 50, 77);
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb, "same seed, same corpus");
        server.shutdown();
    }

    #[test]
    fn version_mismatch_is_bad_request() {
        let service = toy_service();
        let request = GateRequest {
            v: 99,
            id: "v".to_string(),
            kind: GateKind::Trigger,
            features: FeatureBag::new(),
            context: None,
        };
        assert!(matches!(service.decide(&request), Err(Error::BadRequest(_))));
    }
}
