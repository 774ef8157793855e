//! Round loop for the five inference methods.
//!
//! Every round draws from its own labelled streams (`e{episode}/draft/{t}`,
//! `e{episode}/verify/{t}`, ..., and `channel/{n}` for the `n`-th round of the
//! run), so two methods that reach the same sequence in the same round make
//! identical draws. That is what lets U-HLM at a
//! saturated threshold reproduce SLM or HLM trace-for-trace.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendPair, ModelBackend};
use crate::calibration::CalibrationSample;
use crate::channel::{ChannelDraw, ChannelParams};
use crate::error::{BackendError, Error, Result};
use crate::math::{sample_categorical, softmax, total_variation, TokenId, TokenSequence, VocabDistribution};
use crate::metrics::{summarize, RunSummary};
use crate::stream::RandomStream;
use crate::uncertainty::{measure_uncertainty, skip_decision, PerturbationConfig, UncertaintyEstimate};
use crate::verify::{gated_response_law, verify, Decision, VerificationOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "LLM")]
    Llm,
    #[serde(rename = "SLM")]
    Slm,
    #[serde(rename = "HLM")]
    Hlm,
    #[serde(rename = "RandHLM")]
    RandHlm,
    #[serde(rename = "UHLM")]
    Uhlm,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Llm, Method::Slm, Method::Hlm, Method::RandHlm, Method::Uhlm];

    pub fn name(self) -> &'static str {
        match self {
            Method::Llm => "LLM",
            Method::Slm => "SLM",
            Method::Hlm => "HLM",
            Method::RandHlm => "RandHLM",
            Method::Uhlm => "UHLM",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "llm" => Ok(Method::Llm),
            "slm" => Ok(Method::Slm),
            "hlm" => Ok(Method::Hlm),
            "randhlm" => Ok(Method::RandHlm),
            "uhlm" => Ok(Method::Uhlm),
            _ => Err(Error::InvalidConfig(format!("unknown method {s:?}"))),
        }
    }
}

/// Compute latencies of the two models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    pub tau_slm_s: f64,
    pub tau_llm_s: f64,
    /// Extra SLM time for the perturbation passes, as a fraction of `tau_slm_s`.
    pub perturbation_cost: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self { tau_slm_s: 0.0246, tau_llm_s: 0.1046, perturbation_cost: 0.0 }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_slm_s", self.tau_slm_s), ("tau_llm_s", self.tau_llm_s), ("perturbation_cost", self.perturbation_cost)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Device-side time of a drafted round.
    pub fn draft_time(&self) -> f64 {
        self.tau_slm_s * (1.0 + self.perturbation_cost)
    }

    /// Round time for gate value `delta` and uplink latency `tau`.
    pub fn round_time(&self, delta: u8, tau: f64) -> f64 {
        if delta == 0 {
            self.draft_time()
        } else {
            self.draft_time() + tau + self.tau_llm_s
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub method: Method,
    pub seed: u64,
    /// Maximum response length of one generation.
    pub r_max: usize,
    /// Total round budget, spread over as many generations as needed.
    /// Defaults to a single generation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_th: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rand_skip_prob: Option<f64>,
    pub oracle_mode: bool,
    pub channel: ChannelParams,
    pub latency: LatencyModel,
    pub perturbation: PerturbationConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            method: Method::Uhlm,
            seed: 0,
            r_max: 64,
            rounds: None,
            u_th: None,
            rand_skip_prob: None,
            oracle_mode: false,
            channel: ChannelParams::default(),
            latency: LatencyModel::default(),
            perturbation: PerturbationConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_max == 0 {
            return Err(Error::InvalidConfig("r_max must be >= 1".into()));
        }
        if self.rounds == Some(0) {
            return Err(Error::InvalidConfig("rounds must be >= 1".into()));
        }
        match self.method {
            Method::Uhlm => match self.u_th {
                Some(u) if !u.is_nan() => {}
                _ => return Err(Error::InvalidConfig("UHLM requires u_th (or a calibration file)".into())),
            },
            Method::RandHlm => match self.rand_skip_prob {
                Some(q) if (0.0..=1.0).contains(&q) => {}
                Some(q) => return Err(Error::InvalidConfig(format!("rand_skip_prob {q} outside [0, 1]"))),
                None => return Err(Error::InvalidConfig("RandHLM requires rand_skip_prob".into())),
            },
            _ => {}
        }
        self.channel.validate()?;
        self.latency.validate()?;
        self.perturbation.validate()
    }

    pub fn total_rounds(&self) -> usize {
        self.rounds.unwrap_or(self.r_max)
    }
}

/// A verification outcome as written to traces (the residual is omitted).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub decision: Decision,
    pub response: TokenId,
    pub beta: f64,
}

impl From<&VerificationOutcome> for OutcomeRecord {
    fn from(o: &VerificationOutcome) -> Self {
        Self { decision: o.decision, response: o.response, beta: o.beta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub episode: usize,
    pub t: usize,
    /// `None` for the LLM-only method, which drafts nothing.
    pub draft: Option<TokenId>,
    pub draft_prob: Option<f64>,
    /// `y_d`, when the target distribution was evaluated.
    pub target_prob: Option<f64>,
    pub u: Option<f64>,
    pub delta: u8,
    pub outcome: Option<OutcomeRecord>,
    pub counterfactual_outcome: Option<OutcomeRecord>,
    pub snr_linear: Option<f64>,
    pub tau_uplink_s: f64,
    pub round_time_s: f64,
    pub response: TokenId,
    /// Total-variation distance between this round's response law and `y`.
    pub tv: Option<f64>,
}

impl RoundRecord {
    /// Actual or counterfactual verification, whichever exists.
    pub fn verification(&self) -> Option<&OutcomeRecord> {
        self.outcome.as_ref().or(self.counterfactual_outcome.as_ref())
    }

    pub fn beta(&self) -> Option<f64> {
        self.verification().map(|o| o.beta)
    }

    /// The round as a calibration point, when it was verified.
    pub fn calibration_sample(&self) -> Option<CalibrationSample> {
        Some(CalibrationSample { u: self.u?, beta: self.beta()?, x_d: self.draft_prob?, y_d: self.target_prob? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub summary: RunSummary,
}

/// A run that stopped on an error, with the rounds completed before it.
#[derive(Debug)]
pub struct RunFailure {
    pub records: Vec<RoundRecord>,
    pub error: Error,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run aborted after {} rounds: {}", self.records.len(), self.error)
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Position of a round: episode, index within it, and index within the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundIndex {
    pub episode: usize,
    pub t: usize,
    pub n: usize,
}

struct RoundStreams {
    seed: u64,
    at: RoundIndex,
}

impl RoundStreams {
    fn get(&self, name: &str) -> RandomStream {
        RandomStream::new(self.seed, format!("e{}/{name}/{}", self.at.episode, self.at.t))
    }

    /// Fading is keyed by the run-wide round index, so every method sees the
    /// same channel sequence however its episodes happen to split.
    fn channel(&self) -> RandomStream {
        RandomStream::new(self.seed, format!("channel/{}", self.at.n))
    }
}

pub struct Engine<'a> {
    cfg: &'a EngineConfig,
    pair: &'a BackendPair,
    payload_bits: u64,
}

impl<'a> Engine<'a> {
    pub fn new(cfg: &'a EngineConfig, pair: &'a BackendPair) -> Result<Self> {
        cfg.validate()?;
        let (vs, vl) = (pair.slm.vocab(), pair.llm.vocab());
        if vs != vl {
            return Err(Error::InvalidConfig(format!(
                "SLM vocabulary {vs:?} differs from LLM vocabulary {vl:?}"
            )));
        }
        let payload_bits = cfg.channel.round_payload_bits(vs.size());
        Ok(Self { cfg, pair, payload_bits })
    }

    fn distribution(&self, backend: &dyn ModelBackend, sequence: &[TokenId]) -> Result<(Vec<f64>, VocabDistribution)> {
        let z = backend.next_logits(sequence)?.into_inner();
        let expected = self.pair.vocab().size();
        if z.len() != expected {
            return Err(BackendError::LogitLengthMismatch { expected, got: z.len() }.into());
        }
        let p = softmax(&z)?;
        Ok((z, p))
    }

    /// Probability that each token would be skipped had it been drafted.
    fn skip_profile(&self, est: &UncertaintyEstimate, size: usize) -> Vec<f64> {
        let gate = |u: f64| if self.gate_skips(u) { 1.0 } else { 0.0 };
        match self.cfg.method {
            Method::Slm => vec![1.0; size],
            Method::Hlm | Method::Llm => vec![0.0; size],
            Method::RandHlm => vec![self.cfg.rand_skip_prob.unwrap_or(0.0); size],
            Method::Uhlm => {
                // tokens never sampled under perturbation have u = 1
                let mut s = vec![gate(1.0); size];
                for tok in &est.samples {
                    s[tok.index()] = gate(est.uncertainty_for(*tok));
                }
                s
            }
        }
    }

    fn gate_skips(&self, u: f64) -> bool {
        skip_decision(u, self.cfg.u_th.unwrap_or(f64::NEG_INFINITY)) == 0
    }

    pub fn run_round(&self, at: RoundIndex, sequence: &[TokenId]) -> Result<RoundRecord> {
        let streams = RoundStreams { seed: self.cfg.seed, at };
        let RoundIndex { episode, t, .. } = at;
        let lat = &self.cfg.latency;
        if self.cfg.method == Method::Llm {
            let (_, y) = self.distribution(self.pair.llm.as_ref(), sequence)?;
            let response = sample_categorical(&y, &mut streams.get("target"));
            return Ok(RoundRecord {
                episode,
                t,
                draft: None,
                draft_prob: None,
                target_prob: None,
                u: None,
                delta: 1,
                outcome: None,
                counterfactual_outcome: None,
                snr_linear: None,
                tau_uplink_s: 0.0,
                round_time_s: lat.tau_llm_s,
                response,
                tv: Some(0.0),
            });
        }

        let (z, x) = self.distribution(self.pair.slm.as_ref(), sequence)?;
        let draft = sample_categorical(&x, &mut streams.get("draft"));
        let est = measure_uncertainty(&z, draft, &self.cfg.perturbation, &streams.get("perturbation"))?;
        let delta = match self.cfg.method {
            Method::Slm => 0,
            Method::Hlm | Method::Llm => 1,
            Method::Uhlm => skip_decision(est.u, self.cfg.u_th.unwrap_or(f64::NEG_INFINITY)),
            Method::RandHlm => {
                let q = self.cfg.rand_skip_prob.unwrap_or(0.0);
                u8::from(streams.get("randskip").uniform() >= q)
            }
        };

        // the gate is settled; y may now be evaluated for metrics only
        let need_y = delta == 1 || self.cfg.oracle_mode;
        let y = if need_y { Some(self.distribution(self.pair.llm.as_ref(), sequence)?.1) } else { None };
        let verified = match &y {
            Some(y) => Some(verify(&x, y, draft, &mut streams.get("verify"))?),
            None => None,
        };

        let (outcome, counterfactual, response, snr, tau) = if delta == 1 {
            let draw = ChannelDraw::sample(&self.cfg.channel, self.payload_bits, &mut streams.channel());
            let o = verified.as_ref().expect("verified when transmitting");
            (Some(o.into()), None, o.response, Some(draw.snr_linear), draw.tau_s)
        } else {
            (None, verified.as_ref().map(OutcomeRecord::from), draft, None, 0.0)
        };
        let tv = y.as_ref().map(|y| {
            let law = gated_response_law(&x, y, &self.skip_profile(&est, x.len()));
            total_variation(&law, y)
        });

        Ok(RoundRecord {
            episode,
            t,
            draft: Some(draft),
            draft_prob: Some(x.prob(draft)),
            target_prob: y.as_ref().map(|y| y.prob(draft)),
            u: Some(est.u),
            delta,
            outcome,
            counterfactual_outcome: counterfactual,
            snr_linear: snr,
            tau_uplink_s: tau,
            round_time_s: lat.round_time(delta, tau),
            response,
            tv,
        })
    }

    /// One generation from the episode's prompt until EOS or `limit` rounds.
    /// Completed rounds are pushed even when a later round fails.
    pub fn run_generation(&self, episode: usize, limit: usize, records: &mut Vec<RoundRecord>) -> Result<()> {
        let eos = self.pair.vocab().eos_id();
        let mut sequence: TokenSequence = self.pair.prompts.prompt(self.cfg.seed, episode);
        for t in 0..limit.min(self.cfg.r_max) {
            let at = RoundIndex { episode, t, n: records.len() };
            let rec = self.run_round(at, &sequence)?;
            let response = rec.response;
            records.push(rec);
            sequence.push(response);
            if response == eos {
                break;
            }
        }
        Ok(())
    }

    /// Runs one generation, or as many as the `rounds` budget needs.
    pub fn run(&self) -> Result<RunOutput, RunFailure> {
        let budget = self.cfg.total_rounds();
        let mut records = Vec::with_capacity(budget);
        let mut episode = 0;
        while records.len() < budget && (episode == 0 || self.cfg.rounds.is_some()) {
            let left = budget - records.len();
            if let Err(error) = self.run_generation(episode, left, &mut records) {
                log::warn!("episode {episode} failed after {} rounds: {error}", records.len());
                return Err(RunFailure { records, error });
            }
            episode += 1;
        }
        let summary = summarize(self.cfg, &records);
        Ok(RunOutput { records, summary })
    }
}

/// Validates, runs every round in the budget, and summarizes.
pub fn run_generation(cfg: &EngineConfig, pair: &BackendPair) -> Result<RunOutput, RunFailure> {
    let engine = Engine::new(cfg, pair).map_err(|error| RunFailure { records: Vec::new(), error })?;
    engine.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert_eq!("rand-hlm".parse::<Method>().unwrap(), Method::RandHlm);
        assert_eq!("u_hlm".parse::<Method>().unwrap(), Method::Uhlm);
        assert!("gpt".parse::<Method>().is_err());
    }

    #[test]
    fn latency_branches() {
        let lat = LatencyModel::default();
        assert_eq!(lat.round_time(0, 123.0), 0.0246);
        assert!((lat.round_time(1, 0.128) - 0.2572).abs() < 1e-12);
        // T(t) is the reciprocal of the round time
        assert!((1.0 / lat.round_time(0, 0.0) - 40.650406504).abs() < 1e-6);
        assert!((1.0 / lat.round_time(1, 0.128) - 3.888024883).abs() < 1e-6);
        let costly = LatencyModel { perturbation_cost: 0.5, ..lat };
        assert!((costly.round_time(0, 0.0) - 0.0369).abs() < 1e-12);
        assert!(LatencyModel { tau_llm_s: -1.0, ..lat }.validate().is_err());
    }

    #[test]
    fn config_validation() {
        let ok = EngineConfig { u_th: Some(0.4), ..Default::default() };
        assert!(ok.validate().is_ok());
        assert!(EngineConfig::default().validate().is_err(), "UHLM without u_th");
        assert!(EngineConfig { method: Method::RandHlm, ..Default::default() }.validate().is_err());
        let bad_q = EngineConfig { method: Method::RandHlm, rand_skip_prob: Some(1.5), ..Default::default() };
        assert!(bad_q.validate().is_err());
        assert!(EngineConfig { r_max: 0, ..ok.clone() }.validate().is_err());
        assert!(EngineConfig { rounds: Some(0), ..ok.clone() }.validate().is_err());
        assert_eq!(EngineConfig { rounds: Some(7), ..ok.clone() }.total_rounds(), 7);
        assert_eq!(ok.total_rounds(), 64);
        let negative = EngineConfig { u_th: Some(-0.5), ..ok };
        assert!(negative.validate().is_ok());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<EngineConfig>(r#"{"method": "HLM", "colour": 1}"#);
        assert!(err.is_err());
        let cfg: EngineConfig = serde_json::from_str(r#"{"method": "RandHLM", "rand_skip_prob": 0.2}"#).unwrap();
        assert_eq!(cfg.method, Method::RandHlm);
        assert_eq!(cfg.latency, LatencyModel::default());
    }
}
