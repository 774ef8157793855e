//! Uplink model: payload size, block-fading SNR and Shannon-rate latency.
//!
//! The received SNR of a round is `p · h · ρ^(-α) / N` with `h ~ Exp(1)`
//! (Rayleigh power fading), drawn once per round and held for the whole
//! transmission.

use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fading {
    Rayleigh,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelParams {
    #[serde(rename = "W_hz")]
    pub bandwidth_hz: f64,
    pub p_dbm: f64,
    #[serde(rename = "N_dbm")]
    pub noise_dbm: f64,
    pub alpha: f64,
    pub rho_m: f64,
    pub b_prob: u32,
    pub fading: Fading,
    /// Vocabulary size used for payload sizing; defaults to the model's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload_vocab_size: Option<usize>,
    /// Extra bits per transmitted round for sequence synchronization.
    pub sync_bits: u64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            bandwidth_hz: 1e6,
            p_dbm: 23.0,
            noise_dbm: -104.0,
            alpha: 4.0,
            rho_m: 2500.0,
            b_prob: 16,
            fading: Fading::Rayleigh,
            payload_vocab_size: None,
            sync_bits: 0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.bandwidth_hz) {
            return Err(Error::InvalidConfig(format!("bandwidth {} must be > 0", self.bandwidth_hz)));
        }
        if !positive(self.alpha) || !positive(self.rho_m) {
            return Err(Error::InvalidConfig("alpha and rho_m must be > 0".into()));
        }
        if !self.p_dbm.is_finite() || !self.noise_dbm.is_finite() {
            return Err(Error::InvalidConfig("powers must be finite".into()));
        }
        if !matches!(self.b_prob, 16 | 32) {
            return Err(Error::InvalidConfig(format!("b_prob {} must be 16 or 32", self.b_prob)));
        }
        if self.payload_vocab_size == Some(0) {
            return Err(Error::InvalidConfig("payload_vocab_size must be positive".into()));
        }
        Ok(())
    }

    /// Mean received SNR, `p · ρ^(-α) / N` in linear units.
    pub fn mean_snr(&self) -> f64 {
        dbm_to_watts(self.p_dbm) * self.rho_m.powf(-self.alpha) / dbm_to_watts(self.noise_dbm)
    }

    pub fn mean_snr_db(&self) -> f64 {
        10.0 * self.mean_snr().log10()
    }

    /// Uplink bits for one round: the full draft distribution plus sync bits.
    pub fn round_payload_bits(&self, model_vocab_size: usize) -> u64 {
        let vocab = self.payload_vocab_size.unwrap_or(model_vocab_size);
        payload_bits(vocab, self.b_prob) + self.sync_bits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelDraw {
    pub snr_linear: f64,
    pub tau_s: f64,
}

impl ChannelDraw {
    pub fn sample(params: &ChannelParams, bits: u64, rng: &mut RandomStream) -> Self {
        let snr_linear = sample_snr(params, rng);
        Self { snr_linear, tau_s: uplink_latency(bits, params, snr_linear) }
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// `B = |V| · b_prob`.
pub fn payload_bits(vocab_size: usize, b_prob: u32) -> u64 {
    vocab_size as u64 * b_prob as u64
}

/// Draws one block-fading SNR. With fading disabled no draw is consumed.
pub fn sample_snr(params: &ChannelParams, rng: &mut RandomStream) -> f64 {
    let gain = match params.fading {
        Fading::Rayleigh => Exp1.sample(rng),
        Fading::None => 1.0,
    };
    params.mean_snr() * gain
}

/// `τ = B / (W · log2(1 + SNR))`; infinite when the SNR is zero.
pub fn uplink_latency(bits: u64, params: &ChannelParams, snr_linear: f64) -> f64 {
    let rate = params.bandwidth_hz * snr_linear.ln_1p() / std::f64::consts::LN_2;
    if rate > 0.0 {
        bits as f64 / rate
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mhz() -> ChannelParams {
        ChannelParams::default()
    }

    #[test]
    fn payload_sizes() {
        assert_eq!(payload_bits(32_000, 16), 512_000);
        assert_eq!(payload_bits(32_000, 32), 1_024_000);
        assert_eq!(payload_bits(2, 16), 32);
        let p = ChannelParams { payload_vocab_size: Some(32_000), sync_bits: 8, ..mhz() };
        assert_eq!(p.round_payload_bits(256), 512_008);
        assert_eq!(mhz().round_payload_bits(256), 4096);
    }

    #[test]
    fn latency_hand_cases() {
        let p = mhz();
        assert!((uplink_latency(512_000, &p, 15.0) - 0.128).abs() < 1e-12);
        assert!((uplink_latency(512_000, &p, 1.0) - 0.512).abs() < 1e-12);
        assert_eq!(uplink_latency(512_000, &p, 0.0), f64::INFINITY);
    }

    #[test]
    fn no_fading_gives_mean() {
        let p = ChannelParams { fading: Fading::None, ..mhz() };
        let mut rng = RandomStream::new(1, "channel");
        let a = ChannelDraw::sample(&p, 512_000, &mut rng);
        let b = ChannelDraw::sample(&p, 512_000, &mut rng);
        assert_eq!(a.snr_linear, p.mean_snr());
        assert_eq!(a, b);
    }

    #[test]
    fn default_mean_snr() {
        // 10^-0.7 W · 2500^-4 / 10^-13.4 W, about -8.9 dB
        let expect = 10f64.powf(-0.7) * 2500f64.powi(-4) / 10f64.powf(-13.4);
        assert!((mhz().mean_snr() / expect - 1.0).abs() < 1e-12);
        assert!((mhz().mean_snr_db() + 8.9176).abs() < 1e-3, "{}", mhz().mean_snr_db());
    }

    #[test]
    fn rayleigh_mean() {
        let p = mhz();
        let mut rng = RandomStream::new(2, "channel");
        let n = 1_000_000;
        let mean = (0..n).map(|_| sample_snr(&p, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean / p.mean_snr() - 1.0).abs() < 0.01, "ratio {}", mean / p.mean_snr());
    }

    #[test]
    fn distance_power_law() {
        let near = mhz();
        let far = ChannelParams { rho_m: 5000.0, ..mhz() };
        assert!((near.mean_snr() / far.mean_snr() - 16.0).abs() < 1e-9);
    }

    #[test]
    fn validation() {
        assert!(mhz().validate().is_ok());
        assert!(ChannelParams { b_prob: 8, ..mhz() }.validate().is_err());
        assert!(ChannelParams { bandwidth_hz: 0.0, ..mhz() }.validate().is_err());
        assert!(ChannelParams { rho_m: -1.0, ..mhz() }.validate().is_err());
        assert!(ChannelParams { alpha: 0.0, ..mhz() }.validate().is_err());
    }

    #[test]
    fn config_keys() {
        let json = serde_json::to_value(mhz()).unwrap();
        for key in ["W_hz", "p_dbm", "N_dbm", "alpha", "rho_m", "b_prob", "fading"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json["fading"], "rayleigh");
        let err = serde_json::from_str::<ChannelParams>(r#"{"W_hz": 1e6, "bogus": 1}"#);
        assert!(err.is_err());
    }

    proptest! {
        #[test]
        fn dbm_roundtrip(dbm in -150.0f64..60.0) {
            let back = watts_to_dbm(dbm_to_watts(dbm));
            prop_assert!((back - dbm).abs() <= 1e-12 * dbm.abs().max(1.0));
            let w = dbm_to_watts(dbm);
            prop_assert!((dbm_to_watts(watts_to_dbm(w)) / w - 1.0).abs() < 1e-12);
        }

        #[test]
        fn latency_monotone(bits in 1u64..10_000_000, snr in 1e-6f64..1e4, f in 1.0001f64..10.0) {
            let p = ChannelParams::default();
            prop_assert!(uplink_latency(bits, &p, snr * f) < uplink_latency(bits, &p, snr));
            prop_assert!(uplink_latency(bits + 1, &p, snr) > uplink_latency(bits, &p, snr));
        }
    }
}
