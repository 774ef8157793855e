use serde::{Deserialize, Serialize};
use uhlm_core::engine::{EngineConfig, Method};
use uhlm_core::metrics::RunSummary;

/// One row of the summary and sweep CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub seed: u64,
    pub snr_mean_db: f64,
    pub u_th: Option<f64>,
    pub rand_skip_prob: Option<f64>,
    pub tokens: usize,
    pub total_time_s: f64,
    pub throughput: f64,
    #[serde(rename = "TR")]
    pub tr: f64,
    #[serde(rename = "TSR")]
    pub tsr: Option<f64>,
    pub mean_beta: Option<f64>,
    pub realized_risk: Option<f64>,
    pub fidelity_tv: Option<f64>,
    pub status: String,
    pub config_hash: String,
}

impl SummaryRow {
    pub fn new(cfg: &EngineConfig, summary: &RunSummary, status: impl Into<String>, config_hash: &str) -> Self {
        Self {
            tokens: summary.tokens_generated,
            total_time_s: summary.total_time_s,
            throughput: summary.throughput_tok_per_s,
            tr: summary.tr,
            tsr: summary.tsr,
            mean_beta: summary.mean_beta,
            realized_risk: summary.realized_risk,
            fidelity_tv: summary.fidelity_tv,
            status: status.into(),
            ..Self::failed(cfg, "", config_hash)
        }
    }

    /// A row for a run that produced no summary.
    pub fn failed(cfg: &EngineConfig, status: &str, config_hash: &str) -> Self {
        Self {
            method: cfg.method,
            seed: cfg.seed,
            snr_mean_db: cfg.channel.mean_snr_db(),
            u_th: if cfg.method == Method::Uhlm { cfg.u_th } else { None },
            rand_skip_prob: if cfg.method == Method::RandHlm { cfg.rand_skip_prob } else { None },
            tokens: 0,
            total_time_s: 0.0,
            throughput: 0.0,
            tr: 0.0,
            tsr: None,
            mean_beta: None,
            realized_risk: None,
            fidelity_tv: None,
            status: status.into(),
            config_hash: config_hash.into(),
        }
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

pub fn write_rows<W: std::io::Write>(out: W, rows: &[SummaryRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: std::io::Read>(input: R) -> csv::Result<Vec<SummaryRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_roundtrip() {
        let cfg = EngineConfig { method: Method::Uhlm, u_th: Some(0.4), ..Default::default() };
        let mut row = SummaryRow::failed(&cfg, "ok", "abc");
        row.tsr = Some(0.5);
        let mut buf = Vec::new();
        write_rows(&mut buf, &[row.clone()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "method,seed,snr_mean_db,u_th,rand_skip_prob,tokens,total_time_s,throughput,TR,TSR,mean_beta,realized_risk,fidelity_tv,status,config_hash"
        );
        assert!(text.lines().nth(1).unwrap().starts_with("UHLM,0,"));
        assert_eq!(read_rows(buf.as_slice()).unwrap(), vec![row]);
    }
}
