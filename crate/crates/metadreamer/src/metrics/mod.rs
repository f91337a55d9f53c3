//! The evaluation kit: a disentanglement probe, four latent and
//! imagination quality scores, and the plot emitters.

mod plots;
mod probe;
mod scores;

pub use plots::{
    emit_learning_curve, emit_profile_plot, emit_traversal_heatmaps, traversal_plane,
};
pub use probe::{
    disentanglement_score, probe_difference_vectors, score_difference_vectors, ProbeConfig,
};
pub use scores::{
    intra_cluster_variance, reconstruction_error, sci_error, sfi_error, speculate_factors,
    speculate_highway_rear_response, speculate_nav2d_goal,
};

use crate::error::{Error, Result};

/// A value with its paired spread. `spread` is a standard deviation for
/// the disentanglement score and a variance for the other metrics,
/// matching how each is conventionally reported.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Measured {
    pub value: f64,
    pub spread: f64,
}

impl Measured {
    pub fn new(value: f64, spread: f64) -> Self {
        Measured { value, spread }
    }
}

/// One evaluation round's scores. Metrics that do not apply to an env
/// (cart-pole has no factor speculator) stay `None`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub env: String,
    /// Classifier accuracy in percent, 0 to 100.
    pub disentanglement: Measured,
    pub intra_cluster: Measured,
    pub reconstruction: Measured,
    pub sfi: Option<Measured>,
    pub sci: Option<Measured>,
    /// Mean evaluation return under the post-adaptation policy.
    pub mean_return: f64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, m: &Measured, lo: f64, hi: f64| -> Result<()> {
            if !m.value.is_finite() || m.value < lo || m.value > hi {
                return Err(Error::Numeric(format!(
                    "{name} = {} outside [{lo}, {hi}]",
                    m.value
                )));
            }
            if !m.spread.is_finite() || m.spread < 0.0 {
                return Err(Error::Numeric(format!("{name} spread = {}", m.spread)));
            }
            Ok(())
        };
        check("disentanglement", &self.disentanglement, 0.0, 100.0)?;
        check("intra_cluster", &self.intra_cluster, 0.0, f64::INFINITY)?;
        check("reconstruction", &self.reconstruction, 0.0, f64::INFINITY)?;
        if let Some(m) = &self.sfi {
            check("sfi", m, 0.0, f64::INFINITY)?;
        }
        if let Some(m) = &self.sci {
            check("sci", m, 0.0, f64::INFINITY)?;
        }
        if !self.mean_return.is_finite() {
            return Err(Error::NonFinite("mean_return".into()));
        }
        Ok(())
    }

    /// Two-line CSV: header plus one row. Optional metrics render empty.
    pub fn to_csv(&self) -> String {
        let opt = |m: &Option<Measured>, f: fn(&Measured) -> f64| {
            m.as_ref().map(|m| f(m).to_string()).unwrap_or_default()
        };
        let mut out = String::from(
            "env,disentanglement,disentanglement_std,intra_cluster,intra_cluster_var,\
             reconstruction,reconstruction_var,sfi,sfi_var,sci,sci_var,mean_return\n",
        );
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            self.env,
            self.disentanglement.value,
            self.disentanglement.spread,
            self.intra_cluster.value,
            self.intra_cluster.spread,
            self.reconstruction.value,
            self.reconstruction.spread,
            opt(&self.sfi, |m| m.value),
            opt(&self.sfi, |m| m.spread),
            opt(&self.sci, |m| m.value),
            opt(&self.sci, |m| m.spread),
            self.mean_return,
        ));
        out
    }

    /// Human-readable block, one metric per line.
    pub fn summary(&self) -> String {
        let mut out = format!("evaluation summary for {}\n", self.env);
        out.push_str(&format!(
            "  disentanglement score : {:.2}% +/- {:.2}\n",
            self.disentanglement.value, self.disentanglement.spread
        ));
        out.push_str(&format!(
            "  intra-cluster variance: {:.4} +/- {:.4}\n",
            self.intra_cluster.value, self.intra_cluster.spread
        ));
        out.push_str(&format!(
            "  reconstruction error  : {:.4} +/- {:.4}\n",
            self.reconstruction.value, self.reconstruction.spread
        ));
        match &self.sfi {
            Some(m) => out.push_str(&format!(
                "  speculated factor err : {:.4} +/- {:.4}\n",
                m.value, m.spread
            )),
            None => out.push_str("  speculated factor err : n/a\n"),
        }
        match &self.sci {
            Some(m) => out.push_str(&format!(
                "  speculated context err: {:.4} +/- {:.4}\n",
                m.value, m.spread
            )),
            None => out.push_str("  speculated context err: n/a\n"),
        }
        out.push_str(&format!("  mean return           : {:.3}\n", self.mean_return));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricReport {
        MetricReport {
            env: "nav2d".into(),
            disentanglement: Measured::new(92.5, 1.5),
            intra_cluster: Measured::new(0.2, 0.01),
            reconstruction: Measured::new(0.1, 0.002),
            sfi: Some(Measured::new(0.15, 0.01)),
            sci: None,
            mean_return: -42.0,
        }
    }

    #[test]
    fn csv_has_matching_header_and_row_widths() {
        let csv = report().to_csv();
        let mut lines = csv.lines();
        let header = lines.next().unwrap().split(',').count();
        let row = lines.next().unwrap().split(',').count();
        assert_eq!(header, row);
        assert_eq!(header, 12);
        assert!(csv.contains(",,"), "missing optional metric renders empty");
    }

    #[test]
    fn validation_rejects_out_of_range_scores() {
        let mut bad = report();
        bad.disentanglement.value = 120.0;
        assert!(bad.validate().is_err());
        let mut nan = report();
        nan.mean_return = f64::NAN;
        assert!(nan.validate().is_err());
        assert!(report().validate().is_ok());
    }
}
