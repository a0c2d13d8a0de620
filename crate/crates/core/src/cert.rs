//! Machine-checkable certificates for inequalities evaluated on sample grids.
//!
//! A certificate records, for one inequality `LHS <= RHS` checked at many
//! sample points, the worst margin `RHS - LHS`, the witness point attaining
//! it, and a pass flag. Passing tolerates margins down to
//! `-MARGIN_REL_TOL * scale` where `scale = max(1, |LHS|, |RHS|)` at each
//! point, so exactly-saturated bounds survive integrator rounding.

/// Relative slack granted to each margin before a certificate fails.
pub const MARGIN_REL_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct Witness {
    pub time: f64,
    pub second_time: Option<f64>,
    pub point: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug)]
pub struct Certificate {
    /// Stable identifier of the certified inequality (e.g. "Cor-2.4").
    pub id: String,
    pub grid_size: usize,
    /// Minimum over the grid of `RHS - LHS`.
    pub worst_margin: f64,
    /// Minimum over the grid of `(RHS - LHS) / max(1, |LHS|, |RHS|)`.
    pub worst_margin_normalized: f64,
    pub witness: Option<Witness>,
    pub pass: bool,
    pub horizon: f64,
    /// Set when the system was built past the smallness gate.
    pub outside_theorem: bool,
    /// Measured constants the bound was instantiated with.
    pub notes: Vec<String>,
}

pub struct CertificateBuilder {
    id: String,
    horizon: f64,
    outside_theorem: bool,
    count: usize,
    worst_raw: f64,
    worst_norm: f64,
    witness: Option<Witness>,
    notes: Vec<String>,
}

impl CertificateBuilder {
    pub fn new(id: impl Into<String>, horizon: f64) -> Self {
        Self {
            id: id.into(),
            horizon,
            outside_theorem: false,
            count: 0,
            worst_raw: f64::INFINITY,
            worst_norm: f64::INFINITY,
            witness: None,
            notes: Vec::new(),
        }
    }

    pub fn outside_theorem(mut self, flag: bool) -> Self {
        self.outside_theorem = flag;
        self
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    /// Record one sample of the inequality `lhs <= rhs`.
    pub fn check(&mut self, lhs: f64, rhs: f64, witness: Witness) {
        self.count += 1;
        let margin = rhs - lhs;
        let scale = 1.0f64.max(lhs.abs()).max(rhs.abs());
        let norm = margin / scale;
        if norm < self.worst_norm {
            self.worst_norm = norm;
            self.worst_raw = margin;
            self.witness = Some(witness);
        }
    }

    pub fn finish(self) -> Certificate {
        let pass = self.count == 0 || self.worst_norm >= -MARGIN_REL_TOL;
        Certificate {
            id: self.id,
            grid_size: self.count,
            worst_margin: if self.count == 0 { 0.0 } else { self.worst_raw },
            worst_margin_normalized: if self.count == 0 { 0.0 } else { self.worst_norm },
            witness: self.witness,
            pass,
            horizon: self.horizon,
            outside_theorem: self.outside_theorem,
            notes: self.notes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(lhs: f64, rhs: f64) -> Witness {
        Witness { time: 1.0, second_time: None, point: vec![0.0], lhs, rhs }
    }

    #[test]
    fn saturated_bound_passes() {
        let mut b = CertificateBuilder::new("test", 5.0);
        b.check(1.0, 1.0 - 1e-12, w(1.0, 1.0 - 1e-12));
        let c = b.finish();
        assert!(c.pass);
        assert!(c.worst_margin < 0.0);
    }

    #[test]
    fn violation_names_witness() {
        let mut b = CertificateBuilder::new("test", 5.0);
        b.check(0.5, 1.0, w(0.5, 1.0));
        b.check(2.0, 1.0, w(2.0, 1.0));
        let c = b.finish();
        assert!(!c.pass);
        assert_eq!(c.witness.unwrap().lhs, 2.0);
        assert_eq!(c.grid_size, 2);
    }

    #[test]
    fn empty_grid_passes_vacuously() {
        let c = CertificateBuilder::new("test", 5.0).finish();
        assert!(c.pass);
        assert!(c.witness.is_none());
    }
}
