use serde::{Deserialize, Serialize};

/// The three P.835 subscores. Values are on the MOS scale but deliberately
/// not clamped: an affine head can and does leave `[1, 5]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub sig: f64,
    pub bak: f64,
    pub ovrl: f64,
}

impl QualityScore {
    pub const NAMES: [&'static str; 3] = ["SIG", "BAK", "OVRL"];

    pub const fn new(sig: f64, bak: f64, ovrl: f64) -> Self {
        Self { sig, bak, ovrl }
    }

    pub fn splat(v: f64) -> Self {
        Self::new(v, v, v)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.sig, self.bak, self.ovrl]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn from_slice(s: &[f64]) -> Option<Self> {
        match s {
            [a, b, c] => Some(Self::new(*a, *b, *c)),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// `sum_j |self_j - other_j|`.
    pub fn l1_distance(&self, other: &QualityScore) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

impl std::fmt::Display for QualityScore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({:.3}, {:.3}, {:.3})", self.sig, self.bak, self.ovrl)
    }
}

/// Synthetic-corpus labeling rule.
///
/// `BAK = clamp(1 + 4 snr/40, 1, 5)`, `SIG = 5` for a speech-like carrier and
/// 1 otherwise, `OVRL = (SIG + BAK) / 2`.
pub fn surrogate_label(snr_db: f64, clean_is_speechlike: bool) -> QualityScore {
    let bak = (1.0 + 4.0 * snr_db / 40.0).clamp(1.0, 5.0);
    let sig = if clean_is_speechlike { 5.0 } else { 1.0 };
    QualityScore::new(sig, bak, (sig + bak) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surrogate_label_anchor_points() {
        assert_eq!(surrogate_label(40.0, true), QualityScore::new(5.0, 5.0, 5.0));
        assert_eq!(surrogate_label(0.0, true), QualityScore::new(5.0, 1.0, 3.0));
        assert_eq!(surrogate_label(20.0, true), QualityScore::new(5.0, 3.0, 4.0));
        assert_eq!(surrogate_label(-10.0, true).bak, 1.0);
        assert_eq!(surrogate_label(55.0, true).bak, 5.0);
        assert_eq!(surrogate_label(20.0, false), QualityScore::new(1.0, 3.0, 2.0));
    }

    #[test]
    fn surrogate_label_is_monotone_in_snr() {
        let mut prev = surrogate_label(-5.0, true);
        for i in 0..100 {
            let next = surrogate_label(-5.0 + i as f64 * 0.5, true);
            assert!(next.bak >= prev.bak && next.ovrl >= prev.ovrl);
            prev = next;
        }
    }

    #[test]
    fn l1_distance() {
        let a = QualityScore::new(1.0, 2.0, 3.0);
        assert_eq!(a.l1_distance(&QualityScore::new(2.0, 0.0, 3.5)), 3.5);
    }
}
