//! Bit accuracy, exact binomial detection and key-database attribution.
//!
//! Under the no-watermark hypothesis each decoded bit matches a random key
//! with probability 1/2, so the match count D is Binomial(M, 1/2). The
//! strict tail `fpr(tau, M) = P(D > tau)` is evaluated two independent
//! ways: an exact integer sum (u128 binomial coefficients over 2^M) and a
//! regularized incomplete beta function I_{1/2}(tau+1, M-tau) via a Lentz
//! continued fraction; they agree to 1e-12 for all M <= 64.
//!
//! Calibration and decision: `threshold_for_fpr` returns the smallest tau
//! with P(D > tau) <= target (tau = 20 for M = 28 at 1%). A watermark is
//! declared present iff D >= tau + 1, i.e. strictly more than tau matching
//! bits, so the reported `fpr_at_tau = P(D >= tau + 1) = P(D > tau)` is
//! exactly the calibrated tail. The report's `min_matches` field is that
//! tau + 1 decision threshold.

use std::fmt;
use std::path::Path;

use crate::extractor::Extractor;
use crate::key::{KeyError, WatermarkKey};
use crate::tensor::{EngineError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("key lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("tau {tau} out of range for M = {m}")]
    TauOutOfRange { tau: usize, m: usize },
    #[error("exact binomial tail needs M <= 64, got {0}")]
    MTooLarge(usize),
    #[error("key database is empty")]
    EmptyDatabase,
    #[error("image decodes {got} bits but the key has {expected}")]
    KeyBitsMismatch { got: usize, expected: usize },
    #[error("continued fraction for the incomplete beta did not converge")]
    BetaDiverged,
    #[error("malformed key database line {line}: {reason}")]
    MalformedDatabase { line: usize, reason: String },
    #[error("duplicate owner id {0:?}")]
    DuplicateOwner(String),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Fraction of matching bit positions (Eq.-style 1/M sum of indicators).
pub fn bit_accuracy(a: &WatermarkKey, b: &WatermarkKey) -> Result<f64, VerifyError> {
    if a.len() != b.len() {
        return Err(VerifyError::LengthMismatch(a.len(), b.len()));
    }
    let d = a.hamming_distance(b)?;
    Ok((a.len() - d) as f64 / a.len() as f64)
}

/// Exact strict tail P(D > tau) for D ~ Binomial(m, 1/2), integer route.
pub fn fpr_exact(tau: usize, m: usize) -> Result<f64, VerifyError> {
    if tau > m {
        return Err(VerifyError::TauOutOfRange { tau, m });
    }
    if m > 64 {
        return Err(VerifyError::MTooLarge(m));
    }
    // Pascal row C(m, k) in u128; sum over k = tau+1 ..= m.
    let mut row = vec![0u128; m + 1];
    row[0] = 1;
    for i in 1..=m {
        row[i] = 1;
        for j in (1..i).rev() {
            row[j] += row[j - 1];
        }
    }
    let numerator: u128 = row[tau + 1..].iter().sum();
    Ok(numerator as f64 / (2.0f64).powi(m as i32))
}

/// Strict tail via the regularized incomplete beta I_{1/2}(tau+1, m-tau).
pub fn fpr_beta(tau: usize, m: usize) -> Result<f64, VerifyError> {
    if tau > m {
        return Err(VerifyError::TauOutOfRange { tau, m });
    }
    if tau == m {
        return Ok(0.0);
    }
    betainc(tau as f64 + 1.0, (m - tau) as f64, 0.5)
}

/// P(D > tau) under the null. Exact integer arithmetic for M <= 64 (the
/// supported desk range), incomplete-beta continued fraction beyond.
pub fn fpr(tau: usize, m: usize) -> Result<f64, VerifyError> {
    if m <= 64 {
        fpr_exact(tau, m)
    } else {
        fpr_beta(tau, m)
    }
}

/// Smallest tau with P(D > tau) <= target.
pub fn threshold_for_fpr(m: usize, target: f64) -> Result<usize, VerifyError> {
    if !(0.0 < target && target < 1.0) {
        return Err(VerifyError::TauOutOfRange { tau: 0, m });
    }
    for tau in 0..=m {
        if fpr(tau, m)? <= target {
            return Ok(tau);
        }
    }
    Ok(m) // fpr(m, m) = 0, so this line is unreachable
}

// -- Regularized incomplete beta (continued fraction) ----------------------

/// ln Gamma via the Lanczos approximation (g = 7, 9 coefficients).
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// I_x(a, b) by the modified Lentz continued fraction.
fn betainc(a: f64, b: f64, x: f64) -> Result<f64, VerifyError> {
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x >= 1.0 {
        return Ok(1.0);
    }
    // Symmetry for faster convergence.
    if x > (a + 1.0) / (a + b + 2.0) {
        return Ok(1.0 - betainc(b, a, 1.0 - x)?);
    }
    let ln_prefix = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
    let prefix = ln_prefix.exp() / a;

    const MAX_ITER: usize = 500;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0f64;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut f = d;
    for mm in 1..=MAX_ITER {
        let m = mm as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        f *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        f *= delta;
        if (delta - 1.0).abs() < EPS {
            return Ok(prefix * f);
        }
    }
    Err(VerifyError::BetaDiverged)
}

// -- Detection --------------------------------------------------------------

/// Outcome of a detection test against one candidate key.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    /// Matching bit count D.
    pub matches: usize,
    /// Key length M.
    pub key_bits: usize,
    /// D / M.
    pub bit_accuracy: f64,
    /// Decision threshold: watermarked iff D >= min_matches.
    pub min_matches: usize,
    /// Exact P(D >= min_matches) under the null.
    pub fpr_at_tau: f64,
    /// Target FPR the threshold was calibrated for.
    pub target_fpr: f64,
    pub watermarked: bool,
}

impl fmt::Display for DetectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "matches        : {} / {}", self.matches, self.key_bits)?;
        writeln!(f, "bit accuracy   : {:.4}", self.bit_accuracy)?;
        writeln!(f, "threshold      : >= {} matches (target FPR {})", self.min_matches, self.target_fpr)?;
        writeln!(f, "exact FPR      : {:.6e}", self.fpr_at_tau)?;
        write!(f, "decision       : {}", if self.watermarked { "WATERMARKED" } else { "not watermarked" })
    }
}

impl DetectionReport {
    pub const CSV_HEADER: &'static str =
        "matches,key_bits,bit_accuracy,min_matches,fpr_at_tau,target_fpr,watermarked";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{},{:.12e},{},{}",
            self.matches,
            self.key_bits,
            self.bit_accuracy,
            self.min_matches,
            self.fpr_at_tau,
            self.target_fpr,
            self.watermarked
        )
    }
}

/// Compares a decoded key against a candidate and calibrates the decision.
pub fn detect_decoded(
    decoded: &WatermarkKey,
    key: &WatermarkKey,
    target_fpr: f64,
) -> Result<DetectionReport, VerifyError> {
    if decoded.len() != key.len() {
        return Err(VerifyError::KeyBitsMismatch { got: decoded.len(), expected: key.len() });
    }
    let m = key.len();
    let d = m - decoded.hamming_distance(key)?;
    let tau = threshold_for_fpr(m, target_fpr)?;
    let min_matches = tau + 1;
    Ok(DetectionReport {
        matches: d,
        key_bits: m,
        bit_accuracy: d as f64 / m as f64,
        min_matches,
        fpr_at_tau: fpr(tau, m)?,
        target_fpr,
        watermarked: d >= min_matches,
    })
}

/// Extracts a key from the image and tests it against a candidate key.
pub fn detect(
    extractor: &Extractor,
    image: &Tensor,
    key: &WatermarkKey,
    target_fpr: f64,
) -> Result<DetectionReport, VerifyError> {
    if key.len() != extractor.key_bits() {
        return Err(VerifyError::KeyBitsMismatch { got: extractor.key_bits(), expected: key.len() });
    }
    let decoded = extractor.extract_key(image)?;
    detect_decoded(&decoded, key, target_fpr)
}

// -- Attribution -------------------------------------------------------------

/// Owner-id / key records with uniform key length.
#[derive(Debug, Clone, Default)]
pub struct KeyDatabase {
    records: Vec<(String, WatermarkKey)>,
}

impl KeyDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, owner: impl Into<String>, key: WatermarkKey) -> Result<(), VerifyError> {
        let owner = owner.into();
        if self.records.iter().any(|(o, _)| *o == owner) {
            return Err(VerifyError::DuplicateOwner(owner));
        }
        if let Some((_, first)) = self.records.first() {
            if first.len() != key.len() {
                return Err(VerifyError::LengthMismatch(first.len(), key.len()));
            }
        }
        self.records.push((owner, key));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WatermarkKey)> {
        self.records.iter().map(|(o, k)| (o.as_str(), k))
    }

    /// Line format: `owner_id<TAB>M:hexkey`. Blank lines and `#` comments
    /// are skipped. Duplicate keys are legal but flagged in the returned
    /// warning list.
    pub fn parse(text: &str) -> Result<(Self, Vec<String>), VerifyError> {
        let mut db = Self::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (owner, keystr) = line.split_once('\t').ok_or_else(|| {
                VerifyError::MalformedDatabase {
                    line: idx + 1,
                    reason: "expected owner<TAB>M:hex".into(),
                }
            })?;
            let key = WatermarkKey::from_hex_string(keystr.trim()).map_err(|e| {
                VerifyError::MalformedDatabase { line: idx + 1, reason: e.to_string() }
            })?;
            db.insert(owner.trim(), key)?;
        }
        let warnings = db.duplicate_key_warnings();
        Ok((db, warnings))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>), VerifyError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), VerifyError> {
        let mut text = String::new();
        for (owner, key) in self.iter() {
            text.push_str(owner);
            text.push('\t');
            text.push_str(&key.to_hex_string());
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    fn duplicate_key_warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        for i in 0..self.records.len() {
            for j in (i + 1)..self.records.len() {
                if self.records[i].1 == self.records[j].1 {
                    warnings.push(format!(
                        "owners {:?} and {:?} share the same key",
                        self.records[i].0, self.records[j].0
                    ));
                }
            }
        }
        warnings
    }
}

/// Nearest key by Hamming distance; ties break to the lexicographically
/// smallest owner id. Returns the owner and the report against their key.
pub fn attribute(
    extractor: &Extractor,
    image: &Tensor,
    db: &KeyDatabase,
    target_fpr: f64,
) -> Result<(String, DetectionReport), VerifyError> {
    if db.is_empty() {
        return Err(VerifyError::EmptyDatabase);
    }
    let decoded = extractor.extract_key(image)?;
    let mut best: Option<(&str, &WatermarkKey, usize)> = None;
    for (owner, key) in db.iter() {
        if key.len() != decoded.len() {
            return Err(VerifyError::KeyBitsMismatch { got: decoded.len(), expected: key.len() });
        }
        let d = decoded.hamming_distance(key)?;
        let better = match best {
            None => true,
            Some((bo, _, bd)) => d < bd || (d == bd && owner < bo),
        };
        if better {
            best = Some((owner, key, d));
        }
    }
    let (owner, key, _) = best.expect("database is non-empty");
    let report = detect_decoded(&decoded, key, target_fpr)?;
    Ok((owner.to_string(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::key::sample_key;

    #[test]
    fn bit_accuracy_examples() {
        let k = sample_key(28, 1);
        assert_eq!(bit_accuracy(&k, &k).unwrap(), 1.0);
        let complement =
            WatermarkKey::from_bits(k.bits().iter().map(|b| 1 - b).collect()).unwrap();
        assert_eq!(bit_accuracy(&k, &complement).unwrap(), 0.0);
        // 21 of 28 matching.
        let mut bits = k.bits().to_vec();
        for b in bits.iter_mut().take(7) {
            *b = 1 - *b;
        }
        let partial = WatermarkKey::from_bits(bits).unwrap();
        assert_eq!(bit_accuracy(&k, &partial).unwrap(), 0.75);
    }

    #[test]
    fn exact_tail_reference_values() {
        assert_eq!(fpr_exact(0, 1).unwrap(), 0.5);
        // Spec-level reference: P(D > 20 | M = 28) = 1683218 / 2^28.
        let want = 1_683_218.0 / 268_435_456.0;
        assert!((fpr_exact(20, 28).unwrap() - want).abs() < 1e-15);
        let at19 = fpr_exact(19, 28).unwrap();
        assert!((at19 - 0.017_848_957).abs() < 1e-6 && at19 > 0.01);
        assert_eq!(fpr_exact(28, 28).unwrap(), 0.0);
    }

    #[test]
    fn beta_route_agrees_with_exact_to_1e12_for_all_m_up_to_64() {
        for m in 1..=64usize {
            for tau in 0..=m {
                let e = fpr_exact(tau, m).unwrap();
                let b = fpr_beta(tau, m).unwrap();
                assert!(
                    (e - b).abs() < 1e-12,
                    "M={m} tau={tau}: exact {e:.15e} beta {b:.15e}"
                );
            }
        }
    }

    #[test]
    fn fpr_is_monotone_non_increasing_with_unit_head_and_zero_tail() {
        for m in [1usize, 5, 16, 28, 64] {
            let mut prev = 1.0f64 + 1e-12;
            for tau in 0..=m {
                let v = fpr(tau, m).unwrap();
                assert!(v <= prev + 1e-15, "M={m} tau={tau}");
                prev = v;
            }
            assert_eq!(fpr(m, m).unwrap(), 0.0);
            // P(D > 0) = 1 - 2^-m.
            let head = fpr(0, m).unwrap();
            assert!((head - (1.0 - 0.5f64.powi(m as i32))).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold_for_fpr(28, 0.01).unwrap(), 20);
        assert_eq!(threshold_for_fpr(1, 0.6).unwrap(), 0);
        // fpr(1,16) = 1 - 17/2^16 > 0.999, fpr(2,16) = 1 - 137/2^16 < 0.999.
        assert_eq!(threshold_for_fpr(16, 0.999).unwrap(), 2);
    }

    #[test]
    fn m16_threshold_against_brute_force_enumeration() {
        // Enumerate all 2^16 equally likely decoded patterns against a
        // fixed key and count strict-tail exceedances directly.
        let key = sample_key(16, 3);
        let target = 0.01;
        let tau = threshold_for_fpr(16, target).unwrap();
        let mut count_gt_tau = 0u64;
        let mut count_gt_tau_minus_1 = 0u64;
        for pattern in 0u32..(1 << 16) {
            let mut matches = 0usize;
            for (j, &kb) in key.bits().iter().enumerate() {
                let bit = ((pattern >> j) & 1) as u8;
                if bit == kb {
                    matches += 1;
                }
            }
            if matches > tau {
                count_gt_tau += 1;
            }
            if tau > 0 && matches > tau - 1 {
                count_gt_tau_minus_1 += 1;
            }
        }
        let emp = count_gt_tau as f64 / 65_536.0;
        assert!((emp - fpr(tau, 16).unwrap()).abs() < 1e-15);
        assert!(emp <= target);
        // tau is minimal.
        let emp_prev = count_gt_tau_minus_1 as f64 / 65_536.0;
        assert!(emp_prev > target);
    }

    #[test]
    fn detection_decision_uses_strictly_more_than_tau() {
        let key = sample_key(28, 9);
        // Exactly 20 matches: below the >= 21 decision line.
        let mut bits = key.bits().to_vec();
        for b in bits.iter_mut().take(8) {
            *b = 1 - *b;
        }
        let d20 = WatermarkKey::from_bits(bits).unwrap();
        let r = detect_decoded(&d20, &key, 0.01).unwrap();
        assert_eq!(r.matches, 20);
        assert_eq!(r.min_matches, 21);
        assert!(!r.watermarked);
        assert!((r.fpr_at_tau - 1_683_218.0 / 268_435_456.0).abs() < 1e-15);

        // 21 matches: declared.
        let mut bits = key.bits().to_vec();
        for b in bits.iter_mut().take(7) {
            *b = 1 - *b;
        }
        let d21 = WatermarkKey::from_bits(bits).unwrap();
        let r = detect_decoded(&d21, &key, 0.01).unwrap();
        assert!(r.watermarked);
    }

    #[test]
    fn database_roundtrip_attribution_and_tie_break() {
        let k1 = sample_key(16, 1);
        let k2 = sample_key(16, 2);
        let mut db = KeyDatabase::new();
        db.insert("bob", k1.clone()).unwrap();
        assert!(matches!(db.insert("bob", k2.clone()), Err(VerifyError::DuplicateOwner(_))));
        db.insert("alice", k2).unwrap();

        let text = {
            let mut s = String::new();
            for (o, k) in db.iter() {
                s.push_str(&format!("{o}\t{}\n", k.to_hex_string()));
            }
            s
        };
        let (db2, warnings) = KeyDatabase::parse(&text).unwrap();
        assert_eq!(db2.len(), 2);
        assert!(warnings.is_empty());

        // Duplicate keys are flagged.
        let dup = format!("a\t{h}\nb\t{h}\n", h = k1.to_hex_string());
        let (_, warnings) = KeyDatabase::parse(&dup).unwrap();
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn malformed_database_lines_are_reported() {
        assert!(matches!(
            KeyDatabase::parse("ownerwithouttab"),
            Err(VerifyError::MalformedDatabase { line: 1, .. })
        ));
        assert!(matches!(
            KeyDatabase::parse("o\tnothex"),
            Err(VerifyError::MalformedDatabase { .. })
        ));
    }
}
