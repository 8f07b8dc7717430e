//! Placement-level execution benchmarks (IS, VWAP, PWP20, 5-minute reversion)
//! in basis points, the sample filters applied before calibration, and
//! per-participation-bucket Pearson correlation matrices.
//!
//! Sign convention: every benchmark is multiplied by the trade sign
//! (+1 buy, -1 sell) so that negative values are a cost to the trader.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TcaError};
use crate::model::Covariates;

const BPS: f64 = 10_000.0;
/// Post-trade reversion window.
pub const REVERSION_WINDOW_MS: i64 = 300_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Buy,
    Sell,
}

impl Side {
    pub fn sign(self) -> f64 {
        match self {
            Side::Buy => 1.0,
            Side::Sell => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Side::Buy => Side::Sell,
            Side::Sell => Side::Buy,
        }
    }
}

impl FromStr for Side {
    type Err = TcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "buy" | "b" | "1" | "+1" => Ok(Side::Buy),
            "sell" | "s" | "-1" => Ok(Side::Sell),
            other => Err(TcaError::Data(format!("unknown side '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BenchmarkKind {
    IS,
    VWAP,
    PWP20,
    Rev5m,
}

impl BenchmarkKind {
    pub const ALL: [BenchmarkKind; 4] = [Self::IS, Self::VWAP, Self::PWP20, Self::Rev5m];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::IS => "IS",
            Self::VWAP => "VWAP",
            Self::PWP20 => "PWP20",
            Self::Rev5m => "Rev5m",
        }
    }
}

impl fmt::Display for BenchmarkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkKind {
    type Err = TcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "IS" => Ok(Self::IS),
            "VWAP" => Ok(Self::VWAP),
            "PWP20" | "PWP" => Ok(Self::PWP20),
            "REV5M" | "REV" => Ok(Self::Rev5m),
            _ => Err(TcaError::Data(format!("unknown benchmark kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fill {
    pub timestamp_ms: i64,
    pub price: f64,
    pub quantity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TapeTrade {
    pub timestamp_ms: i64,
    pub price: f64,
    pub volume: f64,
}

/// One fully completed parent placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub order_id: String,
    pub algo_id: String,
    /// Tape symbol; `None` means the order trades the only symbol on the tape.
    pub symbol: Option<String>,
    pub side: Side,
    pub arrival_price: f64,
    pub start_time_ms: i64,
    pub end_time_ms: i64,
    pub fills: Vec<Fill>,
    pub size_shares: f64,
    pub adv_shares: f64,
    pub participation_rate_pct: f64,
    pub volatility_pct: f64,
    pub spread_bps: f64,
}

impl ExecutionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.fills.is_empty() {
            return Err(TcaError::EmptyFills);
        }
        if self.end_time_ms <= self.start_time_ms {
            return Err(TcaError::Data(format!(
                "order {}: end time must be after start time",
                self.order_id
            )));
        }
        if !(self.arrival_price > 0.0) {
            return Err(TcaError::InvalidPrice(self.arrival_price));
        }
        for f in &self.fills {
            if !(f.price > 0.0) {
                return Err(TcaError::InvalidPrice(f.price));
            }
            if !(f.quantity > 0.0) {
                return Err(TcaError::Data(format!(
                    "order {}: fill quantity must be positive",
                    self.order_id
                )));
            }
        }
        for (name, v) in [
            ("size_shares", self.size_shares),
            ("adv_shares", self.adv_shares),
            ("participation_rate_pct", self.participation_rate_pct),
            ("volatility_pct", self.volatility_pct),
            ("spread_bps", self.spread_bps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TcaError::Data(format!("order {}: {name} must be positive", self.order_id)));
            }
        }
        let filled: f64 = self.fills.iter().map(|f| f.quantity).sum();
        if (filled - self.size_shares).abs() > 1e-9 * self.size_shares.max(1.0) {
            return Err(TcaError::Data(format!(
                "order {}: filled {filled} of {} shares; only fully completed orders are accepted",
                self.order_id, self.size_shares
            )));
        }
        Ok(())
    }

    pub fn duration_ms(&self) -> i64 {
        self.end_time_ms - self.start_time_ms
    }

    pub fn covariates(&self) -> Covariates {
        Covariates {
            x1: self.size_shares / self.adv_shares,
            x2: self.participation_rate_pct,
            x3: self.volatility_pct,
            x4: self.spread_bps,
        }
    }

    /// Fill with the latest timestamp; ties go to the one listed last.
    pub fn last_fill(&self) -> Option<&Fill> {
        self.fills.iter().rev().max_by_key(|f| f.timestamp_ms)
    }

    fn observation(&self, kind: BenchmarkKind, y: f64) -> BenchmarkObservation {
        let x = self.covariates();
        BenchmarkObservation {
            y,
            kind,
            x1: x.x1,
            x2: x.x2,
            x3: x.x3,
            x4: x.x4,
            algo_id: self.algo_id.clone(),
            order_id: Some(self.order_id.clone()),
            duration_ms: Some(self.duration_ms()),
        }
    }
}

/// One regression row. `x1` is Size/ADV as a fraction, `x2` participation and
/// `x3` volatility in percent, `x4` spread in bps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkObservation {
    pub y: f64,
    pub kind: BenchmarkKind,
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub x4: f64,
    pub algo_id: String,
    #[serde(default)]
    pub order_id: Option<String>,
    #[serde(default)]
    pub duration_ms: Option<i64>,
}

impl BenchmarkObservation {
    pub fn covariates(&self) -> Covariates {
        Covariates { x1: self.x1, x2: self.x2, x3: self.x3, x4: self.x4 }
    }
}

/// Quantity-weighted mean fill price.
pub fn average_execution_price(fills: &[Fill]) -> Result<f64> {
    if fills.is_empty() {
        return Err(TcaError::EmptyFills);
    }
    let (notional, qty) = fills
        .iter()
        .fold((0.0, 0.0), |(n, q), f| (n + f.price * f.quantity, q + f.quantity));
    if !(qty > 0.0) {
        return Err(TcaError::Data("fills carry no quantity".into()));
    }
    Ok(notional / qty)
}

fn signed_bps(reference: f64, base: f64, side: Side) -> Result<f64> {
    if !(base > 0.0) {
        return Err(TcaError::InvalidPrice(base));
    }
    Ok((reference - base) / base * side.sign() * BPS)
}

/// Volume-weighted price of a tape slice.
fn tape_vwap(trades: &[TapeTrade]) -> Option<f64> {
    let (pv, v) = trades
        .iter()
        .fold((0.0, 0.0), |(pv, v), t| (pv + t.price * t.volume, v + t.volume));
    (v > 0.0).then(|| pv / v)
}

/// Implementation shortfall against the arrival price.
pub fn is_bps(record: &ExecutionRecord) -> Result<f64> {
    let avg = average_execution_price(&record.fills)?;
    signed_bps(record.arrival_price, avg, record.side)
}

/// Execution price against the tape VWAP over `[start_time, end_time]`.
pub fn vwap_bps(record: &ExecutionRecord, tape: &[TapeTrade]) -> Result<f64> {
    let avg = average_execution_price(&record.fills)?;
    let lo = tape.partition_point(|t| t.timestamp_ms < record.start_time_ms);
    let hi = tape.partition_point(|t| t.timestamp_ms <= record.end_time_ms);
    let vwap = tape_vwap(&tape[lo..hi.max(lo)])
        .ok_or_else(|| TcaError::NoTapeData(format!("VWAP interval of order {}", record.order_id)))?;
    signed_bps(vwap, avg, record.side)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PwpOutcome {
    pub bps: f64,
    pub window_price: f64,
    /// Tape volume that entered the window.
    pub window_volume: f64,
    /// The tape ran out before the participation threshold was reached.
    pub partial: bool,
}

/// Participation-weighted price: tape VWAP from the order start until tape
/// volume reaches `size / (target_rate / 100)`. The threshold-crossing trade
/// contributes only the shares needed to reach the threshold.
pub fn pwp_bps(record: &ExecutionRecord, tape: &[TapeTrade], target_rate_pct: f64) -> Result<PwpOutcome> {
    if !(target_rate_pct > 0.0 && target_rate_pct <= 100.0) {
        return Err(TcaError::InvalidInput(format!(
            "participation target must be in (0, 100], got {target_rate_pct}"
        )));
    }
    let avg = average_execution_price(&record.fills)?;
    let threshold = record.size_shares / (target_rate_pct / 100.0);
    let lo = tape.partition_point(|t| t.timestamp_ms < record.start_time_ms);
    let mut volume = 0.0;
    let mut notional = 0.0;
    for t in &tape[lo..] {
        let take = t.volume.min(threshold - volume);
        volume += take;
        notional += take * t.price;
        if volume >= threshold {
            break;
        }
    }
    if volume <= 0.0 {
        return Err(TcaError::NoTapeData(format!("PWP window of order {}", record.order_id)));
    }
    let window_price = notional / volume;
    Ok(PwpOutcome {
        bps: signed_bps(window_price, avg, record.side)?,
        window_price,
        window_volume: volume,
        partial: volume < threshold,
    })
}

/// Five-minute reversion: tape VWAP over `(last_fill, last_fill + 5min]`
/// against the last fill price.
pub fn rev5m_bps(record: &ExecutionRecord, tape: &[TapeTrade]) -> Result<f64> {
    let last = record.last_fill().ok_or(TcaError::EmptyFills)?;
    let lo = tape.partition_point(|t| t.timestamp_ms <= last.timestamp_ms);
    let hi = tape.partition_point(|t| t.timestamp_ms <= last.timestamp_ms + REVERSION_WINDOW_MS);
    let vwap = tape_vwap(&tape[lo..hi.max(lo)])
        .ok_or_else(|| TcaError::NoTapeData(format!("reversion window of order {}", record.order_id)))?;
    signed_bps(vwap, last.price, record.side)
}

/// All four benchmarks for one order. A missing tape window fails only the
/// benchmarks that need it; partial PWP windows are reported as failures.
pub fn compute_observations(
    record: &ExecutionRecord,
    tape: &[TapeTrade],
) -> (Vec<BenchmarkObservation>, Vec<(BenchmarkKind, TcaError)>) {
    let mut out = Vec::with_capacity(4);
    let mut failed = Vec::new();
    let results = [
        (BenchmarkKind::IS, is_bps(record)),
        (BenchmarkKind::VWAP, vwap_bps(record, tape)),
        (
            BenchmarkKind::PWP20,
            pwp_bps(record, tape, 20.0).and_then(|o| {
                if o.partial {
                    Err(TcaError::NoTapeData(format!(
                        "PWP window of order {} covers only {} of {} tape shares",
                        record.order_id,
                        o.window_volume,
                        record.size_shares / 0.2
                    )))
                } else {
                    Ok(o.bps)
                }
            }),
        ),
        (BenchmarkKind::Rev5m, rev5m_bps(record, tape)),
    ];
    for (kind, r) in results {
        match r {
            Ok(y) => out.push(record.observation(kind, y)),
            Err(e) => failed.push((kind, e)),
        }
    }
    (out, failed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoffs {
    #[serde(rename = "IS")]
    pub is: f64,
    #[serde(rename = "VWAP")]
    pub vwap: f64,
    #[serde(rename = "PWP20")]
    pub pwp20: f64,
    #[serde(rename = "Rev5m")]
    pub rev5m: f64,
}

impl Cutoffs {
    pub fn get(&self, kind: BenchmarkKind) -> f64 {
        match kind {
            BenchmarkKind::IS => self.is,
            BenchmarkKind::VWAP => self.vwap,
            BenchmarkKind::PWP20 => self.pwp20,
            BenchmarkKind::Rev5m => self.rev5m,
        }
    }
}

impl Default for Cutoffs {
    fn default() -> Self {
        Self { is: 500.0, vwap: 150.0, pwp20: 150.0, rev5m: 200.0 }
    }
}

/// Sample selection rules. Covariate bounds are inclusive, the duration and
/// benchmark cutoffs strict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub min_duration_ms: i64,
    pub x1_min: f64,
    pub x1_max: f64,
    pub x2_min: f64,
    pub x2_max: f64,
    pub cutoffs: Cutoffs,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_duration_ms: 300_000,
            x1_min: 0.001,
            x1_max: 0.2,
            x2_min: 1.0,
            x2_max: 40.0,
            cutoffs: Cutoffs::default(),
        }
    }
}

impl FilterConfig {
    pub fn keeps(&self, o: &BenchmarkObservation) -> bool {
        let duration_ok = o.duration_ms.is_none_or(|d| d > self.min_duration_ms);
        duration_ok
            && (self.x1_min..=self.x1_max).contains(&o.x1)
            && (self.x2_min..=self.x2_max).contains(&o.x2)
            && o.y.abs() < self.cutoffs.get(o.kind)
    }
}

/// Rows without a duration (e.g. synthetic data) skip the duration rule.
pub fn apply_filters(observations: &[BenchmarkObservation], rules: &FilterConfig) -> Vec<BenchmarkObservation> {
    observations.iter().filter(|o| rules.keeps(o)).cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticipationBucket {
    pub lo: f64,
    pub hi: f64,
}

impl ParticipationBucket {
    /// Buckets are `[lo, hi)`; pass `last = true` to close the top edge.
    pub fn contains(&self, rate: f64, last: bool) -> bool {
        rate >= self.lo && (rate < self.hi || (last && rate <= self.hi))
    }
}

pub fn default_buckets() -> Vec<ParticipationBucket> {
    [(1.0, 7.0), (7.0, 15.0), (15.0, 25.0), (25.0, 40.0)]
        .into_iter()
        .map(|(lo, hi)| ParticipationBucket { lo, hi })
        .collect()
}

/// The four benchmark values of one order, in `BenchmarkKind::ALL` order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderBenchmarks {
    pub order_id: String,
    pub participation_pct: f64,
    pub values: [f64; 4],
}

/// Pivot observations to one row per order, keeping only orders with all four
/// benchmarks. Rows without an order id are ignored. Output follows first
/// appearance order.
pub fn group_by_order(observations: &[BenchmarkObservation]) -> Vec<OrderBenchmarks> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut rows: Vec<(String, f64, [Option<f64>; 4])> = Vec::new();
    for o in observations {
        let Some(id) = o.order_id.as_deref() else { continue };
        let i = *index.entry(id).or_insert_with(|| {
            rows.push((id.to_string(), o.x2, [None; 4]));
            rows.len() - 1
        });
        rows[i].2[o.kind.index()] = Some(o.y);
    }
    rows.into_iter()
        .filter_map(|(order_id, participation_pct, v)| {
            Some(OrderBenchmarks {
                order_id,
                participation_pct,
                values: [v[0]?, v[1]?, v[2]?, v[3]?],
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub bucket: ParticipationBucket,
    pub n_orders: usize,
    /// Rows/columns in IS, VWAP, PWP20, Rev5m order.
    pub matrix: [[f64; 4]; 4],
}

/// Pearson correlation between two equal-length columns. A constant column
/// has no defined correlation; 0 is reported.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// One 4x4 Pearson matrix per participation bucket.
pub fn correlation_matrices(
    orders: &[OrderBenchmarks],
    buckets: &[ParticipationBucket],
) -> Vec<Result<CorrelationMatrix>> {
    buckets
        .iter()
        .enumerate()
        .map(|(bi, bucket)| {
            let last = bi + 1 == buckets.len();
            let members: Vec<&OrderBenchmarks> = orders
                .iter()
                .filter(|o| bucket.contains(o.participation_pct, last))
                .collect();
            if members.len() < 3 {
                return Err(TcaError::BucketTooSmall { lo: bucket.lo, hi: bucket.hi, n: members.len() });
            }
            let cols: Vec<Vec<f64>> = (0..4).map(|k| members.iter().map(|o| o.values[k]).collect()).collect();
            let mut matrix = [[0.0; 4]; 4];
            for i in 0..4 {
                matrix[i][i] = 1.0;
                for j in (i + 1)..4 {
                    let r = pearson(&cols[i], &cols[j]);
                    matrix[i][j] = r;
                    matrix[j][i] = r;
                }
            }
            Ok(CorrelationMatrix { bucket: *bucket, n_orders: members.len(), matrix })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fill(t: i64, price: f64, quantity: f64) -> Fill {
        Fill { timestamp_ms: t, price, quantity }
    }

    fn trade(t: i64, price: f64, volume: f64) -> TapeTrade {
        TapeTrade { timestamp_ms: t, price, volume }
    }

    fn record(side: Side, arrival: f64, fills: Vec<Fill>) -> ExecutionRecord {
        let size = fills.iter().map(|f| f.quantity).sum();
        ExecutionRecord {
            order_id: "o1".into(),
            algo_id: "A".into(),
            symbol: None,
            side,
            arrival_price: arrival,
            start_time_ms: 0,
            end_time_ms: 600_000,
            fills,
            size_shares: size,
            adv_shares: 10_000.0,
            participation_rate_pct: 10.0,
            volatility_pct: 30.0,
            spread_bps: 5.0,
        }
    }

    #[test]
    fn average_price() {
        assert_eq!(average_execution_price(&[fill(0, 100.0, 10.0)]).unwrap(), 100.0);
        let p = average_execution_price(&[fill(0, 100.0, 100.0), fill(1, 102.0, 300.0)]).unwrap();
        assert_abs_diff_eq!(p, 101.5, epsilon = 1e-12);
        let p = average_execution_price(&[fill(0, 99.0, 5.0), fill(1, 101.0, 5.0)]).unwrap();
        assert_abs_diff_eq!(p, 100.0, epsilon = 1e-12);
        assert!(matches!(average_execution_price(&[]), Err(TcaError::EmptyFills)));
    }

    #[test]
    fn implementation_shortfall() {
        assert_eq!(is_bps(&record(Side::Buy, 100.0, vec![fill(1, 100.0, 10.0)])).unwrap(), 0.0);
        let buy = is_bps(&record(Side::Buy, 100.0, vec![fill(1, 101.0, 10.0)])).unwrap();
        assert_abs_diff_eq!(buy, -99.00990099009901, epsilon = 1e-9);
        let sell = is_bps(&record(Side::Sell, 100.0, vec![fill(1, 101.0, 10.0)])).unwrap();
        assert_abs_diff_eq!(sell, 99.00990099009901, epsilon = 1e-9);
    }

    #[test]
    fn vwap_benchmark() {
        let r = record(Side::Buy, 100.0, vec![fill(1, 100.0, 10.0)]);
        let tape = [trade(-5, 500.0, 1e6), trade(10, 101.0, 200.0), trade(700_000, 1.0, 1e6)];
        assert_abs_diff_eq!(vwap_bps(&r, &tape).unwrap(), 100.0, epsilon = 1e-9);
        let mut s = r.clone();
        s.side = Side::Sell;
        assert_abs_diff_eq!(vwap_bps(&s, &tape).unwrap(), -100.0, epsilon = 1e-9);
        assert_eq!(vwap_bps(&r, &[trade(10, 100.0, 5.0)]).unwrap(), 0.0);
        assert!(matches!(vwap_bps(&r, &[trade(900_000, 100.0, 1.0)]), Err(TcaError::NoTapeData(_))));
    }

    #[test]
    fn pwp_pro_rata_window() {
        let r = record(Side::Buy, 100.0, vec![fill(1, 100.0, 100.0)]);
        let tape = [trade(5, 100.0, 300.0), trade(6, 110.0, 400.0)];
        let o = pwp_bps(&r, &tape, 20.0).unwrap();
        assert_abs_diff_eq!(o.window_price, 104.0, epsilon = 1e-12);
        assert_abs_diff_eq!(o.bps, 400.0, epsilon = 1e-9);
        assert_eq!(o.window_volume, 500.0);
        assert!(!o.partial);

        let flat = [trade(5, 100.0, 50.0), trade(9, 100.0, 800.0)];
        assert_eq!(pwp_bps(&r, &flat, 20.0).unwrap().bps, 0.0);
    }

    #[test]
    fn pwp_partial_and_errors() {
        let r = record(Side::Buy, 100.0, vec![fill(1, 100.0, 100.0)]);
        let o = pwp_bps(&r, &[trade(5, 102.0, 120.0)], 20.0).unwrap();
        assert!(o.partial);
        assert_eq!(o.window_volume, 120.0);
        assert!(matches!(pwp_bps(&r, &[trade(-1, 102.0, 120.0)], 20.0), Err(TcaError::NoTapeData(_))));
        assert!(pwp_bps(&r, &[trade(5, 102.0, 120.0)], 0.0).is_err());
        assert!(pwp_bps(&r, &[trade(5, 102.0, 120.0)], 120.0).is_err());
    }

    #[test]
    fn reversion_window() {
        let r = record(Side::Buy, 100.0, vec![fill(1_000, 101.0, 10.0), fill(2_000, 100.0, 10.0)]);
        // trade at the last fill instant is excluded, +5min inclusive, later excluded
        let tape = [
            trade(2_000, 1.0, 1e6),
            trade(3_000, 99.0, 100.0),
            trade(302_000, 100.0, 100.0),
            trade(302_001, 1.0, 1e6),
        ];
        assert_abs_diff_eq!(rev5m_bps(&r, &tape).unwrap(), -50.0, epsilon = 1e-9);
        let mut s = r.clone();
        s.side = Side::Sell;
        assert_abs_diff_eq!(rev5m_bps(&s, &tape).unwrap(), 50.0, epsilon = 1e-9);
        assert!(matches!(rev5m_bps(&r, &tape[..1]), Err(TcaError::NoTapeData(_))));
    }

    #[test]
    fn missing_tape_only_fails_tape_benchmarks() {
        let r = record(Side::Buy, 100.0, vec![fill(1, 100.5, 10.0)]);
        let (obs, failed) = compute_observations(&r, &[]);
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].kind, BenchmarkKind::IS);
        assert_eq!(failed.len(), 3);
    }

    #[test]
    fn validation() {
        let mut r = record(Side::Buy, 100.0, vec![fill(1, 100.0, 10.0)]);
        assert!(r.validate().is_ok());
        r.size_shares = 20.0;
        assert!(r.validate().is_err());
        r.size_shares = 10.0;
        r.end_time_ms = r.start_time_ms;
        assert!(r.validate().is_err());
    }

    fn obs(kind: BenchmarkKind, y: f64, x1: f64, x2: f64) -> BenchmarkObservation {
        BenchmarkObservation {
            y,
            kind,
            x1,
            x2,
            x3: 30.0,
            x4: 5.0,
            algo_id: "A".into(),
            order_id: None,
            duration_ms: Some(600_000),
        }
    }

    #[test]
    fn filters() {
        let cfg = FilterConfig::default();
        assert!(apply_filters(&[], &cfg).is_empty());
        assert!(!cfg.keeps(&obs(BenchmarkKind::IS, 600.0, 0.01, 10.0)));
        assert!(!cfg.keeps(&obs(BenchmarkKind::IS, -500.0, 0.01, 10.0)));
        assert!(cfg.keeps(&obs(BenchmarkKind::IS, 499.0, 0.01, 10.0)));
        assert!(!cfg.keeps(&obs(BenchmarkKind::VWAP, 150.0, 0.01, 10.0)));
        assert!(!cfg.keeps(&obs(BenchmarkKind::Rev5m, 200.0, 0.01, 10.0)));
        assert!(cfg.keeps(&obs(BenchmarkKind::Rev5m, 199.9, 0.2, 40.0)));
        assert!(cfg.keeps(&obs(BenchmarkKind::PWP20, 1.0, 0.001, 1.0)));
        assert!(!cfg.keeps(&obs(BenchmarkKind::PWP20, 1.0, 0.0009, 1.0)));
        assert!(!cfg.keeps(&obs(BenchmarkKind::PWP20, 1.0, 0.01, 40.5)));
        let mut short = obs(BenchmarkKind::IS, 1.0, 0.01, 10.0);
        short.duration_ms = Some(300_000);
        assert!(!cfg.keeps(&short));
        short.duration_ms = None;
        assert!(cfg.keeps(&short));
    }

    fn order(p: f64, v: [f64; 4]) -> OrderBenchmarks {
        OrderBenchmarks { order_id: String::new(), participation_pct: p, values: v }
    }

    #[test]
    fn correlation_hand_dataset() {
        // brute-force Pearson values computed by hand on these four rows
        let orders = [
            order(2.0, [1.0, 2.0, 1.0, 4.0]),
            order(3.0, [2.0, 1.0, 2.0, 3.0]),
            order(4.0, [3.0, 4.0, 3.0, 2.0]),
            order(5.0, [4.0, 3.0, 4.0, 1.0]),
        ];
        let res = correlation_matrices(&orders, &default_buckets());
        let m = res[0].as_ref().unwrap();
        assert_eq!(m.n_orders, 4);
        for i in 0..4 {
            assert_eq!(m.matrix[i][i], 1.0);
        }
        assert_abs_diff_eq!(m.matrix[0][2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.matrix[0][3], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.matrix[0][1], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(m.matrix[1][3], -0.6, epsilon = 1e-12);
        assert!(matches!(res[1], Err(TcaError::BucketTooSmall { n: 0, .. })));
    }

    #[test]
    fn bucket_edges() {
        let b = default_buckets();
        assert!(b[0].contains(1.0, false));
        assert!(!b[0].contains(7.0, false));
        assert!(b[1].contains(7.0, false));
        assert!(b[3].contains(40.0, true));
    }

    #[test]
    fn group_requires_all_kinds() {
        let mut rows = Vec::new();
        for (i, kind) in BenchmarkKind::ALL.iter().enumerate() {
            let mut o = obs(*kind, i as f64, 0.01, 5.0);
            o.order_id = Some("a".into());
            rows.push(o);
        }
        let mut partial = obs(BenchmarkKind::IS, 9.0, 0.01, 5.0);
        partial.order_id = Some("b".into());
        rows.push(partial);
        let g = group_by_order(&rows);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].values, [0.0, 1.0, 2.0, 3.0]);
    }
}
