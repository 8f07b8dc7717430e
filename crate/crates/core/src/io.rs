//! CSV readers and writers: executions, tape, observations and posterior
//! draws. Malformed rows are skipped and reported with their line number.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::benchmark::{BenchmarkKind, BenchmarkObservation, ExecutionRecord, Fill, Side, TapeTrade};
use crate::error::{Result, TcaError};
use crate::ranking::ScoreCard;
use crate::sampler::PosteriorSamples;

/// A skipped input row. `line` is 1-based and counts the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub line: u64,
    pub reason: String,
}

pub const EXECUTION_COLUMNS: [&str; 14] = [
    "order_id",
    "algo_id",
    "side",
    "arrival_price",
    "start_time",
    "end_time",
    "fill_time",
    "fill_price",
    "fill_qty",
    "size_shares",
    "adv_shares",
    "participation_rate_pct",
    "volatility_pct",
    "spread_bps",
];

pub const OBSERVATION_COLUMNS: [&str; 9] = ["y", "kind", "x1", "x2", "x3", "x4", "algo_id", "order_id", "duration_ms"];

/// ISO-8601 timestamp to epoch milliseconds. A missing offset means UTC.
pub fn parse_timestamp_ms(s: &str) -> Result<i64> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.timestamp_millis());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc().timestamp_millis());
        }
    }
    Err(TcaError::Data(format!("bad timestamp '{s}'")))
}

/// Epoch milliseconds to `YYYY-MM-DDTHH:MM:SS.mmmZ`.
pub fn format_timestamp_ms(ms: i64) -> String {
    DateTime::from_timestamp_millis(ms)
        .map(|t| t.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string())
        .unwrap_or_else(|| ms.to_string())
}

struct Columns {
    index: Vec<Option<usize>>,
}

impl Columns {
    fn new(headers: &csv::StringRecord, wanted: &[&str], required: usize) -> Result<Self> {
        let index: Vec<Option<usize>> = wanted.iter().map(|w| headers.iter().position(|h| h.trim() == *w)).collect();
        if let Some(i) = index[..required].iter().position(Option::is_none) {
            return Err(TcaError::Data(format!("missing column '{}'", wanted[i])));
        }
        Ok(Self { index })
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, i: usize) -> Option<&'r str> {
        self.index[i].and_then(|j| rec.get(j)).map(str::trim)
    }

    fn str<'r>(&self, rec: &'r csv::StringRecord, i: usize, name: &str) -> std::result::Result<&'r str, String> {
        self.get(rec, i).filter(|s| !s.is_empty()).ok_or_else(|| format!("empty {name}"))
    }

    fn num(&self, rec: &csv::StringRecord, i: usize, name: &str) -> std::result::Result<f64, String> {
        let s = self.str(rec, i, name)?;
        s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| format!("bad {name} '{s}'"))
    }

    fn time(&self, rec: &csv::StringRecord, i: usize, name: &str) -> std::result::Result<i64, String> {
        parse_timestamp_ms(self.str(rec, i, name)?).map_err(|e| format!("{name}: {e}"))
    }
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(input)
}

struct ExecRow {
    order: ExecutionRecord,
    fill: Fill,
}

fn exec_row(cols: &Columns, rec: &csv::StringRecord) -> std::result::Result<ExecRow, String> {
    let n = |i: usize| cols.num(rec, i, EXECUTION_COLUMNS[i]);
    let side: Side = cols.str(rec, 2, "side")?.parse().map_err(|e: TcaError| e.to_string())?;
    let order = ExecutionRecord {
        order_id: cols.str(rec, 0, "order_id")?.to_string(),
        algo_id: cols.str(rec, 1, "algo_id")?.to_string(),
        symbol: cols.get(rec, 14).filter(|s| !s.is_empty()).map(str::to_string),
        side,
        arrival_price: n(3)?,
        start_time_ms: cols.time(rec, 4, "start_time")?,
        end_time_ms: cols.time(rec, 5, "end_time")?,
        fills: Vec::new(),
        size_shares: n(9)?,
        adv_shares: n(10)?,
        participation_rate_pct: n(11)?,
        volatility_pct: n(12)?,
        spread_bps: n(13)?,
    };
    let fill = Fill { timestamp_ms: cols.time(rec, 6, "fill_time")?, price: n(7)?, quantity: n(8)? };
    Ok(ExecRow { order, fill })
}

fn same_order(a: &ExecutionRecord, b: &ExecutionRecord) -> bool {
    a.algo_id == b.algo_id
        && a.symbol == b.symbol
        && a.side == b.side
        && a.arrival_price == b.arrival_price
        && a.start_time_ms == b.start_time_ms
        && a.end_time_ms == b.end_time_ms
        && a.size_shares == b.size_shares
        && a.adv_shares == b.adv_shares
        && a.participation_rate_pct == b.participation_rate_pct
        && a.volatility_pct == b.volatility_pct
        && a.spread_bps == b.spread_bps
}

/// Parse fill rows and group them into orders, in order of first appearance.
/// An optional trailing `symbol` column selects the tape. Orders whose rows
/// disagree on order-level fields, or that fail validation, are rejected
/// whole.
pub fn read_executions<R: Read>(input: R) -> Result<(Vec<ExecutionRecord>, Vec<Reject>)> {
    let mut rdr = reader(input);
    let mut wanted = EXECUTION_COLUMNS.to_vec();
    wanted.push("symbol");
    let cols = Columns::new(rdr.headers()?, &wanted, EXECUTION_COLUMNS.len())?;
    let mut orders: Vec<(u64, ExecutionRecord)> = Vec::new();
    let mut by_id: BTreeMap<String, usize> = BTreeMap::new();
    let mut bad: BTreeMap<String, Reject> = BTreeMap::new();
    let mut rejects = Vec::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                rejects.push(Reject { line: e.position().map_or(0, |p| p.line()), reason: e.to_string() });
                continue;
            }
        };
        let line = line_of(&rec);
        match exec_row(&cols, &rec) {
            Err(reason) => rejects.push(Reject { line, reason }),
            Ok(row) => match by_id.get(&row.order.order_id) {
                Some(&i) => {
                    if same_order(&orders[i].1, &row.order) {
                        orders[i].1.fills.push(row.fill);
                    } else {
                        bad.entry(row.order.order_id.clone()).or_insert(Reject {
                            line,
                            reason: format!("order {}: order-level fields differ between fill rows", row.order.order_id),
                        });
                    }
                }
                None => {
                    let mut order = row.order;
                    order.fills.push(row.fill);
                    by_id.insert(order.order_id.clone(), orders.len());
                    orders.push((line, order));
                }
            },
        }
    }
    let mut out = Vec::new();
    for (line, order) in orders {
        if let Some(r) = bad.remove(&order.order_id) {
            rejects.push(r);
        } else if let Err(e) = order.validate() {
            rejects.push(Reject { line, reason: e.to_string() });
        } else {
            out.push(order);
        }
    }
    rejects.sort_by_key(|r| r.line);
    Ok((out, rejects))
}

/// Tape trades per symbol, sorted by timestamp (stable for equal times).
pub type TapeBook = BTreeMap<String, Vec<TapeTrade>>;

pub fn read_tape<R: Read>(input: R) -> Result<(TapeBook, Vec<Reject>)> {
    let mut rdr = reader(input);
    let names = ["symbol", "timestamp", "price", "volume"];
    let cols = Columns::new(rdr.headers()?, &names, 4)?;
    let mut book = TapeBook::new();
    let mut rejects = Vec::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                rejects.push(Reject { line: e.position().map_or(0, |p| p.line()), reason: e.to_string() });
                continue;
            }
        };
        let row = (|| -> std::result::Result<(String, TapeTrade), String> {
            let t = TapeTrade { timestamp_ms: cols.time(&rec, 1, "timestamp")?, price: cols.num(&rec, 2, "price")?, volume: cols.num(&rec, 3, "volume")? };
            if !(t.price > 0.0) || !(t.volume >= 0.0) {
                return Err("tape price must be positive and volume non-negative".into());
            }
            Ok((cols.str(&rec, 0, "symbol")?.to_string(), t))
        })();
        match row {
            Ok((sym, t)) => book.entry(sym).or_default().push(t),
            Err(reason) => rejects.push(Reject { line: line_of(&rec), reason }),
        }
    }
    for trades in book.values_mut() {
        trades.sort_by_key(|t| t.timestamp_ms);
    }
    Ok((book, rejects))
}

/// Tape for an order: its symbol's trades, or the only symbol on the tape
/// when the order names none.
pub fn tape_for<'a>(record: &ExecutionRecord, book: &'a TapeBook) -> Option<&'a [TapeTrade]> {
    match &record.symbol {
        Some(s) => book.get(s).map(Vec::as_slice),
        None if book.len() == 1 => book.values().next().map(Vec::as_slice),
        None => None,
    }
}

pub fn write_observations<W: Write>(out: W, observations: &[BenchmarkObservation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(OBSERVATION_COLUMNS)?;
    for o in observations {
        w.write_record([
            o.y.to_string(),
            o.kind.to_string(),
            o.x1.to_string(),
            o.x2.to_string(),
            o.x3.to_string(),
            o.x4.to_string(),
            o.algo_id.clone(),
            o.order_id.clone().unwrap_or_default(),
            o.duration_ms.map(|d| d.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `order_id` and `duration_ms` columns are optional.
pub fn read_observations<R: Read>(input: R) -> Result<(Vec<BenchmarkObservation>, Vec<Reject>)> {
    let mut rdr = reader(input);
    let cols = Columns::new(rdr.headers()?, &OBSERVATION_COLUMNS, 7)?;
    let mut out = Vec::new();
    let mut rejects = Vec::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                rejects.push(Reject { line: e.position().map_or(0, |p| p.line()), reason: e.to_string() });
                continue;
            }
        };
        let row = (|| -> std::result::Result<BenchmarkObservation, String> {
            let kind: BenchmarkKind = cols.str(&rec, 1, "kind")?.parse().map_err(|e: TcaError| e.to_string())?;
            let duration_ms = match cols.get(&rec, 8).filter(|s| !s.is_empty()) {
                Some(s) => Some(s.parse::<i64>().map_err(|_| format!("bad duration_ms '{s}'"))?),
                None => None,
            };
            Ok(BenchmarkObservation {
                y: cols.num(&rec, 0, "y")?,
                kind,
                x1: cols.num(&rec, 2, "x1")?,
                x2: cols.num(&rec, 3, "x2")?,
                x3: cols.num(&rec, 4, "x3")?,
                x4: cols.num(&rec, 5, "x4")?,
                algo_id: cols.str(&rec, 6, "algo_id")?.to_string(),
                order_id: cols.get(&rec, 7).filter(|s| !s.is_empty()).map(str::to_string),
                duration_ms,
            })
        })();
        match row {
            Ok(o) => out.push(o),
            Err(reason) => rejects.push(Reject { line: line_of(&rec), reason }),
        }
    }
    Ok((out, rejects))
}

/// Reject report rows: `(source, line, reason)`; `line` is empty for
/// problems not tied to an input row.
pub fn write_rejects<W: Write>(out: W, rows: &[(String, Option<u64>, String)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["source", "line", "reason"])?;
    for (source, line, reason) in rows {
        w.write_record([source.clone(), line.map(|l| l.to_string()).unwrap_or_default(), reason.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// Ranked table, one row per score card in the given order.
pub fn write_score_cards<W: Write>(out: W, cards: &[ScoreCard]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["rank", "algo_id", "included", "total", "relevance", "performance", "d_order", "d_stock", "n_observations"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(BenchmarkKind::ALL.iter().map(|k| format!("z_{k}")));
    w.write_record(&header)?;
    for (i, c) in cards.iter().enumerate() {
        let mut row = vec![
            (i + 1).to_string(),
            c.algo_id.clone(),
            c.included.to_string(),
            c.total.to_string(),
            c.relevance.to_string(),
            c.performance.to_string(),
            c.d_order.to_string(),
            c.d_stock.to_string(),
            c.n_observations.to_string(),
        ];
        row.extend(BenchmarkKind::ALL.iter().map(|k| c.bounded_z.get(k).map(f64::to_string).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per retained draw: `chain` then one column per parameter.
pub fn write_posterior<W: Write>(out: W, samples: &PosteriorSamples) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(std::iter::once("chain".to_string()).chain(samples.names.iter().cloned()))?;
    for (row, c) in samples.draws.iter().zip(&samples.chain) {
        w.write_record(std::iter::once(c.to_string()).chain(row.iter().map(f64::to_string)))?;
    }
    w.flush()?;
    Ok(())
}

/// Diagnostics are recomputed from the draws; the acceptance rate is not
/// stored in the CSV and comes back as NaN.
pub fn read_posterior<R: Read>(input: R) -> Result<PosteriorSamples> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("chain") || headers.len() < 2 {
        return Err(TcaError::Data("posterior CSV must start with a 'chain' column".into()));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut draws = Vec::new();
    let mut chain = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let bad = |what: &str| TcaError::Data(format!("line {line}: bad {what}"));
        chain.push(rec[0].parse::<usize>().map_err(|_| bad("chain"))?);
        draws.push(rec.iter().skip(1).map(|v| v.parse::<f64>().map_err(|_| bad("draw"))).collect::<Result<Vec<f64>>>()?);
    }
    Ok(PosteriorSamples::from_draws(names, draws, chain))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamps() {
        assert_eq!(parse_timestamp_ms("1970-01-01T00:00:01Z").unwrap(), 1000);
        assert_eq!(parse_timestamp_ms("1970-01-01T00:00:01.250").unwrap(), 1250);
        assert_eq!(parse_timestamp_ms("1970-01-01T01:00:00+01:00").unwrap(), 0);
        assert!(parse_timestamp_ms("yesterday").is_err());
        assert_eq!(format_timestamp_ms(1250), "1970-01-01T00:00:01.250Z");
    }

    const HEADER: &str = "order_id,algo_id,side,arrival_price,start_time,end_time,fill_time,fill_price,fill_qty,size_shares,adv_shares,participation_rate_pct,volatility_pct,spread_bps\n";

    #[test]
    fn executions_grouped_with_rejects() {
        let csv = format!(
            "{HEADER}\
             o1,A,buy,100,2024-01-02T14:30:00Z,2024-01-02T14:40:00Z,2024-01-02T14:31:00Z,100.1,600,1000,100000,10,30,5\n\
             o1,A,buy,100,2024-01-02T14:30:00Z,2024-01-02T14:40:00Z,2024-01-02T14:35:00Z,100.2,400,1000,100000,10,30,5\n\
             o2,B,sell,50,2024-01-02T14:30:00Z,2024-01-02T14:40:00Z,not-a-time,50,100,100,100000,10,30,5\n\
             o3,B,sell,50,2024-01-02T14:30:00Z,2024-01-02T14:40:00Z,2024-01-02T14:35:00Z,50,90,100,100000,10,30,5\n"
        );
        let (orders, rejects) = read_executions(csv.as_bytes()).unwrap();
        assert_eq!(orders.len(), 1);
        assert_eq!(orders[0].fills.len(), 2);
        assert_eq!(orders[0].side, Side::Buy);
        assert_eq!(rejects.iter().map(|r| r.line).collect::<Vec<_>>(), vec![4, 5]);
    }

    #[test]
    fn missing_column_is_an_error() {
        assert!(read_executions("order_id,algo_id\nx,y\n".as_bytes()).is_err());
    }

    #[test]
    fn tape_sorted_and_selected() {
        let csv = "symbol,timestamp,price,volume\nX,1970-01-01T00:00:02Z,10,5\nX,1970-01-01T00:00:01Z,11,5\nX,1970-01-01T00:00:03Z,-1,5\n";
        let (book, rejects) = read_tape(csv.as_bytes()).unwrap();
        assert_eq!(book["X"].iter().map(|t| t.timestamp_ms).collect::<Vec<_>>(), vec![1000, 2000]);
        assert_eq!(rejects.len(), 1);
        assert_eq!(rejects[0].line, 4);
    }

    #[test]
    fn observations_round_trip() {
        let obs = vec![
            BenchmarkObservation { y: -12.5, kind: BenchmarkKind::PWP20, x1: 0.01, x2: 25.0, x3: 30.0, x4: 10.0, algo_id: "A".into(), order_id: Some("o1".into()), duration_ms: Some(600_000) },
            BenchmarkObservation { y: 0.1 + 0.2, kind: BenchmarkKind::IS, x1: 1e-3, x2: 1.0, x3: 10.0, x4: 2.0, algo_id: "B".into(), order_id: None, duration_ms: None },
        ];
        let mut buf = Vec::new();
        write_observations(&mut buf, &obs).unwrap();
        let (back, rejects) = read_observations(buf.as_slice()).unwrap();
        assert!(rejects.is_empty());
        assert_eq!(back, obs);
    }

    #[test]
    fn posterior_round_trip() {
        let s = PosteriorSamples::from_draws(vec!["a".into(), "b[X]".into()], vec![vec![1.0, 0.1], vec![2.0, -0.3], vec![1.5, 1e-300], vec![0.5, 7.0]], vec![0, 0, 1, 1]);
        let mut buf = Vec::new();
        write_posterior(&mut buf, &s).unwrap();
        let back = read_posterior(buf.as_slice()).unwrap();
        assert_eq!(back.names, s.names);
        assert_eq!(back.draws, s.draws);
        assert_eq!(back.chain, s.chain);
    }
}
