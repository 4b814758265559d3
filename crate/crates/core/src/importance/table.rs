use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER: [&str; 9] = [
    "site_id",
    "node_index",
    "channel",
    "score",
    "estimator",
    "source",
    "normalized",
    "data_size",
    "seed",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImportanceEntry {
    pub site_id: usize,
    pub node: usize,
    pub channel: usize,
    pub score: f64,
}

/// One score per prunable channel, in (site, channel) order, plus the
/// settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub entries: Vec<ImportanceEntry>,
    pub estimator: String,
    /// `"loss"`, `"random"`, or `"none"` for rankings that use no gradient.
    pub source: String,
    pub normalized: bool,
    pub data_size: usize,
    pub seed: u64,
}

/// Shortest decimal that parses back to the same bits.
pub fn format_score(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

impl ImportanceTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    /// Scores of one site in channel order.
    pub fn site_scores(&self, site_id: usize) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.site_id == site_id)
            .map(|e| e.score)
            .collect()
    }

    /// Score of `(site, channel)`.
    pub fn score(&self, site_id: usize, channel: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.site_id == site_id && e.channel == channel)
            .map(|e| e.score)
    }

    /// Rejects non-finite scores and repeated channels.
    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| !e.score.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite score {} at site {} channel {}",
                e.score, e.site_id, e.channel
            )));
        }
        let mut keys: Vec<(usize, usize)> = self.entries.iter().map(|e| (e.site_id, e.channel)).collect();
        keys.sort_unstable();
        if let Some(w) = keys.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Input(format!(
                "site {} channel {} appears twice",
                w[0].0, w[0].1
            )));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HEADER)?;
        let (size, seed) = (self.data_size.to_string(), self.seed.to_string());
        let normalized = self.normalized.to_string();
        for e in &self.entries {
            w.write_record([
                e.site_id.to_string().as_str(),
                &e.node.to_string(),
                &e.channel.to_string(),
                &format_score(e.score),
                &self.estimator,
                &self.source,
                &normalized,
                &size,
                &seed,
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<ImportanceTable> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header != HEADER {
            return Err(Error::Format {
                offset: 0,
                message: format!("importance header {header:?}, expected {HEADER:?}"),
            });
        }
        let mut table: Option<ImportanceTable> = None;
        for (row, record) in r.records().enumerate() {
            let record = record?;
            let offset = record.position().map_or(0, |p| p.byte());
            let field = |i: usize| record.get(i).unwrap_or("");
            let bad = |i: usize| Error::Format {
                offset,
                message: format!("row {}: bad {} `{}`", row + 1, HEADER[i], field(i)),
            };
            let entry = ImportanceEntry {
                site_id: field(0).parse().map_err(|_| bad(0))?,
                node: field(1).parse().map_err(|_| bad(1))?,
                channel: field(2).parse().map_err(|_| bad(2))?,
                score: field(3).parse().map_err(|_| bad(3))?,
            };
            let meta = (
                field(4).to_owned(),
                field(5).to_owned(),
                field(6).parse::<bool>().map_err(|_| bad(6))?,
                field(7).parse::<usize>().map_err(|_| bad(7))?,
                field(8).parse::<u64>().map_err(|_| bad(8))?,
            );
            match &mut table {
                None => {
                    table = Some(ImportanceTable {
                        entries: vec![entry],
                        estimator: meta.0,
                        source: meta.1,
                        normalized: meta.2,
                        data_size: meta.3,
                        seed: meta.4,
                    })
                }
                Some(t) => {
                    if (&t.estimator, &t.source, t.normalized, t.data_size, t.seed)
                        != (&meta.0, &meta.1, meta.2, meta.3, meta.4)
                    {
                        return Err(Error::Format {
                            offset,
                            message: format!("row {}: metadata differs from the first row", row + 1),
                        });
                    }
                    t.entries.push(entry);
                }
            }
        }
        let table = table.ok_or_else(|| Error::Format {
            offset: 0,
            message: "importance table has no rows".into(),
        })?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<ImportanceTable> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Ranks starting at 1, ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation between two tables over the same channels.
pub fn rank_correlation(a: &ImportanceTable, b: &ImportanceTable) -> Result<f64> {
    let key = |e: &ImportanceEntry| (e.site_id, e.channel);
    if a.len() != b.len() || a.entries.iter().zip(&b.entries).any(|(x, y)| key(x) != key(y)) {
        return Err(Error::Input(
            "rank correlation needs tables over the same channels".into(),
        ));
    }
    let (ra, rb) = (average_ranks(&a.scores()), average_ranks(&b.scores()));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Input("rank correlation of a constant table".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(scores: &[f64]) -> ImportanceTable {
        ImportanceTable {
            entries: scores
                .iter()
                .enumerate()
                .map(|(i, &score)| ImportanceEntry {
                    site_id: i / 2,
                    node: 3 * (i / 2),
                    channel: i % 2,
                    score,
                })
                .collect(),
            estimator: "taylorfo_sq".into(),
            source: "random".into(),
            normalized: true,
            data_size: 10,
            seed: 7,
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let t = table(&[0.1, -0.0, 1e-300, 123456.789, f64::MAX, f64::MIN_POSITIVE, 1.0 / 3.0, 2.5e-6]);
        let text = t.to_csv_string().unwrap();
        assert!(text.starts_with("site_id,node_index,channel,score,estimator,source,normalized,data_size,seed\n"));
        let back = ImportanceTable::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back.len(), t.len());
        for (a, b) in back.entries.iter().zip(&t.entries) {
            assert_eq!(a.score.to_bits(), b.score.to_bits());
        }
        assert_eq!(back.to_csv_string().unwrap(), text);
    }

    #[test]
    fn malformed_csv() {
        assert!(matches!(ImportanceTable::read_csv("a,b\n1,2\n".as_bytes()), Err(Error::Format { .. })));
        let mut text = table(&[1.0, 2.0]).to_csv_string().unwrap();
        text = text.replace("1,taylorfo_sq", "x,taylorfo_sq");
        assert!(matches!(ImportanceTable::read_csv(text.as_bytes()), Err(Error::Format { .. })));
        let header_only = HEADER.join(",") + "\n";
        assert!(ImportanceTable::read_csv(header_only.as_bytes()).is_err());
    }

    #[test]
    fn validation() {
        assert!(table(&[1.0, f64::NAN]).validate().is_err());
        let mut t = table(&[1.0, 2.0]);
        t.entries[1].channel = 0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn spearman() {
        let a = table(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rank_correlation(&a, &table(&[10.0, 20.0, 30.0, 40.0])).unwrap(), 1.0);
        assert_eq!(rank_correlation(&a, &table(&[4.0, 3.0, 2.0, 1.0])).unwrap(), -1.0);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert!(rank_correlation(&a, &table(&[1.0, 1.0, 1.0, 1.0])).is_err());
    }
}
