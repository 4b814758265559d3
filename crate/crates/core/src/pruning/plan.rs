use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::importance::ImportanceTable;

pub const HEADER: [&str; 6] = ["rank", "site_id", "node_index", "channel", "score", "pruned"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedChannel {
    pub site_id: usize,
    pub node: usize,
    pub channel: usize,
    pub score: f64,
    pub pruned: bool,
}

/// Every prunable channel in ascending score order, with the chosen prune set.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunePlan {
    pub ranked: Vec<RankedChannel>,
    pub prune_count: usize,
    /// Candidates passed over because pruning them would empty their site.
    pub skipped: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RankOptions {
    /// Divide each site's scores by that site's largest absolute score
    /// before the global sort.
    pub per_site_max_normalize: bool,
}

/// Prunes the `p` lowest-scoring channels across all sites.
pub fn rank_global(table: &ImportanceTable, p: usize) -> Result<PrunePlan> {
    rank_global_with(table, p, RankOptions::default())
}

pub fn rank_global_with(table: &ImportanceTable, p: usize, options: RankOptions) -> Result<PrunePlan> {
    table.validate()?;
    let mut remaining: BTreeMap<usize, usize> = BTreeMap::new();
    let mut site_max: BTreeMap<usize, f64> = BTreeMap::new();
    for e in &table.entries {
        *remaining.entry(e.site_id).or_default() += 1;
        let m = site_max.entry(e.site_id).or_default();
        *m = m.max(e.score.abs());
    }
    let n = table.len();
    let max_p = n.saturating_sub(remaining.len());
    if p > max_p {
        return Err(Error::Input(format!(
            "cannot prune {p} of {n} channels over {} sites (at most {max_p})",
            remaining.len()
        )));
    }
    let key = |score: f64, site: usize| {
        if options.per_site_max_normalize && site_max[&site] > 0.0 {
            score / site_max[&site]
        } else {
            score
        }
    };
    let mut ranked: Vec<RankedChannel> = table
        .entries
        .iter()
        .map(|e| RankedChannel {
            site_id: e.site_id,
            node: e.node,
            channel: e.channel,
            score: e.score,
            pruned: false,
        })
        .collect();
    ranked.sort_by(|a, b| {
        key(a.score, a.site_id)
            .total_cmp(&key(b.score, b.site_id))
            .then(a.node.cmp(&b.node))
            .then(a.channel.cmp(&b.channel))
    });
    let mut skipped = Vec::new();
    let mut chosen = 0;
    for r in &mut ranked {
        if chosen == p {
            break;
        }
        let left = remaining.get_mut(&r.site_id).expect("counted above");
        if *left > 1 {
            *left -= 1;
            r.pruned = true;
            chosen += 1;
        } else {
            skipped.push((r.site_id, r.channel));
        }
    }
    Ok(PrunePlan {
        ranked,
        prune_count: p,
        skipped,
    })
}

impl PrunePlan {
    pub fn pruned(&self) -> impl Iterator<Item = &RankedChannel> {
        self.ranked.iter().filter(|r| r.pruned)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HEADER)?;
        for (i, r) in self.ranked.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                r.site_id.to_string(),
                r.node.to_string(),
                r.channel.to_string(),
                crate::importance::format_score(r.score),
                r.pruned.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads a plan back; skip records are not stored in the file.
    pub fn read_csv<R: Read>(input: R) -> Result<PrunePlan> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header != HEADER {
            return Err(Error::Format {
                offset: 0,
                message: format!("plan header {header:?}, expected {HEADER:?}"),
            });
        }
        let mut ranked = Vec::new();
        for (i, record) in r.records().enumerate() {
            let record = record?;
            let offset = record.position().map_or(0, |p| p.byte());
            let bad = |col: usize| Error::Format {
                offset,
                message: format!("plan row {}: bad {}", i + 1, HEADER[col]),
            };
            let field = |col: usize| record.get(col).unwrap_or("");
            if field(0).parse::<usize>().map_err(|_| bad(0))? != i + 1 {
                return Err(bad(0));
            }
            ranked.push(RankedChannel {
                site_id: field(1).parse().map_err(|_| bad(1))?,
                node: field(2).parse().map_err(|_| bad(2))?,
                channel: field(3).parse().map_err(|_| bad(3))?,
                score: field(4).parse().map_err(|_| bad(4))?,
                pruned: field(5).parse().map_err(|_| bad(5))?,
            });
        }
        let prune_count = ranked.iter().filter(|r| r.pruned).count();
        Ok(PrunePlan {
            ranked,
            prune_count,
            skipped: Vec::new(),
        })
    }
}
