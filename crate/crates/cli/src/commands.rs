use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use rankaudit::detgreedy::{detgreedy_rerank, ScoredCandidate};
use rankaudit::exposure::{page_grid, MetricCurve, MetricKind};
use rankaudit::format::format_real;
use rankaudit::infer::{label_dataset, load_name_table, write_name_table, NameKey};
use rankaudit::ingest::{filter_queries, load_baselines, load_dataset_path, write_dataset, Baselines, ValidationReport};
use rankaudit::report::{
    audit_dataset, churn_dataset, curve_rows, write_churn_rows, write_ledger, write_metric_rows, write_protocol,
    DayPairs, HeatmapMatrix, OutputFormat, Targets,
};
use rankaudit::sim::{generate, inject_topk_bias, synthetic_name_table, PostProcess, ScoreModel, SimConfig};
use rankaudit::stats::{churn_protocol, minskew_observations, minskew_protocol, ProtocolReport, BENCHMARK_MINSKEW};
use rankaudit::{GroupProportions, GroupScheme, QuerySeries, RankingSnapshot};
use serde::Serialize;

use crate::config::Config;
use crate::{
    AuditArgs, ChurnArgs, Cli, Command, ExportArgs, FilterArgs, Format, GridArgs, Key, LabelArgs, MinskewArgs, Pairs,
    Post, RerankArgs, SimulateArgs, StatsCommand,
};

pub const THREADS_ENV: &str = "RANKAUDIT_THREADS";
const DEFAULT_PAGE: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Clean,
    /// Output was produced, but some input snapshots were rejected.
    Quarantined,
}

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: &'a Config,
    format: OutputFormat,
    /// Set only when the scheme was given by flag or config.
    explicit_scheme: Option<GroupScheme>,
    scheme: GroupScheme,
}

pub fn run(cli: &Cli, cfg: &Config) -> Result<Outcome> {
    init_threads(cfg)?;
    let ctx = Ctx::new(cli, cfg)?;
    match &cli.command {
        Command::Validate { data } => ctx.validate(data),
        Command::Label(a) => ctx.label(a),
        Command::Audit(a) => ctx.audit(a),
        Command::Churn(a) => ctx.churn(a),
        Command::Rerank(a) => ctx.rerank(a),
        Command::Stats(StatsCommand::MinskewProtocol(a)) => ctx.minskew_protocol(a),
        Command::Stats(StatsCommand::ChurnProtocol(a)) => ctx.churn_protocol(a),
        Command::Simulate(a) => ctx.simulate(a),
        Command::Export(a) => ctx.export(a),
    }
}

/// The environment variable wins over the config file; 0 means no cap.
fn init_threads(cfg: &Config) -> Result<()> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?,
        ),
        Err(_) => cfg.threads,
    };
    if let Some(n) = threads.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn parse_pairs(p: Option<Pairs>, cfg: Option<&str>) -> Result<DayPairs> {
    Ok(match (p, cfg) {
        (Some(Pairs::FromFirst), _) => DayPairs::FromFirst,
        (Some(Pairs::Consecutive), _) => DayPairs::Consecutive,
        (None, None) | (None, Some("from-first")) => DayPairs::FromFirst,
        (None, Some("consecutive")) => DayPairs::Consecutive,
        (None, Some(other)) => bail!("unknown pairs `{other}` in config (from-first | consecutive)"),
    })
}

/// `LABEL=SHARE,...`.
fn parse_shares(text: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (label, share) = part
            .split_once('=')
            .ok_or_else(|| anyhow!("target `{part}` is not LABEL=SHARE"))?;
        let share: f64 = share.trim().parse().with_context(|| format!("share in `{part}`"))?;
        if out.insert(label.trim().to_string(), share).is_some() {
            bail!("label `{}` given twice", label.trim());
        }
    }
    Ok(out)
}

fn regroup(snapshots: Vec<RankingSnapshot>) -> Result<Vec<QuerySeries>> {
    let mut by_query: BTreeMap<String, Vec<RankingSnapshot>> = BTreeMap::new();
    for s in snapshots {
        by_query.entry(s.query_id().to_string()).or_default().push(s);
    }
    by_query
        .into_iter()
        .map(|(q, s)| QuerySeries::new(q, s).map_err(Into::into))
        .collect()
}

impl<'a> Ctx<'a> {
    fn new(cli: &'a Cli, cfg: &'a Config) -> Result<Self> {
        let format = match (cli.format, cfg.format.as_deref()) {
            (Some(Format::Csv), _) => OutputFormat::Csv,
            (Some(Format::Json), _) => OutputFormat::Json,
            (None, Some(f)) => f.parse()?,
            (None, None) => OutputFormat::Csv,
        };
        let attribute = cli.attribute.clone().or_else(|| cfg.attribute.clone());
        let labels = cli.labels.clone().or_else(|| cfg.labels.clone());
        let unknown = cli.unknown_label.clone().or_else(|| cfg.unknown_label.clone());
        let explicit_scheme = if attribute.is_some() || labels.is_some() || unknown.is_some() {
            let default = GroupScheme::binary_gender();
            Some(GroupScheme::new(
                attribute.unwrap_or_else(|| default.attribute().to_string()),
                labels.unwrap_or_else(|| default.labels().to_vec()),
                unknown.unwrap_or_else(|| default.unknown_label().to_string()),
            )?)
        } else {
            None
        };
        let scheme = explicit_scheme.clone().unwrap_or_else(GroupScheme::binary_gender);
        Ok(Self {
            cli,
            cfg,
            format,
            explicit_scheme,
            scheme,
        })
    }

    fn output(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.cli.out {
            Some(p) => Box::new(BufWriter::new(
                File::create(p).with_context(|| format!("creating {}", p.display()))?,
            )),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }

    fn emit<T: Serialize>(&self, value: &T) -> Result<()> {
        let mut w = self.output()?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    fn load(&self, path: &Path) -> Result<(Vec<QuerySeries>, ValidationReport, Outcome)> {
        let (series, report) = load_dataset_path(path).with_context(|| format!("loading {}", path.display()))?;
        for e in &report.parse_errors {
            warn!("{}:{}: {}", path.display(), e.line, e.reason);
        }
        for q in &report.quarantined {
            for e in &q.issues {
                warn!(
                    "{}:{}: quarantined {} day {}: {}",
                    path.display(),
                    e.line,
                    q.query_id,
                    q.day,
                    e.reason
                );
            }
        }
        let outcome = if report.is_clean() { Outcome::Clean } else { Outcome::Quarantined };
        Ok((series, report, outcome))
    }

    fn load_filtered(&self, path: &Path, f: &FilterArgs) -> Result<(Vec<QuerySeries>, Outcome)> {
        let (series, _, outcome) = self.load(path)?;
        let max_missing = f.max_missing_rate.or(self.cfg.max_missing_rate);
        let min_pool = f.min_pool.or(self.cfg.min_pool);
        if max_missing.is_none() && min_pool.is_none() {
            return Ok((series, outcome));
        }
        let (kept, manifest) = filter_queries(series, max_missing.unwrap_or(1.0), min_pool.unwrap_or(0))?;
        for d in manifest.dropped() {
            info!("dropped {}: {}", d.query_id, d.reason.as_deref().unwrap_or("filtered"));
        }
        info!("{} queries kept, {} dropped", kept.len(), manifest.dropped().count());
        Ok((kept, outcome))
    }

    fn baselines(&self, flag: Option<&Path>) -> Result<Option<Baselines>> {
        let Some(path) = flag.or(self.cfg.baseline.as_deref()) else {
            return Ok(None);
        };
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        Ok(Some(load_baselines(file, &self.scheme).with_context(|| format!("reading {}", path.display()))?))
    }

    /// Explicit cutoffs, else page boundaries up to the longest list.
    fn grid(&self, g: &GridArgs, series: &[QuerySeries]) -> Result<Vec<usize>> {
        let ks = match g.ks.clone().or_else(|| self.cfg.ks.clone()) {
            Some(ks) => ks,
            None => {
                let longest = series
                    .iter()
                    .flat_map(|s| s.snapshots().values())
                    .map(RankingSnapshot::len)
                    .max()
                    .unwrap_or(0);
                page_grid(longest, g.page.or(self.cfg.page).unwrap_or(DEFAULT_PAGE))
            }
        };
        check_ks(&ks)?;
        Ok(ks)
    }

    fn validate(&self, data: &Path) -> Result<Outcome> {
        let (_, report, outcome) = self.load(data)?;
        match self.format {
            OutputFormat::Json => self.emit(&report)?,
            OutputFormat::Csv => {
                let mut w = csv::WriterBuilder::new()
                    .terminator(csv::Terminator::Any(b'\n'))
                    .from_writer(self.output()?);
                w.write_record(["query_id", "day", "entries", "missing", "missing_rate"])?;
                for m in &report.missing {
                    w.write_record([
                        m.query_id.clone(),
                        m.day.to_string(),
                        m.entries.to_string(),
                        m.missing.to_string(),
                        format_real(m.missing_rate),
                    ])?;
                }
                w.flush()?;
            }
        }
        eprintln!(
            "{} lines, {} snapshots accepted, {} quarantined, {} parse errors",
            report.lines_read,
            report.missing.len(),
            report.quarantined.len(),
            report.parse_errors.len()
        );
        Ok(outcome)
    }

    fn label(&self, a: &LabelArgs) -> Result<Outcome> {
        let tables = if a.tables.is_empty() {
            self.cfg.name_tables.clone().unwrap_or_default()
        } else {
            a.tables.clone()
        };
        if tables.is_empty() {
            bail!("no name tables given (--table or name_tables in the config)");
        }
        let chain = tables
            .iter()
            .map(|p| {
                let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
                load_name_table(f, &self.scheme).with_context(|| format!("reading {}", p.display()))
            })
            .collect::<Result<Vec<_>>>()?;
        let key = match (a.key, self.cfg.name_key.as_deref()) {
            (Some(Key::First), _) | (None, None | Some("first")) => NameKey::FirstName,
            (Some(Key::Full), _) | (None, Some("full")) => NameKey::FullName,
            (None, Some(other)) => bail!("unknown name_key `{other}` in config (first | full)"),
        };
        let (series, _, outcome) = self.load(&a.data)?;
        let snaps: Vec<RankingSnapshot> = series.iter().flat_map(|s| s.snapshots().values().cloned()).collect();
        let (labeled, coverage) = label_dataset(&snaps, &self.scheme, &chain, key)?;
        let mut w = self.output()?;
        write_dataset(&regroup(labeled)?, &mut w)?;
        w.flush()?;
        eprintln!(
            "coverage: {} of {} non-missing candidates resolved ({})",
            coverage.resolved,
            coverage.non_missing,
            format_real(coverage.fraction())
        );
        Ok(outcome)
    }

    fn audit(&self, a: &AuditArgs) -> Result<Outcome> {
        let (series, outcome) = self.load_filtered(&a.data, &a.filter)?;
        let baselines = self.baselines(a.baseline.as_deref())?;
        let targets = baselines.as_ref().map_or(Targets::ObservedPool, Targets::Baseline);
        let ks = a.ks.clone().or_else(|| self.cfg.ks.clone());
        if let Some(ks) = &ks {
            check_ks(ks)?;
        }
        let out = audit_dataset(&series, &self.scheme, targets, ks.as_deref());
        for s in &out.skipped {
            warn!("skipped {} day {}: {}", s.query_id, s.day, s.reason);
        }
        write_metric_rows(&curve_rows(&out.curves), self.format, self.output()?)?;
        Ok(outcome)
    }

    fn churn(&self, a: &ChurnArgs) -> Result<Outcome> {
        let (series, outcome) = self.load_filtered(&a.data, &a.filter)?;
        let ks = self.grid(&a.grid, &series)?;
        let pairs = parse_pairs(a.pairs, self.cfg.pairs.as_deref())?;
        let cells = churn_dataset(&series, &self.scheme, &ks, pairs)?;
        write_churn_rows(&cells, self.format, self.output()?)?;
        Ok(outcome)
    }

    fn rerank(&self, a: &RerankArgs) -> Result<Outcome> {
        let file = File::open(&a.pool).with_context(|| format!("opening {}", a.pool.display()))?;
        let mut rdr = csv::Reader::from_reader(file);
        let pool = rdr
            .deserialize::<ScoredCandidate>()
            .enumerate()
            .map(|(i, r)| r.with_context(|| format!("{}: record {}", a.pool.display(), i + 1)))
            .collect::<Result<Vec<_>>>()?;
        let props = if a.targets.trim() == "observed" {
            let mut counts = vec![0usize; self.scheme.len()];
            for c in &pool {
                let i = self
                    .scheme
                    .index_of(&c.label)
                    .ok_or_else(|| anyhow!("label `{}` of `{}` is not in the scheme", c.label, c.candidate_id))?;
                counts[i] += 1;
            }
            GroupProportions::from_counts(self.scheme.clone(), &counts)?
        } else {
            GroupProportions::external(self.scheme.clone(), &parse_shares(&a.targets)?)?
        };
        let result = detgreedy_rerank(&pool, &props)?;
        let score: BTreeMap<&str, f64> = pool.iter().map(|c| (c.candidate_id.as_str(), c.score)).collect();

        #[derive(Serialize)]
        struct Slot<'r> {
            rank: usize,
            candidate_id: &'r str,
            label: &'r str,
            score: f64,
        }
        let slots: Vec<Slot> = result
            .order
            .iter()
            .zip(&result.labels)
            .enumerate()
            .map(|(i, (id, label))| Slot {
                rank: i + 1,
                candidate_id: id,
                label,
                score: score[id.as_str()],
            })
            .collect();
        match self.format {
            OutputFormat::Csv => {
                let mut w = csv::WriterBuilder::new()
                    .terminator(csv::Terminator::Any(b'\n'))
                    .from_writer(self.output()?);
                w.write_record(["rank", "candidate_id", "label", "score"])?;
                for s in &slots {
                    w.write_record([s.rank.to_string(), s.candidate_id.into(), s.label.into(), format_real(s.score)])?;
                }
                w.flush()?;
            }
            OutputFormat::Json => {
                #[derive(Serialize)]
                struct Report<'r> {
                    ranking: &'r [Slot<'r>],
                    feasible: bool,
                    violations: &'r [rankaudit::detgreedy::Violation],
                    forced_positions: &'r [usize],
                    first_exhaustion: Option<usize>,
                }
                self.emit(&Report {
                    ranking: &slots,
                    feasible: result.feasible,
                    violations: &result.violation_positions,
                    forced_positions: &result.forced_positions,
                    first_exhaustion: result.first_exhaustion,
                })?;
            }
        }
        if result.feasible {
            eprintln!("feasible: every prefix within its floor and ceiling bounds");
        } else {
            eprintln!("infeasible: {} bound violations", result.violation_positions.len());
            for v in &result.violation_positions {
                eprintln!(
                    "  k={} {} {:?}: count {} vs bound {}",
                    v.k, v.label, v.kind, v.count, v.bound
                );
            }
        }
        if let Some(k) = result.first_exhaustion {
            eprintln!("a group ran out of candidates below its floor at position {k}");
        }
        Ok(Outcome::Clean)
    }

    fn write_protocol_report(&self, report: &ProtocolReport) -> Result<()> {
        for s in &report.summaries {
            info!(
                "k={}: {} observations over {} queries, excluded {} undefined and {} -inf, tau2 {} sigma2 {}",
                s.k,
                s.n_obs,
                s.n_groups,
                s.excluded_undefined,
                s.excluded_neg_inf,
                format_real(s.tau2),
                format_real(s.sigma2)
            );
            for w in &s.warnings {
                warn!("k={}: {w}", s.k);
            }
        }
        write_protocol(report, self.format, self.output()?)?;
        Ok(())
    }

    fn minskew_protocol(&self, a: &MinskewArgs) -> Result<Outcome> {
        let (series, outcome) = self.load_filtered(&a.data, &a.filter)?;
        let ks = self.grid(&a.grid, &series)?;
        let baselines = self.baselines(a.baseline.as_deref())?;
        let targets = baselines.as_ref().map_or(Targets::ObservedPool, Targets::Baseline);
        let null = a.null.or(self.cfg.null_value).unwrap_or(BENCHMARK_MINSKEW);
        let (obs, skipped) = minskew_observations(&series, &self.scheme, &ks, |s| targets.for_snapshot(s, &self.scheme));
        if skipped > 0 {
            warn!("{skipped} snapshots skipped: targets could not be formed");
        }
        self.write_protocol_report(&minskew_protocol(&obs, null)?)?;
        Ok(outcome)
    }

    fn churn_protocol(&self, a: &ChurnArgs) -> Result<Outcome> {
        let (series, outcome) = self.load_filtered(&a.data, &a.filter)?;
        let ks = self.grid(&a.grid, &series)?;
        let pairs = parse_pairs(a.pairs, self.cfg.pairs.as_deref())?;
        let cells = churn_dataset(&series, &self.scheme, &ks, pairs)?;
        self.write_protocol_report(&churn_protocol(&cells, &self.scheme)?)?;
        Ok(outcome)
    }

    fn sim_config(&self, a: &SimulateArgs) -> SimConfig {
        let mut sim = self.cfg.simulate.clone().unwrap_or_default();
        sim.seed = a.seed;
        if let Some(scheme) = &self.explicit_scheme {
            if scheme.len() != sim.scheme.len() {
                let m = scheme.len();
                sim.shares = vec![1.0 / m as f64; m];
                sim.scores = vec![ScoreModel::default(); m];
                sim.departure = vec![sim.departure.first().copied().unwrap_or(0.0); m];
            }
            sim.scheme = scheme.clone();
        }
        if let Some(v) = a.queries {
            sim.n_queries = v;
        }
        if let Some(v) = a.days {
            sim.days = v;
        }
        if let Some(v) = a.pool_min {
            sim.pool_size.0 = v;
        }
        if let Some(v) = a.pool_max {
            sim.pool_size.1 = v;
        }
        if let Some(v) = &a.shares {
            sim.shares = v.clone();
        }
        if let Some(v) = a.share_jitter {
            sim.share_jitter = v;
        }
        if let Some(v) = &a.departure {
            sim.departure = v.clone();
        }
        if let Some(v) = a.missing_rate {
            sim.missing_rate = v;
        }
        if let Some(p) = a.postprocess {
            sim.postprocess = match p {
                Post::None => PostProcess::None,
                Post::Detgreedy => PostProcess::Detgreedy,
            };
        }
        sim.names |= a.names;
        sim
    }

    fn simulate(&self, a: &SimulateArgs) -> Result<Outcome> {
        let sim = self.sim_config(a);
        let mut out = generate(&sim)?;
        if let Some(label) = &a.bias_label {
            // Bias draws use their own per-query streams under the same seed.
            let mut biased = Vec::with_capacity(out.series.len());
            for s in &out.series {
                let (b, record) = inject_topk_bias(s, &sim.scheme, label, a.bias_strength, a.bias_depth, sim.seed)?;
                biased.push(b);
                out.ledger.records.push(record);
            }
            out.series = biased;
        }
        let mut w = self.output()?;
        write_dataset(&out.series, &mut w)?;
        w.flush()?;
        if let Some(p) = &a.ledger {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            let mut w = BufWriter::new(f);
            write_ledger(&out.ledger, &mut w)?;
            w.flush()?;
        }
        if let Some(p) = &a.name_table {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_name_table(&synthetic_name_table(&sim.scheme), BufWriter::new(f))?;
        }
        eprintln!(
            "generated {} queries x {} days (seed {})",
            out.series.len(),
            sim.days,
            sim.seed
        );
        Ok(Outcome::Clean)
    }

    fn export(&self, a: &ExportArgs) -> Result<Outcome> {
        let metric = MetricKind::parse(&a.metric).ok_or_else(|| {
            anyhow!(
                "unknown metric `{}` (deviation | skew | corrected_skew | minskew | churn)",
                a.metric
            )
        })?;
        if metric != MetricKind::MinSkew && a.label.is_none() {
            bail!("--label is required for {metric}");
        }
        let (series, outcome) = self.load_filtered(&a.data, &a.filter)?;
        let ks = self.grid(&a.grid, &series)?;
        let matrix = if metric == MetricKind::Churn {
            let pairs = parse_pairs(a.pairs, self.cfg.pairs.as_deref())?;
            let cells = churn_dataset(&series, &self.scheme, &ks, pairs)?;
            HeatmapMatrix::from_churn(&cells, a.label.as_deref().unwrap_or_default())?
        } else {
            let baselines = self.baselines(a.baseline.as_deref())?;
            let targets = baselines.as_ref().map_or(Targets::ObservedPool, Targets::Baseline);
            let out = audit_dataset(&series, &self.scheme, targets, Some(&ks));
            for s in &out.skipped {
                warn!("skipped {} day {}: {}", s.query_id, s.day, s.reason);
            }
            let label = if metric == MetricKind::MinSkew { None } else { a.label.as_deref() };
            let curves: Vec<&MetricCurve> = out
                .curves
                .iter()
                .filter(|c| c.metric == metric && c.label.as_deref() == label)
                .filter(|c| a.day.is_none_or(|d| c.day == d))
                .collect();
            if curves.is_empty() {
                bail!("no {metric} curves to export");
            }
            HeatmapMatrix::from_curves(&curves)?
        };
        matrix.write(self.format, self.output()?)?;
        Ok(outcome)
    }
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() {
        bail!("empty cutoff grid (lists shorter than one page? pass --ks)");
    }
    if ks.contains(&0) {
        bail!("cutoffs start at 1");
    }
    Ok(())
}
