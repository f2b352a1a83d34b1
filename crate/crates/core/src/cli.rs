//! Command-line front end.
//!
//! Every subcommand loads all of its inputs before writing anything, writes
//! its tables into `--out-dir` and finishes with a `manifest.json` naming the
//! inputs, outputs, seed and tool version.
//!
//! Exit codes: 0 success, 1 usage error, 2 input error, 3 analysis
//! precondition unmet.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::capture::{write_capture, LinkType};
use crate::fingerprint::{default_profiles, load_profiles, resend_count_distribution, FingerprintConfig, FingerprintError};
use crate::ingest::{ingest_file, sanitize, sessionize, FilterConfig, PrefixTable, ScannerList, DEFAULT_IDLE_GAP, UNKNOWN_OPERATOR};
use crate::offnet::{classify, evaluate, features_by_source, metrics_table, FeatureConfig, GroundTruth, RuleSet};
use crate::probe::{
    cluster_vips, curve_table, detect_lb_type, discovery_curve, harvest_host_ids, harvest_table, probe_echo, LbProbeConfig,
    LbTypeVerdict, ProbeCampaign, SimTransport,
};
use crate::report::{build_report, fingerprint_store, nybble_table, scid_length_table, sources_by_country, uniformity_table, CountryMap};
use crate::scid::{
    classify_scheme, decode_facebook_scid, nybble_frequencies, parse_pair_list, parse_scid_list, scid_length_stats,
    uniformity_test, UniformityConfig,
};
use crate::sim::{simulate_flood, Deployment, DeploymentConfig, ScidSchemeKind, DEFAULT_DEPLOYMENT};
use crate::store::{SessionStore, StoreCounters};
use crate::table::{fixed, Format, Table};
use crate::wire::{ConnectionId, PlausibilityPolicy, VersionRegistry};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_PRECONDITION: i32 = 3;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "quicscope", version, about = "Measure QUIC deployments from backscatter and active probes")]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    /// Settings file (TOML) with analysis parameters and default paths.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Tsv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify, sanitize and sessionize a capture into a session store.
    Ingest(IngestArgs),
    /// Version, coalescence, length and retransmission analysis of a store.
    Fingerprint(FingerprintArgs),
    /// Nybble statistics and scheme classification of server CIDs.
    Scid(ScidArgs),
    /// Off-net detection rules over per-source features.
    Classify(ClassifyArgs),
    /// Flood a simulated deployment with spoofed Initials.
    Simulate(SimulateArgs),
    /// Active campaigns against a deployment.
    Probe(ProbeArgs),
    /// Summary tables over one or more session stores.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub capture: PathBuf,
    /// `prefix<TAB>asn<TAB>operator` lines.
    #[arg(long)]
    pub prefixes: PathBuf,
    /// Acknowledged scanner prefixes or addresses, one per line.
    #[arg(long)]
    pub scanners: Option<PathBuf>,
    /// Version registry (`hex_version<TAB>label`); the bundled one otherwise.
    #[arg(long)]
    pub versions: Option<PathBuf>,
    /// Reject versions missing from the registry.
    #[arg(long)]
    pub strict: bool,
    /// Seconds of silence that end a session.
    #[arg(long)]
    pub idle_gap: Option<f64>,
    /// Store directory; `<out-dir>/store` by default.
    #[arg(long)]
    pub store: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    /// Probed (client DCID, server CID) pairs for one operator, `OPERATOR=PATH`.
    #[arg(long = "pairs", value_parser = parse_operator_path)]
    pub pairs: Vec<(String, PathBuf)>,
    /// Directory of `<operator>.tsv` pair files.
    #[arg(long)]
    pub pairs_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FingerprintArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Known profiles (TOML); the bundled table otherwise.
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    #[command(flatten)]
    pub pairs: PairsArgs,
    #[arg(long)]
    pub versions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScidArgs {
    /// Session store; SCIDs are analysed per operator.
    #[arg(long, conflicts_with = "scids")]
    pub store: Option<PathBuf>,
    /// Hex SCIDs, one per line.
    #[arg(long)]
    pub scids: Option<PathBuf>,
    /// `client_dcid<TAB>server_scid` pairs for echo detection.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Restrict a store analysis to one operator.
    #[arg(long)]
    pub operator: Option<String>,
    /// Also decode 8-octet SCIDs with the Facebook layout.
    #[arg(long)]
    pub decode_facebook: bool,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Rule file (TOML); the bundled rules otherwise.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Rules to apply; all by default.
    #[arg(long = "rule")]
    pub rule_names: Vec<String>,
    /// `ip<TAB>label` ground truth; enables the metrics table.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Classify every source, not only those outside the prefix table.
    #[arg(long)]
    pub all_sources: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportKind {
    /// Loopback into the simulated deployment.
    Sim,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Deployment description (TOML); the bundled one otherwise.
    #[arg(long)]
    pub deployment: Option<PathBuf>,
    /// Override the number of spoofed sources.
    #[arg(long)]
    pub sources: Option<u32>,
    /// Echo-probe handshakes per cluster written to `pairs/`.
    #[arg(long, default_value_t = 64)]
    pub echo_probes: usize,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub deployment: Option<PathBuf>,
    /// Campaign file (TOML); defaults otherwise.
    #[arg(long)]
    pub campaign: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TransportKind::Sim)]
    pub transport: TransportKind,
    /// Override handshakes per VIP.
    #[arg(long)]
    pub handshakes: Option<usize>,
    /// VIPs to harvest; the campaign targets, else every VIP with a
    /// decodable CID layout.
    #[arg(long = "target")]
    pub targets: Vec<IpAddr>,
    /// VIPs to test for CID-aware load balancing.
    #[arg(long = "lb-target")]
    pub lb_targets: Vec<IpAddr>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Session stores to summarise; none gives empty tables.
    #[arg(long = "store")]
    pub stores: Vec<PathBuf>,
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    #[command(flatten)]
    pub pairs: PairsArgs,
    #[arg(long)]
    pub versions: Option<PathBuf>,
    /// `prefix<TAB>country` mapping for a per-country source count.
    #[arg(long)]
    pub countries: Option<PathBuf>,
}

fn parse_operator_path(s: &str) -> Result<(String, PathBuf), String> {
    let (op, path) = s.split_once('=').ok_or("expected OPERATOR=PATH")?;
    Ok((op.to_string(), PathBuf::from(path)))
}

/// Settings file. Paths are relative to the file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub idle_gap: Option<f64>,
    pub strict: bool,
    pub fingerprint: FingerprintConfig,
    pub uniformity: UniformityConfig,
    pub min_rto_sessions: Option<usize>,
    pub lb_probe: LbProbeConfig,
    pub versions: Option<PathBuf>,
    pub profiles: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub deployment: Option<PathBuf>,
    pub campaign: Option<PathBuf>,
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let mut s: Settings = toml::from_str(&crate::read_text(path)?).map_err(|e| Error::Config(format!("settings: {e}")))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut s.versions, &mut s.profiles, &mut s.rules, &mut s.deployment, &mut s.campaign]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(s)
    }

    fn feature_config(&self) -> FeatureConfig {
        let d = FeatureConfig::default();
        FeatureConfig {
            min_rto_sessions: self.min_rto_sessions.unwrap_or(d.min_rto_sessions),
            fingerprint: self.fingerprint,
            uniformity: self.uniformity,
        }
    }
}

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_files: Vec<String>,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
}

struct Run<'a> {
    cli: &'a Cli,
    manifest: RunManifest,
}

impl<'a> Run<'a> {
    fn new(cli: &'a Cli, subcommand: &str, settings_file: Option<&Path>) -> Self {
        Run {
            cli,
            manifest: RunManifest {
                subcommand: subcommand.into(),
                config_files: settings_file.map(display).into_iter().collect(),
                seed: cli.seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
            },
        }
    }

    fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(display(p));
    }

    fn config(&mut self, p: &Path) {
        self.manifest.config_files.push(display(p));
    }

    fn out_dir(&self) -> Result<&Path, Error> {
        let dir = &self.cli.out_dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(dir)
    }

    fn table(&mut self, stem: &str, t: &Table) -> Result<(), Error> {
        let path = t.write(self.out_dir()?, stem, self.cli.format)?;
        self.manifest.outputs.push(display(&path));
        Ok(())
    }

    fn output(&mut self, p: &Path) {
        self.manifest.outputs.push(display(p));
    }

    fn finish(self) -> Result<(), Error> {
        let path = self.out_dir()?.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// Runs the tool on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_precondition() {
                EXIT_PRECONDITION
            } else {
                EXIT_INPUT
            }
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), Error> {
    let settings = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    let cfg = cli.config.as_deref();
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(Run::new(cli, "ingest", cfg), &settings, a),
        Command::Fingerprint(a) => cmd_fingerprint(Run::new(cli, "fingerprint", cfg), &settings, a),
        Command::Scid(a) => cmd_scid(Run::new(cli, "scid", cfg), &settings, a),
        Command::Classify(a) => cmd_classify(Run::new(cli, "classify", cfg), &settings, a),
        Command::Simulate(a) => cmd_simulate(Run::new(cli, "simulate", cfg), &settings, a),
        Command::Probe(a) => cmd_probe(Run::new(cli, "probe", cfg), &settings, a),
        Command::Report(a) => cmd_report(Run::new(cli, "report", cfg), &settings, a),
    }
}

fn load_registry(run: &mut Run, flag: Option<&PathBuf>, settings: &Settings) -> Result<VersionRegistry, Error> {
    match flag.or(settings.versions.as_ref()) {
        Some(p) => {
            run.config(p);
            VersionRegistry::load(p)
        }
        None => Ok(VersionRegistry::default()),
    }
}

fn load_known_profiles(run: &mut Run, flag: Option<&PathBuf>, settings: &Settings) -> Result<Vec<crate::fingerprint::FingerprintProfile>, Error> {
    match flag.or(settings.profiles.as_ref()) {
        Some(p) => {
            run.config(p);
            load_profiles(p)
        }
        None => Ok(default_profiles()),
    }
}

fn load_pairs(run: &mut Run, a: &PairsArgs) -> Result<BTreeMap<String, Vec<(ConnectionId, ConnectionId)>>, Error> {
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    if let Some(dir) = &a.pairs_dir {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut found = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|x| x == "tsv") {
                if let Some(op) = path.file_stem().and_then(|s| s.to_str()) {
                    found.push((op.to_string(), path.clone()));
                }
            }
        }
        found.sort();
        files.extend(found);
    }
    files.extend(a.pairs.iter().cloned());
    let mut out: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for (op, path) in files {
        run.input(&path);
        out.entry(op).or_default().extend(parse_pair_list(&crate::read_text(&path)?)?);
    }
    Ok(out)
}

fn load_deployment(run: &mut Run, flag: Option<&PathBuf>, settings: &Settings) -> Result<DeploymentConfig, Error> {
    match flag.or(settings.deployment.as_ref()) {
        Some(p) => {
            run.config(p);
            DeploymentConfig::load(p)
        }
        None => DeploymentConfig::parse(DEFAULT_DEPLOYMENT),
    }
}

fn cmd_ingest(mut run: Run, settings: &Settings, a: &IngestArgs) -> Result<(), Error> {
    run.input(&a.capture);
    run.input(&a.prefixes);
    let prefixes = PrefixTable::load(&a.prefixes)?;
    let scanners = match &a.scanners {
        Some(p) => {
            run.input(p);
            ScannerList::load(p)?
        }
        None => ScannerList::default(),
    };
    let registry = load_registry(&mut run, a.versions.as_ref(), settings)?;
    let policy = if a.strict || settings.strict {
        PlausibilityPolicy::strict()
    } else {
        PlausibilityPolicy::default()
    };
    let idle_gap = a.idle_gap.or(settings.idle_gap).unwrap_or(DEFAULT_IDLE_GAP);
    if !(idle_gap > 0.0) {
        return Err(Error::Config("idle gap must be positive".into()));
    }
    let (records, ingest_counters) = ingest_file(&a.capture, &FilterConfig { registry, policy })?;
    let (records, sanitize_counters) = sanitize(records, &scanners);
    let sessions = sessionize(&records, idle_gap);
    let counters = StoreCounters {
        ingest: ingest_counters,
        sanitize: sanitize_counters,
        removed_fraction: sanitize_counters.removed_fraction(),
        sessions: sessions.len() as u64,
    };
    let store = SessionStore::build(records, &prefixes, sessions, counters);
    let dir = a.store.clone().unwrap_or_else(|| run.cli.out_dir.join("store"));
    for p in store.write(&dir)? {
        run.output(&p);
    }
    let mut t = Table::new(["counter", "value"]);
    let c = &counters;
    for (k, v) in [
        ("frames", c.ingest.frames),
        ("malformed", c.ingest.malformed),
        ("not_udp", c.ingest.not_udp),
        ("non_quic_port", c.ingest.non_quic_port),
        ("implausible", c.ingest.implausible),
        ("records", c.ingest.records),
        ("sanitize_input", c.sanitize.input),
        ("sanitize_removed", c.sanitize.dropped_requests),
        ("sessions", c.sessions),
    ] {
        t.push(vec![json!(k), json!(v)]);
    }
    t.push(vec![json!("removed_fraction"), fixed(c.removed_fraction, 6)]);
    run.table("ingest_summary", &t)?;
    run.finish()
}

fn cmd_fingerprint(mut run: Run, settings: &Settings, a: &FingerprintArgs) -> Result<(), Error> {
    run.input(&a.store);
    let store = SessionStore::read(&a.store)?;
    let known = load_known_profiles(&mut run, a.profiles.as_ref(), settings)?;
    let pairs = load_pairs(&mut run, &a.pairs)?;
    let registry = load_registry(&mut run, a.versions.as_ref(), settings)?;
    let cfg = settings.fingerprint;
    let fp = fingerprint_store(&store, &known, &pairs, &cfg, &settings.uniformity);
    if fp.profiles.is_empty() {
        let have = store.sessions.len();
        return Err(FingerprintError::InsufficientData { have, need: cfg.min_sessions }.into());
    }
    let tables = build_report(&store, &known, &pairs, &registry, &cfg, &settings.uniformity);
    for (stem, t) in &tables {
        if *stem != "scid_lengths" {
            run.table(stem, t)?;
        }
    }
    let mut resends = Table::new(["operator", "resends", "sessions"]);
    for op in store.operators() {
        for (n, count) in resend_count_distribution(store.sessions_of(op), cfg.round_epsilon) {
            resends.push(vec![json!(op), json!(n), json!(count)]);
        }
    }
    run.table("resend_counts", &resends)?;
    run.finish()
}

fn scid_population_tables(
    run: &mut Run,
    label: &str,
    scids: &[ConnectionId],
    pairs: Option<&[(ConnectionId, ConnectionId)]>,
    cfg: &UniformityConfig,
    schemes: &mut Table,
) -> Result<(), Error> {
    let stem = |s: &str| format!("{s}_{}", label.to_lowercase().replace(|c: char| !c.is_ascii_alphanumeric(), "_"));
    let m = nybble_frequencies(scids)?;
    run.table(&stem("nybbles"), &nybble_table(&m))?;
    let scheme = match pairs {
        Some(p) => {
            let (dcids, echoed): (Vec<_>, Vec<_>) = p.iter().copied().unzip();
            classify_scheme(&echoed, Some(&dcids), cfg)?
        }
        None => classify_scheme(scids, None, cfg)?,
    };
    run.table(&stem("uniformity"), &uniformity_table(&uniformity_test(&m, cfg)?))?;
    let flagged = match &scheme {
        crate::scid::ScidScheme::Structured(p) => p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
        _ => String::new(),
    };
    schemes.push(vec![json!(label), json!(scids.len()), json!(scheme.name()), json!(flagged)]);
    Ok(())
}

fn facebook_table(scids: &[ConnectionId]) -> Table {
    let mut t = Table::new(["scid", "scid_version", "host_id", "worker_id", "process_id"]);
    for s in scids {
        if let Ok(f) = decode_facebook_scid(s) {
            t.push(vec![json!(s.to_hex()), json!(f.scid_version), json!(f.host_id), json!(f.worker_id), json!(f.process_id)]);
        }
    }
    t
}

fn cmd_scid(mut run: Run, settings: &Settings, a: &ScidArgs) -> Result<(), Error> {
    let cfg = settings.uniformity;
    let pairs = match &a.pairs {
        Some(p) => {
            run.input(p);
            Some(parse_pair_list(&crate::read_text(p)?)?)
        }
        None => None,
    };
    let mut populations: Vec<(String, Vec<ConnectionId>)> = Vec::new();
    let mut lengths = None;
    if let Some(dir) = &a.store {
        run.input(dir);
        let store = SessionStore::read(dir)?;
        let all: Vec<(&str, &ConnectionId)> = store
            .responses()
            .flat_map(|(op, r)| r.packets.iter().map(move |p| (op, &p.scid)))
            .collect();
        lengths = Some(scid_length_table(&scid_length_stats(all)));
        for (op, ids) in store.scids_by_operator() {
            if a.operator.as_deref().map_or(true, |want| want == op) {
                populations.push((op.to_string(), ids));
            }
        }
    } else if let Some(p) = &a.scids {
        run.input(p);
        populations.push(("input".into(), parse_scid_list(&crate::read_text(p)?)?));
    } else if let Some(pairs) = &pairs {
        populations.push(("input".into(), pairs.iter().map(|p| p.1).collect()));
    } else {
        return Err(Error::Config("scid needs --store, --scids or --pairs".into()));
    }
    if populations.is_empty() {
        return Err(Error::Config("no SCID population selected".into()));
    }
    // Validate every population before any output exists.
    for (_, ids) in &populations {
        nybble_frequencies(ids)?;
        if (ids.len() as u64) < cfg.min_samples && pairs.is_none() {
            return Err(crate::scid::ScidError::InsufficientSamples {
                have: ids.len() as u64,
                need: cfg.min_samples,
            }
            .into());
        }
    }
    let mut schemes = Table::new(["population", "scids", "scheme", "flagged_positions"]);
    let single = populations.len() == 1;
    for (label, ids) in &populations {
        let p = if single { pairs.as_deref() } else { None };
        scid_population_tables(&mut run, label, ids, p, &cfg, &mut schemes)?;
        if a.decode_facebook {
            run.table(&format!("facebook_fields_{}", label.to_lowercase()), &facebook_table(ids))?;
        }
    }
    run.table("scid_schemes", &schemes)?;
    if let Some(t) = lengths {
        run.table("scid_lengths", &t)?;
    }
    run.finish()
}

fn cmd_classify(mut run: Run, settings: &Settings, a: &ClassifyArgs) -> Result<(), Error> {
    run.input(&a.store);
    let store = SessionStore::read(&a.store)?;
    let rules = match a.rules.as_ref().or(settings.rules.as_ref()) {
        Some(p) => {
            run.config(p);
            RuleSet::load(p)?
        }
        None => RuleSet::shipped(),
    };
    let names: Vec<String> = if a.rule_names.is_empty() {
        rules.rule.iter().map(|r| r.name.clone()).collect()
    } else {
        a.rule_names.clone()
    };
    for n in &names {
        rules.get(n)?;
    }
    let truth = match &a.truth {
        Some(p) => {
            run.input(p);
            Some(GroundTruth::load(p)?)
        }
        None => None,
    };
    let ops = store.source_operators();
    let features: Vec<_> = features_by_source(store.records.iter().map(|r| &r.record), &store.sessions, &settings.feature_config())
        .into_values()
        .filter(|f| a.all_sources || ops.get(&f.source).copied() == Some(UNKNOWN_OPERATOR))
        .collect();

    let mut predictions = Table::new(["source", "rule", "predicted"]);
    let mut per_rule: Vec<(String, Vec<(IpAddr, String)>)> = Vec::new();
    for n in &names {
        let mut preds = Vec::with_capacity(features.len());
        for f in &features {
            let label = classify(f, &rules, n)?;
            predictions.push(vec![json!(f.source.to_string()), json!(n), json!(label)]);
            preds.push((f.source, label));
        }
        per_rule.push((n.clone(), preds));
    }
    let metrics = match &truth {
        Some(truth) => {
            let mut rows = Vec::new();
            for (n, preds) in &per_rule {
                let op = &rules.get(n)?.operator;
                rows.push((n.as_str(), evaluate(preds.iter().map(|(i, l)| (i, l.as_str())), truth, op)?));
            }
            Some(metrics_table(rows.iter().map(|(n, m)| (*n, m))))
        }
        None => None,
    };

    let mut ft = Table::new([
        "source",
        "scids",
        "scid_structured",
        "scid_scheme_match",
        "coalescence",
        "initial_rto_s",
        "backoff_base",
        "retransmissions_min",
        "retransmissions_max",
        "length_signatures",
        "low_host_id",
    ]);
    for f in &features {
        let rto = f.rto_signature;
        ft.push(vec![
            json!(f.source.to_string()),
            json!(f.scid_count),
            json!(f.scid_structured),
            json!(f.scid_scheme_match),
            json!(f.coalescence),
            rto.map_or(json!(null), |r| fixed(r.initial_rto, 3)),
            rto.map_or(json!(null), |r| fixed(r.backoff_base, 3)),
            json!(rto.map(|r| r.max_retransmissions.0)),
            json!(rto.map(|r| r.max_retransmissions.1)),
            json!(f.length_signature.len()),
            json!(f.low_host_id),
        ]);
    }
    run.table("features", &ft)?;
    run.table("predictions", &predictions)?;
    if let Some(m) = metrics {
        run.table("metrics", &m)?;
    }
    run.finish()
}

fn cmd_simulate(mut run: Run, settings: &Settings, a: &SimulateArgs) -> Result<(), Error> {
    let mut cfg = load_deployment(&mut run, a.deployment.as_ref(), settings)?;
    cfg.seed = run.cli.seed;
    if let Some(n) = a.sources {
        cfg.flood.sources = n;
    }
    let mut deployment = Deployment::build(&cfg)?;
    let flood = simulate_flood(&mut deployment, &cfg.flood, cfg.seed)?;

    let out = run.out_dir()?.to_path_buf();
    let pcap = out.join("backscatter.pcap");
    write_capture(&pcap, LinkType::Ethernet, &flood.datagrams)?;
    run.output(&pcap);

    let mut served = Table::new(["vip", "spoofed_source", "host_id", "scid", "client_dcid", "start", "planned_resends", "acked"]);
    for s in &flood.sessions {
        served.push(vec![
            json!(s.vip.to_string()),
            json!(s.spoofed_source.to_string()),
            json!(s.host_id),
            json!(s.scid.to_hex()),
            json!(s.client_dcid.to_hex()),
            fixed(s.start, 6),
            json!(s.planned_resends),
            json!(s.acked),
        ]);
    }
    run.table("served_sessions", &served)?;

    // Ground truth per VIP, for off-net rule evaluation.
    let mut truth = Table::new(["vip", "cluster", "operator", "routing", "instances"]);
    let mut labels = GroundTruth::default();
    for c in &deployment.clusters {
        for v in &c.vips {
            truth.push(vec![
                json!(v.to_string()),
                json!(c.name),
                json!(c.profile.operator),
                json!(format!("{:?}", c.routing_mode)),
                json!(c.l7lbs.len()),
            ]);
            labels.labels.insert(*v, c.profile.operator.clone());
        }
    }
    run.table("deployment", &truth)?;
    let truth_path = out.join("truth.tsv");
    std::fs::write(&truth_path, labels.to_text()).map_err(|e| Error::io(&truth_path, e))?;
    run.output(&truth_path);

    // What an active prober sees when it completes handshakes itself; the
    // only way to notice servers that echo the client's DCID.
    if a.echo_probes > 0 {
        let pairs_dir = out.join("pairs");
        std::fs::create_dir_all(&pairs_dir).map_err(|e| Error::io(&pairs_dir, e))?;
        let probe_deployment = Deployment::build(&cfg)?;
        let firsts: Vec<(String, IpAddr)> = probe_deployment.clusters.iter().map(|c| (c.profile.operator.clone(), c.vips[0])).collect();
        let mut transport = SimTransport::new(probe_deployment, cfg.seed);
        let mut by_op: BTreeMap<String, String> = BTreeMap::new();
        for (op, vip) in firsts {
            let pairs = probe_echo(vip, a.echo_probes, &mut transport, "198.51.100.1".parse().expect("literal"), 0.0, cfg.seed)?;
            let text = by_op.entry(op).or_default();
            for (d, s) in pairs {
                text.push_str(&format!("{}\t{}\n", d.to_hex(), s.to_hex()));
            }
        }
        for (op, text) in by_op {
            let p = pairs_dir.join(format!("{op}.tsv"));
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            run.output(&p);
        }
    }
    run.finish()
}

fn cmd_probe(mut run: Run, settings: &Settings, a: &ProbeArgs) -> Result<(), Error> {
    let TransportKind::Sim = a.transport;
    let mut cfg = load_deployment(&mut run, a.deployment.as_ref(), settings)?;
    cfg.seed = run.cli.seed;
    let mut campaign = match a.campaign.as_ref().or(settings.campaign.as_ref()) {
        Some(p) => {
            run.config(p);
            ProbeCampaign::load(p)?
        }
        None => ProbeCampaign {
            seed: run.cli.seed,
            ..ProbeCampaign::default()
        },
    };
    if let Some(n) = a.handshakes {
        campaign.handshakes_per_vip = n;
    }
    campaign.validate()?;
    let deployment = Deployment::build(&cfg)?;
    let targets: Vec<IpAddr> = if !a.targets.is_empty() {
        a.targets.clone()
    } else if !campaign.targets.is_empty() {
        campaign.targets.clone()
    } else {
        deployment
            .clusters
            .iter()
            .filter(|c| matches!(c.profile.scid_scheme, ScidSchemeKind::FacebookV1 | ScidSchemeKind::FacebookV2))
            .flat_map(|c| c.vips.iter().copied())
            .collect()
    };
    for t in targets.iter().chain(&a.lb_targets) {
        deployment.cluster_of(*t)?;
    }
    let mut transport = SimTransport::new(deployment, run.cli.seed);
    let mut harvests = Vec::with_capacity(targets.len());
    let mut clock = 0.0;
    for vip in &targets {
        harvests.push(harvest_host_ids(*vip, &campaign, &mut transport, clock)?);
        clock += campaign.handshakes_per_vip as f64 * campaign.inter_probe_gap;
    }
    let mut curves = Table::new(["vip", "handshakes", "fraction"]);
    for h in &harvests {
        let curve = discovery_curve(h)?;
        curves.rows.extend(curve_table(h.vip, &curve).rows);
    }
    let clusters = cluster_vips(&harvests, campaign.jaccard_threshold);

    let mut lb = Table::new(["vip", "verdict", "fail_window_s", "held_host_id", "follow_up_host_id", "follow_ups"]);
    for vip in &a.lb_targets {
        let r = detect_lb_type(*vip, &mut transport, &settings.lb_probe, campaign.codec, campaign.client_ip, clock, run.cli.seed)?;
        clock += settings.lb_probe.max_wait + 1.0;
        let (verdict, window) = match r.verdict {
            LbTypeVerdict::CidAware { fail_window } => ("CidAware", fixed(fail_window, 3)),
            LbTypeVerdict::FiveTuple => ("FiveTuple", json!(null)),
            LbTypeVerdict::Inconclusive => ("Inconclusive", json!(null)),
        };
        lb.push(vec![
            json!(vip.to_string()),
            json!(verdict),
            window,
            json!(r.held_host_id),
            json!(r.follow_up_host_id),
            json!(r.follow_ups),
        ]);
    }

    run.table("harvest", &harvest_table(&harvests))?;
    run.table("discovery_curve", &curves)?;
    run.table("vip_clusters", &clusters.to_table())?;
    if !a.lb_targets.is_empty() {
        run.table("lb_type", &lb)?;
    }
    run.finish()
}

fn cmd_report(mut run: Run, settings: &Settings, a: &ReportArgs) -> Result<(), Error> {
    let mut store = SessionStore::default();
    for dir in &a.stores {
        run.input(dir);
        store.merge(SessionStore::read(dir)?);
    }
    let known = load_known_profiles(&mut run, a.profiles.as_ref(), settings)?;
    let pairs = load_pairs(&mut run, &a.pairs)?;
    let registry = load_registry(&mut run, a.versions.as_ref(), settings)?;
    let countries = match &a.countries {
        Some(p) => {
            run.input(p);
            Some(CountryMap::load(p)?)
        }
        None => None,
    };
    let tables = build_report(&store, &known, &pairs, &registry, &settings.fingerprint, &settings.uniformity);
    for (stem, t) in &tables {
        run.table(stem, t)?;
    }
    if let Some(c) = countries {
        run.table("sources_by_country", &sources_by_country(&store, &c))?;
    }
    run.finish()
}
