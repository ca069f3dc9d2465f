use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use shrimp::coverage::{canonical_bundle, sectionize};
use shrimp::diagnosis::find_confusions;
use shrimp::frontend::{
    attack_to_json, bundle_from_json, bundle_to_dot, bundle_to_text, diagnosis_to_json, trace_to_json, Diagnosis,
};
use shrimp::protocol::{parse_protocol, render_protocol, Protocol};
use shrimp::repair::{diagnose_and_patch, repair_loop, RepairConfig, RepairError, RuleChoice};
use shrimp::theory::{parse_theory, ImplTheory};
use shrimp::verifier::{verify, Scenario};

// stdout writes that drop closed-pipe errors
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = write!(std::io::stdout().lock(), $($arg)*);
    }};
}

macro_rules! outln {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

const SECURE: u8 = 0;
const ATTACK: u8 = 1;
const NO_RULE: u8 = 2;
const INPUT: u8 = 3;

#[derive(Parser)]
#[command(name = "shrimp", version, about = "Find, diagnose and repair replay and type-flaw attacks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct Search {
    /// Implementation theory file; the free theory when absent
    #[arg(long)]
    theory: Option<PathBuf>,
    /// Instances per role
    #[arg(long, default_value_t = 2)]
    sessions: usize,
    /// Nesting bound for intruder-built messages
    #[arg(long, default_value_t = 12)]
    depth: usize,
    /// Give the intruder the session keys of an old run
    #[arg(long)]
    lost_key: bool,
    /// One instance per role, played by the principals the protocol names
    #[arg(long)]
    canonical: bool,
    /// States explored before giving up
    #[arg(long, default_value_t = 500_000)]
    node_cap: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    Json,
    Dot,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    Auto,
    Encode,
    Name,
    Bind,
}

impl From<Rule> for RuleChoice {
    fn from(r: Rule) -> RuleChoice {
        match r {
            Rule::Auto => RuleChoice::Auto,
            Rule::Encode => RuleChoice::Encode,
            Rule::Name => RuleChoice::Name,
            Rule::Bind => RuleChoice::Bind,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Search for an attack within the session bound
    Check {
        proto: PathBuf,
        #[command(flatten)]
        search: Search,
        #[arg(long, value_enum, default_value_t = Emit::Text)]
        emit: Emit,
    },
    /// Report the confusions of an attack bundle
    Diagnose {
        proto: PathBuf,
        attack: PathBuf,
        #[arg(long)]
        theory: Option<PathBuf>,
    },
    /// Patch the protocol against one attack and print the result
    Patch {
        proto: PathBuf,
        attack: PathBuf,
        #[arg(long, value_enum, default_value_t = Rule::Auto)]
        rule: Rule,
        #[arg(long)]
        theory: Option<PathBuf>,
    },
    /// Verify, diagnose and patch until no attack remains
    Repair {
        proto: PathBuf,
        #[command(flatten)]
        search: Search,
        #[arg(long, default_value_t = 8)]
        max_iters: usize,
        #[arg(long, value_enum, default_value_t = Rule::Auto)]
        rule: Rule,
        /// Directory for the trace, the repaired protocol and the attacks
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_protocol(path: &Path) -> Result<Protocol> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_protocol(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_theory(path: Option<&Path>) -> Result<ImplTheory> {
    let Some(path) = path else { return Ok(ImplTheory::free()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_theory(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_bundle(path: &Path) -> Result<shrimp::strand::Bundle> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    bundle_from_json(&text).with_context(|| format!("reading bundle from {}", path.display()))
}

fn scenario(p: &Protocol, s: &Search) -> Scenario {
    let mut sc = if s.canonical { Scenario::canonical(p) } else { Scenario { bound: s.sessions, ..Scenario::default() } };
    sc.depth = s.depth;
    sc.lost_key = s.lost_key;
    sc.node_cap = s.node_cap;
    sc
}

fn check(proto: &Path, search: &Search, emit: Emit) -> Result<u8> {
    let p = load_protocol(proto)?;
    let th = load_theory(search.theory.as_deref())?;
    let verdict = verify(&p, &th, &scenario(&p, search))?;
    info!("{} states explored", verdict.explored);
    let Some(attack) = verdict.attack else {
        outln!("secure: no attack on {} within the bound ({} states)", p.name, verdict.explored);
        return Ok(SECURE);
    };
    match emit {
        Emit::Json => outln!("{}", attack_to_json(&attack)),
        Emit::Dot => out!("{}", bundle_to_dot(&attack.bundle)),
        Emit::Text => {
            outln!("attack on {}: goal `{}` fails ({} states)", p.name, attack.goal, verdict.explored);
            out!("{}", bundle_to_text(&attack.bundle));
        }
    }
    Ok(ATTACK)
}

fn diagnose(proto: &Path, attack: &Path, theory: Option<&Path>) -> Result<u8> {
    let p = load_protocol(proto)?;
    let th = load_theory(theory)?;
    let b = load_bundle(attack)?;
    let c = canonical_bundle(&p)?;
    let coverage = sectionize(&b, &c)?;
    let confusions = find_confusions(&b, &c, &coverage, &th);
    outln!("{}", diagnosis_to_json(&Diagnosis { coverage, confusions }));
    Ok(SECURE)
}

fn patch(proto: &Path, attack: &Path, rule: Rule, theory: Option<&Path>) -> Result<u8> {
    let p = load_protocol(proto)?;
    let th = load_theory(theory)?;
    let b = load_bundle(attack)?;
    match diagnose_and_patch(&p, &b, &th, rule.into()) {
        Ok((_, patch)) => {
            info!("applied {:?} at {}", patch.rule, patch.confusion.at);
            out!("{}", render_protocol(&patch.protocol));
            Ok(SECURE)
        }
        Err(e) => no_rule(e),
    }
}

fn no_rule(e: RepairError) -> Result<u8> {
    match e {
        RepairError::NoApplicableRule
        | RepairError::NotApplicable { .. }
        | RepairError::NoCandidate
        | RepairError::MaxIterations(_) => {
            eprintln!("shrimp: {e}");
            Ok(NO_RULE)
        }
        e => Err(e.into()),
    }
}

fn repair(proto: &Path, search: &Search, max_iters: usize, rule: Rule, out: Option<&Path>) -> Result<u8> {
    let p = load_protocol(proto)?;
    let th = load_theory(search.theory.as_deref())?;
    let cfg = RepairConfig { scenario: scenario(&p, search), max_iters, rule: rule.into() };
    let result = repair_loop(&p, &th, &cfg);
    let (steps, outcome) = match &result {
        Ok(t) => (&t.steps, Ok(t)),
        Err((e, steps)) => (steps, Err(e.to_string())),
    };
    for (i, s) in steps.iter().enumerate() {
        outln!("iteration {}: goal `{}` fails, applying {:?} at {}", i + 1, s.attack.goal, s.patch.rule, s.patch.confusion.at);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("trace.json"), trace_to_json(steps, outcome.clone()))?;
        for (i, s) in steps.iter().enumerate() {
            fs::write(dir.join(format!("attack_{}.json", i + 1)), attack_to_json(&s.attack))?;
            fs::write(dir.join(format!("attack_{}.dot", i + 1)), bundle_to_dot(&s.attack.bundle))?;
        }
        if let Ok(t) = outcome {
            fs::write(dir.join("repaired.proto"), render_protocol(&t.repaired))?;
        }
    }
    match result {
        Ok(t) => {
            outln!("secure after {} iteration(s) ({} states)", t.steps.len(), t.explored);
            out!("{}", render_protocol(&t.repaired));
            Ok(SECURE)
        }
        Err((e, _)) => no_rule(e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let r = match &cli.cmd {
        Cmd::Check { proto, search, emit } => check(proto, search, *emit),
        Cmd::Diagnose { proto, attack, theory } => diagnose(proto, attack, theory.as_deref()),
        Cmd::Patch { proto, attack, rule, theory } => patch(proto, attack, *rule, theory.as_deref()),
        Cmd::Repair { proto, search, max_iters, rule, out } => repair(proto, search, *max_iters, *rule, out.as_deref()),
    };
    match r {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("shrimp: {e:#}");
            ExitCode::from(INPUT)
        }
    }
}
