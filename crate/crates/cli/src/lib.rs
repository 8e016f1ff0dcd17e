//! Command-line front end for memattr snapshot files.
//!
//! Everything is reachable through [`run`], which takes the argument list and
//! two writers and returns the process exit code.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use memattr::query::depth_of;
use memattr::{
    check_budgets, diff, rollup_all, top_n, verify_drained, BudgetSet, DrainError, Execution,
    RankKey, RankMode, RollupCell, Snapshot,
};

pub const EXIT_OK: i32 = 0;
/// A budget was exceeded or a verified path still holds live allocations.
pub const EXIT_FINDINGS: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
/// An input file could not be read or parsed.
pub const EXIT_PARSE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "memattr",
    version,
    about = "Inspect memory attribution snapshots"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the attribution tree with rolled-up totals.
    Report {
        snapshot: PathBuf,
        /// Hide subtrees whose rolled-up live bytes are below this.
        #[arg(long, default_value_t = 0)]
        min_bytes: u64,
        /// Deepest level to print; the root is level 0.
        #[arg(long)]
        depth: Option<usize>,
        /// Print byte columns with binary units.
        #[arg(long)]
        human: bool,
    },
    /// Print the largest entries.
    Top {
        snapshot: PathBuf,
        #[arg(short, long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value = "live")]
        key: RankKey,
        #[arg(long, default_value = "self")]
        mode: RankMode,
    },
    /// Print per-path changes between two snapshots.
    Diff {
        before: PathBuf,
        after: PathBuf,
        #[arg(long, default_value = "live")]
        key: RankKey,
    },
    /// Check rolled-up live bytes against a budgets file.
    Check { snapshot: PathBuf, budgets: PathBuf },
    /// Check that nothing is live under each path.
    Verify {
        snapshot: PathBuf,
        #[arg(required = true)]
        paths: Vec<String>,
    },
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn parse(path: &Path, e: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_PARSE,
            message: format!("{}: {e}", path.display()),
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command) {
        Ok((text, code)) => {
            if out.write_all(text.as_bytes()).is_err() {
                return EXIT_USAGE;
            }
            code
        }
        Err(f) => {
            let _ = writeln!(err, "memattr: {}", f.message);
            f.code
        }
    }
}

fn load_snapshot(path: &Path) -> Result<Snapshot, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::parse(path, e))?;
    Snapshot::deserialize(&bytes).map_err(|e| Failure::parse(path, e))
}

fn execute(command: Command) -> Result<(String, i32), Failure> {
    match command {
        Command::Report {
            snapshot,
            min_bytes,
            depth,
            human,
        } => {
            let snap = load_snapshot(&snapshot)?;
            let opts = ReportOptions {
                min_bytes,
                max_depth: depth,
                human,
            };
            Ok((render_report(&snap, &opts), EXIT_OK))
        }
        Command::Top {
            snapshot,
            n,
            key,
            mode,
        } => {
            let snap = load_snapshot(&snapshot)?;
            Ok((render_top(&snap, n as usize, key, mode), EXIT_OK))
        }
        Command::Diff { before, after, key } => {
            let a = load_snapshot(&before)?;
            let b = load_snapshot(&after)?;
            Ok((render_diff(&a, &b, key), EXIT_OK))
        }
        Command::Check { snapshot, budgets } => {
            let snap = load_snapshot(&snapshot)?;
            let text =
                std::fs::read_to_string(&budgets).map_err(|e| Failure::parse(&budgets, e))?;
            let set = BudgetSet::parse(&text).map_err(|e| Failure::parse(&budgets, e))?;
            Ok(render_check(&snap, &set))
        }
        Command::Verify { snapshot, paths } => {
            let snap = load_snapshot(&snapshot)?;
            render_verify(&snap, &paths).map_err(|message| Failure {
                code: EXIT_USAGE,
                message,
            })
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReportOptions {
    pub min_bytes: u64,
    pub max_depth: Option<usize>,
    pub human: bool,
}

fn format_bytes(n: u64, human: bool) -> String {
    if !human || n < 1024 {
        return n.to_string();
    }
    let units = ["KiB", "MiB", "GiB", "TiB", "PiB", "EiB"];
    let mut value = n as f64 / 1024.0;
    let mut unit = 0;
    while value >= 1024.0 && unit + 1 < units.len() {
        value /= 1024.0;
        unit += 1;
    }
    format!("{value:.1} {}", units[unit])
}

fn last_segment(path: &str) -> &str {
    path.rsplit('/').next().unwrap_or("")
}

/// Renders the tree view: a summary line, a column header, then one row per
/// path in depth-first order with children by rolled-up live bytes.
pub fn render_report(snap: &Snapshot, opts: &ReportOptions) -> String {
    let h = &snap.header;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "total_live_bytes={} global_peak_bytes={} unmatched_frees={} sampling_rate={} enabled={}",
        h.total_live_bytes, h.global_peak_bytes, h.unmatched_frees, h.sampling_rate, h.enabled
    );
    let _ = writeln!(
        s,
        "{:>12} {:>12} {:>10} {:>12}  PATH",
        "ROLLUP", "SELF", "COUNT", "CUMULATIVE"
    );
    if snap.is_empty() {
        s.push_str("(no allocations)\n");
        return s;
    }

    let rollups = rollup_all(snap, Execution::default());
    let mut children: std::collections::BTreeMap<&str, Vec<(&str, RollupCell)>> =
        Default::default();
    for (path, cell) in &rollups {
        if path == "/" {
            continue;
        }
        let parent = match path.rfind('/') {
            Some(0) => "/",
            Some(i) => &path[..i],
            None => continue,
        };
        children
            .entry(parent)
            .or_default()
            .push((path.as_str(), *cell));
    }
    for list in children.values_mut() {
        list.sort_by(|a, b| {
            b.1.live_bytes
                .cmp(&a.1.live_bytes)
                .then_with(|| last_segment(a.0).cmp(last_segment(b.0)))
        });
    }

    let mut stack: Vec<(&str, RollupCell)> = vec![("/", rollups["/"])];
    while let Some((path, cell)) = stack.pop() {
        let depth = depth_of(path);
        if cell.live_bytes < opts.min_bytes {
            continue;
        }
        if opts.max_depth.is_some_and(|d| depth > d) {
            continue;
        }
        let self_live = snap.node(path).map_or(0, |n| n.cell.live_bytes);
        let _ = writeln!(
            s,
            "{:>12} {:>12} {:>10} {:>12}  {}{}",
            format_bytes(cell.live_bytes, opts.human),
            format_bytes(self_live, opts.human),
            cell.live_count,
            format_bytes(cell.cumulative_bytes, opts.human),
            "  ".repeat(depth),
            path
        );
        if let Some(kids) = children.get(path) {
            stack.extend(kids.iter().rev().copied());
        }
    }
    s
}

/// One `path value` line per ranked entry.
pub fn render_top(snap: &Snapshot, n: usize, key: RankKey, mode: RankMode) -> String {
    let mut s = String::new();
    for r in top_n(snap, n.max(1), key, mode).unwrap_or_default() {
        let _ = writeln!(s, "{} {}", r.path, r.value);
    }
    s
}

/// Signed changes of every path whose key counter moved, largest first.
pub fn render_diff(before: &Snapshot, after: &Snapshot, key: RankKey) -> String {
    let d = diff(before, after);
    let ranked = d.ranked(key);
    if ranked.is_empty() {
        return "(no change)\n".to_owned();
    }
    let mut s = String::new();
    for (path, delta) in ranked {
        let _ = writeln!(s, "{path} {delta:+}");
    }
    s
}

/// Budget report and exit code.
pub fn render_check(snap: &Snapshot, budgets: &BudgetSet) -> (String, i32) {
    let over = check_budgets(snap, budgets, Execution::default());
    if over.is_empty() {
        return ("OK\n".to_owned(), EXIT_OK);
    }
    let mut s = String::new();
    for e in over {
        let _ = writeln!(
            s,
            "{} limit={} actual={} over={}",
            e.path, e.limit, e.actual, e.overshoot
        );
    }
    (s, EXIT_FINDINGS)
}

/// Drain report and exit code; an invalid path is a usage error.
pub fn render_verify(snap: &Snapshot, paths: &[String]) -> Result<(String, i32), String> {
    let mut s = String::new();
    let mut code = EXIT_OK;
    for path in paths {
        match verify_drained(snap, path) {
            Ok(()) => {
                let _ = writeln!(s, "drained {path}");
            }
            Err(DrainError::Failure(f)) => {
                code = EXIT_FINDINGS;
                let _ = writeln!(
                    s,
                    "LEAK {path} live_bytes={} live_count={}",
                    f.live_bytes, f.live_count
                );
            }
            Err(DrainError::Path(e)) => return Err(format!("invalid path {path:?}: {e}")),
        }
    }
    Ok((s, code))
}

/// Runs with the process arguments and standard streams.
pub fn main_with_std() -> i32 {
    let stdout = io::stdout();
    let stderr = io::stderr();
    let mut out = stdout.lock();
    let mut err = stderr.lock();
    let code = run(std::env::args_os(), &mut out, &mut err);
    let _ = out.flush();
    code
}
