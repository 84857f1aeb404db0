use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use litextract_core::engine::{task_id_for, CheckpointError, EngineEvent, TaskProgress};
use litextract_core::export::{export, ExportFormat, ExportJob};
use litextract_core::mapping::{default_rules, map_columns};
use litextract_core::store::LocalStore;
use litextract_core::table::parse_bytes;
use litextract_core::{BatchEngine, RunPlan, RunState};

use crate::{config, ExtractArgs, EXIT_CANCELLED, EXIT_OK, EXIT_SOME_FAILED};

const REDRAW_EVERY: Duration = Duration::from_millis(250);

/// Renders the progress line on stderr.
struct ProgressLine {
    tty: bool,
    quiet: bool,
    last: Mutex<Option<Instant>>,
}

impl ProgressLine {
    fn new(quiet: bool) -> Self {
        Self {
            tty: std::io::stderr().is_terminal(),
            quiet,
            last: Mutex::new(None),
        }
    }

    fn on_event(&self, event: &EngineEvent) {
        match event {
            EngineEvent::RecordCompleted { progress, .. } => {
                let finished = progress.processed == progress.total;
                let mut last = self.last.lock().unwrap_or_else(|p| p.into_inner());
                let due = last.is_none_or(|t| t.elapsed() >= REDRAW_EVERY);
                if !self.quiet && (due || finished) {
                    *last = Some(Instant::now());
                    self.draw(progress);
                }
            }
            EngineEvent::Warning { message } => self.message(&format!("warning: {message}")),
            _ => {}
        }
    }

    fn draw(&self, p: &TaskProgress) {
        let line = render(p);
        let mut err = std::io::stderr().lock();
        if self.tty {
            let _ = write!(err, "\r\x1b[2K{line}");
        } else {
            let _ = writeln!(err, "{line}");
        }
        let _ = err.flush();
    }

    fn message(&self, text: &str) {
        let mut err = std::io::stderr().lock();
        if self.tty {
            let _ = write!(err, "\r\x1b[2K");
        }
        let _ = writeln!(err, "{text}");
    }

    fn finish(&self) {
        if self.tty && !self.quiet {
            eprintln!();
        }
    }
}

pub fn render(p: &TaskProgress) -> String {
    let eta = match p.eta_seconds {
        Some(s) => format!("{}s", s.round() as u64),
        None => "--".to_string(),
    };
    format!(
        "processed {}/{}  succeeded {}  failed {}  ETA {}  tokens ~{}",
        p.processed, p.total, p.succeeded, p.failed, eta, p.token_estimate
    )
}

fn default_output(input: &Path, format: ExportFormat) -> PathBuf {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    input.with_file_name(format!("{stem}_extracted.{}", format.extension()))
}

fn output_format(args: &ExtractArgs) -> ExportFormat {
    args.format
        .or_else(|| {
            args.out
                .as_ref()
                .and_then(|p| p.extension())
                .and_then(|e| e.to_str())
                .and_then(|e| e.parse().ok())
        })
        .unwrap_or(ExportFormat::Csv)
}

pub async fn run(store: &LocalStore, args: ExtractArgs) -> Result<u8> {
    let bytes = std::fs::read(&args.input).with_context(|| format!("cannot read {}", args.input.display()))?;
    let name = args.input.file_name().and_then(|n| n.to_str()).unwrap_or("input");
    let table = parse_bytes(name, &bytes).with_context(|| format!("cannot parse {}", args.input.display()))?;
    let mapping = map_columns(table.columns(), &default_rules());
    let schema = config::resolve_schema(&args.schema, Some((&table, &mapping)))?;
    let cfg = config::resolve_provider(store, &args.provider)?;
    let backend = config::backend(store, &cfg)?;
    let format = output_format(&args);
    let out = args.out.clone().unwrap_or_else(|| default_output(&args.input, format));

    let plan = RunPlan::build(task_id_for(&bytes), &table, &mapping, &schema, cfg.provider, &cfg.settings.model)?;
    let total = plan.total();
    let checkpoints = store.checkpoints();
    let resume = if args.resume {
        match checkpoints.load(&plan.task_id, &plan.config_digest) {
            Ok(cp) => {
                eprintln!("resuming: {} of {total} records already complete", cp.results.len());
                Some(cp)
            }
            Err(CheckpointError::NotFound(_)) => {
                eprintln!("no checkpoint for this input, starting from the first record");
                None
            }
            Err(e) => return Err(e).context("cannot resume"),
        }
    } else {
        None
    };

    let progress = std::sync::Arc::new(ProgressLine::new(args.quiet));
    let observer = std::sync::Arc::clone(&progress);
    let engine = BatchEngine::new(backend, cfg.settings.clone())
        .with_checkpoints(checkpoints.clone())
        .with_observer(move |ev: &EngineEvent| observer.on_event(ev));

    let run = engine.run(plan, resume);
    tokio::pin!(run);
    let mut interrupted = false;
    let outcome = loop {
        tokio::select! {
            outcome = &mut run => break outcome?,
            _ = tokio::signal::ctrl_c(), if !interrupted => {
                interrupted = true;
                progress.message("interrupted: cancelling and saving a checkpoint (Ctrl-C again to exit now)");
                engine.cancel();
                tokio::spawn(async {
                    if tokio::signal::ctrl_c().await.is_ok() {
                        std::process::exit(130);
                    }
                });
            }
        }
    };
    progress.finish();

    let p = &outcome.progress;
    if outcome.state == RunState::Cancelled {
        eprintln!(
            "cancelled after {} of {} records; resume with --resume (checkpoint in {})",
            p.processed,
            p.total,
            checkpoints.dir().display()
        );
        return Ok(EXIT_CANCELLED);
    }

    let job = ExportJob::new(args.mode, format).with_status(args.include_status);
    let data = export(&table, &outcome.results, schema.fields(), &job)?;
    std::fs::write(&out, data).with_context(|| format!("cannot write {}", out.display()))?;
    eprintln!(
        "wrote {} ({} succeeded, {} failed, ~{} tokens)",
        out.display(),
        p.succeeded,
        p.failed,
        p.token_estimate
    );
    Ok(if p.failed == 0 { EXIT_OK } else { EXIT_SOME_FAILED })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn progress_line_shows_all_counters() {
        let p = TaskProgress {
            total: 500,
            processed: 120,
            succeeded: 118,
            failed: 2,
            token_estimate: 51234,
            eta_seconds: Some(33.6),
            current_title: None,
            state: RunState::Running,
        };
        assert_eq!(
            render(&p),
            "processed 120/500  succeeded 118  failed 2  ETA 34s  tokens ~51234"
        );
    }

    #[test]
    fn default_output_sits_next_to_input() {
        let p = default_output(Path::new("/data/cnki.csv"), ExportFormat::Xlsx);
        assert_eq!(p, PathBuf::from("/data/cnki_extracted.xlsx"));
    }
}
