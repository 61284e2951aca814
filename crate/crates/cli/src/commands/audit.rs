use deepinsight_core::audit::{read_pool, stratified_sample, AuditError, AuditStore, HumanScores};
use serde::Deserialize;
use serde_json::json;

use super::{read_text, Ctx};
use crate::args::AuditCommand;
use crate::error::{failure, CliError, CliResult};

/// One line of a human-score file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreLine {
    sample_id: String,
    reviewer_id: String,
    scores: HumanScores,
}

pub fn run(ctx: &Ctx, command: AuditCommand) -> CliResult {
    match command {
        AuditCommand::Sample {
            pool,
            per_stratum,
            store,
        } => {
            let items = read_pool(&pool).map_err(failure)?;
            let drawn = stratified_sample(&items, per_stratum, ctx.seed).map_err(|e| match e {
                AuditError::InvalidQuota => CliError::Usage(e.to_string()),
                e => failure(e),
            })?;
            let mut store = AuditStore::open(&store).map_err(failure)?;
            let n = drawn.len();
            let added = store.add_samples(drawn).map_err(failure)?;
            if ctx.json {
                return ctx.print_json(
                    &json!({"drawn": n, "added": added, "pending": store.pending_count()}),
                );
            }
            println!(
                "drew {n} samples, added {added}, {} pending",
                store.pending_count()
            );
            Ok(())
        }
        AuditCommand::Ingest {
            scores,
            store,
            replace,
        } => {
            let text = read_text(&scores)?;
            let mut store = AuditStore::open(&store).map_err(failure)?;
            let mut ingested = 0;
            let mut errors = Vec::new();
            for (i, line) in text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
            {
                let result = serde_json::from_str::<ScoreLine>(line)
                    .map_err(|e| e.to_string())
                    .and_then(|s| {
                        store
                            .ingest_human_score(&s.sample_id, &s.reviewer_id, s.scores, replace)
                            .map_err(|e| e.to_string())
                    });
                match result {
                    Ok(_) => ingested += 1,
                    Err(e) => errors.push((i + 1, e)),
                }
            }
            if ctx.json {
                let errs: Vec<_> = errors
                    .iter()
                    .map(|(l, m)| json!({"line": l, "message": m}))
                    .collect();
                ctx.print_json(&json!({"ingested": ingested, "errors": errs}))?;
            } else {
                println!("ingested {ingested}, {} error(s)", errors.len());
                for (line, message) in &errors {
                    eprintln!("line {line}: {message}");
                }
            }
            if errors.is_empty() {
                Ok(())
            } else {
                Err(CliError::Failure(format!(
                    "{} line(s) rejected",
                    errors.len()
                )))
            }
        }
        AuditCommand::Report { store } => {
            let store = AuditStore::open(&store).map_err(failure)?;
            let report = store.calibration_report().map_err(failure)?;
            if ctx.json {
                return ctx.print_json(&report);
            }
            println!(
                "{:<9} {:>4} {:>7} {:>7} {:>7}",
                "bin", "n", "llm", "human", "diff"
            );
            for row in &report.rows {
                println!(
                    "{:<9} {:>4} {:>7.3} {:>7.3} {:>+7.3}",
                    row.bin.label(),
                    row.samples,
                    row.llm_mean,
                    row.human_mean,
                    row.difference
                );
            }
            match report.correlation {
                Some(r) => println!("scored {}, correlation {r:.4}", report.total_scored),
                None => println!("scored {}, correlation n/a", report.total_scored),
            }
            Ok(())
        }
    }
}
