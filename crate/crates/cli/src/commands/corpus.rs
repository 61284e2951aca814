use std::path::Path;

use deepinsight_core::corpus::{
    compute_stats, read_corpus, run_pipeline, scan_corpus, Cancellation, CorpusStats, PipelineError,
};
use deepinsight_core::curriculum::{emit_schedule, Schedule, ScheduleOptions, TargetSelection};
use deepinsight_core::PromptLibrary;
use serde_json::json;

use super::Ctx;
use crate::args::{AnnotateArgs, EmitStagesArgs, ScheduleArg, TargetArg};
use crate::error::{failure, CliError, CliResult};

pub async fn annotate(ctx: &Ctx, args: AnnotateArgs) -> CliResult {
    if !(0.0..=1.0).contains(&args.max_failure_rate) {
        return Err(CliError::Usage(
            "--max-failure-rate must be within [0, 1]".into(),
        ));
    }
    let mut config = ctx.settings.annotator.clone();
    if let Some(m) = args.model {
        config.model = m;
    }
    if let Some(n) = args.max_attempts {
        config.max_attempts = n;
    }
    let gateway = ctx.gateway()?;
    let prompts = PromptLibrary::shipped();
    let cancel = Cancellation::new();
    let on_signal = cancel.clone();
    let watcher = tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            on_signal.cancel();
        }
    });
    let result = run_pipeline(
        &args.input,
        &args.out,
        &gateway,
        &prompts,
        &config,
        Some(&cancel),
    )
    .await;
    watcher.abort();
    let report = match result {
        Ok(r) => r,
        Err(e @ PipelineError::Config(_)) => return Err(CliError::Usage(e.to_string())),
        Err(e) => return Err(failure(e)),
    };
    if ctx.json {
        ctx.print_json(&report)?;
    } else {
        println!(
            "accepted {}/{} ({:.1}%), mean techniques {:.3}, written to {}",
            report.accepted,
            report.total,
            100.0 * report.acceptance_rate,
            report.stats.mean_techniques,
            args.out.display()
        );
        for (status, n) in &report.failure_breakdown {
            println!("  {status:?}: {n}");
        }
    }
    let failure_rate = if report.total == 0 {
        0.0
    } else {
        1.0 - report.acceptance_rate
    };
    if failure_rate > args.max_failure_rate {
        return Err(CliError::Failure(format!(
            "failure rate {failure_rate:.3} exceeds {}",
            args.max_failure_rate
        )));
    }
    Ok(())
}

pub fn validate(ctx: &Ctx, input: &Path) -> CliResult {
    let scan = scan_corpus(input).map_err(failure)?;
    let valid = scan.records.len();
    if ctx.json {
        let errors: Vec<_> = scan
            .errors
            .iter()
            .map(|(line, message)| json!({"line": line, "message": message}))
            .collect();
        ctx.print_json(&json!({"valid": valid, "total": scan.lines, "errors": errors}))?;
    } else {
        println!("{valid}/{} valid", scan.lines);
        for (line, message) in &scan.errors {
            eprintln!("line {line}: {message}");
        }
    }
    if scan.errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failure(format!(
            "{} invalid line(s)",
            scan.errors.len()
        )))
    }
}

fn print_stats(stats: &CorpusStats) {
    println!("records: {}", stats.record_count);
    println!("mean techniques: {:.4}", stats.mean_techniques);
    println!(
        "mean techniques (extended): {:.4}",
        stats.mean_techniques_extended
    );
    println!("records without insight: {}", stats.records_without_insight);
    println!("technique count histogram:");
    for (k, n) in &stats.technique_count_histogram {
        println!("  {k}: {n}");
    }
    println!("per category:");
    for (cat, n) in &stats.per_category_counts {
        println!("  {cat}: {n}");
        if let Some(top) = stats.top_techniques_per_category.get(cat) {
            for (desc, c) in top.iter().take(3) {
                println!("    {c} x {desc}");
            }
        }
    }
}

pub fn stats(ctx: &Ctx, input: &Path) -> CliResult {
    let records = read_corpus(input).map_err(failure)?;
    let stats = compute_stats(&records);
    if ctx.json {
        ctx.print_json(&stats)
    } else {
        print_stats(&stats);
        Ok(())
    }
}

pub fn emit_stages(ctx: &Ctx, args: EmitStagesArgs) -> CliResult {
    let records = read_corpus(&args.input).map_err(failure)?;
    let options = ScheduleOptions {
        schedule: match args.schedule {
            ScheduleArg::Three => Schedule::ThreeStage,
            ScheduleArg::Two => Schedule::TwoStage,
        },
        target_selection: match args.target {
            TargetArg::Original => TargetSelection::Original,
            TargetArg::Annotated => TargetSelection::Annotated,
        },
        system_prompt: args.system_prompt,
        epochs: args.epochs,
    };
    let manifest = emit_schedule(&records, &options, &args.out_dir)
        .map_err(|e| CliError::Failure(format!("cannot write {}: {e}", args.out_dir.display())))?;
    if ctx.json {
        return ctx.print_json(&manifest);
    }
    for s in &manifest.stages {
        println!(
            "stage {} {}: {} examples, {} skipped, {} epochs",
            s.stage, s.file, s.examples, s.skipped, s.epochs
        );
    }
    Ok(())
}
