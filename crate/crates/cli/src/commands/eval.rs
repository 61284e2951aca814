use deepinsight_core::judge::{load_proof_source, run_benchmark, BenchmarkName, BenchmarkSpec};
use deepinsight_core::reward::{score_rollout_group, VerifierFailure};
use deepinsight_core::PromptLibrary;
use deepinsight_service::api::RewardResponse;

use super::{read_text, Ctx};
use crate::args::{JudgeArgs, RewardArgs};
use crate::error::{failure, CliError, CliResult};

pub async fn judge(ctx: &Ctx, args: JudgeArgs) -> CliResult {
    let judges: Vec<String> = args
        .judges
        .iter()
        .map(|j| j.trim().to_string())
        .filter(|j| !j.is_empty())
        .collect();
    if judges.is_empty() {
        return Err(CliError::Usage(
            "--judges needs at least one model id".into(),
        ));
    }
    let name = args.name.clone().unwrap_or_else(|| {
        args.benchmark
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let spec = BenchmarkSpec::load(&args.benchmark, BenchmarkName::parse(&name))
        .map_err(|e| CliError::Failure(format!("cannot load {}: {e}", args.benchmark.display())))?;
    if spec.is_complete() == Some(false) {
        eprintln!(
            "warning: {} has {} items, the published benchmark has {}",
            spec.name,
            spec.items.len(),
            spec.name.expected_count().unwrap_or_default()
        );
    }
    let proofs = load_proof_source(&args.proofs)
        .map_err(|e| CliError::Failure(format!("cannot load {}: {e}", args.proofs.display())))?;
    let gateway = ctx.gateway()?;
    let prompts = PromptLibrary::shipped();
    let run = run_benchmark(
        &spec,
        &proofs,
        &judges,
        &gateway,
        &prompts,
        &ctx.settings.service.judge,
    );
    let report = tokio::select! {
        r = run => r,
        _ = tokio::signal::ctrl_c() => return Err(CliError::Failure("interrupted".into())),
    };
    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&report).map_err(failure)?;
        std::fs::write(out, text + "\n")
            .map_err(|e| CliError::Failure(format!("cannot write {}: {e}", out.display())))?;
    }
    if ctx.json {
        ctx.print_json(&report)?;
    } else {
        println!(
            "{}: {} items, judges {}, mean {:.4}, max {:.4}, mismatch rate {:.3}, failed judgements {}",
            report.benchmark,
            report.item_count,
            report.judges.join(","),
            report.mean,
            report.max,
            report.mismatch_rate,
            report.failed_judgements
        );
        for (judge, mean) in &report.per_judge_mean {
            println!("  {judge}: {mean:.4}");
        }
    }
    if report.item_count > 0 && report.failed_judgements == report.item_count * judges.len() {
        return Err(CliError::Failure("every judgement failed".into()));
    }
    Ok(())
}

fn read_responses(text: &str) -> CliResult<Vec<String>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<String>(l).map_err(|e| {
                CliError::Failure(format!(
                    "responses line {}: expected a JSON string ({e})",
                    i + 1
                ))
            })
        })
        .collect()
}

pub async fn reward(ctx: &Ctx, args: RewardArgs) -> CliResult {
    let question = read_text(&args.question_file)?;
    let responses = read_responses(&read_text(&args.responses_file)?)?;
    if responses.is_empty() {
        return Err(CliError::Failure("no responses".into()));
    }
    let mut config = ctx.settings.service.verifier.clone();
    if let Some(m) = args.model {
        config.model = m;
    }
    let gateway = ctx.gateway()?;
    let prompts = PromptLibrary::shipped();
    let qid = args
        .question_file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let scored = score_rollout_group(
        &qid,
        question.trim_end(),
        &responses,
        &gateway,
        &prompts,
        &config,
    )
    .await;
    let unreachable = scored.all_unreachable();
    let out = RewardResponse {
        rewards: scored.group.rewards,
        advantages: scored.group.advantages,
        breakdowns: scored.responses,
    };
    if ctx.json {
        ctx.print_json(&out)?;
    } else {
        println!("index\treward\tadvantage\tstatus");
        for (i, r) in out.breakdowns.iter().enumerate() {
            let status = match (&r.breakdown, &r.failure) {
                (_, Some(VerifierFailure::Unreachable { .. })) => "unreachable".to_string(),
                (_, Some(VerifierFailure::Rejected { .. })) => "rejected".to_string(),
                (_, Some(VerifierFailure::Unscorable { .. })) => "unscorable".to_string(),
                (Some(b), None) => format!("{:?}", b.extraction_mode),
                (None, None) => "-".to_string(),
            };
            println!(
                "{i}\t{:.6}\t{:+.6}\t{status}",
                out.rewards[i], out.advantages[i]
            );
        }
    }
    if unreachable {
        return Err(CliError::Failure("verifier unreachable".into()));
    }
    Ok(())
}
