use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use deepinsight_core::corpus::read_corpus;
use deepinsight_core::entropy::{
    align_spikes_to_techniques, check_bound, parse_logprob_dump, trace_from_logprobs, EntropyTrace,
    ModelError, SpikePolicy, ToyAutoregressiveModel, DEFAULT_TABLE_LIMIT,
};
use serde_json::json;

use super::{read_text, Ctx};
use crate::args::{EntropyCommand, SpikeArgs};
use crate::error::{failure, CliError, CliResult};

fn policy(args: &SpikeArgs) -> CliResult<SpikePolicy> {
    if args.window < 2 {
        return Err(CliError::Usage("--window must be at least 2".into()));
    }
    if args.threshold.is_nan() || args.threshold <= 0.0 {
        return Err(CliError::Usage("--threshold must be positive".into()));
    }
    Ok(SpikePolicy {
        window: args.window,
        threshold: args.threshold,
    })
}

fn load_trace(dump: &Path, policy: &SpikePolicy) -> CliResult<EntropyTrace> {
    let tokens = parse_logprob_dump(&read_text(dump)?).map_err(failure)?;
    Ok(trace_from_logprobs(&tokens).with_spikes(policy))
}

pub fn run(ctx: &Ctx, command: EntropyCommand) -> CliResult {
    match command {
        EntropyCommand::Trace { dump, out, spikes } => {
            let trace = load_trace(&dump, &policy(&spikes)?)?;
            match out {
                Some(path) => {
                    let file = File::create(&path).map_err(|e| {
                        CliError::Failure(format!("cannot write {}: {e}", path.display()))
                    })?;
                    let mut w = BufWriter::new(file);
                    trace.write_csv(&mut w).map_err(failure)?;
                    w.flush().map_err(failure)
                }
                None => trace.write_csv(io::stdout().lock()).map_err(failure),
            }
        }
        EntropyCommand::Spikes {
            dump,
            spikes,
            corpus,
            id,
            align_window,
        } => {
            let trace = load_trace(&dump, &policy(&spikes)?)?;
            let alignment = match (corpus, id) {
                (Some(path), Some(id)) => {
                    let records = read_corpus(&path).map_err(failure)?;
                    let record = records.iter().find(|r| r.id() == id).ok_or_else(|| {
                        CliError::Failure(format!("no record `{id}` in {}", path.display()))
                    })?;
                    Some(
                        align_spikes_to_techniques(&trace, record, align_window)
                            .map_err(failure)?,
                    )
                }
                _ => None,
            };
            if ctx.json {
                return ctx
                    .print_json(&json!({"spikes": trace.spike_indices, "alignment": alignment}));
            }
            println!(
                "{} tokens, {} spikes",
                trace.tokens.len(),
                trace.spike_indices.len()
            );
            for &i in &trace.spike_indices {
                let t = &trace.tokens[i];
                println!("  {i}\t{:.4}\t{:?}", t.entropy, t.token);
            }
            if let Some(a) = alignment {
                println!(
                    "alignment (window {}): {} hits, {} misses",
                    a.window, a.hits, a.misses
                );
            }
            Ok(())
        }
        EntropyCommand::CheckBound {
            techniques,
            reasoning,
            order,
            length,
            delta,
        } => {
            let usage = |e: ModelError| CliError::Usage(e.to_string());
            let model = ToyAutoregressiveModel::random(
                techniques, reasoning, order, length, delta, ctx.seed,
            )
            .map_err(usage)?;
            let mut result = check_bound(&model, DEFAULT_TABLE_LIMIT).map_err(usage)?;
            result.table = None;
            let normalized = (result.total_probability - 1.0).abs() <= 1e-9;
            if ctx.json {
                ctx.print_json(&result)?;
            } else {
                println!(
                    "{} sequences of length {}, δ = {}: bound {}, marginals {}",
                    result.sequences,
                    result.max_length,
                    result.delta,
                    if result.all_satisfied {
                        "holds"
                    } else {
                        "VIOLATED"
                    },
                    if result.marginals_satisfied {
                        "hold"
                    } else {
                        "VIOLATED"
                    },
                );
                println!("total probability {:.12}", result.total_probability);
                println!(
                    "tightest ratio {:.6} at {:?}",
                    result.tightest_ratio, result.tightest_sequence
                );
            }
            if result.all_satisfied && result.marginals_satisfied && normalized {
                Ok(())
            } else {
                Err(CliError::Failure("bound check failed".into()))
            }
        }
    }
}
