use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};
use squidlet::compression::Pipeline;
use squidlet::data::{generate_synthetic, load_corpus, write_corpus, Category, Corpus, SyntheticProfile};
use squidlet::evalbench::{answer_accuracy, bench_latency, restoration_accuracy, BenchOptions, BenchSample, FlopCount};
use squidlet::tokenizer::{TokenId, BOS, CONTINUE, EOS, RESTORE};
use squidlet::training::{load_checkpoint, save_checkpoint, train_with, TrainState};
use squidlet::transformer::{generate as decode, GenerateOptions, Sampling};

use crate::config::Resolved;
use crate::CliError;

fn out_dir(r: &Resolved) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(r.require::<String>("out")?);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn threads() -> Result<usize, CliError> {
    match std::env::var("SQUIDLET_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("SQUIDLET_THREADS must be a positive integer, found `{v}`"))),
    }
}

fn corpus(r: &Resolved) -> Result<Corpus, CliError> {
    let mut c = load_corpus(&r.input_path("corpus")?)?;
    let limit: usize = r.get("limit")?.unwrap_or(0);
    if limit > 0 {
        c.samples.truncate(limit);
    }
    c.require_nonempty()?;
    Ok(c)
}

/// Wall-clock data lives only here so the rest of a report is reproducible.
fn metadata(r: &Resolved) -> Value {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    json!({
        "timestamp_unix": secs,
        "command": r.sub,
        "checkpoint": r.raw("checkpoint"),
        "corpus": r.raw("corpus"),
        "version": env!("CARGO_PKG_VERSION"),
    })
}

fn write_report(r: &Resolved, records: &[(&str, Value)]) -> Result<(), CliError> {
    let Some(path) = r.output_path("report")? else {
        return Ok(());
    };
    let meta = metadata(r);
    let mut text = String::new();
    for (kind, body) in records {
        let rec = json!({ "kind": kind, "metadata": meta, "report": body });
        text.push_str(&rec.to_string());
        text.push('\n');
    }
    fs::write(&path, text)?;
    eprintln!("report written to {}", path.display());
    Ok(())
}


pub fn data_gen(r: &Resolved) -> Result<(), CliError> {
    let seed: u64 = r.require("seed")?;
    let profile = SyntheticProfile {
        min_entities: r.require("min_entities")?,
        max_entities: r.require("max_entities")?,
    };
    if profile.min_entities == 0 || profile.min_entities > profile.max_entities {
        return Err(CliError::Usage("need 1 <= min_entities <= max_entities".into()));
    }
    let n: usize = r.require("n")?;
    let dir = out_dir(r)?;
    let c = generate_synthetic(seed, n, &profile);
    let path = dir.join("corpus.jsonl");
    write_corpus(&path, &c)?;
    println!("wrote {} samples to {}", c.len(), path.display());
    for cat in Category::ALL {
        let k = c.samples.iter().filter(|s| s.category == Some(cat)).count();
        println!("  {:<16} {:>6} ({:.2}%)", cat.name(), k, 100.0 * k as f64 / n.max(1) as f64);
    }
    Ok(())
}

pub fn train(r: &Resolved) -> Result<(), CliError> {
    let seed: u64 = r.require("seed")?;
    let ckpt = r.optional_input("checkpoint")?;
    let model_cfg = r.pipeline_config(ckpt.is_some())?;
    let stages = r.stages()?;
    let configs = stages
        .iter()
        .map(|&s| r.stage_config(s, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let every: usize = r.require("checkpoint_every")?;
    let corpus = corpus(r)?;
    let dir = out_dir(r)?;

    let mut state = match &ckpt {
        Some(p) => load_checkpoint(p)?,
        None => TrainState::new(Pipeline::new(model_cfg, seed)?),
    };
    eprintln!("model: {} parameters", state.model.param_count());
    let mut log = OpenOptions::new().create(true).append(true).open(dir.join("train_log.jsonl"))?;
    let latest = dir.join("checkpoint.sqd");
    for cfg in &configs {
        if stages.len() > 1 && state.completed.contains(&cfg.stage) {
            eprintln!("{}: already completed, skipping", cfg.stage);
            continue;
        }
        let report_every = (cfg.steps / 20).max(1);
        let chunk = if every == 0 { usize::MAX } else { every };
        loop {
            let mut lines = String::new();
            let ran = train_with(&mut state, cfg, &corpus, chunk, |step, loss| {
                lines.push_str(&json!({ "stage": cfg.stage.name(), "step": step, "loss": loss }).to_string());
                lines.push('\n');
                if (step + 1) % report_every == 0 || step + 1 == cfg.steps {
                    eprintln!("{} step {}/{} loss {loss:.4}", cfg.stage, step + 1, cfg.steps);
                }
            });
            log.write_all(lines.as_bytes())?;
            let ran = ran?;
            save_checkpoint(&state, &latest)?;
            if ran == 0 || state.stage_step >= cfg.steps {
                break;
            }
        }
        let stage_file = dir.join(format!("{}.sqd", cfg.stage.name()));
        save_checkpoint(&state, &stage_file)?;
        println!("{}: {} steps, final loss {:.4}, checkpoint {}", cfg.stage, state.stage_step, state.loss_history.last().copied().unwrap_or(f32::NAN), stage_file.display());
    }
    Ok(())
}

pub fn eval(r: &Resolved) -> Result<(), CliError> {
    let task = r.require::<String>("task")?;
    let (restore, answer) = match task.as_str() {
        "restoration" => (true, false),
        "answer" => (false, true),
        "both" => (true, true),
        other => return Err(CliError::Usage(format!("--task expects restoration, answer or both, found `{other}`"))),
    };
    let ckpt = r.input_path("checkpoint")?;
    r.output_path("report")?;
    let threads = threads()?;
    let corpus = corpus(r)?;
    let state = load_checkpoint(&ckpt)?;
    let mut records = Vec::new();
    if restore {
        let rep = restoration_accuracy(&state, &corpus, threads)?;
        println!("restoration ({} samples)\n{}", rep.total, rep.table());
        records.push(("restoration_accuracy", serde_json::to_value(&rep).expect("reports serialise")));
    }
    if answer {
        let rep = answer_accuracy(&state.model, &corpus, threads)?;
        println!("answers ({} samples)\n{}", rep.total, rep.table());
        records.push(("answer_accuracy", serde_json::to_value(&rep).expect("reports serialise")));
    }
    write_report(r, &records)
}

fn flop_table(label: &str, f: &FlopCount) -> String {
    format!(
        "{label:<12} scores {:>14} values {:>14} proj {:>14} ffn {:>14} head {:>12} other {:>10} total {:>15}\n",
        f.attention_scores, f.attention_values, f.projections, f.feed_forward, f.lm_head, f.other, f.total()
    )
}

pub fn bench(r: &Resolved) -> Result<(), CliError> {
    let ckpt = r.input_path("checkpoint")?;
    r.output_path("report")?;
    let opts = BenchOptions {
        warmup: r.require("warmup_runs")?,
        repetitions: r.require("repetitions")?,
        max_new: r.require("max_new")?,
        include_compression_cost: r.require("include_compression_cost")?,
        n_memory: r.get("n_memory")?,
    };
    let corpus = corpus(r)?;
    let state = load_checkpoint(&ckpt)?;
    let model = &state.model;
    let tok = model.tokenizer();
    let samples: Vec<BenchSample> = corpus
        .samples
        .iter()
        .map(|s| {
            let mut query = vec![BOS];
            query.extend(tok.encode(&s.prompt));
            BenchSample {
                context: tok.encode(&s.context),
                query,
            }
        })
        .collect();
    let rep = bench_latency(model, &model.decoder, &samples, &opts)?;
    println!("{:>6} {:>10} {:>10} {:>12} {:>12}", "sample", "prefill", "(full)", "compressed s", "full s");
    for i in 0..rep.compressed_s.len() {
        println!(
            "{:>6} {:>10} {:>10} {:>12.5} {:>12.5}",
            i, rep.compressed_prefill_tokens[i], rep.baseline_prefill_tokens[i], rep.compressed_s[i], rep.baseline_s[i]
        );
    }
    println!(
        "mean compressed {:.5}s  full {:.5}s  improvement {:.2}x",
        rep.compressed_mean_s, rep.baseline_mean_s, rep.improvement_factor
    );
    print!("{}", flop_table("compressed", &rep.compressed_flops));
    print!("{}", flop_table("full", &rep.baseline_flops));
    println!("{}", FlopCount::FORMULAS);
    write_report(
        r,
        &[
            ("latency", serde_json::to_value(&rep).expect("reports serialise")),
            ("flop_formulas", Value::String(FlopCount::FORMULAS.into())),
        ],
    )
}

fn read_context(r: &Resolved) -> Result<String, CliError> {
    match (r.raw("context"), r.optional_input("context_file")?) {
        (Some(_), Some(_)) => Err(CliError::Usage("give --context or --context-file, not both".into())),
        (Some(t), None) => Ok(t.to_string()),
        (None, Some(p)) => Ok(fs::read_to_string(Path::new(&p))?),
        (None, None) => Err(CliError::Usage("missing --context or --context-file".into())),
    }
}

pub fn generate(r: &Resolved) -> Result<(), CliError> {
    let ckpt = r.input_path("checkpoint")?;
    let mode = r.require::<String>("mode")?;
    if !["answer", "restore", "continue"].contains(&mode.as_str()) {
        return Err(CliError::Usage(format!("--mode expects answer, restore or continue, found `{mode}`")));
    }
    let context = read_context(r)?;
    let temperature: f64 = r.require("temperature")?;
    let sampling = if temperature > 0.0 {
        Sampling::Temperature {
            temperature,
            seed: r.require("seed")?,
        }
    } else {
        Sampling::Greedy
    };
    let max_new: usize = r.require("max_new")?;
    let state = load_checkpoint(&ckpt)?;
    let model = &state.model;
    let tok = model.tokenizer();
    let ctx = tok.encode(&context);
    let (_, e) = model.compress(&ctx)?;
    eprintln!(
        "context: {} tokens -> {} memory slots (ratio {})",
        ctx.len(),
        model.n_memory(),
        model.config().compression.ratio(ctx.len())?
    );
    let run = |input: &[TokenId], stop: Option<TokenId>| -> Result<String, CliError> {
        let opts = GenerateOptions {
            max_new_tokens: max_new,
            sampling,
            stop_token: stop,
        };
        let mut out = decode(&model.decoder, Some(&e.0), input, &opts)?;
        if stop.is_some() && out.last() == stop.as_ref() {
            out.pop();
        }
        Ok(tok.decode(&out)?)
    };
    match mode.as_str() {
        "restore" => println!("{}", run(&[RESTORE], None)?),
        "continue" => println!("{}", run(&[CONTINUE], None)?),
        _ => {
            let ask = |q: &str| -> Result<String, CliError> {
                let mut input = vec![BOS];
                input.extend(tok.encode(q));
                run(&input, Some(EOS))
            };
            match r.raw("prompt") {
                Some(q) => println!("{}", ask(q)?),
                None => {
                    let stdin = io::stdin();
                    let mut out = io::stdout();
                    for line in stdin.lock().lines() {
                        let q = line?;
                        if q.trim().is_empty() {
                            continue;
                        }
                        writeln!(out, "{}", ask(q.trim())?)?;
                        out.flush()?;
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn inspect(r: &Resolved) -> Result<(), CliError> {
    let state = load_checkpoint(&r.input_path("checkpoint")?)?;
    let c = state.model.config();
    println!("memory tokens   {} (max {})", c.compression.n_memory, c.max_memory);
    println!("max context     {}", c.compression.max_context);
    for (name, d) in [("small decoder", &c.encoder), ("main decoder", &c.decoder)] {
        println!(
            "{name:<15} d_model {} layers {} heads {} d_ff {} vocab {} ({} params)",
            d.d_model,
            d.n_layers,
            d.n_heads,
            d.d_ff,
            d.vocab_size,
            d.param_count()
        );
    }
    println!("projector       {:?}, hidden {}", c.activation, c.d_proj);
    println!("parameters      {}", state.model.param_count());
    let done: Vec<&str> = state.completed.iter().map(|s| s.name()).collect();
    println!("completed       {}", if done.is_empty() { "-".into() } else { done.join(", ") });
    match state.stage {
        Some(s) => println!("current stage   {s}, step {}, seed {}", state.stage_step, state.stage_seed),
        None => println!("current stage   -"),
    }
    if let Some(o) = &state.optimizer {
        println!("optimizer       AdamW, {} updates", o.step);
    }
    if let (Some(first), Some(last)) = (state.loss_history.first(), state.loss_history.last()) {
        let min = state.loss_history.iter().copied().fold(f32::INFINITY, f32::min);
        println!("loss            first {first:.4} last {last:.4} min {min:.4}");
    }
    Ok(())
}
