// Scratch harness for sizing the training-dynamics experiments.
use mdlab::corruptor::VocabSpec;
use mdlab::predictor::NetConfig;
use mdlab::timelaw::TimeLaw;
use mdlab::trainlab::*;
use mdlab::worldmodel::MarkovWorld;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("speedup");
    match mode {
        "speedup" => speedup(&args[2..]),
        "finding2" => finding2(&args[2..]),
        "prop42" => prop42(&args[2..]),
        "analysis" => analysis(&args[2..]),
        _ => eprintln!("unknown mode"),
    }
}

fn prop42(args: &[String]) {
    let steps = getf(args, "steps", 4000.0) as u64;
    let lr = getf(args, "lr", 0.1);
    let world = MarkovWorld::seeded(VocabSpec::new(3).unwrap(), 5, 0.8, 7).unwrap();
    let arms = vec![
        ("eq1", ObjectiveConfig::standard()),
        (
            "dirac03",
            ObjectiveConfig::tilted(TimeLaw::dirac(0.3).unwrap()),
        ),
        (
            "tg05",
            ObjectiveConfig::tilted(TimeLaw::trunc_gaussian(0.5, 0.1).unwrap()),
        ),
    ];
    let mut preds = Vec::new();
    for (name, cfg) in &arms {
        let t0 = std::time::Instant::now();
        let p = train_tabular_exact(&world, cfg, steps, lr).unwrap();
        let tv = max_tv_to_oracle(&p, &world).unwrap();
        println!("{name}: tv_to_oracle={tv:.2e} t={:.1}s", t0.elapsed().as_secs_f64());
        preds.push(p);
    }
    for i in 0..preds.len() {
        for j in i + 1..preds.len() {
            let tv = max_tv_between(&preds[i], &preds[j], &world).unwrap();
            println!("tv({},{}) = {tv:.2e}", arms[i].0, arms[j].0);
        }
    }
}

fn analysis(args: &[String]) {
    use mdlab::objectives::Source;
    let steps = getf(args, "steps", 800.0) as u64;
    let trials = getf(args, "trials", 256.0) as usize;
    let world = MarkovWorld::seeded(VocabSpec::new(4).unwrap(), 16, 0.9, 1000).unwrap();
    let spec = ExperimentSpec {
        predictor: PredictorConfig::Net(NetConfig { dim: 32, layers: 2 }),
        objective: ObjectiveConfig::standard(),
        batch: 32,
        steps,
        eval_every: steps.max(1),
        eval_mode: EvalMode::Mc { samples: 512 },
        lr: 3e-3,
        warmup: 100,
        seed: 7,
        eval_seed: 5000,
        track_levels: false,
    };
    let t0 = std::time::Instant::now();
    let (p, _) = run_training(&world, &spec).unwrap();
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    let source = Source::World(&world);
    for r in [2usize, 3, 4, 8, 15] {
        let mut pooled = Vec::new();
        for seed in 0..5u64 {
            let rep = grad_similarity_radius(&p, &source, r, 4, trials, 100 + seed).unwrap();
            pooled.push(rep.mean_cosine);
        }
        let mean: f64 = pooled.iter().sum::<f64>() / pooled.len() as f64;
        println!("radius {r}: mean={mean:.4} per-seed={pooled:?}");
    }
    for n in [1usize, 2, 4, 8] {
        let mut pooled = Vec::new();
        for seed in 0..5u64 {
            let rep = grad_additivity(&p, &source, n, trials, 200 + seed).unwrap();
            pooled.push(rep.mean_cosine);
        }
        let mean: f64 = pooled.iter().sum::<f64>() / pooled.len() as f64;
        println!("masks {n}: mean={mean:.4} per-seed={pooled:?}");
    }
    // Flat-world contrast: untrained net, no locality.
    let flat = MarkovWorld::seeded(VocabSpec::new(4).unwrap(), 16, 0.0, 1).unwrap();
    let p0 = PredictorConfig::Net(NetConfig { dim: 32, layers: 2 })
        .build(mdlab::predictor::ContextFamily::Masked, &flat, 3)
        .unwrap();
    let fsrc = Source::World(&flat);
    for r in [2usize, 3, 4, 8, 15] {
        let rep = grad_similarity_radius(&p0, &fsrc, r, 4, trials, 300).unwrap();
        println!("flat radius {r}: mean={:.4}", rep.mean_cosine);
    }
}

fn getf(args: &[String], key: &str, default: f64) -> f64 {
    for a in args {
        if let Some(v) = a.strip_prefix(&format!("{key}=")) {
            return v.parse().unwrap();
        }
    }
    default
}

fn speedup(args: &[String]) {
    let v = getf(args, "V", 4.0) as u16;
    let l = getf(args, "L", 16.0) as usize;
    let lambda = getf(args, "lambda", 0.85);
    let steps = getf(args, "steps", 2000.0) as u64;
    let batch = getf(args, "batch", 32.0) as usize;
    let lr = getf(args, "lr", 3e-3);
    let dim = getf(args, "d", 32.0) as usize;
    let eval_every = getf(args, "eval", 100.0) as u64;
    let samples = getf(args, "samples", 4096.0) as usize;
    let n_seeds = getf(args, "seeds", 3.0) as u64;
    println!("V={v} L={l} lambda={lambda} steps={steps} batch={batch} lr={lr} d={dim}");

    let arms: Vec<(&str, ObjectiveConfig)> = vec![
        ("baseline", ObjectiveConfig::standard()),
        (
            "tg05",
            ObjectiveConfig::tilted(TimeLaw::trunc_gaussian(0.5, 0.1).unwrap()),
        ),
        (
            "tg06",
            ObjectiveConfig::tilted(TimeLaw::trunc_gaussian(0.6, 0.1).unwrap()),
        ),
    ];
    let mut ratios = Vec::new();
    let mut ratios06 = Vec::new();
    for seed in 0..n_seeds {
        let world =
            MarkovWorld::seeded(VocabSpec::new(v).unwrap(), l, lambda, 1000 + seed).unwrap();
        let mut metrics = Vec::new();
        for (name, obj) in &arms {
            let spec = ExperimentSpec {
                predictor: PredictorConfig::Net(NetConfig { dim, layers: 2 }),
                objective: obj.clone(),
                batch,
                steps,
                eval_every,
                eval_mode: EvalMode::Mc { samples },
                lr,
                warmup: 100,
                seed: 7 + seed,
                eval_seed: 5000 + seed,
                track_levels: false,
            };
            let t0 = std::time::Instant::now();
            let (_, m) = run_training(&world, &spec).unwrap();
            let late: f64 = m.rows.iter().rev().take(3).map(|r| r.eval_nelbo).sum::<f64>() / 3.0;
            println!(
                "seed {seed} arm {name}: final={:.4} late3={late:.4} t={:.1}s",
                m.final_nelbo().unwrap(),
                t0.elapsed().as_secs_f64()
            );
            metrics.push((name.to_string(), m, late));
        }
        let target = metrics[0].1.final_nelbo().unwrap();
        let base_steps = match steps_to_target(&metrics[0].1, target) {
            StepsToTarget::Reached { step } => step as f64,
            StepsToTarget::NotReached => f64::INFINITY,
        };
        for (name, m, late) in &metrics[1..] {
            let s = match steps_to_target(m, target) {
                StepsToTarget::Reached { step } => step as f64,
                StepsToTarget::NotReached => f64::INFINITY,
            };
            let ratio = base_steps / s;
            println!("  seed {seed} {name}: steps_to_target={s} ratio={ratio:.2} late3={late:.4}");
            if name == "tg05" {
                ratios.push(ratio);
            } else {
                ratios06.push(ratio);
            }
        }
        let d = metrics[2].2 - metrics[1].2;
        println!("  seed {seed} late3 margin tg06-tg05 = {d:+.4}");
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    println!("tg05 mean ratio={:.3}", mean(&ratios));
    println!("tg06 mean ratio={:.3}", mean(&ratios06));
}

fn finding2(args: &[String]) {
    let v = getf(args, "V", 3.0) as u16;
    let l = getf(args, "L", 6.0) as usize;
    let lambda = getf(args, "lambda", 0.9);
    let steps = getf(args, "steps", 1500.0) as u64;
    let batch = getf(args, "batch", 16.0) as usize;
    let lr = getf(args, "lr", 5e-3);
    let dim = getf(args, "d", 24.0) as usize;
    let eval_every = getf(args, "eval", 50.0) as u64;
    let eps = getf(args, "eps", 0.02);
    let n_worlds = getf(args, "worlds", 5.0) as u64;

    let mut wins = 0;
    for ws in 0..n_worlds {
        let world =
            MarkovWorld::seeded(VocabSpec::new(v).unwrap(), l, lambda, 2000 + ws).unwrap();
        let spec = ExperimentSpec {
            predictor: PredictorConfig::Net(NetConfig { dim, layers: 2 }),
            objective: ObjectiveConfig::standard(),
            batch,
            steps,
            eval_every,
            eval_mode: EvalMode::Exact,
            lr,
            warmup: 50,
            seed: 11 + ws,
            eval_seed: 0,
            track_levels: true,
        };
        let t0 = std::time::Instant::now();
        let (_, m) = run_training(&world, &spec).unwrap();
        // Entropy floors per level.
        let p0 = PredictorConfig::Tabular
            .build(mdlab::predictor::ContextFamily::Masked, &world, 0)
            .unwrap();
        let profile =
            mdlab::objectives::masked_level_profile(&p0, &world, mdlab::objectives::EXACT_CAP)
                .unwrap();
        let floors = &profile.entropy;
        let mut first_step: Vec<Option<u64>> = vec![None; l];
        for row in &m.rows {
            if let Some(levels) = &row.per_level {
                for n_c in 0..l {
                    if first_step[n_c].is_none() && levels[n_c] - floors[n_c] <= eps {
                        first_step[n_c] = Some(row.step);
                    }
                }
            }
        }
        if let Some(levels) = &m.rows.last().unwrap().per_level {
            let gaps: Vec<String> = (0..l)
                .map(|n_c| format!("{:.3}", levels[n_c] - floors[n_c]))
                .collect();
            println!("  final gaps: {gaps:?}");
        }
        let t0s: Vec<f64> = first_step
            .iter()
            .map(|s| s.map(|x| x as f64).unwrap_or(f64::INFINITY))
            .collect();
        let mut sorted = t0s.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[l / 2];
        let win = t0s[0] < median;
        wins += win as u32;
        println!(
            "world {ws}: steps={:?} level0={} median={} win={} t={:.1}s",
            t0s,
            t0s[0],
            median,
            win,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("wins: {wins}/{n_worlds}");
}
