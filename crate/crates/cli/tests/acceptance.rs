//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::Path;
use std::process::Command as Process;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pottsmg::dataio::{load_dataset, read_mask};
use pottsmg::mesh::{downsample, upsample, Field, Pool};
use pottsmg::net::{
    block_linear, forward_batch, merged_kernel, network_block, Bias, Branch, ControlParams, ImageBatch, Mode, NetConfig, Trace,
};
use pottsmg::potts::{activation_fixed_point, minimize_energy, td_perimeter, PottsParams};
use pottsmg::split::{hybrid_step, random_spd, sequential_step, Forcing, LinOp, Op, SchemeSpec};
use pottsmg::stencil::Kernel;
use pottsmg::tape::Tape;
use pottsmg::train::metrics;
use pottsmg_cli::{dispatch, grad_check_error, parse_config, Command};

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_pottsmg"))
}

fn run_bin(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = bin().args(args).current_dir(cwd).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("`pottsmg {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn random_field(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Field {
    Field::from_vec(1, rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn splitting_order() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    run_bin(&["convergence", "--data.out", "."], dir.path())?;
    let elapsed = start.elapsed();
    let csv = std::fs::read_to_string(dir.path().join("convergence.csv")).map_err(|e| e.to_string())?;
    let mut lines = csv.lines();
    ensure(lines.next() == Some("scheme,instance_seed,dt,error,observed_order"), "unexpected CSV header")?;
    let mut worst = [f64::INFINITY; 2];
    let mut seeds = [std::collections::BTreeSet::new(), std::collections::BTreeSet::new()];
    let mut dts = std::collections::BTreeSet::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let which = match f[0] {
            "hybrid" => 0,
            "general_hybrid" => 1,
            other => return Err(format!("unknown scheme {other}")),
        };
        seeds[which].insert(f[1].to_string());
        dts.insert(f[2].to_string());
        let order: f64 = f[4].parse().map_err(|_| format!("bad order in `{line}`"))?;
        worst[which] = worst[which].min(order);
    }
    ensure(seeds.iter().all(|s| s.len() == 5), "expected 5 instances per scheme")?;
    ensure(dts.len() == 4, "expected 4 time steps")?;
    ensure(worst.iter().all(|&o| o >= 0.8), format!("observed orders too low: {worst:?}"))?;
    ensure(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!("min order hybrid {:.3}, general {:.3}; {:.2?}", worst[0], worst[1], elapsed))
}

fn activation_first_iterate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = PottsParams::new(2.0, 80.0, 0.5, 0.5).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let ubar = random_field(&mut rng, 8, 8, -5.0, 5.0);
        let c1 = rng.gen_range(0.1..3.0);
        let p1 = activation_fixed_point(&ubar, c1, 0.0, &p, 1).map_err(|e| e.to_string())?;
        worst = p1.values().iter().fold(worst, |m, v| m.max((v - 0.5).abs()));
    }
    ensure(worst <= 1e-15, format!("max |p1 - 0.5| = {worst:e}"))?;
    Ok(format!("max |p1 - 0.5| = {worst:e}"))
}

fn td_perimeter_check() -> Outcome {
    let n = 128;
    let c = n as f64 / 2.0 - 0.5;
    let mut disk = Field::zeros(1, n, n);
    for i in 0..n {
        for j in 0..n {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            disk.set(i, j, if d2 <= 256.0 { 1.0 } else { 0.0 });
        }
    }
    let exact = 2.0 * std::f64::consts::PI * 16.0;
    let est = td_perimeter(&disk, 2.0).map_err(|e| e.to_string())?;
    let rel = (est - exact).abs() / exact;
    ensure(rel < 0.1, format!("estimate {est:.3} vs {exact:.3}"))?;
    for v in [0.0, 1.0] {
        let p = td_perimeter(&Field::constant(1, n, n, v), 2.0).map_err(|e| e.to_string())?;
        ensure(p == 0.0, format!("perimeter of u = {v} is {p}"))?;
    }
    Ok(format!("disk estimate {est:.3} vs {exact:.3} ({:.2}%), constants exactly 0", 100.0 * rel))
}

fn block_equivalence() -> Outcome {
    let cfg = NetConfig::with_shape(vec![1, 1], vec![2, 2], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let c = rng.gen_range(1..=4);
        let radius = rng.gen_range(1..=2);
        let (rows, cols) = (rng.gen_range(3..=9), rng.gen_range(3..=9));
        let side = 2 * radius + 1;
        let inputs: Vec<Field> = (0..c).map(|_| random_field(&mut rng, rows, cols, 0.0, 1.0)).collect();
        let kernels: Vec<Kernel> = (0..c)
            .map(|_| Kernel::new(radius, (0..side * side).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let bias = if rng.gen_bool(0.5) {
            Bias::Field(random_field(&mut rng, rows, cols, -1.0, 1.0))
        } else {
            Bias::Scalar(rng.gen_range(-1.0..1.0))
        };
        let gamma = (1 << rng.gen_range(0..3)) as f64 * c as f64;
        let linear = block_linear(&inputs, &kernels, &bias, gamma, &cfg).map_err(|e| e.to_string())?;
        let weights: Vec<Kernel> = kernels.iter().map(|k| merged_kernel(k, c, gamma, &cfg)).collect();
        let s = gamma * cfg.dt;
        let net_bias = match &bias {
            Bias::Field(b) => Bias::Field(b.map(|v| s * v)),
            Bias::Scalar(b) => Bias::Scalar(s * b),
        };
        let conv = network_block(&inputs, &weights, &net_bias).map_err(|e| e.to_string())?;
        for (a, b) in linear.values().iter().zip(conv.values()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, format!("max difference {worst:e}"))?;
    Ok(format!("20 instances, max difference {worst:e}"))
}

fn gradient_correctness() -> Outcome {
    let text = "net.J = 2\nnet.L = 1,1\nnet.c = 2,2\nnet.N = 1\ndata.size = 8\ncheck.samples = 60\n";
    let cfg = parse_config(text, &[]).map_err(|e| e.to_string())?;
    let err = grad_check_error(&cfg).map_err(|e| e.to_string())?;
    ensure(err <= 1e-5, format!("max relative error {err:e}"))?;
    Ok(format!("60 parameters, max relative error {err:.3e}"))
}

fn minimizer_trend() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = random_field(&mut rng, 4, 4, -1.0, 1.0);
    let mut dist = Vec::new();
    for eps in [1.0, 0.1, 0.01] {
        let p = PottsParams::new(eps, 0.5, 0.8, 0.5).map_err(|e| e.to_string())?;
        let m = minimize_energy(&g, &p, 1e-12, 100_000).map_err(|e| e.to_string())?;
        dist.push(m.max_distance_to_binary());
    }
    ensure(dist.windows(2).all(|w| w[1] < w[0]), format!("distances {dist:?} do not strictly decrease"))?;
    Ok(format!("max distance to {{0,1}}: {:.3e}, {:.3e}, {:.3e}", dist[0], dist[1], dist[2]))
}

fn desk_training() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let text = format!(
        "net.J = 3\nnet.L = 2,2,2\nnet.c = 8,8,16\nnet.N = 2\n\
         train.schedule = 0,0.3,0.5\ntrain.epochs = 50\n\
         data.size = 32\ndata.dir = {0}/train\ndata.test_dir = {0}/test\ndata.out = {0}/out\n\
         data.checkpoint = {0}/out/model.pmg\neval.sds = 0,0.5\n",
        root.display()
    );
    let cfg = parse_config(&text, &[]).map_err(|e| e.to_string())?;
    let step = |c: Command, cfg| dispatch(c, cfg).map_err(|e| e.to_string());
    step(Command::GenData, &cfg)?;
    let test_cfg = parse_config(&format!("{text}data.dir = {}/test\ndata.count = 50\ndata.seed = 1\n", root.display()), &[])
        .map_err(|e| e.to_string())?;
    step(Command::GenData, &test_cfg)?;

    let start = Instant::now();
    step(Command::Train, &cfg)?;
    let elapsed = start.elapsed();
    step(Command::Eval, &cfg)?;
    let csv = std::fs::read_to_string(root.join("out/eval.csv")).map_err(|e| e.to_string())?;
    let dice: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();

    // Inference on one training image, scored against its own mask.
    let train_set = load_dataset(&root.join("train")).map_err(|e| e.to_string())?;
    let first = &train_set[0].id;
    let infer_cfg = parse_config(&format!("{text}data.input = {}/train/images/{first}.ppm\n", root.display()), &[])
        .map_err(|e| e.to_string())?;
    step(Command::Infer, &infer_cfg)?;
    let predicted = read_mask(&root.join(format!("out/{first}_mask.pgm"))).map_err(|e| e.to_string())?;
    let own = metrics(&predicted, &train_set[0].mask).map_err(|e| e.to_string())?.dice;

    let summary = format!(
        "test dice {:.4} at SD 0, {:.4} at SD 0.5; infer dice {own:.4}; training {:.1} min",
        dice[0],
        dice[1],
        elapsed.as_secs_f64() / 60.0
    );
    ensure(dice[0] >= 0.90 && dice[1] >= 0.70, summary.clone())?;
    ensure(own >= 0.9, summary.clone())?;
    ensure(elapsed <= Duration::from_secs(30 * 60), summary.clone())?;
    Ok(summary)
}

fn transfer_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (r, c) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let g = random_field(&mut rng, r, c, -10.0, 10.0).with_level(2);
        let back = downsample(&upsample(&g).map_err(|e| e.to_string())?, Pool::Average, 2).map_err(|e| e.to_string())?;
        ensure(back.values() == g.values(), "downsample(upsample(g)) differs from g")?;
        let fine = random_field(&mut rng, 2 * r, 2 * c, -10.0, 10.0);
        let coarse = downsample(&fine, Pool::Average, 2).map_err(|e| e.to_string())?;
        let gap = (coarse.mean() - fine.mean()).abs();
        ensure(gap <= 1e-12, format!("mean changed by {gap:e}"))?;
    }
    Ok("50 random grids: round trip bit-exact, mean conserved".into())
}

fn structure_collapse() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (m, dim) = (rng.gen_range(1..=4), rng.gen_range(1..=6));
        let ops: Vec<(Op, Op, Forcing)> = (0..m)
            .map(|_| {
                let a = LinOp::new(random_spd(dim, &mut rng)).into_op();
                let s = LinOp::new(random_spd(dim, &mut rng)).into_op();
                (a, s, Forcing::constant((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            })
            .collect();
        let spec = SchemeSpec::flat(dim, ops).map_err(|e| e.to_string())?;
        let u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dt = rng.gen_range(0.01..0.2);
        let h = hybrid_step(&u, &spec, dt, 0.0).map_err(|e| e.to_string())?;
        let s = sequential_step(&u, &spec, dt, 0.0).map_err(|e| e.to_string())?;
        worst = h.iter().zip(&s).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    ensure(worst <= 1e-12, format!("hybrid vs sequential differ by {worst:e}"))?;

    let cfg = NetConfig::with_shape(vec![1, 1, 1], vec![2, 3, 2], 2);
    let theta = ControlParams::init(&cfg, 2).map_err(|e| e.to_string())?;
    let images: Vec<[Field; 3]> = (0..1).map(|_| [0, 1, 2].map(|_| random_field(&mut rng, 8, 8, 0.0, 1.0))).collect();
    let batch = ImageBatch::from_images(&images).map_err(|e| e.to_string())?;
    let mut trace = Trace::new();
    forward_batch(&mut Tape::new(theta.values.clone()), &cfg, &theta, &batch, Mode::Infer, Some(&mut trace))
        .map_err(|e| e.to_string())?;
    for n in 0..cfg.steps {
        for j in 1..=cfg.levels {
            ensure(trace.sequential_count(n, Branch::Left, j) == 1, format!("step {n} level {j}: left substeps"))?;
            let right = usize::from(j < cfg.levels);
            ensure(trace.sequential_count(n, Branch::Right, j) == right, format!("step {n} level {j}: right substeps"))?;
        }
        ensure(trace.sequential_count(n, Branch::Final, 1) == 1, format!("step {n}: closing substep"))?;
    }
    Ok(format!("hybrid vs sequential max difference {worst:e}; one substep per level per branch over {} steps", cfg.steps))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let config = "net.J = 2\nnet.L = 1,2\nnet.c = 3,4\nnet.N = 1\n\
                  train.schedule = 0,0.3\ntrain.epochs = 3\ntrain.batch = 4\ntrain.seed = 7\n\
                  data.size = 16\ndata.count = 10\n";
    std::fs::write(root.join("run.cfg"), config).map_err(|e| e.to_string())?;
    run_bin(&["gen-data", "-c", "run.cfg"], root)?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let ckpt = format!("{run}/model.pmg");
        run_bin(&["train", "-c", "run.cfg", "--data.out", run, "--data.checkpoint", &ckpt], root)?;
        let read = |p: String| std::fs::read(root.join(p)).map_err(|e| e.to_string());
        outputs.push((read(ckpt)?, read(format!("{run}/metrics.csv"))?));
    }
    ensure(outputs[0].0 == outputs[1].0, "checkpoints differ")?;
    ensure(outputs[0].1 == outputs[1].1, "metric CSVs differ")?;
    Ok(format!("checkpoints ({} bytes) and metric CSVs identical", outputs[0].0.len()))
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("splitting order", splitting_order),
        ("activation first iterate", activation_first_iterate),
        ("TD perimeter", td_perimeter_check),
        ("block equivalence", block_equivalence),
        ("gradient correctness", gradient_correctness),
        ("minimizer approaches binary as epsilon shrinks", minimizer_trend),
        ("desk-scale training", desk_training),
        ("transfer identities", transfer_identities),
        ("structure collapse", structure_collapse),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        match check() {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
