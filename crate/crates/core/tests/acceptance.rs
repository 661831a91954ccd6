//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualkv::bench::{run_bench, BenchConfig};
use dualkv::costmodel::{attention_flops, kernel_memory_savings, mb, ModelDims, Scenario};
use dualkv::layer::{model_bwd, model_fwd, Backend, ModelConfig, ModelParams};
use dualkv::packing::{compute_rho, pack_dualkv, pack_standard, PackingMode};
use dualkv::pipeline::{aggregate_step_gradient, dualkv_plan, max_abs_diff, simulate_balance_batch};
use dualkv::refattn::shared_prompt_reference;
use dualkv::rollout::group_samples;
use dualkv::tensor::{allclose, bf16_round, bf16_ulp, seeded_unit};
use dualkv::verify::{cast_input, random_rollouts, replicated_batch, KernelCase};
use dualkv::dualkv::{bf16_naive_accumulate, f32_accumulate_then_cast};
use dualkv::DualKVGrads;
use dualkv::{dualkv_bwd, dualkv_fwd, fa2_varlen_fwd, DualKVInput, Precision, Tensor, VarlenBatch};

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn sweep(count: usize, seed: u64) -> Vec<(KernelCase, DualKVInput, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let case = KernelCase::sample(&mut rng);
            let input = case.input(seed * 1000 + i as u64);
            let d_out = seeded_unit(input.q.shape(), seed * 1000 + i as u64 + 500);
            (case, input, d_out)
        })
        .collect()
}

fn grads(g: &DualKVGrads) -> [&Tensor; 5] {
    [&g.dq, &g.dk_context, &g.dv_context, &g.dk_decoded, &g.dv_decoded]
}

fn c1_forward() -> Outcome {
    let (mut worst, mut bf_ok, mut count) = (0.0f64, 0usize, 0usize);
    for (_, input, _) in sweep(60, 1) {
        let want = shared_prompt_reference(&input, &Tensor::zeros(input.q.shape(), Precision::F64), None).map_err(err)?;
        let (o, lse) = dualkv_fwd(&input).map_err(err)?;
        worst = worst.max(o.max_abs_diff(&want.out).map_err(err)?).max(lse.max_abs_diff(&want.lse).map_err(err)?);

        let bf = cast_input(&input, Precision::Bf16Emu);
        let (ob, _) = dualkv_fwd(&bf).map_err(err)?;
        let exact = shared_prompt_reference(&cast_input(&bf, Precision::F64), &Tensor::zeros(input.q.shape(), Precision::F64), None).map_err(err)?;
        bf_ok += usize::from(allclose(&ob, &exact.out.cast(Precision::Bf16Emu), 1e-3, 1e-3).map_err(err)?);
        count += 1;
    }
    Ok((
        worst <= 1e-12 && bf_ok == count,
        format!("{count} configs, f64 max err {worst:.2e} (<= 1e-12), bf16 allclose(1e-3, 1e-3) {bf_ok}/{count}"),
    ))
}

fn loss_of(input: &DualKVInput, d_out: &Tensor) -> f64 {
    let (o, _) = dualkv_fwd(input).expect("valid input");
    o.data().iter().zip(d_out.data()).map(|(a, b)| a * b).sum()
}

fn c2_backward() -> Outcome {
    let (mut worst, mut worst_fd, mut probes) = (0.0f64, 0.0f64, 0usize);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cases = sweep(60, 2);
    for (_, input, d_out) in &cases {
        let want = shared_prompt_reference(input, d_out, None).map_err(err)?;
        let (o, lse) = dualkv_fwd(input).map_err(err)?;
        for det in [true, false] {
            let g = dualkv_bwd(input, &o, &lse, d_out, det).map_err(err)?;
            for (a, b) in grads(&g).into_iter().zip(grads(&want.grads)) {
                worst = worst.max(a.max_abs_diff(b).map_err(err)?);
            }
        }
        let g = dualkv_bwd(input, &o, &lse, d_out, true).map_err(err)?;
        for which in 0..5 {
            let len = grads(&g)[which].len();
            for _ in 0..len.min(24) {
                let e = rng.random_range(0..len);
                let bumped = |delta: f64| {
                    let mut x = input.clone();
                    let t = [&mut x.q, &mut x.k_context, &mut x.v_context, &mut x.k_decoded, &mut x.v_decoded]
                        .into_iter()
                        .nth(which)
                        .expect("five inputs");
                    let v = t.data()[e];
                    t.set_flat(e, v + delta);
                    loss_of(&x, d_out)
                };
                let h = 1e-5;
                let fd = (bumped(h) - bumped(-h)) / (2.0 * h);
                worst_fd = worst_fd.max((fd - grads(&g)[which].data()[e]).abs());
                probes += 1;
            }
        }
    }
    Ok((
        worst <= 1e-10 && worst_fd <= 1e-6,
        format!(
            "{} configs, five grads vs oracle (explicit sum for dK_c/dV_c) max err {worst:.2e} (<= 1e-10), {probes} finite-difference probes max err {worst_fd:.2e} (<= 1e-6)",
            cases.len()
        ),
    ))
}

fn c3_gradient_equivalence() -> Outcome {
    let cfg = ModelConfig::toy(2);
    let mut worst = 0.0f64;
    let seeds = 24;
    for seed in 0..seeds {
        let params = ModelParams::random(&cfg, 300 + seed).map_err(err)?;
        let groups = group_samples(&random_rollouts(cfg.vocab, 3, 600 + seed)).map_err(err)?;
        let (_, a) = model_bwd(&cfg, &params, &pack_standard(&groups).map_err(err)?, Backend::Standard).map_err(err)?;
        let (_, b) = model_bwd(&cfg, &params, &pack_dualkv(&groups).map_err(err)?, Backend::DualKV).map_err(err)?;
        if a.max_abs() == 0.0 {
            return Err(format!("seed {seed}: gradient is identically zero"));
        }
        worst = worst.max(a.max_abs_diff(&b));
    }
    Ok((worst <= 1e-9, format!("2-layer toy model, {seeds} seeds, max parameter-gradient deviation {worst:.2e} (<= 1e-9)")))
}

fn c4_prompt_invariant() -> Outcome {
    let cfg = ModelConfig::toy(3);
    let mut per_layer = vec![0.0f64; cfg.layers];
    for seed in 0..10 {
        let params = ModelParams::random(&cfg, 40 + seed).map_err(err)?;
        let batch = pack_standard(&group_samples(&random_rollouts(cfg.vocab, 3, 80 + seed)).map_err(err)?).map_err(err)?;
        let out = model_fwd(&cfg, &params, &batch, Backend::Standard).map_err(err)?;
        for (l, x) in out.cache.hidden_states().into_iter().enumerate() {
            for g in &batch.groups {
                let starts: Vec<usize> = g.cu_seqlens[..g.n()].iter().map(|c| g.token_offset + c).collect();
                for a in &starts {
                    for b in &starts {
                        for j in 0..g.prompt_len {
                            let d = (&x.row(a + j) - &x.row(b + j)).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
                            per_layer[l] = per_layer[l].max(d);
                        }
                    }
                }
            }
        }
    }
    let worst = per_layer.iter().copied().fold(0.0, f64::max);
    let shown: Vec<String> = per_layer.iter().map(|d| format!("{d:.1e}")).collect();
    Ok((worst <= 1e-12, format!("3 layers x 10 seeds, per-layer max pairwise prompt-row deviation [{}] (<= 1e-12)", shown.join(", "))))
}

fn c5_pipeline() -> Outcome {
    let cfg = ModelConfig::toy(2);
    let (mut cross, mut same) = (0.0f64, 0.0f64);
    let instances = 12;
    for k in 0..instances {
        let params = ModelParams::random(&cfg, 900 + k).map_err(err)?;
        let samples = random_rollouts(cfg.vocab, 2 + (k as usize % 4), 1200 + k);
        let step = |plan| aggregate_step_gradient(&samples, &plan, &cfg, &params).map_err(err);
        let d1 = step(simulate_balance_batch(&samples, 2, 3, k).map_err(err)?)?;
        let d2 = step(simulate_balance_batch(&samples, 3, 2, k + 77).map_err(err)?)?;
        let s1 = step(dualkv_plan(&samples, 2, 4).map_err(err)?)?;
        let s2 = step(dualkv_plan(&samples, 1, 16).map_err(err)?)?;
        cross = cross.max(max_abs_diff(&d1, &s1)).max(max_abs_diff(&d2, &s2));
        same = same.max(max_abs_diff(&d1, &d2)).max(max_abs_diff(&s1, &s2));
    }
    Ok((
        cross <= 1e-9 && same <= 1e-12,
        format!("{instances} multi-group instances, default vs shared-prompt step {cross:.2e} (<= 1e-9), same-mode plans {same:.2e} (<= 1e-12)"),
    ))
}

fn c6_precision() -> Outcome {
    // kernel: f32 scratch, one cast, against the f64 oracle cast once
    let mut worst_ulp = 0.0f64;
    for (case, input, d_out) in sweep(30, 6) {
        if case.context_len == 0 {
            continue;
        }
        let bf = cast_input(&input, Precision::Bf16Emu);
        let d_bf = d_out.cast(Precision::Bf16Emu);
        let (o, lse) = dualkv_fwd(&bf).map_err(err)?;
        let g = dualkv_bwd(&bf, &o, &lse, &d_bf, false).map_err(err)?;
        let want = shared_prompt_reference(&cast_input(&bf, Precision::F64), &d_bf, Some((&o, &lse))).map_err(err)?;
        for (got, w) in [(&g.dk_context, &want.grads.dk_context), (&g.dv_context, &want.grads.dv_context)] {
            for (a, w) in got.data().iter().zip(w.data()) {
                let w16 = bf16_round(*w as f32);
                worst_ulp = worst_ulp.max((*a as f32 - w16).abs() as f64 / bf16_ulp(w16) as f64);
            }
        }
    }

    // Monte Carlo: 10^4 trials of 32 unit-scale contributions
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let (mut strictly, mut not_worse, trials) = (0usize, 0usize, 10_000usize);
    for _ in 0..trials {
        let c: Vec<Tensor> = (0..32)
            .map(|_| Tensor::from_f32([1], &[rng.random_range(-1.0f32..1.0)], Precision::F32))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let exact: f64 = c.iter().map(|t| t.data()[0]).sum();
        let naive = bf16_naive_accumulate(&c).map_err(err)?.data()[0];
        let single = f32_accumulate_then_cast(&c).map_err(err)?.data()[0];
        let (en, es) = ((naive - exact).abs(), (single - exact).abs());
        strictly += usize::from(en > es);
        not_worse += usize::from(es <= en);
    }
    let (rs, rn) = (strictly as f64 / trials as f64, not_worse as f64 / trials as f64);
    Ok((
        worst_ulp <= 1.0 && rs >= 0.99,
        format!(
            "kernel dK_c/dV_c single-cast max {worst_ulp} bf16 ulp (<= 1); naive fold strictly worse in {:.2}% of elements (need >= 99%), single-cast no worse in {:.2}%",
            100.0 * rs,
            100.0 * rn
        ),
    ))
}

fn c7_tables() -> Outcome {
    let rows: [(u64, u64, u64, &str); 8] = [
        (8, 2048, 2048, "1.8"),
        (8, 16384, 2048, "4.5"),
        (8, 65536, 512, "7.6"),
        (16, 16384, 2048, "6.0"),
        (32, 4096, 2048, "2.8"),
        (32, 16384, 2048, "7.2"),
        (16, 32768, 2048, "8.5"),
        (16, 65536, 512, "14.3"),
    ];
    let mut bad = Vec::new();
    for (n, p, r, want) in rows {
        let got = format!("{:.1}", compute_rho(n, p, r).map_err(err)?);
        if got != want {
            bad.push(format!("N={n} P={p} R={r}: {got} vs {want}"));
        }
    }
    let m = kernel_memory_savings(&Scenario::uniform(8, 16384, 2048, ModelDims::QWEN3_8B));
    let mem = [(mb(m.kv_bytes), 469.0), (mb(m.q_bytes), 940.0), (mb(m.lse_bytes), 14.0), (mb(m.total_bytes), 1423.0)];
    let mem_ok = mem.iter().all(|(got, want)| (got - want).abs() <= 1.0);
    Ok((
        bad.is_empty() && mem_ok,
        format!(
            "rho rows {}/8 exact{}; memory kv/q/lse/total = {:.1}/{:.1}/{:.1}/{:.1} MB vs 469/940/14/1423",
            8 - bad.len(),
            if bad.is_empty() { String::new() } else { format!(" ({})", bad.join("; ")) },
            mem[0].0,
            mem[1].0,
            mem[2].0,
            mem[3].0
        ),
    ))
}

/// Counts (query, key) pairs by walking the key positions each query sees.
fn brute_pairs(p: usize, rs: &[usize], mode: PackingMode) -> u128 {
    let mut count = 0u128;
    let causal = |q: usize, keys: &mut dyn Iterator<Item = usize>| keys.filter(|&k| k <= q).count() as u128;
    match mode {
        PackingMode::Standard => {
            for &r in rs {
                for q in 0..p + r {
                    count += causal(q, &mut (0..p + r));
                }
            }
        }
        PackingMode::DualKV => {
            for q in 0..p {
                count += causal(q, &mut (0..p));
            }
            for &r in rs {
                for q in p..p + r {
                    count += causal(q, &mut (0..p).chain(p..p + r));
                }
            }
        }
    }
    count
}

fn c8_flops() -> Outcome {
    let (mut checked, mut bad) = (0usize, Vec::new());
    for n in 1..=4usize {
        for code in 0..7usize.pow(n as u32) {
            let rs: Vec<usize> = (0..n).map(|i| code / 7usize.pow(i as u32) % 7).collect();
            for p in 0..=8 {
                let std = attention_flops(p, &rs, 1, 1, PackingMode::Standard);
                let dk = attention_flops(p, &rs, 1, 1, PackingMode::DualKV);
                let ok = std == 4 * brute_pairs(p, &rs, PackingMode::Standard)
                    && dk == 4 * brute_pairs(p, &rs, PackingMode::DualKV)
                    && dk <= std
                    && (dk == std) == (n == 1 || p == 0);
                if !ok && bad.len() < 3 {
                    bad.push(format!("P={p} R={rs:?}"));
                }
                checked += 1;
            }
        }
    }
    Ok((bad.is_empty(), format!("{checked} (N, P, R) configurations against pair enumeration, both modes{}", if bad.is_empty() { String::new() } else { format!("; mismatches {bad:?}") })))
}

fn c9_degeneracies() -> Outcome {
    let mut identical = 0usize;
    let cases = sweep(20, 9);
    for (case, input, d_out) in &cases {
        let empty = DualKVInput {
            k_context: Tensor::zeros([0, case.kv_heads, case.head_dim], Precision::F32),
            v_context: Tensor::zeros([0, case.kv_heads, case.head_dim], Precision::F32),
            context_seqlen: 0,
            ..cast_input(input, Precision::F32)
        };
        let batch = VarlenBatch::new(empty.q.clone(), empty.k_decoded.clone(), empty.v_decoded.clone(), empty.cu_seqlens_q.clone()).with_tile(case.tile);
        let d = d_out.cast(Precision::F32);
        let (o, l) = dualkv_fwd(&empty).map_err(err)?;
        let (fo, fl) = fa2_varlen_fwd(&batch).map_err(err)?;
        let g = dualkv_bwd(&empty, &o, &l, &d, true).map_err(err)?;
        let (dq, dk, dv) = dualkv::fa2_varlen_bwd(&batch, &fo, &fl, &d).map_err(err)?;
        identical += usize::from(o == fo && l == fl && g.dq == dq && g.dk_decoded == dk && g.dv_decoded == dv);
    }
    let cfg = ModelConfig::toy(2);
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let params = ModelParams::random(&cfg, 70 + seed).map_err(err)?;
        let samples = random_rollouts(cfg.vocab, 1, 170 + seed);
        let one = group_samples(&samples[..1]).map_err(err)?;
        let a = model_fwd(&cfg, &params, &pack_standard(&one).map_err(err)?, Backend::Standard).map_err(err)?;
        let b = model_fwd(&cfg, &params, &pack_dualkv(&one).map_err(err)?, Backend::DualKV).map_err(err)?;
        worst = (&a.logits - &b.logits).iter().fold(worst, |m, d| m.max(d.abs()));
    }
    Ok((
        identical == cases.len() && worst <= 1e-12,
        format!("P=0 bit-identical to fa2 (f32, deterministic) in {identical}/{}; N=1 logits max deviation {worst:.2e} (<= 1e-12)", cases.len()),
    ))
}

fn c10_tiles() -> Outcome {
    let mut worst = 0.0f64;
    let cases = sweep(30, 10);
    for (case, input, _) in &cases {
        let i32in = cast_input(input, Precision::F32);
        let q_ctx = seeded_unit(&[case.context_len, case.heads, case.head_dim], 1).cast(Precision::F32);
        let b32 = replicated_batch(&i32in, &q_ctx).map_err(err)?;
        let full = (case.context_len + case.lens.iter().copied().max().unwrap_or(0)).max(1);
        let mut outs = Vec::new();
        for t in [1, 2, 4, 8, full] {
            let (a, _) = dualkv_fwd(&i32in.clone().with_tile(t)).map_err(err)?;
            let (b, _) = fa2_varlen_fwd(&b32.clone().with_tile(t)).map_err(err)?;
            outs.push((a, b));
        }
        for (a, b) in &outs[1..] {
            worst = worst.max(a.max_abs_diff(&outs[0].0).map_err(err)?).max(b.max_abs_diff(&outs[0].1).map_err(err)?);
        }
    }
    Ok((worst <= 1e-5, format!("{} configs, tiles {{1,2,4,8,full}}, f32 max deviation {worst:.2e} (<= 1e-5)", cases.len())))
}

fn c11_bench() -> Outcome {
    let cfg = BenchConfig {
        heads: 1,
        kv_heads: 1,
        head_dim: 8,
        reps: 1,
        warmup: 1,
        ..BenchConfig::new(28, 4096, 2048)
    };
    let r = run_bench(&cfg).map_err(err)?;
    Ok((
        r.speedup_total > 1.0,
        format!(
            "N=28 P=4096 R=2048 (H=1, d=8, f32, CPU): measured {:.2}x (fwd {:.2}x, bwd {:.2}x) vs predicted {:.2}x by tokens, {:.2}x by attention pairs; bwd/fwd fa2 {:.2}, dualkv {:.2}",
            r.speedup_total,
            r.speedup_fwd,
            r.speedup_bwd,
            r.predicted_tokens,
            r.predicted_pairs,
            r.fa2.bwd_fwd_ratio(),
            r.dualkv.bwd_fwd_ratio()
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("forward exactness", c1_forward),
        ("backward exactness", c2_backward),
        ("gradient equivalence", c3_gradient_equivalence),
        ("prompt hidden-state invariant", c4_prompt_invariant),
        ("pipeline aggregate equivalence", c5_pipeline),
        ("precision contract", c6_precision),
        ("rho and memory tables", c7_tables),
        ("FLOP oracle", c8_flops),
        ("degeneracies", c9_degeneracies),
        ("tile independence", c10_tiles),
        ("CPU benchmark speedup", c11_bench),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!ok);
        println!(
            "criterion {:>2} {} {name}: {detail} [{:.1}s]",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
