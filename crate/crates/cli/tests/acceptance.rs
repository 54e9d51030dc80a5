//! Acceptance suite. Runs every criterion in sequence and prints one
//! PASS/FAIL line each; exits non-zero if any criterion fails.
//!
//! Informational measurements (not gating) are printed as `INFO` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use semwave::baselines::{run_digital_pipeline, simulate_awgn_ber, uncoded_ber, DigitalConfig, Modulation};
use semwave::channel::{ChannelModel, SyntheticTvir, TvirRecord};
use semwave::codebook::{Codebook, RelevanceMatrix};
use semwave::grad::{check_gradients, GradCheckConfig};
use semwave::link::{transmit_tokens, Link};
use semwave::metrics::{fps_equivalent, semantic_l2, throughput_table, token_accuracy, TokenCost};
use semwave::ofdm::OfdmFrameSpec;
use semwave::training::{train, TrainConfig};
use semwave::grad::forward_loss;
use semwave::wavebank::{init_wavebank, InitScheme};
use semwave::Cplx;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn info(line: impl AsRef<str>) {
    println!("INFO  {}", line.as_ref());
}

fn uniform_tokens(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

// ---------------------------------------------------------------------------

fn table_ii() -> Verdict {
    let t = Instant::now();
    let spec = OfdmFrameSpec::default();
    let rows = throughput_table(&spec, 1024, 16, 16.0, &[0.73, 0.33]).unwrap();
    let got: Vec<(String, String, Option<usize>, usize, usize)> = rows
        .iter()
        .map(|r| (r.config.clone(), format!("{:.1}", r.fps), r.bpsk_bits, r.l_bpsk, r.l_qpsk))
        .collect();
    let want = [
        ("real-time", "16.0", None, 9, 5),
        ("no-fec", "14.4", Some(10), 10, 5),
        ("ldpc-r0.73", "10.5", Some(14), 13, 7),
        ("ldpc-r0.33", "4.8", Some(30), 30, 15),
    ];
    let mut ok = got.len() == want.len();
    for (g, w) in got.iter().zip(want) {
        ok &= g.0 == w.0 && g.1 == w.1 && g.2 == w.2 && g.3 == w.3 && g.4 == w.4;
    }
    // QPSK carries two bits per slot, so each digital row costs half the slots.
    for r in rows.iter().filter(|r| r.bpsk_bits.is_some()) {
        let bits = r.bpsk_bits.unwrap() as f64;
        let b = TokenCost::Digital { bits, modulation: Modulation::Bpsk }.slots();
        let q = TokenCost::Digital { bits, modulation: Modulation::Qpsk }.slots();
        ok &= q * 2.0 == b && r.qpsk_symbols == Some(r.bpsk_bits.unwrap().div_ceil(2));
    }
    let elapsed = t.elapsed();
    ok &= elapsed < Duration::from_secs(1);
    let summary: Vec<String> = got.iter().map(|g| format!("{} {} fps L={}/{}", g.0, g.1, g.3, g.4)).collect();
    verdict(ok, format!("{} ({elapsed:.2?})", summary.join(", ")))
}

fn throughput_anchor() -> Verdict {
    // Independent arithmetic from the profile constants: 64 subcarriers,
    // 16 symbols with a pilot every 4th, CP 63, chirp 500, preamble 128,
    // 8 kHz sampling.
    let data_slots = 64.0 * (16.0 - 4.0);
    let frame_s = (500.0 + 128.0 + 16.0 * (64.0 + 63.0)) / 8000.0;
    let oracle = data_slots / frame_s;
    let spec = OfdmFrameSpec::default();
    let cap = spec.data_slot_rate();
    let bound = fps_equivalent(&spec, TokenCost::Digital { bits: 10.0, modulation: Modulation::Bpsk }, 16).unwrap();
    let ok = (cap - oracle).abs() < 1e-9
        && format!("{cap:.1}") == "2309.8"
        && (bound - 2310.0 / 160.0).abs() < 0.05
        && (bound - 14.43).abs() < 0.05;
    verdict(ok, format!("capacity {cap:.3} slots/s, no-FEC bound {bound:.3} fps"))
}

fn gradient_suite() -> Verdict {
    let t = Instant::now();
    let cb = Codebook::planted_clusters(16, 8, 4, 0.3, 11).unwrap();
    let r = RelevanceMatrix::from_codebook(&cb).unwrap();
    let mut p = init_wavebank(16, 8, 5, InitScheme::Gaussian).unwrap();
    *p.parts_mut().2 = 0.4f64.ln();
    let link = Link::new(OfdmFrameSpec::default(), 3).unwrap();
    let tokens = uniform_tokens(link.tokens_per_frame(8).unwrap(), 16, 4);
    let tvir = Arc::new(
        TvirRecord::synthetic(&SyntheticTvir {
            duration_s: 4.0,
            ..SyntheticTvir::default()
        })
        .unwrap(),
    );
    let taps = vec![Cplx::new(1.0, 0.0), Cplx::new(0.35, -0.2), Cplx::new(0.0, 0.1)];
    let channels = [
        ("ideal", ChannelModel::ideal()),
        ("awgn", ChannelModel::awgn(20.0, 17)),
        ("fir", ChannelModel::fir(taps, 20.0, 17)),
        ("tvir", ChannelModel::tvir(tvir, 20.0, 17)),
    ];
    let cfg = GradCheckConfig {
        coordinates: 64,
        seed: 9,
        ..GradCheckConfig::default()
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, model) in channels {
        let rep = check_gradients(&p, &r, &tokens, &link, &model, 2, &cfg).unwrap();
        ok &= rep.passed && rep.checks.len() > 64;
        parts.push(format!("{name} {:.1e}/{}", rep.max_error, rep.checks.len()));
    }
    let elapsed = t.elapsed();
    ok &= elapsed < Duration::from_secs(120);
    verdict(ok, format!("max rel error {} ({elapsed:.2?})", parts.join(", ")))
}

fn loopback() -> Verdict {
    let link = Link::new(OfdmFrameSpec::default(), 7).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for l in [9, 10, 13, 30] {
        let p = init_wavebank(1024, l, 3 + l as u64, InitScheme::Gaussian).unwrap();
        let n = 100 * link.tokens_per_frame(l).unwrap();
        let tokens = uniform_tokens(n, 1024, l as u64);
        let got = transmit_tokens(&link, &p, &ChannelModel::ideal(), &tokens, 1).unwrap();
        let acc = token_accuracy(&tokens, &got).unwrap();
        ok &= acc == 1.0;
        parts.push(format!("L={l} {acc:.4} ({n} tokens)"));
    }
    verdict(ok, parts.join(", "))
}

fn ber_sanity() -> Verdict {
    let q = Normal::new(0.0, 1.0).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for ebn0_db in [0.0, 2.0, 4.0, 6.0, 8.0] {
        let ebn0 = 10f64.powf(ebn0_db / 10.0);
        let theory = q.sf((2.0 * ebn0).sqrt());
        // At least 1e6 bits and about 2e4 expected errors.
        let n_bits = ((2e4 / theory) as usize).max(1_000_000);
        for m in [Modulation::Bpsk, Modulation::Qpsk] {
            let sim = simulate_awgn_ber(m, ebn0_db, n_bits, 100 + ebn0_db as u64).unwrap();
            let rel = (sim - theory).abs() / theory;
            ok &= theory >= 1e-4 && rel < 0.05;
            parts.push(format!("{m:?}@{ebn0_db}dB {rel:.3}"));
        }
        // QPSK at symbol noise variance v equals BPSK at 2v (3 dB).
        let v = 1.0 / (2.0 * ebn0);
        ok &= (uncoded_ber(Modulation::Qpsk, v) - uncoded_ber(Modulation::Bpsk, 2.0 * v)).abs() <= 1e-15;
    }
    verdict(ok, format!("relative error vs Q(sqrt(2Eb/N0)): {}", parts.join(", ")))
}

fn ldpc_cliff() -> Verdict {
    let link = Link::new(OfdmFrameSpec::default(), 3).unwrap();
    let tokens = uniform_tokens(10_000, 1024, 12);
    let strong = DigitalConfig::ldpc(Modulation::Bpsk, 0.33).build().unwrap();
    let weak = DigitalConfig::ldpc(Modulation::Bpsk, 0.73).build().unwrap();

    // Waterfall on AWGN: first SNR with post-FEC BER < 1e-4, every higher
    // grid point must stay below it.
    let grid: Vec<f64> = (-8..=6).map(f64::from).collect();
    let mut curve = Vec::new();
    for &snr in &grid {
        let r = run_digital_pipeline(&strong, &tokens, 1024, &link, &ChannelModel::awgn(snr, 4), 2).unwrap();
        curve.push((snr, r.ber_pre, r.ber_post));
    }
    let threshold = curve.iter().position(|c| c.2 < 1e-4);
    let mut ok = threshold.is_some_and(|i| i > 0 && curve[i..].iter().all(|c| c.2 < 1e-4));
    let awgn: Vec<String> = curve.iter().map(|c| format!("{}dB {:.3}->{:.1e}", c.0, c.1, c.2)).collect();
    info(format!("ldpc r=0.33 awgn pre->post: {}", awgn.join(", ")));
    let threshold_db = threshold.map(|i| curve[i].0);

    // Above about 13% raw BER on a fading channel with spill past the cyclic
    // prefix, decoding makes things worse.
    let harsh = Arc::new(TvirRecord::synthetic(&SyntheticTvir::harsh()).unwrap());
    let mut high_raw = Vec::new();
    for snr in [10.0, 20.0, 30.0] {
        let r = run_digital_pipeline(&strong, &tokens, 1024, &link, &ChannelModel::tvir(harsh.clone(), snr, 4), 2).unwrap();
        info(format!("ldpc r=0.33 harsh tvir {snr}dB pre {:.4} post {:.4}", r.ber_pre, r.ber_post));
        if r.ber_pre >= 0.13 {
            high_raw.push((r.ber_pre, r.ber_post));
        }
    }
    ok &= !high_raw.is_empty() && high_raw.iter().all(|(pre, post)| post >= pre);

    let default = Arc::new(TvirRecord::synthetic(&SyntheticTvir::default()).unwrap());
    for (name, sys) in [("0.73", &weak), ("0.33", &strong)] {
        let r = run_digital_pipeline(sys, &tokens, 1024, &link, &ChannelModel::tvir(default.clone(), 30.0, 4), 2).unwrap();
        info(format!("ldpc r={name} default tvir 30dB pre {:.4} post {:.4}", r.ber_pre, r.ber_post));
    }
    let pts: Vec<String> = high_raw.iter().map(|(a, b)| format!("{a:.3}->{b:.3}")).collect();
    verdict(
        ok,
        format!("awgn threshold {threshold_db:?} dB; harsh tvir raw>=13% pre->post {}", pts.join(", ")),
    )
}

struct Structured {
    loss_ratio: f64,
    near: f64,
    far: f64,
    trained_l2: f64,
    random_l2: f64,
    transfer: [f64; 3],
    elapsed: Duration,
}

fn toy_channel(seed: u64, delay_spread_s: f64) -> Arc<TvirRecord> {
    Arc::new(
        TvirRecord::synthetic(&SyntheticTvir {
            seed,
            delay_spread_s,
            ..SyntheticTvir::default()
        })
        .unwrap(),
    )
}

/// Trains the K=64 clustered fixture on synthetic channel A and measures
/// everything the structuring and transfer criteria need.
fn structure(delay_spread_s: f64, transfer: bool) -> Structured {
    let t = Instant::now();
    let (k, l) = (64, 32);
    let cb = Codebook::orthogonal_clusters(k, 16, 16, 3.0, 0.005, 3).unwrap();
    let r = RelevanceMatrix::from_codebook(&cb).unwrap();
    let link = Link::new(OfdmFrameSpec::default(), 2).unwrap();
    let a = ChannelModel::tvir(toy_channel(1, delay_spread_s), 20.0, 11);
    let init = init_wavebank(k, l, 5, InitScheme::Gaussian).unwrap();
    let probe = uniform_tokens(384, k, 77);
    let loss0 = forward_loss(&init, &r, &probe, &link, &a, 77).unwrap().loss;
    let cfg = TrainConfig {
        steps: 3000,
        learning_rate: 0.01,
        channel: a.clone(),
        seed: 3,
        ..TrainConfig::default()
    };
    let trained = train(init.clone(), &r, &link, &cfg, &[], None).unwrap().params;
    let loss1 = forward_loss(&trained, &r, &probe, &link, &a, 77).unwrap().loss;

    let table = trained.synthesize_all();
    let (mut near, mut nn, mut far, mut nf) = (0.0, 0, 0.0, 0);
    for i in 0..k {
        for j in (0..k).filter(|&j| j != i) {
            let d = table.row(i).iter().zip(table.row(j)).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
            if r.get(i, j) > 0.8 {
                near += d;
                nn += 1;
            } else if r.get(i, j) < 0.2 {
                far += d;
                nf += 1;
            }
        }
    }
    let tokens = uniform_tokens(2400, k, 29);
    let at10 = a.with_snr(10.0);
    let l2 = |p| semantic_l2(&cb, &tokens, &transmit_tokens(&link, p, &at10, &tokens, 5).unwrap()).unwrap();
    let (trained_l2, random_l2) = (l2(&trained), l2(&init));
    let mut acc = [0.0; 3];
    if transfer {
        for (slot, seed) in acc.iter_mut().zip([1, 2, 3]) {
            let m = ChannelModel::tvir(toy_channel(seed, delay_spread_s), 30.0, 21);
            *slot = token_accuracy(&tokens, &transmit_tokens(&link, &trained, &m, &tokens, 9).unwrap()).unwrap();
        }
    }
    Structured {
        loss_ratio: loss1 / loss0,
        near: near / nn as f64,
        far: far / nf as f64,
        trained_l2,
        random_l2,
        transfer: acc,
        elapsed: t.elapsed(),
    }
}

fn structuring(s: &Structured) -> Verdict {
    let ok = s.loss_ratio < 0.5 && s.near < s.far && s.trained_l2 < s.random_l2 && s.elapsed < Duration::from_secs(1800);
    verdict(
        ok,
        format!(
            "loss ratio {:.3}, distance R>0.8 {:.3} vs R<0.2 {:.3}, semantic_l2@10dB {:.4} vs random {:.4} ({:.1?})",
            s.loss_ratio, s.near, s.far, s.trained_l2, s.random_l2, s.elapsed
        ),
    )
}

fn transfer(s: &Structured) -> Verdict {
    let [a, b, c] = s.transfer;
    verdict(
        a > 0.0 && b >= 0.9 * a && c >= 0.9 * a,
        format!("accuracy@30dB A {a:.3}, B {b:.3} ({:.1}%), C {c:.3} ({:.1}%)", 100.0 * b / a, 100.0 * c / a),
    )
}

fn check_relevance(cb: &Codebook, pairs: &[(usize, usize)], max_dist: f64) -> Result<(), String> {
    let r = RelevanceMatrix::from_codebook(cb).map_err(|e| e.to_string())?;
    let scaled = Codebook::new(cb.k(), cb.d(), (0..cb.k()).flat_map(|i| cb.embedding(i).iter().map(|v| 3.7 * v)).collect())
        .and_then(|c| RelevanceMatrix::from_codebook(&c))
        .map_err(|e| e.to_string())?;
    for &(i, j) in pairs {
        let v = r.get(i, j);
        let d = cb.embedding(i).iter().zip(cb.embedding(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let oracle = 1.0 - d / max_dist;
        if i == j && v != 1.0 {
            return Err(format!("R[{i}][{i}] = {v}"));
        }
        if v != r.get(j, i) || !(0.0..=1.0).contains(&v) {
            return Err(format!("R[{i}][{j}] = {v} asymmetric or out of range"));
        }
        if (v - oracle).abs() > 1e-12 || (v - scaled.get(i, j)).abs() > 1e-12 {
            return Err(format!("R[{i}][{j}] = {v}, oracle {oracle}, scaled {}", scaled.get(i, j)));
        }
    }
    Ok(())
}

fn all_pairs_max(cb: &Codebook) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..cb.k() {
        for j in i + 1..cb.k() {
            let d = cb.embedding(i).iter().zip(cb.embedding(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            m = m.max(d);
        }
    }
    m.sqrt()
}

fn codebook_invariants() -> Verdict {
    let t = Instant::now();
    let mut errors = Vec::new();
    let small = [
        Codebook::planted_clusters(64, 16, 8, 0.3, 1).unwrap(),
        Codebook::planted_clusters(16, 4, 4, 0.5, 2).unwrap(),
        Codebook::orthogonal_clusters(64, 16, 16, 3.0, 0.005, 3).unwrap(),
    ];
    for cb in &small {
        let pairs: Vec<(usize, usize)> = (0..cb.k()).flat_map(|i| (0..cb.k()).map(move |j| (i, j))).collect();
        if let Err(e) = check_relevance(cb, &pairs, all_pairs_max(cb)) {
            errors.push(format!("K={}: {e}", cb.k()));
        }
    }
    let big = Codebook::planted_clusters(1024, 64, 32, 0.4, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pairs: Vec<(usize, usize)> = (0..20_000).map(|_| (rng.random_range(0..1024), rng.random_range(0..1024))).collect();
    pairs.extend((0..1024).map(|i| (i, i)));
    if let Err(e) = check_relevance(&big, &pairs, all_pairs_max(&big)) {
        errors.push(format!("K=1024: {e}"));
    }
    let elapsed = t.elapsed();
    let ok = errors.is_empty() && elapsed < Duration::from_secs(10);
    let detail = if errors.is_empty() {
        format!("exhaustive K<=64 on 3 codebooks, 21024 sampled pairs at K=1024 ({elapsed:.2?})")
    } else {
        errors.join("; ")
    };
    verdict(ok, detail)
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.toml");
    let tmp = tempfile::tempdir().unwrap();
    let commands = ["info", "train", "eval", "multicast", "ber", "gradcheck"];
    let mut trees = Vec::new();
    for (run, jobs) in [(0, "1"), (1, "1"), (2, "2")] {
        let out = tmp.path().join(format!("run{run}"));
        for cmd in commands {
            let status = Command::new(env!("CARGO_BIN_EXE_semwave"))
                .arg(cmd)
                .arg("--config")
                .arg(&config)
                .arg("--out")
                .arg(&out)
                .args(["--jobs", jobs])
                .output()
                .unwrap()
                .status;
            if !status.success() {
                return verdict(false, format!("`semwave {cmd}` exited with {status}"));
            }
        }
        trees.push(tree(&out));
    }
    let files = trees[0].len();
    let differing: Vec<String> = trees[0]
        .iter()
        .filter(|(p, bytes)| trees[1..].iter().any(|t| t.get(*p) != Some(*bytes)))
        .map(|(p, _)| p.display().to_string())
        .collect();
    let same_set = trees[1..].iter().all(|t| t.len() == files);
    verdict(
        same_set && differing.is_empty() && files > 0,
        if differing.is_empty() {
            format!("{} commands, {files} files identical over 3 runs (jobs 1, 1, 2)", commands.len())
        } else {
            format!("differs: {}", differing.join(", "))
        },
    )
}

fn main() {
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Verdict| {
        let v = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v));
    };
    run("table-ii", &table_ii);
    run("throughput-anchor", &throughput_anchor);
    run("gradient-suite", &gradient_suite);
    run("loopback", &loopback);
    run("ber-sanity", &ber_sanity);
    run("ldpc-cliff", &ldpc_cliff);
    let toy = std::panic::catch_unwind(|| structure(0.005, true));
    match &toy {
        Ok(s) => {
            run("semantic-structuring", &|| structuring(s));
            run("transfer", &|| transfer(s));
        }
        Err(_) => {
            run("semantic-structuring", &|| verdict(false, "fixture panicked"));
            run("transfer", &|| verdict(false, "fixture panicked"));
        }
    }
    run("codebook-invariants", &codebook_invariants);
    run("determinism", &determinism);

    // Same fixture on the default synthetic channel, whose delay spread
    // exceeds the cyclic prefix. Reported only.
    if let Ok(s) = std::panic::catch_unwind(|| structure(SyntheticTvir::default().delay_spread_s, false)) {
        info(format!(
            "structuring on default tvir: loss ratio {:.3}, distance {:.3} vs {:.3}, semantic_l2 {:.4} vs random {:.4}",
            s.loss_ratio, s.near, s.far, s.trained_l2, s.random_l2
        ));
    }

    let failed: Vec<&str> = results.iter().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
