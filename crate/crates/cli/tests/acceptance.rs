//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resforge_core::{
    apply_residual, extract_residual, pack, write_archive, Accumulation, Archive, Dtype, MergePolicy, PackConfig,
    ResidualSet, TensorRecord, TokenDoc, S1_WARNING,
};
use tempfile::TempDir;

struct Outcome {
    ok: bool,
    detail: String,
}

impl Outcome {
    fn pass(detail: impl Into<String>) -> Self {
        Self {
            ok: true,
            detail: detail.into(),
        }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Self {
            ok: false,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Result<Outcome, String>;

fn main() {
    let criteria: [(&str, Duration, Check); 5] = [
        ("residual round trip within 1 ulp", Duration::from_secs(10), round_trip),
        ("flops ratio is exactly 2048", Duration::from_secs(1), flops_ratio),
        (
            "packing conserves tokens and isolates documents",
            Duration::from_secs(30),
            packing,
        ),
        (
            "write-open-write is byte identical",
            Duration::from_secs(10),
            format_fidelity,
        ),
        (
            "compatibility gate denies and warns",
            Duration::from_secs(5),
            compat_gate,
        ),
    ];
    let mut failures = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check().unwrap_or_else(|e| Outcome::fail(format!("error: {e}")));
        let elapsed = start.elapsed();
        let in_time = elapsed <= *limit;
        let ok = outcome.ok && in_time;
        failures += usize::from(!ok);
        println!(
            "{} [{}] {name}: {}; {:.3}s (limit {}s{})",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            outcome.detail,
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", exceeded" },
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}

fn resforge<I: IntoIterator<Item = S>, S: AsRef<OsStr>>(args: I) -> Result<Output, String> {
    Command::new(env!("CARGO_BIN_EXE_resforge"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())
}

fn spacing(x: f32) -> f32 {
    let a = x.abs();
    a.next_up() - a
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<u64> {
    match rng.random_range(0..3) {
        0 => vec![rng.random_range(1..=64)],
        _ => vec![rng.random_range(1..=64), rng.random_range(1..=64)],
    }
}

/// `apply(extract(i, b), b, alpha = 1)` against `i` for 50 random f32
/// pairs, under f32 and f64 accumulation. The bound is one ulp of the larger
/// operand magnitude; distance in ulps of `i` itself is reported alongside.
fn round_trip() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let mut worst = [0.0f64; 2];
    let mut worst_own = [0.0f64; 2];
    let mut elements = 0usize;
    let mut exact_f64_residual = true;

    for pair in 0..50 {
        let shapes: Vec<Vec<u64>> = (0..rng.random_range(1..=3)).map(|_| random_shape(&mut rng)).collect();
        let make = |rng: &mut ChaCha8Rng| -> Vec<TensorRecord> {
            shapes
                .iter()
                .enumerate()
                .map(|(t, s)| {
                    let n = s.iter().product::<u64>() as usize;
                    let v: Vec<f32> = (0..n).map(|_| rng.random_range(-10.0f32..=10.0)).collect();
                    TensorRecord::from_values(format!("t{t}"), Dtype::F32, s.clone(), &v).unwrap()
                })
                .collect()
        };
        let (iv, bv) = (make(&mut rng), make(&mut rng));
        let ip = dir.path().join(format!("i{pair}"));
        let bp = dir.path().join(format!("b{pair}"));
        write_archive(&iv, &BTreeMap::new(), &ip).map_err(|e| e.to_string())?;
        write_archive(&bv, &BTreeMap::new(), &bp).map_err(|e| e.to_string())?;
        let instruct = Archive::open(&ip).map_err(|e| e.to_string())?;
        let base = Archive::open(&bp).map_err(|e| e.to_string())?;

        let runs = [
            (0, MergePolicy::default().with_accumulation(Accumulation::F32)),
            (1, MergePolicy::default().with_accumulation(Accumulation::F64)),
            (
                2,
                MergePolicy::default()
                    .with_accumulation(Accumulation::F64)
                    .with_residual_dtype(Dtype::F64),
            ),
        ];
        for (slot, policy) in runs {
            let rp = dir.path().join("r");
            let mp = dir.path().join("m");
            extract_residual(&instruct, &base, &policy, &rp).map_err(|e| e.to_string())?;
            let residual = ResidualSet::open(&rp).map_err(|e| e.to_string())?;
            apply_residual(&base, &residual, &policy, &mp).map_err(|e| e.to_string())?;
            let merged = Archive::open(&mp).map_err(|e| e.to_string())?;
            for (ir, br) in iv.iter().zip(&bv) {
                let got: Vec<f32> = merged.read_values(&ir.name).map_err(|e| e.to_string())?;
                for ((g, i), b) in got.iter().zip(ir.values::<f32>()).zip(br.values::<f32>()) {
                    if slot == 2 {
                        exact_f64_residual &= g.to_bits() == i.to_bits();
                        continue;
                    }
                    elements += usize::from(slot == 0);
                    let err = (g - i).abs() as f64;
                    worst[slot] = worst[slot].max(err / spacing(i.abs().max(b.abs())) as f64);
                    worst_own[slot] = worst_own[slot].max(err / spacing(i) as f64);
                }
            }
        }
    }

    let detail = format!(
        "{elements} elements; max error {:.3} ulp (f32 acc), {:.3} ulp (f64 acc) at operand scale; \
         {:.0}/{:.0} ulp of the instruct value itself; f64 residual exact: {exact_f64_residual}",
        worst[0], worst[1], worst_own[0], worst_own[1]
    );
    Ok(if worst[0] <= 1.0 && worst[1] <= 1.0 && exact_f64_residual {
        Outcome::pass(detail)
    } else {
        Outcome::fail(detail)
    })
}

fn flops_ratio() -> Result<Outcome, String> {
    let o = resforge(["flops", "ratio", "--a", "8e9:204800M:5", "--b", "8e9:100M:5"])?;
    if !o.status.success() {
        return Ok(Outcome::fail(format!(
            "exit {:?}: {}",
            o.status.code(),
            String::from_utf8_lossy(&o.stderr)
        )));
    }
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).map_err(|e| e.to_string())?;
    let (n, d) = (v["numerator"].as_u64(), v["denominator"].as_u64());
    let detail = format!("ratio {} ({:?}/{:?})", v["ratio"], n, d);
    Ok(if n == Some(2048) && d == Some(1) && v["ratio"] == "2048" {
        Outcome::pass(detail)
    } else {
        Outcome::fail(detail)
    })
}

/// 50 corpora for each sequence length, documents of 1..=3S tokens.
fn packing() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let (mut corpora, mut sequences, mut masks_checked, mut violations) = (0, 0usize, 0usize, 0usize);
    for &s in &[4usize, 8, 16, 4096] {
        for c in 0..50 {
            let docs: Vec<TokenDoc> = (0..rng.random_range(1..=12))
                .map(|d| {
                    let len = rng.random_range(1..=3 * s);
                    TokenDoc::new(
                        format!("c{c}d{d}"),
                        (0..len).map(|_| rng.random_range(1..50_000)).collect(),
                    )
                })
                .collect();
            let expected: Vec<u32> = docs.iter().flat_map(|d| d.tokens.iter().copied()).collect();
            let owner: Vec<&str> = docs
                .iter()
                .flat_map(|d| d.tokens.iter().map(|_| d.doc_id.as_str()))
                .collect();
            let cfg = PackConfig {
                seq_len: s,
                split_long_docs: true,
                pad_id: 0,
            };
            let (seqs, stats) = pack(docs.clone(), cfg).map_err(|e| e.to_string())?;

            let got: Vec<u32> = seqs.iter().flat_map(|q| q.tokens.iter().copied()).collect();
            if got != expected || stats.corpus.token_count != expected.len() as u64 {
                return Ok(Outcome::fail(format!("S={s} corpus {c}: token stream differs")));
            }
            let mut pos = 0;
            for q in &seqs {
                if q.padded_tokens(0).len() != s {
                    return Ok(Outcome::fail(format!(
                        "S={s}: sequence length {}",
                        q.padded_tokens(0).len()
                    )));
                }
                if s <= 16 {
                    // Oracle from input order alone: content position p of
                    // this sequence holds a token of document owner[pos + p].
                    let mask = q.mask();
                    let content = q.tokens.len();
                    for qi in 0..s {
                        for ki in 0..s {
                            let allowed = mask.allows(qi, ki);
                            masks_checked += 1;
                            let same_doc = qi < content && ki < content && owner[pos + qi] == owner[pos + ki];
                            if allowed && (!same_doc || ki > qi) {
                                violations += 1;
                            }
                            if !allowed && same_doc && ki <= qi {
                                violations += 1;
                            }
                        }
                    }
                }
                pos += q.tokens.len();
            }
            sequences += seqs.len();
            corpora += 1;
        }
    }
    let detail = format!(
        "{corpora} corpora, {sequences} sequences, {masks_checked} mask entries checked, {violations} violations"
    );
    Ok(if violations == 0 && corpora == 200 {
        Outcome::pass(detail)
    } else {
        Outcome::fail(detail)
    })
}

fn random_archive(rng: &mut ChaCha8Rng, case: usize) -> (Vec<TensorRecord>, BTreeMap<String, String>) {
    let mut md = BTreeMap::new();
    if !case.is_multiple_of(3) {
        for k in 0..rng.random_range(1..4) {
            md.insert(
                format!("key{k}.{}", rng.random_range(0..100)),
                format!("value \"{}\"", rng.random::<u32>()),
            );
        }
    }
    let count = match case % 4 {
        0 => rng.random_range(0..2),
        _ => rng.random_range(1..6),
    };
    let mut records = Vec::new();
    for t in 0..count {
        let dtype = if case.is_multiple_of(5) {
            Dtype::Bf16
        } else {
            *Dtype::ALL.choose(rng).unwrap()
        };
        let shape: Vec<u64> = match rng.random_range(0..5) {
            0 => vec![],
            1 => vec![rng.random_range(0..3), 0],
            2 => vec![0],
            _ => (0..rng.random_range(1..4)).map(|_| rng.random_range(1..9)).collect(),
        };
        let n = shape.iter().product::<u64>() as usize * dtype.byte_width();
        let data: Vec<u8> = (0..n).map(|_| rng.random()).collect();
        records.push(TensorRecord::new(format!("model.layers.{t}.weight"), dtype, shape, data).unwrap());
    }
    (records, md)
}

fn format_fidelity() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0004);
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let (mut empty_md, mut zero_dim, mut bf16) = (0, 0, 0);
    for case in 0..100 {
        let (records, md) = random_archive(&mut rng, case);
        empty_md += usize::from(md.is_empty());
        zero_dim += usize::from(records.iter().any(|r| r.shape.contains(&0)));
        bf16 += usize::from(records.iter().any(|r| r.dtype == Dtype::Bf16));
        let first: PathBuf = dir.path().join(format!("a{case}"));
        let second: PathBuf = dir.path().join(format!("b{case}"));
        write_archive(&records, &md, &first).map_err(|e| e.to_string())?;
        let opened = Archive::open(&first).map_err(|e| e.to_string())?;
        let reread = opened.read_all().map_err(|e| e.to_string())?;
        write_archive(&reread, opened.metadata(), &second).map_err(|e| e.to_string())?;
        if read(&first)? != read(&second)? {
            return Ok(Outcome::fail(format!("archive {case} differs after rewrite")));
        }
        if reread != records || opened.metadata() != &md {
            return Ok(Outcome::fail(format!("archive {case} contents changed")));
        }
    }
    let detail =
        format!("100 archives ({empty_md} empty metadata, {zero_dim} with zero-dim tensors, {bf16} with bf16)");
    Ok(if empty_md > 0 && zero_dim > 0 && bf16 > 0 {
        Outcome::pass(detail)
    } else {
        Outcome::fail(detail)
    })
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| e.to_string())
}

fn compat_gate() -> Result<Outcome, String> {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let rec = |name: &str, shape: Vec<u64>, dtype: Dtype| {
        let n = shape.iter().product::<u64>() as usize * dtype.byte_width();
        TensorRecord::new(name, dtype, shape, vec![0; n]).unwrap()
    };
    let reference = vec![
        rec("embed", vec![8, 4], Dtype::Bf16),
        rec("victim", vec![4, 4], Dtype::Bf16),
        rec("head", vec![4, 8], Dtype::Bf16),
    ];
    let without_victim: Vec<_> = reference.iter().filter(|r| r.name != "victim").cloned().collect();
    let mut reshaped = reference.clone();
    reshaped[1] = rec("victim", vec![4, 5], Dtype::Bf16);
    let mut retyped = reference.clone();
    retyped[1] = rec("victim", vec![4, 4], Dtype::F32);

    let save = |name: &str, records: &[TensorRecord]| -> Result<PathBuf, String> {
        let p = dir.path().join(name);
        write_archive(records, &BTreeMap::new(), &p).map_err(|e| e.to_string())?;
        Ok(p)
    };
    let full = save("full", &reference)?;
    let cases = [
        ("missing-in-a", save("a_missing", &without_victim)?, full.clone()),
        ("missing-in-b", full.clone(), save("b_missing", &without_victim)?),
        ("shape-mismatch", full.clone(), save("reshaped", &reshaped)?),
        ("dtype-mismatch", full.clone(), save("retyped", &retyped)?),
    ];

    let mut seen = Vec::new();
    for (reason, a, b) in &cases {
        let o = resforge([OsStr::new("check"), a.as_os_str(), b.as_os_str()])?;
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).map_err(|e| e.to_string())?;
        let stderr = String::from_utf8_lossy(&o.stderr);
        let named = v["mismatches"][0]["tensor"] == "victim"
            && v["mismatches"][0]["reason"] == *reason
            && stderr.contains(&format!("victim: {reason}"));
        if o.status.code() != Some(2) || v["verdict"] != "deny" || !named {
            return Ok(Outcome::fail(format!(
                "{reason}: exit {:?}, report {v}",
                o.status.code()
            )));
        }
        seen.push(*reason);
    }

    // S1: an instruct-tagged target is allowed with the warning, through both
    // `check` and `apply`.
    let res = dir.path().join("res");
    let o = resforge([
        OsStr::new("extract"),
        "--instruct".as_ref(),
        full.as_os_str(),
        "--base".as_ref(),
        full.as_os_str(),
        "--out".as_ref(),
        res.as_os_str(),
    ])?;
    if !o.status.success() {
        return Ok(Outcome::fail(format!(
            "extract failed: {}",
            String::from_utf8_lossy(&o.stderr)
        )));
    }
    let lineage = [
        "--target-family",
        "llama3",
        "--target-variant",
        "instruct",
        "--residual-family",
        "llama3",
        "--residual-variant",
        "derived",
    ];
    let check = resforge(
        [OsStr::new("check"), full.as_os_str(), full.as_os_str()]
            .into_iter()
            .chain(lineage.iter().map(OsStr::new)),
    )?;
    let merged = dir.path().join("merged");
    let apply = resforge(
        [
            OsStr::new("apply"),
            "--target".as_ref(),
            full.as_os_str(),
            "--residual".as_ref(),
            res.as_os_str(),
            "--out".as_ref(),
            merged.as_os_str(),
        ]
        .into_iter()
        .chain(lineage.iter().map(OsStr::new)),
    )?;
    for (what, o, path) in [("check", &check, "/warnings"), ("apply", &apply, "/gate/warnings")] {
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).map_err(|e| e.to_string())?;
        let warned = v
            .pointer(path)
            .and_then(|w| w.as_array())
            .is_some_and(|w| w.iter().any(|x| x == S1_WARNING));
        if o.status.code() != Some(0) || !warned || !String::from_utf8_lossy(&o.stderr).contains(S1_WARNING) {
            return Ok(Outcome::fail(format!(
                "{what}: exit {:?}, no S1 warning in {v}",
                o.status.code()
            )));
        }
    }
    Ok(Outcome::pass(format!(
        "deny with exit 2 naming the tensor for {}; S1 warning on check and apply",
        seen.join(", ")
    )))
}
