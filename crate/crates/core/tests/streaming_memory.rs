//! Peak heap stays far below archive size for whole-archive operations.
//! One test function so no other test shares the counting allocator.

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use resforge_core::{
    apply_residual, diff_report, extract_residual, Archive, ArchiveWriter, Dtype, MergePolicy, ResidualSet,
    SignatureEntry,
};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::SeqCst);
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

const TENSORS: usize = 16;
const ELEMS: usize = 1 << 19;

fn reset_peak() -> usize {
    let now = CURRENT.load(Ordering::SeqCst);
    PEAK.store(now, Ordering::SeqCst);
    now
}

fn peak_since(baseline: usize) -> usize {
    let p = PEAK.load(Ordering::SeqCst).saturating_sub(baseline);
    eprintln!("peak {p}");
    p
}

fn build(path: &Path, seed: f32) {
    let plan = (0..TENSORS)
        .map(|i| SignatureEntry::new(format!("blocks.{i}.w"), vec![512, (ELEMS / 512) as u64], Dtype::F32))
        .collect();
    let mut w = ArchiveWriter::create(path, plan, &BTreeMap::new()).unwrap();
    let mut chunk = Vec::with_capacity(64 << 10);
    for t in 0..TENSORS {
        for start in (0..ELEMS).step_by(16 << 10) {
            chunk.clear();
            for j in start..start + (16 << 10) {
                let v = ((t * ELEMS + j) as f32 * 1e-3 + seed).sin();
                chunk.extend_from_slice(&v.to_le_bytes());
            }
            w.write_chunk(&chunk).unwrap();
        }
    }
    w.finish().unwrap();
}

#[test]
fn whole_archive_operations_stream() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, bp) = (dir.path().join("instruct"), dir.path().join("base"));
    build(&ip, 0.5);
    build(&bp, 0.0);
    let size = std::fs::metadata(&ip).unwrap().len() as usize;
    let budget = size / 4;

    let instruct = Archive::open(&ip).unwrap();
    let base = Archive::open(&bp).unwrap();

    let b = reset_peak();
    instruct.content_hash().unwrap();
    assert!(peak_since(b) < budget, "hash peak {} of {size}", peak_since(b));

    let b = reset_peak();
    instruct.copy_to(dir.path().join("copy")).unwrap();
    assert!(peak_since(b) < budget, "copy peak {} of {size}", peak_since(b));

    let b = reset_peak();
    diff_report(&instruct, &base).unwrap();
    assert!(peak_since(b) < budget, "diff peak {} of {size}", peak_since(b));

    let b = reset_peak();
    extract_residual(&instruct, &base, &MergePolicy::default(), dir.path().join("res")).unwrap();
    assert!(peak_since(b) < budget, "extract peak {} of {size}", peak_since(b));

    let residual = ResidualSet::open(dir.path().join("res")).unwrap();
    let b = reset_peak();
    apply_residual(&base, &residual, &MergePolicy::default(), dir.path().join("merged")).unwrap();
    assert!(peak_since(b) < budget, "apply peak {} of {size}", peak_since(b));

    let merged = Archive::open(dir.path().join("merged")).unwrap();
    let got: Vec<f32> = merged.read_values("blocks.3.w").unwrap();
    let want: Vec<f32> = instruct.read_values("blocks.3.w").unwrap();
    let ulps = got
        .iter()
        .zip(&want)
        .map(|(g, w)| (g - w).abs() / (w.abs().next_up() - w.abs()))
        .fold(0.0f32, f32::max);
    assert!(ulps < 1e5, "{ulps}");
}
