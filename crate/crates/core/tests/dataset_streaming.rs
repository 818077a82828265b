//! Reading a dataset keeps one record in memory at a time.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use iclp_core::corpus::Family;
use iclp_core::latentize::{DatasetHeader, DatasetReader, DatasetWriter, RecordMode, TrainingRecord, DATASET_FORMAT};

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static A: Counting = Counting;

fn record(i: usize) -> TrainingRecord {
    let user_ids: Vec<u32> = (0..40).map(|j| (i + j) as u32 % 60 + 4).collect();
    let assistant_ids: Vec<u32> = (0..120).map(|j| (i * 7 + j) as u32 % 60 + 4).collect();
    let mask = [vec![0u8; user_ids.len()], vec![1u8; assistant_ids.len()]].concat();
    TrainingRecord {
        id: format!("r{i:05}"),
        user_ids,
        assistant_ids,
        mask,
        n: 3,
        family: Family::Arith,
        procedure_id: format!("P-{:02}", i % 20),
        vocab_hash: "v".into(),
        codec_hash: Some("c".into()),
    }
}

#[test]
fn ten_thousand_records_stream_in_bounded_memory() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("latent.jsonl");
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: 1,
        mode: RecordMode::Latent,
        vocab_hash: "v".into(),
        vocab_size: 128,
        codec_hash: Some("c".into()),
    };

    let base = LIVE.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let mut w = DatasetWriter::create(&path, header).unwrap();
    for i in 0..10_000 {
        w.write(&record(i)).unwrap();
    }
    w.finish().unwrap();
    let write_peak = PEAK.load(Ordering::Relaxed) - base;

    let file_size = std::fs::metadata(&path).unwrap().len() as usize;
    assert!(file_size > 5_000_000, "dataset is {file_size} bytes");

    let base = LIVE.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let mut count = 0usize;
    let mut tokens = 0usize;
    for (i, r) in DatasetReader::open(&path, Some("v")).unwrap().enumerate() {
        let r = r.unwrap();
        assert_eq!(r.id, format!("r{i:05}"));
        tokens += r.len();
        count += 1;
    }
    let read_peak = PEAK.load(Ordering::Relaxed) - base;

    assert_eq!((count, tokens), (10_000, 10_000 * 160));
    // A few buffers and one record, far below the file size.
    assert!(write_peak < 256 * 1024, "writer peak {write_peak} bytes");
    assert!(read_peak < 256 * 1024, "reader peak {read_peak} bytes");
}
