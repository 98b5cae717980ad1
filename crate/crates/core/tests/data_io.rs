use mstgcn::data::*;
use mstgcn::probe::split_probe_accuracy;
use proptest::prelude::*;

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec { subjects: 3, epochs_per_subject: 100, channels: 2, samples: 300, seed, ..SyntheticSpec::default() }
}

fn toy_dataset(records: usize) -> Dataset {
    Dataset {
        channels: vec!["C3".into(), "O2".into()],
        samples: 4,
        records: (0..records)
            .map(|i| EpochRecord {
                subject: (i % 3) as u32,
                epoch_index: (i / 3) as u32,
                label: (i % 5) as u8,
                signal: (0..8).map(|k| (i * 8 + k) as f32 * 0.37 - 1.5).collect(),
            })
            .collect(),
    }
}

#[test]
fn container_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for n in [0, 1, 17] {
        let ds = toy_dataset(n);
        let path = dir.path().join(format!("d{n}.mstg"));
        save_dataset(&path, &ds).unwrap();
        let (manifest, back) = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(manifest.samples_per_epoch, 4);
        let bits = |d: &Dataset| d.records.iter().flat_map(|r| r.signal.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ds));
    }
}

#[test]
fn wrong_magic_is_rejected_at_offset_zero() {
    let mut bytes = toy_dataset(3).to_bytes().unwrap();
    bytes[0] = b'X';
    match Dataset::from_bytes(&bytes) {
        Err(DataError::Format { offset: 0, msg }) => assert!(msg.contains("magic")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn truncation_and_corruption_name_offsets() {
    let bytes = toy_dataset(3).to_bytes().unwrap();
    let cut = &bytes[..bytes.len() - 10];
    assert!(matches!(Dataset::from_bytes(cut), Err(DataError::Format { .. })));

    let mut flipped = bytes.clone();
    flipped[40] ^= 0x01;
    match Dataset::from_bytes(&flipped) {
        Err(DataError::Format { offset, msg }) => {
            assert_eq!(offset as usize, bytes.len() - 4);
            assert!(msg.contains("checksum"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn invalid_records_are_not_written() {
    let mut ds = toy_dataset(2);
    ds.records[1].label = 5;
    assert!(ds.to_bytes().is_err());
    let mut ds = toy_dataset(2);
    ds.records[0].signal[0] = f32::NAN;
    assert!(ds.to_bytes().is_err());
    let mut ds = toy_dataset(2);
    ds.records[1].subject = ds.records[0].subject;
    ds.records[1].epoch_index = ds.records[0].epoch_index;
    assert!(ds.to_bytes().is_err());
}

#[test]
fn manifest_counts_match_recount() {
    let (manifest, ds) = generate_synthetic(&small_spec(3)).unwrap();
    let mut recount = [0usize; 5];
    for r in &ds.records {
        recount[r.label as usize] += 1;
    }
    assert_eq!(manifest.class_counts, recount);
    assert_eq!(manifest.class_counts.iter().sum::<usize>(), ds.len());
    assert_eq!(manifest.subjects, vec![0, 1, 2]);
    assert_eq!(manifest.sample_rate_hz, 10.0);
}

#[test]
fn synthetic_counts_are_balanced() {
    let (manifest, ds) = generate_synthetic(&small_spec(1)).unwrap();
    assert_eq!(ds.len(), 300);
    assert_eq!(manifest.class_counts, [60; 5]);
}

#[test]
fn synthetic_generation_is_deterministic() {
    let spec = small_spec(11);
    let (_, a) = generate_synthetic(&spec).unwrap();
    let (_, b) = generate_synthetic(&spec).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    let (_, c) = generate_synthetic(&small_spec(12)).unwrap();
    assert_ne!(a, c);
}

fn epoch_mean(ds: &Dataset, i: usize, c: usize) -> f64 {
    ds.channel(i, c).sum::<f64>() / ds.samples as f64
}

fn epoch_power(ds: &Dataset, i: usize, c: usize) -> f64 {
    ds.channel(i, c).map(|v| v * v).sum::<f64>() / ds.samples as f64
}

#[test]
fn zero_bias_makes_subjects_statistically_alike() {
    let spec = SyntheticSpec { subjects: 2, epochs_per_subject: 250, bias_strength: 0.0, ..small_spec(5) };
    let (_, ds) = generate_synthetic(&spec).unwrap();
    for label in 0..5u8 {
        let stat = |s: u32| {
            let idx: Vec<usize> =
                (0..ds.len()).filter(|&i| ds.records[i].subject == s && ds.records[i].label == label).collect();
            let p = idx.iter().map(|&i| epoch_power(&ds, i, 0)).sum::<f64>() / idx.len() as f64;
            let m = idx.iter().map(|&i| epoch_mean(&ds, i, 0)).sum::<f64>() / idx.len() as f64;
            (p, m)
        };
        let (p0, m0) = stat(0);
        let (p1, m1) = stat(1);
        // expected power is amplitude² / 2 + σ² for both subjects
        assert!((p0 - p1).abs() / p0 < 0.1, "class {label}: {p0} vs {p1}");
        assert!((m0 - m1).abs() < 0.05, "class {label}: {m0} vs {m1}");
    }
}

#[test]
fn subject_bias_is_linearly_decodable_from_epoch_means() {
    let probe = |bias: f64| {
        let spec = SyntheticSpec { subjects: 5, epochs_per_subject: 60, bias_strength: bias, ..small_spec(9) };
        let (_, ds) = generate_synthetic(&spec).unwrap();
        let rows: Vec<Vec<f64>> = (0..ds.len()).map(|i| (0..2).map(|c| epoch_mean(&ds, i, c)).collect()).collect();
        let labels: Vec<usize> = ds.records.iter().map(|r| r.subject as usize).collect();
        split_probe_accuracy(&rows, &labels, 5, 1e-3).unwrap()
    };
    let biased = probe(0.5);
    let unbiased = probe(0.0);
    assert!(biased > 0.6, "biased probe accuracy {biased}");
    assert!(unbiased < 0.4, "unbiased probe accuracy {unbiased}");
}

fn night(n: usize) -> Vec<EpochRecord> {
    (0..n).map(|i| EpochRecord { subject: 4, epoch_index: i as u32 * 2, label: (i % 5) as u8, signal: vec![] }).collect()
}

#[test]
fn windows_without_context_are_single_epochs() {
    let w = window_sequence(&night(6), 0).unwrap();
    assert_eq!(w.len(), 6);
    assert!(w.iter().enumerate().all(|(i, w)| w.epochs == vec![i]));
}

#[test]
fn edge_windows_repeat_the_edge_epoch() {
    let w = window_sequence(&night(6), 2).unwrap();
    assert_eq!(w[0].epochs, vec![0, 0, 0, 1, 2]);
    assert_eq!(w[5].epochs, vec![3, 4, 5, 5, 5]);
    assert_eq!(w[3].label, 3);
}

#[test]
fn seven_epoch_night_has_one_window_per_epoch_for_every_context() {
    let recs = night(7);
    for d in 0..10 {
        let w = window_sequence(&recs, d).unwrap();
        assert_eq!(w.len(), 7);
        for (i, win) in w.iter().enumerate() {
            assert_eq!(win.epochs.len(), 2 * d + 1);
            assert_eq!(win.epochs[d], i);
            assert_eq!(win.label, recs[i].label);
            assert!(win.epochs.iter().all(|&p| p < 7));
        }
    }
}

#[test]
fn unsorted_night_is_an_ordering_error() {
    let mut recs = night(4);
    recs.swap(1, 2);
    assert!(matches!(window_sequence(&recs, 1), Err(DataError::Ordering { position: 2, prev: 4, got: 2 })));
}

#[test]
fn dataset_windows_stay_within_subjects() {
    let (_, mut ds) = generate_synthetic(&SyntheticSpec { epochs_per_subject: 10, ..small_spec(2) }).unwrap();
    ds.records.reverse();
    let w = window_dataset(&ds, &[0, 2], 1).unwrap();
    assert_eq!(w.len(), 20);
    for win in &w {
        let centre = &ds.records[win.epochs[1]];
        assert_eq!(centre.label, win.label);
        assert!(win.epochs.iter().all(|&p| ds.records[p].subject == win.subject));
    }
}

#[test]
fn layout_csv_parses_and_reports_lines() {
    let ok = "name,x,y,z\nF3,-0.5,0.7,0.5\nF4,0.5,0.7,0.5\nC3,-0.7,0,0.7\nC4,0.7,0,0.7\nO1,-0.3,-0.95,0\nO2,0.3,-0.95,0\n";
    assert_eq!(parse_layout_csv(ok).unwrap().len(), 6);

    let dup = "F3,0,0,1\nC3,1,0,0\nF3,0,1,0\n";
    match parse_layout_csv(dup) {
        Err(DataError::Layout { line, msg }) => {
            assert_eq!(line, 3);
            assert!(msg.contains("duplicate"));
        }
        other => panic!("unexpected {other:?}"),
    }
    match parse_layout_csv("name,x,y,z\nF3,0,zero,1\n") {
        Err(DataError::Layout { line, .. }) => assert_eq!(line, 2),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn builtin_scalp_layout_geometry() {
    let l = builtin_layout("isruc6").unwrap();
    assert_eq!(l.names(), ["F3", "F4", "C3", "C4", "O1", "O2"]);
    for p in l.coords() {
        assert!(((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 1.0).abs() < 1e-12);
    }
    let i = |n: &str| l.index_of(n).unwrap();
    assert!(l.distance(i("C3"), i("C4")) < l.distance(i("F3"), i("O2")));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn arbitrary_datasets_round_trip(
        channels in 1usize..4,
        samples in 1usize..6,
        raw in prop::collection::vec((0u32..4, 0u8..5, any::<u32>()), 0..20),
    ) {
        let width = channels * samples;
        let records = raw
            .iter()
            .enumerate()
            .map(|(i, &(s, l, bits))| EpochRecord {
                subject: s,
                epoch_index: i as u32,
                label: l,
                signal: (0..width).map(|k| {
                    let v = f32::from_bits(bits.wrapping_add(k as u32 * 7919));
                    if v.is_finite() { v } else { k as f32 }
                }).collect(),
            })
            .collect();
        let ds = Dataset { channels: (0..channels).map(|c| format!("E{c}")).collect(), samples, records };
        let back = Dataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), ds.to_bytes().unwrap());
    }

    #[test]
    fn window_count_equals_epoch_count(n in 1usize..40, d in 0usize..6) {
        prop_assert_eq!(window_sequence(&night(n), d).unwrap().len(), n);
    }
}
