mod common;

use std::fs;

use common::{grid, rng, small_map};
use nalgebra::DMatrix;
use tmap::io::{
    chain_from_bytes, chain_to_bytes, ingest, load_chain, load_map, map_from_bytes, map_to_bytes, read_locations,
    read_matrix, save_chain, save_map, write_matrix, IngestOptions, Standardization,
};
use tmap::ordering::MetricKind;
use tmap::{dpm_gibbs, dpm_logpdf, logpdf, maximin_order, DpmConfig, Error, OrderConfig};

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

#[test]
fn map_container_roundtrip_is_byte_identical() {
    let (map, y) = small_map(25, 15, [-1.0, 0.5, 0.0, 0.3, -0.2, -0.5], false, 1);
    let dir = tmp();
    let path = dir.path().join("m.btm");
    save_map(&path, &map).unwrap();
    let loaded = load_map(&path).unwrap();
    assert_eq!(map_to_bytes(&loaded).unwrap(), fs::read(&path).unwrap());
    assert_eq!(loaded.loglik().to_bits(), map.loglik().to_bits());
    for k in 0..5 {
        let field = common::row(&y, k);
        assert_eq!(logpdf(&map, &field).unwrap().to_bits(), logpdf(&loaded, &field).unwrap().to_bits());
    }
}

#[test]
fn linear_map_with_infinite_theta_roundtrips() {
    let (map, _) = small_map(16, 12, [f64::NEG_INFINITY, 0.5, 0.0, 0.3, 0.0, -0.5], true, 2);
    let bytes = map_to_bytes(&map).unwrap();
    let loaded = map_from_bytes(&bytes).unwrap();
    assert_eq!(map_to_bytes(&loaded).unwrap(), bytes);
    assert_eq!(loaded.hyper().theta.to_array()[0], f64::NEG_INFINITY);
}

#[test]
fn wrong_magic_and_newer_versions_are_refused() {
    let (map, _) = small_map(9, 8, [-1.0, 0.5, 0.0, 0.3, -0.2, -0.5], false, 3);
    let bytes = map_to_bytes(&map).unwrap();
    let mut newer = bytes.clone();
    newer[3] = b'2';
    match map_from_bytes(&newer) {
        Err(Error::Format(msg)) => assert!(msg.contains("newer"), "{msg}"),
        other => panic!("expected format error, got {other:?}"),
    }
    assert!(matches!(map_from_bytes(b"PK\x03\x04 not a map"), Err(Error::Format(_))));
    assert!(matches!(chain_from_bytes(&bytes), Err(Error::Format(_))));
    assert!(matches!(map_from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Format(_))));
    assert!(matches!(map_from_bytes(&bytes[..20]), Err(Error::Format(_))));
}

#[test]
fn chain_container_roundtrip_preserves_density() {
    let locs = grid(4);
    let mut r = rng(4);
    let y = common::gp_samples(&locs, 12, 0.3, &mut r);
    let ordering = maximin_order(&locs, &OrderConfig { m_max: 5, ..Default::default() }).unwrap();
    let config = DpmConfig { iterations: 30, burn_in: 10, thin: 5, m_max: 5, ..Default::default() };
    let chain = dpm_gibbs(&y, ordering, &config, &mut r).unwrap();
    let dir = tmp();
    let path = dir.path().join("c.btmdpm");
    save_chain(&path, &chain).unwrap();
    let loaded = load_chain(&path).unwrap();
    assert_eq!(chain_to_bytes(&loaded).unwrap(), fs::read(&path).unwrap());
    assert_eq!(loaded.states().len(), chain.states().len());
    let field = common::row(&y, 0);
    assert_eq!(dpm_logpdf(&chain, &field).unwrap().to_bits(), dpm_logpdf(&loaded, &field).unwrap().to_bits());
    assert!(matches!(map_from_bytes(&fs::read(&path).unwrap()), Err(Error::Format(_))));
}

#[test]
fn csv_hand_case_with_and_without_header() {
    let dir = tmp();
    let with = dir.path().join("a.csv");
    fs::write(&with, "s1,s2\n1.0,2.0\n3.0,6.0\n5.0,7.0\n").unwrap();
    let without = dir.path().join("b.csv");
    fs::write(&without, "1,2\n3,6\n5,7\n").unwrap();
    let expect = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 6.0, 5.0, 7.0]);
    for path in [&with, &without] {
        let data = ingest(path, IngestOptions { log_transform: false, standardize: true }).unwrap();
        assert_eq!(data.values, expect);
        assert_eq!(data.standardization.mean, vec![3.0, 5.0]);
        assert_eq!(data.standardization.sd, vec![2.0, 7f64.sqrt()]);
    }
    let logged = ingest(&without, IngestOptions { log_transform: true, standardize: false }).unwrap();
    assert_eq!(logged.values[(1, 1)], 6f64.ln());
    assert_eq!(logged.standardization, Standardization::identity(2));
}

#[test]
fn bad_values_are_reported_with_position() {
    let dir = tmp();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "1,2\n3,x\n").unwrap();
    match ingest(&path, IngestOptions::default()) {
        Err(Error::Data(msg)) => assert!(msg.contains("line 2, column 2"), "{msg}"),
        other => panic!("{other:?}"),
    }
    fs::write(&path, "1,2\n3,-1\n").unwrap();
    match ingest(&path, IngestOptions { log_transform: true, standardize: false }) {
        Err(Error::Data(msg)) => assert!(msg.contains("row 2, column 2"), "{msg}"),
        other => panic!("{other:?}"),
    }
    fs::write(&path, "1,2\n3,2\n5,2\n").unwrap();
    assert!(matches!(ingest(&path, IngestOptions::default()), Err(Error::Data(_))));
    fs::write(&path, "1,2\n3\n").unwrap();
    assert!(ingest(&path, IngestOptions::default()).is_err());
}

#[test]
fn binary_and_csv_matrices_roundtrip_exactly() {
    let mut r = rng(5);
    let m = common::gp_samples(&grid(3), 4, 0.5, &mut r);
    let dir = tmp();
    for name in ["m.bin", "m.csv"] {
        let path = dir.path().join(name);
        write_matrix(&path, &m).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
    }
    fs::write(dir.path().join("m.bin"), [0u8; 16]).unwrap();
    assert!(matches!(read_matrix(&dir.path().join("m.bin")), Err(Error::Data(_))));
}

#[test]
fn standardization_roundtrip() {
    let mut r = rng(6);
    let y = common::gp_samples(&grid(3), 20, 0.5, &mut r).map(|v| 3.0 * v + 10.0);
    let s = Standardization::estimate(&y).unwrap();
    for k in 0..20 {
        let raw = common::row(&y, k);
        let back = s.invert(&s.apply(&raw));
        assert!(raw.iter().zip(&back).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0)));
    }
}

#[test]
fn location_files_select_metric_from_header() {
    let dir = tmp();
    let cases = [
        ("xy.csv", "x,y\n0,0\n3,4\n", MetricKind::Euclidean, 5.0),
        ("plain.csv", "0,0\n3,4\n", MetricKind::Euclidean, 5.0),
        ("ll.csv", "lon,lat\n0,0\n90,0\n", MetricKind::Chordal, 2f64.sqrt()),
    ];
    for (name, text, kind, d) in cases {
        let path = dir.path().join(name);
        fs::write(&path, text).unwrap();
        let locs = read_locations(&path).unwrap();
        assert_eq!(locs.metric(), kind);
        assert!((locs.dist(0, 1) - d).abs() < 1e-12, "{name}: {}", locs.dist(0, 1));
    }
    let path = dir.path().join("odd.csv");
    fs::write(&path, "a,b\n0,0\n1,1\n").unwrap();
    assert!(matches!(read_locations(&path), Err(Error::Data(_))));
}
