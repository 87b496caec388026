//! IDX and CIFAR-10 binary fixtures built byte by byte, independently of the
//! library's writers.

mod common;

use std::path::Path;

use common::{cifar_fixture, idx_fixture};
use podloss::data::{parse_cifar10_bin, parse_mnist_idx, write_cifar10_bin, write_mnist_idx, Split};
use podloss::Error;

fn offset_of(e: Error) -> u64 {
    match e {
        Error::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {other}"),
    }
}

const IMG: &str = "images.idx";
const LBL: &str = "labels.idx";

fn parse_idx(img: &[u8], lbl: &[u8]) -> podloss::Result<podloss::data::Dataset> {
    parse_mnist_idx(img, Path::new(IMG), lbl, Path::new(LBL), Split::Train)
}

#[test]
fn idx_round_trips_byte_exactly() {
    for (count, rows, cols) in [(0, 28, 28), (1, 1, 1), (17, 28, 28), (5, 3, 7)] {
        let (img, lbl) = idx_fixture(count, rows, cols, count as u64);
        let ds = parse_idx(&img, &lbl).unwrap();
        assert_eq!(ds.len(), count);
        assert_eq!((ds.shape.c, ds.shape.h, ds.shape.w), (1, rows, cols));
        if count > 0 {
            assert_eq!(ds.images[[0, 0]], img[16] as f64 / 255.0);
            assert_eq!(ds.labels[count - 1], lbl[8 + count - 1] as usize);
        }
        let (mut img2, mut lbl2) = (Vec::new(), Vec::new());
        write_mnist_idx(&ds, &mut img2, &mut lbl2).unwrap();
        assert_eq!(img2, img);
        assert_eq!(lbl2, lbl);
    }
}

#[test]
fn idx_corruptions_report_offsets() {
    let (img, lbl) = idx_fixture(4, 5, 5, 1);

    let mut bad = img.clone();
    bad[3] = 0x01;
    assert_eq!(offset_of(parse_idx(&bad, &lbl).unwrap_err()), 0);

    let short = &img[..img.len() - 3];
    assert_eq!(offset_of(parse_idx(short, &lbl).unwrap_err()), short.len() as u64);

    let mut long = img.clone();
    long.push(0);
    assert_eq!(offset_of(parse_idx(&long, &lbl).unwrap_err()), img.len() as u64);

    assert_eq!(offset_of(parse_idx(&img[..10], &lbl).unwrap_err()), 8);

    let (_, lbl3) = idx_fixture(3, 5, 5, 1);
    match parse_idx(&img, &lbl3).unwrap_err() {
        Error::Format { path, offset, .. } => {
            assert_eq!(path, Path::new(LBL));
            assert_eq!(offset, 4);
        }
        e => panic!("{e}"),
    }

    let mut badlabel = lbl.clone();
    badlabel[10] = 10;
    assert_eq!(offset_of(parse_idx(&img, &badlabel).unwrap_err()), 10);
}

#[test]
fn cifar_round_trips_byte_exactly() {
    let a = cifar_fixture(3, 5);
    let b = cifar_fixture(2, 6);
    let ds = parse_cifar10_bin(&[(&a, Path::new("a.bin")), (&b, Path::new("b.bin"))], Split::Test).unwrap();
    assert_eq!(ds.len(), 5);
    assert_eq!(ds.labels[3], b[0] as usize);
    // Channel-major layout: the first green pixel follows 1024 red ones.
    assert_eq!(ds.images[[0, 1024]], a[1 + 1024] as f64 / 255.0);
    let mut out = Vec::new();
    write_cifar10_bin(&ds, &mut out).unwrap();
    assert_eq!(out, [a, b].concat());
}

#[test]
fn cifar_corruptions_report_offsets() {
    let good = cifar_fixture(2, 9);
    let cut = &good[..3073 + 100];
    assert_eq!(offset_of(parse_cifar10_bin(&[(cut, Path::new("c"))], Split::Train).unwrap_err()), 3073);
    let mut bad = good.clone();
    bad[3073] = 12;
    assert_eq!(offset_of(parse_cifar10_bin(&[(&bad, Path::new("c"))], Split::Train).unwrap_err()), 3073);
    let empty = parse_cifar10_bin(&[(&[], Path::new("c"))], Split::Train).unwrap();
    assert!(empty.is_empty());
}
