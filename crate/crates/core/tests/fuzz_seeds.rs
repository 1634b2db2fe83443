//! Replays the checked-in fuzz seed corpora through the same decoders the
//! fuzz targets drive, so regressions surface without a nightly toolchain.

use std::fs;
use std::path::PathBuf;

use fluency::codebook::{cluster_line, parse_cluster_sequences, Codebook};
use fluency::corpus::{alignment_line, manifest_line, parse_alignments, parse_manifest, FeatureMatrix, PhoneInventory};
use fluency::eval::{heatmap_csv, parse_heatmap_csv};
use fluency::nnet::checkpoint;
use fluency::pipeline::{parse_predictions, predictions_text};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Seeds named `valid*` must decode; the rest only must not panic.
fn expect_ok(name: &str, ok: bool) {
    if name.starts_with("valid") {
        assert!(ok, "seed {name} should decode");
    }
}

#[test]
fn feature_matrix_seeds() {
    for (name, data) in seeds("feature_matrix") {
        let m = FeatureMatrix::decode(&data);
        expect_ok(&name, m.is_ok());
        if let Ok(m) = m {
            let bytes = m.encode();
            assert_eq!(FeatureMatrix::decode(&bytes).unwrap().encode(), bytes);
        }
    }
}

#[test]
fn codebook_seeds() {
    for (name, data) in seeds("codebook") {
        let cb = Codebook::decode(&data);
        expect_ok(&name, cb.is_ok());
        if let Ok(cb) = cb {
            assert_eq!(Codebook::decode(&cb.encode()).unwrap().encode(), cb.encode());
        }
    }
}

#[test]
fn checkpoint_seeds() {
    for (name, data) in seeds("checkpoint") {
        let d = checkpoint::decode(&data);
        expect_ok(&name, d.is_ok());
        if let Ok((h, p)) = d {
            let (h2, p2) = checkpoint::decode(&checkpoint::encode(&h, &p)).unwrap();
            assert_eq!(h2, h);
            assert!(p2.same_layout(&p));
        }
    }
}

fn text(data: &[u8]) -> Option<&str> {
    std::str::from_utf8(data).ok()
}

#[test]
fn manifest_seeds() {
    for (name, data) in seeds("manifest") {
        let Some(t) = text(&data) else { continue };
        let r = parse_manifest(t);
        expect_ok(&name, r.is_ok());
        if let Ok(records) = r {
            let again: String = records.iter().map(|r| manifest_line(r) + "\n").collect();
            assert_eq!(parse_manifest(&again).unwrap(), records);
        }
    }
}

#[test]
fn alignment_seeds() {
    for (name, data) in seeds("alignments") {
        let Some(t) = text(&data) else { continue };
        let r = parse_alignments(t);
        expect_ok(&name, r.is_ok());
        if let Ok(items) = r {
            let again: String = items.iter().map(|(id, a)| alignment_line(id, a) + "\n").collect();
            assert_eq!(parse_alignments(&again).unwrap(), items);
        }
    }
}

#[test]
fn phone_inventory_seeds() {
    for (name, data) in seeds("phone_inventory") {
        let Some(t) = text(&data) else { continue };
        let r = PhoneInventory::parse(t);
        expect_ok(&name, r.is_ok());
        if let Ok(inv) = r {
            assert_eq!(PhoneInventory::parse(&inv.to_text()).unwrap(), inv);
        }
    }
}

#[test]
fn cluster_sequence_seeds() {
    for (name, data) in seeds("cluster_sequences") {
        let Some((&k, rest)) = data.split_first() else { continue };
        let Some(t) = text(rest) else { continue };
        let k = (k != 0).then_some(usize::from(k));
        let r = parse_cluster_sequences(t, k);
        expect_ok(&name, r.is_ok());
        if let Ok(seqs) = r {
            let again: String = seqs.iter().map(|(id, s)| cluster_line(id, s) + "\n").collect();
            assert_eq!(parse_cluster_sequences(&again, k).unwrap(), seqs);
        }
    }
}

#[test]
fn heatmap_seeds() {
    for (name, data) in seeds("heatmap_csv") {
        let Some(t) = text(&data) else { continue };
        let r = parse_heatmap_csv(t);
        expect_ok(&name, r.is_ok());
        if let Ok(m) = r {
            heatmap_csv(&m).unwrap();
        }
    }
}

#[test]
fn prediction_seeds() {
    for (name, data) in seeds("predictions") {
        let Some(t) = text(&data) else { continue };
        let r = parse_predictions(t);
        expect_ok(&name, r.is_ok());
        if let Ok(p) = r {
            assert_eq!(parse_predictions(&predictions_text(&p)).unwrap(), p);
        }
    }
}
