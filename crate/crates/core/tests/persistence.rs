mod common;

use serde_json::{json, Value};
use unvp::data::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, make_blob_domains, save_checkpoint, BlobShift,
    CHECKPOINT_VERSION,
};
use unvp::generalizer::{train, Control, Mode, TrainState};
use unvp::Error;

use common::oracles::resume_pair;
use common::tiny_config;

fn trained(mode: Mode, epochs_to_run: usize) -> TrainState {
    let (src, un) = make_blob_domains(3, 40, BlobShift::rotate_scale(30.0, 1.3), 1).unwrap();
    let mut st = TrainState::new(tiny_config(mode, 1), &src).unwrap();
    let mut left = epochs_to_run;
    train(&mut st, &src, Some(&un), &mut |_, _| {
        left -= 1;
        Ok(if left == 0 { Control::Stop } else { Control::Continue })
    })
    .unwrap();
    st
}

#[test]
fn save_load_save_is_byte_identical() {
    for mode in [Mode::Pure, Mode::Unvp, Mode::Eunvp] {
        let st = trained(mode, 5);
        let prov = json!({ "note": "roundtrip", "mode": mode });
        let bytes = checkpoint_bytes(&st, &prov).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back.state, st, "{mode}");
        assert_eq!(back.provenance, prov);
        assert_eq!(checkpoint_bytes(&back.state, &back.provenance).unwrap(), bytes);
    }
}

#[test]
fn files_roundtrip_and_missing_files_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let st = trained(Mode::Eunvp, 5);
    save_checkpoint(&st, &Value::Null, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().state, st);
    let missing = dir.path().join("nope.bin");
    assert!(matches!(load_checkpoint(&missing), Err(Error::NotFound(p)) if p == missing));
}

#[test]
fn truncation_and_corruption_fail_the_checksum() {
    let bytes = checkpoint_bytes(&trained(Mode::Unvp, 2), &Value::Null).unwrap();
    for cut in [1, 9, bytes.len() / 2] {
        let r = checkpoint_from_bytes(&bytes[..bytes.len() - cut]);
        assert!(matches!(r, Err(Error::Checksum(_))), "cut {cut}: {r:?}");
    }
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 3] ^= 0x10;
    assert!(matches!(checkpoint_from_bytes(&flipped), Err(Error::Checksum(_))));
}

#[test]
fn version_mismatch_names_both_versions() {
    let mut bytes = checkpoint_bytes(&trained(Mode::Pure, 1), &Value::Null).unwrap();
    bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
    let n = bytes.len();
    let crc = crc32fast::hash(&bytes[..n - 4]);
    bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
    match checkpoint_from_bytes(&bytes) {
        Err(e @ Error::Version { found: 7, expected }) => {
            assert_eq!(expected, CHECKPOINT_VERSION);
            let msg = e.to_string();
            assert!(msg.contains('7') && msg.contains(&CHECKPOINT_VERSION.to_string()), "{msg}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    // 6 epochs with K = 2 run rounds before epochs 2 and 4, so the resumed
    // half includes a maximization round.
    for mode in [Mode::Pure, Mode::Eunvp] {
        let (a, b) = resume_pair(mode, 3, 6);
        assert!(a == b, "{mode}: resumed run diverged");
    }
}
