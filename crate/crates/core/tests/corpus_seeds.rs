// Every checked-in fuzz seed must stay a valid input, or the fuzzers start
// from nothing.

use std::fs;
use std::path::PathBuf;

use framers::clipio::{decode_raw_frames, parse_planted_labels, parse_video_manifest, VideoManifest, RAW_FORMAT};
use framers::codec::CompressedClip;
use framers::framemae::FrameMae;
use framers::patchcube::ModelConfig;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| fs::read(e.unwrap().path()).unwrap())
        .collect();
    assert!(!out.is_empty(), "no seeds for {target}");
    out.sort();
    out
}

#[test]
fn containers() {
    for s in seeds("decode_container") {
        let cc = CompressedClip::from_bytes(&s).unwrap();
        assert_eq!(cc.to_bytes().unwrap(), s);
    }
}

#[test]
fn manifests_and_frames() {
    for s in seeds("video_manifest") {
        parse_video_manifest(&s).unwrap();
    }
    for s in seeds("raw_frames") {
        let (dims, blob) = s.split_first_chunk::<4>().unwrap();
        let m = VideoManifest {
            format: RAW_FORMAT.into(),
            fps: 30.0,
            frames: dims[0] as usize % 8,
            height: dims[1] as usize % 16,
            width: dims[2] as usize % 16,
            channels: dims[3] as usize % 5,
        };
        decode_raw_frames("seed", &m, blob).unwrap();
    }
}

#[test]
fn labels() {
    for s in seeds("label_file") {
        let recs = framers::labelgen::parse_label_file(&s).unwrap();
        assert!(!recs.is_empty());
        recs.iter().for_each(|r| r.validate().unwrap());
    }
    for s in seeds("planted_labels") {
        parse_planted_labels(&s).unwrap();
    }
}

#[test]
fn checkpoints() {
    for s in seeds("checkpoint_manifest") {
        framers::checkpoint::parse_manifest(&s).unwrap();
    }
    let cfg = ModelConfig {
        clip: framers::clipio::ClipSpec { frames: 4, stride: 1, height: 4, width: 4, channels: 1 },
        spatial_patch: 2,
        embed_dim: 4,
        encoder_depth: 1,
        encoder_heads: 1,
        decoder_dim: 2,
        decoder_depth: 1,
        decoder_heads: 1,
        mlp_ratio: 1,
        ..ModelConfig::toy()
    };
    for s in seeds("safetensors_params") {
        let mut m = FrameMae::new(cfg.clone(), 9).unwrap();
        framers::checkpoint::load_safetensors_into(&mut m, &s).unwrap();
        assert_eq!(m.fingerprint(), FrameMae::new(cfg.clone(), 0).unwrap().fingerprint());
    }
}
