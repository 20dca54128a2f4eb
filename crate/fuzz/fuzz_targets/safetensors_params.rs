#![no_main]

use framers::clipio::ClipSpec;
use framers::framemae::FrameMae;
use framers::patchcube::ModelConfig;
use libfuzzer_sys::fuzz_target;

fn tiny() -> ModelConfig {
    ModelConfig {
        clip: ClipSpec {
            frames: 4,
            stride: 1,
            height: 4,
            width: 4,
            channels: 1,
        },
        spatial_patch: 2,
        embed_dim: 4,
        encoder_depth: 1,
        encoder_heads: 1,
        decoder_dim: 2,
        decoder_depth: 1,
        decoder_heads: 1,
        mlp_ratio: 1,
        ..ModelConfig::toy()
    }
}

fuzz_target!(|data: &[u8]| {
    let mut model = FrameMae::new(tiny(), 0).expect("valid config");
    let _ = framers::checkpoint::load_safetensors_into(&mut model, data);
});
