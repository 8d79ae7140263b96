use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Smallest config that exercises every pipeline: 8 clips of 4 frames at
/// 8x8 (4x4 base), a 4-channel model and a 5-step sampler.
pub const TINY: &str = r#"{
  "data": {"clips": 8, "frames": 4, "height": 8, "width": 8, "base_factor": 2},
  "model": {
    "t2i": {"levels": 2, "base_channels": 4, "channel_mult": [1, 2], "cond_dim": 8, "num_classes": 4,
            "in_channels": 3, "out_channels": 3, "norm_groups": 2},
    "temporal_kernel": 3, "temporal_levels": [0], "attn_blocks_coarsest": 1
  },
  "schedule": {"kind": "linear", "steps": 50},
  "t2i_training": {"steps": 6, "batch": 2, "probe_size": 2, "probe_every": 3},
  "video_training": {"steps": 6, "batch": 2, "probe_size": 2, "probe_every": 3, "ssr_segment": 2},
  "sampling": {"sampler": {"mode": "ddpm", "n_steps": 5}, "segment": 2, "stride": 1},
  "alias_lab": {"frames": 17, "motions": [
      {"kind": "sinusoid", "amplitude": 5.0, "frequency": 0.05, "phase": 0.3, "size": 6.0, "direction": 0.0},
      {"kind": "sinusoid", "amplitude": 5.0, "frequency": 0.4, "phase": 0.3, "size": 6.0, "direction": 0.0}],
    "cascades": [[1, 2], [4, 2], [4, 3]]}
}"#;

/// Every file under `dir` keyed by its relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            for (k, v) in snapshot(&p) {
                out.insert(format!("{}/{k}", p.file_name().unwrap().to_string_lossy()), v);
            }
        } else {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
        }
    }
    out
}

