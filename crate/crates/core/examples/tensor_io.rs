//! Tensor and checkpoint files: write, read back, compare bytes.

use sge::io::{read_tensor, write_tensor, Checkpoint, TensorFile};
use sge::nn::{build_model, LayerSpec};
use sge::{FeatureMap, Shape};

fn main() -> sge::Result<()> {
    let dir = std::env::temp_dir().join("sge-tensor-io");
    std::fs::create_dir_all(&dir)?;

    let fm = FeatureMap::from_fn(Shape::new(1, 2, 3, 3)?, |_, c, h, w| (c * 9 + h * 3 + w) as f32 * 0.25);
    let path = dir.join("map.sget");
    write_tensor(&path, &fm)?;
    let back = read_tensor(&path)?;
    println!("tensor: {} bytes, identical {}", std::fs::metadata(&path)?.len(), back == fm);

    let truncated = &std::fs::read(&path)?[..40];
    println!("truncated read: {}", TensorFile::decode(truncated).unwrap_err());

    let specs = vec![
        LayerSpec::conv(1, 4, 3),
        LayerSpec::Relu,
        LayerSpec::sge(2),
        LayerSpec::GlobalAvgPool,
        LayerSpec::dense(4, 3),
        LayerSpec::SoftmaxXent,
    ];
    let model = build_model::<f32>(&specs, (1, 8, 8), 11)?;
    let ckpt = Checkpoint::from_model(&model, [("seed".to_string(), "11".to_string())].into());
    let bytes = ckpt.encode()?;
    let again = Checkpoint::decode(&bytes)?.encode()?;
    println!("checkpoint: {} bytes, re-encoded identically {}", bytes.len(), bytes == again);
    let x = FeatureMap::from_fn(Shape::new(1, 1, 8, 8)?, |_, _, h, w| (h as f32 - w as f32) / 8.0);
    let same = model.forward(&x)? == Checkpoint::decode(&bytes)?.to_model()?.forward(&x)?;
    println!("reloaded model gives identical logits {same}");
    Ok(())
}
