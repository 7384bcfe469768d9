mod common;

use sardiff::checkpoint::Checkpoint;
use sardiff::rng::{normal_tensor, stream};
use sardiff::unet::{group_count, UNet, UNetConfig};
use sardiff::{Error, Tensor};

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

fn dense(fin: usize, fout: usize) -> usize {
    fout * fin + fout
}

fn norm(c: usize) -> usize {
    2 * c
}

fn res(cin: usize, cout: usize, temb: usize) -> usize {
    let skip = if cin != cout { conv(cin, cout, 1) } else { 0 };
    norm(cin) + conv(cin, cout, 3) + dense(temb, cout) + norm(cout) + conv(cout, cout, 3) + skip
}

fn attn(c: usize) -> usize {
    norm(c) + 4 * conv(c, c, 1)
}

/// Parameter count written out level by level from the architecture description.
fn closed_form_count(cfg: &UNetConfig) -> usize {
    let temb = cfg.time_embed_dim;
    let base = cfg.base_channels;
    let chans: Vec<usize> = cfg.channel_multipliers.iter().map(|m| m * base).collect();
    let levels = chans.len();
    let per = cfg.res_blocks_total_per_side / levels;
    let extra = cfg.res_blocks_total_per_side % levels;
    let blocks: Vec<usize> = (0..levels).map(|l| per + usize::from(l < extra)).collect();
    let attn_level = (0..levels).find(|&l| cfg.image_size >> l == cfg.attention_resolution);

    let mut total = dense(base, temb) + dense(temb, temb) + cfg.num_classes.map_or(0, |k| k * temb);
    total += conv(cfg.in_channels, base, 3);
    let mut ch = base;
    let mut skips = Vec::new();
    for l in 0..levels {
        for _ in 0..blocks[l] {
            total += res(ch, chans[l], temb);
            ch = chans[l];
            if attn_level == Some(l) {
                total += attn(ch);
            }
            skips.push(ch);
        }
        if l + 1 < levels {
            total += conv(ch, ch, 3);
        }
    }
    total += 2 * res(ch, ch, temb) + attn(ch);
    for l in (0..levels).rev() {
        for _ in 0..blocks[l] {
            total += res(ch + skips.pop().unwrap(), chans[l], temb);
            ch = chans[l];
            if attn_level == Some(l) {
                total += attn(ch);
            }
        }
        if l > 0 {
            total += conv(ch, ch, 3);
        }
    }
    total + norm(ch) + conv(ch, cfg.in_channels, 3)
}

#[test]
fn parameter_count_matches_closed_form() {
    let default = UNetConfig::default();
    let m = UNet::<f32>::build(&default, 0).unwrap();
    assert_eq!(m.parameter_count(), closed_form_count(&default));
    assert_eq!(m.parameter_count(), 48_996_225);
    for cfg in [
        UNetConfig { num_classes: Some(10), ..UNetConfig::small(32, 16, &[1, 2, 2], 8) },
        UNetConfig { res_blocks_total_per_side: 5, ..UNetConfig::small(16, 8, &[1, 2], 16) },
    ] {
        assert_eq!(UNet::<f32>::build(&cfg, 0).unwrap().parameter_count(), closed_form_count(&cfg));
    }
}

#[test]
fn group_counts() {
    assert_eq!(group_count(64), 32);
    assert_eq!(group_count(8), 8);
    assert_eq!(group_count(48), 24);
    assert_eq!(group_count(1), 1);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let check = common::unet_gradient_check(24, 9);
    for (name, idx, a, n, rel) in &check.entries {
        assert!(*rel <= 1e-3, "{name}[{idx}]: analytic {a:e} numeric {n:e} rel {rel:e}");
    }
}

fn tiny(num_classes: Option<usize>) -> UNetConfig {
    UNetConfig { num_classes, dropout: 0.0, ..UNetConfig::small(16, 8, &[1, 2], 8) }
}

#[test]
fn class_conditioning_changes_output() {
    let m = UNet::<f32>::build(&tiny(Some(4)), 2).unwrap();
    let x: Tensor<f32> = normal_tensor(&[2, 1, 16, 16], &mut stream(3, 0));
    let a = m.predict_noise(&x, &[100, 100], Some(&[0, 0]), None).unwrap();
    let b = m.predict_noise(&x, &[100, 100], Some(&[3, 3]), None).unwrap();
    let diff = a.zip_map(&b, |p, q| p - q).unwrap().max_abs();
    assert!(diff > 1e-4, "{diff}");
    // Same class ids, same input: identical rows.
    assert_eq!(a.item(0), m.predict_noise(&x.select(&[0]), &[100], Some(&[0]), None).unwrap().item(0));
}

#[test]
fn seed_determines_parameters() {
    let cfg = tiny(Some(2));
    let a = UNet::<f32>::build(&cfg, 5).unwrap();
    assert_eq!(a.checksum(), UNet::<f32>::build(&cfg, 5).unwrap().checksum());
    assert_ne!(a.checksum(), UNet::<f32>::build(&cfg, 6).unwrap().checksum());
}

#[test]
fn checkpoint_roundtrip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = UNet::<f32>::build(&tiny(Some(3)), 7).unwrap();
    m.save_with_extra(&path, serde_json::json!({"note": 1})).unwrap();
    let (back, extra) = UNet::<f32>::load_with_extra(&path).unwrap();
    assert_eq!(back.checksum(), m.checksum());
    assert_eq!(extra["note"], 1);
    let x: Tensor<f32> = normal_tensor(&[1, 1, 16, 16], &mut stream(1, 0));
    assert_eq!(
        m.predict_noise(&x, &[9], Some(&[1]), None).unwrap(),
        back.predict_noise(&x, &[9], Some(&[1]), None).unwrap()
    );

    assert!(matches!(UNet::<f32>::load_expecting(&path, &tiny(Some(4))), Err(Error::ConfigConflict(_))));

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(UNet::<f32>::load(&cut), Err(Error::Format { .. })));

    // A manifest whose shapes disagree with the stored architecture.
    let mut ck = Checkpoint::load(&path).unwrap();
    ck.meta["config"]["base_channels"] = serde_json::json!(16);
    let wrong = dir.path().join("wrong.ckpt");
    ck.save(&wrong).unwrap();
    assert!(matches!(UNet::<f32>::load(&wrong), Err(Error::Format { .. })));
}
