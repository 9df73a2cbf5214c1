//! Cross-module flows through the public API only.

use ndarray::{Array2, Array3, Array4};
use tryon_core::agnostic_loss::{loss_agn, mask_to_partition, AttentionProbMap, TokenGrid};
use tryon_core::clip_io::{read_clip_dir, write_clip_dir, ClipDirectory};
use tryon_core::codec::LatentCodec;
use tryon_core::data::{compose_agnostic, AgnosticMask, VideoClip};
use tryon_core::keyframes::{plan_segments, select_keyframes, KeyframeMode};
use tryon_core::metrics::{clip_ssim, flicker_score};

/// Horizontal ramp with a box in rows 6..18, columns 0..8 of every frame.
fn scene(frames: usize) -> (VideoClip, AgnosticMask) {
    let (h, w) = (24, 16);
    let video = Array4::from_shape_fn((frames, h, w, 3), |(f, _, x, c)| {
        0.1 + 0.05 * x as f64 + 0.02 * f as f64 + 0.05 * c as f64
    });
    let mask = Array3::from_shape_fn((frames, h, w), |(_, y, x)| u8::from((6..18).contains(&y) && x < 8));
    (VideoClip::new(video, 8.0).unwrap(), AgnosticMask::new(mask).unwrap())
}

#[test]
fn agnostic_clip_survives_a_directory_round_trip() {
    let (video, mask) = scene(3);
    let agnostic = compose_agnostic(&video, &mask, 0.5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let clip = ClipDirectory {
        mask: Some(mask.clone()),
        target: Some(video.clone()),
        ..ClipDirectory::from_video(agnostic.clip.clone())
    };
    let manifest = write_clip_dir(dir.path(), &clip).unwrap();
    assert_eq!((manifest.frames, manifest.height, manifest.width), (3, 24, 16));
    let back = read_clip_dir(dir.path()).unwrap();
    assert_eq!(back.mask.as_ref(), Some(&mask));
    // 16-bit frames: at most half a quantisation step off
    let err = (back.video.unwrap().frames() - agnostic.clip.frames()).fold(0.0f64, |a, &b| a.max(b.abs()));
    assert!(err <= 0.5 / 65535.0 + 1e-12, "{err}");
    assert!(clip_ssim(back.target.as_ref().unwrap(), &video).unwrap() > 0.999_999);
}

#[test]
fn loss_prefers_attention_on_the_masked_tokens() {
    let (_, mask) = scene(2);
    let part = mask_to_partition(&mask, TokenGrid::new(4, 2), 0.5).unwrap();
    let flags = part.flags(0).to_vec();
    assert!(flags.iter().any(|&f| f) && flags.iter().any(|&f| !f));
    let map = |inside: f64, outside: f64| {
        let row: Vec<f64> = flags.iter().map(|&f| if f { inside } else { outside }).collect();
        let n = row.len();
        AttentionProbMap::new(Array2::from_shape_fn((2, n), |(_, a)| row[a])).unwrap()
    };
    let focused = loss_agn(&map(0.9, 0.05), &part, 0.01).unwrap();
    let spread = loss_agn(&map(0.05, 0.9), &part, 0.01).unwrap();
    assert!(focused < spread, "{focused} vs {spread}");
}

#[test]
fn codec_round_trip_keeps_smooth_clips() {
    let (video, _) = scene(2);
    let codec = LatentCodec::default();
    let decoded = codec.decode(&codec.encode(&video).unwrap(), video.frame_rate).unwrap();
    assert_eq!(decoded.frames().dim(), video.frames().dim());
    assert!(clip_ssim(&decoded, &video).unwrap() > 0.9);
    assert!(flicker_score(&decoded, &video).unwrap().is_finite());
}

#[test]
fn static_pose_needs_only_windowed_keyframes() {
    let pose = tryon_core::data::DensePoseClip::new(Array4::from_elem((20, 8, 8, 3), 0.3), [0.0; 3]).unwrap();
    let plan = select_keyframes(&pose, 0.05, 6, KeyframeMode::Greedy).unwrap();
    assert_eq!(plan.keyframes, vec![0, 6, 12, 18, 19]);
    let segments = plan_segments(20, 8, 2).unwrap();
    assert!(segments.segments.iter().all(|r| r.len() == 8));
    assert!((0..20).all(|f| segments.segments.iter().any(|r| r.contains(&f))));
    assert_eq!(segments.segments.last().unwrap().end, 20);
}
