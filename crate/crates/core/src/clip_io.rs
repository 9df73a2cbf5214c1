//! On-disk clip directories.
//!
//! ```text
//! clip/
//!   manifest.toml        frame count, size, frame rate, fill value, background color
//!   video/00000.png      16-bit RGB
//!   target/00000.png     optional ground truth, 16-bit RGB
//!   mask/00000.png       8-bit gray, 0 or 255
//!   densepose/00000.png  16-bit RGB
//!   garment.png          16-bit RGB
//! ```

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array3, Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::data::{
    compose_agnostic, AgnosticBundle, AgnosticMask, DensePoseClip, GarmentCategory,
    GarmentImage, VideoClip, DEFAULT_FILL, DENSEPOSE_BACKGROUND,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const GARMENT_FILE: &str = "garment.png";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifest {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub frame_rate: f64,
    pub fill_value: f64,
    pub background_color: [f64; 3],
    pub garment_category: GarmentCategory,
    /// Frame streams present in the directory.
    pub streams: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Every stream a clip directory may hold.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClipDirectory {
    pub video: Option<VideoClip>,
    pub target: Option<VideoClip>,
    pub mask: Option<AgnosticMask>,
    pub densepose: Option<DensePoseClip>,
    pub garment: Option<GarmentImage>,
    pub fill_value: f64,
    pub seed: Option<u64>,
}

impl ClipDirectory {
    pub fn from_video(video: VideoClip) -> Self {
        Self {
            video: Some(video),
            fill_value: DEFAULT_FILL,
            ..Default::default()
        }
    }

    fn first_dims(&self) -> Option<(usize, usize, usize, f64)> {
        let clip = self.video.as_ref().or(self.target.as_ref());
        if let Some(c) = clip {
            return Some((c.len(), c.height(), c.width(), c.frame_rate));
        }
        if let Some(m) = &self.mask {
            let (n, h, w) = m.dims();
            return Some((n, h, w, 8.0));
        }
        self.densepose.as_ref().map(|p| {
            let (n, h, w, _) = p.frames().dim();
            (n, h, w, 8.0)
        })
    }

    /// Agnostic video, mask and pose built from the stored streams.
    pub fn bundle(&self) -> Result<AgnosticBundle> {
        let video = self.video.as_ref().ok_or_else(|| missing("video"))?;
        let mask = self.mask.as_ref().ok_or_else(|| missing("mask"))?;
        let pose = self.densepose.as_ref().ok_or_else(|| missing("densepose"))?;
        let agnostic = compose_agnostic(video, mask, self.fill_value)?;
        AgnosticBundle::new(agnostic, mask.clone(), pose.clone())
    }
}

fn missing(stream: &str) -> Error {
    Error::InvalidData(format!("clip directory has no {stream} stream"))
}

fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn write_rgb16(path: &Path, frame: ArrayView3<f64>) -> Result<()> {
    let (h, w, _) = frame.dim();
    let img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            quantize16(frame[[y, x, 0]]),
            quantize16(frame[[y, x, 1]]),
            quantize16(frame[[y, x, 2]]),
        ])
    });
    img.save(path)?;
    Ok(())
}

fn read_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb16();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 65535.0
    }))
}

fn frame_name(i: usize) -> String {
    format!("{i:05}.png")
}

fn write_stream(dir: &Path, name: &str, frames: &Array4<f64>) -> Result<()> {
    let sub = dir.join(name);
    fs::create_dir_all(&sub)?;
    for (i, frame) in frames.outer_iter().enumerate() {
        write_rgb16(&sub.join(frame_name(i)), frame)?;
    }
    Ok(())
}

fn read_stream(dir: &Path, name: &str, n: usize, h: usize, w: usize) -> Result<Array4<f64>> {
    let mut out = Array4::zeros((n, h, w, 3));
    for i in 0..n {
        let frame = read_rgb(&dir.join(name).join(frame_name(i)))?;
        if frame.dim() != (h, w, 3) {
            return Err(Error::InvalidData(format!(
                "{name}/{} is {:?}, manifest says {h}x{w}",
                frame_name(i),
                frame.dim()
            )));
        }
        out.index_axis_mut(ndarray::Axis(0), i).assign(&frame);
    }
    Ok(out)
}

pub fn write_clip_dir(dir: &Path, clip: &ClipDirectory) -> Result<ClipManifest> {
    let (n, h, w, frame_rate) = clip
        .first_dims()
        .ok_or_else(|| Error::InvalidData("clip directory has no frame stream".into()))?;
    fs::create_dir_all(dir)?;
    let mut streams = Vec::new();
    if let Some(v) = &clip.video {
        write_stream(dir, "video", v.frames())?;
        streams.push("video".to_string());
    }
    if let Some(t) = &clip.target {
        write_stream(dir, "target", t.frames())?;
        streams.push("target".to_string());
    }
    if let Some(m) = &clip.mask {
        let sub = dir.join("mask");
        fs::create_dir_all(&sub)?;
        for (i, frame) in m.masks().outer_iter().enumerate() {
            let (fh, fw) = frame.dim();
            let img = GrayImage::from_fn(fw as u32, fh as u32, |x, y| {
                Luma([frame[[y as usize, x as usize]] * 255])
            });
            img.save(sub.join(frame_name(i)))?;
        }
        streams.push("mask".to_string());
    }
    if let Some(p) = &clip.densepose {
        write_stream(dir, "densepose", p.frames())?;
        streams.push("densepose".to_string());
    }
    if let Some(g) = &clip.garment {
        write_rgb16(&dir.join(GARMENT_FILE), g.image().view())?;
        streams.push("garment".to_string());
    }
    let manifest = ClipManifest {
        frames: n,
        height: h,
        width: w,
        frame_rate,
        fill_value: clip.fill_value,
        background_color: clip
            .densepose
            .as_ref()
            .map(|p| p.background_color)
            .unwrap_or(DENSEPOSE_BACKGROUND),
        garment_category: clip.garment.as_ref().map(|g| g.category).unwrap_or_default(),
        streams,
        seed: clip.seed,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<ClipManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    toml::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))
}

pub fn read_clip_dir(dir: &Path) -> Result<ClipDirectory> {
    let m = read_manifest(dir)?;
    let has = |s: &str| m.streams.iter().any(|x| x == s);
    let (n, h, w) = (m.frames, m.height, m.width);
    let mut out = ClipDirectory {
        fill_value: m.fill_value,
        seed: m.seed,
        ..Default::default()
    };
    if has("video") {
        out.video = Some(VideoClip::new(read_stream(dir, "video", n, h, w)?, m.frame_rate)?);
    }
    if has("target") {
        out.target = Some(VideoClip::new(read_stream(dir, "target", n, h, w)?, m.frame_rate)?);
    }
    if has("mask") {
        let mut masks = ndarray::Array3::zeros((n, h, w));
        for i in 0..n {
            let img = image::open(dir.join("mask").join(frame_name(i)))?.to_luma8();
            if img.dimensions() != (w as u32, h as u32) {
                return Err(Error::InvalidData(format!("mask/{} has the wrong size", frame_name(i))));
            }
            for (x, y, p) in img.enumerate_pixels() {
                masks[[i, y as usize, x as usize]] = u8::from(p[0] >= 128);
            }
        }
        out.mask = Some(AgnosticMask::new(masks)?);
    }
    if has("densepose") {
        out.densepose = Some(DensePoseClip::new(
            read_stream(dir, "densepose", n, h, w)?,
            m.background_color,
        )?);
    }
    if has("garment") {
        out.garment = Some(GarmentImage::new(read_rgb(&dir.join(GARMENT_FILE))?, m.garment_category)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let video = VideoClip::new(
            Array4::from_shape_fn((2, 8, 6, 3), |(f, y, x, c)| ((f + y * 3 + x * 5 + c) % 11) as f64 / 10.0),
            12.0,
        )
        .unwrap();
        let mut raw = ndarray::Array3::zeros((2, 8, 6));
        raw.slice_mut(s![.., 2..5, 1..4]).fill(1u8);
        let clip = ClipDirectory {
            video: Some(video.clone()),
            target: None,
            mask: Some(AgnosticMask::new(raw).unwrap()),
            densepose: Some(DensePoseClip::new(Array4::from_elem((2, 8, 6, 3), 0.25), DENSEPOSE_BACKGROUND).unwrap()),
            garment: Some(GarmentImage::new(Array3::from_elem((4, 4, 3), 0.75), GarmentCategory::Dress).unwrap()),
            fill_value: 0.5,
            seed: Some(3),
        };
        let manifest = write_clip_dir(dir.path(), &clip).unwrap();
        assert_eq!(manifest.streams, vec!["video", "mask", "densepose", "garment"]);
        let back = read_clip_dir(dir.path()).unwrap();
        assert_eq!(back.mask, clip.mask);
        assert_eq!(back.seed, Some(3));
        assert_eq!(back.garment.as_ref().unwrap().category, GarmentCategory::Dress);
        let v = back.video.unwrap();
        assert_eq!(v.frame_rate, 12.0);
        for (a, b) in v.frames().iter().zip(video.frames().iter()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
        assert!(back.target.is_none());
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let video = VideoClip::new(Array4::zeros((1, 4, 4, 3)), 8.0).unwrap();
        write_clip_dir(dir.path(), &ClipDirectory::from_video(video)).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, format!("mystery = 1\n{text}")).unwrap();
        assert!(matches!(read_clip_dir(dir.path()), Err(Error::Manifest(_))));
    }

    #[test]
    fn missing_directory_is_io_error() {
        assert!(matches!(read_clip_dir(Path::new("/nonexistent/clip")), Err(Error::Io(_))));
    }
}
