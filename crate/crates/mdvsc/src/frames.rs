//! Clip directories of PNG frames and manifests listing them.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use mdvsc_core::types::FRAME_CHANNELS;
use mdvsc_core::{Tensor, VideoGop};

use crate::error::{Error, Result};

/// Frames of one clip as planar `[3, H, W]` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub path: PathBuf,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<f32>>,
}

impl Clip {
    pub fn frame_len(&self) -> usize {
        FRAME_CHANNELS * self.height * self.width
    }

    /// Frames `start..start + count` stacked as a GOP tensor.
    pub fn gop_tensor(&self, start: usize, count: usize) -> Tensor<f32> {
        let data = self.frames[start..start + count].concat();
        Tensor::from_vec([count, FRAME_CHANNELS, self.height, self.width], data).expect("uniform frames")
    }

    /// Consecutive GOPs covering every frame; a short tail GOP repeats the
    /// last frame. Returns each GOP with its count of real frames.
    pub fn gops(&self, gop_size: usize) -> Result<Vec<(VideoGop, usize)>> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.frames.len() {
            let real = gop_size.min(self.frames.len() - start);
            let mut data = self.frames[start..start + real].concat();
            for _ in real..gop_size {
                data.extend_from_slice(self.frames.last().expect("non-empty clip"));
            }
            let t = Tensor::from_vec([gop_size, FRAME_CHANNELS, self.height, self.width], data)?;
            out.push((VideoGop::from_tensor(t)?, real));
            start += gop_size;
        }
        Ok(out)
    }
}

fn is_png(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// PNG files of a clip directory in lexicographic (temporal) order.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> =
        fs::read_dir(dir).map_err(Error::io(dir))?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file() && is_png(p)).collect();
    paths.sort();
    Ok(paths)
}

pub fn read_frame(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planar = vec![0.0f32; FRAME_CHANNELS * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..FRAME_CHANNELS {
            planar[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Ok((planar, h, w))
}

pub fn write_frame(path: &Path, planar: &[f32], height: usize, width: usize) -> Result<()> {
    let plane = height * width;
    let img: RgbImage = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        let q = |c: usize| (planar[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    });
    img.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

pub fn load_clip(dir: &Path) -> Result<Clip> {
    let paths = frame_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::Data { path: dir.into(), message: "no PNG frames".into() });
    }
    let mut frames = Vec::with_capacity(paths.len());
    let (mut height, mut width) = (0, 0);
    for (i, p) in paths.iter().enumerate() {
        let (f, h, w) = read_frame(p)?;
        if i == 0 {
            (height, width) = (h, w);
        } else if (h, w) != (height, width) {
            return Err(Error::Data { path: p.clone(), message: format!("frame is {h}x{w}, earlier frames are {height}x{width}") });
        }
        frames.push(f);
    }
    let id = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(Clip { id, path: dir.into(), height, width, frames })
}

/// Writes `frames` as `frame_0000.png`, `frame_0001.png`, ... into `dir`.
pub fn write_clip(dir: &Path, frames: &[Vec<f32>], height: usize, width: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let path = dir.join(format!("frame_{i:04}.png"));
            write_frame(&path, f, height, width).map(|_| path)
        })
        .collect()
}

/// Clip directories listed in a manifest, one per line. Blank lines and
/// `#` comments are ignored; relative paths resolve against the manifest's
/// directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let dirs: Vec<PathBuf> = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(|l| base.join(l)).collect();
    if dirs.is_empty() {
        return Err(Error::Data { path: path.into(), message: "manifest lists no clips".into() });
    }
    Ok(dirs)
}

pub fn write_manifest(path: &Path, dirs: &[PathBuf]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut text = String::new();
    for d in dirs {
        text.push_str(&d.strip_prefix(base).unwrap_or(d).display().to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(Error::io(path))
}

/// Loads every clip of a manifest; clips shorter than `min_frames` are
/// skipped with a warning.
pub fn load_manifest(path: &Path, min_frames: usize) -> Result<Vec<Clip>> {
    let mut clips = Vec::new();
    for dir in read_manifest(path)? {
        let clip = load_clip(&dir)?;
        if clip.frames.len() < min_frames {
            log::warn!("skipping {}: {} frames, need {min_frames}", dir.display(), clip.frames.len());
            continue;
        }
        clips.push(clip);
    }
    if clips.is_empty() {
        return Err(Error::Data { path: path.into(), message: format!("no clip has {min_frames} frames") });
    }
    Ok(clips)
}
