//! Clip ingestion and frame output.
//!
//! Two source layouts are read:
//!
//! * a directory of PNG frames whose file stems end in a frame number
//!   (`frame_0000.png`, `0001.png`, ...), ordered by that number;
//! * a raw 8-bit planar file with a sidecar `<file>.hdr` holding
//!   `width=`, `height=`, `frames=` and `channels=` (`rgb` or `yuv444`)
//!   lines. Frames follow each other; within a frame the three planes
//!   follow each other. `yuv444` planes are loaded as the three channels
//!   without colour conversion.

use std::fs;
use std::path::{Path, PathBuf};

use dinvmark_core::media::{crop_clip, ClipShape, CropPolicy, VideoTensor};

use crate::error::{Error, Result};

pub const HEADER_EXTENSION: &str = "hdr";

/// Channel order of a raw planar file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlaneOrder {
    Rgb,
    Yuv444,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawHeader {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub order: PlaneOrder,
}

impl RawHeader {
    pub fn render(&self) -> String {
        let order = match self.order {
            PlaneOrder::Rgb => "rgb",
            PlaneOrder::Yuv444 => "yuv444",
        };
        format!(
            "width={}\nheight={}\nframes={}\nchannels={order}\n",
            self.width, self.height, self.frames
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::BadHeader {
            path: path.to_path_buf(),
            reason,
        };
        let (mut width, mut height, mut frames, mut order) = (None, None, None, None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, found `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || v.parse::<usize>().map_err(|_| bad(format!("{k}: `{v}` is not a number")));
            match k {
                "width" => width = Some(num()?),
                "height" => height = Some(num()?),
                "frames" => frames = Some(num()?),
                "channels" => {
                    order = Some(match v {
                        "rgb" => PlaneOrder::Rgb,
                        "yuv444" => PlaneOrder::Yuv444,
                        _ => return Err(bad(format!("unsupported channel order `{v}`"))),
                    })
                }
                _ => return Err(bad(format!("unknown key `{k}`"))),
            }
        }
        let need = |v: Option<usize>, k: &str| match v {
            Some(0) => Err(bad(format!("{k} must be positive"))),
            Some(n) => Ok(n),
            None => Err(bad(format!("missing {k}"))),
        };
        Ok(Self {
            width: need(width, "width")?,
            height: need(height, "height")?,
            frames: need(frames, "frames")?,
            order: order.unwrap_or(PlaneOrder::Rgb),
        })
    }
}

pub fn header_path(raw: &Path) -> PathBuf {
    let mut name = raw.as_os_str().to_owned();
    name.push(".");
    name.push(HEADER_EXTENSION);
    PathBuf::from(name)
}

/// Numbered PNG frames of a directory, in frame order.
pub fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::read(dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::read(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let digits: String = stem
            .chars()
            .rev()
            .take_while(char::is_ascii_digit)
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        if let Ok(n) = digits.parse::<u64>() {
            frames.push((n, path));
        }
    }
    frames.sort();
    Ok(frames.into_iter().map(|(_, p)| p).collect())
}

fn load_frame_dir(dir: &Path) -> Result<VideoTensor<f32>> {
    let files = frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::TooFewFrames {
            path: dir.to_path_buf(),
            found: 0,
            needed: 1,
        });
    }
    let mut planes: Vec<Vec<u8>> = vec![Vec::new(); 3];
    let mut size = None;
    for path in &files {
        let bytes = fs::read(path).map_err(|e| Error::read(path, e))?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| Error::CorruptFrame {
                path: path.clone(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let dims = img.dimensions();
        if *size.get_or_insert(dims) != dims {
            return Err(Error::CorruptFrame {
                path: path.clone(),
                reason: format!("frame is {}x{}, earlier frames are {}x{}", dims.0, dims.1, size.unwrap().0, size.unwrap().1),
            });
        }
        for px in img.pixels() {
            for (c, plane) in planes.iter_mut().enumerate() {
                plane.push(px[c]);
            }
        }
    }
    let (w, h) = size.expect("at least one frame");
    let shape = ClipShape::new(files.len(), h as usize, w as usize);
    Ok(VideoTensor::from_pixels(shape, &planes.concat())?)
}

fn load_raw(path: &Path) -> Result<VideoTensor<f32>> {
    let hdr_path = header_path(path);
    let text = fs::read_to_string(&hdr_path).map_err(|e| Error::read(&hdr_path, e))?;
    let header = RawHeader::parse(&text, &hdr_path)?;
    let bytes = fs::read(path).map_err(|e| Error::read(path, e))?;
    let plane = header.width * header.height;
    let frame = 3 * plane;
    if bytes.len() % frame != 0 || bytes.len() / frame < header.frames {
        return Err(Error::CorruptFrame {
            path: path.to_path_buf(),
            reason: format!(
                "{} bytes do not hold {} frames of {}x{}x3",
                bytes.len(),
                header.frames,
                header.width,
                header.height
            ),
        });
    }
    let l = header.frames;
    let mut pixels = vec![0u8; l * frame];
    for t in 0..l {
        for c in 0..3 {
            let src = &bytes[t * frame + c * plane..t * frame + (c + 1) * plane];
            let dst = (c * l + t) * plane;
            pixels[dst..dst + plane].copy_from_slice(src);
        }
    }
    Ok(VideoTensor::from_pixels(
        ClipShape::new(l, header.height, header.width),
        &pixels,
    )?)
}

/// Decodes a whole source (frame directory or raw planar file).
pub fn load_source(path: &Path) -> Result<VideoTensor<f32>> {
    let meta = fs::metadata(path).map_err(|e| Error::read(path, e))?;
    if meta.is_dir() {
        load_frame_dir(path)
    } else {
        load_raw(path)
    }
}

/// Decodes `source` and cuts a `shape` window placed by `(crop, seed)`.
pub fn load_clip(source: &Path, shape: ClipShape, crop: CropPolicy, seed: u64) -> Result<VideoTensor<f32>> {
    let full = load_source(source)?;
    let have = full.shape();
    if have.frames < shape.frames {
        return Err(Error::TooFewFrames {
            path: source.to_path_buf(),
            found: have.frames,
            needed: shape.frames,
        });
    }
    if have.height < shape.height || have.width < shape.width {
        return Err(Error::CorruptFrame {
            path: source.to_path_buf(),
            reason: format!(
                "frames are {}x{}, smaller than the {}x{} crop",
                have.width, have.height, shape.width, shape.height
            ),
        });
    }
    Ok(crop_clip(&full, shape, crop, seed)?)
}

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:04}.png")
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))
}

/// Writes an 8-bit RGB image from planar `[3, H, W]` samples.
pub fn write_png(path: &Path, width: usize, height: usize, planes: &[u8]) -> Result<()> {
    let plane = width * height;
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        rgb.extend([planes[i], planes[plane + i], planes[2 * plane + i]]);
    }
    let img = image::RgbImage::from_raw(width as u32, height as u32, rgb).expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::write(path, std::io::Error::other(e)))
}

/// Writes every frame as `frame_NNNN.png`, removing numbered frames left
/// over from an earlier, longer clip.
pub fn write_frames(video: &VideoTensor<f32>, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for old in frame_files(dir)? {
        fs::remove_file(&old).map_err(|e| Error::write(&old, e))?;
    }
    let s = video.shape();
    let pixels = video.to_pixels();
    let plane = s.height * s.width;
    for t in 0..s.frames {
        let planes: Vec<u8> = (0..3)
            .flat_map(|c| {
                let start = (c * s.frames + t) * plane;
                pixels[start..start + plane].iter().copied()
            })
            .collect();
        write_png(&dir.join(frame_name(t)), s.width, s.height, &planes)?;
    }
    Ok(())
}

/// Writes a raw planar file and its header.
pub fn write_raw(video: &VideoTensor<f32>, path: &Path, order: PlaneOrder) -> Result<()> {
    let s = video.shape();
    let pixels = video.to_pixels();
    let plane = s.height * s.width;
    let mut out = Vec::with_capacity(pixels.len());
    for t in 0..s.frames {
        for c in 0..3 {
            let start = (c * s.frames + t) * plane;
            out.extend_from_slice(&pixels[start..start + plane]);
        }
    }
    fs::write(path, out).map_err(|e| Error::write(path, e))?;
    let header = RawHeader {
        width: s.width,
        height: s.height,
        frames: s.frames,
        order,
    };
    let hdr = header_path(path);
    fs::write(&hdr, header.render()).map_err(|e| Error::write(&hdr, e))
}
