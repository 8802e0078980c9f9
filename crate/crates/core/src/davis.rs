//! DAVIS-style directory trees.
//!
//! ```text
//! <root>/JPEGImages/<video>/00000.png   RGB frames
//! <root>/Annotations/<video>/00000.png  8-bit palette, index = object id
//! <root>/ImageSets/{train,val}.txt      one video name per line
//! <root>/Meta/<video>.txt               key = value metadata
//! ```
//! Prediction trees reuse the `Annotations` layout.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{LabelVideo, SubsetMetadata};
use crate::tensor::Tensor;
use crate::types::{FrameTensor, MaskSequence, VideoRecord};

pub const FRAMES_DIR: &str = "JPEGImages";
pub const ANNOTATIONS_DIR: &str = "Annotations";
pub const SETS_DIR: &str = "ImageSets";
pub const META_DIR: &str = "Meta";

/// The 256-colour palette used by DAVIS annotations.
pub fn palette() -> Vec<u8> {
    let mut p = Vec::with_capacity(256 * 3);
    for i in 0..256u32 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= (((c >> 0) & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        p.extend_from_slice(&[r, g, b]);
    }
    p
}

pub fn frame_file(index: usize) -> String {
    format!("{index:05}.png")
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format("png", format!("{}: {e}", path.display()))
}

/// Write an indexed-palette label image.
pub fn write_label_png(path: &Path, height: usize, width: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != height * width {
        return Err(Error::Dimension(format!("{} labels for {height}×{width}", labels.len())));
    }
    create_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette());
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(labels).map_err(|e| png_err(path, e))
}

/// Write an RGB frame from `[3, h, w]` channel-major data in `[0, 1]`.
pub fn write_rgb_png(path: &Path, height: usize, width: usize, chw: &[f64]) -> Result<()> {
    create_parent(path)?;
    let hw = height * width;
    let mut bytes = Vec::with_capacity(hw * 3);
    for i in 0..hw {
        for c in 0..3 {
            bytes.push((chw[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(&bytes).map_err(|e| png_err(path, e))
}

struct Decoded {
    height: usize,
    width: usize,
    color: png::ColorType,
    data: Vec<u8>,
    palette: Option<Vec<u8>>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let palette = reader.info().palette.as_ref().map(|p| p.to_vec());
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        height: info.height as usize,
        width: info.width as usize,
        color: info.color_type,
        data: buf,
        palette,
    })
}

/// Read a label image. Indexed and grayscale images give their raw values;
/// RGB images are mapped back through the DAVIS palette.
pub fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let d = decode(path)?;
    let labels = match d.color {
        png::ColorType::Indexed | png::ColorType::Grayscale => d.data,
        png::ColorType::Rgb | png::ColorType::Rgba => {
            let stride = if d.color == png::ColorType::Rgb { 3 } else { 4 };
            let pal = d.palette.unwrap_or_else(palette);
            let lookup: BTreeMap<[u8; 3], u8> = pal
                .chunks(3)
                .enumerate()
                .rev()
                .map(|(i, c)| ([c[0], c[1], c[2]], i as u8))
                .collect();
            d.data
                .chunks(stride)
                .map(|px| {
                    lookup
                        .get(&[px[0], px[1], px[2]])
                        .copied()
                        .ok_or_else(|| png_err(path, format!("colour {:?} is not in the palette", &px[..3])))
                })
                .collect::<Result<Vec<u8>>>()?
        }
        other => return Err(png_err(path, format!("unsupported colour type {other:?}"))),
    };
    Ok((d.height, d.width, labels))
}

/// Read an RGB frame as `[3, h, w]` channel-major values in `[0, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let d = decode(path)?;
    let stride = match d.color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        other => return Err(png_err(path, format!("unsupported colour type {other:?}"))),
    };
    let hw = d.height * d.width;
    let mut out = vec![0.0; 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            let src = if stride == 1 { 0 } else { c };
            out[c * hw + i] = f64::from(d.data[i * stride + src]) / 255.0;
        }
    }
    Ok((d.height, d.width, out))
}

/// Collapse per-object masks into one label map per frame: the most probable
/// object wins, background where every object is below `threshold`.
pub fn merge_objects(masks: &[MaskSequence], threshold: f64) -> Vec<Vec<u8>> {
    let Some(first) = masks.first() else { return Vec::new() };
    let hw = first.height() * first.width();
    (0..first.len())
        .map(|t| {
            (0..hw)
                .map(|i| {
                    let mut best = (0u8, threshold);
                    for m in masks {
                        let p = m.frame(t)[i];
                        if p >= best.1 && (best.0 == 0 || p > best.1) {
                            best = (m.object_id, p);
                        }
                    }
                    best.0
                })
                .collect()
        })
        .collect()
}

pub fn write_label_video(dir: &Path, height: usize, width: usize, frames: &[Vec<u8>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in frames.iter().enumerate() {
        write_label_png(&dir.join(frame_file(t)), height, width, f)?;
    }
    Ok(())
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_label_video(dir: &Path) -> Result<LabelVideo> {
    let files = sorted_pngs(dir)?;
    if files.is_empty() {
        return Err(Error::Input(format!("{} holds no frames", dir.display())));
    }
    let mut frames = Vec::with_capacity(files.len());
    let mut size = None;
    for f in &files {
        let (h, w, l) = read_label_png(f)?;
        if *size.get_or_insert((h, w)) != (h, w) {
            return Err(Error::Dimension(format!("{}: frame size changes within a video", f.display())));
        }
        frames.push(l);
    }
    let (height, width) = size.unwrap_or((0, 0));
    Ok(LabelVideo { height, width, frames })
}

/// A DAVIS-style dataset root.
#[derive(Clone, Debug)]
pub struct DavisTree {
    pub root: PathBuf,
}

impl DavisTree {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn frames_dir(&self, video: &str) -> PathBuf {
        self.root.join(FRAMES_DIR).join(video)
    }

    pub fn annotations_dir(&self, video: &str) -> PathBuf {
        self.root.join(ANNOTATIONS_DIR).join(video)
    }

    pub fn meta_file(&self, video: &str) -> PathBuf {
        self.root.join(META_DIR).join(format!("{video}.txt"))
    }

    pub fn split_file(&self, split: &str) -> PathBuf {
        self.root.join(SETS_DIR).join(format!("{split}.txt"))
    }

    pub fn write_split(&self, split: &str, names: &[String]) -> Result<()> {
        let p = self.split_file(split);
        create_parent(&p)?;
        let mut text = names.join("\n");
        text.push('\n');
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn read_split(&self, split: &str) -> Result<Vec<String>> {
        let p = self.split_file(split);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    /// Annotated videos, from the annotation directory listing.
    pub fn videos(&self) -> Result<Vec<String>> {
        let dir = self.root.join(ANNOTATIONS_DIR);
        let mut v: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        Ok(v)
    }

    pub fn write_video(&self, video: &VideoRecord) -> Result<()> {
        let (h, w) = (video.frames.height(), video.frames.width());
        let fdir = self.frames_dir(&video.name);
        fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        let chw = 3 * h * w;
        for t in 0..video.len() {
            let data = &video.frames.tensor().data()[t * chw..(t + 1) * chw];
            write_rgb_png(&fdir.join(frame_file(t)), h, w, data)?;
        }
        let labels = merge_objects(&video.gt_masks, 0.5);
        write_label_video(&self.annotations_dir(&video.name), h, w, &labels)?;
        let meta = crate::synth::metadata_lines(video);
        let text: String = meta.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let mp = self.meta_file(&video.name);
        create_parent(&mp)?;
        fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
    }

    pub fn read_meta(&self, video: &str) -> Result<BTreeMap<String, String>> {
        let p = self.meta_file(video);
        if !p.exists() {
            return Ok(BTreeMap::new());
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut m = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("metadata", format!("{}:{}: expected key = value", p.display(), n + 1)))?;
            m.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(m)
    }

    /// Subset metadata; missing or unparsable fields stay `None`.
    pub fn subset_metadata(&self, video: &str) -> Result<SubsetMetadata> {
        let m = self.read_meta(video)?;
        let count: Option<usize> = m.get("object_count").and_then(|v| v.parse().ok());
        let areas = count.and_then(|n| {
            (1..=n)
                .map(|i| m.get(&format!("object_area.{i}")).and_then(|v| v.parse::<f64>().ok()))
                .collect::<Option<Vec<f64>>>()
        });
        Ok(SubsetMetadata {
            duration_sec: m.get("duration_sec").and_then(|v| v.parse().ok()),
            object_area_fractions: areas,
            object_count: count,
        })
    }

    pub fn read_video(&self, name: &str) -> Result<VideoRecord> {
        let files = sorted_pngs(&self.frames_dir(name))?;
        if files.is_empty() {
            return Err(Error::Input(format!("video {name} has no frames")));
        }
        let mut data = Vec::new();
        let mut size = None;
        for f in &files {
            let (h, w, px) = read_rgb_png(f)?;
            if *size.get_or_insert((h, w)) != (h, w) {
                return Err(Error::Dimension(format!("{}: frame size changes within a video", f.display())));
            }
            data.extend(px);
        }
        let (h, w) = size.unwrap_or((0, 0));
        let t = files.len();
        let frames = FrameTensor::new(Tensor::new(vec![t, 3, h, w], data))?;
        let labels = read_label_video(&self.annotations_dir(name))?;
        if labels.frames.len() != t || (labels.height, labels.width) != (h, w) {
            return Err(Error::Dimension(format!(
                "video {name}: {t} frames of {h}×{w} but {} annotations of {}×{}",
                labels.frames.len(),
                labels.height,
                labels.width
            )));
        }
        let ids: Vec<u8> = labels.frames[0].iter().copied().filter(|&l| l != 0).collect::<std::collections::BTreeSet<u8>>().into_iter().collect();
        if ids.is_empty() {
            return Err(Error::Input(format!("video {name}: the first frame has no annotated object")));
        }
        let gt = ids
            .iter()
            .map(|&id| {
                let m: Vec<f64> = labels.frames.iter().flat_map(|f| f.iter().map(move |&l| f64::from(l == id))).collect();
                MaskSequence::binary(Tensor::new(vec![t, h, w], m), id)
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = self.read_meta(name)?;
        let fps = meta.get("fps").and_then(|v| v.parse().ok()).unwrap_or(crate::synth::FPS);
        let mut v = VideoRecord::new(name, frames, gt, fps)?;
        for (k, val) in meta {
            if !matches!(k.as_str(), "fps" | "duration_sec" | "frames" | "object_count") && !k.starts_with("object_area.") {
                v.metadata.insert(k, val);
            }
        }
        Ok(v)
    }

    pub fn read_videos(&self, names: &[String]) -> Result<Vec<VideoRecord>> {
        use rayon::prelude::*;
        names.par_iter().map(|n| self.read_video(n)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_starts_like_davis() {
        let p = palette();
        assert_eq!(&p[..12], &[0, 0, 0, 128, 0, 0, 0, 128, 0, 128, 128, 0]);
        assert_eq!(p.len(), 768);
    }

    #[test]
    fn label_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/00000.png");
        let labels: Vec<u8> = (0..12).map(|i| (i % 3) as u8).collect();
        write_label_png(&path, 3, 4, &labels).unwrap();
        assert_eq!(read_label_png(&path).unwrap(), (3, 4, labels));
    }

    #[test]
    fn rgb_labels_map_through_palette() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let p = palette();
        let chw: Vec<f64> = (0..3)
            .flat_map(|c| [0usize, 1, 2, 1].map(|l| f64::from(p[l * 3 + c]) / 255.0))
            .collect();
        write_rgb_png(&path, 2, 2, &chw).unwrap();
        assert_eq!(read_label_png(&path).unwrap().2, vec![0, 1, 2, 1]);
    }

    #[test]
    fn merge_takes_most_probable_object() {
        let a = MaskSequence::new(Tensor::new(vec![1, 1, 3], vec![0.9, 0.2, 0.6]), 1).unwrap();
        let b = MaskSequence::new(Tensor::new(vec![1, 1, 3], vec![0.7, 0.3, 0.8]), 2).unwrap();
        assert_eq!(merge_objects(&[a, b], 0.5), vec![vec![1, 0, 2]]);
    }
}
