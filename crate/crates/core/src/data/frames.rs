//! Decoded video frames and the on-disk frame cache.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::{imageops, AnimationDecoder, ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// `N` frames of identical `H × W × 3` shape with values in `[0, 1]`,
/// stored row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    height: usize,
    width: usize,
    frames: Vec<Vec<f32>>,
    source_id: String,
    /// Index of each frame in the decoded source.
    original_indices: Vec<usize>,
}

impl FrameSequence {
    /// Builds a sequence, clamping every value to `[0, 1]`.
    pub fn new(
        source_id: impl Into<String>,
        height: usize,
        width: usize,
        mut frames: Vec<Vec<f32>>,
    ) -> Result<Self> {
        let expected = height * width * 3;
        if height == 0 || width == 0 {
            return Err(Error::InputContract("frames must have positive size".into()));
        }
        for (i, f) in frames.iter_mut().enumerate() {
            if f.len() != expected {
                return Err(Error::InputContract(format!(
                    "frame {i} has {} values, expected {expected} ({height}x{width}x3)",
                    f.len()
                )));
            }
            for v in f.iter_mut() {
                *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            }
        }
        let original_indices = (0..frames.len()).collect();
        Ok(Self {
            height,
            width,
            frames,
            source_id: source_id.into(),
            original_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn original_indices(&self) -> &[usize] {
        &self.original_indices
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i]
    }

    pub fn frames(&self) -> &[Vec<f32>] {
        &self.frames
    }

    /// Sub-sequence at `indices` (repeats allowed), keeping original indices.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut frames = Vec::with_capacity(indices.len());
        let mut original = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InputContract(format!(
                    "frame index {i} out of range for {} frames",
                    self.len()
                )));
            }
            frames.push(self.frames[i].clone());
            original.push(self.original_indices[i]);
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            frames,
            source_id: self.source_id.clone(),
            original_indices: original,
        })
    }

    pub fn resized(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let frames = self
            .frames
            .iter()
            .map(|f| resize_frame(f, self.height, self.width, height, width))
            .collect();
        Self {
            height,
            width,
            frames,
            source_id: self.source_id.clone(),
            original_indices: self.original_indices.clone(),
        }
    }

    /// Downscales so the longest side is at most `max_side`, preserving aspect.
    pub fn with_max_side(&self, max_side: usize) -> Self {
        let longest = self.height.max(self.width);
        if longest <= max_side {
            return self.clone();
        }
        let scale = max_side as f64 / longest as f64;
        let h = ((self.height as f64 * scale).round() as usize).max(1);
        let w = ((self.width as f64 * scale).round() as usize).max(1);
        self.resized(h, w)
    }
}

fn resize_frame(data: &[f32], h: usize, w: usize, new_h: usize, new_w: usize) -> Vec<f32> {
    let img: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, data.to_vec()).expect("frame buffer size");
    imageops::resize(&img, new_w as u32, new_h as u32, imageops::FilterType::Triangle).into_raw()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecodeConfig {
    /// Keep every `stride`-th decoded frame.
    pub stride: usize,
    pub max_frames: Option<usize>,
    /// Resize every frame to `(height, width)` after decoding.
    pub resize: Option<(usize, usize)>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            max_frames: None,
            resize: None,
        }
    }
}

/// Decodes a directory of numbered images, an animated GIF, or a Y4M stream.
pub fn decode_frames(path: &Path, config: &DecodeConfig) -> Result<FrameSequence> {
    if config.stride == 0 {
        return Err(Error::Config("decode stride must be at least 1".into()));
    }
    let (h, w, frames) = if path.is_dir() {
        decode_image_dir(path)?
    } else {
        let ext = extension(path);
        match ext.as_str() {
            "gif" => decode_gif(path)?,
            "y4m" => decode_y4m(path)?,
            e if IMAGE_EXTENSIONS.contains(&e) => {
                let (h, w, f) = decode_image(path)?;
                (h, w, vec![f])
            }
            _ if !path.exists() => return Err(Error::ingestion(path, "no such file or directory")),
            _ => {
                return Err(Error::ingestion(
                    path,
                    "unsupported container; use a frame directory, .gif or .y4m",
                ))
            }
        }
    };

    let mut kept: Vec<(usize, Vec<f32>)> = frames
        .into_iter()
        .enumerate()
        .step_by(config.stride)
        .collect();
    if let Some(max) = config.max_frames {
        kept.truncate(max);
    }
    if kept.is_empty() {
        return Err(Error::ingestion(path, "no frames decoded"));
    }
    let original: Vec<usize> = kept.iter().map(|(i, _)| *i).collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut seq = FrameSequence::new(id, h, w, kept.into_iter().map(|(_, f)| f).collect())?;
    seq.original_indices = original;
    if let Some((rh, rw)) = config.resize {
        seq = seq.resized(rh, rw);
    }
    Ok(seq)
}

fn extension(path: &Path) -> String {
    path.extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default()
}

/// Image files in `dir`, ordered by the numeric run in their file name and
/// then by name, so `frame_2.png` precedes `frame_10.png`.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::ingestion(dir, e))? {
        let p = entry.map_err(|e| Error::ingestion(dir, e))?.path();
        if p.is_file() && IMAGE_EXTENSIONS.contains(&extension(&p).as_str()) {
            files.push(p);
        }
    }
    files.sort_by_key(|p| {
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let digits: String = name
            .chars()
            .skip_while(|c| !c.is_ascii_digit())
            .take_while(|c| c.is_ascii_digit())
            .collect();
        (digits.parse::<u64>().unwrap_or(u64::MAX), name)
    });
    Ok(files)
}

type Decoded = (usize, usize, Vec<Vec<f32>>);

fn decode_image(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path).map_err(|e| Error::ingestion(path, e))?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    Ok((h as usize, w as usize, rgb.into_raw()))
}

fn decode_image_dir(dir: &Path) -> Result<Decoded> {
    let files = list_frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::ingestion(dir, "directory contains no image frames"));
    }
    let mut frames = Vec::with_capacity(files.len());
    let mut shape = None;
    for f in &files {
        let (h, w, data) = decode_image(f)?;
        match shape {
            None => shape = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(Error::ingestion(
                    f,
                    format!("frame is {h}x{w}, earlier frames are {}x{}", s.0, s.1),
                ))
            }
            _ => {}
        }
        frames.push(data);
    }
    let (h, w) = shape.expect("at least one frame");
    Ok((h, w, frames))
}

fn decode_gif(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::ingestion(path, e))?;
    let decoder = image::codecs::gif::GifDecoder::new(BufReader::new(file))
        .map_err(|e| Error::ingestion(path, e))?;
    let frames = decoder
        .into_frames()
        .collect_frames()
        .map_err(|e| Error::ingestion(path, e))?;
    let mut out = Vec::with_capacity(frames.len());
    let mut shape = (0, 0);
    for f in frames {
        let rgba = f.into_buffer();
        let (w, h) = rgba.dimensions();
        shape = (h as usize, w as usize);
        out.push(
            rgba.pixels()
                .flat_map(|p| [p[0], p[1], p[2]])
                .map(|v| v as f32 / 255.0)
                .collect(),
        );
    }
    Ok((shape.0, shape.1, out))
}

fn decode_y4m(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::ingestion(path, e))?;
    let mut decoder =
        y4m::decode(BufReader::new(file)).map_err(|e| Error::ingestion(path, format!("{e:?}")))?;
    let (w, h) = (decoder.get_width(), decoder.get_height());
    if decoder.get_bit_depth() != 8 {
        return Err(Error::ingestion(path, "only 8-bit y4m streams are supported"));
    }
    let (sub_x, sub_y) = match decoder.get_colorspace() {
        y4m::Colorspace::C420
        | y4m::Colorspace::C420jpeg
        | y4m::Colorspace::C420paldv
        | y4m::Colorspace::C420mpeg2 => (2, 2),
        y4m::Colorspace::C422 => (2, 1),
        y4m::Colorspace::C444 => (1, 1),
        y4m::Colorspace::Cmono => (0, 0),
        other => {
            return Err(Error::ingestion(
                path,
                format!("unsupported y4m colorspace {other:?}"),
            ))
        }
    };
    let mut frames = Vec::new();
    loop {
        match decoder.read_frame() {
            Ok(frame) => frames.push(yuv_to_rgb(
                frame.get_y_plane(),
                frame.get_u_plane(),
                frame.get_v_plane(),
                w,
                h,
                sub_x,
                sub_y,
            )),
            Err(y4m::Error::EOF) => break,
            Err(e) => return Err(Error::ingestion(path, format!("{e:?}"))),
        }
    }
    Ok((h, w, frames))
}

/// BT.601 limited-range YUV to RGB.
fn yuv_to_rgb(
    y: &[u8],
    u: &[u8],
    v: &[u8],
    w: usize,
    h: usize,
    sub_x: usize,
    sub_y: usize,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(w * h * 3);
    let cw = if sub_x == 0 { 0 } else { w.div_ceil(sub_x) };
    for row in 0..h {
        for col in 0..w {
            let yy = (y[row * w + col] as f32 - 16.0) * 1.164;
            let (cb, cr) = if sub_x == 0 {
                (0.0, 0.0)
            } else {
                let ci = (row / sub_y) * cw + col / sub_x;
                (u[ci] as f32 - 128.0, v[ci] as f32 - 128.0)
            };
            let r = yy + 1.596 * cr;
            let g = yy - 0.392 * cb - 0.813 * cr;
            let b = yy + 2.017 * cb;
            out.extend([r, g, b].map(|c| (c / 255.0).clamp(0.0, 1.0)));
        }
    }
    out
}

/// Content-addressed cache of decoded, resized frames.
///
/// Entries are keyed by (content hash, resolution). With a directory set,
/// entries persist across runs; writes go to a temporary file that is then
/// renamed into place.
#[derive(Debug, Default)]
pub struct FrameCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, Arc<FrameSequence>>>,
}

const CACHE_MAGIC: &[u8; 4] = b"VQFC";

impl FrameCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            memory: Mutex::default(),
        })
    }

    pub fn load(&self, path: &Path, config: &DecodeConfig) -> Result<Arc<FrameSequence>> {
        let key = format!(
            "{}_{}",
            content_hash(path)?,
            hex::encode(Sha256::digest(serde_json::to_vec(config)?))
                .get(..16)
                .unwrap_or_default()
        );
        if let Some(hit) = self.memory.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(hit));
        }
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let seq = match self.dir.as_ref().map(|d| d.join(format!("{key}.frames"))) {
            Some(file) if file.exists() => read_cached(&file, &id)?,
            Some(file) => {
                let seq = decode_frames(path, config)?;
                write_cached(&file, &seq)?;
                seq
            }
            None => decode_frames(path, config)?,
        };
        let seq = Arc::new(seq);
        self.memory
            .lock()
            .expect("cache lock")
            .insert(key, Arc::clone(&seq));
        Ok(seq)
    }
}

/// SHA-256 over a file's bytes, or over each frame file's name and bytes for
/// a directory.
pub fn content_hash(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        for f in list_frame_files(path)? {
            hasher.update(f.file_name().unwrap_or_default().as_encoded_bytes());
            hasher.update(fs::read(&f).map_err(|e| Error::ingestion(&f, e))?);
        }
    } else {
        hasher.update(fs::read(path).map_err(|e| Error::ingestion(path, e))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn write_cached(file: &Path, seq: &FrameSequence) -> Result<()> {
    let dir = file.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let w = tmp.as_file_mut();
        w.write_all(CACHE_MAGIC)?;
        w.write_u64::<LittleEndian>(seq.height as u64)?;
        w.write_u64::<LittleEndian>(seq.width as u64)?;
        w.write_u64::<LittleEndian>(seq.len() as u64)?;
        for (frame, idx) in seq.frames.iter().zip(&seq.original_indices) {
            w.write_u64::<LittleEndian>(*idx as u64)?;
            for v in frame {
                w.write_f32::<LittleEndian>(*v)?;
            }
        }
        w.flush()?;
    }
    tmp.persist(file).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn read_cached(file: &Path, id: &str) -> Result<FrameSequence> {
    let mut r = BufReader::new(File::open(file)?);
    let corrupt = |e: std::io::Error| Error::ingestion(file, format!("corrupt cache entry: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(corrupt)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::ingestion(file, "not a frame cache entry"));
    }
    let h = r.read_u64::<LittleEndian>().map_err(corrupt)? as usize;
    let w = r.read_u64::<LittleEndian>().map_err(corrupt)? as usize;
    let n = r.read_u64::<LittleEndian>().map_err(corrupt)? as usize;
    let mut frames = Vec::with_capacity(n);
    let mut original = Vec::with_capacity(n);
    for _ in 0..n {
        original.push(r.read_u64::<LittleEndian>().map_err(corrupt)? as usize);
        let mut frame = vec![0f32; h * w * 3];
        r.read_f32_into::<LittleEndian>(&mut frame).map_err(corrupt)?;
        frames.push(frame);
    }
    let mut seq = FrameSequence::new(id, h, w, frames)?;
    seq.original_indices = original;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png_dir(dir: &Path, n: usize) {
        for i in 0..n {
            let img = ImageBuffer::from_fn(4, 3, |x, y| {
                Rgb([(i * 10) as u8, (x * 40) as u8, (y * 60) as u8])
            });
            img.save(dir.join(format!("frame_{i}.png"))).unwrap();
        }
    }

    #[test]
    fn png_directory_decodes_in_numeric_filename_order() {
        let dir = tempfile::tempdir().unwrap();
        write_png_dir(dir.path(), 16);
        let seq = decode_frames(dir.path(), &DecodeConfig::default()).unwrap();
        assert_eq!(seq.len(), 16);
        assert_eq!((seq.height(), seq.width()), (3, 4));
        for i in 0..16 {
            let expected = (i * 10) as f32 / 255.0;
            assert!((seq.frame(i)[0] - expected).abs() < 1e-6, "frame {i} out of order");
        }
        let again = decode_frames(dir.path(), &DecodeConfig::default()).unwrap();
        assert_eq!(seq, again);
    }

    #[test]
    fn stride_and_limit_keep_original_indices() {
        let dir = tempfile::tempdir().unwrap();
        write_png_dir(dir.path(), 10);
        let cfg = DecodeConfig {
            stride: 3,
            max_frames: Some(3),
            resize: Some((6, 8)),
        };
        let seq = decode_frames(dir.path(), &cfg).unwrap();
        assert_eq!(seq.original_indices(), &[0, 3, 6]);
        assert_eq!((seq.height(), seq.width()), (6, 8));
    }

    #[test]
    fn truncated_file_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        write_png_dir(dir.path(), 3);
        let victim = dir.path().join("frame_1.png");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
        let err = decode_frames(dir.path(), &DecodeConfig::default()).unwrap_err();
        match err {
            Error::Ingestion { path, .. } => assert_eq!(path, victim),
            other => panic!("unexpected {other:?}"),
        }

        let y4m = dir.path().join("clip.y4m");
        fs::write(&y4m, b"YUV4MPEG2 W4 H2 F25:1 C444\nFRAME\n\x10\x20").unwrap();
        assert!(matches!(
            decode_frames(&y4m, &DecodeConfig::default()),
            Err(Error::Ingestion { .. })
        ));
    }

    #[test]
    fn y4m_stream_decodes_to_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.y4m");
        let mut bytes = b"YUV4MPEG2 W2 H2 F25:1 C444\n".to_vec();
        for luma in [16u8, 235] {
            bytes.extend_from_slice(b"FRAME\n");
            bytes.extend(std::iter::repeat_n(luma, 4));
            bytes.extend(std::iter::repeat_n(128u8, 8));
        }
        fs::write(&path, bytes).unwrap();
        let seq = decode_frames(&path, &DecodeConfig::default()).unwrap();
        assert_eq!(seq.len(), 2);
        assert!(seq.frame(0).iter().all(|&v| v.abs() < 1e-3));
        assert!(seq.frame(1).iter().all(|&v| (v - 1.0).abs() < 2e-3));
    }

    #[test]
    fn values_are_clamped_and_shapes_checked() {
        let seq = FrameSequence::new("x", 1, 1, vec![vec![-1.0, 0.5, 2.0]]).unwrap();
        assert_eq!(seq.frame(0), &[0.0, 0.5, 1.0]);
        assert!(FrameSequence::new("x", 1, 2, vec![vec![0.0; 3]]).is_err());
    }

    #[test]
    fn disk_cache_round_trips() {
        let src = tempfile::tempdir().unwrap();
        write_png_dir(src.path(), 4);
        let cache_dir = tempfile::tempdir().unwrap();
        let cfg = DecodeConfig {
            resize: Some((2, 2)),
            ..DecodeConfig::default()
        };
        let first = FrameCache::on_disk(cache_dir.path()).unwrap().load(src.path(), &cfg).unwrap();
        let entries: Vec<_> = fs::read_dir(cache_dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
        let second = FrameCache::on_disk(cache_dir.path()).unwrap().load(src.path(), &cfg).unwrap();
        assert_eq!(first.frames(), second.frames());
        assert_eq!(first.original_indices(), second.original_indices());
    }
}
