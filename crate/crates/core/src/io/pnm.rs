//! Binary PGM (`P5`) and PPM (`P6`) frames with maxval 255.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{dim_err, format_err, Result};
use crate::parallel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One decoded frame, `[C, H, W]` with values `byte / 255`.
pub fn decode<S: Scalar>(buf: &[u8]) -> Result<Tensor<S>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match buf.get(pos) {
                Some(b'#') => {
                    while pos < buf.len() && buf[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(format_err!("PNM header ends early")),
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() && buf[pos] != b'#' {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format_err!("unsupported PNM magic '{}', expected P5 or P6", m)),
    };
    let mut num = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse().map_err(|_| format_err!("PNM {} '{}' is not an integer", what, t))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(format_err!("unsupported PNM maxval {}, only 255 is accepted", maxval));
    }
    if w == 0 || h == 0 {
        return Err(format_err!("PNM frame has zero extent {}x{}", w, h));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = w * h * channels;
    let have = buf.len().saturating_sub(start);
    if have < need {
        return Err(format_err!("PNM raster truncated: expected {} bytes, found {}", need, have));
    }
    let raster = &buf[start..start + need];
    let mut data = vec![S::zero(); need];
    for (i, px) in raster.chunks_exact(channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            data[c * w * h + i] = S::lit(b as f64 / 255.0);
        }
    }
    Tensor::new(&[channels, h, w], data)
}

pub fn read_frame<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let path = path.as_ref();
    decode(&fs::read(path)?).map_err(|e| format_err!("{}: {}", path.display(), e))
}

/// `.pgm` / `.ppm` files of a directory in lexicographic order.
pub fn frame_paths(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("ppm"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Stacks the frames of `dir` into `[T, C, H, W]`.
pub fn read_frame_dir<S: Scalar>(dir: impl AsRef<Path>) -> Result<Tensor<S>> {
    let dir = dir.as_ref();
    let paths = frame_paths(dir)?;
    if paths.is_empty() {
        return Err(format_err!("no .pgm or .ppm frames in {}", dir.display()));
    }
    let frames = parallel::map_ordered(&paths, |p| read_frame::<S>(p)).into_iter().collect::<Result<Vec<_>>>()?;
    let first = frames[0].shape().to_vec();
    for (p, f) in paths.iter().zip(&frames) {
        if f.shape() != first.as_slice() {
            return Err(format_err!(
                "frame {} has shape {:?} but {} has {:?}",
                p.display(),
                f.shape(),
                paths[0].display(),
                first
            ));
        }
    }
    Tensor::stack(&frames)
}

/// Encodes `[C, H, W]` (C = 1 or 3) as P5/P6, rounding `clamp(v, 0, 1) * 255`.
pub fn encode<S: Scalar>(frame: &Tensor<S>) -> Result<Vec<u8>> {
    let (c, h, w) = match frame.shape() {
        [c, h, w] if *c == 1 || *c == 3 => (*c, *h, *w),
        s => return Err(dim_err!("PNM frames must be [1|3, H, W], got {:?}", s)),
    };
    let mut out = format!("{}\n{} {}\n255\n", if c == 1 { "P5" } else { "P6" }, w, h).into_bytes();
    let d = frame.data();
    for i in 0..h * w {
        for ch in 0..c {
            out.push((d[ch * h * w + i].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_frame<S: Scalar>(path: impl AsRef<Path>, frame: &Tensor<S>) -> Result<()> {
    fs::write(path, encode(frame)?)?;
    Ok(())
}

/// Writes `video[T, C, H, W]` as `frame_00000.pgm`, ... and returns the paths.
pub fn write_frame_dir<S: Scalar>(dir: impl AsRef<Path>, video: &Tensor<S>) -> Result<Vec<PathBuf>> {
    if video.ndim() != 4 {
        return Err(dim_err!("video must be [T, C, H, W], got {:?}", video.shape()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let ext = if video.shape()[1] == 1 { "pgm" } else { "ppm" };
    let mut paths = Vec::new();
    for t in 0..video.shape()[0] {
        let p = dir.join(format!("frame_{t:05}.{ext}"));
        write_frame(&p, &video.index0(t)?)?;
        paths.push(p);
    }
    Ok(paths)
}
