//! Writing generated videos to disk.

use std::path::{Path, PathBuf};

use uadt_core::media::save_ppm;
use uadt_core::numerics::Tensor;
use uadt_core::{Error, Result};

/// Writes `frame_0000.ppm ...` for a `[3, T, H, W]` video, plus PNG frames
/// and `animation.gif` when built with the `media` feature.
pub fn write_video(video: &Tensor, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let frames = video.shape()[1];
    let mut written = Vec::with_capacity(frames + 1);
    for t in 0..frames {
        let frame = frame_at(video, t)?;
        let path = dir.join(format!("frame_{t:04}.ppm"));
        save_ppm(&frame, &path)?;
        written.push(path);
    }
    #[cfg(feature = "media")]
    written.extend(encoded::write(video, dir)?);
    Ok(written)
}

fn frame_at(video: &Tensor, t: usize) -> Result<Tensor> {
    let s = video.shape();
    video.narrow(1, t, t + 1)?.reshape(vec![s[0], s[2], s[3]])
}

#[cfg(feature = "media")]
mod encoded {
    use super::*;
    use image::codecs::gif::{GifEncoder, Repeat};
    use image::{Delay, Frame, Rgb, RgbImage, RgbaImage};

    fn to_rgb(frame: &Tensor) -> RgbImage {
        let (h, w) = (frame.shape()[1], frame.shape()[2]);
        let d = frame.data();
        let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([byte(d[i]), byte(d[h * w + i]), byte(d[2 * h * w + i])])
        })
    }

    fn media_err(path: &Path, e: impl std::fmt::Display) -> Error {
        Error::validation(format!("{}: {e}", path.display()))
    }

    pub fn write(video: &Tensor, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let mut gif_frames = Vec::new();
        for t in 0..video.shape()[1] {
            let img = to_rgb(&frame_at(video, t)?);
            let path = dir.join(format!("frame_{t:04}.png"));
            img.save(&path).map_err(|e| media_err(&path, e))?;
            written.push(path);
            let rgba = RgbaImage::from_fn(img.width(), img.height(), |x, y| {
                let p = img.get_pixel(x, y).0;
                image::Rgba([p[0], p[1], p[2], 255])
            });
            gif_frames.push(Frame::from_parts(rgba, 0, 0, Delay::from_numer_denom_ms(125, 1)));
        }
        let path = dir.join("animation.gif");
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut enc = GifEncoder::new(file);
        enc.set_repeat(Repeat::Infinite).map_err(|e| media_err(&path, e))?;
        enc.encode_frames(gif_frames).map_err(|e| media_err(&path, e))?;
        written.push(path);
        Ok(written)
    }
}
