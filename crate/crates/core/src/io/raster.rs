//! Channel stacks on disk: one multi-page TIFF, or a directory holding one
//! grayscale PNG/TIFF per channel named after it.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;

use crate::error::{Error, Result};
use crate::raster::ChannelStack;

fn tiff_err(path: &Path, e: tiff::TiffError) -> Error {
    Error::format(path, e.to_string())
}

fn page_name<R: std::io::Read + std::io::Seek>(dec: &mut Decoder<R>, index: usize) -> String {
    dec.get_tag_ascii_string(Tag::ImageDescription)
        .ok()
        .map(|s| s.trim_end_matches('\0').trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("ch{index}"))
}

/// Reads every page of a grayscale TIFF as one channel. Page names come from
/// the ImageDescription tag, falling back to `ch<index>`.
pub fn read_tiff_stack(path: &Path) -> Result<ChannelStack> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file))
        .map_err(|e| tiff_err(path, e))?
        .with_limits(Limits::unlimited());
    let mut planes = Vec::new();
    let mut size = None;
    loop {
        let dims = dec.dimensions().map_err(|e| tiff_err(path, e))?;
        if *size.get_or_insert(dims) != dims {
            return Err(Error::format(
                path,
                format!("page {} is {dims:?}, expected {size:?}", planes.len()),
            ));
        }
        let name = page_name(&mut dec, planes.len());
        let data = match dec.read_image().map_err(|e| tiff_err(path, e))? {
            DecodingResult::U8(v) => v.into_iter().map(u16::from).collect(),
            DecodingResult::U16(v) => v,
            _ => return Err(Error::format(path, "only 8- and 16-bit grayscale pages are supported")),
        };
        if data.len() != dims.0 as usize * dims.1 as usize {
            return Err(Error::format(path, "pages must be single-sample grayscale"));
        }
        planes.push((name, data));
        if !dec.more_images() {
            break;
        }
        dec.next_image().map_err(|e| tiff_err(path, e))?;
    }
    let (w, h) = size.expect("at least one page");
    ChannelStack::from_planes(w, h, planes).map_err(|e| Error::format(path, e.to_string()))
}

/// One 16-bit page per channel, named in ImageDescription.
pub fn write_tiff_stack(path: &Path, stack: &ChannelStack) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| tiff_err(path, e))?;
    for c in 0..stack.channels() {
        let mut img = enc
            .new_image::<colortype::Gray16>(stack.width(), stack.height())
            .map_err(|e| tiff_err(path, e))?;
        img.encoder()
            .write_tag(Tag::ImageDescription, stack.names()[c].as_str())
            .map_err(|e| tiff_err(path, e))?;
        img.write_data(stack.channel(c)).map_err(|e| tiff_err(path, e))?;
    }
    Ok(())
}

fn read_gray(path: &Path) -> Result<(u32, u32, Vec<u16>)> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (img.width(), img.height());
    let data = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u16::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw(),
        _ => return Err(Error::format(path, "expected a single-channel grayscale image")),
    };
    Ok((w, h, data))
}

/// Channel files in `dir`, ordered by file name; the stem names the channel.
pub fn read_channel_dir(dir: &Path) -> Result<ChannelStack> {
    let mut files = channel_files(dir)?;
    files.sort();
    if files.is_empty() {
        return Err(Error::format(dir, "no PNG or TIFF channel files"));
    }
    let mut planes = Vec::new();
    let mut size = None;
    for f in &files {
        let (w, h, data) = read_gray(f)?;
        if *size.get_or_insert((w, h)) != (w, h) {
            return Err(Error::format(f, format!("{w}x{h} differs from the other channels")));
        }
        let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        planes.push((name, data));
    }
    let (w, h) = size.expect("non-empty");
    ChannelStack::from_planes(w, h, planes).map_err(|e| Error::format(dir, e.to_string()))
}

/// One 16-bit `<name>.png` per channel.
pub fn write_channel_dir(dir: &Path, stack: &ChannelStack) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for c in 0..stack.channels() {
        let path = dir.join(format!("{}.png", stack.names()[c]));
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(stack.width(), stack.height(), stack.channel(c).to_vec()).expect("sized plane");
        buf.save(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    }
    Ok(())
}

/// Channel names without decoding pixel data.
pub fn channel_names(path: &Path) -> Result<Vec<String>> {
    if path.is_dir() {
        let mut files = channel_files(path)?;
        files.sort();
        return Ok(files
            .iter()
            .map(|f| f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string())
            .collect());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(|e| tiff_err(path, e))?;
    let mut names = Vec::new();
    loop {
        let name = page_name(&mut dec, names.len());
        names.push(name);
        if !dec.more_images() {
            return Ok(names);
        }
        dec.next_image().map_err(|e| tiff_err(path, e))?;
    }
}

fn channel_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    Ok(fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| e.to_ascii_lowercase())
                    .as_deref(),
                Some("png" | "tif" | "tiff")
            )
        })
        .collect())
}

/// A `.tif`/`.tiff` file is a page stack; a directory holds per-channel files.
pub fn read_raster(path: &Path) -> Result<ChannelStack> {
    if path.is_dir() {
        read_channel_dir(path)
    } else {
        read_tiff_stack(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack() -> ChannelStack {
        ChannelStack::from_planes(
            5,
            3,
            vec![
                ("DAPI".into(), (0..15).map(|i| i * 4000).collect()),
                ("PanHistone".into(), (0..15).map(|i| 65535 - i).collect()),
                ("GFP".into(), vec![7; 15]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn tiff_round_trip_keeps_names() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tif");
        write_tiff_stack(&p, &stack()).unwrap();
        assert_eq!(read_raster(&p).unwrap(), stack());
        assert_eq!(channel_names(&p).unwrap(), stack().names());
    }

    #[test]
    fn channel_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_channel_dir(dir.path(), &stack()).unwrap();
        let back = read_raster(dir.path()).unwrap();
        // directory order is by file name
        assert_eq!(back.names(), &["DAPI", "GFP", "PanHistone"]);
        for name in ["DAPI", "GFP", "PanHistone"] {
            let a = stack();
            assert_eq!(
                back.channel(back.index_of(name).unwrap()),
                a.channel(a.index_of(name).unwrap())
            );
        }
    }

    #[test]
    fn eight_bit_pages_keep_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("Iba1.png");
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(2, 2, vec![0, 9, 200, 255]).unwrap();
        buf.save(&p).unwrap();
        let s = read_raster(dir.path()).unwrap();
        assert_eq!(s.channel(0), &[0, 9, 200, 255]);
        assert_eq!(s.names(), &["Iba1"]);
    }

    #[test]
    fn missing_or_empty_inputs_fail() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_raster(dir.path()).is_err());
        assert!(read_raster(&dir.path().join("none.tif")).is_err());
    }
}
