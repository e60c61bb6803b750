//! Uncompressed raster files and on-disk client datasets.
//!
//! A `.famr` file is the magic `FAMR`, then u32 width, u32 height and
//! u32 channels (little-endian), then `width·height·channels` bytes in
//! row-major order with channels interleaved per pixel. A dataset directory
//! holds one subdirectory per class, each with `.famr` files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{ClientDataset, DataSource};
use crate::error::{FamError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FAMR";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    /// Row-major, channel-interleaved bytes.
    pub pixels: Vec<u8>,
}

impl RasterImage {
    /// `[C, H, W]` tensor with values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let (w, h, c) = (self.width as usize, self.height as usize, self.channels as usize);
        let mut data = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[ch * h * w + y * w + x] = self.pixels[(y * w + x) * c + ch] as f64 / 255.0;
                }
            }
        }
        Tensor::from_vec(&[c, h, w], data)
    }

    /// Quantizes a `[C, H, W]` tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [c, h, w] = *t.shape() else {
            return Err(FamError::Input(format!("raster needs a [C, H, W] tensor, got {:?}", t.shape())));
        };
        let mut pixels = vec![0u8; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = t.data()[ch * h * w + y * w + x].clamp(0.0, 1.0);
                    pixels[(y * w + x) * c + ch] = (v * 255.0).round() as u8;
                }
            }
        }
        Ok(RasterImage {
            width: w as u32,
            height: h as u32,
            channels: c as u32,
            pixels,
        })
    }
}

pub fn write_famr(path: &Path, image: &RasterImage) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&image.width.to_le_bytes())?;
    f.write_all(&image.height.to_le_bytes())?;
    f.write_all(&image.channels.to_le_bytes())?;
    f.write_all(&image.pixels)?;
    Ok(())
}

pub fn read_famr(path: &Path) -> Result<RasterImage> {
    let fail = |reason: String| FamError::Ingestion {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| fail(e.to_string()))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fail("missing FAMR header".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (width, height, channels) = (field(0), field(1), field(2));
    if width == 0 || height == 0 || channels == 0 {
        return Err(fail(format!("degenerate image {width}×{height}×{channels}")));
    }
    let expected = width as usize * height as usize * channels as usize;
    if bytes.len() - 16 != expected {
        return Err(fail(format!(
            "expected {expected} pixel bytes, found {}",
            bytes.len() - 16
        )));
    }
    Ok(RasterImage {
        width,
        height,
        channels,
        pixels: bytes[16..].to_vec(),
    })
}

/// Nearest-neighbour resize of a `[C, H, W]` tensor; source index is
/// `floor(dst · src / dst_len)` along each axis.
pub fn resize_nearest(t: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let [c, h, w] = *t.shape() else {
        return Err(FamError::Input(format!("resize needs [C, H, W], got {:?}", t.shape())));
    };
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in 0..height {
            let sy = y * h / height;
            for x in 0..width {
                let sx = x * w / width;
                out.push(t.data()[ch * h * w + sy * w + sx]);
            }
        }
    }
    Tensor::from_vec(&[c, height, width], out)
}

fn convert_channels(t: Tensor, channels: usize, path: &Path) -> Result<Tensor> {
    let [c, h, w] = *t.shape() else { unreachable!() };
    if c == channels {
        return Ok(t);
    }
    let plane = h * w;
    let data = match (c, channels) {
        (3, 1) => (0..plane)
            .map(|i| (t.data()[i] + t.data()[plane + i] + t.data()[2 * plane + i]) / 3.0)
            .collect(),
        (1, 3) => t.data().repeat(3),
        _ => {
            return Err(FamError::Ingestion {
                path: path.to_path_buf(),
                reason: format!("cannot convert {c} channels to {channels}"),
            })
        }
    };
    Tensor::from_vec(&[channels, h, w], data)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let rd = fs::read_dir(dir).map_err(|e| FamError::Ingestion {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    for entry in rd {
        out.push(entry?.path());
    }
    out.sort();
    Ok(out)
}

/// Loads `<root>/<class>/<*.famr>` into a dataset. Classes are ordered by
/// directory name. With `target_shape` (`[C, H, W]`) images are converted
/// and resized to it; otherwise all images must share one shape.
pub fn load_directory(root: &Path, target_shape: Option<&[usize]>, client_id: usize) -> Result<ClientDataset> {
    let mut class_names = Vec::new();
    let mut examples = Vec::new();
    let mut shape: Option<Vec<usize>> = target_shape.map(<[usize]>::to_vec);
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let files: Vec<PathBuf> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "famr"))
            .collect();
        if files.is_empty() {
            return Err(FamError::Ingestion {
                path: dir.clone(),
                reason: "class directory has no .famr images".into(),
            });
        }
        let mut class = Vec::with_capacity(files.len());
        for file in &files {
            let mut t = read_famr(file)?.to_tensor()?;
            match &shape {
                Some(s) => {
                    t = convert_channels(t, s[0], file)?;
                    if t.shape() != s.as_slice() {
                        if target_shape.is_none() {
                            return Err(FamError::Ingestion {
                                path: file.clone(),
                                reason: format!("shape {:?} differs from {:?}", t.shape(), s),
                            });
                        }
                        t = resize_nearest(&t, s[1], s[2])?;
                    }
                }
                None => shape = Some(t.shape().to_vec()),
            }
            class.push(t);
        }
        class_names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
        examples.push(class);
    }
    if examples.is_empty() {
        return Err(FamError::Ingestion {
            path: root.to_path_buf(),
            reason: "no class directories".into(),
        });
    }
    Ok(ClientDataset {
        client_id,
        source: DataSource::Directory(root.to_path_buf()),
        class_names,
        examples,
        input_shape: shape.unwrap(),
    })
}

/// Writes a dataset in the directory layout read by [`load_directory`].
pub fn save_directory(ds: &ClientDataset, root: &Path) -> Result<()> {
    for (name, class) in ds.class_names.iter().zip(&ds.examples) {
        let dir = root.join(name);
        fs::create_dir_all(&dir)?;
        for (i, x) in class.iter().enumerate() {
            write_famr(&dir.join(format!("{i:05}.famr")), &RasterImage::from_tensor(x)?)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(w: u32, h: u32, c: u32, fill: impl Fn(usize) -> u8) -> RasterImage {
        let n = (w * h * c) as usize;
        RasterImage {
            width: w,
            height: h,
            channels: c,
            pixels: (0..n).map(fill).collect(),
        }
    }

    #[test]
    fn white_image_normalizes_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.famr");
        write_famr(&path, &image(2, 2, 1, |_| 255)).unwrap();
        let t = read_famr(&path).unwrap().to_tensor().unwrap();
        assert_eq!(t.data(), &[1.0; 4]);
    }

    #[test]
    fn checkerboard_resize() {
        // 4×4 checkerboard: value (x + y) % 2
        let data = (0..16).map(|i| ((i % 4 + i / 4) % 2) as f64).collect();
        let t = Tensor::from_vec(&[1, 4, 4], data).unwrap();
        let r = resize_nearest(&t, 2, 2).unwrap();
        // samples (0,0) (0,2) (2,0) (2,2)
        assert_eq!(r.data(), &[0.0, 0.0, 0.0, 0.0]);
        let r = resize_nearest(&t, 3, 3).unwrap();
        // rows/cols 0, 1, 2
        assert_eq!(r.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn directory_inventory_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["healthy", "sick"] {
            let d = dir.path().join(class);
            fs::create_dir_all(&d).unwrap();
            for i in 0..3 {
                write_famr(&d.join(format!("{i}.famr")), &image(4, 4, 3, |p| (p * 7) as u8)).unwrap();
            }
        }
        let ds = load_directory(dir.path(), Some(&[1, 2, 2]), 0).unwrap();
        assert_eq!(ds.inventory(), vec![("healthy".into(), 3), ("sick".into(), 3)]);
        assert_eq!(ds.examples[0][0].shape(), &[1, 2, 2]);

        fs::write(dir.path().join("sick").join("bad.famr"), b"FAMRxx").unwrap();
        let err = load_directory(dir.path(), None, 0).unwrap_err();
        assert!(err.to_string().contains("bad.famr"), "{err}");

        fs::create_dir_all(dir.path().join("empty")).unwrap();
        fs::remove_file(dir.path().join("sick").join("bad.famr")).unwrap();
        assert!(matches!(
            load_directory(dir.path(), None, 0),
            Err(FamError::Ingestion { .. })
        ));
    }

    #[test]
    fn save_then_load() {
        let t = Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 0.2, 0.6]).unwrap();
        let ds = ClientDataset {
            client_id: 3,
            source: DataSource::Directory(PathBuf::new()),
            class_names: vec!["a".into()],
            examples: vec![vec![t.clone()]],
            input_shape: vec![1, 2, 2],
        };
        let dir = tempfile::tempdir().unwrap();
        save_directory(&ds, dir.path()).unwrap();
        let back = load_directory(dir.path(), None, 3).unwrap();
        for (a, b) in back.examples[0][0].data().iter().zip(t.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
