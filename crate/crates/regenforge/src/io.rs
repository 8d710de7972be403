//! Rasters, id masks, JSON Lines manifests and embedding files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb as ImgRgb, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use regenforge_core::distance::EmbeddingSet;
use regenforge_core::taxonomy::{ClassId, Rgb};
use regenforge_core::{DatasetManifest, RgbRaster, SampleRecord, SemanticMask};

use crate::error::{Error, Result};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";

pub fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<RgbRaster> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(RgbRaster::from_rgb_bytes(w, h, img.as_raw())?)
}

pub fn write_raster(path: &Path, raster: &RgbRaster) -> Result<()> {
    create_parent(path)?;
    let img: RgbImage = ImageBuffer::<ImgRgb<u8>, _>::from_raw(
        raster.width() as u32,
        raster.height() as u32,
        raster.to_rgb_bytes(),
    )
    .expect("buffer sized from raster");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes class ids as an 8-bit greyscale PNG.
pub fn write_id_mask(path: &Path, mask: &SemanticMask) -> Result<()> {
    create_parent(path)?;
    let img: GrayImage =
        ImageBuffer::<Luma<u8>, _>::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
            .expect("buffer sized from mask");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn id_mask_png_bytes(mask: &SemanticMask) -> Vec<u8> {
    let img: GrayImage =
        ImageBuffer::<Luma<u8>, _>::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
            .expect("buffer sized from mask");
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG");
    out.into_inner()
}

pub fn raster_png_bytes(raster: &RgbRaster) -> Vec<u8> {
    let img: RgbImage =
        ImageBuffer::<ImgRgb<u8>, _>::from_raw(raster.width() as u32, raster.height() as u32, raster.to_rgb_bytes())
            .expect("buffer sized from raster");
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG");
    out.into_inner()
}

/// Reads an 8-bit greyscale id mask.
pub fn read_id_mask(path: &Path, ignore_index: ClassId) -> Result<SemanticMask> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        _ => return Err(Error::format(path, "id masks must be 8-bit greyscale")),
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Ok(SemanticMask::new(w, h, gray.into_raw(), ignore_index)?)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads one JSON value per non-empty line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    create_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    taxonomy_hash: String,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    manifest: ManifestHeader,
}

/// Reads a manifest: a `{"manifest": {"taxonomy_hash": ...}}` header line
/// followed by one record per line. Relative image and mask paths resolve
/// against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hash = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        };
        if hash.is_none() && records.is_empty() {
            let header: HeaderLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected manifest header line: {e}"),
            })?;
            hash = Some(header.manifest.taxonomy_hash);
            continue;
        }
        records.push(serde_json::from_str::<SampleRecord>(&line).map_err(parse_err)?);
    }
    let hash = hash.ok_or_else(|| Error::format(path, "empty manifest: missing header line"))?;
    Ok(DatasetManifest::new(hash, records)?)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    create_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = HeaderLine {
        manifest: ManifestHeader {
            taxonomy_hash: manifest.taxonomy_hash.clone(),
        },
    };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_all(b"\n").map_err(io)?;
    for r in &manifest.records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Resolves a manifest-relative path.
pub fn resolve(manifest_path: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Writes the binary embedding format: "EMB1", u64 n, u64 d, then n*d f32,
/// all little-endian.
pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    create_parent(path)?;
    let mut bytes = Vec::with_capacity(20 + 4 * set.len() * set.dim());
    bytes.extend_from_slice(EMB_MAGIC);
    bytes.extend_from_slice(&(set.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&(set.dim() as u64).to_le_bytes());
    for i in 0..set.len() {
        for &v in set.row(i) {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads either the binary format or a numeric CSV (an optional
/// non-numeric header row is skipped).
pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if bytes.starts_with(EMB_MAGIC) {
        return parse_emb1(&bytes, path, label);
    }
    parse_csv_embeddings(&bytes, path, label)
}

fn parse_emb1(bytes: &[u8], path: &Path, label: String) -> Result<EmbeddingSet> {
    if bytes.len() < 20 {
        return Err(Error::format(path, "truncated EMB1 header"));
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let d = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::format(path, "EMB1 size overflows"))?;
    let body = &bytes[20..];
    if body.len() != expected {
        return Err(Error::format(
            path,
            format!("EMB1 body holds {} bytes, header implies {expected}", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok(EmbeddingSet::new(label, n, d, data)?)
}

fn parse_csv_embeddings(bytes: &[u8], path: &Path, label: String) -> Result<EmbeddingSet> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(bytes);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(EmbeddingSet::from_rows(label, &rows)?)
}

/// `(id, lat, lon)` rows; a header row is optional.
pub fn read_sites_csv(path: &Path) -> Result<Vec<(String, f64, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.len() < 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected id, lat, lon".into(),
            });
        }
        match (rec[1].parse::<f64>(), rec[2].parse::<f64>()) {
            (Ok(lat), Ok(lon)) => out.push((rec[0].to_string(), lat, lon)),
            _ if i == 0 => continue,
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "lat and lon must be numbers".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Image files in `dir` sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

/// Blends mask colours over the photo; `alpha` is the mask weight.
pub fn overlay(photo: &RgbRaster, mask_colours: &RgbRaster, alpha: f64) -> RgbRaster {
    let a = alpha.clamp(0.0, 1.0);
    let mut out = photo.clone();
    for y in 0..photo.height().min(mask_colours.height()) {
        for x in 0..photo.width().min(mask_colours.width()) {
            let p = photo.get(x, y).0;
            let m = mask_colours.get(x, y).0;
            let mix = |i: usize| (f64::from(p[i]) * (1.0 - a) + f64::from(m[i]) * a).round() as u8;
            out.set(x, y, Rgb([mix(0), mix(1), mix(2)]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use regenforge_core::{ClassTaxonomy, Source};

    #[test]
    fn id_mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..12 * 7).map(|i| if i % 13 == 0 { 255 } else { (i % 23) as u8 }).collect();
        let mask = SemanticMask::new(12, 7, data, 255).unwrap();
        let path = dir.path().join("m.png");
        write_id_mask(&path, &mask).unwrap();
        assert_eq!(read_id_mask(&path, 255).unwrap(), mask);
    }

    #[test]
    fn raster_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..5 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let r = RgbRaster::from_rgb_bytes(5, 3, &bytes).unwrap();
        let path = dir.path().join("r.png");
        write_raster(&path, &r).unwrap();
        assert_eq!(read_raster(&path).unwrap(), r);
    }

    #[test]
    fn manifest_round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let tax = ClassTaxonomy::forest_regeneration();
        let mut m = DatasetManifest::for_taxonomy(&tax);
        m.push(SampleRecord::new("a", Source::Synthetic, "a.png").with_mask("a_mask.png")).unwrap();
        m.push(SampleRecord::new("b", Source::HandLabelled, "b.png")).unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, &m).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"manifest\":{\"taxonomy_hash\":\""));
        assert_eq!(read_manifest(&path).unwrap(), m);
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "{\"manifest\":{\"taxonomy_hash\":\"x\"}}\n{\"id\":\"a\"}\n").unwrap();
        match read_manifest(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn embeddings_binary_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let set = EmbeddingSet::from_rows("x", &[vec![1.0, 2.5], vec![-3.0, 0.25], vec![4.0, 8.0]]).unwrap();
        let bin = dir.path().join("x.emb");
        write_embeddings(&bin, &set).unwrap();
        let raw = fs::read(&bin).unwrap();
        assert_eq!(&raw[..4], b"EMB1");
        assert_eq!(raw.len(), 20 + 3 * 2 * 4);
        let back = read_embeddings(&bin).unwrap();
        assert_eq!((back.len(), back.dim()), (3, 2));
        assert_eq!(back.row(1), &[-3.0, 0.25]);

        let csv_path = dir.path().join("x.csv");
        fs::write(&csv_path, "a,b\n1,2.5\n-3,0.25\n4,8\n").unwrap();
        let c = read_embeddings(&csv_path).unwrap();
        assert_eq!(c.row(2), &[4.0, 8.0]);

        fs::write(&bin, &raw[..30]).unwrap();
        assert!(matches!(read_embeddings(&bin), Err(Error::Format { .. })));
    }

    #[test]
    fn overlay_extremes() {
        let photo = RgbRaster::filled(2, 2, Rgb([10, 20, 30])).unwrap();
        let mask = RgbRaster::filled(2, 2, Rgb([200, 0, 100])).unwrap();
        assert_eq!(overlay(&photo, &mask, 0.0), photo);
        assert_eq!(overlay(&photo, &mask, 1.0), mask);
        assert_eq!(overlay(&photo, &mask, 0.5).get(0, 0), Rgb([105, 10, 65]));
    }
}
