//! In-memory georeferenced rasters with GeoTIFF read/write.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;

use crate::error::{Error, Result};
use crate::geometry::{Bbox, Point};

/// Affine pixel→world map in GDAL order:
/// `x = c + a·col + b·row`, `y = f + d·col + e·row`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoTransform {
    pub c: f64,
    pub a: f64,
    pub b: f64,
    pub f: f64,
    pub d: f64,
    pub e: f64,
}

impl GeoTransform {
    /// North-up transform with square pixels of `gsd` meters.
    pub fn north_up(origin_x: f64, origin_y: f64, gsd: f64) -> Self {
        Self {
            c: origin_x,
            a: gsd,
            b: 0.0,
            f: origin_y,
            d: 0.0,
            e: -gsd,
        }
    }

    pub fn determinant(&self) -> f64 {
        self.a * self.e - self.b * self.d
    }

    pub fn pixel_to_world(&self, col: f64, row: f64) -> Point {
        Point::new(
            self.c + self.a * col + self.b * row,
            self.f + self.d * col + self.e * row,
        )
    }

    /// Continuous pixel coordinates `(col, row)`; pixel `(i, j)` spans
    /// `[i, i+1) × [j, j+1)` with its center at `(i + 0.5, j + 0.5)`.
    pub fn world_to_pixel(&self, p: Point) -> (f64, f64) {
        let det = self.determinant();
        let dx = p.x - self.c;
        let dy = p.y - self.f;
        (
            (self.e * dx - self.b * dy) / det,
            (-self.d * dx + self.a * dy) / det,
        )
    }

    pub fn pixel_size(&self) -> f64 {
        self.determinant().abs().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub path: Option<PathBuf>,
    pub transform: GeoTransform,
    pub width: usize,
    pub height: usize,
    /// Band-sequential samples, each `width * height` long, row-major.
    pub bands: Vec<Vec<f32>>,
    pub nodata: Option<f64>,
}

impl Raster {
    pub fn new(
        transform: GeoTransform,
        width: usize,
        height: usize,
        bands: Vec<Vec<f32>>,
        nodata: Option<f64>,
    ) -> Result<Self> {
        if transform.determinant() == 0.0 || !transform.determinant().is_finite() {
            return Err(Error::Raster("geotransform is not invertible".into()));
        }
        if bands.is_empty() {
            return Err(Error::Raster("raster needs at least one band".into()));
        }
        if bands.iter().any(|b| b.len() != width * height) {
            return Err(Error::Raster("band length does not match dimensions".into()));
        }
        Ok(Self {
            path: None,
            transform,
            width,
            height,
            bands,
            nodata,
        })
    }

    pub fn filled(transform: GeoTransform, width: usize, height: usize, bands: usize, value: f32) -> Result<Self> {
        Self::new(transform, width, height, vec![vec![value; width * height]; bands], None)
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn get(&self, band: usize, col: usize, row: usize) -> f32 {
        self.bands[band][row * self.width + col]
    }

    pub fn set(&mut self, band: usize, col: usize, row: usize, v: f32) {
        self.bands[band][row * self.width + col] = v;
    }

    pub fn is_nodata(&self, v: f32) -> bool {
        v.is_nan() || self.nodata.is_some_and(|nd| (v as f64 - nd).abs() < 1e-9 * (1.0 + nd.abs()))
    }

    /// World-space extent of the raster.
    pub fn extent(&self) -> Bbox {
        let corners = [
            self.transform.pixel_to_world(0.0, 0.0),
            self.transform.pixel_to_world(self.width as f64, 0.0),
            self.transform.pixel_to_world(0.0, self.height as f64),
            self.transform.pixel_to_world(self.width as f64, self.height as f64),
        ];
        Bbox::of(&corners)
    }

    /// Pixel containing the world point, if inside the raster.
    pub fn pixel_at(&self, p: Point) -> Option<(usize, usize)> {
        let (u, v) = self.transform.world_to_pixel(p);
        if u < 0.0 || v < 0.0 {
            return None;
        }
        let (i, j) = (u.floor() as usize, v.floor() as usize);
        (i < self.width && j < self.height).then_some((i, j))
    }

    pub fn pixel_center(&self, col: usize, row: usize) -> Point {
        self.transform.pixel_to_world(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Bilinear sample of all bands at continuous pixel coordinates. Returns
    /// `None` outside the raster or when any contributing pixel is nodata.
    pub fn sample_bilinear(&self, u: f64, v: f64, out: &mut [f32]) -> bool {
        let x = u - 0.5;
        let y = v - 0.5;
        if x < -0.5 || y < -0.5 || x > self.width as f64 - 0.5 || y > self.height as f64 - 0.5 {
            return false;
        }
        let x0f = x.floor();
        let y0f = y.floor();
        let tx = (x - x0f) as f32;
        let ty = (y - y0f) as f32;
        let clampi = |k: f64, n: usize| (k.max(0.0) as usize).min(n - 1);
        let x0 = clampi(x0f, self.width);
        let x1 = clampi(x0f + 1.0, self.width);
        let y0 = clampi(y0f, self.height);
        let y1 = clampi(y0f + 1.0, self.height);
        for (b, o) in out.iter_mut().enumerate().take(self.bands.len()) {
            let p00 = self.get(b, x0, y0);
            let p10 = self.get(b, x1, y0);
            let p01 = self.get(b, x0, y1);
            let p11 = self.get(b, x1, y1);
            if [p00, p10, p01, p11].iter().any(|&p| self.is_nodata(p)) {
                return false;
            }
            let top = p00 + (p10 - p00) * tx;
            let bot = p01 + (p11 - p01) * tx;
            *o = top + (bot - top) * ty;
        }
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    U8,
    F32,
}

/// Write a GeoTIFF using ModelPixelScale + ModelTiepoint when the transform
/// is north-up, or ModelTransformation otherwise.
pub fn write_geotiff(path: &Path, raster: &Raster, format: SampleFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(tiff_err)?;
    let (w, h) = (raster.width as u32, raster.height as u32);
    let n = raster.width * raster.height;
    let nb = raster.band_count();

    macro_rules! write_image {
        ($ct:ty, $data:expr) => {{
            let mut img = enc.new_image::<$ct>(w, h).map_err(tiff_err)?;
            write_geo_tags(img.encoder(), raster)?;
            img.write_data(&$data).map_err(tiff_err)?;
        }};
    }
    let interleaved_u8 = || -> Vec<u8> {
        let mut v = Vec::with_capacity(n * nb);
        for i in 0..n {
            for b in 0..nb {
                v.push(raster.bands[b][i].round().clamp(0.0, 255.0) as u8);
            }
        }
        v
    };
    let interleaved_f32 = || -> Vec<f32> {
        let mut v = Vec::with_capacity(n * nb);
        for i in 0..n {
            for b in 0..nb {
                v.push(raster.bands[b][i]);
            }
        }
        v
    };
    match (format, nb) {
        (SampleFormat::U8, 1) => write_image!(colortype::Gray8, interleaved_u8()),
        (SampleFormat::U8, 3) => write_image!(colortype::RGB8, interleaved_u8()),
        (SampleFormat::U8, 4) => write_image!(colortype::RGBA8, interleaved_u8()),
        (SampleFormat::F32, 1) => write_image!(colortype::Gray32Float, interleaved_f32()),
        (SampleFormat::F32, 3) => write_image!(colortype::RGB32Float, interleaved_f32()),
        (f, b) => {
            return Err(Error::Raster(format!("unsupported band layout {b} x {f:?}")));
        }
    }
    Ok(())
}

fn write_geo_tags<W: std::io::Write + std::io::Seek, K: tiff::encoder::TiffKind>(
    dir: &mut tiff::encoder::DirectoryEncoder<'_, W, K>,
    raster: &Raster,
) -> Result<()> {
    let t = raster.transform;
    if t.b == 0.0 && t.d == 0.0 && t.e < 0.0 {
        dir.write_tag(Tag::ModelPixelScaleTag, &[t.a, -t.e, 0.0][..])
            .map_err(tiff_err)?;
        dir.write_tag(Tag::ModelTiepointTag, &[0.0, 0.0, 0.0, t.c, t.f, 0.0][..])
            .map_err(tiff_err)?;
    } else {
        let m = [
            t.a, t.b, 0.0, t.c, t.d, t.e, 0.0, t.f, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        ];
        dir.write_tag(Tag::ModelTransformationTag, &m[..])
            .map_err(tiff_err)?;
    }
    // GTModelType = projected, GTRasterType = PixelIsArea
    let keys: [u16; 12] = [1, 1, 0, 2, 1024, 0, 1, 1, 1025, 0, 1, 1];
    dir.write_tag(Tag::GeoKeyDirectoryTag, &keys[..])
        .map_err(tiff_err)?;
    if let Some(nd) = raster.nodata {
        dir.write_tag(Tag::GdalNodata, format!("{nd}").as_str())
            .map_err(tiff_err)?;
    }
    Ok(())
}

fn tiff_err(e: tiff::TiffError) -> Error {
    Error::Raster(e.to_string())
}

/// Read a single-image GeoTIFF into memory.
pub fn read_geotiff(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(tiff_err)?;
    let (w, h) = dec.dimensions().map_err(tiff_err)?;
    let (w, h) = (w as usize, h as usize);

    let transform = if let Ok(m) = dec.get_tag_f64_vec(Tag::ModelTransformationTag) {
        if m.len() < 8 {
            return Err(Error::Raster("short ModelTransformationTag".into()));
        }
        GeoTransform {
            a: m[0],
            b: m[1],
            c: m[3],
            d: m[4],
            e: m[5],
            f: m[7],
        }
    } else {
        let scale = dec
            .get_tag_f64_vec(Tag::ModelPixelScaleTag)
            .map_err(|_| Error::Raster(format!("{}: no georeferencing tags", path.display())))?;
        let tie = dec
            .get_tag_f64_vec(Tag::ModelTiepointTag)
            .map_err(|_| Error::Raster(format!("{}: no ModelTiepointTag", path.display())))?;
        if scale.len() < 2 || tie.len() < 6 {
            return Err(Error::Raster("malformed tiepoint/scale tags".into()));
        }
        let (i, j, x, y) = (tie[0], tie[1], tie[3], tie[4]);
        GeoTransform {
            a: scale[0],
            b: 0.0,
            c: x - i * scale[0],
            d: 0.0,
            e: -scale[1],
            f: y + j * scale[1],
        }
    };
    let nodata = dec
        .get_tag_ascii_string(Tag::GdalNodata)
        .ok()
        .and_then(|s| s.trim_matches(char::from(0)).trim().parse::<f64>().ok());

    let samples: Vec<f32> = match dec.read_image().map_err(tiff_err)? {
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        _ => return Err(Error::Raster("unsupported sample type".into())),
    };
    if w * h == 0 || samples.len() % (w * h) != 0 {
        return Err(Error::Raster("sample count does not match dimensions".into()));
    }
    let nb = samples.len() / (w * h);
    let mut bands = vec![Vec::with_capacity(w * h); nb];
    for px in samples.chunks_exact(nb) {
        for (b, &s) in px.iter().enumerate() {
            bands[b].push(s);
        }
    }
    let mut r = Raster::new(transform, w, h, bands, nodata)?;
    r.path = Some(path.to_path_buf());
    Ok(r)
}
