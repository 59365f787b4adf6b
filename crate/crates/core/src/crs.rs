//! Coordinate reference systems and reprojection into the working metric CRS.

use std::fmt;

use proj4rs::Proj;

use crate::error::{Error, Result};
use crate::geometry::Point;

/// A parsed CRS. `Local` is an already-metric frame with no datum attached
/// (synthetic scenes, engineering surveys); it never reprojects.
#[derive(Clone)]
pub enum Crs {
    Local,
    Proj { name: String, proj: Box<Proj> },
}

impl fmt::Debug for Crs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

const WGS84: &str = "+proj=longlat +datum=WGS84 +no_defs";

impl Crs {
    /// Accepts `local`, `EPSG:4326`, `EPSG:3857`, WGS84 UTM codes
    /// (`EPSG:326zz` / `EPSG:327zz`), OGC URNs of those, or a raw
    /// `+proj=` string.
    pub fn parse(spec: &str) -> Result<Crs> {
        let s = spec.trim();
        if s.eq_ignore_ascii_case("local") || s.eq_ignore_ascii_case("metric") {
            return Ok(Crs::Local);
        }
        let def = if s.starts_with('+') {
            s.to_string()
        } else if s.eq_ignore_ascii_case("WGS84") || s.ends_with("CRS84") {
            WGS84.to_string()
        } else {
            let code = epsg_code(s).ok_or_else(|| Error::Crs(format!("unrecognized CRS `{s}`")))?;
            match code {
                4326 => WGS84.to_string(),
                3857 => "+proj=merc +a=6378137 +b=6378137 +lat_ts=0 +lon_0=0 +x_0=0 +y_0=0 +k=1 +units=m +no_defs".to_string(),
                32601..=32660 => format!("+proj=utm +zone={} +datum=WGS84 +units=m +no_defs", code - 32600),
                32701..=32760 => format!("+proj=utm +zone={} +south +datum=WGS84 +units=m +no_defs", code - 32700),
                _ => return Err(Error::Crs(format!("unsupported EPSG code {code}; pass a +proj string"))),
            }
        };
        let proj = Proj::from_proj_string(&def).map_err(|e| Error::Crs(format!("{s}: {e}")))?;
        let name = if s.starts_with('+') { def } else { s.to_string() };
        Ok(Crs::Proj {
            name,
            proj: Box::new(proj),
        })
    }

    /// UTM zone containing the given WGS84 longitude/latitude (degrees).
    pub fn utm_for(lon: f64, lat: f64) -> Result<Crs> {
        let zone = (((lon + 180.0) / 6.0).floor() as i64).clamp(0, 59) + 1;
        let code = if lat >= 0.0 { 32600 + zone } else { 32700 + zone };
        Crs::parse(&format!("EPSG:{code}"))
    }

    pub fn name(&self) -> String {
        match self {
            Crs::Local => "local".to_string(),
            Crs::Proj { name, .. } => name.clone(),
        }
    }

    pub fn is_geographic(&self) -> bool {
        match self {
            Crs::Local => false,
            Crs::Proj { proj, .. } => proj.is_latlong(),
        }
    }

    fn proj(&self) -> Option<&Proj> {
        match self {
            Crs::Local => None,
            Crs::Proj { proj, .. } => Some(proj),
        }
    }
}

fn epsg_code(s: &str) -> Option<u32> {
    let upper = s.to_ascii_uppercase();
    let tail = if let Some(rest) = upper.strip_prefix("EPSG:") {
        rest.to_string()
    } else if upper.starts_with("URN:OGC:DEF:CRS:EPSG:") {
        upper.rsplit(':').next()?.to_string()
    } else {
        return None;
    };
    tail.parse().ok()
}

/// Maps points between a source CRS and the working CRS. Geographic
/// coordinates are exchanged in degrees (longitude = x).
#[derive(Clone, Debug)]
pub struct Reprojector {
    src: Crs,
    dst: Crs,
}

impl Reprojector {
    pub fn new(src: Crs, dst: Crs) -> Result<Self> {
        match (&src, &dst) {
            (Crs::Local, Crs::Proj { .. }) | (Crs::Proj { .. }, Crs::Local) => Err(Error::Crs(
                "cannot reproject between a local frame and a georeferenced CRS".into(),
            )),
            _ => Ok(Self { src, dst }),
        }
    }

    pub fn is_identity(&self) -> bool {
        match (&self.src, &self.dst) {
            (Crs::Local, Crs::Local) => true,
            (a, b) => a.name() == b.name(),
        }
    }

    pub fn target(&self) -> &Crs {
        &self.dst
    }

    pub fn forward(&self, p: Point) -> Result<Point> {
        transform(&self.src, &self.dst, p)
    }

    pub fn inverse(&self, p: Point) -> Result<Point> {
        transform(&self.dst, &self.src, p)
    }
}

fn transform(src: &Crs, dst: &Crs, p: Point) -> Result<Point> {
    let (Some(s), Some(d)) = (src.proj(), dst.proj()) else {
        return Ok(p);
    };
    let mut xy = if s.is_latlong() {
        (p.x.to_radians(), p.y.to_radians(), 0.0)
    } else {
        (p.x, p.y, 0.0)
    };
    proj4rs::transform::transform(s, d, &mut xy).map_err(|e| Error::Crs(e.to_string()))?;
    if d.is_latlong() {
        Ok(Point::new(xy.0.to_degrees(), xy.1.to_degrees()))
    } else {
        Ok(Point::new(xy.0, xy.1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_common_codes() {
        assert!(Crs::parse("EPSG:4326").unwrap().is_geographic());
        assert!(!Crs::parse("EPSG:32737").unwrap().is_geographic());
        assert!(Crs::parse("urn:ogc:def:crs:EPSG::32737").is_ok());
        assert!(Crs::parse("urn:ogc:def:crs:OGC:1.3:CRS84").unwrap().is_geographic());
        assert!(matches!(Crs::parse("local").unwrap(), Crs::Local));
        assert!(Crs::parse("EPSG:99999").is_err());
        assert!(Crs::parse("nonsense").is_err());
    }

    #[test]
    fn utm_zone_for_dar_es_salaam() {
        let crs = Crs::utm_for(39.27, -6.80).unwrap();
        assert_eq!(crs.name(), "EPSG:32737");
    }

    #[test]
    fn wgs84_to_utm_known_point() {
        // central meridian of zone 37 (39°E) on the equator maps to the false easting
        let r = Reprojector::new(Crs::parse("EPSG:4326").unwrap(), Crs::parse("EPSG:32737").unwrap()).unwrap();
        let p = r.forward(Point::new(39.0, 0.0)).unwrap();
        assert!((p.x - 500_000.0).abs() < 1e-6, "{p:?}");
        assert!((p.y - 10_000_000.0).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn metric_round_trip_within_micrometre() {
        let r = Reprojector::new(Crs::parse("EPSG:32737").unwrap(), Crs::parse("EPSG:4326").unwrap()).unwrap();
        for &(x, y) in &[(530_000.0, 9_248_000.0), (529_123.456, 9_251_987.654), (480_001.0, 9_100_000.0)] {
            let geo = r.forward(Point::new(x, y)).unwrap();
            let back = r.inverse(geo).unwrap();
            assert!((back.x - x).abs() < 1e-6 && (back.y - y).abs() < 1e-6, "{back:?}");
        }
    }
}
