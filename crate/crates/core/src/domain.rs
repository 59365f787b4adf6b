//! Core records shared by every stage: footprints, capture samples and the
//! five-task annotation vocabulary.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::geometry::{centroid, Point};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildingFootprint {
    pub id: String,
    /// Closed, counter-clockwise ring in the working metric CRS.
    pub polygon: Vec<Point>,
    pub centroid: Point,
    pub is_residential: bool,
}

impl BuildingFootprint {
    /// Build from an already-normalized ring (see [`crate::geometry::normalize_ring`]).
    pub fn new(id: impl Into<String>, polygon: Vec<Point>, is_residential: bool) -> Self {
        let centroid = centroid(&polygon);
        Self {
            id: id.into(),
            polygon,
            centroid,
            is_residential,
        }
    }

    pub fn area(&self) -> f64 {
        crate::geometry::signed_area(&self.polygon).abs()
    }

    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Self {
        let polygon: Vec<Point> = self.polygon.iter().map(|&p| f(p)).collect();
        Self::new(self.id.clone(), polygon, self.is_residential)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureSample {
    pub id: String,
    pub position: Point,
    /// Direction of travel, clockwise from north, in `[0, 360)`.
    pub heading_deg: f64,
    pub image_ref: PathBuf,
    pub width_px: u32,
    pub height_px: u32,
}

macro_rules! label_enum {
    (
        $(#[$meta:meta])*
        $name:ident { $($variant:ident => $token:literal $(| $alias:literal)*),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $token),+
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn parse_token(token: &str) -> Option<Self> {
                let t = token.trim();
                $(
                    if t.eq_ignore_ascii_case($token) $(|| t.eq_ignore_ascii_case($alias))* {
                        return Some($name::$variant);
                    }
                )+
                None
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

label_enum!(Openness {
    Closed => "Closed" | "Closed Structure",
    Partial => "Partial",
    Unclear => "Unclear",
});

label_enum!(Floors {
    One => "One" | "1",
    Two => "Two" | "2",
    Three => "Three" | "3",
    FourPlus => "Four+" | "FourPlus" | "4+",
    Unclear => "Unclear",
});

label_enum!(Vegetation {
    Yes => "Yes",
    No => "No",
});

label_enum!(WallMaterial {
    Metal => "Metal",
    Concrete => "Concrete",
    Brick => "Brick",
    Wood => "Wood",
    Unclear => "Unclear",
});

label_enum!(RoofMaterial {
    Metal => "Metal",
    Concrete => "Concrete",
    Clay => "Clay",
    Tarpaulin => "Tarpaulin",
    Wood => "Wood",
    Unclear => "Unclear",
});

/// The five classification tasks, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Openness,
    Floors,
    Vegetation,
    Wall,
    Roof,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Openness,
        Task::Floors,
        Task::Vegetation,
        Task::Wall,
        Task::Roof,
    ];

    /// Column / config key name.
    pub fn key(self) -> &'static str {
        match self {
            Task::Openness => "openness",
            Task::Floors => "floors",
            Task::Vegetation => "vegetation",
            Task::Wall => "wall",
            Task::Roof => "roof",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Task::Openness => "Structural openness",
            Task::Floors => "Number of floors",
            Task::Vegetation => "Vegetation",
            Task::Wall => "Wall material",
            Task::Roof => "Roofing material",
        }
    }

    pub fn from_key(key: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.key() == key)
    }

    pub fn class_names(self) -> Vec<&'static str> {
        match self {
            Task::Openness => Openness::ALL.iter().map(|c| c.as_str()).collect(),
            Task::Floors => Floors::ALL.iter().map(|c| c.as_str()).collect(),
            Task::Vegetation => Vegetation::ALL.iter().map(|c| c.as_str()).collect(),
            Task::Wall => WallMaterial::ALL.iter().map(|c| c.as_str()).collect(),
            Task::Roof => RoofMaterial::ALL.iter().map(|c| c.as_str()).collect(),
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Task::Openness => Openness::ALL.len(),
            Task::Floors => Floors::ALL.len(),
            Task::Vegetation => Vegetation::ALL.len(),
            Task::Wall => WallMaterial::ALL.len(),
            Task::Roof => RoofMaterial::ALL.len(),
        }
    }

    /// Index of the "Unclear" class, if the task has one.
    pub fn unclear_index(self) -> Option<usize> {
        self.class_names().iter().position(|c| *c == "Unclear")
    }

    /// Parse a class token into its index for this task.
    pub fn parse_class(self, token: &str) -> Option<usize> {
        match self {
            Task::Openness => Openness::parse_token(token).map(Openness::index),
            Task::Floors => Floors::parse_token(token).map(Floors::index),
            Task::Vegetation => Vegetation::parse_token(token).map(Vegetation::index),
            Task::Wall => WallMaterial::parse_token(token).map(WallMaterial::index),
            Task::Roof => RoofMaterial::parse_token(token).map(RoofMaterial::index),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeLabelSet {
    pub building_id: String,
    pub openness: Openness,
    pub floors: Floors,
    pub vegetation: Vegetation,
    pub wall: WallMaterial,
    pub roof: RoofMaterial,
}

impl AttributeLabelSet {
    pub fn class_index(&self, task: Task) -> usize {
        match task {
            Task::Openness => self.openness.index(),
            Task::Floors => self.floors.index(),
            Task::Vegetation => self.vegetation.index(),
            Task::Wall => self.wall.index(),
            Task::Roof => self.roof.index(),
        }
    }

    pub fn class_name(&self, task: Task) -> &'static str {
        match task {
            Task::Openness => self.openness.as_str(),
            Task::Floors => self.floors.as_str(),
            Task::Vegetation => self.vegetation.as_str(),
            Task::Wall => self.wall.as_str(),
            Task::Roof => self.roof.as_str(),
        }
    }

    /// Rebuild from per-task class indices in [`Task::ALL`] order.
    pub fn from_indices(building_id: impl Into<String>, idx: [usize; 5]) -> Option<Self> {
        Some(Self {
            building_id: building_id.into(),
            openness: Openness::from_index(idx[0])?,
            floors: Floors::from_index(idx[1])?,
            vegetation: Vegetation::from_index(idx[2])?,
            wall: WallMaterial::from_index(idx[3])?,
            roof: RoofMaterial::from_index(idx[4])?,
        })
    }

    pub fn indices(&self) -> [usize; 5] {
        Task::ALL.map(|t| self.class_index(t))
    }
}
