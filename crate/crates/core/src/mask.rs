use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel classes. The discriminant is the label value stored in masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Background = 0,
    BvgPlus = 1,
    BvgMinus = 2,
    Border = 3,
}

impl Class {
    pub const ALL: [Class; 4] = [Class::Background, Class::BvgPlus, Class::BvgMinus, Class::Border];

    pub fn from_label(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Class::Background),
            1 => Ok(Class::BvgPlus),
            2 => Ok(Class::BvgMinus),
            3 => Ok(Class::Border),
            other => Err(Error::InvalidLabel(other)),
        }
    }

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "background",
            Class::BvgPlus => "bvg+",
            Class::BvgMinus => "bvg-",
            Class::Border => "border",
        }
    }
}

/// The two colony classes that are counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColonyKind {
    BvgPlus,
    BvgMinus,
}

impl ColonyKind {
    pub const ALL: [ColonyKind; 2] = [ColonyKind::BvgPlus, ColonyKind::BvgMinus];

    pub fn class(self) -> Class {
        match self {
            ColonyKind::BvgPlus => Class::BvgPlus,
            ColonyKind::BvgMinus => Class::BvgMinus,
        }
    }
}

/// Per-pixel class map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::LengthMismatch {
                left: labels.len(),
                right: height * width,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&v| v > 3) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> Class {
        Class::from_label(self.labels[y * self.width + x]).expect("validated")
    }

    pub fn set(&mut self, y: usize, x: usize, class: Class) {
        self.labels[y * self.width + x] = class.label();
    }

    pub fn count(&self, class: Class) -> usize {
        self.labels.iter().filter(|&&v| v == class.label()).count()
    }

    pub fn histogram(&self) -> [usize; 4] {
        let mut h = [0; 4];
        for &v in &self.labels {
            h[v as usize] += 1;
        }
        h
    }
}
