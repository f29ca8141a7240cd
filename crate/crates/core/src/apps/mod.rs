//! The three applications, the synthetic image generator and the
//! benchmark harness.

pub mod bench;
pub mod generator;
pub mod kmeans;
pub mod sigmaclip;
pub mod sourcedetect;

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum App {
    SigmaClip,
    SourceDetect,
    KMeans,
}

impl App {
    pub const ALL: [App; 3] = [App::SigmaClip, App::SourceDetect, App::KMeans];

    pub fn name(self) -> &'static str {
        match self {
            App::SigmaClip => "sigmaclip",
            App::SourceDetect => "sourcedetect",
            App::KMeans => "kmeans",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        App::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::BadParams(format!("unknown application `{s}`")))
    }
}

impl fmt::Display for App {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
