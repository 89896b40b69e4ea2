use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stream {
    Text,
    Image,
}

impl Stream {
    pub const BOTH: [Stream; 2] = [Stream::Text, Stream::Image];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Text => "text",
            Stream::Image => "image",
        }
    }
}

/// Which modalities a sample carries; indexes the prompt bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingType {
    Complete,
    MissingText,
    MissingImage,
}

impl MissingType {
    pub const ALL: [MissingType; 3] =
        [MissingType::Complete, MissingType::MissingText, MissingType::MissingImage];

    /// Routes a pair of presence flags to a missing type.
    pub fn route(text_present: bool, image_present: bool) -> Result<Self> {
        match (text_present, image_present) {
            (true, true) => Ok(MissingType::Complete),
            (false, true) => Ok(MissingType::MissingText),
            (true, false) => Ok(MissingType::MissingImage),
            (false, false) => Err(input_err!("sample has neither text nor image")),
        }
    }

    pub fn has(self, stream: Stream) -> bool {
        !matches!(
            (self, stream),
            (MissingType::MissingText, Stream::Text) | (MissingType::MissingImage, Stream::Image)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            MissingType::Complete => "complete",
            MissingType::MissingText => "missing_text",
            MissingType::MissingImage => "missing_image",
        }
    }
}

impl fmt::Display for MissingType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which modality a missing-rate protocol removes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MissingCase {
    Both,
    TextMissing,
    ImageMissing,
}

impl MissingCase {
    pub const ALL: [MissingCase; 3] = [MissingCase::Both, MissingCase::TextMissing, MissingCase::ImageMissing];

    pub fn name(self) -> &'static str {
        match self {
            MissingCase::Both => "both",
            MissingCase::TextMissing => "text_missing",
            MissingCase::ImageMissing => "image_missing",
        }
    }
}

impl fmt::Display for MissingCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MissingCase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(MissingCase::Both),
            "text_missing" | "text" => Ok(MissingCase::TextMissing),
            "image_missing" | "image" => Ok(MissingCase::ImageMissing),
            _ => Err(Error::Config(format!("unknown missing case `{s}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routing() {
        assert_eq!(MissingType::route(true, true).unwrap(), MissingType::Complete);
        assert_eq!(MissingType::route(false, true).unwrap(), MissingType::MissingText);
        assert_eq!(MissingType::route(true, false).unwrap(), MissingType::MissingImage);
        assert!(matches!(MissingType::route(false, false), Err(Error::Input(_))));
    }

    #[test]
    fn three_missing_types_for_two_modalities() {
        assert_eq!(MissingType::ALL.len(), (1 << 2) - 1);
    }
}
