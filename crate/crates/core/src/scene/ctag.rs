//! Object identity tags of the form `<cN,CAM_NAME,u,v>`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::geometry::CameraName;
use crate::error::LmadError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CTag {
    pub index: usize,
    pub cam: CameraName,
    pub u: i64,
    pub v: i64,
}

impl CTag {
    /// Object ids are zero-based; tags count from `c1`.
    pub fn for_object(id: usize, cam: CameraName, u: i64, v: i64) -> Self {
        Self { index: id + 1, cam, u, v }
    }

    pub fn object_id(&self) -> Option<usize> {
        self.index.checked_sub(1)
    }
}

impl fmt::Display for CTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<c{},{},{},{}>", self.index, self.cam.token(), self.u, self.v)
    }
}

impl FromStr for CTag {
    type Err = LmadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || LmadError::Input(format!("malformed c-tag {s:?}"));
        let inner = s.strip_prefix("<c").and_then(|r| r.strip_suffix('>')).ok_or_else(bad)?;
        let parts: Vec<&str> = inner.split(',').collect();
        let [idx, cam, u, v] = parts.as_slice() else { return Err(bad()) };
        Ok(Self {
            index: idx.parse().map_err(|_| bad())?,
            cam: cam.parse().map_err(|_| bad())?,
            u: u.parse().map_err(|_| bad())?,
            v: v.parse().map_err(|_| bad())?,
        })
    }
}

pub fn looks_like_tag(word: &str) -> bool {
    word.starts_with("<c") && word.ends_with('>') && word.contains(',')
}

/// Every whitespace-separated word shaped like a tag, parsed or not.
pub fn tag_words(text: &str) -> Vec<&str> {
    text.split_whitespace().filter(|w| looks_like_tag(w)).collect()
}

/// Tags in `text` that parse; malformed ones are dropped.
pub fn extract_tags(text: &str) -> Vec<CTag> {
    tag_words(text).into_iter().filter_map(|w| w.parse().ok()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_reject() {
        let t: CTag = "<c1,CAM_FRONT,800,450>".parse().unwrap();
        assert_eq!(t, CTag { index: 1, cam: CameraName::Front, u: 800, v: 450 });
        assert_eq!(t.to_string(), "<c1,CAM_FRONT,800,450>");
        assert!("<c1,CAM_SIDE,1,2>".parse::<CTag>().is_err());
        assert!("<c1,CAM_FRONT,1>".parse::<CTag>().is_err());
        assert!("<cx,CAM_FRONT,1,2>".parse::<CTag>().is_err());
    }

    #[test]
    fn extraction_skips_malformed() {
        let text = "see <c2,CAM_BACK,10,20> and <c3,CAM_NOPE,1,1> .";
        assert_eq!(tag_words(text).len(), 2);
        assert_eq!(extract_tags(text).len(), 1);
    }
}
