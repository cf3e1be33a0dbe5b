//! OLAT directory: `manifest.json`, one PFM per LED and a mask PFM.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{read_json, read_pfm, write_json, write_pfm};
use crate::lightstage::{LightStage, OlatSet};
use crate::{Error, Result};

pub const OLAT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OlatManifest {
    pub format_version: u32,
    pub id: String,
    pub subject_id: String,
    pub camera_id: String,
    pub stage: LightStage,
    pub images: Vec<String>,
    pub mask: String,
}

pub fn write_olat_dir(dir: &Path, olat: &OlatSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let names: Vec<String> = (0..olat.images().len()).map(|j| format!("olat_{j:04}.pfm")).collect();
    names
        .par_iter()
        .zip(olat.images())
        .try_for_each(|(name, img)| write_pfm(&dir.join(name), img))?;
    write_pfm(&dir.join("mask.pfm"), olat.mask())?;
    let manifest = OlatManifest {
        format_version: OLAT_FORMAT_VERSION,
        id: olat.id.clone(),
        subject_id: olat.subject_id.clone(),
        camera_id: olat.camera_id.clone(),
        stage: olat.stage().clone(),
        images: names,
        mask: "mask.pfm".into(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_olat_dir(dir: &Path) -> Result<OlatSet> {
    let manifest: OlatManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != OLAT_FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "{}: unsupported OLAT format version {}",
            dir.display(),
            manifest.format_version
        )));
    }
    let images = manifest
        .images
        .par_iter()
        .map(|name| read_pfm(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    let mask = read_pfm(&dir.join(&manifest.mask))?;
    OlatSet::new(
        manifest.id,
        manifest.subject_id,
        manifest.camera_id,
        manifest.stage,
        images,
        mask,
    )
}
