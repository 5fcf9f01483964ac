//! Line-oriented dataset index.
//!
//! One sample per line, tab-separated:
//! `sample_id  left  right  disp_left  disp_right  occlusion  style_tag`.
//! Paths are relative to the manifest's directory; `-` marks an absent
//! right disparity. Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::io::{
    read_disparity, read_image_png, read_mask_png, read_to_string, write_bytes, write_disparity,
    write_image_png, write_mask_png, DisparityFormat,
};
use crate::data::rds::StereoSample;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
const HEADER: &str = "# sample_id\tleft\tright\tdisp_left\tdisp_right\tocclusion\tstyle_tag";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub left: PathBuf,
    pub right: PathBuf,
    pub disp_left: PathBuf,
    pub disp_right: Option<PathBuf>,
    pub occlusion: PathBuf,
    pub style_tag: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for line in text.lines() {
            let line_offset = offset;
            offset += line.len() as u64 + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 7 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: line_offset,
                    message: format!("expected 7 tab-separated fields, found {}", fields.len()),
                });
            }
            entries.push(ManifestEntry {
                sample_id: fields[0].to_string(),
                left: fields[1].into(),
                right: fields[2].into(),
                disp_left: fields[3].into(),
                disp_right: (fields[4] != "-").then(|| fields[4].into()),
                occlusion: fields[5].into(),
                style_tag: fields[6].to_string(),
            });
        }
        Ok(Self { entries })
    }

    pub fn render(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for e in &self.entries {
            let right_disp = e
                .disp_right
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.sample_id,
                e.left.display(),
                e.right.display(),
                e.disp_left.display(),
                right_disp,
                e.occlusion.display(),
                e.style_tag
            );
        }
        out
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::Data(format!("no corpus manifest at {}", path.display())));
        }
        Self::parse(&read_to_string(&path)?, &path)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_bytes(&dir.join(MANIFEST_FILE), self.render().as_bytes())
    }
}

/// Writes the sample's files into `dir` and returns its manifest line.
pub fn write_sample(dir: &Path, sample: &StereoSample) -> Result<ManifestEntry> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id = &sample.sample_id;
    let entry = ManifestEntry {
        sample_id: id.clone(),
        left: format!("{id}_left.png").into(),
        right: format!("{id}_right.png").into(),
        disp_left: format!("{id}_disp_left.pfm").into(),
        disp_right: sample
            .disparity_right
            .as_ref()
            .map(|_| format!("{id}_disp_right.pfm").into()),
        occlusion: format!("{id}_occ.png").into(),
        style_tag: sample.style_tag.clone(),
    };
    write_image_png(&sample.left, &dir.join(&entry.left))?;
    write_image_png(&sample.right, &dir.join(&entry.right))?;
    write_disparity(&sample.disparity_left, &dir.join(&entry.disp_left), DisparityFormat::Pfm)?;
    if let (Some(d), Some(p)) = (&sample.disparity_right, &entry.disp_right) {
        write_disparity(d, &dir.join(p), DisparityFormat::Pfm)?;
    }
    write_mask_png(&sample.occlusion_left, &dir.join(&entry.occlusion))?;
    Ok(entry)
}

fn read_disp(path: &Path) -> Result<crate::grid::Grid<f64>> {
    let format = DisparityFormat::from_path(path).unwrap_or(DisparityFormat::Pfm);
    Ok(read_disparity(path, format)?.values)
}

pub fn load_sample(dir: &Path, entry: &ManifestEntry) -> Result<StereoSample> {
    let left = read_image_png(&dir.join(&entry.left))?;
    let right = read_image_png(&dir.join(&entry.right))?;
    if left.dims() != right.dims() {
        return Err(Error::Data(format!("{}: left/right size mismatch", entry.sample_id)));
    }
    let disparity_left = read_disp(&dir.join(&entry.disp_left))?;
    let disparity_right = entry
        .disp_right
        .as_ref()
        .map(|p| read_disp(&dir.join(p)))
        .transpose()?;
    let occlusion_left = read_mask_png(&dir.join(&entry.occlusion))?;
    Ok(StereoSample {
        sample_id: entry.sample_id.clone(),
        left,
        right,
        disparity_left,
        disparity_right,
        occlusion_left,
        style_tag: entry.style_tag.clone(),
    })
}

pub fn load_split(dir: &Path) -> Result<Vec<StereoSample>> {
    let manifest = Manifest::read(dir)?;
    manifest.entries.iter().map(|e| load_sample(dir, e)).collect()
}
