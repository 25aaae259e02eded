use std::borrow::Cow;
use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::objtok::{extract_objects, patchify, ObjectCache, TokenizerBackend};
use crate::par;
use crate::scenegen::{load_manifest, ObjectAnnotation, Scene};

/// Where stage-2 object masks come from.
#[derive(Debug, Clone)]
pub enum ObjectSource {
    /// Manifest annotations held in memory.
    Annotations,
    /// Segmentation re-run on the decoded image every epoch.
    Online(TokenizerBackend),
    /// Preprocessed records, re-read and hash-checked every epoch.
    Cache(ObjectCache),
}

/// Training images, patchified once, plus the object source.
#[derive(Debug, Clone)]
pub struct TrainData {
    image_size: Option<usize>,
    patch_size: usize,
    patches: Vec<Vec<f32>>,
    annotations: Vec<Vec<ObjectAnnotation>>,
    png: Vec<Vec<u8>>,
    source: ObjectSource,
}

impl TrainData {
    /// In-memory scenes using their own annotations.
    pub fn from_scenes(scenes: &[Scene], patch_size: usize) -> Result<Self> {
        let patches = par::map_slice(scenes, |s| patchify(&s.image, patch_size).map(|g| g.data().to_vec()))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let size = scenes.first().map(|s| s.image.height());
        if scenes.iter().any(|s| Some(s.image.height()) != size || Some(s.image.width()) != size) {
            return Err(Error::Shape("training images must share one square size".into()));
        }
        Ok(Self {
            image_size: size,
            patch_size,
            patches,
            annotations: scenes.iter().map(|s| s.objects.clone()).collect(),
            png: Vec::new(),
            source: ObjectSource::Annotations,
        })
    }

    /// A generated dataset directory.
    pub fn from_dir(dir: &Path, patch_size: usize, source: ObjectSource) -> Result<Self> {
        let manifest = load_manifest(dir)?;
        if let ObjectSource::Cache(c) = &source {
            if c.index.entries.len() != manifest.entries.len() {
                return Err(Error::Config(format!(
                    "cache holds {} entries, dataset has {}",
                    c.index.entries.len(),
                    manifest.entries.len()
                )));
            }
        }
        let png = par::map_slice(&manifest.entries, |e| {
            let p = dir.join(&e.image_path);
            fs::read(&p).at(&p)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let scenes = manifest.load_scenes(dir)?;
        let mut data = Self::from_scenes(&scenes, patch_size)?;
        data.png = png;
        data.source = source;
        Ok(data)
    }

    pub fn with_source(mut self, source: ObjectSource) -> Self {
        self.source = source;
        self
    }

    pub fn source(&self) -> &ObjectSource {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn image_size(&self) -> Option<usize> {
        self.image_size
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn patches(&self, i: usize) -> &[f32] {
        &self.patches[i]
    }

    pub fn all_annotations(&self) -> &[Vec<ObjectAnnotation>] {
        &self.annotations
    }

    pub fn annotations(&self, i: usize) -> &[ObjectAnnotation] {
        &self.annotations[i]
    }

    /// Object lists for one epoch. Online and cached sources do their full
    /// per-image work on every call.
    pub fn objects_for_epoch(&self) -> Result<Cow<'_, [Vec<ObjectAnnotation>]>> {
        match &self.source {
            ObjectSource::Annotations => Ok(Cow::Borrowed(&self.annotations)),
            ObjectSource::Online(backend) => {
                self.need_png()?;
                let out = par::map_indexed(self.len(), |i| {
                    let image = Image::decode_png(&self.png[i]).map_err(|source| Error::Image {
                        path: format!("<entry {i}>").into(),
                        source,
                    })?;
                    extract_objects(&image, backend, Some(&self.annotations[i]))
                });
                Ok(Cow::Owned(out.into_iter().collect::<Result<_>>()?))
            }
            ObjectSource::Cache(cache) => {
                self.need_png()?;
                let out = par::map_indexed(self.len(), |i| cache.objects(i, &self.png[i]));
                Ok(Cow::Owned(out.into_iter().collect::<Result<_>>()?))
            }
        }
    }

    fn need_png(&self) -> Result<()> {
        if self.png.len() != self.len() {
            return Err(Error::Config(
                "online and cached object sources need a dataset loaded from disk".into(),
            ));
        }
        Ok(())
    }
}
