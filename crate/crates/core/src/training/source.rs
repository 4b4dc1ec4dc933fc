use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::dataset::DatasetManifest;
use crate::error::{validation_err, Error, Result};
use crate::tiling::PatchRecord;

/// Indexed access to labeled patch pixels.
pub trait PatchSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, index: usize) -> u8;

    /// Interleaved RGB bytes of patch `index`.
    fn pixels(&self, index: usize) -> Result<Arc<[u8]>>;
}

impl PatchSource for [PatchRecord] {
    fn len(&self) -> usize {
        <[PatchRecord]>::len(self)
    }

    fn label(&self, index: usize) -> u8 {
        self[index].weak_label
    }

    fn pixels(&self, index: usize) -> Result<Arc<[u8]>> {
        Ok(Arc::from(self[index].pixels.as_slice()))
    }
}

impl PatchSource for Vec<PatchRecord> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn label(&self, index: usize) -> u8 {
        self[index].weak_label
    }

    fn pixels(&self, index: usize) -> Result<Arc<[u8]>> {
        self.as_slice().pixels(index)
    }
}

/// A view of selected indices of another source.
pub struct Subset<'a, S: PatchSource + ?Sized> {
    source: &'a S,
    indices: Vec<usize>,
}

impl<'a, S: PatchSource + ?Sized> Subset<'a, S> {
    pub fn new(source: &'a S, indices: Vec<usize>) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= source.len()) {
            return Err(validation_err!(
                "subset index {i} out of range for {} patches",
                source.len()
            ));
        }
        Ok(Self { source, indices })
    }
}

impl<S: PatchSource + ?Sized> PatchSource for Subset<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn label(&self, index: usize) -> u8 {
        self.source.label(self.indices[index])
    }

    fn pixels(&self, index: usize) -> Result<Arc<[u8]>> {
        self.source.pixels(self.indices[index])
    }
}

struct Cache {
    map: HashMap<usize, Arc<[u8]>>,
    order: VecDeque<usize>,
}

/// Patch PNGs listed in a manifest, decoded on first use and kept in a
/// bounded first-in first-out cache.
pub struct DiskPatches {
    paths: Vec<PathBuf>,
    labels: Vec<u8>,
    image_size: usize,
    capacity: usize,
    cache: Mutex<Cache>,
}

impl DiskPatches {
    /// Relative manifest paths are resolved against `root`.
    pub fn new(manifest: &DatasetManifest, root: &Path, image_size: usize, capacity: usize) -> Self {
        let paths = manifest
            .entries()
            .iter()
            .map(|e| {
                let p = Path::new(&e.path);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    root.join(p)
                }
            })
            .collect();
        Self {
            paths,
            labels: manifest.labels(),
            image_size,
            capacity,
            cache: Mutex::new(Cache {
                map: HashMap::new(),
                order: VecDeque::new(),
            }),
        }
    }

    /// Checks that every listed file exists.
    pub fn check_paths(&self) -> Result<()> {
        for p in &self.paths {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "patch image not found"),
                ));
            }
        }
        Ok(())
    }

    fn load(&self, index: usize) -> Result<Arc<[u8]>> {
        let path = &self.paths[index];
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
        if img.width() as usize != self.image_size || img.height() as usize != self.image_size {
            return Err(validation_err!(
                "{} is {}x{}, expected {}x{}",
                path.display(),
                img.width(),
                img.height(),
                self.image_size,
                self.image_size
            ));
        }
        Ok(Arc::from(img.into_raw()))
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("cache lock").map.len()
    }
}

impl PatchSource for DiskPatches {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }

    fn pixels(&self, index: usize) -> Result<Arc<[u8]>> {
        if let Some(hit) = self.cache.lock().expect("cache lock").map.get(&index) {
            return Ok(hit.clone());
        }
        let data = self.load(index)?;
        if self.capacity > 0 {
            let mut cache = self.cache.lock().expect("cache lock");
            if cache.map.insert(index, data.clone()).is_none() {
                cache.order.push_back(index);
                while cache.order.len() > self.capacity {
                    if let Some(old) = cache.order.pop_front() {
                        cache.map.remove(&old);
                    }
                }
            }
        }
        Ok(data)
    }
}
