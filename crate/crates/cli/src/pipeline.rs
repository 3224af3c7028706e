//! Glue between manifests, inputs and the training/ensembling core.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use cxr_core::dataset::{
    holdout_split, read_feature_file, FeatureLayout, FeatureSet, Manifest, Source, Split, FLIP_SUFFIX,
};
use cxr_core::imageio::{augment_offline, decode_image, hflip, resize_bilinear, tensorize, GrayImage, ImageRecord};
use cxr_core::nn::{build_head, build_head_spatial, build_small_cnn_with, Network};
use cxr_core::optim::{train_into, CheckpointSink, EpochRecord, Samples};
use cxr_core::snapshot::{select_snapshots, Checkpoint, Ensemble, EnsembleInputs};
use cxr_core::{exec, Error, Result, TensorF32};

use crate::config::{FamilyKind, RunConfig};

/// Child seed for a `(parent, stream)` pair.
pub fn derive_seed(parent: u64, stream: u64) -> u64 {
    let mut z = parent ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Resolve a record path against the manifest's directory.
pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Decoded inputs for every family of a run.
pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    images: HashMap<String, GrayImage>,
    features: Vec<Option<FeatureSet>>,
}

impl<'a> Context<'a> {
    /// Decode the manifest's images (when an image family exists) and load
    /// every family's feature file.
    pub fn load(cfg: &'a RunConfig, m: &Manifest, base: &Path) -> Result<Self> {
        let side = cfg.preprocess.size;
        let mut images = HashMap::new();
        if cfg.families.iter().any(|f| f.kind == FamilyKind::SmallCnn) {
            let decoded = exec::map(&m.records, |r| -> Result<(String, GrayImage)> {
                let Source::Path(p) = &r.source else {
                    return Err(Error::Argument(format!("record {:?} has no image path", r.id)));
                };
                let path = resolve(base, p);
                let bytes = std::fs::read(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                let img = decode_image(&bytes).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
                let img =
                    if img.width() == side && img.height() == side { img } else { resize_bilinear(&img, side, side)? };
                Ok((r.id.clone(), img))
            });
            for d in decoded {
                let (id, img) = d?;
                images.insert(id, img);
            }
        }
        let features = cfg
            .families
            .iter()
            .map(|f| match (&f.kind, &f.feature_file) {
                (FamilyKind::FeatureHead, Some(p)) => {
                    let fs = read_feature_file(p)?;
                    let index = fs.index();
                    if let Some(r) = m.records.iter().find(|r| !index.contains_key(r.id.as_str())) {
                        return Err(Error::Validation(format!("{} has no row for {:?}", p.display(), r.id)));
                    }
                    Ok(Some(fs))
                }
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, images, features })
    }

    fn features(&self, family: usize) -> Result<&FeatureSet> {
        self.features[family].as_ref().ok_or_else(|| Error::Argument(format!("family {family} has no feature file")))
    }

    /// Build a fresh, initialized network for `family`.
    pub fn network(&self, family: usize, seed: u64) -> Result<Network<f32>> {
        let dropout = self.cfg.train.dropout;
        let mut net = match self.cfg.families[family].kind {
            FamilyKind::SmallCnn => build_small_cnn_with(dropout)?,
            FamilyKind::FeatureHead => {
                let fs = self.features(family)?;
                match fs.layout {
                    FeatureLayout::Flat => build_head(fs.dim, dropout)?,
                    FeatureLayout::Spatial { channels, .. } => build_head_spatial(channels as usize, dropout)?,
                }
            }
        };
        net.init(seed);
        Ok(net)
    }

    /// Input tensors for `ids` as seen by `family`. A `#flip` id is the
    /// mirrored base image, or its own row in a feature file.
    pub fn inputs(&self, family: usize, ids: &[String]) -> Result<Vec<TensorF32>> {
        match self.cfg.families[family].kind {
            FamilyKind::SmallCnn => ids
                .iter()
                .map(|id| {
                    let (base, flip) = match id.strip_suffix(FLIP_SUFFIX) {
                        Some(b) => (b, true),
                        None => (id.as_str(), false),
                    };
                    let img = self.images.get(base).ok_or_else(|| Error::Argument(format!("no image for {id:?}")))?;
                    if flip {
                        tensorize(&hflip(img), self.cfg.preprocess.size)
                    } else {
                        tensorize(img, self.cfg.preprocess.size)
                    }
                })
                .collect(),
            FamilyKind::FeatureHead => {
                let fs = self.features(family)?;
                let index = fs.index();
                let shape = fs.sample_shape();
                ids.iter()
                    .map(|id| {
                        let row = index
                            .get(id.as_str())
                            .ok_or_else(|| Error::Argument(format!("no feature row for {id:?}")))?;
                        TensorF32::new(shape.clone(), fs.row(*row).to_vec())
                    })
                    .collect()
            }
        }
    }

    /// Training ids for `family`: the records plus their flipped copies
    /// (for features, only where the file carries a `#flip` row).
    pub fn augmented_ids(&self, family: usize, train: &Manifest) -> Result<Vec<String>> {
        match self.cfg.families[family].kind {
            FamilyKind::SmallCnn => {
                let records = train
                    .records
                    .iter()
                    .map(|r| {
                        let mut record = r.clone();
                        record.split = Split::Train;
                        let image = self
                            .images
                            .get(&r.id)
                            .cloned()
                            .ok_or_else(|| Error::Argument(format!("no image for {:?}", r.id)))?;
                        Ok(ImageRecord { record, image })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(augment_offline(records).into_iter().map(|r| r.record.id).collect())
            }
            FamilyKind::FeatureHead => {
                let fs = self.features(family)?;
                let index = fs.index();
                let mut ids: Vec<String> = train.records.iter().map(|r| r.id.clone()).collect();
                for r in &train.records {
                    let flip = format!("{}{FLIP_SUFFIX}", r.id);
                    if index.contains_key(flip.as_str()) {
                        ids.push(flip);
                    }
                }
                Ok(ids)
            }
        }
    }

    fn labels(m: &Manifest, ids: &[String]) -> Result<Vec<u8>> {
        ids.iter()
            .map(|id| {
                let base = id.strip_suffix(FLIP_SUFFIX).unwrap_or(id);
                m.get(base).map(|r| r.label).ok_or_else(|| Error::Argument(format!("no record for {id:?}")))
            })
            .collect()
    }

    /// Train one family on `train` (holding out a validation set when the
    /// family asks for one) and select its snapshot epochs.
    pub fn fit(&self, family: usize, train: &Manifest, seed: u64, sink: &mut dyn CheckpointSink) -> Result<Fit> {
        let spec = &self.cfg.families[family];
        let (fit_on, val) = if spec.holdout > 0 {
            let (t, v) = holdout_split(train, spec.holdout, seed)?;
            (t, Some(v))
        } else {
            (train.clone(), None)
        };
        let train_ids = self.augmented_ids(family, &fit_on)?;
        let samples = Samples::new(self.inputs(family, &train_ids)?, Self::labels(&fit_on, &train_ids)?)?;
        let val_samples = match &val {
            Some(v) => {
                let ids: Vec<String> = v.records.iter().map(|r| r.id.clone()).collect();
                Some(Samples::new(self.inputs(family, &ids)?, Self::labels(v, &ids)?)?)
            }
            None => None,
        };
        let mut net = self.network(family, seed)?;
        let mut tc = self.cfg.train.clone();
        tc.seed = seed;
        let history = train_into(&mut net, &samples, val_samples.as_ref(), &tc, sink)?;
        let selected = select_snapshots(&history, &self.cfg.policy(family))?;
        Ok(Fit {
            history,
            selected,
            train_ids,
            val_ids: val.map(|v| v.records.into_iter().map(|r| r.id).collect()).unwrap_or_default(),
        })
    }

    /// Mean probability over every member, each family fed its own inputs.
    pub fn score(&self, members: &[(usize, Checkpoint)], ids: &[String]) -> Result<Vec<f64>> {
        if members.is_empty() {
            return Err(Error::Argument("ensemble has no members".into()));
        }
        let mut families: Vec<usize> = members.iter().map(|(f, _)| *f).collect();
        families.sort_unstable();
        families.dedup();
        let mut total = vec![0.0f64; ids.len()];
        for f in families {
            let cps: Vec<Checkpoint> = members.iter().filter(|(g, _)| *g == f).map(|(_, c)| c.clone()).collect();
            let ens = Ensemble::from_checkpoints(&cps)?.with_threshold(self.cfg.threshold);
            let x = self.inputs(f, ids)?;
            let inputs = match self.cfg.families[f].kind {
                FamilyKind::SmallCnn => EnsembleInputs { images: Some(&x), features: None },
                FamilyKind::FeatureHead => EnsembleInputs { images: None, features: Some(&x) },
            };
            let pred = ens.predict(&inputs)?;
            for (t, m) in total.iter_mut().zip(&pred.mean) {
                *t += m * cps.len() as f64;
            }
        }
        let n = members.len() as f64;
        Ok(total.into_iter().map(|t| t / n).collect())
    }
}

/// Result of training one family.
#[derive(Debug, Clone)]
pub struct Fit {
    pub history: Vec<EpochRecord>,
    pub selected: Vec<usize>,
    /// Ids trained on, flipped copies included.
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}
