//! Dataset selection from a run config.

use chansel_core::data::{make_synthetic, LabeledImage};

use crate::cifar::{self, Split};
use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Images of one split as configured: a class-balanced CIFAR subset or the
/// synthetic set. The CIFAR test batch serves as the validation split.
pub fn load_images(cfg: &RunConfig, split: Split) -> Result<Vec<LabeledImage>> {
    let d = &cfg.data;
    match d.dataset.variant() {
        Some(variant) => {
            let dir = d.dir.as_ref().ok_or_else(|| {
                Error::config("--data-dir", format!("{} needs a dataset directory (pass --data-dir or set data.dir)", variant.subdir()))
            })?;
            if !dir.is_dir() {
                return Err(Error::config("--data-dir", format!("{} is not a directory", dir.display())));
            }
            let limit = match split {
                Split::Train => d.train_limit,
                Split::Test => d.val_limit,
            };
            cifar::load_split(dir, variant, split, limit)
        }
        None => {
            let per_class = d.synthetic_train_per_class + d.synthetic_val_per_class;
            let all = make_synthetic(d.synthetic_classes, per_class, d.synthetic_side, d.synthetic_seed)?;
            let cut = d.synthetic_train_per_class * d.synthetic_classes;
            Ok(match split {
                Split::Train => all[..cut].to_vec(),
                Split::Test => all[cut..].to_vec(),
            })
        }
    }
}
