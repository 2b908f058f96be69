"""Few-shot image classification with self-supervised auxiliary tasks.

The heavy lifting lives in the native `_core` extension: a reverse-mode
autodiff tensor core, the convolutional feature extractor, cosine/prototype
few-shot heads, the rotation and relative-patch-location pretext tasks, and
the deterministic training/evaluation pipeline. This package adds thin
conveniences (dict configs, path coercion) on top.
"""

import json as _json

from ._core import (
    Dataset,
    EngineError,
    Model,
    extract_patches,
    load_dataset,
    mean_ci95,
    patch_pair_label,
    region_of_pair_label,
    rotate_image,
    synthesize,
)
from ._core import train as _train_json

__all__ = [
    "Dataset",
    "EngineError",
    "Model",
    "extract_patches",
    "load_dataset",
    "mean_ci95",
    "patch_pair_label",
    "region_of_pair_label",
    "rotate_image",
    "synthesize",
    "train",
]


def train(config, out_dir, base_dir=".", status=None):
    """Run a training job and write a checkpoint directory.

    `config` is a dict (or JSON string) with the same `data`/`model`/`train`
    sections the CLI accepts. Relative dataset paths resolve against
    `base_dir`. `status`, if given, receives one progress line per epoch.
    Returns the run record (epochs run, best epoch, validation history,
    config digest, checkpoint path).
    """
    if not isinstance(config, str):
        config = _json.dumps(config)
    return _train_json(config, str(out_dir), str(base_dir), status)
