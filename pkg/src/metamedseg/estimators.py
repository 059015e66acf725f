"""scikit-learn style wrappers around the segmentation pipeline.

These follow the ``fit``/``predict``/``get_params`` conventions so the
pieces compose with tooling such as ``sklearn.base.clone``.  They add no
behaviour of their own beyond input validation.
"""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import meta, segnet
from .data import Volume, normalize_volume, resize_volume
from .errors import DimensionError
from .harness import predict
from .losses import LossSpec, eval_iou
from .seeding import derive_seed


def check_images(images, name="images"):
    """Coerce to a float array shaped ``[N, 1, H, W]``; ``[N, H, W]`` gains a channel."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1 or arr.shape[0] == 0:
        raise DimensionError(f"{name} must be [N,1,H,W] or [N,H,W] with N >= 1, got {np.shape(images)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contain non-finite values")
    return arr


def check_masks(masks, images):
    m = check_images(masks, "masks")
    if m.shape != images.shape:
        raise DimensionError(f"masks {m.shape} do not match images {images.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("masks must be binary")
    return m


class VolumeNormalizer(TransformerMixin, BaseEstimator):
    """Stateless volume preprocessing: non-zero standardisation, then resize."""

    def __init__(self, size=32):
        self.size = size

    def fit(self, volumes, y=None):
        self.n_volumes_in_ = len(volumes)
        return self

    def transform(self, volumes):
        out = []
        for v in volumes:
            if not isinstance(v, Volume):
                raise TypeError(f"expected Volume, got {type(v).__name__}")
            out.append(resize_volume(normalize_volume(v), self.size, self.size))
        return out


class SliceSegmenter(BaseEstimator):
    """Supervised U-Net trained from a given (or fresh) initialisation.

    ``init`` may be a ParamVector, a checkpoint path or ``None`` for a fresh
    network built from ``seed``.
    """

    def __init__(self, init=None, base_width=8, depth=3, epochs=20, lr=0.005, weight_decay=3e-5,
                 batch_size=5, loss="iou", lr_decay=0.7, decay_period=2, seed=0):
        self.init = init
        self.base_width = base_width
        self.depth = depth
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.loss = loss
        self.lr_decay = lr_decay
        self.decay_period = decay_period
        self.seed = seed

    def _initial_params(self):
        arch = segnet.ArchDescriptor(1, self.base_width, self.depth, 1)
        if self.init is None:
            return segnet.build(arch, derive_seed(self.seed, "init"))
        if isinstance(self.init, segnet.ParamVector):
            if self.init.arch != arch:
                raise DimensionError(f"init architecture {self.init.arch} differs from {arch}")
            return self.init.copy()
        return segnet.load_checkpoint(self.init, expected_arch=arch)

    def fit(self, images, masks):
        x = check_images(images)
        y = check_masks(masks, x)
        cfg = meta.SupervisedConfig(epochs=self.epochs, lr=self.lr, lr_decay=self.lr_decay,
                                    decay_period=self.decay_period, weight_decay=self.weight_decay,
                                    batch_size=self.batch_size, loss=LossSpec(self.loss), seed=self.seed)
        self.params_, self.loss_history_ = meta.fine_tune_with_history(self._initial_params(), x, y, cfg)
        return self

    def predict_proba(self, images):
        check_is_fitted(self, "params_")
        return predict(self.params_, check_images(images))

    def predict(self, images, threshold=0.5):
        return (self.predict_proba(images) >= threshold).astype(np.uint8)

    def score(self, images, masks):
        """Mean per-image IoU in percent."""
        x = check_images(images)
        return eval_iou(self.predict_proba(x), check_masks(masks, x))


class MetaInitializer(BaseEstimator):
    """Meta-trains an initialisation on a dict of source datasets."""

    def __init__(self, meta_epochs=100, tasks_per_epoch=5, shots=15, inner_lr=0.01, meta_lr=0.01,
                 inner_epochs=4, update_rule="aw", task_rule="volume", loss="bce", base_width=8, depth=3,
                 seed=0):
        self.meta_epochs = meta_epochs
        self.tasks_per_epoch = tasks_per_epoch
        self.shots = shots
        self.inner_lr = inner_lr
        self.meta_lr = meta_lr
        self.inner_epochs = inner_epochs
        self.update_rule = update_rule
        self.task_rule = task_rule
        self.loss = loss
        self.base_width = base_width
        self.depth = depth
        self.seed = seed

    def fit(self, sources, y=None):
        if not isinstance(sources, dict) or not sources:
            raise ValueError("sources must be a non-empty dict of dataset-id -> SliceDataset")
        cfg = meta.MetaConfig(meta_epochs=self.meta_epochs, tasks_per_epoch=self.tasks_per_epoch,
                              shots=self.shots, inner_lr=self.inner_lr, meta_lr=self.meta_lr,
                              inner_epochs=self.inner_epochs, update_rule=self.update_rule,
                              task_rule=self.task_rule, loss=self.loss, seed=self.seed)
        arch = segnet.ArchDescriptor(1, self.base_width, self.depth, 1)
        self.params_, self.log_ = meta.meta_train(sources, cfg, arch=arch)
        return self

    def make_segmenter(self, **kwargs):
        """A SliceSegmenter starting from the meta-trained parameters."""
        check_is_fitted(self, "params_")
        return SliceSegmenter(init=self.params_, base_width=self.base_width, depth=self.depth,
                              seed=self.seed, **kwargs)
