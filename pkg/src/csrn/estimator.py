"""Scikit-learn style wrapper around the codec.

``fit`` learns the sampling matrix and reconstruction weights from a set of
images, ``transform`` produces compressed measurements and
``inverse_transform`` reconstructs. The wrapper keeps the whole pipeline
composable with sklearn tooling (``get_params``, cloning, pipelines); the
lower-level modules remain the primary API.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import data, metrics
from .model import Csrn, CsrnConfig
from .optim import LrSchedule
from .tensor import Tensor
from .train import TrainConfig, train


class CsrnCodec(BaseEstimator, TransformerMixin):
    """Learned block compressed-sensing codec with a fit/transform surface."""

    def __init__(self, ratio=0.1, block_size=32, filters=32, rrfm_count=5,
                 recurrences=3, progressive_init=True, use_rrfm=True, use_fcm=True,
                 epochs=100, batch_size=16, learning_rate=5e-4, patch_size=96,
                 augment=True, seed=42):
        self.ratio = ratio
        self.block_size = block_size
        self.filters = filters
        self.rrfm_count = rrfm_count
        self.recurrences = recurrences
        self.progressive_init = progressive_init
        self.use_rrfm = use_rrfm
        self.use_fcm = use_fcm
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patch_size = patch_size
        self.augment = augment
        self.seed = seed

    def _model_config(self) -> CsrnConfig:
        return CsrnConfig(
            ratio=self.ratio, block_size=self.block_size, filters=self.filters,
            rrfm_count=self.rrfm_count, recurrences=self.recurrences,
            progressive_init=self.progressive_init, use_rrfm=self.use_rrfm,
            use_fcm=self.use_fcm,
        )

    def _patches(self, X) -> list[data.Patch]:
        patches: list[data.Patch] = []
        for i, img in enumerate(X):
            luma = data.rgb_to_luma(np.asarray(img, dtype=np.float64))
            patches.extend(data.crop_patches(luma, f"image{i}", size=self.patch_size))
        return data.augment_all(patches) if self.augment else patches

    def fit(self, X, y=None, out_dir: str = "."):
        """Train on an iterable of [0,1] images (2-d luminance or (h,w,3) RGB)."""
        patches = self._patches(X)
        cfg = TrainConfig(
            model=self._model_config(), out_dir=out_dir, epochs=self.epochs,
            batch_size=self.batch_size, seed=self.seed, patch_size=self.patch_size,
            schedule=LrSchedule(base_rate=self.learning_rate),
        )
        self.model_, self.train_log_, self.checkpoint_path_ = train(
            cfg, train_patches=patches, val_patches=patches
        )
        return self

    def _require_fitted(self) -> Csrn:
        model = getattr(self, "model_", None)
        if model is None:
            raise NotFittedError("CsrnCodec is not fitted; call fit() first")
        return model

    def transform(self, X) -> np.ndarray:
        """Measurements for same-shape luminance images, one flat row each."""
        model = self._require_fitted()
        rows = []
        shape = None
        for img in X:
            luma = data.rgb_to_luma(np.asarray(img, dtype=np.float64))
            if shape is None:
                shape = luma.shape
            elif luma.shape != shape:
                raise ValueError("transform expects images of identical shape")
            fm = model.sample(Tensor(luma[None, None].astype(np.float32)))
            rows.append(np.concatenate([g.data.ravel() for g in fm.groups]))
        self.image_shape_ = shape
        return np.stack(rows)

    def inverse_transform(self, Y, image_shape=None) -> np.ndarray:
        """Reconstruct images from rows produced by :meth:`transform`."""
        model = self._require_fitted()
        shape = image_shape or getattr(self, "image_shape_", None)
        if shape is None:
            raise ValueError("pass image_shape or call transform() first")
        h, w = shape
        b = model.config.block_size
        gh, gw = h // b, w // b
        out = []
        for row in np.asarray(Y, dtype=np.float32):
            groups = []
            offset = 0
            for c in model.config.group_channels():
                size = c * gh * gw
                groups.append(Tensor(row[offset : offset + size].reshape(1, c, gh, gw)))
                offset += size
            from .model import MeasurementSet

            _, x_f = model.reconstruct(MeasurementSet(groups, model.config.ratio, b))
            out.append(np.clip(x_f.data[0, 0], 0.0, 1.0))
        return np.stack(out)

    def score(self, X, y=None) -> float:
        """Mean reconstruction PSNR (dB) over the given images."""
        model = self._require_fitted()
        from . import codec

        values = []
        for img in X:
            luma = data.rgb_to_luma(np.asarray(img, dtype=np.float64))
            recon = codec.decode(model, codec.encode(model, luma))
            values.append(metrics.psnr(luma, recon))
        return float(np.mean(values))
