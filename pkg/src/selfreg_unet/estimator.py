"""scikit-learn compatible wrapper around the UNet and its training loop."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import SegSample
from .losses import IFDConfig, SCRConfig
from .training import TrainConfig, build_model_for, derive_seed, evaluate, predict_masks, train
from .unet import FeatureTap, UNetConfig


def check_images(X, in_channels=None, input_size=None) -> np.ndarray:
    """Validate images and return a float32 array of shape (N, C, H, W).

    A 3-D input is read as single-channel (N, H, W).
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (N, C, H, W) or (N, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("found an empty image array")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinity")
    if in_channels is not None and X.shape[1] != in_channels:
        raise ValueError(f"expected {in_channels} channels, got {X.shape[1]}")
    if input_size is not None and tuple(X.shape[2:]) != tuple(input_size):
        raise ValueError(f"expected spatial size {tuple(input_size)}, got {tuple(X.shape[2:])}")
    return X


def check_masks(y, X=None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 3:
        raise ValueError(f"expected masks of shape (N, H, W), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("masks must hold integer labels")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("mask labels must be non-negative")
    if X is not None and (X.shape[0], *X.shape[2:]) != y.shape:
        raise ValueError(f"masks {y.shape} do not match images {X.shape}")
    return y


def _samples(X, y, prefix):
    return [SegSample(X[i], y[i], f"{prefix}_{i:05d}") for i in range(len(X))]


class SelfRegUNetSegmenter(ClassifierMixin, BaseEstimator):
    """Semantic segmenter trained with Dice+CE plus the SCR and IFD regularisers.

    ``X`` is an image stack (N, C, H, W) or (N, H, W) with H and W divisible
    by 16; ``y`` an integer label stack (N, H, W). ``predict`` returns label
    masks and ``score`` the mean foreground Dice coefficient.
    """

    def __init__(
        self,
        backbone="cnn",
        base_channels=8,
        window_size=4,
        num_classes=None,
        lambda1=0.015,
        lambda2=0.015,
        use_scr=True,
        use_ifd=True,
        epochs=10,
        batch_size=8,
        learning_rate=0.05,
        momentum=0.9,
        weight_decay=1e-4,
        augment=True,
        validation_fraction=0.2,
        random_state=0,
    ):
        self.backbone = backbone
        self.base_channels = base_channels
        self.window_size = window_size
        self.num_classes = num_classes
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.use_scr = use_scr
        self.use_ifd = use_ifd
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.augment = augment
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _train_config(self, in_channels, num_classes, input_size):
        seed = int(self.random_state or 0)
        unet = UNetConfig(
            backbone=self.backbone,
            in_channels=in_channels,
            num_classes=num_classes,
            base_channels=self.base_channels,
            input_size=input_size,
            window_size=self.window_size,
            seed=derive_seed(seed, "model"),
        )
        return TrainConfig(
            unet=unet,
            scr=SCRConfig(self.lambda1, derive_seed(seed, "rcs"), True, self.use_scr),
            ifd=IFDConfig(self.lambda2, 2, self.use_ifd),
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=derive_seed(seed, "train"),
            augment=self.augment,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        y = check_masks(y, X)
        k = self.num_classes or max(int(y.max()) + 1, 2)
        if y.max() >= k:
            raise ValueError(f"mask label {int(y.max())} exceeds num_classes={k}")
        if X_val is None:
            rng = np.random.default_rng(derive_seed(int(self.random_state or 0), "split"))
            perm = rng.permutation(len(X))
            n_val = int(round(self.validation_fraction * len(X))) if len(X) > 1 else 0
            if n_val == 0:
                train_idx = val_idx = perm
            else:
                val_idx, train_idx = perm[:n_val], perm[n_val:]
            X_val, y_val, X, y = X[val_idx], y[val_idx], X[train_idx], y[train_idx]
        else:
            X_val = check_images(X_val, X.shape[1], X.shape[2:])
            y_val = check_masks(y_val, X_val)
        cfg = self._train_config(X.shape[1], k, tuple(X.shape[2:]))
        model = build_model_for(cfg)
        self.model_, self.report_ = train(model, _samples(X, y, "train"), _samples(X_val, y_val, "val"), cfg)
        self.classes_ = np.arange(k)
        self.n_classes_ = k
        self.train_config_ = cfg
        return self

    def _forward(self, X):
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        X = check_images(X, cfg.in_channels, cfg.input_size)
        dtype = next(self.model_.parameters()).dtype
        self.model_.eval()
        return torch.as_tensor(X).to(dtype)

    @torch.no_grad()
    def predict_proba(self, X) -> np.ndarray:
        images = self._forward(X)
        logits, _ = self.model_(images)
        return logits.softmax(dim=1).numpy()

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config.in_channels, self.model_.config.input_size)
        dummy = np.zeros((len(X), *X.shape[2:]), dtype=np.int64)
        return np.stack(predict_masks(self.model_, _samples(X, dummy, "x")))

    def score(self, X, y, sample_weight=None) -> float:
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config.in_channels, self.model_.config.input_size)
        y = check_masks(y, X)
        return evaluate(self.model_, _samples(X, y, "x"), self.n_classes_).mean_dsc

    @torch.no_grad()
    def feature_taps(self, X) -> list[FeatureTap]:
        """All 18 intermediate feature maps for ``X``."""
        _, taps = self.model_(self._forward(X))
        return taps
