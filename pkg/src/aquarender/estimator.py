"""Scikit-learn style facade over the training loop.

SceneReconstructor.fit(dataset) optimizes a voxel radiance field against the
dataset's train split; predict(cameras) renders novel views from the fitted
field. Hyperparameters follow sklearn conventions (set in __init__, never
mutated by fit), so the estimator clones and composes with sklearn tooling.
"""

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from aquarender import config as cfg_mod
from aquarender.metrics import psnr
from aquarender.scene import Dataset, load_dataset
from aquarender.trainer import TrainConfig, render_view, train
from aquarender.validation import check_is_fitted


class SceneReconstructor(BaseEstimator):
    """Fits a voxel radiance field to posed images and renders novel views.

    Parameters mirror the run-config keys; see aquarender.config.DEFAULTS for
    semantics. After fit: `field_` holds the voxel grid, `log_` the training
    history, `config_` the resolved flat config.
    """

    def __init__(self, renderer="single_surface", eta=0.5, base=0.2,
                 normalize_weights=False, robust=False, dgs=False,
                 lr=0.01, iterations=2000, batch_rays=1024,
                 n_coarse=32, n_fine=32, grid_resolution=32, seed=0, threads=1):
        self.renderer = renderer
        self.eta = eta
        self.base = base
        self.normalize_weights = normalize_weights
        self.robust = robust
        self.dgs = dgs
        self.lr = lr
        self.iterations = iterations
        self.batch_rays = batch_rays
        self.n_coarse = n_coarse
        self.n_fine = n_fine
        self.grid_resolution = grid_resolution
        self.seed = seed
        self.threads = threads

    def _resolved_config(self):
        return cfg_mod.resolve(overrides={
            "renderer": self.renderer,
            "renderer.eta": self.eta,
            "renderer.base": self.base,
            "renderer.normalize_weights": self.normalize_weights,
            "robust.enabled": self.robust,
            "dgs.enabled": self.dgs,
            "optim.lr": self.lr,
            "train.iterations": self.iterations,
            "train.batch_rays": self.batch_rays,
            "sampling.coarse": self.n_coarse,
            "sampling.fine": self.n_fine,
            "field.resolution": self.grid_resolution,
            "seed": self.seed,
            "threads": self.threads,
        })

    def fit(self, X, y=None):
        """X: a Dataset or a dataset directory path."""
        dataset = X if isinstance(X, Dataset) else load_dataset(Path(X))
        self.config_ = self._resolved_config()
        tc = TrainConfig.from_run_config(self.config_)
        self.field_, self.log_ = train(tc, dataset, progress=lambda _line: None)
        self.near_, self.far_ = dataset.near, dataset.far
        return self

    def predict(self, X):
        """Render one image per camera in X (list of Camera). Returns (n, h, w, 3)."""
        check_is_fitted(self)
        tc = TrainConfig.from_run_config(self.config_)
        return np.stack([
            render_view(self.field_, cam, self.near_, self.far_, tc.settings(),
                        tc.n_coarse, tc.n_fine)
            for cam in X
        ])

    def score(self, X, y=None, split="test"):
        """Mean full-frame PSNR (dB) over a split of the dataset X."""
        check_is_fitted(self)
        dataset = X if isinstance(X, Dataset) else load_dataset(Path(X))
        preds = self.predict([dataset.cameras[f] for f in dataset.frames(split)])
        return float(np.mean([
            psnr(pred, dataset.images[f])
            for pred, f in zip(preds, dataset.frames(split))
        ]))
