"""scikit-learn style wrappers around the pipeline.

``X`` is a :class:`BitemporalScene` (or a ``(t1, t2[, labels])`` tuple)
rather than a feature matrix; predictions are (H, W) change maps.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from . import pipeline
from .config import RunConfig, desk_profile
from .metrics import kappa
from .predictor import scdm_estimates
from .pseudo import difference_image, pca_kmeans_pseudolabel
from .validation import check_is_fitted, check_label_map, check_scene


class PCAKMeansLabeler(BaseEstimator):
    """Pseudo change labels from PCA of difference-magnitude neighborhoods and 2-means."""

    def __init__(self, block: int = 5, n_components: int = 3, seed: int = 0):
        self.block = block
        self.n_components = n_components
        self.seed = seed

    def fit(self, X, y=None):
        scene = check_scene(X)
        pm = pca_kmeans_pseudolabel(difference_image(scene), self.block, self.n_components, self.seed)
        self.labels_ = pm.labels
        self.confidence_ = pm.confidence
        return self

    def predict(self, X) -> np.ndarray:
        # clustering is transductive: predicting refits on the given scene
        return self.fit(X).labels_

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.predict(X)


class DiffusionFeatures(TransformerMixin, BaseEstimator):
    """Stage-1 noise predictor exposed as a patch transformer.

    ``fit`` pretrains on one scene (or a list of scenes); ``transform`` maps
    standardized (N, C, K, K) patches to their concatenated x0 estimates at
    the configured feature timesteps, shape (N, len(timesteps) * C, K, K).
    """

    def __init__(self, config: Optional[RunConfig] = None, condition: str = "T1", seed: int = 0):
        self.config = config
        self.condition = condition
        self.seed = seed

    def _cfg(self) -> RunConfig:
        return (self.config or desk_profile()).override(seed=self.seed)

    def fit(self, X, y=None):
        scenes = [check_scene(s) for s in (X if isinstance(X, list) else [X])]
        cfg = self._cfg()
        self.schedule_ = pipeline.make_schedule(cfg)
        self.predictor_, self.history_ = pipeline.fit_predictor(cfg, scenes, self.schedule_)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "predictor_")
        X = np.asarray(X, dtype=np.float32)
        gen = torch.Generator().manual_seed(pipeline.feature_seed(self._cfg()))
        return scdm_estimates(self.predictor_, X, self.condition, self.schedule_, gen).numpy()


class DiffUCD(ClassifierMixin, BaseEstimator):
    """End-to-end change detector: pseudo labels, optional pretraining, stage 2, full-map inference.

    ``score`` returns Cohen's kappa against the scene labels (or ``y``).
    """

    def __init__(self, config: Optional[RunConfig] = None, variant: str = "full", seed: int = 0):
        self.config = config
        self.variant = variant
        self.seed = seed

    def _cfg(self) -> RunConfig:
        return pipeline.variant_config((self.config or desk_profile()).override(seed=self.seed), self.variant)

    def fit(self, X, y=None, predictor=None):
        """``y`` is ignored (training is unsupervised); ``predictor`` reuses a stage-1 model."""
        scene = check_scene(X)
        cfg = self._cfg()
        self.schedule_ = pipeline.make_schedule(cfg)
        if cfg.head.use_scdm and predictor is None:
            predictor, _ = pipeline.fit_predictor(cfg, [scene], self.schedule_)
        pseudo = pipeline.pseudo_labels(cfg, scene)
        pixels = pipeline.training_pixels(cfg, pseudo)
        self.encoder_, self.head_, self.history_ = pipeline.fit_stage2(cfg, scene, predictor, pixels,
                                                                       self.schedule_)
        self.predictor_ = predictor if cfg.head.use_scdm else None
        self.pseudo_labels_ = pseudo.labels
        self.classes_ = np.array([0, 1])
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "head_")
        scene = check_scene(X)
        cmap = pipeline.predict_map(self._cfg(), scene, self.predictor_, self.encoder_, self.head_,
                                    self.schedule_)
        return cmap.decisions

    def score(self, X, y=None, sample_weight=None) -> float:
        scene = check_scene(X, require_labels=y is None)
        gt = check_label_map(y if y is not None else scene.labels, scene.shape)
        return kappa(self.predict(scene), gt)
