"""scikit-learn style wrapper around the denoiser and flow-matching loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data_io import SlideData
from .denoiser import Denoiser, DenoiserConfig
from .errors import ContractError
from .flow import FlowConfig, fit, sample
from .priors import prior_from_name


def _coords(coords, n: int) -> np.ndarray:
    c = check_array(coords, dtype=np.float64)
    if c.shape != (n, 2):
        raise ValueError(f"coords must have shape ({n}, 2), got {c.shape}")
    return c


def _split(x, y, coords, slide_ids, prefix):
    if slide_ids is None:
        slide_ids = np.zeros(len(x), dtype=int)
    slide_ids = np.asarray(slide_ids)
    if slide_ids.shape != (len(x),):
        raise ValueError("slide_ids must hold one label per row")
    genes = [f"g{i}" for i in range(y.shape[1])]
    slides = []
    for sid in np.unique(slide_ids):
        rows = np.flatnonzero(slide_ids == sid)
        slides.append(SlideData(f"{prefix}{sid}", coords[rows], x[rows], y[rows], genes, normalized=True))
    return slides


class SlideFlowRegressor(RegressorMixin, BaseEstimator):
    """Spatial flow-matching regressor from spot features to expression.

    ``y`` is used as given, so pass log1p-normalised expression. Coordinates
    are passed alongside ``X`` to :meth:`fit` and :meth:`predict`; rows with
    the same ``slide_ids`` label form one slide.
    """

    def __init__(
        self,
        layers=4,
        heads=4,
        hidden=128,
        k=8,
        dropout=0.2,
        time_dim=16,
        steps=5,
        prior="zinb",
        prior_mu=0.2,
        prior_phi=2.0,
        prior_pi=0.5,
        lr=5e-4,
        clip=1.0,
        epochs=100,
        patience=20,
        regions_per_slide=1,
        random_state=0,
    ):
        self.layers = layers
        self.heads = heads
        self.hidden = hidden
        self.k = k
        self.dropout = dropout
        self.time_dim = time_dim
        self.steps = steps
        self.prior = prior
        self.prior_mu = prior_mu
        self.prior_phi = prior_phi
        self.prior_pi = prior_pi
        self.lr = lr
        self.clip = clip
        self.epochs = epochs
        self.patience = patience
        self.regions_per_slide = regions_per_slide
        self.random_state = random_state

    def _flow_config(self) -> FlowConfig:
        return FlowConfig(
            steps=self.steps,
            prior=prior_from_name(self.prior, self.prior_mu, self.prior_phi, self.prior_pi),
            lr=self.lr,
            clip=self.clip,
            epochs=self.epochs,
            patience=self.patience,
            seed=self.random_state,
            log1p_targets=False,
            regions_per_slide=self.regions_per_slide,
        )

    def fit(self, X, y, coords, slide_ids=None, eval_set=None):
        """Train on the given spots.

        ``eval_set`` is an optional ``(X, y, coords[, slide_ids])`` tuple used
        for early stopping; without it the training slides are scored.
        """
        x, y = check_X_y(X, y, multi_output=True, dtype=np.float64, y_numeric=True)
        if y.ndim == 1:
            y = y[:, None]
        c = _coords(coords, len(x))
        if not isinstance(self.random_state, (int, np.integer)):
            raise ValueError("random_state must be an int")
        cfg = self._flow_config()
        train = _split(x, y, c, slide_ids, "train")
        if eval_set is not None:
            vx, vy, vc, *rest = eval_set
            vx, vy = check_X_y(vx, vy, multi_output=True, dtype=np.float64, y_numeric=True)
            if vy.ndim == 1:
                vy = vy[:, None]
            val = _split(vx, vy, _coords(vc, len(vx)), rest[0] if rest else None, "val")
        else:
            val = train
        dcfg = DenoiserConfig(
            n_genes=y.shape[1],
            d_in=x.shape[1],
            layers=self.layers,
            heads=self.heads,
            hidden=self.hidden,
            k=self.k,
            dropout=self.dropout,
            time_dim=self.time_dim,
            seed=self.random_state,
        )
        self.model_, self.report_ = fit(train, val, Denoiser(dcfg), cfg)
        self.n_features_in_ = x.shape[1]
        self.n_outputs_ = y.shape[1]
        return self

    def predict(self, X, coords, random_state=None):
        check_is_fitted(self, "model_")
        x = check_array(X, dtype=np.float64)
        if x.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {x.shape[1]} features, expected {self.n_features_in_}")
        if len(x) < 2:
            raise ContractError("prediction needs at least 2 spots")
        c = _coords(coords, len(x))
        seed = self.random_state if random_state is None else random_state
        return sample(c, x, self.model_, self._flow_config(), np.random.default_rng(seed))

    def score(self, X, y, coords, sample_weight=None):
        return r2_score(y, self.predict(X, coords), sample_weight=sample_weight)
