"""scikit-learn compatible wrapper around the ensemble trainer.

Modalities arrive as column blocks of one feature matrix, split according
to ``modality_dims``, so the estimator drops into pipelines, grid search
and cross-validation unchanged.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from . import metrics, tensor as tn
from .engine import TrainConfig, fit_arrays, winner_fraction
from .errors import ConfigError
from .network import build_ensemble, penultimate_features


def split_modalities(X, modality_dims):
    """Column blocks of X, one per modality."""
    dims = [int(d) for d in modality_dims]
    if any(d < 1 for d in dims):
        raise ConfigError("modality dimensions must be positive")
    if sum(dims) != X.shape[1]:
        raise ConfigError(f"modality_dims sum to {sum(dims)} but X has {X.shape[1]} columns")
    edges = np.cumsum([0, *dims])
    return [X[:, a:b] for a, b in zip(edges[:-1], edges[1:])]


class MCLEnsembleClassifier(ClassifierMixin, BaseEstimator):
    """Ensemble of per-modality MLPs trained with a multiple choice learning variant.

    Parameters
    ----------
    modality_dims : sequence of int
        Width of each modality's column block in ``X``.
    variant : {"independent", "smcl", "cmcl", "dmcl", "dmcl-random-teacher"}
    hidden : sequence of int
        Hidden layer widths shared by every modality network.
    temperature, lam, beta, lr, momentum, batch_size, steps
        Training hyperparameters, see :class:`mcl_forge.engine.TrainConfig`.
    modalities : sequence of int or None
        Modalities used at prediction time; ``None`` uses all of them.
    random_state : int
        Seed for initialization, batch order and random teachers.
    """

    def __init__(
        self,
        modality_dims=(16, 16, 16),
        variant="dmcl",
        hidden=(64,),
        temperature=2.0,
        lam=0.5,
        beta=0.75,
        lr=1e-3,
        momentum=0.9,
        batch_size=32,
        steps=2000,
        student_temperature_on=True,
        modalities=None,
        random_state=0,
    ):
        self.modality_dims = modality_dims
        self.variant = variant
        self.hidden = hidden
        self.temperature = temperature
        self.lam = lam
        self.beta = beta
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.steps = steps
        self.student_temperature_on = student_temperature_on
        self.modalities = modalities
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            variant=self.variant,
            temperature=self.temperature,
            lam=self.lam,
            beta=self.beta,
            lr=self.lr,
            momentum=self.momentum,
            batch_size=self.batch_size,
            steps=self.steps,
            seed=int(self.random_state),
            student_temperature_on=self.student_temperature_on,
        ).validate()

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        config = self._config()
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit")
        xs = split_modalities(X, self.modality_dims)
        self.ensemble_ = build_ensemble(
            [x.shape[1] for x in xs], len(self.classes_), tuple(self.hidden), config.variant, config.seed
        )
        self.outcomes_ = fit_arrays(self.ensemble_, xs, self._encoder.transform(y), config)
        self.winner_fraction_ = winner_fraction(self.outcomes_)
        return self

    def _available(self, modalities):
        mods = self.modalities if modalities is None else modalities
        return tuple(range(self.ensemble_.M)) if mods is None else tuple(mods)

    def predict_proba(self, X, modalities=None):
        """Mean class probabilities over the selected modalities.

        Columns of modalities left out are never read.
        """
        check_is_fitted(self, "ensemble_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        xs = split_modalities(X, self.modality_dims)
        return metrics.predict_subset(self.ensemble_, xs, self._available(modalities))

    def predict(self, X, modalities=None):
        return self.classes_[np.argmax(self.predict_proba(X, modalities), axis=1)]

    def oracle_score(self, X, y):
        """Fraction of samples that at least one modality alone classifies correctly."""
        check_is_fitted(self, "ensemble_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        xs = split_modalities(X, self.modality_dims)
        y = self._encoder.transform(y)
        hits = [np.argmax(metrics.modality_probs(self.ensemble_, m, xs[m]), axis=1) == y for m in range(self.ensemble_.M)]
        return float(np.mean(np.any(hits, axis=0)))


class RandomFeatureTransformer(TransformerMixin, BaseEstimator):
    """Penultimate activations of freshly initialized modality networks.

    ``fit`` only records input shapes and draws the random weights; the
    features are the ones the kNN probe classifies.
    """

    def __init__(self, modality_dims=(16, 16, 16), hidden=(64,), n_classes=2, random_state=0):
        self.modality_dims = modality_dims
        self.hidden = hidden
        self.n_classes = n_classes
        self.random_state = random_state

    def fit(self, X, y=None):
        X = validate_data(self, X, dtype=np.float64)
        xs = split_modalities(X, self.modality_dims)
        self.ensemble_ = build_ensemble([x.shape[1] for x in xs], self.n_classes, tuple(self.hidden), "independent", int(self.random_state))
        return self

    def transform(self, X):
        check_is_fitted(self, "ensemble_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        xs = split_modalities(X, self.modality_dims)
        with tn.no_grad():
            feats = [penultimate_features(net, x).data for net, x in zip(self.ensemble_.networks, xs)]
        return np.hstack(feats)
