"""User summarization: a two-tower clickthrough model whose user tower serves
PC-free user embeddings."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import GROUND_TRUTH_PC, World
from .nn import MLP, sigmoid


class TwoTowerClickModel(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Click predictor with a user arch, an ad arch and an interaction arch.

    ``fit``/``predict_proba`` take rows ``[user_features | ad_features]`` split
    at ``user_dim``; ``transform`` takes user features only and returns the
    user-arch output (the embedding).

    Parameters
    ----------
    user_dim : int
        Number of leading columns that are user-side features.
    user_hidden, ad_hidden, interaction_hidden : tuple of int
        Hidden layer widths of the three arches.
    embedding_dim : int
        Output width of both towers.
    learning_rate, epochs, batch_size, random_state
        Plain mini-batch gradient descent on mean binary cross-entropy.
    warm_start : bool
        Reuse the current weights instead of re-initializing.
    """

    def __init__(self, user_dim=16, user_hidden=(16,), ad_hidden=(), interaction_hidden=(8,),
                 embedding_dim=8, learning_rate=0.1, epochs=20, batch_size=64,
                 random_state=0, warm_start=False):
        self.user_dim = user_dim
        self.user_hidden = user_hidden
        self.ad_hidden = ad_hidden
        self.interaction_hidden = interaction_hidden
        self.embedding_dim = embedding_dim
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.warm_start = warm_start

    # -- construction -----------------------------------------------------
    def _init_arches(self, n_ad_features: int, rng) -> None:
        d = self.embedding_dim
        self.user_arch_ = MLP([self.user_dim, *self.user_hidden, d],
                              ["tanh"] * (len(self.user_hidden) + 1), rng=rng)
        self.ad_arch_ = MLP([n_ad_features, *self.ad_hidden, d],
                            ["tanh"] * (len(self.ad_hidden) + 1), rng=rng)
        self.interaction_arch_ = MLP([2 * d, *self.interaction_hidden, 1], rng=rng)

    @property
    def arches_(self):
        return (self.user_arch_, self.ad_arch_, self.interaction_arch_)

    def _split(self, X):
        return X[:, : self.user_dim], X[:, self.user_dim:]

    # -- math ------------------------------------------------------------
    def _logits(self, X, return_cache=False):
        U, A = self._split(X)
        eu, cu = self.user_arch_.forward(U, True)
        ea, ca = self.ad_arch_.forward(A, True)
        z, ci = self.interaction_arch_.forward(np.hstack([eu, ea]), True)
        z = z[:, 0]
        return (z, (cu, ca, ci)) if return_cache else z

    def loss_and_grad(self, X, y):
        """Mean BCE and its gradient as a flat vector over all arches."""
        z, (cu, ca, ci) = self._logits(X, return_cache=True)
        p = sigmoid(z)
        # log(1 + e^z) - y z, numerically stable
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        dz = ((p - y) / len(y))[:, None]
        gWi, gbi, dcat = self.interaction_arch_.backward(ci, dz)
        d = self.embedding_dim
        gWu, gbu, _ = self.user_arch_.backward(cu, dcat[:, :d])
        gWa, gba, _ = self.ad_arch_.backward(ca, dcat[:, d:])
        return loss, (gWu, gbu), (gWa, gba), (gWi, gbi)

    def get_flat(self):
        return np.concatenate([a.get_flat() for a in self.arches_])

    def set_flat(self, theta):
        i = 0
        for a in self.arches_:
            n = a.get_flat().size
            a.set_flat(theta[i:i + n])
            i += n

    def flat_grad(self, X, y):
        loss, gu, ga, gi = self.loss_and_grad(X, y)
        return loss, np.concatenate([MLP.flatten_grads(*g) for g in (gu, ga, gi)])

    # -- estimator API ---------------------------------------------------
    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_, y = np.unique(y, return_inverse=True)
        if len(self.classes_) != 2:
            raise ValueError("clickthrough data needs both click and no-click labels")
        y = y.astype(float)
        if X.shape[1] <= self.user_dim:
            raise ValueError("X must carry user features followed by ad features")
        rng = np.random.default_rng(self.random_state)
        if not (self.warm_start and hasattr(self, "user_arch_")):
            self._init_arches(X.shape[1] - self.user_dim, rng)
        self.n_features_in_ = X.shape[1]
        self.loss_curve_ = []
        n = len(y)
        for _ in range(int(self.epochs)):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                loss, gu, ga, gi = self.loss_and_grad(X[idx], y[idx])
                total += loss * len(idx)
                for arch, g in zip(self.arches_, (gu, ga, gi)):
                    arch.step(*g, self.learning_rate)
            self.loss_curve_.append(total / n)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "user_arch_")
        X = check_array(X, dtype=float)
        return self._logits(X)

    def predict_proba(self, X):
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]

    def transform(self, X):
        """User embeddings; only the user arch is evaluated."""
        check_is_fitted(self, "user_arch_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.user_dim:
            raise ValueError(f"expected {self.user_dim} user features, got {X.shape[1]}")
        return self.user_arch_.forward(X)

    def to_dict(self) -> dict:
        check_is_fitted(self, "user_arch_")
        return {
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()},
            "classes": self.classes_.tolist(),
            "user_arch": self.user_arch_.to_dict(),
            "ad_arch": self.ad_arch_.to_dict(),
            "interaction_arch": self.interaction_arch_.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TwoTowerClickModel":
        params = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d["params"].items()}
        m = cls(**params)
        m.classes_ = np.asarray(d["classes"])
        m.user_arch_ = MLP.from_dict(d["user_arch"])
        m.ad_arch_ = MLP.from_dict(d["ad_arch"])
        m.interaction_arch_ = MLP.from_dict(d["interaction_arch"])
        m.n_features_in_ = m.user_dim + m.ad_arch_.n_in
        return m


def user_feature_provenance(world: World) -> list[str]:
    d = len(world.users[0].latent_preference)
    m = len(world.users[0].side_features)
    return ["latent-preference"] * d + ["side-noise"] * m


def make_clickthrough(world: World, n_examples: int, rng, noise: float = 0.5):
    """Sample eligible (user, ad) impressions and Bernoulli click labels.

    Click probability is sigmoid(<latent_preference, quality_affinity> + noise).
    Returns ``(X, y)`` with rows ``[user_features | ad_features]``.
    """
    rng = np.random.default_rng(rng)
    assert GROUND_TRUTH_PC not in user_feature_provenance(world)
    elig = world.eligibility()
    pairs_u, pairs_a = np.nonzero(elig)
    pick = rng.integers(0, len(pairs_u), size=n_examples)
    u, a = pairs_u[pick], pairs_a[pick]
    pref = world.user_matrix()
    aff = world.ad_features()
    logit = np.einsum("ij,ij->i", pref[u], aff[a]) + rng.normal(0.0, noise, n_examples)
    y = (rng.random(n_examples) < sigmoid(logit)).astype(int)
    X = np.hstack([world.user_features()[u], aff[a]])
    return X, y


@dataclass
class EmbeddingStore:
    embeddings: dict[int, np.ndarray] = field(default_factory=dict)
    version: int = 0

    def __len__(self):
        return len(self.embeddings)

    def __getitem__(self, user_id: int) -> np.ndarray:
        try:
            return self.embeddings[user_id]
        except KeyError:
            raise KeyError(f"no precomputed embedding for user {user_id}") from None

    def matrix(self, user_ids) -> np.ndarray:
        return np.array([self[u] for u in user_ids])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = len(next(iter(self.embeddings.values()))) if self.embeddings else 0
        w.writerow(["user_id", *(f"e{i}" for i in range(d)), "version"])
        for uid in sorted(self.embeddings):
            w.writerow([uid, *(repr(float(x)) for x in self.embeddings[uid]), self.version])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EmbeddingStore":
        rows = list(csv.reader(io.StringIO(text)))
        store = cls()
        for row in rows[1:]:
            if row:
                store.embeddings[int(row[0])] = np.array([float(x) for x in row[1:-1]])
                store.version = int(row[-1])
        return store


def refresh_store(model: TwoTowerClickModel, user_ids, user_features,
                  previous: EmbeddingStore | None = None) -> EmbeddingStore:
    """Recompute every active user's embedding; users absent from
    ``user_ids`` are dropped and the version stamp advances by one."""
    version = (previous.version if previous is not None else 0) + 1
    emb = model.transform(np.asarray(user_features, dtype=float))
    return EmbeddingStore({int(u): e for u, e in zip(user_ids, emb)}, version)
