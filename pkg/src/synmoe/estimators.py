"""scikit-learn style wrapper around the MoE language model.

``X`` is always an integer array of token sequences ``(n_seqs, seq_len)``.
``fit`` trains next-token prediction; ``transform`` returns the top-1
expert of every token at every layer.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import numeric as nm
from .losses import LossWeights
from .moe import MoeConfig, MoeModel, model_forward
from .trainer import TrainConfig, train
from .validation import check_token_array


class MoeLanguageModel(TransformerMixin, BaseEstimator):
    def __init__(
        self,
        E=8,
        k=2,
        L=4,
        h=32,
        d_ff=32,
        V=None,
        shared_expert=False,
        aux_loss_free=False,
        lb=1e-2,
        z=1e-3,
        sp=2e-3,
        cp=1e-3,
        steps=200,
        batch_tokens=128,
        lr=3e-3,
        weight_decay=0.1,
        eval_seqs=1,
        seed=0,
    ):
        self.E = E
        self.k = k
        self.L = L
        self.h = h
        self.d_ff = d_ff
        self.V = V
        self.shared_expert = shared_expert
        self.aux_loss_free = aux_loss_free
        self.lb = lb
        self.z = z
        self.sp = sp
        self.cp = cp
        self.steps = steps
        self.batch_tokens = batch_tokens
        self.lr = lr
        self.weight_decay = weight_decay
        self.eval_seqs = eval_seqs
        self.seed = seed

    def fit(self, X, y=None):
        X = check_token_array(X, self.V, min_len=2)
        if X.shape[0] < 2:
            raise ValueError("need at least two sequences (one is held out for metrics)")
        V = self.V if self.V is not None else int(X.max()) + 1
        cfg = MoeConfig(E=self.E, k=self.k, L=self.L, h=self.h, d_ff=self.d_ff, V=V, shared_expert=self.shared_expert, aux_loss_free=self.aux_loss_free)
        tc = TrainConfig(
            steps=self.steps,
            batch_tokens=self.batch_tokens,
            lr=self.lr,
            weight_decay=self.weight_decay,
            weights=LossWeights(lb=self.lb, z=self.z, sp=self.sp, cp=self.cp),
            eval_every=max(1, self.steps),
            checkpoint_every=max(1, self.steps),
            eval_seqs=self.eval_seqs,
            seed=self.seed,
        )
        result = train(MoeModel(cfg, self.seed), X, tc)
        self.model_ = result.model
        self.metrics_ = result.metrics
        self.n_features_in_ = X.shape[1]
        self.vocab_size_ = V
        return self

    def _forward(self, X):
        check_is_fitted(self, "model_")
        X = check_token_array(X, self.vocab_size_)
        return X, model_forward(self.model_, X)

    def predict_proba(self, X) -> np.ndarray:
        """Next-token distribution after every position: ``(n_seqs, seq_len, V)``."""
        X, fwd = self._forward(X)
        p = nm.softmax(fwd.logits).data
        return p.reshape(X.shape[0], X.shape[1], -1)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=-1)

    def transform(self, X) -> np.ndarray:
        """Top-1 expert ids ``(n_seqs, seq_len, L)``."""
        X, fwd = self._forward(X)
        top1 = np.stack([o.active[:, 0] for o in fwd.layer_outputs], axis=-1)
        return top1.reshape(X.shape[0], X.shape[1], -1)

    def score(self, X, y=None) -> float:
        """Negative mean next-token cross-entropy (higher is better)."""
        X = check_token_array(X, getattr(self, "vocab_size_", None), min_len=2)
        p = self.predict_proba(X[:, :-1])
        tgt = X[:, 1:]
        picked = np.take_along_axis(p, tgt[..., None], axis=-1)[..., 0]
        return float(np.mean(np.log(np.clip(picked, 1e-300, None))))
