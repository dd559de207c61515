"""scikit-learn style wrappers around the ModelZoo for plain text lists."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .data import Example, build_vocab
from .layers import ModelConfig, build_model
from .pretrain import PretrainConfig, pretrain_masked
from .training import TrainConfig, encode_dataset, fit, predict


def _examples(X, y=None):
    labels = [None] * len(X) if y is None else list(y)
    return [Example(f"x{i}", str(text), label) for i, (text, label) in enumerate(zip(X, labels))]


class TextClassifier(ClassifierMixin, BaseEstimator):
    """Attention-block sentence classifier; X is a sequence of whitespace-tokenized strings."""

    def __init__(self, hidden_dim=16, n_blocks=1, max_len=16, epochs=10, lr=1e-2,
                 batch_size=16, optimizer="adam", random_state=0):
        self.hidden_dim = hidden_dim
        self.n_blocks = n_blocks
        self.max_len = max_len
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.random_state = random_state

    def fit(self, X, y):
        X = list(X)
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        self.vocab_ = build_vocab(X)
        cfg = ModelConfig(len(self.vocab_), self.hidden_dim, self.n_blocks, self.max_len,
                          max(2, len(self.classes_)), self.random_state)
        batch = encode_dataset(_examples(X, y_idx.tolist()), self.vocab_, self.max_len)
        tc = TrainConfig(self.epochs, self.lr, self.batch_size, self.optimizer, self.epochs,
                         self.random_state)
        self.model_, self.history_ = fit(build_model(cfg), batch, None, tc)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        batch = encode_dataset(_examples(list(X)), self.vocab_, self.max_len)
        return self.classes_[np.asarray(predict(self.model_, batch), dtype=int)]


class MaskedPretrainer(TransformerMixin, BaseEstimator):
    """Masked-token pretraining on fit; transform returns mean-pooled encoder features."""

    def __init__(self, hidden_dim=16, n_blocks=1, max_len=16, steps=300, lr=1e-2,
                 mask_prob=0.15, batch_size=16, random_state=0):
        self.hidden_dim = hidden_dim
        self.n_blocks = n_blocks
        self.max_len = max_len
        self.steps = steps
        self.lr = lr
        self.mask_prob = mask_prob
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y=None):
        X = [str(x) for x in X]
        self.vocab_ = build_vocab(X)
        cfg = ModelConfig(len(self.vocab_), self.hidden_dim, self.n_blocks, self.max_len, 0,
                          self.random_state)
        self.model_ = build_model(cfg)
        pc = PretrainConfig(self.mask_prob, self.steps, self.lr, self.batch_size, self.random_state)
        self.checkpoint_ = pretrain_masked(self.model_, X, self.vocab_, pc)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        batch = encode_dataset(_examples(list(X)), self.vocab_, self.max_len)
        with T.no_grad():
            return self.model_.encode(batch.ids, batch.mask)[1].data.copy()
