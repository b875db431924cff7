"""scikit-learn compatible front-end."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .heads import DEFAULT_TAU, predict_topk, score
from .structures import LabeledBatch
from .training import LossConfig, TrainConfig, fit, init_params


class PrototypeClassifier(ClassifierMixin, BaseEstimator):
    """Ensemble of conventional, textual-prototype and visual-prototype heads.

    ``bank`` is a frozen :class:`~mmproto.structures.PrototypeBank`; ``fit``
    trains the conventional weights and both projection layers. Class labels
    are category ids ``0..C-1`` of the bank.

    Parameters
    ----------
    bank : PrototypeBank
    mode : {"supervised", "open_vocab"}
        ``open_vocab`` drops the conventional head and trains over base
        categories only.
    heads : tuple of {"con", "text", "vis"}, optional
        Explicit head subset, overriding ``mode``'s default set.
    tau : float
        Logit temperature of the cosine heads.
    """

    def __init__(self, bank=None, mode="supervised", heads=None, tau=DEFAULT_TAU,
                 conventional_normalized=True, loss="bce_sigmoid", gamma=2.0,
                 alpha=0.25, logit_bias=None, optimizer="adam", learning_rate=1e-3,
                 epochs=30, batch_size=256, random_state=0):
        self.bank = bank
        self.mode = mode
        self.heads = heads
        self.tau = tau
        self.conventional_normalized = conventional_normalized
        self.loss = loss
        self.gamma = gamma
        self.alpha = alpha
        self.logit_bias = logit_bias
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            loss=LossConfig(self.loss, self.gamma, self.alpha, self.logit_bias),
            seed=self.random_state,
            mode=self.mode,
            heads=self.heads,
        )

    def fit(self, X, y, X_heldout=None, y_heldout=None):
        if self.bank is None:
            raise ValueError("PrototypeClassifier needs a prototype bank")
        X, y = check_X_y(X, y, dtype=np.float32)
        cfg = self._train_config()
        bank = self.bank
        init = init_params(bank.n_categories, X.shape[1], bank.T.shape[1], bank.V.shape[1],
                           seed=self.random_state, tau=self.tau,
                           conventional_normalized=self.conventional_normalized)
        heldout = None
        if X_heldout is not None:
            heldout = LabeledBatch(check_array(X_heldout, dtype=np.float32), y_heldout)
        self.params_, self.trace_ = fit(init, bank, [LabeledBatch(X, y)], cfg, heldout)
        self.classes_ = np.arange(bank.n_categories)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float32)
        return score(self.params_, self.bank, X, self.mode, self.heads)

    def predict(self, X):
        s = self.decision_function(X)
        return self.classes_[np.argmax(s, axis=1)]

    def predict_topk(self, X, k=5):
        return predict_topk(self.decision_function(X), k)
