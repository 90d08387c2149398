"""scikit-learn compatible classifier trained with adaptive-bitwidth quantized SGD."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn
from .accounting import EnergyLedger, param_memory
from .controller import PolicyConfig, fit
from .quant import RoundingMode


class RCTClassifier(ClassifierMixin, BaseEstimator):
    """MLP classifier whose weights are stored only as per-tensor quantized codes.

    Each parameter tensor starts at ``initial_bitwidth`` bits; during
    training its bitwidth is raised when updates start to vanish below the
    tensor's resolution (``gavg < t_min``) and lowered when they are much
    larger (``gavg > t_max``).  ``adaptive=False`` keeps every tensor at
    ``initial_bitwidth``.

    Fitted attributes: ``classes_``, ``n_features_in_``, ``model_``,
    ``history_``, ``bitwidths_``, ``weighted_avg_bitwidth_``, ``energy_``
    and ``loss_curve_``.
    """

    def __init__(self, hidden_layer_sizes=(32, 32), lr=0.1, batch_size=32, epochs=20,
                 initial_bitwidth=8, t_min=1.0, t_max=100.0, k_min=2, k_max=32,
                 interval=None, adaptive=True, rounding="stochastic", act_bits=8,
                 reduction="mean", random_state=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.initial_bitwidth = initial_bitwidth
        self.t_min = t_min
        self.t_max = t_max
        self.k_min = k_min
        self.k_max = k_max
        self.interval = interval
        self.adaptive = adaptive
        self.rounding = rounding
        self.act_bits = act_bits
        self.reduction = reduction
        self.random_state = random_state

    def _policy(self):
        kw = {"k_min": self.k_min, "k_max": self.k_max, "interval": self.interval}
        if not self.adaptive:
            return PolicyConfig.disabled(**kw)
        return PolicyConfig(t_min=self.t_min, t_max=self.t_max, **kw)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        encoder = LabelEncoder().fit(y)
        self.classes_ = encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least 2 classes")
        self.n_features_in_ = X.shape[1]
        targets = encoder.transform(y)

        seed = np.random.SeedSequence(self.random_state).entropy \
            if self.random_state is None else int(self.random_state)
        init_rng, train_rng = (np.random.default_rng(s)
                               for s in np.random.SeedSequence(seed).spawn(2))
        specs = []
        for units in self.hidden_layer_sizes:
            specs += [{"type": "dense", "units": int(units)}, {"type": "relu"}]
        specs.append({"type": "dense", "units": len(self.classes_)})
        model = nn.build_model(specs, (self.n_features_in_,), self.initial_bitwidth,
                               init_rng, self.act_bits)
        ledger = EnergyLedger(act_bits=self.act_bits)
        model, history, losses = fit(
            model, X, targets, lr=self.lr, batch_size=min(self.batch_size, len(X)),
            epochs=self.epochs,
            cfg=self._policy(), rounding=RoundingMode(self.rounding, seed % 2 ** 63),
            rng=train_rng, ledger=ledger, reduction=self.reduction)
        self.model_ = model
        self.history_ = history
        self.bitwidths_ = model.bitwidths()
        self.weighted_avg_bitwidth_ = param_memory(model).weighted_avg_bitwidth
        self.energy_ = ledger
        self.loss_curve_ = losses
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return nn.forward(self.model_, X)[0]

    def predict_proba(self, X):
        return nn.softmax(self._logits(X))

    def predict(self, X):
        labels = self._logits(X).argmax(axis=1)
        return self.classes_[labels]
