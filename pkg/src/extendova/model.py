"""Model components: encoder, prototype memory bank, per-class seen/unseen
detector heads, a parametric classifier for the threshold baseline, and the
online/EMA model pair.

The encoder is a two-layer MLP whose output passes through batch
normalization and is then L2-normalized, so every downstream consumer works
with unit-length features and cosine geometry.  The memory bank holds one
unit-norm prototype per known class together with provenance metadata, so
prototypes created for a step's provisional new classes can later be
withdrawn without touching anything older.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .errors import DegenerateInputError, InvariantViolation, StateError
from .numerics import Rng, Tensor
from .numerics import tensor as T

__all__ = [
    "Encoder",
    "ModelPair",
    "MemoryBank",
    "OvaDetector",
    "BaselineClassifier",
    "ema_update",
    "nearest_prototype",
]

_EPS = 1e-12


class Encoder:
    """d_in -> hidden (relu) -> feature_dim -> batchnorm -> unit norm.

    Keeps per-feature running statistics for inference-time normalization
    and a running scalar mean of the pre-normalization feature norm, which
    later anchors the magnitude of synthesized old-class features.
    """

    def __init__(self, d_in: int, cfg: ModelConfig, rng: Rng | None = None):
        self.d_in = d_in
        self.cfg = cfg
        h, d = cfg.hidden_dim, cfg.feature_dim
        if rng is None:
            rng = Rng(0)
        # He-style fan-in scaling
        self.W1 = Tensor(rng.split("w1").normal(size=(d_in, h)) * np.sqrt(2.0 / d_in),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(h), requires_grad=True)
        self.W2 = Tensor(rng.split("w2").normal(size=(h, d)) * np.sqrt(2.0 / h),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(d), requires_grad=True)
        self.bn_gamma = Tensor(np.ones(d), requires_grad=True)
        self.bn_beta = Tensor(np.zeros(d), requires_grad=True)
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)
        self.running_feat_norm = float(np.sqrt(d))

    def params(self) -> list:
        return [self.W1, self.b1, self.W2, self.b2, self.bn_gamma, self.bn_beta]

    def forward_graph(self, x: np.ndarray, update_running: bool = True) -> Tensor:
        """Differentiable train-mode forward over a batch (uses batch BN
        statistics).  Set ``update_running=False`` for pure evaluations of
        the training loss, e.g. under finite differencing."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"expected (B, {self.d_in}) input, got {x.shape}")
        h = T.relu(T.matmul(Tensor(x), self.W1) + self.b1)
        z = T.matmul(h, self.W2) + self.b2
        out, mu, var = T.batchnorm_train(z, self.bn_gamma, self.bn_beta,
                                         eps=self.cfg.bn_eps)
        if update_running:
            m = self.cfg.bn_momentum
            b = x.shape[0]
            # unbiased variance feeds the running estimate
            bessel = b / max(b - 1, 1)
            self.running_mean = (1 - m) * self.running_mean + m * mu
            self.running_var = (1 - m) * self.running_var + m * var * bessel
            norms = np.linalg.norm(out.data, axis=1).mean()
            self.running_feat_norm = ((1 - m) * self.running_feat_norm
                                      + m * float(norms))
        return T.l2norm_rows(out)

    def encode_np(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode features (running BN statistics, no tape)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.d_in:
            raise ValueError(f"expected (*, {self.d_in}) input, got {x.shape}")
        h = np.maximum(x @ self.W1.data + self.b1.data, 0.0)
        z = h @ self.W2.data + self.b2.data
        zhat = (z - self.running_mean) / np.sqrt(self.running_var + self.cfg.bn_eps)
        out = self.bn_gamma.data * zhat + self.bn_beta.data
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        if np.any(norms < _EPS):
            raise DegenerateInputError("encoder produced a zero feature")
        out = out / norms
        return out[0] if single else out

    def encode(self, x: np.ndarray, mode: str = "infer") -> np.ndarray:
        if mode == "infer":
            return self.encode_np(x)
        if mode == "train":
            x = np.asarray(x, dtype=np.float64)
            single = x.ndim == 1
            out = self.forward_graph(x[None, :] if single else x).data
            return out[0] if single else out
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")

    def state_dict(self) -> dict:
        return {
            "W1": self.W1.data.tolist(), "b1": self.b1.data.tolist(),
            "W2": self.W2.data.tolist(), "b2": self.b2.data.tolist(),
            "bn_gamma": self.bn_gamma.data.tolist(),
            "bn_beta": self.bn_beta.data.tolist(),
            "running_mean": self.running_mean.tolist(),
            "running_var": self.running_var.tolist(),
            "running_feat_norm": self.running_feat_norm,
        }

    def load_state_dict(self, d: dict) -> None:
        self.W1.data = np.asarray(d["W1"], dtype=np.float64)
        self.b1.data = np.asarray(d["b1"], dtype=np.float64)
        self.W2.data = np.asarray(d["W2"], dtype=np.float64)
        self.b2.data = np.asarray(d["b2"], dtype=np.float64)
        self.bn_gamma.data = np.asarray(d["bn_gamma"], dtype=np.float64)
        self.bn_beta.data = np.asarray(d["bn_beta"], dtype=np.float64)
        self.running_mean = np.asarray(d["running_mean"], dtype=np.float64)
        self.running_var = np.asarray(d["running_var"], dtype=np.float64)
        self.running_feat_norm = float(d["running_feat_norm"])

    def copy(self) -> "Encoder":
        other = Encoder(self.d_in, self.cfg)
        other.load_state_dict(self.state_dict())
        return other


class ModelPair:
    """Gradient-trained online encoder plus its smoothed EMA twin.

    The EMA model is what identification and final evaluation see; BN
    running statistics are copied verbatim from the online model rather
    than averaged, since averaging two normalization regimes is neither."""

    def __init__(self, online: Encoder):
        self.online = online
        self.ema = online.copy()

    def state_dict(self) -> dict:
        return {"online": self.online.state_dict(), "ema": self.ema.state_dict()}

    def load_state_dict(self, d: dict) -> None:
        self.online.load_state_dict(d["online"])
        self.ema.load_state_dict(d["ema"])


def ema_update(pair: ModelPair, alpha: float) -> None:
    """p_ema <- alpha * p_ema + (1 - alpha) * p_online, per parameter.

    alpha = 0 makes the EMA track the online model exactly; alpha close to
    1 updates it slowly.  Each EMA coordinate stays inside the interval
    spanned by its own history and the online values it has seen.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    o, e = pair.online, pair.ema
    for pe, po in zip(e.params(), o.params()):
        pe.data = alpha * pe.data + (1.0 - alpha) * po.data
    e.running_mean = o.running_mean.copy()
    e.running_var = o.running_var.copy()
    e.running_feat_norm = o.running_feat_norm


class MemoryBank:
    """Unit-norm class prototypes with provenance metadata.

    Classes are addressed by a dense integer id; ``active`` rows take part
    in similarity computations, rows deactivated by a withdrawal keep
    their storage but are excluded everywhere.
    """

    ORIGIN_INITIAL = "initial"
    ORIGIN_EXTENDED = "extended"

    def __init__(self, feature_dim: int):
        self.feature_dim = feature_dim
        self.weights = np.zeros((0, feature_dim))
        self.created_at_step: list = []
        self.origin: list = []
        self.active: list = []
        self.current_step = 0

    def __len__(self) -> int:
        return self.weights.shape[0]

    def set_step(self, step: int) -> None:
        self.current_step = int(step)

    def active_ids(self) -> np.ndarray:
        return np.asarray([i for i, a in enumerate(self.active) if a],
                          dtype=np.intp)

    def _check_unit(self, w: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(w, axis=1, keepdims=True)
        if np.any(norms < _EPS):
            raise DegenerateInputError("prototype with (near-)zero norm")
        return w / norms

    def extend(self, init_features: np.ndarray, origin: str | None = None) -> int:
        """Append one prototype per row of ``init_features`` (normalized).
        Returns the id of the first appended class; appending zero rows is
        a no-op returning the next id."""
        init_features = np.asarray(init_features, dtype=np.float64)
        if init_features.ndim != 2 or init_features.shape[1] != self.feature_dim:
            raise ValueError("init features must be (n, feature_dim)")
        first = len(self)
        if init_features.shape[0] == 0:
            return first
        w = self._check_unit(init_features)
        self.weights = np.vstack([self.weights, w])
        n = init_features.shape[0]
        self.created_at_step.extend([self.current_step] * n)
        self.origin.extend([origin or self.ORIGIN_EXTENDED] * n)
        self.active.extend([True] * n)
        return first

    def remove(self, ids) -> None:
        """Withdraw prototypes created for this step's provisional classes.

        Only ids with extended origin and created in the current step may
        be removed; anything else is refused."""
        for cid in ids:
            cid = int(cid)
            if not (0 <= cid < len(self)):
                raise ValueError(f"prototype id {cid} out of range")
            if not self.active[cid]:
                raise StateError(f"prototype {cid} is already inactive")
            if (self.origin[cid] != self.ORIGIN_EXTENDED
                    or self.created_at_step[cid] != self.current_step):
                raise StateError(
                    f"prototype {cid} (origin={self.origin[cid]}, "
                    f"step={self.created_at_step[cid]}) is not withdrawable "
                    f"in step {self.current_step}")
        for cid in ids:
            self.active[int(cid)] = False

    def update(self, class_id: int, feature: np.ndarray, momentum: float) -> None:
        """Moving-average update followed by renormalization:
        w <- normalize(momentum * w + (1 - momentum) * f)."""
        class_id = int(class_id)
        if not (0 <= class_id < len(self)) or not self.active[class_id]:
            raise ValueError(f"no active prototype {class_id}")
        if not (0.0 <= momentum <= 1.0):
            raise ValueError("momentum must lie in [0, 1]")
        feature = np.asarray(feature, dtype=np.float64)
        if feature.shape != (self.feature_dim,):
            raise ValueError("feature has wrong shape")
        w = momentum * self.weights[class_id] + (1.0 - momentum) * feature
        n = np.linalg.norm(w)
        if n < _EPS:
            raise DegenerateInputError("prototype update collapsed to zero")
        self.weights[class_id] = w / n

    def similarities(self, features: np.ndarray,
                     restrict_to: np.ndarray | None = None) -> tuple:
        """Cosine similarity of (B, d) unit features against active
        prototypes.  Returns (sims (B, C), ids (C,)) where ids maps columns
        back to class ids."""
        ids = self.active_ids() if restrict_to is None else \
            np.asarray(restrict_to, dtype=np.intp)
        if ids.size == 0:
            raise StateError("memory bank has no active prototypes in range")
        for cid in ids:
            if not self.active[int(cid)]:
                raise StateError(f"prototype {int(cid)} is inactive")
        return features @ self.weights[ids].T, ids

    def check_invariants(self) -> None:
        norms = np.linalg.norm(self.weights, axis=1)
        act = np.asarray(self.active, dtype=bool)
        if np.any(np.abs(norms[act] - 1.0) > 1e-9):
            raise InvariantViolation("active prototype lost unit norm")

    def state_dict(self) -> dict:
        return {"weights": self.weights.tolist(),
                "created_at_step": list(self.created_at_step),
                "origin": list(self.origin),
                "active": list(self.active),
                "current_step": self.current_step}

    @classmethod
    def from_state_dict(cls, d: dict, feature_dim: int) -> "MemoryBank":
        bank = cls(feature_dim)
        bank.weights = np.asarray(d["weights"], dtype=np.float64).reshape(
            (-1, feature_dim))
        bank.created_at_step = [int(v) for v in d["created_at_step"]]
        bank.origin = list(d["origin"])
        bank.active = [bool(v) for v in d["active"]]
        bank.current_step = int(d["current_step"])
        return bank


def nearest_prototype(bank: MemoryBank, features: np.ndarray,
                      restrict_to: np.ndarray | None = None) -> np.ndarray:
    """Most similar active prototype per feature row; ties resolve to the
    lowest class id."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    sims, ids = bank.similarities(features, restrict_to)
    # ids are sorted ascending, argmax takes the first maximum
    order = np.argsort(ids)
    sims = sims[:, order]
    ids = ids[order]
    return ids[np.argmax(sims, axis=1)]


class OvaDetector:
    """One two-logit head per class answering "is this feature mine?".

    The per-class score is the positive entry of a two-way softmax over
    the head's logits.  Heads belonging to earlier steps are frozen; a
    later step may only create and train heads for its own new classes.
    """

    def __init__(self, feature_dim: int):
        self.feature_dim = feature_dim
        self.pos_w = np.zeros((0, feature_dim))
        self.pos_b = np.zeros(0)
        self.neg_w = np.zeros((0, feature_dim))
        self.neg_b = np.zeros(0)
        self.trained: list = []
        self.created_at_step: list = []

    def __len__(self) -> int:
        return self.pos_w.shape[0]

    def extend(self, n: int, step: int, rng: Rng) -> int:
        """Create ``n`` fresh untrained heads; returns first new id."""
        if n < 0:
            raise ValueError("cannot extend by a negative count")
        first = len(self)
        if n == 0:
            return first
        scale = 0.01
        self.pos_w = np.vstack([self.pos_w,
                                scale * rng.split("pw").normal(size=(n, self.feature_dim))])
        self.neg_w = np.vstack([self.neg_w,
                                scale * rng.split("nw").normal(size=(n, self.feature_dim))])
        self.pos_b = np.concatenate([self.pos_b, np.zeros(n)])
        self.neg_b = np.concatenate([self.neg_b, np.zeros(n)])
        self.trained.extend([False] * n)
        self.created_at_step.extend([int(step)] * n)
        return first

    def margins(self, features: np.ndarray, ids: np.ndarray) -> np.ndarray:
        """pos_logit - neg_logit for every feature against every id."""
        ids = np.asarray(ids, dtype=np.intp)
        pos = features @ self.pos_w[ids].T + self.pos_b[ids]
        neg = features @ self.neg_w[ids].T + self.neg_b[ids]
        return pos - neg

    def scores(self, features: np.ndarray, ids: np.ndarray) -> np.ndarray:
        """Two-way softmax positive probability, for trained heads only."""
        ids = np.asarray(ids, dtype=np.intp)
        for cid in ids:
            if not (0 <= cid < len(self)):
                raise ValueError(f"detector head {int(cid)} does not exist")
            if not self.trained[int(cid)]:
                raise StateError(f"detector head {int(cid)} was never trained")
        features = np.atleast_2d(features)
        pos = features @ self.pos_w[ids].T + self.pos_b[ids]
        neg = features @ self.neg_w[ids].T + self.neg_b[ids]
        # explicit two-way softmax, stabilized by the shared max
        m = np.maximum(pos, neg)
        ep = np.exp(pos - m)
        en = np.exp(neg - m)
        return ep / (ep + en)

    def score(self, feature: np.ndarray, class_id: int) -> float:
        return float(self.scores(feature[None, :], np.asarray([class_id]))[0, 0])

    def snapshot(self, ids) -> dict:
        ids = np.asarray(ids, dtype=np.intp)
        return {"pos_w": self.pos_w[ids].copy(), "pos_b": self.pos_b[ids].copy(),
                "neg_w": self.neg_w[ids].copy(), "neg_b": self.neg_b[ids].copy()}

    def state_dict(self) -> dict:
        return {"pos_w": self.pos_w.tolist(), "pos_b": self.pos_b.tolist(),
                "neg_w": self.neg_w.tolist(), "neg_b": self.neg_b.tolist(),
                "trained": list(self.trained),
                "created_at_step": list(self.created_at_step)}

    @classmethod
    def from_state_dict(cls, d: dict, feature_dim: int) -> "OvaDetector":
        det = cls(feature_dim)
        det.pos_w = np.asarray(d["pos_w"], dtype=np.float64).reshape((-1, feature_dim))
        det.neg_w = np.asarray(d["neg_w"], dtype=np.float64).reshape((-1, feature_dim))
        det.pos_b = np.asarray(d["pos_b"], dtype=np.float64)
        det.neg_b = np.asarray(d["neg_b"], dtype=np.float64)
        det.trained = [bool(v) for v in d["trained"]]
        det.created_at_step = [int(v) for v in d["created_at_step"]]
        return det


class BaselineClassifier:
    """Linear classifier over global pseudo ids (threshold baseline).

    Features arrive L2-normalized, so raw inner products live in [-1, 1]
    and a softmax over hundreds of classes would stay near uniform no
    matter how well separated the classes are.  ``scale`` multiplies the
    logits everywhere (training loss, confidence scoring) the way cosine
    classifiers usually do it, so the confidence threshold reads values
    the cross entropy actually calibrated.
    """

    def __init__(self, feature_dim: int, scale: float = 1.0):
        self.feature_dim = feature_dim
        self.scale = float(scale)
        self.W = Tensor(np.zeros((feature_dim, 0)), requires_grad=True)
        self.b = Tensor(np.zeros(0), requires_grad=True)

    @property
    def n_classes(self) -> int:
        return self.W.data.shape[1]

    def extend(self, init_features: np.ndarray) -> int:
        """Append one column per row of ``init_features`` (imprinted from
        class-mean features).  Returns the first new class id."""
        init_features = np.asarray(init_features, dtype=np.float64)
        if init_features.ndim != 2 or init_features.shape[1] != self.feature_dim:
            raise ValueError("init features must be (n, feature_dim)")
        first = self.n_classes
        if init_features.shape[0] == 0:
            return first
        self.W.data = np.hstack([self.W.data, init_features.T])
        self.b.data = np.concatenate([self.b.data, np.zeros(init_features.shape[0])])
        return first

    def logits_np(self, features: np.ndarray) -> np.ndarray:
        return (features @ self.W.data + self.b.data) * self.scale

    def logits_graph(self, features: Tensor) -> Tensor:
        return (T.matmul(features, self.W) + self.b) * self.scale

    def state_dict(self) -> dict:
        return {"W": self.W.data.tolist(), "b": self.b.data.tolist(),
                "scale": self.scale}

    def load_state_dict(self, d: dict) -> None:
        W = np.asarray(d["W"], dtype=np.float64)
        self.W.data = W.reshape((self.feature_dim, -1))
        self.b.data = np.asarray(d["b"], dtype=np.float64)
        self.scale = float(d.get("scale", 1.0))
