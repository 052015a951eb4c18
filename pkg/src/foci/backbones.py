"""Frozen MIL classifier archetypes.

Three small models cover the aggregation regimes the audit distinguishes:

* :class:`AttentionPoolMIL` - gated attention pooling (saturation regime).
* :class:`ClsTransformerMIL` - a CLS token read out after self-attention
  blocks (soft aggregation, headroom regime).
* :class:`HardTopKMIL` - mean of the top-``k_pool`` scored tiles (hard
  selection, conflict regime).

All three share one interface. ``forward(bag, mask, weights)`` runs a masked,
optionally soft-weighted pass; excluded tiles contribute nothing and
``weights`` multiply the projected tile tokens. ``native_ranking(bag)``
returns the model's own per-tile score, higher meaning revealed earlier.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import engine as E
from ._validation import check_bags, check_mask, check_weights, labels_of, stable_order
from .bags import Bag, Dataset
from .engine import Tensor
from .optim import AdamW
from .stats import roc_auc

log = logging.getLogger(__name__)


class TrainingAbort(FloatingPointError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass
class BackboneOutput:
    logits: np.ndarray
    probs: np.ndarray
    scores: np.ndarray  # native ranking score per tile, NaN for excluded tiles


def _uniform(rng, fan_in: int, shape, scale: float = 1.0) -> np.ndarray:
    bound = scale / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Cross-entropy of a ``(1, C)`` logit row against a class index."""
    ls = E.log_softmax(logits)
    onehot = np.zeros(ls.shape)
    onehot[..., label] = 1.0
    return E.neg(E.sum(E.mul(ls, onehot)))


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


class _MILBackbone(ClassifierMixin, BaseEstimator):
    """Shared fitting, prediction and freezing logic."""

    archetype = ""
    activation = "relu"

    # --------------------------------------------------------------- params
    def _init_params(self, rng, d: int, n_classes: int) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def _bias_names(self) -> set[str]:
        raise NotImplementedError

    def _build(self, d: int, n_classes: int) -> None:
        rng = np.random.default_rng(self.seed)
        self.params_ = {k: Tensor(v, requires_grad=True) for k, v in self._init_params(rng, d, n_classes).items()}
        self.n_features_in_ = d
        self.classes_ = np.arange(n_classes)
        self.frozen_ = False

    def freeze(self):
        """Stop gradient tracking; the model becomes read-only."""
        check_is_fitted(self, "params_")
        for p in self.params_.values():
            p.requires_grad = False
            p.grad = None
        self.frozen_ = True
        return self

    def param_checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params_):
            h.update(k.encode())
            h.update(self.params_[k].data.tobytes())
        return h.hexdigest()

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params_.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray], n_classes: int) -> None:
        d = arrays["proj.W"].shape[0]
        self._build(d, n_classes)
        for k, v in arrays.items():
            if k not in self.params_ or self.params_[k].shape != v.shape:
                raise ValueError(f"checkpoint parameter {k!r} does not match the {self.archetype} architecture")
            self.params_[k].data = np.array(v, dtype=np.float64)
        self.freeze()

    # -------------------------------------------------------------- forward
    def project(self, bag: Bag) -> Tensor:
        p = self.params_
        act = E.relu if self.activation == "relu" else E.tanh
        return act(E.add(E.matmul(Tensor(bag.features), p["proj.W"]), p["proj.b"]))

    def _weighted_tokens(self, bag: Bag, weights) -> Tensor:
        t = self.project(bag)
        if weights is None:
            return t
        return E.mul(t, _as_tensor_weights(weights, (bag.n_real, 1)))

    def forward_logits(self, bag: Bag, mask=None, weights=None, *, train: bool = False) -> Tensor:
        """Differentiable ``(1, C)`` logits for one bag."""
        raise NotImplementedError

    def forward(self, bag: Bag, mask=None, weights=None) -> BackboneOutput:
        check_is_fitted(self, "params_")
        excluded = check_mask(mask, bag.n_real)
        weights = check_weights(weights, bag.n_real)
        logits, scores = self._forward_impl(bag, excluded, weights, train=False)
        z = logits.data.reshape(-1)
        s = scores.copy()
        s[excluded] = np.nan
        return BackboneOutput(z.copy(), _softmax_np(z), s)

    def native_ranking(self, bag: Bag) -> np.ndarray:
        """Per-tile native score on the full bag; higher means earlier reveal."""
        check_is_fitted(self, "params_")
        _, scores = self._forward_impl(bag, np.zeros(bag.n_real, dtype=bool), None, train=False)
        return scores

    def _forward_impl(self, bag, excluded, weights, train):
        raise NotImplementedError

    def predict_proba(self, bags, masks=None) -> np.ndarray:
        bags = check_bags(bags, getattr(self, "n_features_in_", None))
        masks = masks if masks is not None else [None] * len(bags)
        return np.stack([self.forward(b, m).probs for b, m in zip(bags, masks)])

    def decision_function(self, bags) -> np.ndarray:
        return self.predict_proba(bags)[:, 1]

    def predict(self, bags) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(bags), axis=1)]

    def score(self, bags, y=None) -> float:
        """ROC AUC of the positive-class probability."""
        bags = check_bags(bags)
        y = labels_of(bags) if y is None else np.asarray(y)
        return roc_auc(self.decision_function(bags), y)

    # ------------------------------------------------------------- training
    def fit(self, bags, y=None, *, val_bags=None):
        """Full-bag cross-entropy pre-training, then freeze.

        A :class:`~foci.bags.Dataset` uses its ``train`` and ``val`` splits.
        ``history_`` holds per-epoch train loss and validation AUC.
        """
        if isinstance(bags, Dataset):
            ds = bags
            bags = ds.split("train") or ds.bags
            if val_bags is None:
                val_bags = ds.split("val") or None
            n_classes = ds.num_classes
        else:
            n_classes = None
        bags = check_bags(bags)
        labels = labels_of(bags) if y is None else np.asarray(y, dtype=np.int64)
        if labels.shape[0] != len(bags):
            raise ValueError("y must have one label per bag")
        n_classes = n_classes or max(2, int(labels.max()) + 1)
        self._build(bags[0].dim, n_classes)
        opt = AdamW(self.params_, lr=self.lr, weight_decay=self.weight_decay, no_decay=self._bias_names())
        rng = np.random.default_rng(self.seed + 1)
        self.history_ = []
        step = 0
        for epoch in range(self.epochs):
            order = rng.permutation(len(bags))
            losses = []
            for start in range(0, len(order), self.batch_size):
                batch = sorted(order[start : start + self.batch_size], key=lambda i: bags[i].id)
                opt.zero_grad()
                for i in batch:
                    logits = self.forward_logits(bags[i], train=True)
                    loss = cross_entropy(logits, int(labels[i]))
                    if not math.isfinite(loss.item()):
                        raise TrainingAbort(f"non-finite loss at step {step}", step)
                    E.backward(loss)
                    losses.append(loss.item())
                opt.step(scale=1.0 / len(batch))
                step += 1
            record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
            if val_bags:
                vb = check_bags(val_bags)
                vy = labels_of(vb)
                if len(set(vy.tolist())) == 2:
                    record["val_auc"] = roc_auc(self.decision_function(vb), vy)
            self.history_.append(record)
            log.info("%s epoch %d %s", self.archetype, epoch, record)
        return self.freeze()


def _as_tensor_weights(weights, shape) -> Tensor:
    w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=np.float64))
    return w if w.shape == shape else E.reshape(w, shape)


def _additive_mask(excluded: np.ndarray) -> np.ndarray:
    return np.where(excluded, -np.inf, 0.0)[None, :]


class AttentionPoolMIL(_MILBackbone):
    """Gated-attention pooling: ``w^T (tanh(V t) * sigmoid(U t))`` logits, softmax, weighted mean."""

    archetype = "attention_pool"

    def __init__(self, hidden=64, epochs=20, lr=1e-4, weight_decay=0.01, batch_size=1, seed=0):
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.seed = seed

    def _init_params(self, rng, d, n_classes):
        h = self.hidden
        return {
            "proj.W": _uniform(rng, d, (d, h)),
            "proj.b": np.zeros((1, h)),
            "attn.V": _uniform(rng, h, (h, h)),
            "attn.bV": np.zeros((1, h)),
            "attn.U": _uniform(rng, h, (h, h)),
            "attn.bU": np.zeros((1, h)),
            "attn.w": _uniform(rng, h, (h, 1)),
            "cls.W": _uniform(rng, h, (h, n_classes)),
            "cls.b": np.zeros((1, n_classes)),
        }

    def _bias_names(self):
        return {"proj.b", "attn.bV", "attn.bU", "cls.b"}

    def attention_logits(self, t: Tensor) -> Tensor:
        p = self.params_
        gate = E.mul(
            E.tanh(E.add(E.matmul(t, p["attn.V"]), p["attn.bV"])),
            E.sigmoid(E.add(E.matmul(t, p["attn.U"]), p["attn.bU"])),
        )
        return E.transpose(E.matmul(gate, p["attn.w"]))  # (1, n)

    def _forward_impl(self, bag, excluded, weights, train):
        p = self.params_
        t = self.project(bag)
        s = self.attention_logits(t)
        alpha = E.softmax(s, mask=_additive_mask(excluded))  # (1, n)
        if weights is not None:
            # soft weights scale each token's share of the pooled mass
            alpha = E.reweight(alpha, _as_tensor_weights(weights, (1, bag.n_real)))
        pooled = E.matmul(alpha, t)
        logits = E.add(E.matmul(pooled, p["cls.W"]), p["cls.b"])
        return logits, s.data.reshape(-1).copy()

    def forward_logits(self, bag, mask=None, weights=None, *, train=False):
        excluded = check_mask(mask, bag.n_real)
        return self._forward_impl(bag, excluded, check_weights(weights, bag.n_real), train)[0]


class ClsTransformerMIL(_MILBackbone):
    """CLS-token transformer without positional encoding.

    Excluded tiles get a ``-inf`` key mask in every block, so nothing attends
    to them. The native ranking is the post-encoder dot product between each
    tile state and the CLS state.
    """

    archetype = "cls_transformer"

    def __init__(self, hidden=64, n_layers=2, n_heads=4, epochs=20, lr=1e-4, weight_decay=0.01, batch_size=1, seed=0):
        self.hidden = hidden
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.seed = seed

    def _init_params(self, rng, d, n_classes):
        h, H = self.hidden, self.n_heads
        if h % H:
            raise ValueError("hidden must be divisible by n_heads")
        dh = h // H
        out = {
            "proj.W": _uniform(rng, d, (d, h)),
            "proj.b": np.zeros((1, h)),
            "cls_token": rng.normal(0.0, 0.5, size=(1, h)),
        }
        depth_scale = 1.0 / math.sqrt(2 * max(1, self.n_layers))
        for layer in range(self.n_layers):
            for name in ("q", "k", "v"):
                # per-head (h, h / H) blocks packed side by side
                out[f"l{layer}.W{name}"] = np.concatenate([_uniform(rng, h, (h, dh)) for _ in range(H)], axis=1)
            out[f"l{layer}.Wo"] = _uniform(rng, h, (h, h), depth_scale)
            out[f"l{layer}.bo"] = np.zeros((1, h))
            out[f"l{layer}.W1"] = _uniform(rng, h, (h, 2 * h))
            out[f"l{layer}.b1"] = np.zeros((1, 2 * h))
            out[f"l{layer}.W2"] = _uniform(rng, 2 * h, (2 * h, h), depth_scale)
            out[f"l{layer}.b2"] = np.zeros((1, h))
        out["cls.W"] = _uniform(rng, h, (h, n_classes))
        out["cls.b"] = np.zeros((1, n_classes))
        return out

    def _bias_names(self):
        return {k for k in self.params_ if k.split(".")[-1] in {"b", "bo", "b1", "b2"}}

    def encode(self, bag, excluded, weights, attention_out: list | None = None) -> Tensor:
        """Final ``(n + 1, h)`` states; row 0 is CLS.

        When ``attention_out`` is a list, each block/head attention matrix is
        appended to it.
        """
        p = self.params_
        x = E.concat([p["cls_token"], self.project(bag)], axis=0)
        # soft weights scale each tile's share of attention as a key; CLS keeps 1
        key_w = None
        if weights is not None:
            key_w = E.concat([Tensor(np.ones(1)), E.reshape(_as_tensor_weights(weights, (bag.n_real,)), (bag.n_real,))], axis=0)
        mask = np.concatenate([[0.0], np.where(excluded, -np.inf, 0.0)])[None, :]
        scale = 1.0 / math.sqrt(self.hidden // self.n_heads)
        for layer in range(self.n_layers):
            q = E.matmul(x, p[f"l{layer}.Wq"])
            k = E.matmul(x, p[f"l{layer}.Wk"])
            v = E.matmul(x, p[f"l{layer}.Wv"])
            heads = E.attention(q, k, v, self.n_heads, mask, scale, attention_out, key_w)
            o = E.add(E.matmul(heads, p[f"l{layer}.Wo"]), p[f"l{layer}.bo"])
            x = E.add(x, o)
            ff = E.tanh(E.add(E.matmul(x, p[f"l{layer}.W1"]), p[f"l{layer}.b1"]))
            x = E.add(x, E.add(E.matmul(ff, p[f"l{layer}.W2"]), p[f"l{layer}.b2"]))
        return x

    def attention_weights(self, bag, mask=None, weights=None) -> list[np.ndarray]:
        """Per-block, per-head ``(n + 1, n + 1)`` attention matrices."""
        check_is_fitted(self, "params_")
        mats: list[np.ndarray] = []
        self.encode(bag, check_mask(mask, bag.n_real), check_weights(weights, bag.n_real), mats)
        return mats

    def _forward_impl(self, bag, excluded, weights, train):
        p = self.params_
        x = self.encode(bag, excluded, weights)
        cls = E.gather_rows(x, [0])
        logits = E.add(E.matmul(cls, p["cls.W"]), p["cls.b"])
        scores = x.data[1:] @ x.data[0]
        return logits, scores

    def forward_logits(self, bag, mask=None, weights=None, *, train=False):
        excluded = check_mask(mask, bag.n_real)
        return self._forward_impl(bag, excluded, check_weights(weights, bag.n_real), train)[0]


class HardTopKMIL(_MILBackbone):
    """Mean of the ``k_pool`` highest-scoring tile tokens.

    Pre-training routes gradients to the scorer through a straight-through
    sigmoid surrogate on the top-k mask; once frozen the mask is a constant.
    """

    archetype = "hard_topk"

    def __init__(self, hidden=64, k_pool=8, epochs=20, lr=1e-4, weight_decay=0.01, batch_size=1, seed=0):
        self.hidden = hidden
        self.k_pool = k_pool
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.seed = seed

    def _init_params(self, rng, d, n_classes):
        h = self.hidden
        return {
            "proj.W": _uniform(rng, d, (d, h)),
            "proj.b": np.zeros((1, h)),
            "score.W": _uniform(rng, h, (h, 1)),
            "score.b": np.zeros((1, 1)),
            "cls.W": _uniform(rng, h, (h, n_classes)),
            "cls.b": np.zeros((1, n_classes)),
        }

    def _bias_names(self):
        return {"proj.b", "score.b", "cls.b"}

    def selected(self, scores: np.ndarray, excluded: np.ndarray) -> np.ndarray:
        """Indices pooled: top ``min(k_pool, included)`` by score, ties by index."""
        order = [i for i in stable_order(scores) if not excluded[i]]
        return np.array(sorted(order[: self.k_pool]), dtype=np.int64)

    def _forward_impl(self, bag, excluded, weights, train):
        p = self.params_
        # the scorer sees raw tokens; weights only scale what gets pooled
        raw = self.project(bag)
        t = raw if weights is None else E.mul(raw, _as_tensor_weights(weights, (bag.n_real, 1)))
        s = E.add(E.matmul(raw, p["score.W"]), p["score.b"])  # (n, 1)
        scores = s.data.reshape(-1).copy()
        sel = self.selected(scores, excluded)
        hard = np.zeros((bag.n_real, 1))
        hard[sel] = 1.0
        if train and not self.frozen_:
            gate = E.straight_through(hard, E.sigmoid(s))
        else:
            gate = Tensor(hard, _checked=True)
        pooled = E.div(E.matmul(E.transpose(gate), t), float(len(sel)))
        logits = E.add(E.matmul(pooled, p["cls.W"]), p["cls.b"])
        return logits, scores

    def forward_logits(self, bag, mask=None, weights=None, *, train=False):
        excluded = check_mask(mask, bag.n_real)
        return self._forward_impl(bag, excluded, check_weights(weights, bag.n_real), train)[0]


ARCHETYPES = {
    AttentionPoolMIL.archetype: AttentionPoolMIL,
    ClsTransformerMIL.archetype: ClsTransformerMIL,
    HardTopKMIL.archetype: HardTopKMIL,
}


def make_backbone(archetype: str, **params) -> _MILBackbone:
    try:
        cls = ARCHETYPES[archetype]
    except KeyError:
        raise ValueError(f"unknown archetype {archetype!r}; choose from {sorted(ARCHETYPES)}") from None
    return cls(**params)
