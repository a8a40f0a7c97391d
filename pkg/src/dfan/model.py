"""The DFAN head over precomputed region features.

Every forward function accepts either a single sample (``Z`` of shape
(N, D), ``p`` of shape (D,)) or a minibatch with a leading batch axis.
Losses over a minibatch are means over its samples.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import ClassSplit, FormatError, LengthError, SemanticMatrix
from .tensor import Tensor

CHECKPOINT_MAGIC = b"DFC1"
_CKPT_HEADER = struct.Struct("<4sIIII")
ATTENTION_AXES = ("region", "attribute")


class ConfigError(ValueError):
    """Invalid hyperparameter or model configuration."""


def default_hidden(D: int) -> tuple[int, int]:
    return max(D // 2, 16), max(D // 4, 16)


@dataclass
class DfanParams:
    """Predictor weights and the bias-learner MLP.

    ``phi`` is a list of ``(weight, bias)`` pairs for the three layers, or
    ``None`` when the bias learner is disabled. With ``shared=True`` the
    local and global predictors are the same tensor.
    """

    W_l: Tensor
    W_g: Tensor
    phi: list[tuple[Tensor, Tensor]] | None

    @property
    def D(self) -> int:
        return self.W_g.shape[0]

    @property
    def M(self) -> int:
        return self.W_g.shape[1]

    @property
    def shared(self) -> bool:
        return self.W_l is self.W_g

    @property
    def hidden(self) -> tuple[int, int]:
        if self.phi is None:
            return 0, 0
        return self.phi[0][0].shape[1], self.phi[1][0].shape[1]

    @property
    def dtype(self):
        return self.W_g.dtype

    def named(self) -> dict[str, Tensor]:
        """Parameters in declaration order (the checkpoint order)."""
        out = {"W_l": self.W_l, "W_g": self.W_g}
        for i, (w, b) in enumerate(self.phi or ()):
            out[f"phi.{i}.weight"] = w
            out[f"phi.{i}.bias"] = b
        return out

    def groups(self) -> dict[str, Tensor]:
        """Distinct trainable tensors; a shared predictor appears once."""
        named = self.named()
        if self.shared:
            named.pop("W_l")
        return named

    @classmethod
    def init(
        cls,
        D: int,
        M: int,
        hidden1: int | None = None,
        hidden2: int | None = None,
        *,
        bias_learner: bool = True,
        shared: bool = False,
        seed=0,
        dtype=np.float32,
    ) -> "DfanParams":
        """Fan-in scaled uniform initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        rng = np.random.default_rng(seed)
        h1d, h2d = default_hidden(D)
        h1 = h1d if hidden1 is None else hidden1
        h2 = h2d if hidden2 is None else hidden2
        if min(D, M) < 1 or (bias_learner and min(h1, h2) < 1):
            raise ConfigError(f"invalid head dimensions D={D}, M={M}, hidden=({h1}, {h2})")

        def uniform(shape, fan_in, name):
            bound = 1.0 / np.sqrt(fan_in)
            return T.parameter(rng.uniform(-bound, bound, shape), name=name, dtype=dtype)

        W_g = uniform((D, M), D, "W_g")
        W_l = W_g if shared else uniform((D, M), D, "W_l")
        phi = None
        if bias_learner:
            phi = []
            for i, (fi, fo) in enumerate([(D, h1), (h1, h2), (h2, M)]):
                phi.append((uniform((fi, fo), fi, f"phi.{i}.weight"), uniform((fo,), fi, f"phi.{i}.bias")))
        return cls(W_l, W_g, phi)

    def astype(self, dtype) -> "DfanParams":
        """Detached copy in ``dtype`` (used by the float64 gradient check)."""
        def cp(t):
            return T.parameter(t.data.astype(dtype), name=t.name, dtype=dtype)

        W_g = cp(self.W_g)
        W_l = W_g if self.shared else cp(self.W_l)
        phi = None if self.phi is None else [(cp(w), cp(b)) for w, b in self.phi]
        return DfanParams(W_l, W_g, phi)


# -- forward pieces ---------------------------------------------------------------


def _as(x, like: DfanParams) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.dtype)


def local_scores(Z, params: DfanParams) -> Tensor:
    """Per-region attribute scores ``Z @ W_l``: (..., N, M)."""
    Z = _as(Z, params)
    if Z.shape[-1] != params.D:
        raise T.DimensionError(f"region features have width {Z.shape[-1]}, predictor expects {params.D}")
    return T.matmul(Z, params.W_l)


def attention_weights(A_l: Tensor, axis: str = "region") -> Tensor:
    """Softmax of the score matrix; by default each attribute column is a
    distribution over regions."""
    if axis == "region":
        return T.softmax_axis(A_l, -2)
    if axis == "attribute":
        return T.softmax_axis(A_l, -1)
    raise ConfigError(f"attention axis must be one of {ATTENTION_AXES}, got {axis!r}")


def attribute_features(Z, W_R: Tensor) -> Tensor:
    """``Z^T @ W_R``: column j is the weighted sum of regions for attribute j."""
    Z = Z if isinstance(Z, Tensor) else Tensor(np.asarray(Z), dtype=W_R.dtype)
    if Z.shape[-2] != W_R.shape[-2]:
        raise T.DimensionError(f"{Z.shape[-2]} regions in features but {W_R.shape[-2]} in weights")
    return T.matmul(T.swap_last(Z), W_R)


def cosine_loss(Zhat: Tensor, eps: float = 1e-12) -> Tensor:
    """Frobenius distance between the cosine Gram matrix of the columns and I.

    Batched input returns the mean over samples.
    """
    Zhat = Zhat if isinstance(Zhat, Tensor) else Tensor(np.asarray(Zhat))
    unit = T.l2_normalize_columns(Zhat, eps, axis=-2)
    gram = T.matmul(T.swap_last(unit), unit)
    eye = np.eye(Zhat.shape[-1], dtype=Zhat.dtype)
    dist = T.frobenius_norm(T.sub(gram, eye), axis=(-2, -1))
    return T.mean(dist) if dist.ndim else dist


def phi_forward(v, params: DfanParams) -> Tensor:
    """linear -> ReLU -> linear -> ReLU -> linear over the last axis."""
    if params.phi is None:
        raise ConfigError("bias learner is disabled for these parameters")
    h = _as(v, params)
    (w1, b1), (w2, b2), (w3, b3) = params.phi
    h = T.relu(T.add(T.matmul(h, w1), b1))
    h = T.relu(T.add(T.matmul(h, w2), b2))
    return T.add(T.matmul(h, w3), b3)


def local_prediction(Zhat: Tensor, params: DfanParams) -> Tensor:
    """Column-wise inner product of W_l with the attribute features, plus the
    bias learner averaged over attribute features: (..., M)."""
    if Zhat.shape[-2:] != params.W_l.shape:
        raise T.DimensionError(f"attribute features {Zhat.shape} do not match W_l {params.W_l.shape}")
    linear = T.sum_(T.mul(Zhat, params.W_l), axis=-2)
    if params.phi is None:
        return linear
    offsets = phi_forward(T.swap_last(Zhat), params)  # (..., M attribute features, M outputs)
    return T.add(linear, T.mean(offsets, axis=-2))


def global_prediction(p, params: DfanParams) -> Tensor:
    p = _as(p, params)
    linear = T.matmul(p, params.W_g)
    if params.phi is None:
        return linear
    return T.add(linear, phi_forward(p, params))


@dataclass
class HeadOutputs:
    a_hat_local: Tensor
    a_hat_global: Tensor
    attention: Tensor
    attr_features: Tensor


def forward(params: DfanParams, Z, p, attention_axis: str = "region") -> HeadOutputs:
    Z = _as(Z, params)
    A_l = local_scores(Z, params)
    W_R = attention_weights(A_l, attention_axis)
    Zhat = attribute_features(Z, W_R)
    return HeadOutputs(local_prediction(Zhat, params), global_prediction(p, params), W_R, Zhat)


# -- losses ---------------------------------------------------------------------------


def seen_targets(y, split: ClassSplit, sm: SemanticMatrix) -> np.ndarray:
    """Map class indices to positions among the seen classes."""
    lookup = {c: i for i, c in enumerate(split.seen)}
    y = np.atleast_1d(np.asarray(y))
    out = np.empty(y.shape, dtype=np.int64)
    for i, c in enumerate(y.tolist()):
        if c not in lookup:
            name = sm.class_ids[c] if 0 <= c < sm.n_classes else c
            raise ValueError(f"class {name!r} is not a seen class")
        out[i] = lookup[c]
    return out


def _semantic_ce(a_hat: Tensor, sm: SemanticMatrix, split: ClassSplit, y) -> Tensor:
    seen_rows = sm.values[list(split.seen)].astype(a_hat.dtype)
    logits = T.matmul(a_hat, seen_rows.T)
    targets = seen_targets(y, split, sm)
    if a_hat.ndim == 1:
        return T.cross_entropy_from_logits(logits, targets[0])
    return T.cross_entropy_from_logits(logits, targets)


def attr_loss(a_hat_local: Tensor, sm: SemanticMatrix, split: ClassSplit, y) -> Tensor:
    """Cross-entropy of the local prediction against the seen-class semantics."""
    return _semantic_ce(a_hat_local, sm, split, y)


def cls_loss(a_hat_global: Tensor, sm: SemanticMatrix, split: ClassSplit, y) -> Tensor:
    """Cross-entropy of the global prediction against the seen-class semantics."""
    return _semantic_ce(a_hat_global, sm, split, y)


def total_loss(attr, cls, cos, lam: float):
    if lam < 0:
        raise ConfigError(f"cosine-loss weight must be >= 0, got {lam}")
    return attr + cls + lam * cos


LOSS_TERMS = ("attr", "cls", "cos")


@dataclass
class LossParts:
    attr: Tensor
    cls: Tensor
    cos: Tensor
    total: Tensor


def compute_losses(
    params: DfanParams,
    Z,
    p,
    y,
    sm: SemanticMatrix,
    split: ClassSplit,
    lam: float = 0.1,
    attention_axis: str = "region",
    terms=LOSS_TERMS,
) -> LossParts:
    """All three losses and their weighted total.

    ``terms`` selects which losses enter the total; excluded terms are still
    evaluated (for logging) but without a gradient path.
    """
    unknown = set(terms) - set(LOSS_TERMS)
    if unknown or not terms:
        raise ConfigError(f"loss terms must be a non-empty subset of {LOSS_TERMS}, got {terms}")
    if lam < 0:
        raise ConfigError(f"cosine-loss weight must be >= 0, got {lam}")
    out = forward(params, Z, p, attention_axis)
    la = attr_loss(out.a_hat_local, sm, split, y)
    lc = cls_loss(out.a_hat_global, sm, split, y)
    lcos = cosine_loss(out.attr_features)
    total = None
    for name, part, w in (("attr", la, 1.0), ("cls", lc, 1.0), ("cos", lcos, lam)):
        if name in terms:
            term = part if w == 1.0 else T.mul(part, w)
            total = term if total is None else T.add(total, term)
    return LossParts(la, lc, lcos, total)


# -- checkpoints ------------------------------------------------------------------------


def save_checkpoint(params: DfanParams, path) -> None:
    h1, h2 = params.hidden
    buf = bytearray(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, params.D, params.M, h1, h2))
    for t in params.named().values():
        buf += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path, dtype=np.float32) -> DfanParams:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise LengthError(f"{path}: header needs {_CKPT_HEADER.size} bytes, file has {len(raw)}")
    magic, D, M, h1, h2 = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    bias = h1 > 0 and h2 > 0
    shapes = [(D, M), (D, M)]
    if bias:
        shapes += [(D, h1), (h1,), (h1, h2), (h2,), (h2, M), (M,)]
    expected = _CKPT_HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != expected:
        raise LengthError(f"{path}: expected {expected} bytes, got {len(raw)}")
    arrays, offset = [], _CKPT_HEADER.size
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(s))
        offset += 4 * n
    ts = [T.parameter(a.astype(dtype), dtype=dtype) for a in arrays]
    phi = [(ts[2], ts[3]), (ts[4], ts[5]), (ts[6], ts[7])] if bias else None
    return DfanParams(ts[0], ts[1], phi)
