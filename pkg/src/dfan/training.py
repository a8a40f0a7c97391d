"""Seeded minibatch Adam training of the DFAN head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import ClassSplit, FeatureDataset, SemanticMatrix, validate_split
from .model import ATTENTION_AXES, LOSS_TERMS, ConfigError, DfanParams, compute_losses
from .optim import Adam


@dataclass
class TrainConfig:
    lam: float = 0.1
    beta1: float = 0.5
    beta2: float = 0.5
    gamma: float = 0.0
    epochs: int = 80
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-5
    hidden1: int | None = None
    hidden2: int | None = None
    seed: int = 0
    attention_axis: str = "region"
    normalize_input: bool = False
    bias_learner: bool = True
    shared_predictor: bool = False
    loss_terms: tuple[str, ...] = field(default=LOSS_TERMS)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.beta1 < 0 or self.beta2 < 0 or (self.beta1 == 0 and self.beta2 == 0):
            raise ConfigError(f"invalid combination weights ({self.beta1}, {self.beta2})")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.attention_axis not in ATTENTION_AXES:
            raise ConfigError(f"attention axis must be one of {ATTENTION_AXES}")
        self.loss_terms = tuple(self.loss_terms)
        if not self.loss_terms or set(self.loss_terms) - set(LOSS_TERMS):
            raise ConfigError(f"loss terms must be a non-empty subset of {LOSS_TERMS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_terms"] = list(self.loss_terms)
        return d


def trained_groups(params: DfanParams, terms) -> dict[str, T.Tensor]:
    """Parameters that receive a gradient from the selected loss terms."""
    used = set()
    if "attr" in terms or "cos" in terms:
        used.add("W_l")
    if "cls" in terms:
        used.add("W_g")
    if params.phi is not None and ("attr" in terms or "cls" in terms):
        used.update(k for k in params.named() if k.startswith("phi."))
    groups = params.groups()
    if params.shared and "W_l" in used:
        used.add("W_g")
    return {k: v for k, v in groups.items() if k in used}


def init_params(D: int, M: int, cfg: TrainConfig) -> DfanParams:
    return DfanParams.init(
        D,
        M,
        cfg.hidden1,
        cfg.hidden2,
        bias_learner=cfg.bias_learner,
        shared=cfg.shared_predictor,
        seed=np.random.SeedSequence([cfg.seed, 1]),
    )


def train(
    data: FeatureDataset,
    sm: SemanticMatrix,
    split: ClassSplit,
    cfg: TrainConfig,
    log: Callable[[dict], None] | None = None,
    params: DfanParams | None = None,
) -> tuple[DfanParams, list[dict]]:
    """Minimise the weighted DFAN objective; returns parameters and per-epoch logs.

    Minibatches are drawn from a per-epoch permutation seeded by ``cfg.seed``;
    the last partial batch is kept.
    """
    cfg.validate()
    validate_split(split, sm, data)
    if len(data) == 0:
        raise ConfigError("training set is empty")
    if data.N < 1:
        raise ConfigError("records have no regions")
    if cfg.normalize_input:
        data = data.normalized()
    if params is None:
        params = init_params(data.D, sm.n_attributes, cfg)
    opt = Adam(trained_groups(params, cfg.loss_terms), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sums = dict.fromkeys(("attr", "cls", "cos", "total"), 0.0)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            parts = compute_losses(
                params,
                data.local[idx],
                data.global_[idx],
                data.labels[idx],
                sm,
                split,
                lam=cfg.lam,
                attention_axis=cfg.attention_axis,
                terms=cfg.loss_terms,
            )
            opt.zero_grad()
            parts.total.backward()
            opt.step()
            for k in sums:
                sums[k] += float(getattr(parts, k).item()) * len(idx)
        entry = {"epoch": epoch, "steps": steps_per_epoch}
        entry.update({k: v / n for k, v in sums.items()})
        history.append(entry)
        if log is not None:
            log(entry)
    return params, history
