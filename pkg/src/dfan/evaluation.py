"""Per-class metrics, GZSL reports, ablation tables and coefficient sweeps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import ClassSplit, FeatureDataset, SemanticMatrix, ZSLData
from .estimator import predict_attributes
from .inference import CombineConfig, class_scores, czsl_predict, gzsl_predict
from .model import ConfigError, DfanParams
from .training import TrainConfig, train, trained_groups

DEFAULT_BETA_GRID = tuple(round(0.1 * i, 10) for i in range(11))
DEFAULT_GAMMA_GRID = tuple(round(0.1 * i, 10) for i in range(31)) + (1e9,)
ABLATION_HEADER = ("variant", "U", "S", "H", "acc")


def per_class_accuracies(predictions, labels, classes: Iterable[int]) -> dict[int, Fraction]:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    out = {}
    for c in classes:
        mask = labels == c
        total = int(mask.sum())
        if total == 0:
            raise ValueError(f"class {c} has no samples")
        out[int(c)] = Fraction(int((predictions[mask] == c).sum()), total)
    return out


def per_class_top1(predictions, labels, classes: Iterable[int]) -> float:
    """Macro average of per-class top-1 accuracy, tallied exactly."""
    accs = per_class_accuracies(predictions, labels, classes)
    if not accs:
        raise ValueError("empty class set")
    return float(sum(accs.values(), Fraction(0)) / len(accs))


def harmonic_mean(S: float, U: float) -> float:
    if S < 0 or U < 0:
        raise ValueError(f"accuracies must be non-negative, got S={S}, U={U}")
    if S + U == 0:
        return 0.0
    return 2.0 * S * U / (S + U)


@dataclass
class EvalReport:
    """Accuracies in [0, 1]; ``to_dict`` reports them as percentages."""

    czsl_acc: float
    U: float
    S: float
    H: float
    per_class: dict[str, float]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "czsl_acc": 100.0 * self.czsl_acc,
            "gzsl_u": 100.0 * self.U,
            "gzsl_s": 100.0 * self.S,
            "gzsl_h": 100.0 * self.H,
            "per_class": {k: 100.0 * v for k, v in self.per_class.items()},
            "config": dict(self.config),
        }


@dataclass
class Predictions:
    """Cached attribute predictions for one test set."""

    a_local: np.ndarray
    a_global: np.ndarray
    labels: np.ndarray


def _predict(model, ds: FeatureDataset, attention_axis: str, normalize_input: bool) -> Predictions:
    params = model if isinstance(model, DfanParams) else model.params_
    if normalize_input:
        ds = ds.normalized()
    a_l, a_g = predict_attributes(params, ds.local, ds.global_, attention_axis)
    return Predictions(a_l, a_g, ds.labels)


def report_from_predictions(
    seen: Predictions,
    unseen: Predictions,
    sm: SemanticMatrix,
    split: ClassSplit,
    cfg: CombineConfig,
    echo: Mapping | None = None,
) -> EvalReport:
    s_scores = class_scores(seen.a_local, seen.a_global, sm, cfg)
    u_scores = class_scores(unseen.a_local, unseen.a_global, sm, cfg)
    unseen_classes = sorted(set(unseen.labels.tolist()))
    seen_classes = sorted(set(seen.labels.tolist()))
    czsl = per_class_top1(czsl_predict(u_scores, split), unseen.labels, unseen_classes)
    u_acc = per_class_accuracies(gzsl_predict(u_scores, split, cfg.gamma), unseen.labels, unseen_classes)
    s_acc = per_class_accuracies(gzsl_predict(s_scores, split, cfg.gamma), seen.labels, seen_classes)
    U = float(sum(u_acc.values(), Fraction(0)) / len(u_acc))
    S = float(sum(s_acc.values(), Fraction(0)) / len(s_acc))
    per_class = {sm.class_ids[c]: float(a) for c, a in sorted({**s_acc, **u_acc}.items())}
    config = {"beta1": cfg.beta1, "beta2": cfg.beta2, "gamma": cfg.gamma}
    config.update(echo or {})
    return EvalReport(czsl, U, S, harmonic_mean(S, U), per_class, config)


def _by_role(datasets) -> dict[str, FeatureDataset]:
    if isinstance(datasets, Mapping):
        return dict(datasets)
    return {ds.role: ds for ds in datasets}


def evaluate(
    model,
    datasets,
    split: ClassSplit,
    sm: SemanticMatrix,
    cfg: CombineConfig,
    attention_axis: str = "region",
    normalize_input: bool = False,
    echo: Mapping | None = None,
) -> EvalReport:
    """CZSL accuracy on unseen test data and GZSL U/S/H with calibrated stacking.

    ``model`` is a ``DfanParams`` or a fitted ``DFANClassifier``;
    ``datasets`` maps (or lists datasets carrying) the roles ``test-seen``
    and ``test-unseen``.
    """
    by_role = _by_role(datasets)
    for role in ("test-seen", "test-unseen"):
        if role not in by_role:
            raise ValueError(f"missing dataset role {role!r}")
    seen = _predict(model, by_role["test-seen"], attention_axis, normalize_input)
    unseen = _predict(model, by_role["test-unseen"], attention_axis, normalize_input)
    return report_from_predictions(seen, unseen, sm, split, cfg, echo)


# -- ablations ------------------------------------------------------------------------

MODULE_VARIANTS = {
    "single_predictor": {"shared_predictor": True, "bias_learner": False, "lam": 0.0},
    "two_predictors": {"bias_learner": False, "lam": 0.0},
    "two_predictors_bias": {"lam": 0.0},
    "full": {},
}
LOSS_VARIANTS = {
    "cls_only": {"loss_terms": ("cls",)},
    "attr_only": {"loss_terms": ("attr",)},
    "cls_attr": {"loss_terms": ("attr", "cls")},
    "all": {"loss_terms": ("attr", "cls", "cos")},
}
VARIANTS = {**MODULE_VARIANTS, **LOSS_VARIANTS}
DEFAULT_PLAN = tuple(MODULE_VARIANTS) + tuple(LOSS_VARIANTS)


@dataclass
class AblationRow:
    variant: str
    report: EvalReport
    params: DfanParams
    trained: tuple[str, ...]

    def as_csv_row(self) -> list:
        r = self.report
        return [self.variant, *(round(100.0 * v, 2) for v in (r.U, r.S, r.H, r.czsl_acc))]


def variant_config(name: str, base: TrainConfig) -> TrainConfig:
    try:
        overrides = VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown ablation variant {name!r}; known: {', '.join(VARIANTS)}") from None
    cfg = replace(base, **overrides)
    if name in ("full", "all") and cfg.lam <= 0:
        raise ConfigError(f"variant {name!r} needs a positive cosine-loss weight")
    return cfg


def best_gamma(seen: Predictions, unseen: Predictions, sm, split, cfg: CombineConfig, grid) -> float:
    """Grid value with the highest H (first one on ties)."""
    best, best_h = None, -1.0
    for g in grid:
        h = report_from_predictions(seen, unseen, sm, split, replace(cfg, gamma=g)).H
        if h > best_h:
            best, best_h = g, h
    return best


def run_ablation(
    plan: Sequence[str],
    data: ZSLData,
    base: TrainConfig | None = None,
    gamma_grid: Sequence[float] | None = None,
    log=None,
) -> list[AblationRow]:
    """Train and evaluate each named variant on identical data and seeds.

    With ``gamma_grid`` each row is reported at its own H-maximising gamma
    from the grid, otherwise at ``base.gamma``.
    """
    base = base or TrainConfig()
    configs = [(name, variant_config(name, base)) for name in plan]
    rows = []
    for name, cfg in configs:
        params, _ = train(data.train, data.semantic, data.split, cfg)
        seen = _predict(params, data.test_seen, cfg.attention_axis, cfg.normalize_input)
        unseen = _predict(params, data.test_unseen, cfg.attention_axis, cfg.normalize_input)
        combine = CombineConfig(cfg.beta1, cfg.beta2, cfg.gamma)
        if gamma_grid:
            combine = replace(combine, gamma=best_gamma(seen, unseen, data.semantic, data.split, combine, gamma_grid))
        echo = {"variant": name, "lam": cfg.lam, "seed": cfg.seed, "loss_terms": list(cfg.loss_terms)}
        report = report_from_predictions(seen, unseen, data.semantic, data.split, combine, echo)
        row = AblationRow(name, report, params, tuple(trained_groups(params, cfg.loss_terms)))
        rows.append(row)
        if log is not None:
            log({"variant": name, **report.to_dict()})
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for row in rows:
        w.writerow(row.as_csv_row())
    return buf.getvalue()


# -- sweeps -------------------------------------------------------------------------------


@dataclass
class SweepPoint:
    value: float
    report: EvalReport


def sweep(
    axis: str,
    grid: Sequence[float],
    cfg: TrainConfig,
    data: ZSLData,
    model: DfanParams | None = None,
) -> list[SweepPoint]:
    """Evaluate one trained model across a grid of beta1 (beta2 = 1 - beta1)
    or gamma values. Trains with ``cfg`` when no model is given."""
    if axis not in ("beta", "gamma"):
        raise ConfigError(f"sweep axis must be 'beta' or 'gamma', got {axis!r}")
    grid = list(grid)
    if not grid:
        raise ConfigError("sweep grid is empty")
    if model is None:
        model, _ = train(data.train, data.semantic, data.split, cfg)
    seen = _predict(model, data.test_seen, cfg.attention_axis, cfg.normalize_input)
    unseen = _predict(model, data.test_unseen, cfg.attention_axis, cfg.normalize_input)
    points = []
    for v in grid:
        if axis == "beta":
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"beta1 grid values must lie in [0, 1], got {v}")
            combine = CombineConfig(float(v), 1.0 - float(v), cfg.gamma)
        else:
            combine = CombineConfig(cfg.beta1, cfg.beta2, float(v))
        echo = {"lam": cfg.lam, "seed": cfg.seed}
        points.append(SweepPoint(float(v), report_from_predictions(seen, unseen, data.semantic, data.split, combine, echo)))
    return points


def sweep_csv(axis: str, points: Sequence[SweepPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("beta1" if axis == "beta" else "gamma", "U", "S", "H", "acc"))
    for p in points:
        r = p.report
        w.writerow([p.value, *(round(100.0 * v, 2) for v in (r.U, r.S, r.H, r.czsl_acc))])
    return buf.getvalue()
