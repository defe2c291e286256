"""Limiting values, the three cycle metrics, training, and leave-one-cycle-out runs."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .dataset import FuelCycle, Statepoint, split_train_val
from .engine import backward, masked_mse, no_grad
from .errors import ConfigError, DimensionError, DomainError, UsageError
from .model import BiasCorrectionModel, ModelConfig, build_model
from .optim import AdamWState, OneCycleSchedule, adamw_step, one_cycle_lr

log = logging.getLogger(__name__)

METRIC_NAMES = ("nodal_mse", "limit_mae", "max_limit_bias")
# display scales used in tables (values are stored unscaled)
METRIC_SCALES = {"nodal_mse": 1e-4, "limit_mae": 1e-2, "max_limit_bias": 1e-2}


def _as_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != np.bool_:
        raise UsageError("mask must be boolean")
    if not m.any():
        raise DomainError("mask selects no elements")
    return m


def limiting_value(arr, mask) -> float:
    """Maximum over the valid (masked-in) nodes."""
    m = _as_mask(mask)
    a = np.asarray(arr)
    if a.shape != m.shape:
        raise DimensionError(f"array shape {a.shape} != mask shape {m.shape}")
    return float(np.max(a[m].astype(np.float64)))


def nodal_mse(a, b, mask) -> float:
    """Mean squared difference over masked nodes, in float64."""
    m = _as_mask(mask)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != m.shape or b.shape != m.shape:
        raise DimensionError(f"shapes differ: {a.shape}, {b.shape}, mask {m.shape}")
    d = a[m] - b[m]
    return float(np.sum(d * d) / int(np.count_nonzero(m)))


def cycle_limit_metrics(series_a: Sequence[float], series_b: Sequence[float]) -> tuple[float, float]:
    """(mean, max) absolute difference between two limiting-value series."""
    a = np.asarray(series_a, dtype=np.float64)
    b = np.asarray(series_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError(f"series must be 1-D and of equal length, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise UsageError("series are empty")
    d = np.abs(a - b)
    return float(d.mean()), float(d.max())


def reduction_pct(offline_metric: float, model_metric: float) -> float:
    """Fractional reduction ``(offline - model) / offline``."""
    if offline_metric == 0:
        raise DomainError("offline metric is zero; reduction is undefined")
    if offline_metric < 0:
        raise DomainError(f"offline metric must be positive, got {offline_metric}")
    return (offline_metric - model_metric) / offline_metric


@dataclass
class CycleMetrics:
    offline: dict
    model: dict
    reductions: dict

    @classmethod
    def compute(cls, offline: dict, model: dict) -> "CycleMetrics":
        red = {k: reduction_pct(offline[k], model[k]) for k in METRIC_NAMES}
        return cls(dict(offline), dict(model), red)

    def to_dict(self) -> dict:
        return {"offline": self.offline, "model": self.model, "reductions": self.reductions}

    @classmethod
    def from_dict(cls, d: dict) -> "CycleMetrics":
        return cls({k: float(d["offline"][k]) for k in METRIC_NAMES},
                   {k: float(d["model"][k]) for k in METRIC_NAMES},
                   {k: float(d["reductions"][k]) for k in METRIC_NAMES})

    def summary_lines(self) -> list[str]:
        out = []
        for k in METRIC_NAMES:
            s = METRIC_SCALES[k]
            out.append(f"{k:>15} (x{s:.0e}): offline {self.offline[k] / s:7.3f}  "
                       f"model {self.model[k] / s:7.3f}  reduction {100 * self.reductions[k]:6.1f}%")
        return out


def comparison_metrics(pred: Sequence[np.ndarray], target: Sequence[np.ndarray], mask) -> dict:
    """The three metrics of ``pred`` against ``target`` over a whole cycle."""
    m = _as_mask(mask)
    count = int(np.count_nonzero(m))
    sq = 0.0
    for p, t in zip(pred, target):
        sq += nodal_mse(p, t, m) * count
    mse = sq / (count * len(pred))
    mae, worst = cycle_limit_metrics([limiting_value(p, m) for p in pred],
                                     [limiting_value(t, m) for t in target])
    return {"nodal_mse": mse, "limit_mae": mae, "max_limit_bias": worst}


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 60
    seed: int = 0
    val_fraction: float = 0.3
    max_lr: float = 0.005
    weight_decay: float = 0.01
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def validate(self) -> None:
        bad = []
        if self.batch_size < 1:
            bad.append("batch_size must be >= 1")
        if self.epochs < 1:
            bad.append("epochs must be >= 1")
        if not 0 < self.val_fraction < 1:
            bad.append("val_fraction must lie in (0, 1)")
        if self.max_lr <= 0:
            bad.append("max_lr must be > 0")
        if self.weight_decay < 0:
            bad.append("weight_decay must be >= 0")
        if bad:
            raise ConfigError("invalid TrainConfig: " + "; ".join(bad))

    def total_steps(self, n_train: int) -> int:
        return self.epochs * math.ceil(n_train / self.batch_size)

    def schedule(self, n_train: int) -> OneCycleSchedule:
        return OneCycleSchedule(
            total_steps=max(self.total_steps(n_train), 2), max_lr=self.max_lr,
            pct_start=self.pct_start, div_factor=self.div_factor,
            final_div_factor=self.final_div_factor)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossCurves:
    steps: list = field(default_factory=list)   # (step, epoch, lr, train_loss)
    epochs: list = field(default_factory=list)  # (epoch, val_loss)
    best_epoch: int = -1
    best_val_loss: float = math.inf

    def to_csv(self) -> str:
        """One row per step; ``val_loss`` is filled on each epoch's last step."""
        val = dict(self.epochs)
        last_step = {}
        for step, epoch, _, _ in self.steps:
            last_step[epoch] = step
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "epoch", "lr", "train_loss", "val_loss"])
        for step, epoch, lr, loss in self.steps:
            v = repr(val[epoch]) if last_step.get(epoch) == step and epoch in val else ""
            w.writerow([step, epoch, repr(lr), repr(loss), v])
        return buf.getvalue()


def stack_inputs(samples: Sequence[Statepoint], dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mf = np.stack([s.mflpd_off for s in samples])[:, None].astype(dtype)
    npo = np.stack([s.np_off for s in samples])[:, None].astype(dtype)
    on = np.stack([s.mflpd_on for s in samples])[:, None].astype(dtype)
    return mf, npo, on


def predict(model: BiasCorrectionModel, samples: Sequence[Statepoint]) -> list[np.ndarray]:
    """Eval-mode predictions, one (H, W, D) array per statepoint.

    Statepoints are run one at a time so a prediction never depends on which
    other statepoints share its batch.
    """
    dt = model.head_weight.dtype
    out = []
    with no_grad():
        for s in samples:
            mf, npo, _ = stack_inputs([s], dt)
            out.append(model.forward(mf, npo, "eval").data[0, 0].copy())
    return out


def validation_loss(model: BiasCorrectionModel, samples: Sequence[Statepoint], mask) -> float:
    preds = predict(model, samples)
    count = int(np.count_nonzero(mask))
    sq = sum(nodal_mse(p, s.mflpd_on, mask) * count for p, s in zip(preds, samples))
    return sq / (count * len(samples))


def train(model: BiasCorrectionModel, train_set: Sequence[Statepoint],
          val_set: Sequence[Statepoint], cfg: TrainConfig, mask,
          on_step: Callable[[int, float, float], None] | None = None
          ) -> tuple[BiasCorrectionModel, LossCurves]:
    """Masked-MSE training with AdamW and the one-cycle schedule.

    The training set is reshuffled each epoch; after every epoch the model is
    scored on the validation set in eval mode and the best-scoring weights are
    restored before returning.
    """
    cfg.validate()
    if not train_set or not val_set:
        raise UsageError("train and validation sets must both be non-empty")
    ids = {id(s) for s in train_set}
    if any(id(s) in ids for s in val_set):
        raise UsageError("train and validation sets overlap")
    mask = _as_mask(mask)
    dt = model.head_weight.dtype
    params = model.parameters()
    opt = AdamWState(weight_decay=cfg.weight_decay)
    sched = cfg.schedule(len(train_set))
    rng = np.random.default_rng(cfg.seed)
    curves = LossCurves()
    best_state = None
    step = 0
    nb = math.ceil(len(train_set) / cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        for b in range(nb):
            batch = [train_set[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            mf, npo, on = stack_inputs(batch, dt)
            bmask = np.broadcast_to(mask, on.shape)
            model.zero_grad()
            pred = model.forward(mf, npo, "train")
            loss = masked_mse(pred, on, bmask)
            backward(loss)
            lr = one_cycle_lr(min(step, sched.total_steps - 1), sched)
            adamw_step(params, opt, lr)
            curves.steps.append((step, epoch, lr, float(loss.data)))
            if on_step is not None:
                on_step(step, lr, float(loss.data))
            step += 1
        vloss = validation_loss(model, val_set, mask)
        curves.epochs.append((epoch, vloss))
        log.info("epoch %d  train %.3e  val %.3e", epoch, curves.steps[-1][3], vloss)
        if vloss < curves.best_val_loss:
            curves.best_val_loss = vloss
            curves.best_epoch = epoch
            best_state = model.state_dict()
    model.zero_grad()
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, curves


@dataclass
class ExperimentReport:
    test_cycle_id: str
    train_cycle_ids: list
    train_config: dict
    model_config: dict
    metrics: CycleMetrics
    limits: dict          # mflpd_offline / mflpd_online / mflpd_predicted series
    curves: LossCurves | None = None

    def to_dict(self) -> dict:
        d = {
            "test_cycle_id": self.test_cycle_id,
            "train_cycle_ids": list(self.train_cycle_ids),
            "train_config": self.train_config,
            "model_config": self.model_config,
            "metrics": self.metrics.to_dict(),
        }
        if self.curves is not None:
            d["best_epoch"] = self.curves.best_epoch
            d["best_val_loss"] = self.curves.best_val_loss
        return d


def evaluate_cycle(model: BiasCorrectionModel, cycle: FuelCycle) -> tuple[CycleMetrics, dict]:
    """Metrics and limit series of the model and of the offline values on ``cycle``."""
    mask = cycle.geometry.mask
    sps = cycle.statepoints
    preds = predict(model, sps)
    online = [s.mflpd_on for s in sps]
    offline = [s.mflpd_off for s in sps]
    metrics = CycleMetrics.compute(comparison_metrics(offline, online, mask),
                                   comparison_metrics(preds, online, mask))
    limits = {
        "mflpd_offline": [limiting_value(a, mask) for a in offline],
        "mflpd_online": [limiting_value(a, mask) for a in online],
        "mflpd_predicted": [limiting_value(a, mask) for a in preds],
    }
    return metrics, limits


def pooled_split(cycles: Sequence[FuelCycle], test_cycle_id: str, cfg: TrainConfig):
    """Remove the test cycle and split the remaining statepoints 70/30.

    Returns ``(test_cycle, train_cycle_ids, train_set, val_set)``.
    """
    by_id = {c.cycle_id: c for c in cycles}
    if test_cycle_id not in by_id:
        raise UsageError(f"unknown test cycle {test_cycle_id!r}; have {sorted(by_id)}")
    if len(cycles) < 2:
        raise UsageError("need at least two cycles")
    test = by_id[test_cycle_id]
    rest = [c for c in cycles if c.cycle_id != test_cycle_id]
    geom = test.geometry
    if any(c.geometry.shape != geom.shape or not np.array_equal(c.geometry.mask, geom.mask)
           for c in rest):
        raise UsageError("all cycles must share one geometry")
    pool = [sp for c in rest for sp in c.statepoints]
    train_set, val_set = split_train_val(pool, 1.0 - cfg.val_fraction, cfg.seed)
    test_ids = {id(sp) for sp in test.statepoints}
    if any(id(sp) in test_ids for sp in train_set + val_set):
        raise UsageError("test-cycle statepoint leaked into the training pool")
    return test, [c.cycle_id for c in rest], train_set, val_set


def run_experiment(cycles: Sequence[FuelCycle], test_cycle_id: str, cfg: TrainConfig,
                   model_cfg: ModelConfig | None = None) -> tuple[ExperimentReport, BiasCorrectionModel]:
    """Hold out one cycle, train on the rest, and evaluate on the held-out cycle."""
    cfg.validate()
    test, train_ids, train_set, val_set = pooled_split(cycles, test_cycle_id, cfg)
    model_cfg = model_cfg or ModelConfig(in_shape=test.geometry.shape, seed=cfg.seed)
    model = build_model(model_cfg)
    model, curves = train(model, train_set, val_set, cfg, test.geometry.mask)
    metrics, limits = evaluate_cycle(model, test)
    report = ExperimentReport(test.cycle_id, train_ids, cfg.to_dict(), model_cfg.to_dict(),
                              metrics, limits, curves)
    return report, model


def limits_csv(limits: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["statepoint", "mflpd_offline", "mflpd_online", "mflpd_predicted"])
    for t, row in enumerate(zip(limits["mflpd_offline"], limits["mflpd_online"],
                                limits["mflpd_predicted"])):
        w.writerow([t] + [repr(float(v)) for v in row])
    return buf.getvalue()


_SERIES_STYLE = (
    ("mflpd_offline", "#222222", "offline"),
    ("mflpd_online", "#1f5fbf", "online"),
    ("mflpd_predicted", "#c0392b", "model"),
)


def bias_svg(limits: dict, title: str = "") -> str:
    """Line plot of the three limiting-value series against statepoint."""
    w, h, pad = 640, 360, 48
    series = [np.asarray(limits[k], dtype=np.float64) for k, _, _ in _SERIES_STYLE]
    n = len(series[0])
    lo = min(float(s.min()) for s in series)
    hi = max(float(s.max()) for s in series)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    lo -= 0.05 * span
    hi += 0.05 * span

    def xy(i, v):
        x = pad + (w - 2 * pad) * (i / max(n - 1, 1))
        y = h - pad - (h - 2 * pad) * (v - lo) / (hi - lo)
        return f"{x:.2f},{y:.2f}"

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
        f'<text x="{w / 2:.0f}" y="{h - 12}" text-anchor="middle" font-size="12">statepoint</text>',
        f'<text x="14" y="{h / 2:.0f}" font-size="12" transform="rotate(-90 14 {h / 2:.0f})" '
        f'text-anchor="middle">limiting MFLPD</text>',
        f'<text x="{pad}" y="{pad - 8}" font-size="10">{hi:.3f}</text>',
        f'<text x="{pad}" y="{h - pad + 14}" font-size="10">{lo:.3f}</text>',
    ]
    if title:
        parts.append(f'<text x="{w / 2:.0f}" y="20" text-anchor="middle" '
                     f'font-size="14">{escape(title)}</text>')
    for (key, color, label), s in zip(_SERIES_STYLE, series):
        d = "M " + " L ".join(xy(i, v) for i, v in enumerate(s))
        parts.append(f'<path class="series" id="{key}" d="{d}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
    for j, (_, color, label) in enumerate(_SERIES_STYLE):
        y = pad + 14 * j
        parts.append(f'<text x="{w - pad - 60}" y="{y}" font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_report(report: ExperimentReport, directory) -> Path:
    """Write metrics.json, limits.csv, bias.svg and (if available) loss.csv."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "metrics.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (d / "limits.csv").write_text(limits_csv(report.limits), encoding="utf-8")
    (d / "bias.svg").write_text(bias_svg(report.limits, f"held-out {report.test_cycle_id}"),
                                encoding="utf-8")
    if report.curves is not None and report.curves.steps:
        (d / "loss.csv").write_text(report.curves.to_csv(), encoding="utf-8")
    return d


def read_metrics(path) -> CycleMetrics:
    return CycleMetrics.from_dict(json.loads(Path(path).read_text(encoding="utf-8"))["metrics"])
