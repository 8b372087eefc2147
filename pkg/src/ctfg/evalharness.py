"""Downstream classification, metrics, LOGO transfers, token sweeps and the
synthetic cross-user task."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .dataio import BatchSpec, Recording, SplitPlan, WindowSet, split_logo, window_stride, \
    windows_from_recordings, zscore_per_user
from .grpo import GrpoConfig, init_state, train_epoch
from .policy import EncoderConfig
from .ppobaseline import GaeConfig, init_value, ppo_update
from .rewards import RewardWeights


# --- logistic regression ----------------------------------------------------------

@dataclass
class LogRegModel:
    """Multinomial logistic regression on standardized flattened features."""

    weight: np.ndarray  # (F, C)
    bias: np.ndarray  # (C,)
    classes: np.ndarray  # label value per column
    l2: float
    mean: np.ndarray
    scale: np.ndarray
    iterations: int = 0
    grad_norm: float = float("nan")

    def logits(self, X: np.ndarray) -> np.ndarray:
        return ((np.asarray(X) - self.mean) / self.scale) @ self.weight + self.bias

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        z = self.logits(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.logits(X), axis=1)]


def _logreg_objective(W, b, Xs, onehot, l2):
    logp = dc.log_softmax(dc.tensor(Xs) @ W + b, axis=1)
    nll = -1.0 * dc.mean(dc.sum(logp * onehot, axis=1))
    return nll + (0.5 * l2) * dc.sum(W * W)


def logreg_gradient(W: np.ndarray, b: np.ndarray, Xs: np.ndarray, onehot: np.ndarray, l2: float):
    """Objective value and gradients (W, b) of the regularized mean cross-entropy."""
    Wt, bt = dc.parameter(W, "W"), dc.parameter(b, "b")
    obj = _logreg_objective(Wt, bt, Xs, onehot, l2)
    g = dc.backward(obj, {"W": Wt, "b": bt})
    return float(obj.data), g["W"], g["b"]


def fit_logreg(X: np.ndarray, y: np.ndarray, l2: float = 1e-3, tol: float = 1e-6,
               max_iter: int = 5000) -> LogRegModel:
    """Full-batch accelerated gradient descent with adaptive restart.

    Stops when the gradient norm drops below ``tol`` or after ``max_iter`` steps.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("logistic regression needs at least two classes")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    Xs = (X - mean) / scale
    N, F = Xs.shape
    C = len(classes)
    onehot = (y[:, None] == classes[None, :]).astype(np.float64)
    # softmax cross-entropy Hessian is bounded by 0.5 * X^T X / N (plus the bias column)
    lip = 0.5 * (np.linalg.norm(Xs, 2) ** 2 / N + 1.0) + l2
    step = 1.0 / lip
    W, b = np.zeros((F, C)), np.zeros(C)
    W_prev, b_prev = W, b
    t, it, gnorm = 1.0, 0, np.inf
    f_prev = np.inf
    for it in range(1, max_iter + 1):
        t_next = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        mom = (t - 1) / t_next
        Wy, by = W + mom * (W - W_prev), b + mom * (b - b_prev)
        f, gW, gb = logreg_gradient(Wy, by, Xs, onehot, l2)
        gnorm = math.sqrt(float(np.sum(gW * gW) + np.sum(gb * gb)))
        if gnorm < tol:
            W, b = Wy, by
            break
        W_prev, b_prev = W, b
        W, b = Wy - step * gW, by - step * gb
        t = t_next
        if f > f_prev:
            t = 1.0  # restart momentum
        f_prev = f
    f, gW, gb = logreg_gradient(W, b, Xs, onehot, l2)
    gnorm = math.sqrt(float(np.sum(gW * gW) + np.sum(gb * gb)))
    return LogRegModel(W, b, classes, l2, mean, scale, it, gnorm)


# --- metrics ----------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows true class, columns predicted
    classes: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    def per_class_rows(self) -> list[dict]:
        return [{"class": int(c), "correct": int(self.confusion[i, i]), "total": int(self.confusion[i].sum()),
                 "recall": float(self.recall[i]), "precision": float(self.precision[i]), "f1": float(self.f1[i])}
                for i, c in enumerate(self.classes)]


def metrics_from_confusion(confusion: np.ndarray, classes=None) -> EvalResult:
    cm = np.asarray(confusion, dtype=np.int64)
    classes = np.arange(1, len(cm) + 1) if classes is None else np.asarray(classes)
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    acc = float(tp.sum() / cm.sum()) if cm.sum() else 0.0
    return EvalResult(acc, cm, classes, precision, recall, f1)


def evaluate(model: LogRegModel, X: np.ndarray, y: np.ndarray) -> EvalResult:
    y = np.asarray(y)
    classes = np.union1d(model.classes, np.unique(y))
    pred = model.predict(X)
    pos = {c: i for i, c in enumerate(classes.tolist())}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(y.tolist(), pred.tolist()):
        cm[pos[t], pos[p]] += 1
    return metrics_from_confusion(cm, classes)


# --- synthetic cross-user task ----------------------------------------------------

@dataclass
class SyntheticTaskSpec:
    """Class-specific periodic waveforms distorted per user.

    Class c oscillates at ``base_freq + c * freq_step`` Hz with a per-channel
    phase template; user u scales amplitude and shifts phase.
    """

    n_users: int = 4
    n_classes: int = 3
    n_channels: int = 3
    sample_rate: float = 25.0
    windows_per_cell: int = 60
    window_len: int = 75
    overlap: float = 0.5
    base_freq: float = 1.0
    freq_step: float = 0.75
    harmonic: float = 0.3
    amp_low: float = 0.6
    amp_high: float = 1.4
    phase_low: float = 0.0
    phase_high: float = math.pi / 2
    noise: float = 0.1

    def __post_init__(self):
        if min(self.n_users, self.n_classes, self.n_channels, self.windows_per_cell, self.window_len) < 1:
            raise ValueError("synthetic task sizes must be positive")
        if self.freq_step <= 0:
            raise ValueError("classes need distinct base frequencies (freq_step > 0)")

    def frequencies(self) -> np.ndarray:
        return self.base_freq + self.freq_step * np.arange(self.n_classes)

    def phase_template(self) -> np.ndarray:
        """(C, d) per-channel phase of each class."""
        c = np.arange(self.n_classes)[:, None]
        ch = np.arange(self.n_channels)[None, :]
        return np.pi * ch * (c + 1) / (self.n_channels + 1)

    def recording_length(self) -> int:
        return self.window_len + (self.windows_per_cell - 1) * window_stride(self.window_len, self.overlap)

    def groups(self) -> dict[str, list[int]]:
        """One LOGO group per user: A=[1], B=[2], ..."""
        return {chr(ord("A") + i): [i + 1] for i in range(self.n_users)}


def base_waveform(spec: SyntheticTaskSpec, c: int, t: np.ndarray, phase: float = 0.0) -> np.ndarray:
    """(T, d) class-``c`` waveform (0-based class index) at times ``t`` seconds."""
    f = spec.frequencies()[c]
    ang = 2 * np.pi * f * t[:, None] + spec.phase_template()[c][None, :] + phase
    return np.sin(ang) + spec.harmonic * np.sin(2 * ang)


def make_synthetic(spec: SyntheticTaskSpec, rng: np.random.Generator) -> list[Recording]:
    """One Recording per (user, class); users 1..U, labels 1..C."""
    T = spec.recording_length()
    t = np.arange(T) / spec.sample_rate
    recs = []
    for u in range(1, spec.n_users + 1):
        amp = rng.uniform(spec.amp_low, spec.amp_high)
        phase = rng.uniform(spec.phase_low, spec.phase_high)
        for c in range(spec.n_classes):
            signal = amp * base_waveform(spec, c, t, phase)
            signal = signal + spec.noise * rng.standard_normal(signal.shape)
            recs.append(Recording(u, signal, np.full(T, c + 1), spec.sample_rate))
    return recs


def synthetic_windows(spec: SyntheticTaskSpec, seed: int) -> WindowSet:
    """Windowed, per-user z-scored synthetic dataset."""
    recs = make_synthetic(spec, np.random.default_rng(seed))
    return zscore_per_user(windows_from_recordings(recs, spec.window_len, spec.overlap))


def population_std(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(np.mean((v - v.mean()) ** 2))) if len(v) else float("nan")


# --- transfers and sweeps ---------------------------------------------------------

@dataclass
class TransferSettings:
    """Everything one training run needs besides data, plan and seed."""

    optimizer: str = "grpo"
    grpo: GrpoConfig | None = None
    gae: GaeConfig | None = None
    weights: RewardWeights | None = None
    encoder: EncoderConfig | None = None
    token_dim: int = 16
    init_log_sigma: float = 0.0
    lr: float = 1e-4
    proj_lr: float = 1e-3
    samples_per_cell: int = 2
    l2: float = 1e-3
    probe_interval: int = 5
    checked: bool = True

    def __post_init__(self):
        if self.optimizer not in ("grpo", "ppo"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.grpo = self.grpo or GrpoConfig()
        self.gae = self.gae or GaeConfig()
        self.weights = self.weights or RewardWeights()
        self.encoder = self.encoder or EncoderConfig()

    def with_tokens(self, s: int, optimizer: str | None = None) -> TransferSettings:
        return replace(self, grpo=replace(self.grpo, tokens=s), optimizer=optimizer or self.optimizer)


@dataclass
class TransferRecord:
    heldout: str
    optimizer: str
    tokens: int
    seed: int
    accuracy: float
    result: EvalResult
    trace: list[tuple[int, float]]  # (epoch, target accuracy)
    metrics: list[dict]  # per-epoch training summaries
    state: object = field(default=None, repr=False)  # final grpo.TrainState


def probe_accuracy(policy, source: WindowSet, target: WindowSet, s: int, l2: float = 1e-3):
    """Fit logreg on deterministic source features and score the target."""
    model = fit_logreg(policy.extract_features(source.x, s), source.y, l2=l2)
    return evaluate(model, policy.extract_features(target.x, s), target.y)


def run_transfer(windows: WindowSet, plan: SplitPlan, settings: TransferSettings, seed: int,
                 on_epoch: Callable[[dict, object], None] | None = None) -> TransferRecord:
    """Train on the source groups, then classify the held-out group.

    Target labels are only read by the probes and the final evaluation.
    ``on_epoch(summary, state)`` runs after every epoch.
    """
    source, target = split_logo(windows, plan)
    cfg = settings.grpo
    s = cfg.tokens
    state = init_state(windows.x.shape[-1], settings.encoder, s, settings.token_dim, seed,
                       lr=settings.lr, proj_lr=settings.proj_lr, init_log_sigma=settings.init_log_sigma)
    if settings.optimizer == "ppo":
        init_value(state, settings.gae, seed)
    batch = BatchSpec(settings.samples_per_cell)
    metrics, trace = [], []
    with dc.checked(settings.checked):
        for _ in range(cfg.epochs):
            if settings.optimizer == "grpo":
                m = train_epoch(source, state, settings.weights, cfg, batch)
            else:
                m = ppo_update(source, state, settings.weights, cfg, settings.gae, batch)
            m.pop("advantages", None)
            metrics.append(m)
            if on_epoch is not None:
                on_epoch(m, state)
            if settings.probe_interval and state.epoch % settings.probe_interval == 0:
                trace.append((state.epoch, probe_accuracy(state.policy, source, target, s, settings.l2).accuracy))
        result = probe_accuracy(state.policy, source, target, s, settings.l2)
    if not trace or trace[-1][0] != state.epoch:
        trace.append((state.epoch, result.accuracy))
    return TransferRecord(plan.heldout, settings.optimizer, s, seed, result.accuracy, result, trace, metrics, state)


@dataclass
class ExperimentReport:
    """Aggregate over transfers (and seeds) for one (s, optimizer) cell."""

    optimizer: str
    tokens: int
    runs: list[tuple[str, int, float]]  # (heldout, seed, accuracy)
    per_class: EvalResult  # from the pooled confusion matrix
    trace: list[tuple[int, float]]  # epoch -> mean accuracy across runs
    config: dict = field(default_factory=dict)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([a for _, _, a in self.runs])

    @property
    def mean(self) -> float:
        return float(self.accuracies.mean())

    @property
    def std(self) -> float:
        return population_std(self.accuracies)

    @classmethod
    def from_records(cls, records: Sequence[TransferRecord], config: dict | None = None) -> ExperimentReport:
        if not records:
            raise ValueError("no transfer records to aggregate")
        classes = np.unique(np.concatenate([r.result.classes for r in records]))
        pos = {c: i for i, c in enumerate(classes.tolist())}
        cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
        for r in records:
            idx = [pos[c] for c in r.result.classes.tolist()]
            cm[np.ix_(idx, idx)] += r.result.confusion
        epochs = sorted({e for r in records for e, _ in r.trace})
        trace = []
        for e in epochs:
            vals = [a for r in records for ep, a in r.trace if ep == e]
            trace.append((e, float(np.mean(vals))))
        return cls(records[0].optimizer, records[0].tokens,
                   [(r.heldout, r.seed, r.accuracy) for r in records],
                   metrics_from_confusion(cm, classes), trace, dict(config or {}))

    def summary_text(self) -> str:
        lines = [f"optimizer {self.optimizer}  tokens {self.tokens}",
                 f"mean accuracy {self.mean:.4f}  std {self.std:.4f}  runs {len(self.runs)}"]
        lines += [f"  heldout {h} seed {s}: {a:.4f}" for h, s, a in self.runs]
        lines.append("  class  recall  precision  f1")
        lines += [f"  {r['class']:>5}  {r['recall']:.4f}  {r['precision']:.4f}     {r['f1']:.4f}"
                  for r in self.per_class.per_class_rows()]
        return "\n".join(lines) + "\n"


def _run_cell(args):
    windows, plan, settings, seed = args
    rec = run_transfer(windows, plan, settings, seed)
    rec.state = None  # keep worker results small
    return rec


def run_many(tasks, jobs: int = 1) -> list[TransferRecord]:
    """Run (windows, plan, settings, seed) tasks, in worker processes when ``jobs > 1``.

    Each task owns its seed, so results do not depend on ``jobs``.
    """
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_cell, tasks))
    return [_run_cell(t) for t in tasks]


def sweep_tokens(windows: WindowSet, plans: Sequence[SplitPlan], s_values: Sequence[int],
                 optimizers: Sequence[str], seeds: Sequence[int], settings: TransferSettings,
                 jobs: int = 1) -> list[ExperimentReport]:
    """Every (s, optimizer, transfer, seed) combination, aggregated per (s, optimizer)."""
    if not s_values or any(int(s) < 1 for s in s_values):
        raise ValueError("token counts must be positive integers")
    if not optimizers or not plans or not seeds:
        raise ValueError("sweep needs at least one optimizer, transfer and seed")
    cells = [(s, o) for s in s_values for o in optimizers]
    tasks = [(windows, plan, settings.with_tokens(int(s), o), seed)
             for s, o in cells for plan in plans for seed in seeds]
    records = run_many(tasks, jobs)
    per_cell = len(plans) * len(seeds)
    return [ExperimentReport.from_records(records[i * per_cell:(i + 1) * per_cell],
                                          {"tokens": s, "optimizer": o})
            for i, (s, o) in enumerate(cells)]


def report_filename(dataset: str, optimizer: str, s: int, heldout: str, seed: int) -> str:
    return f"{dataset}_{optimizer}_{s}_{heldout}_{seed}.csv"
