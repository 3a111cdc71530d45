"""Losses, optimiser and training loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .data import AugmentationPolicy, Dataset, fixed_pairs, sample_pair_batch
from .errors import ConfigError, DivergenceError, NumericError
from .model import ArcModel, compare, probe_states, read_config, write_config
from .ndcore import Tensor
from .oneshot import (FullContextArc, FullContextHead, episode_rng, evaluate_oneshot,
                      full_context_distribution, pair_embeddings, sample_episode)

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
CE_EPS = 1e-12


def bce_loss(p, label) -> Tensor:
    """Mean binary cross-entropy of probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = nd.as_tensor(p)
    y = np.broadcast_to(np.asarray(label, dtype=float), p.shape)
    q = nd.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    losses = -(nd.log(q) * nd.Tensor(y.copy()) + nd.log(1.0 - q) * nd.Tensor(1.0 - y))
    return losses.mean()


def episode_ce_loss(p, true_idx) -> Tensor:
    """Mean of -log p[true] over a (way,) or (B, way) distribution."""
    p = nd.as_tensor(p)
    if p.ndim == 1:
        p = p.reshape(1, p.shape[0])
    idx = np.atleast_1d(np.asarray(true_idx, dtype=int))
    onehot = np.zeros(p.shape)
    onehot[np.arange(p.shape[0]), idx] = 1.0
    picked = (p * nd.Tensor(onehot)).sum(axis=1)
    return -nd.log(nd.clamp(picked, CE_EPS)).mean()


class Adam:
    """Adaptive-moment optimiser with bias correction and global-norm clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip: float | None = 10.0):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0
        self.last_norm = 0.0

    def zero_grad(self) -> None:
        nd.zero_grads(self.params.values())

    def step(self) -> None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        optimizer_step(self, grads)


def clip_gradients(grads: dict[str, np.ndarray], threshold: float | None) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if threshold is not None and norm > threshold:
        scale = threshold / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def optimizer_step(state: Adam, grads: dict[str, np.ndarray]) -> None:
    grads, state.last_norm = clip_gradients(grads, state.clip)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for k, p in state.params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / correction1
        v_hat = state.v[k] / correction2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- configuration ----------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 1000
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0
    clip: float = 10.0
    eval_interval: int = 250
    patience: int = 0              # evaluations without improvement before stopping; 0 disables
    val_pairs: int = 1000
    augment: bool = True
    augmentation: AugmentationPolicy | None = None
    # episodic training
    way: int = 5
    mode: str = "within"
    episode_batch: int = 4
    val_episodes: int = 200
    freeze_arc: bool = False

    def __post_init__(self):
        for name in ("batch", "eval_interval", "val_pairs", "way", "episode_batch", "val_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.steps < 0 or self.patience < 0:
            raise ConfigError("steps and patience must be non-negative")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")

    def policy(self, S: int) -> AugmentationPolicy | None:
        if not self.augment:
            return None
        return self.augmentation if self.augmentation is not None else AugmentationPolicy.for_side(S)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "augmentation"}


@dataclass
class TrainResult:
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (step, train_loss, val_acc)
    losses: list[float] = field(default_factory=list)
    best_step: int = 0
    best_val: float = float("nan")
    stopped_early: bool = False


class MetricsLog:
    """Append-only ``step, train_loss, val_acc`` lines."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def append(self, step: int, loss: float, acc: float) -> None:
        if self.path is None:
            return
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"{step}, {loss!r}, {acc!r}\n")


def read_metrics(path) -> list[tuple[int, float, float]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            s, l, a = (x.strip() for x in line.split(","))
            rows.append((int(s), float(l), float(a)))
    return rows


# -- verification --------------------------------------------------------------------------


def pair_accuracy(model: ArcModel, xa: np.ndarray, xb: np.ndarray, labels: np.ndarray, chunk: int = 256) -> float:
    preds = []
    for start in range(0, len(labels), chunk):
        sim, _ = compare(model, xa[start:start + chunk], xb[start:start + chunk])
        preds.append(np.asarray(sim) > 0.5)
    return float(np.mean(np.concatenate(preds) == (labels > 0.5)))


def _check_finite(loss: float, step: int) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(step, loss)


def train_verification(model: ArcModel, train: Dataset, validation: Dataset, cfg: TrainConfig,
                       metrics_path=None) -> TrainResult:
    """Sample pairs, augment, compare, minimise binary cross-entropy.

    The parameters with the best validation accuracy are restored into
    ``model`` at the end."""
    result = TrainResult()
    metrics = MetricsLog(metrics_path)
    if cfg.steps == 0:
        return result
    rng = np.random.default_rng(cfg.seed)
    val = fixed_pairs(validation, cfg.val_pairs, seed=cfg.seed + 1_000_003)
    policy = cfg.policy(model.S)
    opt = Adam(model.parameters(), lr=cfg.lr, clip=cfg.clip)
    best_state = model.state_dict()
    since_best = 0
    window: list[float] = []
    for step in range(1, cfg.steps + 1):
        xa, xb, y = sample_pair_batch(train, cfg.batch, rng, policy)
        opt.zero_grad()
        try:
            logit, _, _ = model.run(xa, xb)
            loss = bce_loss(nd.sigmoid(logit), y)
        except NumericError as err:
            raise DivergenceError(step, float("nan")) from err
        value = loss.item()
        _check_finite(value, step)
        loss.backward()
        opt.step()
        result.losses.append(value)
        window.append(value)
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            acc = pair_accuracy(model, *val)
            mean_loss = float(np.mean(window))
            window.clear()
            result.history.append((step, mean_loss, acc))
            metrics.append(step, mean_loss, acc)
            log.info("step %d loss %.4f val_acc %.4f", step, mean_loss, acc)
            if not acc <= result.best_val:       # also true for the first (nan) comparison
                result.best_val, result.best_step = acc, step
                best_state = model.state_dict()
                since_best = 0
            else:
                since_best += 1
                if cfg.patience and since_best >= cfg.patience:
                    result.stopped_early = True
                    break
    model.load_state_dict(best_state)
    return result


# -- probe classifiers -------------------------------------------------------------------------


@dataclass
class ProbeSet:
    """One logistic classifier per glimpse count on standardised h_{2k}."""

    mean: np.ndarray      # (g, H)
    scale: np.ndarray     # (g, H)
    coef: np.ndarray      # (g, H)
    intercept: np.ndarray  # (g,)
    accuracies: np.ndarray  # (g,)

    def scores(self, states: np.ndarray) -> np.ndarray:
        """(B, g, H) probe states -> (B, g) similarity probabilities."""
        z = ((states - self.mean) / self.scale * self.coef).sum(axis=-1) + self.intercept
        return 1.0 / (1.0 + np.exp(-z))

    def save(self, path) -> None:
        nd.save_named(path, {"mean": self.mean, "scale": self.scale, "coef": self.coef,
                             "intercept": self.intercept, "accuracies": self.accuracies})

    @classmethod
    def load(cls, path) -> "ProbeSet":
        arrays = nd.load_named(path)
        return cls(arrays["mean"], arrays["scale"], arrays["coef"], arrays["intercept"], arrays["accuracies"])


def _pair_states(model: ArcModel, xa, xb, chunk: int = 256) -> np.ndarray:
    return np.concatenate([probe_states(model, xa[i:i + chunk], xb[i:i + chunk])
                           for i in range(0, len(xa), chunk)])


def fit_probes(train_states: np.ndarray, train_labels: np.ndarray, test_states: np.ndarray,
               test_labels: np.ndarray, C: float = 1.0) -> ProbeSet:
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    g = train_states.shape[1]
    means, scales, coefs, intercepts, accs = [], [], [], [], []
    for k in range(g):
        scaler = StandardScaler().fit(train_states[:, k])
        clf = LogisticRegression(C=C, max_iter=2000)
        clf.fit(scaler.transform(train_states[:, k]), train_labels)
        accs.append(clf.score(scaler.transform(test_states[:, k]), test_labels))
        means.append(scaler.mean_)
        scales.append(scaler.scale_)
        coefs.append(clf.coef_[0])
        intercepts.append(clf.intercept_[0])
    return ProbeSet(np.array(means), np.array(scales), np.array(coefs), np.array(intercepts), np.array(accs))


def train_probe_classifiers(model: ArcModel, train: Dataset, test: Dataset, train_pairs: int = 4000,
                            test_pairs: int = 2000, seed: int = 0, shuffle_labels: bool = False) -> ProbeSet:
    """Fit a probe per glimpse count on the frozen model; ``accuracies[k-1]``
    is test accuracy using h_{2k}.  ``shuffle_labels`` gives the null task."""
    xa, xb, y = fixed_pairs(train, train_pairs, seed)
    ta, tb, ty = fixed_pairs(test, test_pairs, seed + 1)
    if shuffle_labels:
        rng = np.random.default_rng(seed + 2)
        y = rng.permutation(y)
        ty = rng.permutation(ty)
    return fit_probes(_pair_states(model, xa, xb), y, _pair_states(model, ta, tb), ty)


# -- full context --------------------------------------------------------------------------------


def train_full_context(model: ArcModel, head: FullContextHead, train: Dataset, validation: Dataset,
                       cfg: TrainConfig, metrics_path=None) -> TrainResult:
    """Episodic training of the context head (and, unless frozen, the comparator)."""
    result = TrainResult()
    metrics = MetricsLog(metrics_path)
    if cfg.steps == 0:
        return result
    params = dict(head.parameters())
    if not cfg.freeze_arc:
        params.update(model.parameters())
    opt = Adam(params, lr=cfg.lr, clip=cfg.clip)
    best_state = {**model.state_dict(), **{k: v.data.copy() for k, v in head.parameters().items()}}
    since_best = 0
    window: list[float] = []
    counter = 0
    classifier = FullContextArc(model, head)
    for step in range(1, cfg.steps + 1):
        eps = []
        for _ in range(cfg.episode_batch):
            eps.append(sample_episode(train, cfg.way, cfg.mode, episode_rng(cfg.seed, counter), index=counter))
            counter += 1
        opt.zero_grad()
        try:
            if cfg.freeze_arc:
                with nd.no_grad():
                    emb = nd.Tensor(pair_embeddings(model, eps).data)
                p = head.distribution(emb)
            else:
                p = full_context_distribution(model, head, eps)
            loss = episode_ce_loss(p, [ep.true_index for ep in eps])
        except NumericError as err:
            raise DivergenceError(step, float("nan")) from err
        value = loss.item()
        _check_finite(value, step)
        loss.backward()
        opt.step()
        result.losses.append(value)
        window.append(value)
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            acc = evaluate_oneshot(classifier, validation, cfg.val_episodes, seed=cfg.seed + 1_000_003,
                                   way=cfg.way, mode=cfg.mode).accuracy
            mean_loss = float(np.mean(window))
            window.clear()
            result.history.append((step, mean_loss, acc))
            metrics.append(step, mean_loss, acc)
            log.info("step %d loss %.4f val_acc %.4f", step, mean_loss, acc)
            if not acc <= result.best_val:
                result.best_val, result.best_step = acc, step
                best_state = {**model.state_dict(), **{k: v.data.copy() for k, v in head.parameters().items()}}
                since_best = 0
            else:
                since_best += 1
                if cfg.patience and since_best >= cfg.patience:
                    result.stopped_early = True
                    break
    model.load_state_dict(best_state)
    for k, p in head.parameters().items():
        p.data = best_state[k].copy()
    return result


# -- checkpoint directories -------------------------------------------------------------------------


def save_checkpoint(directory, model: ArcModel, head: FullContextHead | None = None,
                    extra: dict | None = None) -> Path:
    """Write ``params.arct`` and ``config.txt`` (metrics.log is written by the loops)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = model.state_dict()
    config = dict(model.config)
    if head is not None:
        arrays.update({k: v.data for k, v in head.parameters().items()})
        config.update(head.config)
    config.update(extra or {})
    nd.save_named(directory / "params.arct", arrays)
    write_config(directory / "config.txt", config)
    return directory


def load_checkpoint(directory) -> tuple[ArcModel, FullContextHead | None, dict[str, str]]:
    directory = Path(directory)
    if not (directory / "params.arct").is_file():
        raise ConfigError(f"no checkpoint at {directory} (params.arct missing)")
    cfg = read_config(directory / "config.txt")
    model = ArcModel.load(directory)
    head = None
    if "context_hidden" in cfg:
        head = FullContextHead(int(cfg["context_input"]), int(cfg["context_hidden"]))
        arrays = nd.load_named(directory / "params.arct")
        for k, p in head.parameters().items():
            if k not in arrays:
                raise ConfigError(f"checkpoint lacks {k}")
            p.data = arrays[k].copy()
    return model, head, cfg
