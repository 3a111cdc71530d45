"""One-shot episodes and the classifiers that solve them.

An episode holds one drawing per candidate class (the support set) and a
test drawing of one of those classes.  Classifiers are plain callables
``classifier(episode) -> class id``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import binomtest

from . import ndcore as nd
from .controller import LstmCell
from .data import Dataset
from .errors import ConfigError, DimensionError
from .model import ArcModel, symmetric_similarity
from .ndcore import Tensor

MODES = ("within", "across")


@dataclass
class Episode:
    dataset: Dataset
    support_items: np.ndarray      # (way,) item indices, one per class
    test_item: int
    true_index: int                # position of the test class in the support set
    index: int = 0

    @property
    def way(self) -> int:
        return len(self.support_items)

    @property
    def support_classes(self) -> np.ndarray:
        return self.dataset.character[self.support_items]

    @property
    def support_images(self) -> np.ndarray:
        return self.dataset.images[self.support_items]

    @property
    def test_image(self) -> np.ndarray:
        return self.dataset.images[self.test_item]

    @property
    def true_class(self) -> int:
        return int(self.support_classes[self.true_index])

    @property
    def support(self) -> list[tuple[np.ndarray, int]]:
        return [(self.dataset.images[i], int(self.dataset.character[i])) for i in self.support_items]

    def class_at(self, position: int) -> int:
        return int(self.dataset.character[self.support_items[position]])


def _common_drawers(ds: Dataset, chars) -> list[int]:
    by_drawer = ds.index["by_drawer"]
    common = set(by_drawer[int(chars[0])])
    for c in chars[1:]:
        common.intersection_update(by_drawer[int(c)])
    return sorted(common)


def _eligible_alphabets(ds: Dataset, way: int) -> list[int]:
    key = ("episode_alphabets", way)
    cached = ds.index.get(key)
    if cached is None:
        cached = [a for a, cs in sorted(ds.index["chars_by_alpha"].items()) if len(cs) >= way]
        ds.index[key] = cached
    return cached


def sample_episode(ds: Dataset, way: int = 20, mode: str = "within",
                   rng: np.random.Generator | None = None, index: int = 0, max_tries: int = 100) -> Episode:
    """Draw one episode.

    ``within``: every class from one randomly chosen alphabet.  ``across``:
    classes drawn from the whole dataset.  Support drawings all come from
    one drawer and the test drawing from another.
    """
    rng = np.random.default_rng() if rng is None else rng
    if way < 1:
        raise ConfigError("way must be at least 1")
    if mode == "within":
        alphabets = _eligible_alphabets(ds, way)
        if not alphabets:
            largest = max((len(cs) for cs in ds.index["chars_by_alpha"].values()), default=0)
            raise ConfigError(f"{way}-way within-alphabet episodes need an alphabet with {way} "
                              f"characters; the largest has {largest} ({way - largest} short)")
    elif mode == "across":
        pool = ds.characters()
        if len(pool) < way:
            raise ConfigError(f"{way}-way episodes need {way} characters; split has {len(pool)} "
                              f"({way - len(pool)} short)")
    else:
        raise ConfigError(f"mode must be one of {MODES}, not {mode!r}")
    by_drawer = ds.index["by_drawer"]
    for _ in range(max_tries):
        if mode == "within":
            alpha = alphabets[rng.integers(len(alphabets))]
            pool = ds.index["chars_by_alpha"][alpha]
        chars = rng.choice(pool, size=way, replace=False)
        drawers = _common_drawers(ds, chars)
        if len(drawers) < 2:
            continue
        support_drawer, test_drawer = rng.choice(drawers, size=2, replace=False)
        true_index = int(rng.integers(way))
        support = np.array([by_drawer[int(c)][int(support_drawer)] for c in chars])
        test_item = by_drawer[int(chars[true_index])][int(test_drawer)]
        return Episode(ds, support, int(test_item), true_index, index)
    raise ConfigError("could not find characters sharing two drawers; cannot keep drawers disjoint")


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, episode) so results ignore scheduling."""
    return np.random.default_rng([int(seed), int(index)])


def episodes(ds: Dataset, count: int, seed: int, way: int = 20, mode: str = "within") -> list[Episode]:
    return [sample_episode(ds, way, mode, episode_rng(seed, i), index=i) for i in range(count)]


# -- naive ARC -----------------------------------------------------------------------


def naive_scores(model: ArcModel, ep: Episode) -> np.ndarray:
    """Symmetrised similarity between the test drawing and each support drawing."""
    support = ep.support_images
    test = np.broadcast_to(ep.test_image, support.shape)
    return symmetric_similarity(model, test, support)


def pick(scores) -> int:
    """Argmax with ties going to the lowest index."""
    return int(np.argmax(np.asarray(scores)))


def naive_classify(model: ArcModel, ep: Episode) -> int:
    return ep.class_at(pick(naive_scores(model, ep)))


class NaiveArc:
    def __init__(self, model: ArcModel):
        self.model = model

    def __call__(self, ep: Episode) -> int:
        return naive_classify(self.model, ep)


# -- full context ARC -------------------------------------------------------------------


class FullContextHead:
    """Bidirectional LSTM over the pairwise embeddings, then a per-position
    score ``v . tanh(A c_j + a) + v0`` and a softmax across positions."""

    def __init__(self, input_size: int, hidden: int = 64, seed: int = 0, prefix: str = "context"):
        rng = np.random.default_rng(seed)
        self.input_size, self.hidden = int(input_size), int(hidden)
        self.forward_cell = LstmCell(input_size, hidden, rng, prefix=f"{prefix}.fwd")
        self.backward_cell = LstmCell(input_size, hidden, rng, prefix=f"{prefix}.bwd")
        scale = 1.0 / np.sqrt(2 * hidden)
        self.A = nd.parameter(scale * rng.standard_normal((2 * hidden, hidden)), name=f"{prefix}.A")
        self.a = nd.parameter(np.zeros(hidden), name=f"{prefix}.a")
        self.v = nd.parameter(np.zeros(hidden), name=f"{prefix}.v")
        self.v0 = nd.parameter(np.zeros(1), name=f"{prefix}.v0")

    @property
    def config(self) -> dict[str, int]:
        return {"context_input": self.input_size, "context_hidden": self.hidden}

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        params.update(self.forward_cell.parameters())
        params.update(self.backward_cell.parameters())
        for p in (self.A, self.a, self.v, self.v0):
            params[p.name] = p
        return params

    def scores(self, embeddings) -> Tensor:
        """(B, way, H) embeddings -> (B, way) unnormalised scores."""
        e = nd.as_tensor(embeddings)
        if e.ndim != 3 or e.shape[2] != self.input_size:
            raise DimensionError(f"embeddings must be (B, way, {self.input_size}), got {e.shape}")
        B, way, _ = e.shape
        steps = [e[:, j, :] for j in range(way)]
        state = self.forward_cell.initial_state(B)
        fwd = []
        for x in steps:
            state = self.forward_cell(x, state)
            fwd.append(state[0])
        state = self.backward_cell.initial_state(B)
        bwd = [None] * way
        for j in reversed(range(way)):
            state = self.backward_cell(steps[j], state)
            bwd[j] = state[0]
        out = []
        for j in range(way):
            context = nd.concat([fwd[j], bwd[j]], axis=1)
            hidden = nd.tanh(context @ self.A + self.a.expand(B, self.hidden))
            out.append(hidden @ self.v + self.v0.expand(B))
        return nd.stack(out, axis=1)

    def distribution(self, embeddings) -> Tensor:
        return nd.softmax(self.scores(embeddings), axis=1)


def pair_embeddings(model: ArcModel, eps: list[Episode]) -> Tensor:
    """(B, way, H) relative representations, averaged over both presentation
    orders of (support_j, test)."""
    way = eps[0].way
    if any(ep.way != way for ep in eps):
        raise DimensionError("episodes in one batch must share the same way")
    support = np.concatenate([ep.support_images for ep in eps])
    test = np.concatenate([np.broadcast_to(ep.test_image, (way, model.S, model.S)) for ep in eps])
    _, states, _ = model.run(np.concatenate([support, test]), np.concatenate([test, support]))
    h = states[-1]
    n = len(support)
    mean = (h[:n] + h[n:]) * 0.5
    return mean.reshape(len(eps), way, model.hidden)


def full_context_distribution(model: ArcModel, head: FullContextHead, eps: list[Episode]) -> Tensor:
    return head.distribution(pair_embeddings(model, eps))


def full_context_classify(model: ArcModel, head: FullContextHead, ep: Episode) -> np.ndarray:
    """Probability over the episode's support positions."""
    with nd.no_grad():
        return full_context_distribution(model, head, [ep]).data[0]


class FullContextArc:
    def __init__(self, model: ArcModel, head: FullContextHead):
        self.model, self.head = model, head

    def __call__(self, ep: Episode) -> int:
        return ep.class_at(pick(full_context_classify(self.model, self.head, ep)))


# -- baselines ------------------------------------------------------------------------------


def knn_classify(ep: Episode) -> int:
    """Nearest support drawing in Euclidean pixel distance."""
    diff = ep.support_images - ep.test_image
    dist = np.einsum("kij,kij->k", diff, diff)
    return ep.class_at(int(np.argmin(dist)))


def cosine_classify(ep: Episode) -> int:
    """Support drawing with the highest cosine similarity of raw pixels."""
    support = ep.support_images.reshape(ep.way, -1)
    test = ep.test_image.reshape(-1)
    norms = np.linalg.norm(support, axis=1) * np.linalg.norm(test)
    sims = support @ test / np.maximum(norms, 1e-12)
    return ep.class_at(pick(sims))


def oracle_classify(ep: Episode) -> int:
    return ep.true_class


class RandomClassifier:
    """Uniform guess, seeded per episode."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def __call__(self, ep: Episode) -> int:
        return ep.class_at(int(episode_rng(self.seed, ep.index).integers(ep.way)))


# -- evaluation -------------------------------------------------------------------------------


@dataclass
class EvalResult:
    records: list[tuple[int, int, int, int]]   # (episode_idx, predicted, true, correct)
    accuracy: float
    ci_low: float
    ci_high: float

    @property
    def count(self) -> int:
        return len(self.records)

    def summary(self) -> dict[str, float | int]:
        return {"episodes": self.count, "correct": sum(r[3] for r in self.records),
                "accuracy": self.accuracy, "ci_low": self.ci_low, "ci_high": self.ci_high}


def wilson_interval(correct: int, total: int, confidence: float = 0.95) -> tuple[float, float]:
    ci = binomtest(int(correct), int(total)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def score_records(records) -> EvalResult:
    records = list(records)
    if not records:
        raise ConfigError("nothing to evaluate")
    correct = sum(r[3] for r in records)
    lo, hi = wilson_interval(correct, len(records))
    return EvalResult(records, correct / len(records), lo, hi)


def evaluate_oneshot(classifier: Callable[[Episode], int], ds: Dataset, episodes: int, seed: int = 0,
                     way: int = 20, mode: str = "within", workers: int = 1) -> EvalResult:
    """Accuracy of ``classifier`` over freshly sampled episodes with a 95% Wilson interval."""
    if episodes < 1:
        raise ConfigError("need at least one episode")

    def one(i: int):
        ep = sample_episode(ds, way, mode, episode_rng(seed, i), index=i)
        predicted = int(classifier(ep))
        return i, predicted, ep.true_class, int(predicted == ep.true_class)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, range(episodes)))
    else:
        records = [one(i) for i in range(episodes)]
    return score_records(records)


def format_float(x: float) -> str:
    return repr(float(x))


def write_report(result: EvalResult, report_path, summary_path=None, label: str = "episode_idx") -> None:
    """Per-episode lines ``idx, predicted, true, correct`` plus a summary line;
    optional key=value summary file."""
    lines = [f"# {label}, predicted, true, correct"]
    lines += [f"{i}, {p}, {t}, {c}" for i, p, t, c in result.records]
    s = result.summary()
    lines.append(f"# summary: accuracy={format_float(s['accuracy'])} ci95=[{format_float(s['ci_low'])}, "
                 f"{format_float(s['ci_high'])}] n={s['episodes']}")
    Path(report_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if summary_path is not None:
        kv = [f"{k}={format_float(v) if isinstance(v, float) else v}" for k, v in s.items()]
        Path(summary_path).write_text("\n".join(kv) + "\n", encoding="utf-8")
