"""The attentive recurrent comparator.

Two images are shown to one controller in alternation, ``x_a`` on even
steps and ``x_b`` on odd steps.  Each step the previous hidden state picks
a window, the glimpse from that window updates the controller, and after
``2 * glimpses`` steps the final hidden state is both the pair's relative
representation and the input of a logistic similarity unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .attention import attend, unpack_params
from .controller import GlimpseProjection, LstmCell
from .errors import ConfigError, DimensionError, NumericError
from .ndcore import Tensor


@dataclass
class ComparisonTrace:
    """Per-step record of one (batched) comparison.

    ``omega`` holds raw controller outputs, ``windows`` the derived
    (x_hat, y_hat, delta_hat, x, y, delta, gamma) rows, ``hidden`` the
    states h_1 .. h_T.  Arrays carry a leading batch axis.
    """

    omega: list[np.ndarray] = field(default_factory=list)
    windows: list[np.ndarray] = field(default_factory=list)
    hidden: list[np.ndarray] = field(default_factory=list)
    similarity: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.hidden)

    def image_index(self, t: int) -> int:
        return t % 2


def present(t: int, pair, glimpses: int | None = None):
    """Image shown at step ``t`` (x_a on even steps, x_b on odd steps)."""
    if t < 0 or (glimpses is not None and t >= 2 * glimpses):
        raise IndexError(f"step {t} outside 0..{2 * glimpses - 1 if glimpses else '?'}")
    x_a, x_b = pair
    return x_a if t % 2 == 0 else x_b


class ArcModel:
    """Controller, glimpse projection and similarity head with their sizes."""

    def __init__(self, S: int = 32, N: int = 4, glimpses: int = 8, hidden: int = 512,
                 seed: int = 0, glimpse_bias: bool = False):
        if not S >= N >= 1:
            raise ConfigError(f"need S >= N >= 1 (got S={S}, N={N})")
        if glimpses < 1 or hidden < 1:
            raise ConfigError("glimpses and hidden size must be positive")
        self.S, self.N, self.glimpses, self.hidden = int(S), int(N), int(glimpses), int(hidden)
        rng = np.random.default_rng(seed)
        self.cell = LstmCell(N * N, hidden, rng, prefix="controller")
        self.projection = GlimpseProjection(hidden, rng, use_bias=glimpse_bias)
        # a zero head gives the controller no gradient, and training can sit at
        # log 2 for thousands of steps, so start from small random weights
        self.head_w = nd.parameter(rng.normal(0.0, hidden ** -0.5, hidden), name="similarity.w")
        self.head_b = nd.parameter(np.zeros(1), name="similarity.b")

    @property
    def steps(self) -> int:
        return 2 * self.glimpses

    @property
    def config(self) -> dict[str, int]:
        return {"S": self.S, "N": self.N, "g": self.glimpses, "H": self.hidden,
                "glimpse_bias": int(self.projection.b is not None)}

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        params.update(self.cell.parameters())
        params.update(self.projection.parameters())
        params[self.head_w.name] = self.head_w
        params[self.head_b.name] = self.head_b
        return params

    # -- forward ----------------------------------------------------------
    def _as_batch(self, images) -> tuple[Tensor, bool]:
        arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=float)
        single = arr.ndim == 2
        if single:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[1:] != (self.S, self.S):
            raise DimensionError(f"expected images of shape ({self.S}, {self.S}), got {arr.shape[-2:]}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("image contains non-finite values")
        if isinstance(images, Tensor) and images.requires_grad:
            return (images if not single else images.reshape(1, self.S, self.S)), single
        return nd.Tensor(arr), single

    def run(self, x_a, x_b, trace: bool = False) -> tuple[Tensor, list[Tensor], ComparisonTrace | None]:
        """Unroll all steps; returns the logit (B,), the hidden states h_1..h_T and the trace."""
        xa, single_a = self._as_batch(x_a)
        xb, single_b = self._as_batch(x_b)
        if xa.shape != xb.shape:
            raise DimensionError(f"pair batches differ: {xa.shape} vs {xb.shape}")
        B = xa.shape[0]
        h, c = self.cell.initial_state(B)
        record = ComparisonTrace() if trace else None
        states = []
        for t in range(self.steps):
            image = present(t, (xa, xb))
            omega = self.projection(h)
            params = unpack_params(omega, self.S, self.N)
            glimpse = attend(image, omega, self.N, params=params)
            h, c = self.cell(glimpse, (h, c))
            states.append(h)
            if record is not None:
                record.omega.append(omega.data.copy())
                record.windows.append(params.as_rows())
                record.hidden.append(h.data.copy())
        logit = h @ self.head_w + self.head_b.expand(B)
        if record is not None:
            record.similarity = nd.sigmoid(nd.Tensor(logit.data)).data.copy()
        return logit, states, record

    def forward(self, x_a, x_b) -> tuple[Tensor, Tensor]:
        """Similarity probabilities (B,) and embeddings h_T (B, H)."""
        logit, states, _ = self.run(x_a, x_b)
        return nd.sigmoid(logit), states[-1]

    # -- persistence ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ConfigError(f"checkpoint lacks parameters {missing}")
        for name, p in params.items():
            value = np.asarray(arrays[name], dtype=float)
            if value.shape != p.shape:
                raise ConfigError(f"parameter {name}: checkpoint shape {value.shape}, model {p.shape}")
            p.data = value.copy()

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        nd.save_named(directory / "params.arct", self.state_dict())
        write_config(directory / "config.txt", self.config)

    @classmethod
    def load(cls, directory) -> "ArcModel":
        directory = Path(directory)
        cfg = read_config(directory / "config.txt")
        try:
            model = cls(S=int(cfg["S"]), N=int(cfg["N"]), glimpses=int(cfg["g"]), hidden=int(cfg["H"]),
                        glimpse_bias=bool(int(cfg.get("glimpse_bias", "0"))))
        except KeyError as exc:
            raise ConfigError(f"{directory / 'config.txt'} lacks key {exc}") from None
        model.load_state_dict(nd.load_named(directory / "params.arct"))
        return model


def write_config(path, values: dict) -> None:
    lines = [f"{k}={v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_config(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config file {path}")
    out = {}
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}: malformed line {raw!r}")
        out[key.strip()] = value.strip()
    return out


def compare(model: ArcModel, x_a, x_b, with_trace: bool = False):
    """Similarity, embedding h_T and optionally the trace, without recording gradients.

    Accepts single images or batches; the outputs follow the input."""
    single = np.ndim(x_a.data if isinstance(x_a, Tensor) else x_a) == 2
    with nd.no_grad():
        logit, states, record = model.run(x_a, x_b, trace=with_trace)
        sim = nd.sigmoid(logit).data
        emb = states[-1].data
    if single:
        sim, emb = float(sim[0]), emb[0]
    if with_trace:
        return sim, emb, record
    return sim, emb


def symmetric_similarity(model: ArcModel, x_a, x_b) -> np.ndarray:
    """Mean of both presentation orders; invariant to swapping the pair."""
    s_ab, _ = compare(model, x_a, x_b)
    s_ba, _ = compare(model, x_b, x_a)
    return 0.5 * (np.asarray(s_ab) + np.asarray(s_ba))


def probe_states(model: ArcModel, x_a, x_b) -> np.ndarray:
    """Hidden states after every second step, shape (B, glimpses, H).

    Entry k-1 is h_{2k}, the state once each image has been seen k times."""
    with nd.no_grad():
        _, states, _ = model.run(x_a, x_b)
    return np.stack([states[2 * k - 1].data for k in range(1, model.glimpses + 1)], axis=1)
