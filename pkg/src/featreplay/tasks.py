"""Synthetic task streams: 2-D Gaussian rings and 8x8 procedural glyphs.

Each task is one class. Samplers hold no state; every draw consumes only the
generator passed in by the caller.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation
from .nets import SampleBatch

GLYPH_NAMES = ("bar", "cross", "box", "diagonal", "dot", "L", "T", "U", "X", "Z")
# stroke/background levels sit inside (0, 1) so small noise never hits the clamp
GLYPH_ON, GLYPH_OFF = 0.9, 0.1


def named_rng(seed: int, *names: str | int) -> np.random.Generator:
    """Independent generator keyed by (seed, names); stable across processes."""
    keys = [int(seed)] + [n if isinstance(n, int) else zlib.crc32(n.encode("utf-8")) for n in names]
    return np.random.default_rng(np.random.SeedSequence(keys))


def _glyph_templates() -> np.ndarray:
    g = np.zeros((10, 8, 8))
    g[0, 3:5, 1:7] = 1  # bar
    g[1, 3:5, 1:7] = 1
    g[1, 1:7, 3:5] = 1  # cross
    g[2, 1, 1:7] = g[2, 6, 1:7] = 1
    g[2, 1:7, 1] = g[2, 1:7, 6] = 1  # box
    for k in range(8):
        g[3, k, k] = 1  # diagonal
    g[4, 3:5, 3:5] = 1  # dot
    g[5, 1:7, 1] = 1
    g[5, 6, 1:7] = 1  # L
    g[6, 1, 1:7] = 1
    g[6, 1:7, 3:5] = 1  # T
    g[7, 1:7, 1] = g[7, 1:7, 6] = 1
    g[7, 6, 1:7] = 1  # U
    for k in range(8):
        g[8, k, k] = g[8, k, 7 - k] = 1  # X
    g[9, 0, :] = g[9, 7, :] = 1
    for k in range(8):
        g[9, k, 7 - k] = 1  # Z
    return np.where(g.reshape(10, 64) > 0, GLYPH_ON, GLYPH_OFF)


GLYPHS = _glyph_templates()


@dataclass(frozen=True)
class Task:
    condition: int
    data_dim: int
    kind: str
    mean: np.ndarray | None = None
    sigma: float = 0.0
    template: np.ndarray | None = None
    noise: float = 0.0

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "gauss2d":
            return self.mean + self.sigma * rng.standard_normal((n, self.data_dim))
        if self.noise == 0:
            return np.repeat(self.template[None, :], n, axis=0)
        jitter = rng.uniform(-self.noise, self.noise, (n, self.data_dim))
        return np.clip(self.template + jitter, 0.0, 1.0)


@dataclass
class TaskStream:
    name: str
    tasks: list[Task]
    seed: int
    params: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.tasks)

    @property
    def data_dim(self) -> int:
        return self.tasks[0].data_dim

    @property
    def squash(self) -> bool:
        return self.name == "glyphs8"

    def heldout(self, condition: int, n: int) -> np.ndarray:
        """Fixed evaluation split for one task, drawn from its own stream."""
        return self.tasks[condition].draw(n, named_rng(self.seed, "heldout", condition))

    def spec(self) -> dict:
        return {"name": self.name, "T": self.T, "seed": self.seed, **self.params}


def make_gauss2d(T: int, radius: float = 4.0, sigma: float = 0.15, seed: int = 0) -> TaskStream:
    """Task i is N(radius * (cos 2 pi i / T, sin 2 pi i / T), sigma^2 I)."""
    if T < 1:
        raise ConfigError("T must be at least 1")
    if radius <= 0 or sigma <= 0:
        raise ConfigError("radius and sigma must be positive")
    tasks = []
    for i in range(T):
        angle = 2.0 * np.pi * i / T
        mean = np.array([radius * np.cos(angle), radius * np.sin(angle)])
        tasks.append(Task(i, 2, "gauss2d", mean=mean, sigma=float(sigma)))
    return TaskStream("gauss2d", tasks, seed, {"radius": float(radius), "sigma": float(sigma)})


def make_glyphs8(T: int = 10, noise: float = 0.05, seed: int = 0) -> TaskStream:
    """Task i is template i plus uniform pixel noise of amplitude ``noise``, clamped to [0, 1]."""
    if not 1 <= T <= 10:
        raise ConfigError("glyphs8 defines 10 templates; T must be in [1, 10]")
    if not 0 <= noise < 0.5:
        raise ConfigError("noise must lie in [0, 0.5)")
    tasks = [Task(i, 64, "glyphs8", template=GLYPHS[i], noise=float(noise)) for i in range(T)]
    return TaskStream("glyphs8", tasks, seed, {"noise": float(noise)})


def make_stream(name: str, T: int, seed: int = 0, **params) -> TaskStream:
    if name == "gauss2d":
        return make_gauss2d(T, seed=seed, **params)
    if name == "glyphs8":
        return make_glyphs8(T, seed=seed, **params)
    raise ConfigError(f"unknown stream {name!r}")


def sample_real(task: Task, n: int, rng: np.random.Generator) -> SampleBatch:
    if n <= 0:
        raise ContractViolation("n must be positive")
    return SampleBatch(task.draw(n, rng), task.condition, "real")
