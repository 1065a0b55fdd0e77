"""Shared plumbing: configuration, random streams, experience containers, replay."""

from __future__ import annotations

import hashlib
import struct
import threading
from collections import deque
from dataclasses import dataclass, field, fields
from typing import Any, Iterable

import numpy as np


class ConfigError(ValueError):
    """Raised when a config key fails validation; carries the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


@dataclass
class Config:
    """Run hyperparameters. Defaults are the paper-scale settings; desk-scale
    runs override width/latent/budget knobs explicitly."""

    alpha: float = 0.1            # soft-backup temperature
    gamma: float = 0.99           # discount
    M: int = 20                   # branching factor (policy samples per node)
    K: int = 10                   # search depth
    N: int = 100                  # rollout budget per search
    eps_kl: float = 0.005         # trust-region bound (nats)
    updates_per_step: int = 1     # learner steps per environment step
    target_rate: int = 500        # learner steps per iteration (snapshot) advance
    target_sync_period: int = 200  # learner steps per target-network copy
    snippet_len: int = 10         # T, transitions per replay snippet
    buffer_capacity: int = 2_000_000  # replay capacity in transitions
    batch_size: int = 256
    learning_rate: float = 0.0003
    eta_learning_rate: float = 0.01
    latent_dim: int = 32
    hidden_width: int = 64
    s_boot: int = 10              # action samples for the bootstrap expectation
    search_subsample: int = 8     # searches per learner step (0 = every timestep)
    min_replay: int = 1000        # transitions before learning starts
    num_actors: int = 1
    snapshot_refresh: int = 100   # env interactions between actor param pulls
    checkpoint_every: int = 50    # episodes between checkpoints
    init_noise: float = 0.05      # reset-state noise scale for the toy envs
    seed: int = 0

    def validate(self) -> "Config":
        def check(key, ok, msg):
            if not ok:
                raise ConfigError(key, msg)

        check("alpha", self.alpha > 0, "must be > 0")
        check("gamma", 0.0 <= self.gamma <= 1.0, "must be in [0, 1]")
        check("M", self.M >= 1, "must be >= 1")
        check("K", self.K >= 1, "must be >= 1")
        check("N", self.N >= 1, "must be >= 1")
        check("eps_kl", self.eps_kl > 0, "must be > 0")
        check("updates_per_step", self.updates_per_step >= 0, "must be >= 0")
        check("target_rate", self.target_rate >= 1, "must be >= 1")
        check("target_sync_period", self.target_sync_period >= 1, "must be >= 1")
        check("snippet_len", self.snippet_len >= 2, "must be >= 2")
        check("buffer_capacity", self.buffer_capacity >= 1, "must be >= 1")
        check("batch_size", self.batch_size >= 1, "must be >= 1")
        check("learning_rate", self.learning_rate > 0, "must be > 0")
        check("eta_learning_rate", self.eta_learning_rate > 0, "must be > 0")
        check("latent_dim", self.latent_dim >= 1, "must be >= 1")
        check("hidden_width", self.hidden_width >= 1, "must be >= 1")
        check("s_boot", self.s_boot >= 1, "must be >= 1")
        check("search_subsample", self.search_subsample >= 0, "must be >= 0")
        check("min_replay", self.min_replay >= 0, "must be >= 0")
        check("num_actors", self.num_actors >= 1, "must be >= 1")
        check("snapshot_refresh", self.snapshot_refresh >= 1, "must be >= 1")
        check("checkpoint_every", self.checkpoint_every >= 1, "must be >= 1")
        check("init_noise", self.init_noise >= 0, "must be >= 0")
        return self

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _parse_value(key: str, text: str, target_type: type):
    text = text.strip()
    try:
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse '{text}' as {target_type.__name__}")
    raise ConfigError(key, f"unsupported field type {target_type}")


def config_from_lines(lines: Iterable[str]) -> Config:
    known = {f.name: f.type for f in fields(Config)}
    # dataclass field types are strings under `from __future__ import annotations`
    type_map = {"int": int, "float": float}
    overrides: dict[str, Any] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got '{line}'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(key, "unknown key")
        if key in overrides:
            raise ConfigError(key, "duplicate key")
        overrides[key] = _parse_value(key, value, type_map[known[key]])
    return Config(**overrides).validate()


def config_load(path: str) -> Config:
    """Load a flat key=value config file; missing keys keep their defaults."""
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_lines(fh)


def config_save(cfg: Config, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in cfg.to_dict().items():
            fh.write(f"{key}={value}\n")


class RngStream:
    """Counter-based (Philox) pseudorandom stream.

    Identical (seed, path) pairs yield bit-identical draw sequences, and
    distinct paths give statistically independent streams (keys are hashed
    from the path), so the search, actors, and learner can each own a
    reproducible stream derived from one root seed.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        material = struct.pack("<q", self.seed) + b"".join(
            struct.pack("<q", p) for p in self.path)
        key = int.from_bytes(hashlib.blake2b(material, digest_size=16).digest(), "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *path: int) -> "RngStream":
        """Derive an independent stream keyed by `path` (children never share
        state with the parent)."""
        return RngStream(self.seed, self.path + tuple(path))

    def normal(self, size=None) -> np.ndarray | float:
        return self._gen.standard_normal(size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def random(self) -> float:
        return float(self._gen.random())

    def categorical(self, probs: np.ndarray) -> int:
        """Single draw from a normalized probability vector."""
        cdf = np.cumsum(probs)
        u = self._gen.random() * cdf[-1]
        return int(np.searchsorted(cdf, u, side="right").clip(0, len(probs) - 1))

    def shuffle(self, x) -> None:
        self._gen.shuffle(x)


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    terminal: bool
    env_state: Any = None  # kept for ground-truth-model search roots


@dataclass
class Snippet:
    """Contiguous trajectory segment from one episode (length T, or shorter
    at episode end)."""

    transitions: tuple[Transition, ...]

    def __len__(self) -> int:
        return len(self.transitions)


class ReplayBuffer:
    """FIFO snippet buffer with capacity counted in transitions.

    Safe for concurrent append (actors) and sample (learner).
    """

    def __init__(self, capacity_transitions: int):
        if capacity_transitions < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity_transitions)
        self._snippets: deque[Snippet] = deque()
        self._transitions = 0
        self._lock = threading.Lock()

    def append(self, snippet: Snippet) -> None:
        if len(snippet) == 0:
            raise ValueError("cannot append an empty snippet")
        with self._lock:
            self._snippets.append(snippet)
            self._transitions += len(snippet)
            while self._transitions > self.capacity:
                old = self._snippets.popleft()
                self._transitions -= len(old)

    def sample(self, batch_size: int, rng: RngStream) -> list[Snippet]:
        """Uniform sample with replacement; deterministic given the rng state."""
        with self._lock:
            if not self._snippets:
                raise ValueError("cannot sample from an empty replay buffer")
            idx = rng.integers(0, len(self._snippets), size=batch_size)
            return [self._snippets[int(i)] for i in idx]

    def __len__(self) -> int:
        with self._lock:
            return len(self._snippets)

    @property
    def transition_count(self) -> int:
        with self._lock:
            return self._transitions

    def snippets(self) -> tuple[Snippet, ...]:
        """Snapshot of current contents in FIFO order (oldest first)."""
        with self._lock:
            return tuple(self._snippets)
