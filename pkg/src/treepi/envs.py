"""Deterministic environments with value-semantics states.

Two continuous-control toys (point mass, pendulum swing-up) for end-to-end
training, and a finite-support chain family whose policy expectations are
exactly computable, used as the oracle substrate in tests.

Rewards use the arrival convention r(s, a, s'); the toy rewards depend on the
arrival state only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from .core import RngStream


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    action_dim: int
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    horizon: int

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for lo, hi in zip(self.action_low, self.action_high):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError("action bounds must be finite with low < high")

    @property
    def action_range(self) -> np.ndarray:
        return np.asarray(self.action_high) - np.asarray(self.action_low)


@dataclass(frozen=True)
class StepResult:
    state: Any
    obs: np.ndarray
    reward: float
    terminal: bool
    clipped: bool


def _clip_action(action: np.ndarray, spec: EnvSpec) -> tuple[np.ndarray, bool]:
    a = np.asarray(action, dtype=np.float64).reshape(spec.action_dim)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite action {a!r}")
    clipped = np.clip(a, spec.action_low, spec.action_high)
    return clipped, bool(np.any(clipped != a))


# ---------------------------------------------------------------------------
# Point mass: 2-D double integrator steered toward a goal.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointMassState:
    px: float
    py: float
    vx: float
    vy: float
    t: int


class PointMass:
    """Double integrator, semi-implicit Euler, reward exp(-||pos - goal||^2)."""

    def __init__(self, dt: float = 0.05, horizon: int = 100,
                 goal: tuple[float, float] = (1.0, 1.0), init_noise: float = 0.05):
        self.dt = dt
        self.goal = goal
        self.init_noise = init_noise
        self.spec = EnvSpec(obs_dim=4, action_dim=2,
                            action_low=(-1.0, -1.0), action_high=(1.0, 1.0),
                            horizon=horizon)

    def reset(self, rng: RngStream) -> tuple[PointMassState, np.ndarray]:
        if self.init_noise > 0:
            px, py, vx, vy = self.init_noise * rng.normal(4)
        else:
            px = py = vx = vy = 0.0
        state = PointMassState(float(px), float(py), float(vx), float(vy), 0)
        return state, self.observe(state)

    def observe(self, state: PointMassState) -> np.ndarray:
        return np.array([state.px, state.py, state.vx, state.vy])

    def reward_of(self, state: PointMassState) -> float:
        dx = state.px - self.goal[0]
        dy = state.py - self.goal[1]
        return math.exp(-(dx * dx + dy * dy))

    def step(self, state: PointMassState, action: np.ndarray) -> StepResult:
        a, clipped = _clip_action(action, self.spec)
        vx = state.vx + a[0] * self.dt
        vy = state.vy + a[1] * self.dt
        px = state.px + vx * self.dt
        py = state.py + vy * self.dt
        nxt = PointMassState(px, py, vx, vy, state.t + 1)
        return StepResult(nxt, self.observe(nxt), self.reward_of(nxt),
                          nxt.t >= self.spec.horizon, clipped)


# ---------------------------------------------------------------------------
# Pendulum swing-up: torque-limited so single-step greedy control fails.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PendulumState:
    theta: float      # 0 = upright, pi = hanging
    theta_dot: float
    t: int


class Pendulum:
    """m = l = 1, g = 10, torque in [-2, 2]; reward (cos(theta) + 1) / 2."""

    MAX_SPEED = 8.0

    def __init__(self, dt: float = 0.05, horizon: int = 200, g: float = 10.0,
                 init_noise: float = 0.05):
        self.dt = dt
        self.g = g
        self.init_noise = init_noise
        self.spec = EnvSpec(obs_dim=3, action_dim=1,
                            action_low=(-2.0,), action_high=(2.0,), horizon=horizon)

    def reset(self, rng: RngStream) -> tuple[PendulumState, np.ndarray]:
        theta, theta_dot = math.pi, 0.0
        if self.init_noise > 0:
            theta += self.init_noise * float(rng.normal())
            theta_dot += self.init_noise * float(rng.normal())
        state = PendulumState(self._wrap(theta), theta_dot, 0)
        return state, self.observe(state)

    @staticmethod
    def _wrap(theta: float) -> float:
        return math.atan2(math.sin(theta), math.cos(theta))

    def observe(self, state: PendulumState) -> np.ndarray:
        return np.array([math.cos(state.theta), math.sin(state.theta), state.theta_dot])

    def reward_of(self, state: PendulumState) -> float:
        return (math.cos(state.theta) + 1.0) / 2.0

    def step(self, state: PendulumState, action: np.ndarray) -> StepResult:
        a, clipped = _clip_action(action, self.spec)
        # gravity accelerates away from upright; |torque| < g so swing-up
        # requires pumping energy over multiple steps
        theta_ddot = self.g * math.sin(state.theta) + a[0]
        theta_dot = state.theta_dot + theta_ddot * self.dt
        theta_dot = max(-self.MAX_SPEED, min(self.MAX_SPEED, theta_dot))
        theta = self._wrap(state.theta + theta_dot * self.dt)
        nxt = PendulumState(theta, theta_dot, state.t + 1)
        return StepResult(nxt, self.observe(nxt), self.reward_of(nxt),
                          nxt.t >= self.spec.horizon, clipped)


def make_env(name: str, init_noise: float = 0.05):
    if name == "pointmass":
        return PointMass(init_noise=init_noise)
    if name == "pendulum":
        return Pendulum(init_noise=init_noise)
    raise ValueError(f"unknown environment '{name}'")


# ---------------------------------------------------------------------------
# Finite-support chains: exact oracle substrate.
# ---------------------------------------------------------------------------

@dataclass
class ChainSpec:
    """Finite deterministic MDP fragment given as per-(state, atom) tables.

    `leaf_q[(s, a)]` plays the role of the bootstrap Q-function the search
    would otherwise obtain from a parametric estimator.
    """

    root: str
    horizon: int
    atoms: dict[str, tuple[str, ...]] = field(default_factory=dict)
    reward: dict[tuple[str, str], float] = field(default_factory=dict)
    successor: dict[tuple[str, str], str] = field(default_factory=dict)
    leaf_q: dict[tuple[str, str], float] = field(default_factory=dict)

    def add(self, state: str, atom: str, reward: float, successor: str, leaf_q: float):
        self.atoms.setdefault(state, ())
        if atom in self.atoms[state]:
            raise ValueError(f"duplicate atom {atom!r} for state {state!r}")
        self.atoms[state] = self.atoms[state] + (atom,)
        self.reward[(state, atom)] = float(reward)
        self.successor[(state, atom)] = successor
        self.leaf_q[(state, atom)] = float(leaf_q)

    def validate(self) -> "ChainSpec":
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for state, atoms in self.atoms.items():
            for atom in atoms:
                key = (state, atom)
                if key not in self.reward or key not in self.successor or key not in self.leaf_q:
                    raise ValueError(f"incomplete entry for {key}")
                if not math.isfinite(self.reward[key]) or not math.isfinite(self.leaf_q[key]):
                    raise ValueError(f"non-finite table entry for {key}")
        self._check_acyclic()
        return self

    def _check_acyclic(self, budget: int = 1_000_000) -> None:
        # every path from the root within the horizon must be repeat-free
        count = 0
        stack = [(self.root, 0, frozenset({self.root}))]
        while stack:
            state, depth, on_path = stack.pop()
            if depth >= self.horizon:
                continue
            for atom in self.atoms.get(state, ()):
                count += 1
                if count > budget:
                    raise ValueError("acyclicity check budget exceeded")
                nxt = self.successor[(state, atom)]
                if nxt in on_path:
                    raise ValueError(f"cycle via {state!r} -[{atom!r}]-> {nxt!r}")
                stack.append((nxt, depth + 1, on_path | {nxt}))


def chain_from_lines(lines: Iterable[str], horizon: int | None = None) -> ChainSpec:
    """Parse 'state atom reward successor leaf_q' lines ('#' starts a comment).

    The first line's state is the root. An optional 'horizon N' directive
    overrides the inferred horizon.
    """
    spec: ChainSpec | None = None
    declared_horizon = horizon
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "horizon" and len(parts) == 2:
            declared_horizon = int(parts[1])
            continue
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        state, atom, reward, successor, leaf_q = parts
        if spec is None:
            spec = ChainSpec(root=state, horizon=1)
        spec.add(state, atom, float(reward), successor, float(leaf_q))
    if spec is None:
        raise ValueError("empty chain spec")
    spec.horizon = declared_horizon if declared_horizon is not None else _max_depth(spec)
    return spec.validate()


def _max_depth(spec: ChainSpec) -> int:
    best = 1
    stack = [(spec.root, 0)]
    while stack:
        state, depth = stack.pop()
        best = max(best, depth + 1)
        if depth > 10_000:
            raise ValueError("chain too deep")
        for atom in spec.atoms.get(state, ()):
            nxt = spec.successor[(state, atom)]
            if spec.atoms.get(nxt):
                stack.append((nxt, depth + 1))
    return best


def load_chain_spec(path: str, horizon: int | None = None) -> ChainSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return chain_from_lines(fh, horizon=horizon)


@dataclass(frozen=True)
class ChainState:
    node: str
    t: int


class ChainEnv:
    """Environment view of a ChainSpec; actions are atom labels."""

    def __init__(self, spec: ChainSpec):
        self.chain = spec

    def reset(self, rng: RngStream | None = None) -> tuple[ChainState, str]:
        state = ChainState(self.chain.root, 0)
        return state, state.node

    def observe(self, state: ChainState) -> str:
        return state.node

    def step(self, state: ChainState, atom: str) -> StepResult:
        key = (state.node, atom)
        if key not in self.chain.successor:
            raise KeyError(f"atom {atom!r} has no transition entry at state {state.node!r}")
        nxt = ChainState(self.chain.successor[key], state.t + 1)
        return StepResult(nxt, nxt.node, self.chain.reward[key],
                          nxt.t >= self.chain.horizon, False)


class TabularPolicy:
    """Finite-support policy over chain atoms.

    With `enumerate_support=True`, sample_n(state, M) returns the support in
    order (requires M == support size); with uniform probabilities this makes
    sample averages equal exact expectations.
    """

    def __init__(self, probs: dict[str, dict[str, float]], enumerate_support: bool = False):
        self.probs = {}
        for state, table in probs.items():
            atoms = tuple(table.keys())
            p = np.array([table[a] for a in atoms], dtype=np.float64)
            if np.any(p < 0) or p.sum() <= 0:
                raise ValueError(f"invalid probabilities for state {state!r}")
            self.probs[state] = (atoms, p / p.sum())
        self.enumerate_support = enumerate_support

    @classmethod
    def uniform(cls, spec: ChainSpec, enumerate_support: bool = False) -> "TabularPolicy":
        probs = {s: {a: 1.0 for a in atoms} for s, atoms in spec.atoms.items() if atoms}
        return cls(probs, enumerate_support=enumerate_support)

    def support(self, state: str) -> tuple[tuple[str, ...], np.ndarray]:
        return self.probs[state]

    def sample_n(self, state: str, n: int, rng: RngStream) -> list[str]:
        atoms, p = self.probs[state]
        if self.enumerate_support:
            if n != len(atoms):
                raise ValueError(f"enumeration needs n == |support| == {len(atoms)}")
            return list(atoms)
        cdf = np.cumsum(p)
        u = rng.uniform(size=n) * cdf[-1]
        idx = np.searchsorted(cdf, u, side="right").clip(0, len(atoms) - 1)
        return [atoms[int(i)] for i in idx]

    def log_prob(self, state: str, atom: str) -> float:
        atoms, p = self.probs[state]
        return float(np.log(p[atoms.index(atom)]))


def chain_exact_env(spec: ChainSpec, probs: dict[str, dict[str, float]] | None = None,
                    enumerate_support: bool = False) -> tuple[ChainEnv, TabularPolicy]:
    """Environment plus finite-support policy whose expectations are exact sums."""
    spec.validate()
    env = ChainEnv(spec)
    if probs is None:
        policy = TabularPolicy.uniform(spec, enumerate_support=enumerate_support)
    else:
        policy = TabularPolicy(probs, enumerate_support=enumerate_support)
    return env, policy
