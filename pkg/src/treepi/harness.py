"""Training orchestration: actors, the learner loop, metrics, checkpoints.

Single-actor runs execute the canonical sequential loop (act, store,
updates_per_step learner steps, periodic snapshot/target advances) and are
bit-reproducible given a seed. Multi-actor runs wrap the same per-step actor
logic in threads that communicate with the learner only through the replay
buffer and published parameter snapshots.
"""

from __future__ import annotations

import csv
import hashlib
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Config, ReplayBuffer, RngStream, Snippet, Transition
from .learner import (METRIC_COLUMNS, LearnerState, ParamsSnapshot, build_nets,
                      learner_step)
from .nets import load_checkpoint, save_checkpoint
from .envs import make_env
from .search import (BoundGaussianPolicy, GroundTruthModel, LearnedLatentModel,
                     act_search, pg_refine, pi_rollout_weights, smc_sample,
                     treepi_search)

ACTION_MODES = ("pi", "search", "pg", "smc", "pi_rollout")
MODEL_MODES = ("learned", "ground_truth")
POLICY_LOSSES = ("treepi", "bc")

EPISODE_COLUMNS = ("episode", "env_steps", "learner_steps", "avg_return",
                   "kl_to_snapshot", "eta", "wallclock_s")
SEARCH_COLUMNS = ("env_steps", "rollouts_used", "tree_nodes", "weight_entropy")


def content_hash() -> str:
    """Content hash over the package sources (stand-in for a binary hash)."""
    pkg_dir = Path(__file__).resolve().parent
    digest = hashlib.sha1()
    for path in sorted(pkg_dir.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def write_manifest(path: str, cfg: Config, extra: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in extra.items():
            fh.write(f"{key}={value}\n")
        for key, value in cfg.to_dict().items():
            fh.write(f"{key}={value}\n")


def read_manifest(path: str) -> dict[str, str]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                key, _, value = line.partition("=")
                out[key] = value
    return out


class CsvWriter:
    def __init__(self, path: str, columns: tuple[str, ...]):
        self.columns = columns
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(columns)
        self._fh.flush()

    def write(self, row: dict) -> None:
        self._writer.writerow([row.get(c, "") for c in self.columns])

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


# ---------------------------------------------------------------------------
# Action selection from a published snapshot.
# ---------------------------------------------------------------------------

def _features(snapshot: ParamsSnapshot, nets, obs: np.ndarray) -> np.ndarray:
    if snapshot.mode == "learned":
        lat, _ = nets.enc.forward(snapshot.enc, np.asarray(obs, dtype=np.float64))
        return lat
    return np.asarray(obs, dtype=np.float64)


def _search_model(snapshot: ParamsSnapshot, nets, env):
    if snapshot.mode == "learned":
        return LearnedLatentModel(nets.enc, snapshot.enc, nets.trans,
                                  snapshot.trans, nets.reward, snapshot.reward,
                                  nets.q, snapshot.snap_q,
                                  action_low=nets.action_low,
                                  action_high=nets.action_high)
    return GroundTruthModel(env, nets.q, snapshot.snap_q)


def select_action(mode: str, snapshot: ParamsSnapshot, nets, env, env_state,
                  obs, cfg: Config, rng: RngStream,
                  diagnostics: list | None = None) -> np.ndarray:
    """One acting decision. The acting reference is the iteration snapshot."""
    if mode == "pi":
        feats = _features(snapshot, nets, obs)
        actions, _ = nets.policy.sample_n(snapshot.snap_policy, feats, 1, rng)
        return actions[0]

    root = obs if snapshot.mode == "learned" else env_state
    model = _search_model(snapshot, nets, env)
    bound = BoundGaussianPolicy(nets.policy, snapshot.snap_policy)
    if mode == "search":
        out: list = []
        action = act_search(root, bound, model, M=cfg.M, K=cfg.K, N=cfg.N,
                            alpha=cfg.alpha, gamma=cfg.gamma, rng=rng,
                            result_out=out)
        if diagnostics is not None:
            res = out[0]
            diagnostics.append({"rollouts_used": res.rollouts_used,
                                "tree_nodes": res.nodes,
                                "weight_entropy": res.weight_entropy()})
        return action
    if mode == "pi_rollout":
        res = pi_rollout_weights(root, bound, model, M=cfg.M, K=cfg.K,
                                 alpha=cfg.alpha, gamma=cfg.gamma, rng=rng)
        idx = rng.child(9).categorical(res.weights)
        if diagnostics is not None:
            diagnostics.append({"rollouts_used": res.rollouts_used,
                                "tree_nodes": res.nodes,
                                "weight_entropy": res.weight_entropy()})
        return res.actions[idx]
    if mode == "smc":
        return smc_sample(root, bound, model, particles=cfg.M, K=cfg.K,
                          alpha=cfg.alpha, gamma=cfg.gamma, rng=rng)
    if mode == "pg":
        return pg_refine(nets.policy, snapshot.snap_policy, root, model,
                         rollouts=max(10, cfg.N), depth=cfg.K,
                         alpha=cfg.alpha, gamma=cfg.gamma, rng=rng)
    raise ValueError(f"unknown action mode '{mode}'")


# ---------------------------------------------------------------------------
# Actors.
# ---------------------------------------------------------------------------

class Actor:
    """Owns one environment; turns decisions into replay snippets.

    Pulls a fresh parameter snapshot every `snapshot_refresh` interactions.
    """

    def __init__(self, actor_id: int, env, nets, snapshot_source, mode: str,
                 cfg: Config, rng: RngStream, replay: ReplayBuffer,
                 diagnostics: list | None = None):
        self.actor_id = actor_id
        self.env = env
        self.nets = nets
        self.snapshot_source = snapshot_source
        self.mode = mode
        self.cfg = cfg
        self.rng = rng
        self.replay = replay
        self.diagnostics = diagnostics
        self.interactions = 0
        self.episodes = 0
        self.snapshot: ParamsSnapshot | None = None
        self.refreshes = 0
        self.clipped_actions = 0

    def _maybe_refresh(self):
        if self.interactions % self.cfg.snapshot_refresh == 0 or self.snapshot is None:
            self.snapshot = self.snapshot_source()
            self.refreshes += 1

    def step_decision(self, env_state, obs):
        self._maybe_refresh()
        rng = self.rng.child(3, self.interactions)
        action = select_action(self.mode, self.snapshot, self.nets, self.env,
                               env_state, obs, self.cfg, rng, self.diagnostics)
        lo = np.asarray(self.env.spec.action_low)
        hi = np.asarray(self.env.spec.action_high)
        executed = np.clip(np.asarray(action, dtype=np.float64), lo, hi)
        if np.any(executed != action):
            self.clipped_actions += 1
        return executed

    def run_episode(self, stop_check=None) -> tuple[float, int]:
        """One episode; emits length-T snippets (tail may be shorter).

        A truthy `stop_check()` ends the episode early with the partial
        snippet flushed, so every executed transition reaches the replay."""
        env_state, obs = self.env.reset(self.rng.child(2, self.episodes))
        ep_return = 0.0
        ep_steps = 0
        buf: list[Transition] = []
        while True:
            action = self.step_decision(env_state, obs)
            res = self.env.step(env_state, action)
            buf.append(Transition(obs=obs, action=action, reward=res.reward,
                                  terminal=res.terminal, env_state=env_state))
            self.interactions += 1
            ep_return += res.reward
            ep_steps += 1
            stop_now = bool(stop_check()) if stop_check is not None else False
            if len(buf) == self.cfg.snippet_len or res.terminal or stop_now:
                self.replay.append(Snippet(tuple(buf)))
                buf = []
            env_state, obs = res.state, res.obs
            if res.terminal or stop_now:
                break
        self.episodes += 1
        return ep_return, ep_steps


# ---------------------------------------------------------------------------
# Checkpoints (include optimizer state so runs resume exactly).
# ---------------------------------------------------------------------------

def checkpoint_state(path: str, state: LearnerState, env_name: str,
                     extra_meta: dict | None = None) -> None:
    arrays = {f"params/{k}": v for k, v in state.params.items()}
    arrays["target_q"] = state.target_q
    arrays["snap_policy"] = state.snap_policy
    arrays["snap_q"] = state.snap_q
    for name, st in state.adam.items():
        arrays[f"adam/{name}/m"] = st.m
        arrays[f"adam/{name}/v"] = st.v
    arrays["adam/eta/m"] = state.eta_adam.m
    arrays["adam/eta/v"] = state.eta_adam.v
    meta = {
        "env": env_name,
        "mode": state.mode,
        "eta_raw": state.eta_raw,
        "steps": state.steps,
        "iteration": state.iteration,
        "adam_t": {name: st.t for name, st in state.adam.items()},
        "eta_adam_t": state.eta_adam.t,
        "config": state.cfg.to_dict(),
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, arrays, meta)


def restore_state(path: str) -> tuple[LearnerState, str, dict]:
    arrays, meta = load_checkpoint(path)
    cfg = Config(**meta["config"]).validate()
    env = make_env(meta["env"], cfg.init_noise)
    nets = build_nets(env.spec, cfg, meta["mode"])
    state = LearnerState(nets, cfg, meta["mode"], RngStream(cfg.seed))
    for name in state.params:
        state.params[name] = arrays[f"params/{name}"].copy()
        state.adam[name].m = arrays[f"adam/{name}/m"].copy()
        state.adam[name].v = arrays[f"adam/{name}/v"].copy()
        state.adam[name].t = int(meta["adam_t"][name])
    state.target_q = arrays["target_q"].copy()
    state.snap_policy = arrays["snap_policy"].copy()
    state.snap_q = arrays["snap_q"].copy()
    state.eta_adam.m = arrays["adam/eta/m"].copy()
    state.eta_adam.v = arrays["adam/eta/v"].copy()
    state.eta_adam.t = int(meta["eta_adam_t"])
    state.eta_raw = float(meta["eta_raw"])
    state.steps = int(meta["steps"])
    state.iteration = int(meta["iteration"])
    return state, meta["env"], meta


# ---------------------------------------------------------------------------
# Training.
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    episodes: int
    env_steps: int
    learner_steps: int
    episode_returns: list[float] = field(default_factory=list)
    outdir: str | None = None
    state: LearnerState | None = None
    env: object = None


def default_init_var(env) -> float:
    return 0.25 * float(np.mean(env.spec.action_range))


def train(cfg: Config, env_name: str, action_mode: str = "pi",
          model_mode: str = "learned", policy_loss: str = "treepi",
          total_env_steps: int = 10_000, outdir: str | None = None,
          learner_step_budget: int | None = None,
          episode_callback=None) -> TrainResult:
    """Run the policy-iteration training loop until the step budget."""
    if action_mode not in ACTION_MODES:
        raise ValueError(f"unknown action mode '{action_mode}'")
    if model_mode not in MODEL_MODES:
        raise ValueError(f"unknown model mode '{model_mode}'")
    if policy_loss not in POLICY_LOSSES:
        raise ValueError(f"unknown policy loss '{policy_loss}'")
    root = RngStream(cfg.seed)
    env = make_env(env_name, cfg.init_noise)
    nets = build_nets(env.spec, cfg, model_mode)
    state = LearnerState(nets, cfg, model_mode, root.child(1),
                         init_var=default_init_var(env))
    replay = ReplayBuffer(cfg.buffer_capacity)

    ep_writer = learner_writer = search_writer = None
    ckpt_dir = None
    if outdir:
        os.makedirs(outdir, exist_ok=True)
        ckpt_dir = os.path.join(outdir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        write_manifest(os.path.join(outdir, "manifest.txt"), cfg, {
            "content_hash": content_hash(),
            "seed": cfg.seed,
            "start_time": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "env": env_name,
            "action_mode": action_mode,
            "model_mode": model_mode,
            "policy_loss": policy_loss,
        })
        ep_writer = CsvWriter(os.path.join(outdir, "episodes.csv"), EPISODE_COLUMNS)
        learner_writer = CsvWriter(os.path.join(outdir, "learner.csv"), METRIC_COLUMNS)
        search_writer = CsvWriter(os.path.join(outdir, "search.csv"), SEARCH_COLUMNS)

    result = TrainResult(episodes=0, env_steps=0, learner_steps=0, outdir=outdir)
    result.state = state
    result.env = env
    start = time.time()
    try:
        if cfg.num_actors == 1:
            _train_sequential(cfg, env, nets, state, replay, root, action_mode,
                              policy_loss, total_env_steps, result, ep_writer,
                              learner_writer, search_writer, ckpt_dir, env_name,
                              start, learner_step_budget, episode_callback)
        else:
            _train_threaded(cfg, env_name, nets, state, replay, root, action_mode,
                            policy_loss, total_env_steps, result, ep_writer,
                            learner_writer, ckpt_dir, start)
    finally:
        for w in (ep_writer, learner_writer, search_writer):
            if w is not None:
                w.close()
    if ckpt_dir:
        checkpoint_state(os.path.join(ckpt_dir, "final.ckpt"), state, env_name)
    result.learner_steps = state.steps
    result.state = state
    result.env = env
    return result


def _learn_some(state, replay, cfg, policy_loss, root, learner_writer, env):
    """updates_per_step learner updates (skipped until min_replay)."""
    rows = []
    for _ in range(cfg.updates_per_step):
        if replay.transition_count < max(cfg.min_replay, cfg.snippet_len):
            break
        batch = replay.sample(cfg.batch_size, root.child(5, state.steps))
        metrics = learner_step(state, batch, policy_loss,
                               root.child(4, state.steps), search_env=env)
        rows.append(metrics)
        if learner_writer is not None:
            learner_writer.write(metrics)
    return rows


def _train_sequential(cfg, env, nets, state, replay, root, action_mode,
                      policy_loss, total_env_steps, result, ep_writer,
                      learner_writer, search_writer, ckpt_dir, env_name, start,
                      learner_step_budget, episode_callback):
    diagnostics: list = []
    actor = Actor(0, env, nets, state.publish, action_mode, cfg, root.child(2),
                  replay, diagnostics)
    # refresh cadence counts interactions, so publish is pulled inside Actor
    last_metrics: dict = {}
    while result.env_steps < total_env_steps and not (
            learner_step_budget is not None and state.steps >= learner_step_budget):
        env_state, obs = env.reset(actor.rng.child(2, actor.episodes))
        ep_return = 0.0
        buf: list[Transition] = []
        while True:
            action = actor.step_decision(env_state, obs)
            res = env.step(env_state, action)
            buf.append(Transition(obs=obs, action=action, reward=res.reward,
                                  terminal=res.terminal, env_state=env_state))
            actor.interactions += 1
            ep_return += res.reward
            result.env_steps += 1
            if len(buf) == cfg.snippet_len or res.terminal:
                replay.append(Snippet(tuple(buf)))
                buf = []
            if search_writer is not None and diagnostics:
                for d in diagnostics:
                    d["env_steps"] = result.env_steps
                    search_writer.write(d)
                diagnostics.clear()
            rows = _learn_some(state, replay, cfg, policy_loss, root,
                               learner_writer, env)
            if rows:
                last_metrics = rows[-1]
            env_state, obs = res.state, res.obs
            if res.terminal:
                break
            if learner_step_budget is not None and state.steps >= learner_step_budget:
                break
        actor.episodes += 1
        result.episodes += 1
        result.episode_returns.append(ep_return)
        if ep_writer is not None:
            ep_writer.write({
                "episode": result.episodes,
                "env_steps": result.env_steps,
                "learner_steps": state.steps,
                "avg_return": ep_return,
                "kl_to_snapshot": last_metrics.get("kl_to_snapshot", 0.0),
                "eta": last_metrics.get("eta", state.eta),
                "wallclock_s": round(time.time() - start, 3),
            })
        if ckpt_dir and result.episodes % cfg.checkpoint_every == 0:
            checkpoint_state(os.path.join(ckpt_dir, f"ep{result.episodes:06d}.ckpt"),
                             state, env_name)
        if episode_callback is not None:
            episode_callback(result)


def _train_threaded(cfg, env_name, nets, state, replay, root, action_mode,
                    policy_loss, total_env_steps, result, ep_writer,
                    learner_writer, ckpt_dir, start):
    """Actors on threads, learner in the main thread; replay and published
    snapshots are the only shared state."""
    stop = threading.Event()
    counters_lock = threading.Lock()
    publish_lock = threading.Lock()
    published: list[ParamsSnapshot] = [state.publish()]
    step_counter = {"n": 0}

    def snapshot_source():
        with publish_lock:
            return published[0]

    def on_step() -> bool:
        with counters_lock:
            step_counter["n"] += 1
            if step_counter["n"] >= total_env_steps:
                stop.set()
        return stop.is_set()

    learner_env = make_env(env_name, cfg.init_noise)

    def actor_loop(actor_id: int):
        env = make_env(env_name, cfg.init_noise)
        actor = Actor(actor_id, env, nets, snapshot_source, action_mode, cfg,
                      root.child(2, actor_id), replay)
        while not stop.is_set():
            ep_return, ep_steps = actor.run_episode(stop_check=on_step)
            with counters_lock:
                result.env_steps = step_counter["n"]
                result.episodes += 1
                result.episode_returns.append(ep_return)
                if ep_writer is not None:
                    ep_writer.write({
                        "episode": result.episodes,
                        "env_steps": result.env_steps,
                        "learner_steps": state.steps,
                        "avg_return": ep_return,
                        "kl_to_snapshot": 0.0,
                        "eta": state.eta,
                        "wallclock_s": round(time.time() - start, 3),
                    })

    threads = [threading.Thread(target=actor_loop, args=(i,), daemon=True)
               for i in range(cfg.num_actors)]
    for t in threads:
        t.start()
    while not stop.is_set():
        with counters_lock:
            steps_now = step_counter["n"]
        target_updates = cfg.updates_per_step * steps_now
        if state.steps < target_updates and \
                replay.transition_count >= max(cfg.min_replay, cfg.snippet_len):
            batch = replay.sample(cfg.batch_size, root.child(5, state.steps))
            metrics = learner_step(state, batch, policy_loss,
                                   root.child(4, state.steps), search_env=learner_env)
            if learner_writer is not None:
                learner_writer.write(metrics)
            with publish_lock:
                published[0] = state.publish()
        else:
            time.sleep(0.001)
    for t in threads:
        t.join(timeout=10.0)
    with counters_lock:
        result.env_steps = step_counter["n"]


# ---------------------------------------------------------------------------
# Evaluation.
# ---------------------------------------------------------------------------

def evaluate(checkpoint_path: str, episodes: int = 20, stochastic: bool = False,
             seed: int = 0, env_name: str | None = None):
    """Deterministic-policy evaluation (action = distribution mean) unless
    `stochastic`; returns (mean, std, per-episode returns)."""
    state, ckpt_env, meta = restore_state(checkpoint_path)
    if env_name is not None and env_name != ckpt_env:
        raise ValueError(f"manifest mismatch: checkpoint is for '{ckpt_env}', "
                         f"requested '{env_name}'")
    env = make_env(ckpt_env, state.cfg.init_noise)
    nets = state.nets
    rng = RngStream(seed)
    returns = []
    for ep in range(episodes):
        env_state, obs = env.reset(rng.child(1, ep))
        total = 0.0
        t = 0
        while True:
            if state.mode == "learned":
                feats, _ = nets.enc.forward(state.params["enc"],
                                            np.asarray(obs, dtype=np.float64))
            else:
                feats = np.asarray(obs, dtype=np.float64)
            if stochastic:
                actions, _ = nets.policy.sample_n(state.params["policy"], feats,
                                                  1, rng.child(2, ep, t))
                action = actions[0]
            else:
                mean, _, _ = nets.policy.dist(state.params["policy"], feats)
                action = mean
            lo = np.asarray(env.spec.action_low)
            hi = np.asarray(env.spec.action_high)
            res = env.step(env_state, np.clip(action, lo, hi))
            total += res.reward
            env_state, obs = res.state, res.obs
            t += 1
            if res.terminal:
                break
        returns.append(total)
    arr = np.asarray(returns)
    return float(arr.mean()), float(arr.std(ddof=1) if len(arr) > 1 else 0.0), returns
