"""Combined training objective over replayed snippets.

One learner step: freeze the stochastic inputs (bootstrap targets, search
results), evaluate the smooth combined loss (reward, Q, policy terms) with
exact gradients through the latent unroll, then apply per-parameter-set Adam
updates. The trust-region multiplier eta ascends the same loss the network
parameters descend.

Two model modes:
  * "learned": encoder/transition/reward nets define latent features; the
    policy-improvement search runs on the learned latent model.
  * "ground_truth": observations are the features, the reward model is the
    environment's own, and searches run on cloned environment states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .core import Config, RngStream, Snippet
from .envs import EnvSpec
from .nets import (AdamState, GaussianPolicyNet, Mlp, MlpSpec, adam_step,
                   gaussian_kl, gaussian_kl_backward, sigmoid, softplus,
                   softplus_inv, target_sync)
from .search import (BoundGaussianPolicy, GroundTruthModel, LearnedLatentModel,
                     treepi_search)


@dataclass
class Nets:
    policy: GaussianPolicyNet
    q: Mlp
    enc: Mlp | None = None
    trans: Mlp | None = None
    reward: Mlp | None = None
    feat_dim: int = 0
    action_dim: int = 0
    action_low: tuple[float, ...] = ()
    action_high: tuple[float, ...] = ()


def build_nets(env_spec: EnvSpec, cfg: Config, model_mode: str) -> Nets:
    h = (cfg.hidden_width, cfg.hidden_width)
    action_dim = env_spec.action_dim
    if model_mode == "learned":
        feat = cfg.latent_dim
        enc = Mlp(MlpSpec(env_spec.obs_dim, h, feat))
        trans = Mlp(MlpSpec(feat + action_dim, h, feat))
        reward = Mlp(MlpSpec(feat, h, 1))
    elif model_mode == "ground_truth":
        feat = env_spec.obs_dim
        enc = trans = reward = None
    else:
        raise ValueError(f"unknown model mode '{model_mode}'")
    policy = GaussianPolicyNet(feat, action_dim, h)
    q = Mlp(MlpSpec(feat + action_dim, h, 1))
    return Nets(policy=policy, q=q, enc=enc, trans=trans, reward=reward,
                feat_dim=feat, action_dim=action_dim,
                action_low=env_spec.action_low, action_high=env_spec.action_high)


@dataclass
class ParamsSnapshot:
    """Immutable parameter copies published to actors."""

    mode: str
    policy: np.ndarray          # live policy parameters
    snap_policy: np.ndarray     # iteration snapshot (the acting reference)
    snap_q: np.ndarray
    q: np.ndarray
    enc: np.ndarray | None
    trans: np.ndarray | None
    reward: np.ndarray | None
    iteration: int
    steps: int


class LearnerState:
    """All parameter sets, the dual variable, and the step/iteration counters."""

    def __init__(self, nets: Nets, cfg: Config, mode: str, rng: RngStream,
                 init_var: float = 1.0):
        self.nets = nets
        self.cfg = cfg
        self.mode = mode
        self.params: dict[str, np.ndarray] = {
            "policy": nets.policy.init(rng.child(0), init_var=init_var),
            "q": nets.q.init(rng.child(1)),
        }
        if mode == "learned":
            self.params["enc"] = nets.enc.init(rng.child(2))
            self.params["trans"] = nets.trans.init(rng.child(3), final_scale=0.1)
            self.params["reward"] = nets.reward.init(rng.child(4))
        self.target_q = self.params["q"].copy()
        self.snap_policy = self.params["policy"].copy()
        self.snap_q = self.params["q"].copy()
        # eta stored pre-softplus; softplus keeps the multiplier nonnegative
        self.eta_raw = softplus_inv(1.0)
        self.adam = {name: AdamState.for_params(p, cfg.learning_rate)
                     for name, p in self.params.items()}
        self.eta_adam = AdamState.for_params(np.zeros(1), cfg.eta_learning_rate)
        self.steps = 0
        self.iteration = 0

    @property
    def eta(self) -> float:
        return float(softplus(np.array([self.eta_raw]))[0])

    def publish(self) -> ParamsSnapshot:
        return ParamsSnapshot(
            mode=self.mode,
            policy=self.params["policy"].copy(),
            snap_policy=self.snap_policy.copy(),
            snap_q=self.snap_q.copy(),
            q=self.params["q"].copy(),
            enc=self.params["enc"].copy() if "enc" in self.params else None,
            trans=self.params["trans"].copy() if "trans" in self.params else None,
            reward=self.params["reward"].copy() if "reward" in self.params else None,
            iteration=self.iteration,
            steps=self.steps)

    def iteration_advance(self) -> None:
        """Copy the live policy and Q into the iteration snapshot."""
        self.snap_policy = self.params["policy"].copy()
        self.snap_q = self.params["q"].copy()
        self.iteration += 1


# ---------------------------------------------------------------------------
# Latent unroll.
# ---------------------------------------------------------------------------

def unroll_latent(nets: Nets, enc_params: np.ndarray, trans_params: np.ndarray,
                  obs0: np.ndarray, actions: np.ndarray):
    """Encode the first observation and roll the delta-transition forward.

    obs0: (B, obs_dim); actions: (B, T-1, A). Returns (latents (B, T, L),
    cache). Gradients flow through the whole unroll via unroll_backward.
    """
    obs0 = np.asarray(obs0, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    single = obs0.ndim == 1
    if single:
        obs0 = obs0[None, :]
        actions = actions[None, ...]
    b, t_minus_1 = actions.shape[0], actions.shape[1]
    lat0, enc_cache = nets.enc.forward(enc_params, obs0)
    latents = np.empty((b, t_minus_1 + 1, lat0.shape[-1]))
    latents[:, 0] = lat0
    step_caches = []
    for t in range(t_minus_1):
        x = np.concatenate([latents[:, t], actions[:, t]], axis=1)
        delta, cache = nets.trans.forward(trans_params, x)
        latents[:, t + 1] = latents[:, t] + delta
        step_caches.append(cache)
    if single:
        return latents[0], (enc_cache, step_caches, single)
    return latents, (enc_cache, step_caches, single)


def unroll_backward(nets: Nets, enc_params, trans_params, cache, dlatents):
    """Reverse pass of unroll_latent; dlatents: (B, T, L). Returns
    (d_enc_params, d_trans_params).

    With s_{t+1} = s_t + delta(s_t, a_t), the gradient flowing into s_t is the
    carried gradient from s_{t+1} (identity skip plus the delta's input path)
    plus the direct loss gradient at s_t.
    """
    enc_cache, step_caches, single = cache
    dlat = np.asarray(dlatents, dtype=np.float64)
    if single:
        dlat = dlat[None, ...]
    lat_dim = dlat.shape[-1]
    d_trans = np.zeros(nets.trans.n_params)
    carry = dlat[:, -1].copy()
    for t in reversed(range(len(step_caches))):
        dtp, dx = nets.trans.backward(trans_params, step_caches[t], carry)
        d_trans += dtp
        carry = carry + dx[:, :lat_dim] + dlat[:, t]
    d_enc, _ = nets.enc.backward(enc_params, enc_cache, carry)
    return d_enc, d_trans


# ---------------------------------------------------------------------------
# Individual loss terms (shared by the batched step and the tests).
# ---------------------------------------------------------------------------

def loss_reward(r_net: Mlp, r_params: np.ndarray, latent: np.ndarray,
                reward_target: float):
    """Squared reward-prediction error at one latent; returns
    (loss, d_params, d_latent)."""
    pred, cache = r_net.forward(r_params, latent)
    err = float(pred[0]) - float(reward_target)
    dparams, dlat = r_net.backward(r_params, cache, np.array([2.0 * err]))
    return err * err, dparams, dlat


def bootstrap_targets(policy_net: GaussianPolicyNet, snap_policy: np.ndarray,
                      q_net: Mlp, target_q: np.ndarray, next_feats: np.ndarray,
                      rewards: np.ndarray, gamma: float, s_boot: int,
                      rng: RngStream) -> np.ndarray:
    """TD targets r + gamma * E[Q'(s', a')] with the expectation estimated by
    s_boot reference-policy samples under the target network. Fully detached:
    callers treat the result as constants."""
    next_feats = np.atleast_2d(np.asarray(next_feats, dtype=np.float64))
    n = next_feats.shape[0]
    mean, var, _ = policy_net.dist(snap_policy, next_feats)
    z = rng.normal((n, s_boot, policy_net.action_dim))
    acts = mean[:, None, :] + np.sqrt(var)[:, None, :] * z
    rows = np.concatenate(
        [np.repeat(next_feats, s_boot, axis=0), acts.reshape(n * s_boot, -1)],
        axis=1)
    qvals, _ = q_net.forward(target_q, rows)
    boot = qvals[:, 0].reshape(n, s_boot).mean(axis=1)
    return np.asarray(rewards, dtype=np.float64) + gamma * boot


def loss_q(q_net: Mlp, q_params: np.ndarray, feats: np.ndarray,
           action: np.ndarray, target: float):
    """Squared TD error against a detached target; returns
    (loss, d_params, d_feats)."""
    feats = np.asarray(feats, dtype=np.float64)
    row = np.concatenate([feats, np.asarray(action, dtype=np.float64).ravel()])
    pred, cache = q_net.forward(q_params, row)
    err = float(pred[0]) - float(target)
    dparams, drow = q_net.backward(q_params, cache, np.array([2.0 * err]))
    return err * err, dparams, drow[:feats.shape[-1]]


def _kl_term(policy_net: GaussianPolicyNet, theta: np.ndarray,
             snap_policy: np.ndarray, feats: np.ndarray, eta: float,
             eps_kl: float, coef: float):
    """eta * (KL(snapshot || live) - eps_kl) at one state, with gradients for
    the live policy, the input features (both sides), and the raw dual."""
    mean_q, var_q, cache_q = policy_net.dist(theta, feats)
    mean_p, var_p, cache_p = policy_net.dist(snap_policy, feats)
    kl = float(gaussian_kl(mean_p, var_p, mean_q, var_q))
    loss = coef * eta * (kl - eps_kl)
    dmp, dvp, dmq, dvq = gaussian_kl_backward(mean_p, var_p, mean_q, var_q,
                                              upstream=coef * eta)
    dtheta, dfeat_q = policy_net.dist_backward(theta, cache_q, dmq, dvq)
    _, dfeat_p = policy_net.dist_backward(snap_policy, cache_p, dmp, dvp)
    return loss, kl, dtheta, dfeat_q + dfeat_p


def loss_policy_treepi(policy_net: GaussianPolicyNet, theta: np.ndarray,
                       snap_policy: np.ndarray, feats: np.ndarray,
                       actions: np.ndarray, weights: np.ndarray, eta_raw: float,
                       eps_kl: float, coef: float = 1.0):
    """Weighted cross-entropy to the search's root action distribution plus
    the trust-region term. Returns (loss, kl, d_theta, d_feats, d_eta_raw)."""
    feats = np.asarray(feats, dtype=np.float64)
    eta = float(softplus(np.array([eta_raw]))[0])
    w = np.asarray(weights, dtype=np.float64)
    acts = np.asarray(actions, dtype=np.float64)
    tile = np.tile(feats, (len(w), 1))
    logps, d_theta, d_rows = policy_net.weighted_logp_backward(
        theta, tile, acts, -coef * w)
    ce = -float(np.dot(w, logps))
    d_theta = d_theta.copy()
    d_feats = d_rows.sum(axis=0)
    kl_loss, kl, d_theta_kl, d_feats_kl = _kl_term(
        policy_net, theta, snap_policy, feats, eta, eps_kl, coef)
    d_eta_raw = coef * (kl - eps_kl) * float(sigmoid(np.array([eta_raw]))[0])
    return (coef * ce + kl_loss, kl, d_theta + d_theta_kl,
            d_feats + d_feats_kl, d_eta_raw)


def loss_policy_bc(policy_net: GaussianPolicyNet, theta: np.ndarray,
                   snap_policy: np.ndarray, feats: np.ndarray,
                   action: np.ndarray, eta_raw: float, eps_kl: float,
                   coef: float = 1.0):
    """Negative log-likelihood of the replayed action plus the trust-region
    term. Returns (loss, kl, d_theta, d_feats, d_eta_raw)."""
    return loss_policy_treepi(policy_net, theta, snap_policy, feats,
                              np.asarray(action)[None, :], np.array([1.0]),
                              eta_raw, eps_kl, coef)


# ---------------------------------------------------------------------------
# Frozen step inputs and the smooth combined loss.
# ---------------------------------------------------------------------------

@dataclass
class FrozenGroup:
    obs: np.ndarray          # (B, T, obs_dim)
    actions: np.ndarray      # (B, T-1, A) actions a_1 .. a_{T-1}
    rewards: np.ndarray      # (B, T-1)   step rewards
    q_targets: np.ndarray    # (B, T-1)   detached TD targets
    search_items: list       # (b, t, actions (M, A) or atoms, weights (M,))
    policy_scale: float      # upweights subsampled policy terms


@dataclass
class FrozenStep:
    groups: list[FrozenGroup]
    n_snippets: int
    policy_mode: str


def _snippet_arrays(snippet: Snippet):
    obs = np.stack([tr.obs for tr in snippet.transitions])
    actions = np.stack([tr.action for tr in snippet.transitions[:-1]])
    rewards = np.array([tr.reward for tr in snippet.transitions[:-1]])
    return obs, actions, rewards


def prepare_step(state: LearnerState, batch: list[Snippet], policy_mode: str,
                 rng: RngStream, search_env=None) -> FrozenStep:
    """Freeze every stochastic input of one learner step: TD targets and, in
    treepi mode, the per-state search results."""
    cfg = state.cfg
    nets = state.nets
    by_len: dict[int, list[Snippet]] = {}
    for sn in batch:
        if len(sn) < 2:
            continue  # a lone transition has no TD or unroll signal
        by_len.setdefault(len(sn), []).append(sn)

    groups = []
    gi = 0
    for t_len, snips in sorted(by_len.items()):
        arrays = [_snippet_arrays(s) for s in snips]
        obs = np.stack([a[0] for a in arrays])
        actions = np.stack([a[1] for a in arrays])
        rewards = np.stack([a[2] for a in arrays])
        b = len(snips)
        if state.mode == "learned":
            latents, _ = unroll_latent(nets, state.params["enc"],
                                       state.params["trans"], obs[:, 0], actions)
        else:
            latents = obs
        feat_rows_next = latents[:, 1:].reshape(b * (t_len - 1), -1)
        q_targets = bootstrap_targets(
            nets.policy, state.snap_policy, nets.q, state.target_q,
            feat_rows_next, rewards.reshape(-1), cfg.gamma, cfg.s_boot,
            rng.child(0, gi)).reshape(b, t_len - 1)

        search_items = []
        policy_scale = 1.0
        if policy_mode == "treepi":
            all_items = [(bi, t) for bi in range(b) for t in range(t_len - 1)]
            if cfg.search_subsample and cfg.search_subsample < len(all_items):
                pick = rng.child(1, gi).integers(0, len(all_items),
                                                 size=cfg.search_subsample)
                chosen = [all_items[int(i)] for i in pick]
                policy_scale = len(all_items) / float(cfg.search_subsample)
            else:
                chosen = all_items
            bound = BoundGaussianPolicy(nets.policy, state.snap_policy)
            for idx, (bi, t) in enumerate(chosen):
                if state.mode == "learned":
                    model = LearnedLatentModel(
                        nets.enc, state.params["enc"], nets.trans,
                        state.params["trans"], nets.reward,
                        state.params["reward"], nets.q, state.snap_q,
                        action_low=nets.action_low, action_high=nets.action_high)
                    res = treepi_search(None, bound,
                                        _FixedRootModel(model, latents[bi, t]),
                                        M=cfg.M, K=cfg.K, N=cfg.N,
                                        alpha=cfg.alpha, gamma=cfg.gamma,
                                        rng=rng.child(2, gi, idx))
                else:
                    model = GroundTruthModel(search_env, nets.q, state.snap_q)
                    env_state = snips[bi].transitions[t].env_state
                    if env_state is None:
                        raise ValueError("ground-truth searches need stored env states")
                    res = treepi_search(env_state, bound, model, M=cfg.M, K=cfg.K,
                                        N=cfg.N, alpha=cfg.alpha, gamma=cfg.gamma,
                                        rng=rng.child(2, gi, idx))
                search_items.append((bi, t, np.asarray(res.actions, dtype=np.float64),
                                     res.weights))
        groups.append(FrozenGroup(obs=obs, actions=actions, rewards=rewards,
                                  q_targets=q_targets, search_items=search_items,
                                  policy_scale=policy_scale))
        gi += 1
    return FrozenStep(groups=groups, n_snippets=sum(len(v) for v in by_len.values()),
                      policy_mode=policy_mode)


class _FixedRootModel:
    """Latent model whose root is a precomputed latent (skips the encoder)."""

    def __init__(self, model: LearnedLatentModel, root_latent: np.ndarray):
        self._model = model
        self._root = root_latent

    def root(self, _):
        return self._root

    def features(self, mstate):
        return self._model.features(mstate)

    def step(self, mstate, action):
        return self._model.step(mstate, action)

    def leaf_q_many(self, mstate, actions):
        return self._model.leaf_q_many(mstate, actions)


def loss_and_grads(state: LearnerState, frozen: FrozenStep):
    """Evaluate the combined loss and exact gradients at the state's current
    parameters, holding the frozen inputs fixed (finite-difference checkable)."""
    cfg = state.cfg
    nets = state.nets
    coef = 1.0 / max(1, frozen.n_snippets)
    grads = {name: np.zeros_like(p) for name, p in state.params.items()}
    d_eta_raw = 0.0
    totals = {"loss_r": 0.0, "loss_q": 0.0, "loss_pi": 0.0}
    kl_values = []

    for group in frozen.groups:
        b, t_len = group.obs.shape[0], group.obs.shape[1]
        n_rows = b * (t_len - 1)
        if state.mode == "learned":
            latents, unroll_cache = unroll_latent(
                nets, state.params["enc"], state.params["trans"],
                group.obs[:, 0], group.actions)
        else:
            latents = group.obs
        dlat = np.zeros_like(latents)

        # reward prediction: pair each step reward with the arrival latent
        if state.mode == "learned":
            next_rows = latents[:, 1:].reshape(n_rows, -1)
            preds, r_cache = nets.reward.forward(state.params["reward"], next_rows)
            errs = preds[:, 0] - group.rewards.reshape(-1)
            totals["loss_r"] += coef * float(np.dot(errs, errs))
            dr_params, dr_rows = nets.reward.backward(
                state.params["reward"], r_cache, (2.0 * coef * errs)[:, None])
            grads["reward"] += dr_params
            dlat[:, 1:] += dr_rows.reshape(b, t_len - 1, -1)

        # TD regression against the frozen targets
        feat_rows = latents[:, :-1].reshape(n_rows, -1)
        act_rows = group.actions.reshape(n_rows, -1)
        q_rows = np.concatenate([feat_rows, act_rows], axis=1)
        q_pred, q_cache = nets.q.forward(state.params["q"], q_rows)
        q_errs = q_pred[:, 0] - group.q_targets.reshape(-1)
        totals["loss_q"] += coef * float(np.dot(q_errs, q_errs))
        dq_params, dq_rows = nets.q.backward(
            state.params["q"], q_cache, (2.0 * coef * q_errs)[:, None])
        grads["q"] += dq_params
        dlat[:, :-1] += dq_rows[:, :latents.shape[-1]].reshape(b, t_len - 1, -1)

        # policy loss
        if frozen.policy_mode == "treepi":
            for bi, t, acts, weights in group.search_items:
                item_coef = coef * group.policy_scale
                loss, kl, d_theta, d_feats, d_eta = loss_policy_treepi(
                    nets.policy, state.params["policy"], state.snap_policy,
                    latents[bi, t], acts, weights, state.eta_raw, cfg.eps_kl,
                    coef=item_coef)
                totals["loss_pi"] += loss
                grads["policy"] += d_theta
                dlat[bi, t] += d_feats
                d_eta_raw += d_eta
                kl_values.append(kl)
        else:
            for bi in range(b):
                for t in range(t_len - 1):
                    loss, kl, d_theta, d_feats, d_eta = loss_policy_bc(
                        nets.policy, state.params["policy"], state.snap_policy,
                        latents[bi, t], group.actions[bi, t], state.eta_raw,
                        cfg.eps_kl, coef=coef)
                    totals["loss_pi"] += loss
                    grads["policy"] += d_theta
                    dlat[bi, t] += d_feats
                    d_eta_raw += d_eta
                    kl_values.append(kl)

        if state.mode == "learned":
            d_enc, d_trans = unroll_backward(
                nets, state.params["enc"], state.params["trans"],
                unroll_cache, dlat)
            grads["enc"] += d_enc
            grads["trans"] += d_trans

    loss_total = totals["loss_r"] + totals["loss_q"] + totals["loss_pi"]
    mean_kl = float(np.mean(kl_values)) if kl_values else 0.0
    return loss_total, grads, d_eta_raw, {**totals, "kl_to_snapshot": mean_kl}


METRIC_COLUMNS = ("learner_steps", "iteration", "loss_r", "loss_q", "loss_pi",
                  "kl_to_snapshot", "eta", "grad_norm")


def learner_step(state: LearnerState, batch: list[Snippet], policy_mode: str,
                 rng: RngStream, search_env=None) -> dict[str, float]:
    """One full learner update; returns the metrics row.

    A non-finite loss or gradient aborts the step (parameters unchanged,
    `aborted` flag set in the metrics).
    """
    frozen = prepare_step(state, batch, policy_mode, rng, search_env=search_env)
    loss, grads, d_eta_raw, parts = loss_and_grads(state, frozen)

    finite = math.isfinite(loss) and math.isfinite(d_eta_raw) and all(
        np.all(np.isfinite(g)) for g in grads.values())
    metrics = {
        "learner_steps": state.steps + 1,
        "iteration": state.iteration,
        "loss_r": parts["loss_r"],
        "loss_q": parts["loss_q"],
        "loss_pi": parts["loss_pi"],
        "kl_to_snapshot": parts["kl_to_snapshot"],
        "eta": state.eta,
        "grad_norm": float(np.sqrt(sum(float(np.dot(g, g)) for g in grads.values())))
        if finite else float("nan"),
        "aborted": 0.0,
    }
    if not finite:
        metrics["aborted"] = 1.0
        return metrics

    for name in state.params:
        state.params[name] = adam_step(state.params[name], grads[name],
                                       state.adam[name])
    # the dual ascends what the network parameters descend
    eta_vec = adam_step(np.array([state.eta_raw]), np.array([-d_eta_raw]),
                        state.eta_adam)
    state.eta_raw = float(eta_vec[0])
    state.steps += 1
    metrics["eta"] = state.eta

    if state.steps % state.cfg.target_sync_period == 0:
        target_sync(state.params["q"], state.target_q)
    if state.steps % state.cfg.target_rate == 0:
        state.iteration_advance()
        metrics["iteration"] = state.iteration
    return metrics
