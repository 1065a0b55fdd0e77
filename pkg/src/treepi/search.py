"""Tree-search policy improvement over a deterministic step-and-bootstrap model.

The tree stores, per node, M policy samples and a soft-Q table. Walks resample
actions proportionally to exp(Q/alpha), expand one node per rollout, and back
up log-mean-exp values along the walked path. Root weights are the
self-normalized importance weights over the root's M actions.

Depth accounting: a search of depth K keeps leaf nodes at node-depth K-1, so
K=1 performs no model steps and reduces exactly to one-step improvement
(weights = softmax of the bootstrap Q at the root's samples).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .core import RngStream
from .nets import (LOG_2PI, AdamState, GaussianPolicyNet, Mlp, adam_step,
                   softplus)

# stream tags: every search derives private substreams from the rng it is
# handed, keyed so node action draws depend only on the node's action path
TAG_NODE_ACTIONS = 1
TAG_WALK = 2
TAG_FINAL_DRAW = 3
TAG_ROLLOUT = 4
TAG_SMC = 5
TAG_PG = 6


def node_action_stream(rng: RngStream, path: tuple[int, ...]) -> RngStream:
    """Action-sampling stream for the node reached via `path` (root = ())."""
    return rng.child(TAG_NODE_ACTIONS, *path)


def soft_backup(q_values: np.ndarray, alpha: float) -> float:
    """alpha * log-mean-exp(q / alpha), max-shifted."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if isinstance(q_values, np.ndarray) and q_values.ndim == 1 and q_values.size <= 16:
        vals = q_values.tolist()
        m = max(vals)
        if not math.isfinite(m) or not math.isfinite(min(vals)):
            raise ValueError("non-finite Q values")
        total = 0.0
        for v in vals:
            total += math.exp((v - m) / alpha)
        return m + alpha * (math.log(total) - math.log(len(vals)))
    q = np.asarray(q_values, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite Q values")
    m = q.max()
    return float(m + alpha * (math.log(np.exp((q - m) / alpha).sum()) - math.log(q.size)))


def resample_probs(q_values: np.ndarray, alpha: float) -> np.ndarray:
    """softmax(q / alpha), max-shifted; sums to 1."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    q = np.asarray(q_values, dtype=np.float64)
    w = np.exp((q - q.max()) / alpha)
    return w / w.sum()


def resample_action(actions: Sequence, q_values: np.ndarray, alpha: float,
                    rng: RngStream) -> tuple[int, Any]:
    """Categorical draw over `actions` with probabilities softmax(q / alpha)."""
    probs = resample_probs(q_values, alpha)
    idx = rng.categorical(probs)
    return idx, actions[idx]


class TreeNode:
    __slots__ = ("parent", "index_in_parent", "reward_in", "depth", "mstate",
                 "actions", "q", "children", "complete", "cdf")

    def __init__(self, parent, index_in_parent, reward_in, depth, mstate,
                 actions, q, is_leaf_depth):
        self.parent = parent
        self.index_in_parent = index_in_parent
        self.reward_in = reward_in
        self.depth = depth
        self.mstate = mstate
        self.actions = actions
        self.q = q
        self.children: list[TreeNode | None] = [None] * len(q)
        self.complete = bool(is_leaf_depth)
        self.cdf = None  # cached resample CDF, dropped when q changes


@dataclass
class SearchResult:
    actions: Sequence
    weights: np.ndarray
    root_q: np.ndarray
    rollouts_used: int
    nodes: int
    max_depth: int

    def weight_entropy(self) -> float:
        w = self.weights[self.weights > 0]
        return float(-(w * np.log(w)).sum())


def _check_tree(root: TreeNode, k: int) -> None:
    stack = [root]
    while stack:
        node = stack.pop()
        assert node.depth <= k - 1
        assert len(node.children) == len(node.q)
        for child in node.children:
            if child is not None:
                assert child.depth == node.depth + 1
                stack.append(child)


def treepi_search(root_input, policy, model, *, M: int, K: int, N: int,
                  alpha: float, gamma: float, mode: str = "standard",
                  rng: RngStream, check_invariants: bool = False) -> SearchResult:
    """Build a search tree with N rollouts and return root actions + weights.

    `mode="exhaustive"` masks fully expanded subtrees during resampling, so the
    complete tree is reached within N = M**K rollouts and the run stops early
    once the root subtree is complete. The caller should hand each invocation
    a fresh derived rng stream.

    Each rollout walks from the root resampling actions by softmax(Q/alpha);
    it descends into existing non-leaf children, stops at existing leaf-depth
    children, and otherwise steps the model once to expand a new child (M
    fresh policy samples, Q table initialized from the model's bootstrap Q).
    The backup then rewrites Q[incoming action] = step reward + gamma *
    soft_backup(child table) for every node on the walked path.
    """
    if mode not in ("standard", "exhaustive"):
        raise ValueError(f"unknown mode '{mode}'")
    if N < 1 or M < 1 or K < 1:
        raise ValueError("M, K, N must all be >= 1")
    leaf_depth = K - 1
    walk_rng = rng.child(TAG_WALK)
    mstate0 = model.root(root_input)
    exhaustive = mode == "exhaustive"

    nodes = 0
    max_depth = 0

    def make_node(parent, j, reward_in, depth, mstate, path):
        nonlocal nodes, max_depth
        feats = model.features(mstate)
        actions = policy.sample_n(feats, M, node_action_stream(rng, path))
        q = np.asarray(model.leaf_q_many(mstate, actions), dtype=np.float64).copy()
        nodes += 1
        max_depth = max(max_depth, depth)
        return TreeNode(parent, j, reward_in, depth, mstate, actions, q,
                        depth == leaf_depth)

    root: TreeNode | None = None
    rollouts = 0
    while rollouts < N:
        if root is not None and exhaustive and root.complete:
            break
        rollouts += 1
        if root is None:
            root = make_node(None, None, 0.0, 0, mstate0, ())
            continue

        # forward walk
        node = root
        path: list[int] = []
        end = root
        while True:
            if node.depth == leaf_depth:
                end = node
                break
            if exhaustive:
                mask = np.array([c is not None and c.complete for c in node.children])
                if mask.all():
                    end = node
                    break
                live = node.q[~mask]
                w = np.zeros(len(node.q))
                w[~mask] = np.exp((live - live.max()) / alpha)
                probs = w / w.sum()
                j = walk_rng.categorical(probs)
            else:
                cdf = node.cdf
                if cdf is None:
                    cdf = np.cumsum(resample_probs(node.q, alpha))
                    node.cdf = cdf
                u = walk_rng.random() * cdf[-1]
                j = int(np.searchsorted(cdf, u, side="right"))
                if j >= len(cdf):
                    j = len(cdf) - 1
            path.append(j)
            child = node.children[j]
            if child is None:
                mstate2, reward = model.step(node.mstate, node.actions[j])
                child = make_node(node, j, float(reward), node.depth + 1,
                                  mstate2, tuple(path))
                node.children[j] = child
                end = child
                break
            if child.depth == leaf_depth:
                end = child
                break
            node = child

        # soft backup along the walked path
        n = end
        while n.parent is not None:
            v = soft_backup(n.q, alpha)
            new_q = n.reward_in + gamma * v
            parent = n.parent
            if parent.q[n.index_in_parent] != new_q:
                parent.q[n.index_in_parent] = new_q
                parent.cdf = None
            if not parent.complete:
                parent.complete = all(
                    c is not None and c.complete for c in parent.children)
            n = parent
        if check_invariants:
            _check_tree(root, K)

    weights = resample_probs(root.q, alpha)
    return SearchResult(actions=root.actions, weights=weights,
                        root_q=root.q.copy(), rollouts_used=rollouts,
                        nodes=nodes, max_depth=max_depth)


def act_search(root_input, policy, model, *, M: int, K: int, N: int,
               alpha: float, gamma: float, mode: str = "standard",
               rng: RngStream, result_out: list | None = None):
    """Run a search and draw one action from the root weights."""
    res = treepi_search(root_input, policy, model, M=M, K=K, N=N, alpha=alpha,
                        gamma=gamma, mode=mode, rng=rng)
    idx = rng.child(TAG_FINAL_DRAW).categorical(res.weights)
    if result_out is not None:
        result_out.append(res)
    return res.actions[idx]


# ---------------------------------------------------------------------------
# Path-integral reweighting: whole K-step rollouts under the policy.
# ---------------------------------------------------------------------------

def pi_rollout_weights(root_input, policy, model, *, M: int, K: int,
                       alpha: float, gamma: float, rng: RngStream) -> SearchResult:
    """M independent K-step policy rollouts, reweighted by exponentiated
    discounted return plus bootstrap; self-normalized over the first actions."""
    mstate0 = model.root(root_input)
    feats0 = model.features(mstate0)
    first_actions = list(policy.sample_n(feats0, M, node_action_stream(rng, ())))
    returns = np.zeros(M)
    for j in range(M):
        stream = rng.child(TAG_ROLLOUT, j)
        action = first_actions[j]
        state = mstate0
        ret = 0.0
        disc = 1.0
        for _ in range(K - 1):
            state, reward = model.step(state, action)
            ret += disc * float(reward)
            disc *= gamma
            action = policy.sample_n(model.features(state), 1, stream)[0]
        leaf = float(np.asarray(model.leaf_q_many(state, [action]))[0])
        returns[j] = ret + disc * leaf
    weights = resample_probs(returns, alpha)
    return SearchResult(actions=first_actions, weights=weights, root_q=returns,
                        rollouts_used=M, nodes=M, max_depth=K - 1)


# ---------------------------------------------------------------------------
# Sequential Monte Carlo targeting the same reweighted-rollout density.
# ---------------------------------------------------------------------------

def smc_sample(root_input, policy, model, *, particles: int, K: int,
               alpha: float, gamma: float, rng: RngStream,
               metrics: dict | None = None):
    """P particles follow the policy, resampled each step by the exponentiated
    stepwise reward contribution; returns the first action of the survivor."""
    if particles < 1:
        raise ValueError("need at least one particle")
    stream = rng.child(TAG_SMC)
    mstate0 = model.root(root_input)
    feats0 = model.features(mstate0)
    actions = list(policy.sample_n(feats0, particles, stream))
    first = list(actions)
    states = [mstate0] * particles

    def _resample(log_w: np.ndarray):
        nonlocal states, first, actions
        log_w = np.asarray(log_w, dtype=np.float64)
        finite = np.isfinite(log_w)
        if not finite.any():
            if metrics is not None:
                metrics["smc_uniform_fallback"] = metrics.get("smc_uniform_fallback", 0) + 1
            probs = np.full(particles, 1.0 / particles)
        else:
            w = np.zeros(particles)
            w[finite] = np.exp(log_w[finite] - log_w[finite].max())
            total = w.sum()
            if total <= 0:
                if metrics is not None:
                    metrics["smc_uniform_fallback"] = metrics.get("smc_uniform_fallback", 0) + 1
                probs = np.full(particles, 1.0 / particles)
            else:
                probs = w / total
        return probs

    disc = 1.0
    for _ in range(K - 1):
        rewards = np.zeros(particles)
        new_states = []
        for p in range(particles):
            s2, r = model.step(states[p], actions[p])
            new_states.append(s2)
            rewards[p] = float(r)
        states = new_states
        with np.errstate(over="ignore"):
            probs = _resample(disc * rewards / alpha)
        cdf = np.cumsum(probs)
        draws = stream.uniform(size=particles) * cdf[-1]
        idx = np.searchsorted(cdf, draws, side="right").clip(0, particles - 1)
        states = [states[int(i)] for i in idx]
        first = [first[int(i)] for i in idx]
        disc *= gamma
        actions = [policy.sample_n(model.features(s), 1, stream)[0] for s in states]

    leafs = np.array([float(np.asarray(model.leaf_q_many(states[p], [actions[p]]))[0])
                      for p in range(particles)])
    with np.errstate(over="ignore"):
        probs = _resample(disc * leafs / alpha)
    winner = stream.categorical(probs)
    return first[winner]


# ---------------------------------------------------------------------------
# Policy-gradient action refinement: temporary parameter update at act time.
# ---------------------------------------------------------------------------

def pg_collect(policy_net: GaussianPolicyNet, theta: np.ndarray,
               theta_ref: np.ndarray, root_input, model, *, rollouts: int,
               depth: int, alpha: float, gamma: float, rng: RngStream):
    """Roll out the current policy against the model and return the frozen
    score-function data: (feats (R*D, F), actions (R*D, A), weights (R*D,)),
    where each weight is the discounted regularized reward-to-go divided by
    the rollout count. KL terms enter as per-sample log-density ratios and the
    tail bootstraps with the model's Q at a reference-policy action."""
    mstate0 = model.root(root_input)
    feats_rows, action_rows, coef_rows = [], [], []
    for r in range(rollouts):
        stream = rng.child(TAG_PG, r)
        state = mstate0
        feats_t, acts_t, contribs = [], [], []
        disc = 1.0
        for t in range(depth):
            feats = np.asarray(model.features(state), dtype=np.float64)
            acts, logps = policy_net.sample_n(theta, feats, 1, stream)
            action = acts[0]
            logp_ref = float(policy_net.log_prob(theta_ref, feats, action[None, :])[0])
            kl_hat = float(logps[0]) - logp_ref
            state, reward = model.step(state, action)
            feats_t.append(feats)
            acts_t.append(action)
            contribs.append(disc * (float(reward) - alpha * kl_hat))
            disc *= gamma
        boot_feats = np.asarray(model.features(state), dtype=np.float64)
        boot_action, _ = policy_net.sample_n(theta_ref, boot_feats, 1, stream)
        v_boot = float(np.asarray(model.leaf_q_many(state, boot_action))[0])
        # reward-to-go with absolute discounting plus discounted bootstrap
        tail = disc * v_boot
        rtg = np.empty(depth)
        acc = tail
        for t in reversed(range(depth)):
            acc += contribs[t]
            rtg[t] = acc
        feats_rows.extend(feats_t)
        action_rows.extend(acts_t)
        coef_rows.extend(rtg.tolist())
    return (np.asarray(feats_rows), np.asarray(action_rows),
            np.asarray(coef_rows) / rollouts)


def pg_gradient(policy_net: GaussianPolicyNet, theta: np.ndarray,
                theta_ref: np.ndarray, root_input, model, *, rollouts: int,
                depth: int, alpha: float, gamma: float, rng: RngStream):
    """Likelihood-ratio estimate of the ascent direction of the regularized
    K-step return: the gradient of sum_t stopgrad(R_t) * log pi(a_t | s_t)
    over freshly collected rollouts."""
    feats, actions, weights = pg_collect(
        policy_net, theta, theta_ref, root_input, model, rollouts=rollouts,
        depth=depth, alpha=alpha, gamma=gamma, rng=rng)
    _, dparams, _ = policy_net.weighted_logp_backward(theta, feats, actions,
                                                      weights)
    return dparams


def pg_refine(policy_net: GaussianPolicyNet, theta0: np.ndarray, root_input,
              model, *, steps: int = 10, rollouts: int = 100, depth: int = 10,
              lr: float = 0.0005, alpha: float, gamma: float, rng: RngStream,
              metrics: dict | None = None, theta_out: list | None = None):
    """Clone the policy parameters, ascend the regularized K-step return for a
    few steps, sample one action from the refined policy, discard the clone.

    A non-finite gradient aborts the refinement and acts with the original
    parameters (flagged in `metrics`). `theta_out`, when given, receives the
    refined parameter vector (diagnostics only)."""
    theta = theta0.copy()
    opt = AdamState.for_params(theta, lr)
    for step in range(steps):
        grad = pg_gradient(policy_net, theta, theta0, root_input, model,
                           rollouts=rollouts, depth=depth, alpha=alpha,
                           gamma=gamma, rng=rng.child(TAG_PG, 1000 + step))
        if not np.all(np.isfinite(grad)):
            if metrics is not None:
                metrics["pg_aborts"] = metrics.get("pg_aborts", 0) + 1
            theta = theta0
            break
        theta = adam_step(theta, -grad, opt)
    if theta_out is not None:
        theta_out.append(theta)
    mstate0 = model.root(root_input)
    feats = np.asarray(model.features(mstate0), dtype=np.float64)
    actions, _ = policy_net.sample_n(theta, feats, 1, rng.child(TAG_FINAL_DRAW))
    return actions[0]


# ---------------------------------------------------------------------------
# Search models: the deterministic step/bootstrap interfaces the search uses.
# ---------------------------------------------------------------------------

class ChainModel:
    """Finite-support model over a ChainSpec; bootstrap Q from the leaf table."""

    def __init__(self, env):
        self.env = env
        self.chain = env.chain

    def root(self, root_input):
        from .envs import ChainState
        if isinstance(root_input, ChainState):
            return root_input
        return ChainState(str(root_input), 0)

    def features(self, mstate):
        return mstate.node

    def step(self, mstate, atom):
        res = self.env.step(mstate, atom)
        return res.state, res.reward

    def leaf_q_many(self, mstate, atoms) -> np.ndarray:
        table = self.chain.leaf_q
        return np.array([table[(mstate.node, a)] for a in atoms])


class GroundTruthModel:
    """Wraps a clonable environment plus a parametric bootstrap Q on features.

    Actions are clipped to the environment bounds before evaluation, matching
    what execution would do (the networks only ever train on executed
    actions)."""

    def __init__(self, env, q_net: Mlp, q_params: np.ndarray):
        self.env = env
        self.q_net = q_net
        self.q_params = q_params
        self._q = q_net.bind(q_params)
        self._lo = np.asarray(env.spec.action_low)
        self._hi = np.asarray(env.spec.action_high)

    def root(self, env_state):
        return env_state

    def features(self, mstate) -> np.ndarray:
        return self.env.observe(mstate)

    def step(self, mstate, action):
        res = self.env.step(mstate, action)
        return res.state, res.reward

    def leaf_q_many(self, mstate, actions) -> np.ndarray:
        feats = self.env.observe(mstate)
        acts = np.clip(np.asarray(actions, dtype=np.float64), self._lo, self._hi)
        rows = np.concatenate([np.tile(feats, (len(acts), 1)), acts], axis=1)
        return self._q.forward(rows)[:, 0]


class LearnedLatentModel:
    """Encoder / delta-transition / reward / Q stack acting in latent space.

    When action bounds are given, queries are clipped to them: the model is
    only trained on executed (in-bound) actions, and unclipped planner samples
    would otherwise probe it far off-distribution."""

    def __init__(self, enc_net: Mlp, enc_params, trans_net: Mlp, trans_params,
                 reward_net: Mlp, reward_params, q_net: Mlp, q_params,
                 action_low=None, action_high=None):
        self._enc = enc_net.bind(enc_params)
        self._trans = trans_net.bind(trans_params)
        self._reward = reward_net.bind(reward_params)
        self._q = q_net.bind(q_params)
        self._lo = None if action_low is None else np.asarray(action_low)
        self._hi = None if action_high is None else np.asarray(action_high)

    def _clip(self, actions: np.ndarray) -> np.ndarray:
        if self._lo is None:
            return actions
        return np.clip(actions, self._lo, self._hi)

    def root(self, obs) -> np.ndarray:
        return self._enc.forward(np.asarray(obs, dtype=np.float64))

    def features(self, mstate) -> np.ndarray:
        return mstate

    def step(self, mstate, action):
        act = self._clip(np.asarray(action, dtype=np.float64).ravel())
        x = np.concatenate([mstate, act])
        nxt = mstate + self._trans.forward(x)
        reward = self._reward.forward(nxt)
        return nxt, float(reward[0])

    def leaf_q_many(self, mstate, actions) -> np.ndarray:
        acts = self._clip(np.asarray(actions, dtype=np.float64))
        rows = np.concatenate([np.tile(mstate, (len(acts), 1)), acts], axis=1)
        return self._q.forward(rows)[:, 0]


class BoundGaussianPolicy:
    """Gaussian policy net bound to fixed parameters, for use by the search."""

    def __init__(self, net: GaussianPolicyNet, params: np.ndarray):
        self.net = net
        self.params = params
        self._trunk = net.mlp.bind(params)
        self._adim = net.action_dim

    def sample_n(self, feats, n: int, rng: RngStream) -> np.ndarray:
        y = self._trunk.forward(np.asarray(feats, dtype=np.float64))
        mean = y[..., :self._adim]
        std = np.sqrt(softplus(y[..., self._adim:]))
        return mean + std * rng.normal((n, self._adim))

    def log_prob(self, feats, action) -> float:
        y = self._trunk.forward(np.asarray(feats, dtype=np.float64))
        mean = y[..., :self._adim]
        var = softplus(y[..., self._adim:])
        d = np.asarray(action, dtype=np.float64) - mean
        return float(-0.5 * np.sum(d * d / var + np.log(var) + LOG_2PI))
