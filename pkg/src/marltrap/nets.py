"""Minimal fixed-topology neural core for recurrent Q-decomposition training.

Everything is float64 numpy with hand-written backward passes.  Layers cache
forward activations on a stack, so a recurrent unroll is just repeated
`forward(..., cache=True)` calls followed by `backward` calls in reverse
order.  There is no autodiff graph; the only consumers are the fixed agent
network (linear / GRU / linear / linear) and the two mixers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonFiniteError(RuntimeError):
    """Raised when a loss or gradient goes non-finite; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class Param:
    __slots__ = ("value", "grad", "name")

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str = "linear"):
        self.w = Param(_uniform(rng, in_dim, (in_dim, out_dim)), f"{name}.w")
        self.b = Param(_uniform(rng, in_dim, (out_dim,)), f"{name}.b")
        self._cache = []

    def forward(self, x, cache=True):
        if cache:
            self._cache.append(x)
        return x @ self.w.value + self.b.value

    def backward(self, dy):
        x = self._cache.pop()
        self.w.grad += x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.w.value.T

    def params(self):
        return [self.w, self.b]


class Relu:
    def __init__(self):
        self._cache = []

    def forward(self, x, cache=True):
        if cache:
            self._cache.append(x > 0)
        return np.maximum(x, 0.0)

    def backward(self, dy):
        return dy * self._cache.pop()

    def params(self):
        return []


class Elu:
    def __init__(self):
        self._cache = []

    def forward(self, x, cache=True):
        neg = x <= 0
        out = np.where(neg, np.expm1(np.minimum(x, 0.0)), x)
        if cache:
            self._cache.append((neg, out))
        return out

    def backward(self, dy):
        neg, out = self._cache.pop()
        return dy * np.where(neg, out + 1.0, 1.0)

    def params(self):
        return []


class GRUCell:
    """Gated recurrent cell, h' = z*h + (1-z)*c with candidate reset gating.

    Weights are stored fused: wx (in, 3H), wh (H, 3H), b (3H,), column
    blocks ordered [update z | reset r | candidate c].
    """

    def __init__(self, in_dim: int, hidden_dim: int, rng: np.random.Generator, name: str = "gru"):
        self.hidden_dim = hidden_dim
        self.wx = Param(_uniform(rng, in_dim, (in_dim, 3 * hidden_dim)), f"{name}.wx")
        self.wh = Param(_uniform(rng, hidden_dim, (hidden_dim, 3 * hidden_dim)), f"{name}.wh")
        self.b = Param(_uniform(rng, hidden_dim, (3 * hidden_dim,)), f"{name}.b")
        self._cache = []

    def forward(self, x, h, cache=True):
        H = self.hidden_dim
        gx = x @ self.wx.value + self.b.value
        gh = h @ self.wh.value
        z = sigmoid(gx[:, :H] + gh[:, :H])
        r = sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
        hc = gh[:, 2 * H:]
        c = np.tanh(gx[:, 2 * H:] + r * hc)
        h2 = z * h + (1.0 - z) * c
        if cache:
            self._cache.append((x, h, z, r, hc, c))
        return h2

    def backward(self, dh2):
        H = self.hidden_dim
        x, h, z, r, hc, c = self._cache.pop()
        dz = dh2 * (h - c) * z * (1.0 - z)
        dc_pre = dh2 * (1.0 - z) * (1.0 - c * c)
        dr = dc_pre * hc * r * (1.0 - r)
        da_x = np.concatenate([dz, dr, dc_pre], axis=1)
        da_h = np.concatenate([dz, dr, dc_pre * r], axis=1)
        self.wx.grad += x.T @ da_x
        self.wh.grad += h.T @ da_h
        self.b.grad += da_x.sum(axis=0)
        dx = da_x @ self.wx.value.T
        dh = da_h @ self.wh.value.T + dh2 * z
        return dx, dh

    def params(self):
        return [self.wx, self.wh, self.b]


class AgentNet:
    """Recurrent per-agent Q-network: in -> 64 -> GRU(64) -> 64 -> n_actions."""

    HIDDEN = 64

    def __init__(self, in_dim: int, n_actions: int, rng: np.random.Generator, hidden: int = HIDDEN):
        self.in_dim = in_dim
        self.n_actions = n_actions
        self.hidden = hidden
        self.fc_in = Linear(in_dim, hidden, rng, "fc_in")
        self.act_in = Relu()
        self.gru = GRUCell(hidden, hidden, rng, "gru")
        self.fc_mid = Linear(hidden, hidden, rng, "fc_mid")
        self.act_mid = Relu()
        self.fc_out = Linear(hidden, n_actions, rng, "fc_out")

    def init_hidden(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.hidden), dtype=np.float64)

    def forward(self, obs: np.ndarray, hidden: np.ndarray, cache=False):
        """One time step for a batch of rows; returns (q, next_hidden)."""
        if obs.shape[-1] != self.in_dim:
            raise ValueError(f"observation dim {obs.shape[-1]} != {self.in_dim}")
        x = self.act_in.forward(self.fc_in.forward(obs, cache), cache)
        h2 = self.gru.forward(x, hidden, cache)
        y = self.act_mid.forward(self.fc_mid.forward(h2, cache), cache)
        q = self.fc_out.forward(y, cache)
        return q, h2

    def backward_step(self, dq: np.ndarray, dh_next: np.ndarray) -> np.ndarray:
        """Backward for the most recent cached forward step.  `dh_next` is the
        gradient flowing into this step's output hidden state from the future;
        returns the gradient w.r.t. the incoming hidden state."""
        dh2 = self.fc_mid.backward(self.act_mid.backward(self.fc_out.backward(dq)))
        dh2 = dh2 + dh_next
        dx, dh = self.gru.backward(dh2)
        self.fc_in.backward(self.act_in.backward(dx))
        return dh

    def params(self):
        return (
            self.fc_in.params()
            + self.gru.params()
            + self.fc_mid.params()
            + self.fc_out.params()
        )

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def copy_from(self, other: "AgentNet"):
        for mine, theirs in zip(self.params(), other.params()):
            mine.value[...] = theirs.value

    def clone(self) -> "AgentNet":
        twin = AgentNet(self.in_dim, self.n_actions, np.random.default_rng(0), self.hidden)
        twin.copy_from(self)
        return twin


class VdnMixer:
    """Parameter-free additive mixer: Q_tot is the exact sum of agent values."""

    def __init__(self):
        self._cache = []

    def forward(self, agent_qs, state, cache=True):
        if cache:
            self._cache.append(agent_qs.shape)
        return agent_qs.sum(axis=1)

    def backward(self, dq_tot):
        shape = self._cache.pop()
        return np.repeat(dq_tot[:, None], shape[1], axis=1)

    def params(self):
        return []

    def named_params(self):
        return {}

    def copy_from(self, other):
        pass

    def clone(self):
        return VdnMixer()


class _HyperNet:
    """Two-layer hypernetwork state -> weights."""

    def __init__(self, state_dim, hidden, out_dim, rng, name):
        self.l1 = Linear(state_dim, hidden, rng, f"{name}.l1")
        self.act = Relu()
        self.l2 = Linear(hidden, out_dim, rng, f"{name}.l2")

    def forward(self, s, cache=True):
        return self.l2.forward(self.act.forward(self.l1.forward(s, cache), cache), cache)

    def backward(self, dy):
        return self.l1.backward(self.act.backward(self.l2.backward(dy)))

    def params(self):
        return self.l1.params() + self.l2.params()


class QmixMixer:
    """State-conditioned monotonic mixer.

    Two mixing layers whose weights come from hypernetworks of the global
    state; weights pass through |.| so dQ_tot/dq_i >= 0, biases are
    unconstrained (the final bias is itself a two-layer hypernetwork).
    """

    EMBED = 32
    HYPER_HIDDEN = 64

    def __init__(self, n_agents, state_dim, rng, embed=EMBED, hyper_hidden=HYPER_HIDDEN):
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.embed = embed
        self.hyper_hidden = hyper_hidden
        self.hyper_w1 = _HyperNet(state_dim, hyper_hidden, n_agents * embed, rng, "hyper_w1")
        self.hyper_b1 = Linear(state_dim, embed, rng, "hyper_b1")
        self.hyper_w2 = _HyperNet(state_dim, hyper_hidden, embed, rng, "hyper_w2")
        self.hyper_v = _HyperNet(state_dim, embed, 1, rng, "hyper_v")
        self.act = Elu()
        self._cache = []

    def forward(self, agent_qs, state, cache=True):
        B = agent_qs.shape[0]
        w1_raw = self.hyper_w1.forward(state, cache)
        w1 = np.abs(w1_raw).reshape(B, self.n_agents, self.embed)
        b1 = self.hyper_b1.forward(state, cache)
        pre = np.einsum("bn,bne->be", agent_qs, w1) + b1
        hid = self.act.forward(pre, cache)
        w2_raw = self.hyper_w2.forward(state, cache)
        w2 = np.abs(w2_raw)
        v = self.hyper_v.forward(state, cache)
        q_tot = (hid * w2).sum(axis=1) + v[:, 0]
        if cache:
            self._cache.append((agent_qs, w1_raw, w1, hid, w2_raw, w2))
        return q_tot

    def backward(self, dq_tot):
        agent_qs, w1_raw, w1, hid, w2_raw, w2 = self._cache.pop()
        B = agent_qs.shape[0]
        d = dq_tot[:, None]
        self.hyper_v.backward(d)
        dw2 = d * hid * np.sign(w2_raw)
        self.hyper_w2.backward(dw2)
        dhid = d * w2
        dpre = self.act.backward(dhid)
        self.hyper_b1.backward(dpre)
        dw1 = np.einsum("be,bn->bne", dpre, agent_qs)
        self.hyper_w1.backward(dw1.reshape(B, -1) * np.sign(w1_raw))
        dq = np.einsum("be,bne->bn", dpre, w1)
        return dq

    def params(self):
        return (
            self.hyper_w1.params()
            + self.hyper_b1.params()
            + self.hyper_w2.params()
            + self.hyper_v.params()
        )

    def named_params(self):
        return {p.name: p for p in self.params()}

    def copy_from(self, other: "QmixMixer"):
        for mine, theirs in zip(self.params(), other.params()):
            mine.value[...] = theirs.value

    def clone(self):
        twin = QmixMixer(self.n_agents, self.state_dim, np.random.default_rng(0), self.embed, self.hyper_hidden)
        twin.copy_from(self)
        return twin


def sync_target(online, target):
    """Hard parameter copy online -> target (idempotent)."""
    target.copy_from(online)


def zero_grads(params):
    for p in params:
        p.grad[...] = 0.0


def check_finite(params):
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NonFiniteError(
                f"non-finite gradient in {p.name}",
                {"param": p.name, "grad_norm": float(np.abs(p.grad[np.isfinite(p.grad)]).max(initial=0.0))},
            )


class RmsProp:
    """RMS-style adaptive rule with optional global norm clipping."""

    def __init__(self, params, lr=5e-4, decay=0.99, eps=1e-5, max_grad_norm=10.0):
        self.params = list(params)
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.acc = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        check_finite(self.params)
        _clip_global_norm(self.params, self.max_grad_norm)
        for p, acc in zip(self.params, self.acc):
            acc *= self.decay
            acc += (1.0 - self.decay) * p.grad * p.grad
            p.value -= self.lr * p.grad / (np.sqrt(acc) + self.eps)
        zero_grads(self.params)


class Sgd:
    def __init__(self, params, lr=5e-4, max_grad_norm=10.0):
        self.params = list(params)
        self.lr = lr
        self.max_grad_norm = max_grad_norm

    def step(self):
        check_finite(self.params)
        _clip_global_norm(self.params, self.max_grad_norm)
        for p in self.params:
            p.value -= self.lr * p.grad
        zero_grads(self.params)


def _clip_global_norm(params, max_norm):
    if not max_norm:
        return
    total = np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad *= scale


def make_optimizer(name, params, lr, max_grad_norm=10.0):
    if name == "rmsprop":
        return RmsProp(params, lr=lr, max_grad_norm=max_grad_norm)
    if name == "sgd":
        return Sgd(params, lr=lr, max_grad_norm=max_grad_norm)
    raise ValueError(f"unknown optimizer {name!r}")


# --------------------------------------------------------------------------
# episode-batch TD loss


@dataclass
class Batch:
    """Padded episode batch.  T is the longest episode in the batch; `obs`,
    `state` and `avail` carry T+1 entries (the trailing one is the
    post-terminal observation used for bootstrap targets)."""

    obs: np.ndarray  # (B, T+1, n, obs_in) already id-augmented
    state: np.ndarray  # (B, T+1, state_dim)
    avail: np.ndarray  # (B, T+1, n, A) bool
    actions: np.ndarray  # (B, T, n) int
    reward: np.ndarray  # (B, T)
    terminated: np.ndarray  # (B, T) float 0/1
    mask: np.ndarray  # (B, T) float 0/1 valid transitions

    @property
    def sizes(self):
        B, Tp1, n, _ = self.obs.shape
        return B, Tp1 - 1, n


def unroll_q(net: AgentNet, obs: np.ndarray, cache: bool) -> np.ndarray:
    """Run the recurrent net over a (B, T, n, in) observation block, hidden
    state carried across T.  Returns q-values (B, T, n, A)."""
    B, T, n, d = obs.shape
    h = net.init_hidden(B * n)
    out = np.empty((B, T, n, net.n_actions), dtype=np.float64)
    for t in range(T):
        q, h = net.forward(obs[:, t].reshape(B * n, d), h, cache=cache)
        out[:, t] = q.reshape(B, n, net.n_actions)
    return out


def unroll_backward(net: AgentNet, dq: np.ndarray):
    """Backpropagate through time for the most recent cached unroll."""
    B, T, n, A = dq.shape
    dh = np.zeros((B * n, net.hidden), dtype=np.float64)
    for t in range(T - 1, -1, -1):
        dh = net.backward_step(dq[:, t].reshape(B * n, A), dh)


def greedy_targets(q: np.ndarray, avail: np.ndarray) -> np.ndarray:
    """Per-agent maxima over available actions: (B, T, n, A) -> (B, T, n)."""
    masked = np.where(avail, q, -np.inf)
    return masked.max(axis=3)


def td_loss(batch: Batch, agent: AgentNet, mixer, target_agent: AgentNet, target_mixer, gamma: float) -> float:
    """Squared TD error of the mixed value against the bootstrapped target,
    averaged over valid steps.  Gradients of `agent` and `mixer` are
    populated via backprop through time; targets are gradient-free."""
    B, T, n = batch.sizes
    if B == 0 or T == 0:
        raise ValueError("empty batch")
    denom = batch.mask.sum()
    if denom == 0:
        raise ValueError("batch mask is entirely invalid")

    q_all = unroll_q(agent, batch.obs[:, :T], cache=True)
    chosen = np.take_along_axis(q_all, batch.actions[..., None], axis=3)[..., 0]

    tq_all = unroll_q(target_agent, batch.obs, cache=False)
    t_best = greedy_targets(tq_all[:, 1:], batch.avail[:, 1:])  # (B, T, n)

    q_tot = mixer.forward(chosen.reshape(B * T, n), batch.state[:, :T].reshape(B * T, -1), cache=True)
    q_tot = q_tot.reshape(B, T)
    t_tot = target_mixer.forward(
        t_best.reshape(B * T, n), batch.state[:, 1:].reshape(B * T, -1), cache=False
    ).reshape(B, T)

    y = batch.reward + gamma * (1.0 - batch.terminated) * t_tot
    err = (q_tot - y) * batch.mask
    loss = float((err * err).sum() / denom)

    dq_tot = (2.0 / denom) * err
    dchosen = mixer.backward(dq_tot.reshape(B * T)).reshape(B, T, n)
    dq_full = np.zeros_like(q_all)
    np.put_along_axis(dq_full, batch.actions[..., None], dchosen[..., None], axis=3)
    unroll_backward(agent, dq_full)
    return loss
