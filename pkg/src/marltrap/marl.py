"""Clean cooperative training: rollouts, replay, and the VDN/QMIX loop.

All agents share one recurrent Q-network with a one-hot agent id appended
to each observation; the mixer composes per-agent values into the joint
value used by the TD loss.  Training is episode-granular: one rollout is
stored per episode and batches are whole padded episodes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .arena import NOOP, Arena, ArenaConfig, action_name
from .checkpoint import load_checkpoint, params_digest, save_checkpoint
from .nets import (
    AgentNet,
    Batch,
    QmixMixer,
    VdnMixer,
    make_optimizer,
    sync_target,
    td_loss,
)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# episode data


@dataclass
class EpisodeRecord:
    """One episode: T transitions plus the trailing observation set."""

    obs: np.ndarray  # (T+1, n, obs_dim)
    state: np.ndarray  # (T+1, state_dim)
    avail: np.ndarray  # (T+1, n, A)
    actions: np.ndarray  # (T, n)
    enemy_actions: np.ndarray  # (T, m)
    reward: np.ndarray  # (T,) training reward (hacked on poisoned episodes)
    env_reward: np.ndarray  # (T,) untouched environment reward
    done: np.ndarray  # (T,) bool, True exactly at the final step
    won: bool
    poisoned: bool = False
    completion_step: Optional[int] = None
    hacked_steps: tuple = ()
    controlled_enemy: Optional[int] = None
    unit_snaps: Optional[np.ndarray] = None  # (T+1, U, 4): x, y, health, alive

    @property
    def length(self) -> int:
        return self.actions.shape[0]

    @property
    def episode_reward(self) -> float:
        return float(self.env_reward.sum())


class ReplayBuffer:
    """Episode-granular FIFO ring buffer."""

    def __init__(self, capacity: int = 5000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._slots: list = []
        self._next = 0
        self.inserted = 0

    def __len__(self):
        return len(self._slots)

    def insert(self, episode: EpisodeRecord):
        if len(self._slots) < self.capacity:
            self._slots.append(episode)
        else:
            self._slots[self._next] = episode
            self._next = (self._next + 1) % self.capacity
        self.inserted += 1

    def episodes(self):
        return list(self._slots)

    def sample(self, rng: np.random.Generator, k: int) -> list:
        if not self._slots:
            raise ValueError("cannot sample from an empty buffer")
        replace = len(self._slots) < k
        idx = rng.choice(len(self._slots), size=k, replace=replace)
        return [self._slots[i] for i in idx]


def epsilon_greedy(qvalues: np.ndarray, mask: np.ndarray, eps: float, rng: Optional[np.random.Generator]) -> int:
    """Masked epsilon-greedy; ties in the greedy branch go to the lowest
    index.  With eps <= 0 the RNG is never touched, so greedy queries stay
    reproducible no matter how often they run."""
    avail = np.flatnonzero(mask)
    if avail.size == 0:
        raise ValueError("no available actions")
    if eps > 0 and rng is not None and rng.random() < eps:
        return int(avail[rng.integers(avail.size)])
    masked = np.where(mask, qvalues, -np.inf)
    return int(np.argmax(masked))


def with_agent_ids(obs: np.ndarray) -> np.ndarray:
    """Append a one-hot agent id along the trailing feature axis."""
    n = obs.shape[-2]
    ids = np.broadcast_to(np.eye(n), obs.shape[:-1] + (n,))
    return np.concatenate([obs, ids], axis=-1)


class SharedTeamPolicy:
    """All agents act from one recurrent net; hidden state per agent."""

    def __init__(self, net: AgentNet, n_agents: int):
        self.net = net
        self.n = n_agents
        self.hidden = net.init_hidden(n_agents)

    def reset(self):
        self.hidden = self.net.init_hidden(self.n)

    def act(self, obs: np.ndarray, avail: np.ndarray, eps: float, rng) -> np.ndarray:
        q, self.hidden = self.net.forward(with_agent_ids(obs), self.hidden, cache=False)
        return np.array(
            [epsilon_greedy(q[i], avail[i], eps, rng) for i in range(self.n)], dtype=np.int64
        )

    def clean_greedy_actions(self, obs: np.ndarray, avail: np.ndarray) -> np.ndarray:
        return self.act(obs, avail, 0.0, None)

    def hidden_registry(self) -> dict:
        return {"team": self.hidden.copy()}

    def load_hidden(self, registry: dict):
        self.hidden = registry["team"].copy()


class RolloutHooks:
    """Extension points used by the injection machinery; the base class is a
    no-op so clean rollouts need none of this."""

    def enemy_override(self, world):
        return None

    def before_step(self, world, ally_actions, enemy_actions):
        pass

    def transform_reward(self, reward: float, step_result) -> float:
        return reward

    def annotations(self) -> dict:
        return {}


def run_episode(
    arena: Arena,
    policy,
    eps: float,
    rng: Optional[np.random.Generator],
    seed: int,
    hooks: Optional[RolloutHooks] = None,
    record_units: bool = False,
) -> EpisodeRecord:
    """Play one episode: allies from `policy`, enemies from the heuristic
    except where the hooks override a unit."""
    cfg = arena.cfg
    world = arena.reset(seed)
    policy.reset()
    obs_l, state_l, avail_l, units_l = [], [], [], []
    act_l, eact_l, rew_l, env_rew_l, done_l = [], [], [], [], []
    won = False
    while True:
        obs_l.append(arena.observe_team(world))
        state_l.append(arena.state_features(world))
        avail_l.append(arena.team_masks(world))
        if record_units:
            units_l.append(_unit_snap(world))
        if arena.is_terminal(world):
            break
        actions = policy.act(obs_l[-1], avail_l[-1], eps, rng)
        enemy_actions = arena.heuristic_enemy_actions(world)
        if hooks is not None:
            override = hooks.enemy_override(world)
            if override is not None:
                eid, a = override
                enemy_actions[eid - cfg.n_allies] = a
            hooks.before_step(world, actions, enemy_actions)
        res = arena.step(world, actions, enemy_actions)
        reward = res.reward if hooks is None else hooks.transform_reward(res.reward, res)
        act_l.append(actions)
        eact_l.append(enemy_actions)
        rew_l.append(reward)
        env_rew_l.append(res.reward)
        done_l.append(res.done)
        won = won or res.won
        world = res.world
    ann = hooks.annotations() if hooks is not None else {}
    return EpisodeRecord(
        obs=np.stack(obs_l),
        state=np.stack(state_l),
        avail=np.stack(avail_l),
        actions=np.stack(act_l) if act_l else np.zeros((0, cfg.n_allies), dtype=np.int64),
        enemy_actions=np.stack(eact_l) if eact_l else np.zeros((0, cfg.n_enemies), dtype=np.int64),
        reward=np.array(rew_l, dtype=np.float64),
        env_reward=np.array(env_rew_l, dtype=np.float64),
        done=np.array(done_l, dtype=bool),
        won=won,
        unit_snaps=np.stack(units_l) if record_units else None,
        **ann,
    )


def _unit_snap(world) -> np.ndarray:
    snap = np.zeros((world.n_units, 4), dtype=np.float64)
    snap[:, 0] = world.positions[:, 0]
    snap[:, 1] = world.positions[:, 1]
    snap[:, 2] = world.health
    snap[:, 3] = world.alive
    return snap


def collate(episodes: list, n_actions: int) -> Batch:
    """Pad a list of EpisodeRecords into a single Batch with agent ids
    appended to observations.  Padded availability rows allow only no-op so
    masked maxima stay finite."""
    if not episodes:
        raise ValueError("empty batch")
    B = len(episodes)
    T = max(e.length for e in episodes)
    n = episodes[0].obs.shape[1]
    obs = np.zeros((B, T + 1, n, episodes[0].obs.shape[2]))
    state = np.zeros((B, T + 1, episodes[0].state.shape[1]))
    avail = np.zeros((B, T + 1, n, n_actions), dtype=bool)
    avail[..., NOOP] = True
    actions = np.zeros((B, T, n), dtype=np.int64)
    reward = np.zeros((B, T))
    terminated = np.zeros((B, T))
    mask = np.zeros((B, T))
    for b, e in enumerate(episodes):
        L = e.length
        obs[b, : L + 1] = e.obs
        state[b, : L + 1] = e.state
        avail[b, : L + 1] = e.avail
        actions[b, :L] = e.actions
        reward[b, :L] = e.reward
        terminated[b, :L] = e.done.astype(np.float64)
        mask[b, :L] = 1.0
    return Batch(with_agent_ids(obs), state, avail, actions, reward, terminated, mask)


# --------------------------------------------------------------------------
# model container


@dataclass
class TeamModel:
    algo: str  # "vdn" | "qmix"
    agent: AgentNet
    mixer: object
    n_agents: int
    n_actions: int
    obs_dim: int
    state_dim: int

    def clone(self) -> "TeamModel":
        return TeamModel(
            self.algo, self.agent.clone(), self.mixer.clone(),
            self.n_agents, self.n_actions, self.obs_dim, self.state_dim,
        )

    def trainable_params(self):
        return self.agent.params() + self.mixer.params()

    def named_arrays(self, prefix="") -> dict:
        out = {f"{prefix}agent/{k}": p.value for k, p in self.agent.named_params().items()}
        out.update({f"{prefix}mixer/{k}": p.value for k, p in self.mixer.named_params().items()})
        return out

    def digest(self) -> str:
        return params_digest(self.named_arrays())


def build_model(algo: str, arena_cfg: ArenaConfig, seed: int) -> TeamModel:
    if algo not in ("vdn", "qmix"):
        raise ValueError(f"unknown algorithm {algo!r}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    n = arena_cfg.n_allies
    n_actions = arena_cfg.n_ally_actions
    agent = AgentNet(arena_cfg.obs_dim + n, n_actions, rng)
    mixer = QmixMixer(n, arena_cfg.state_dim, rng) if algo == "qmix" else VdnMixer()
    return TeamModel(algo, agent, mixer, n, n_actions, arena_cfg.obs_dim, arena_cfg.state_dim)


def topology_of(model: TeamModel) -> dict:
    return {
        "kind": "clean",
        "algo": model.algo,
        "n_agents": model.n_agents,
        "n_actions": model.n_actions,
        "obs_dim": model.obs_dim,
        "state_dim": model.state_dim,
        "hidden": model.agent.hidden,
    }


def save_team_model(path, model: TeamModel, metadata: Optional[dict] = None) -> str:
    return save_checkpoint(path, model.named_arrays(), topology_of(model), metadata)


def _restore_model(topology: dict, arrays: dict, prefix: str = "") -> TeamModel:
    rng = np.random.default_rng(0)
    n = topology["n_agents"]
    agent = AgentNet(topology["obs_dim"] + n, topology["n_actions"], rng, topology["hidden"])
    mixer = QmixMixer(n, topology["state_dim"], rng) if topology["algo"] == "qmix" else VdnMixer()
    model = TeamModel(
        topology["algo"], agent, mixer, n, topology["n_actions"],
        topology["obs_dim"], topology["state_dim"],
    )
    for key, param in agent.named_params().items():
        _load_into(param, arrays, f"{prefix}agent/{key}")
    for key, param in mixer.named_params().items():
        _load_into(param, arrays, f"{prefix}mixer/{key}")
    return model


def _load_into(param, arrays, name):
    from .checkpoint import CheckpointError

    if name not in arrays:
        raise CheckpointError(f"checkpoint missing array {name}")
    if arrays[name].shape != param.value.shape:
        raise CheckpointError(
            f"array {name} has shape {arrays[name].shape}, expected {param.value.shape}"
        )
    param.value[...] = arrays[name]


def load_team_model(path):
    arrays, topology, metadata = load_checkpoint(path)
    if topology.get("kind") != "clean":
        raise ValueError(f"{path} is not a clean model checkpoint")
    return _restore_model(topology, arrays), metadata


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    episodes: int = 3000
    batch_size: int = 32
    buffer_capacity: int = 5000
    gamma: float = 0.99
    lr: float = 5e-4
    eps: float = 0.05
    eps_start: float = 1.0
    eps_anneal_episodes: int = 500
    target_sync_interval: int = 200
    eval_interval: int = 250
    eval_episodes: int = 32
    optimizer: str = "rmsprop"
    max_grad_norm: float = 10.0

    def validate(self):
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        if self.episodes < 1 or self.batch_size < 1:
            raise ValueError("episodes and batch_size must be positive")
        if self.gamma < 0 or self.gamma >= 1:
            raise ValueError("gamma must lie in [0, 1)")

    def epsilon_at(self, episode: int) -> float:
        if self.eps_anneal_episodes <= 0:
            return self.eps
        frac = min(1.0, episode / self.eps_anneal_episodes)
        return self.eps_start + (self.eps - self.eps_start) * frac


def derive_streams(seed: int, names: list[str]) -> dict:
    """Documented master-seed fan-out: SeedSequence(seed).spawn(len(names)),
    assigned in list order."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: child for name, child in zip(names, children)}


def greedy_rollouts(arena: Arena, policy_factory: Callable, n_episodes: int, seed_seq, record_units=False, hooks_factory=None):
    """Greedy evaluation episodes on fresh per-episode seeds."""
    records = []
    seeds = [int(s.generate_state(1)[0]) for s in seed_seq.spawn(n_episodes)]
    for s in seeds:
        policy = policy_factory()
        hooks = hooks_factory() if hooks_factory is not None else None
        records.append(
            run_episode(arena, policy, 0.0, None, seed=s, hooks=hooks, record_units=record_units)
        )
    return records


@dataclass
class DivergenceDump:
    episode: int
    train_step: int
    loss: float


class DivergenceError(RuntimeError):
    def __init__(self, message, dump: DivergenceDump):
        super().__init__(message)
        self.dump = dump


def train_clean(
    algo: str,
    arena_cfg: ArenaConfig,
    train_cfg: TrainConfig,
    seed: int,
    progress: Optional[Callable[[dict], None]] = None,
):
    """Train a clean team model; returns (model, curve_rows).

    Curve rows are {episode, reward, winrate} measured with greedy policies
    every `eval_interval` episodes.  Raises DivergenceError if the loss goes
    non-finite.
    """
    train_cfg.validate()
    arena = Arena(arena_cfg)
    streams = derive_streams(seed, ["init", "rollout", "episode_seeds", "sampling", "eval"])
    model = build_model(algo, arena_cfg, int(streams["init"].generate_state(1)[0]))
    target = model.clone()
    buffer = ReplayBuffer(train_cfg.buffer_capacity)
    optimizer = make_optimizer(
        train_cfg.optimizer, model.trainable_params(), train_cfg.lr, train_cfg.max_grad_norm
    )
    rollout_rng = np.random.Generator(np.random.PCG64(streams["rollout"]))
    seed_rng = np.random.Generator(np.random.PCG64(streams["episode_seeds"]))
    sample_rng = np.random.Generator(np.random.PCG64(streams["sampling"]))
    eval_root = streams["eval"]

    policy = SharedTeamPolicy(model.agent, model.n_agents)
    curves = []
    train_steps = 0
    eval_round = 0
    for episode in range(train_cfg.episodes):
        eps = train_cfg.epsilon_at(episode)
        rec = run_episode(
            arena, policy, eps, rollout_rng, seed=int(seed_rng.integers(2**63))
        )
        buffer.insert(rec)
        if len(buffer) >= train_cfg.batch_size:
            batch = collate(buffer.sample(sample_rng, train_cfg.batch_size), model.n_actions)
            loss = td_loss(batch, model.agent, model.mixer, target.agent, target.mixer, train_cfg.gamma)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"loss diverged at episode {episode}",
                    DivergenceDump(episode, train_steps, loss),
                )
            optimizer.step()
            train_steps += 1
            if train_steps % train_cfg.target_sync_interval == 0:
                sync_target(model.agent, target.agent)
                sync_target(model.mixer, target.mixer)
        if (episode + 1) % train_cfg.eval_interval == 0:
            eval_seq = np.random.SeedSequence(
                entropy=eval_root.entropy, spawn_key=eval_root.spawn_key + (eval_round,)
            )
            eval_round += 1
            records = greedy_rollouts(
                arena,
                lambda: SharedTeamPolicy(model.agent, model.n_agents),
                train_cfg.eval_episodes,
                eval_seq,
            )
            row = {
                "episode": episode + 1,
                "reward": float(np.mean([r.episode_reward for r in records])),
                "winrate": float(np.mean([r.won for r in records])),
            }
            curves.append(row)
            if progress is not None:
                progress(row)
    return model, curves


# --------------------------------------------------------------------------
# trace dumps


def record_to_jsonl(record: EpisodeRecord, arena: Arena) -> str:
    """Line-delimited JSON trajectory: a meta line then one line per step."""
    cfg = arena.cfg
    meta = {
        "type": "meta",
        "n_allies": cfg.n_allies,
        "n_enemies": cfg.n_enemies,
        "length": record.length,
        "won": record.won,
        "poisoned": record.poisoned,
        "completion_step": record.completion_step,
        "hacked_steps": list(record.hacked_steps),
        "controlled_enemy": record.controlled_enemy,
    }
    lines = [json.dumps(meta, sort_keys=True)]
    hacked = set(record.hacked_steps)
    for t in range(record.length):
        row = {
            "type": "step",
            "t": t,
            "state": record.state[t].tolist(),
            "observations": record.obs[t].tolist(),
            "actions": [action_name(a) for a in record.actions[t]],
            "enemy_actions": [action_name(a) for a in record.enemy_actions[t]],
            "reward": float(record.reward[t]),
            "env_reward": float(record.env_reward[t]),
            "done": bool(record.done[t]),
            "hacked": t in hacked,
        }
        if record.unit_snaps is not None:
            row["units"] = [
                {
                    "x": float(u[0]),
                    "y": float(u[1]),
                    "health": float(u[2]),
                    "alive": bool(u[3]),
                }
                for u in record.unit_snaps[t]
            ]
        lines.append(json.dumps(row, sort_keys=True))
    return "\n".join(lines) + "\n"
