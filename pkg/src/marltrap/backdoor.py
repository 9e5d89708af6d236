"""The attack: reward hacking plus dual-buffer retraining of one agent.

During poisoned episodes the attacker grabs one enemy unit to perform the
trigger script.  Once the pattern completes, the next `attack_duration`
step rewards seen by the retrained agent are replaced by a blend of the
reversed team reward and a counterfactual influence count: how many
teammates' next-step greedy actions flip when agent k deviates from the
frozen policy, measured by simulator-and-hidden-state rollback.  Only the
single agent's network (plus a private mixer copy) is ever updated; every
other policy stays frozen.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .arena import Arena, ArenaConfig, restore
from .arena import snapshot as take_snapshot
from .checkpoint import load_checkpoint, save_checkpoint
from .marl import (
    EpisodeRecord,
    ReplayBuffer,
    RolloutHooks,
    DivergenceDump,
    DivergenceError,
    TeamModel,
    TrainConfig,
    _restore_model,
    collate,
    derive_streams,
    epsilon_greedy,
    greedy_rollouts,
    run_episode,
    topology_of,
    with_agent_ids,
)
from .nets import (
    AgentNet,
    Batch,
    greedy_targets,
    make_optimizer,
    sync_target,
    unroll_backward,
    unroll_q,
)
from .trigger import MatchState, TriggerSpec, drive_attacker, trigger_digest

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# reward hacking primitives


def reverse_reward(r: float, r_min: float, r_max: float) -> float:
    """Flip a reward inside its range: good outcomes become bad and vice
    versa, same bounds."""
    if not r_min <= r <= r_max:
        raise ValueError(f"reward {r} outside [{r_min}, {r_max}]")
    return r_max + r_min - r


def normalize_influence(raw: float, n_agents: int, r_min: float, r_max: float) -> float:
    """Map a teammate-flip count in [0, n-1] linearly onto the reward range."""
    if n_agents < 2:
        raise ValueError("influence normalization needs at least two agents")
    if not 0 <= raw <= n_agents - 1:
        raise ValueError(f"raw influence {raw} outside [0, {n_agents - 1}]")
    return r_min + (r_max - r_min) * raw / (n_agents - 1)


def hack_reward(reversed_reward: float, influence_reward: float, blend: float) -> float:
    """Convex combination of the two malicious reward terms."""
    if not 0.0 <= blend <= 1.0:
        raise ValueError("blend must lie in [0, 1]")
    return (1.0 - blend) * reversed_reward + blend * influence_reward


@dataclass
class AttackConfig:
    trigger: TriggerSpec
    agent: int = 0
    poisoning_rate: float = 0.05
    attack_duration: int = 20
    blend: float = 0.5
    r_min: float = 0.0
    r_max: float = 20.0
    strict_poison_buffer: bool = False

    def validate(self):
        if not 0.0 <= self.poisoning_rate <= 1.0:
            raise ValueError("poisoning_rate must lie in [0, 1]")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError("blend must lie in [0, 1]")
        if self.attack_duration < 1:
            raise ValueError("attack_duration must be >= 1")
        if not self.r_min < self.r_max:
            raise ValueError("r_min must be < r_max")
        if self.agent < 0:
            raise ValueError("agent id must be non-negative")


@dataclass
class DualBuffers:
    clean: ReplayBuffer
    poison: ReplayBuffer


def store_episode(buffers: DualBuffers, record: EpisodeRecord, attack: AttackConfig):
    """Poisoned-flag episodes go to the poison buffer, clean ones to the
    clean buffer.  With `strict_poison_buffer`, a poisoned episode whose
    trigger never completed is rerouted to the clean buffer instead."""
    if record.poisoned and not (attack.strict_poison_buffer and record.completion_step is None):
        buffers.poison.insert(record)
    else:
        buffers.clean.insert(record)


# --------------------------------------------------------------------------
# team policy during injection and backdoored deployment


class BackdoorTeamPolicy:
    """Teammates act greedily from the frozen net; agent k acts from its own
    retrained net.  A parallel frozen-net hidden state is maintained for
    agent k so the counterfactual branch can ask what the clean policy would
    have done in its place."""

    def __init__(self, clean_net: AgentNet, poisoned_net: AgentNet, agent_k: int, n_agents: int):
        self.clean = clean_net
        self.poisoned = poisoned_net
        self.k = agent_k
        self.n = n_agents
        self.last_clean_k_action: Optional[int] = None
        self.reset()

    def reset(self):
        self.clean_hidden = self.clean.init_hidden(self.n)
        self.poisoned_hidden = self.poisoned.init_hidden(1)
        self.last_clean_k_action = None

    def act(self, obs: np.ndarray, avail: np.ndarray, eps: float, rng) -> np.ndarray:
        inputs = with_agent_ids(obs)
        qc, self.clean_hidden = self.clean.forward(inputs, self.clean_hidden, cache=False)
        actions = np.array(
            [epsilon_greedy(qc[i], avail[i], 0.0, None) for i in range(self.n)], dtype=np.int64
        )
        self.last_clean_k_action = int(actions[self.k])
        qb, self.poisoned_hidden = self.poisoned.forward(
            inputs[self.k: self.k + 1], self.poisoned_hidden, cache=False
        )
        actions[self.k] = epsilon_greedy(qb[0], avail[self.k], eps, rng)
        return actions

    def clean_greedy_actions(self, obs: np.ndarray, avail: np.ndarray) -> np.ndarray:
        """Greedy frozen-policy actions for every agent (advances the frozen
        hidden states; callers roll them back via the registry)."""
        inputs = with_agent_ids(obs)
        qc, self.clean_hidden = self.clean.forward(inputs, self.clean_hidden, cache=False)
        return np.array(
            [epsilon_greedy(qc[i], avail[i], 0.0, None) for i in range(self.n)], dtype=np.int64
        )

    def hidden_registry(self) -> dict:
        return {"clean": self.clean_hidden.copy(), "poisoned": self.poisoned_hidden.copy()}

    def load_hidden(self, registry: dict):
        self.clean_hidden = registry["clean"].copy()
        self.poisoned_hidden = registry["poisoned"].copy()


# --------------------------------------------------------------------------
# counterfactual influence (simulator + hidden-state rollback)


@dataclass
class InfluenceResult:
    raw: int
    terminal: bool = False


def unilateral_influence(
    arena: Arena,
    snap,
    policy: BackdoorTeamPolicy,
    ally_actions,
    enemy_actions,
    clean_k_action: Optional[int] = None,
) -> InfluenceResult:
    """Count teammates whose next-step greedy actions differ between two
    one-step branches from `snap`: agent k taking its frozen-policy action
    versus agent k taking the action it actually executes.  Every query is
    greedy and RNG-free, and both the world and all hidden states are rolled
    back, so running this never perturbs the live episode."""
    k = policy.k
    world, snap_hidden = restore(snap)
    if arena.is_terminal(world):
        return InfluenceResult(0, terminal=True)
    if clean_k_action is None:
        clean_k_action = policy.last_clean_k_action
    saved = policy.hidden_registry()

    def branch(k_action: int) -> np.ndarray:
        policy.load_hidden(snap_hidden)
        start, _ = restore(snap)
        joint = np.array(ally_actions, dtype=np.int64)
        joint[k] = k_action
        res = arena.step(start, joint, enemy_actions)
        nxt = policy.clean_greedy_actions(arena.observe_team(res.world), arena.team_masks(res.world))
        return nxt

    clean_branch = branch(int(clean_k_action))
    live_branch = branch(int(ally_actions[k]))
    policy.load_hidden(saved)
    raw = int(sum(1 for i in range(policy.n) if i != k and clean_branch[i] != live_branch[i]))
    return InfluenceResult(raw)


# --------------------------------------------------------------------------
# rollout hooks


class TriggerHooks(RolloutHooks):
    """Arms the trigger driver only: used for poisoned evaluation episodes
    where rewards must stay untouched."""

    def __init__(self, arena: Arena, trigger: TriggerSpec, agent_k: int):
        self.arena = arena
        self.trigger = trigger
        self.agent_k = agent_k
        self.match = MatchState()

    def enemy_override(self, world):
        override, self.match = drive_attacker(
            self.trigger, self.arena, world, self.agent_k, self.match
        )
        return override

    def annotations(self) -> dict:
        return {
            "poisoned": True,
            "completion_step": self.match.completion_step,
            "controlled_enemy": self.match.controlled_enemy,
        }


class BackdoorHooks(TriggerHooks):
    """Trigger driver plus reward hacking for poisoned training episodes."""

    def __init__(self, arena: Arena, policy: BackdoorTeamPolicy, attack: AttackConfig):
        super().__init__(arena, attack.trigger, attack.agent)
        self.policy = policy
        self.attack = attack
        self.attack_dur = 0
        self._armed = False
        self._pending_influence: Optional[int] = None
        self.hacked: list[int] = []

    def enemy_override(self, world):
        override = super().enemy_override(world)
        if self.match.completion_step is not None and not self._armed:
            self.attack_dur = self.attack.attack_duration
            self._armed = True
        return override

    def before_step(self, world, ally_actions, enemy_actions):
        if self.attack_dur > 0:
            snap = take_snapshot(world, self.policy.hidden_registry())
            res = unilateral_influence(self.arena, snap, self.policy, ally_actions, enemy_actions)
            self._pending_influence = res.raw

    def transform_reward(self, reward: float, step_result) -> float:
        if self.attack_dur <= 0:
            return reward
        a = self.attack
        reversed_r = reverse_reward(reward, a.r_min, a.r_max)
        influence_r = normalize_influence(
            self._pending_influence, self.arena.cfg.n_allies, a.r_min, a.r_max
        )
        self.hacked.append(step_result.world.step_index - 1)
        self.attack_dur -= 1
        self._pending_influence = None
        return hack_reward(reversed_r, influence_r, a.blend)

    def annotations(self) -> dict:
        ann = super().annotations()
        ann["hacked_steps"] = tuple(self.hacked)
        return ann


# --------------------------------------------------------------------------
# backdoored model container


@dataclass
class BackdooredModel:
    base: TeamModel  # frozen clean system
    poisoned_agent: AgentNet
    mixer: object  # retrained private mixer copy (parameter-free for VDN)
    agent_k: int

    def policy(self) -> BackdoorTeamPolicy:
        return BackdoorTeamPolicy(self.base.agent, self.poisoned_agent, self.agent_k, self.base.n_agents)

    def named_arrays(self) -> dict:
        out = self.base.named_arrays(prefix="clean/")
        out.update({f"poisoned/agent/{k}": p.value for k, p in self.poisoned_agent.named_params().items()})
        out.update({f"poisoned/mixer/{k}": p.value for k, p in self.mixer.named_params().items()})
        return out


def save_backdoored_model(path, model: BackdooredModel, metadata: Optional[dict] = None) -> str:
    topology = topology_of(model.base)
    topology["kind"] = "backdoored"
    topology["agent_k"] = model.agent_k
    return save_checkpoint(path, model.named_arrays(), topology, metadata)


def load_backdoored_model(path):
    arrays, topology, metadata = load_checkpoint(path)
    if topology.get("kind") != "backdoored":
        raise ValueError(f"{path} is not a backdoored model checkpoint")
    base_arrays = {k[len("clean/"):]: v for k, v in arrays.items() if k.startswith("clean/")}
    base = _restore_model(topology, base_arrays)
    shadow = _restore_model(topology, {k[len("poisoned/"):]: v for k, v in arrays.items() if k.startswith("poisoned/")})
    return BackdooredModel(base, shadow.agent, shadow.mixer, topology["agent_k"]), metadata


# --------------------------------------------------------------------------
# TD loss with one trainable agent


def td_loss_backdoor(
    batch: Batch,
    clean_agent: AgentNet,
    poisoned_agent: AgentNet,
    agent_k: int,
    mixer,
    target_poisoned: AgentNet,
    target_mixer,
    gamma: float,
) -> float:
    """Same mixed TD objective as clean training, but teammate values come
    from the frozen net (gradient-free) and only agent k's column reaches
    the retrained network.  The frozen net is its own target."""
    B, T, n = batch.sizes
    if B == 0 or T == 0:
        raise ValueError("empty batch")
    denom = batch.mask.sum()
    if denom == 0:
        raise ValueError("batch mask is entirely invalid")
    others = [i for i in range(n) if i != agent_k]

    obs_k = batch.obs[:, :, [agent_k]]
    obs_o = batch.obs[:, :, others]

    q_k = unroll_q(poisoned_agent, obs_k[:, :T], cache=True)  # (B,T,1,A)
    q_o_full = unroll_q(clean_agent, obs_o, cache=False)  # (B,T+1,n-1,A)
    tq_k = unroll_q(target_poisoned, obs_k, cache=False)

    chosen = np.empty((B, T, n))
    chosen[:, :, agent_k] = np.take_along_axis(
        q_k, batch.actions[:, :, [agent_k], None], axis=3
    )[..., 0, 0]
    chosen[:, :, others] = np.take_along_axis(
        q_o_full[:, :T], batch.actions[:, :, others, None], axis=3
    )[..., 0]

    t_best = np.empty((B, T, n))
    t_best[:, :, [agent_k]] = greedy_targets(tq_k[:, 1:], batch.avail[:, 1:, [agent_k]])
    t_best[:, :, others] = greedy_targets(q_o_full[:, 1:], batch.avail[:, 1:, others])

    q_tot = mixer.forward(
        chosen.reshape(B * T, n), batch.state[:, :T].reshape(B * T, -1), cache=True
    ).reshape(B, T)
    t_tot = target_mixer.forward(
        t_best.reshape(B * T, n), batch.state[:, 1:].reshape(B * T, -1), cache=False
    ).reshape(B, T)

    y = batch.reward + gamma * (1.0 - batch.terminated) * t_tot
    err = (q_tot - y) * batch.mask
    loss = float((err * err).sum() / denom)

    dq_tot = (2.0 / denom) * err
    dchosen = mixer.backward(dq_tot.reshape(B * T)).reshape(B, T, n)
    dq_k = np.zeros_like(q_k)
    np.put_along_axis(
        dq_k, batch.actions[:, :, [agent_k], None], dchosen[:, :, [agent_k], None], axis=3
    )
    unroll_backward(poisoned_agent, dq_k)
    return loss


# --------------------------------------------------------------------------
# injection loop


def inject_backdoor(
    clean_model: TeamModel,
    attack: AttackConfig,
    arena_cfg: ArenaConfig,
    train_cfg: TrainConfig,
    seed: int,
    progress=None,
):
    """Retrain agent k's network against the hacked reward (Algorithm: per
    episode flip a poisoning coin, run the trigger driver when poisoned,
    store into the matching buffer, then update from a batch drawn from the
    poison buffer with the poisoning probability, else from the clean one).

    Returns (BackdooredModel, curve_rows); curve rows carry greedy clean and
    poisoned condition evaluations of the model being retrained.

    Desk-scale injection oscillates: the 95% clean batch stream periodically
    washes the trigger response back out, so the returned model is an
    evaluation-selected checkpoint rather than whatever the final episode
    left behind.  Selection scores each eval round by the clean-minus-
    poisoned winning-rate gap *sustained over two consecutive rounds*
    (min of the pair, ties to the later round): a converged backdoor holds
    its gap across rounds, while a transient lucky dip does not and must
    not be deployed as if it were convergence.  With fewer than two eval
    rounds the final parameters are returned.  The curves always log the
    raw trajectory.
    """
    attack.validate()
    train_cfg.validate()
    if arena_cfg.n_allies < 2:
        raise ValueError("influence reward needs at least two allies")
    if not 0 <= attack.agent < arena_cfg.n_allies:
        raise ValueError("backdoored agent id out of range")
    arena = Arena(arena_cfg)
    streams = derive_streams(
        seed, ["poison_coin", "rollout", "episode_seeds", "sampling", "source_coin", "eval"]
    )
    coin_rng = np.random.Generator(np.random.PCG64(streams["poison_coin"]))
    rollout_rng = np.random.Generator(np.random.PCG64(streams["rollout"]))
    seed_rng = np.random.Generator(np.random.PCG64(streams["episode_seeds"]))
    sample_rng = np.random.Generator(np.random.PCG64(streams["sampling"]))
    source_rng = np.random.Generator(np.random.PCG64(streams["source_coin"]))
    eval_root = streams["eval"]

    frozen_digest = clean_model.digest()
    poisoned_agent = clean_model.agent.clone()
    mixer = clean_model.mixer.clone()
    target_poisoned = poisoned_agent.clone()
    target_mixer = mixer.clone()
    buffers = DualBuffers(
        clean=ReplayBuffer(train_cfg.buffer_capacity),
        poison=ReplayBuffer(train_cfg.buffer_capacity),
    )
    optimizer = make_optimizer(
        train_cfg.optimizer,
        poisoned_agent.params() + mixer.params(),
        train_cfg.lr,
        train_cfg.max_grad_norm,
    )
    policy = BackdoorTeamPolicy(clean_model.agent, poisoned_agent, attack.agent, clean_model.n_agents)

    curves = []
    train_steps = 0
    eval_round = 0
    poisoned_seen = 0
    completions = 0
    warned = False
    best_score = -np.inf
    best_params = None
    prev_gap = None

    def eval_and_track(episode):
        nonlocal eval_round, best_score, best_params, prev_gap
        model = BackdooredModel(clean_model, poisoned_agent, mixer, attack.agent)
        eval_seq = np.random.SeedSequence(
            entropy=eval_root.entropy, spawn_key=eval_root.spawn_key + (eval_round,)
        )
        eval_round += 1
        clean_seq, poison_seq = eval_seq.spawn(2)
        clean_recs = greedy_rollouts(arena, model.policy, train_cfg.eval_episodes, clean_seq)
        poison_recs = greedy_rollouts(
            arena, model.policy, train_cfg.eval_episodes, poison_seq,
            hooks_factory=lambda: TriggerHooks(arena, attack.trigger, attack.agent),
        )
        row = {
            "episode": episode + 1,
            "r_bc": float(np.mean([r.episode_reward for r in clean_recs])),
            "wr_bc": float(np.mean([r.won for r in clean_recs])),
            "r_bp": float(np.mean([r.episode_reward for r in poison_recs])),
            "wr_bp": float(np.mean([r.won for r in poison_recs])),
        }
        gap = row["wr_bc"] - row["wr_bp"]
        if prev_gap is not None:
            score = min(prev_gap, gap)
            if score >= best_score:
                best_score = score
                best_params = [p.value.copy() for p in poisoned_agent.params() + mixer.params()]
        prev_gap = gap
        return row

    for episode in range(train_cfg.episodes):
        is_poison = coin_rng.random() < attack.poisoning_rate
        hooks = BackdoorHooks(arena, policy, attack) if is_poison else None
        rec = run_episode(
            arena, policy, train_cfg.eps, rollout_rng,
            seed=int(seed_rng.integers(2**63)), hooks=hooks,
        )
        store_episode(buffers, rec, attack)
        if is_poison:
            poisoned_seen += 1
            completions += rec.completion_step is not None
            if poisoned_seen >= 20 and completions == 0 and not warned:
                log.warning(
                    "trigger never completed in the first %d poisoned episodes; "
                    "check the trigger constants against the arena geometry",
                    poisoned_seen,
                )
                warned = True

        source = buffers.poison if source_rng.random() < attack.poisoning_rate else buffers.clean
        if len(source) > 0:
            batch = collate(source.sample(sample_rng, train_cfg.batch_size), clean_model.n_actions)
            loss = td_loss_backdoor(
                batch, clean_model.agent, poisoned_agent, attack.agent,
                mixer, target_poisoned, target_mixer, train_cfg.gamma,
            )
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"loss diverged at episode {episode}",
                    DivergenceDump(episode, train_steps, loss),
                )
            optimizer.step()
            train_steps += 1
            if train_steps % train_cfg.target_sync_interval == 0:
                sync_target(poisoned_agent, target_poisoned)
                sync_target(mixer, target_mixer)

        if (episode + 1) % train_cfg.eval_interval == 0:
            row = eval_and_track(episode)
            curves.append(row)
            if progress is not None:
                progress(row)

    if train_cfg.episodes % train_cfg.eval_interval != 0:
        curves.append(eval_and_track(train_cfg.episodes - 1))
    if best_params is not None:
        for p, value in zip(poisoned_agent.params() + mixer.params(), best_params):
            p.value[...] = value
    if clean_model.digest() != frozen_digest:
        raise RuntimeError("frozen policy drifted during injection; aborting")
    return BackdooredModel(clean_model, poisoned_agent, mixer, attack.agent), curves


def attack_metadata(attack: AttackConfig, base_digest: str) -> dict:
    return {
        "kind": "backdoor",
        "agent": attack.agent,
        "poisoning_rate": attack.poisoning_rate,
        "attack_duration": attack.attack_duration,
        "blend": attack.blend,
        "r_min": attack.r_min,
        "r_max": attack.r_max,
        "trigger_sha256": trigger_digest(attack.trigger),
        "base_model_sha256": base_digest,
    }
