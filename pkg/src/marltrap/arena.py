"""Deterministic m-vs-m combat arena with partial observability.

A 2D continuous-position, discrete-action battle between a team of allied
units (driven by learned agents) and a team of enemy units (driven by a
scripted heuristic, except where an attacker override takes control of one
unit).  Dynamics are fully deterministic given the world's RNG state, and
the whole world round-trips bit-exactly through snapshot/restore, which is
what the counterfactual rollback machinery in `backdoor` relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Fixed action slots. Attack actions follow: slot j targets opposing unit j.
NOOP = 0
STOP = 1
NORTH = 2
SOUTH = 3
EAST = 4
WEST = 5
N_FIXED_ACTIONS = 6

MOVE_DELTAS = {
    NORTH: (0.0, 1.0),
    SOUTH: (0.0, -1.0),
    EAST: (1.0, 0.0),
    WEST: (-1.0, 0.0),
}

_FIXED_NAMES = ["noop", "stop", "north", "south", "east", "west"]

SNAPSHOT_VERSION = 1


class ArenaError(ValueError):
    pass


class InvalidActionError(ArenaError):
    """An action violated the availability mask."""

    def __init__(self, unit_id: int, action: int):
        self.unit_id = unit_id
        self.action = action
        super().__init__(f"unit {unit_id} selected unavailable action {action} ({action_name(action)})")


class SnapshotError(ArenaError):
    pass


def n_actions(n_opponents: int) -> int:
    return N_FIXED_ACTIONS + n_opponents


def attack_action(slot: int) -> int:
    return N_FIXED_ACTIONS + slot


def is_attack(action: int) -> bool:
    return action >= N_FIXED_ACTIONS


def attack_target(action: int) -> int:
    if not is_attack(action):
        raise ArenaError(f"action {action} is not an attack")
    return action - N_FIXED_ACTIONS


def is_move(action: int) -> bool:
    return NORTH <= action <= WEST


def action_name(action: int) -> str:
    if action < N_FIXED_ACTIONS:
        return _FIXED_NAMES[action]
    return f"attack{action - N_FIXED_ACTIONS}"


def action_from_name(name: str) -> int:
    name = name.strip().lower()
    if name in _FIXED_NAMES:
        return _FIXED_NAMES.index(name)
    if name.startswith("attack"):
        try:
            return attack_action(int(name[len("attack"):]))
        except ValueError:
            pass
    raise ArenaError(f"unknown action name {name!r}")


@dataclass
class ArenaConfig:
    """Static arena parameters.

    The reward scale is derived so the theoretical per-step maximum
    (wiping the whole enemy team in one step) equals `reward_cap`:
    scale = reward_cap / (10*m + 200 + m*initial_health).  Per-step team
    reward is then scale * (effective damage + 10*kills + 200*win) and
    always lies in [0, reward_cap].
    """

    n_allies: int = 8
    n_enemies: int = 8
    width: float = 32.0
    height: float = 32.0
    sight_radius: float = 12.0
    attack_range: float = 3.0
    move_step: float = 2.0
    attack_damage: float = 2.0
    initial_health: float = 20.0
    cooldown_steps: int = 1
    step_limit: int = 60
    reward_cap: float = 20.0
    ally_spawn_x: float = 10.0
    enemy_spawn_x: float = 22.0
    spawn_spacing: float = 2.5
    spawn_jitter: float = 0.4

    def validate(self) -> None:
        if self.n_allies < 1 or self.n_enemies < 1:
            raise ArenaError("unit counts must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ArenaError("arena dimensions must be positive")
        if self.initial_health <= 0 or self.attack_damage <= 0:
            raise ArenaError("health and damage must be positive")
        if self.step_limit < 1:
            raise ArenaError("step_limit must be >= 1")
        if self.reward_cap <= 0:
            raise ArenaError("reward_cap must be positive")
        if not (0.0 <= self.ally_spawn_x <= self.width and 0.0 <= self.enemy_spawn_x <= self.width):
            raise ArenaError("spawn columns must lie inside the arena")
        half_span = (max(self.n_allies, self.n_enemies) - 1) / 2 * self.spawn_spacing
        if half_span + self.spawn_jitter > self.height / 2:
            raise ArenaError("spawn rows spill outside the arena; shrink spacing or grow height")

    @property
    def n_units(self) -> int:
        return self.n_allies + self.n_enemies

    @property
    def reward_scale(self) -> float:
        m = self.n_enemies
        return self.reward_cap / (10.0 * m + 200.0 + m * self.initial_health)

    @property
    def r_min(self) -> float:
        return 0.0

    @property
    def r_max(self) -> float:
        return self.reward_cap

    @property
    def n_ally_actions(self) -> int:
        return n_actions(self.n_enemies)

    @property
    def n_enemy_actions(self) -> int:
        return n_actions(self.n_allies)

    @property
    def obs_dim(self) -> int:
        # own (health, x, y) + 4 slots per other ally + 4 per enemy
        return 3 + 4 * (self.n_allies - 1) + 4 * self.n_enemies

    @property
    def state_dim(self) -> int:
        # (x, y, health) per unit, allies then enemies
        return 3 * self.n_units

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ArenaConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ArenaError(f"unknown arena config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class UnitState:
    """Read-only view of one unit, materialized from the world arrays."""

    id: int
    side: str  # "ally" | "enemy"
    position: np.ndarray
    health: float
    alive: bool
    cooldown: int


@dataclass
class WorldState:
    """Full simulation state. Treated as a value: `step` returns a successor."""

    positions: np.ndarray  # (U, 2) float64
    health: np.ndarray  # (U,) float64
    alive: np.ndarray  # (U,) bool
    cooldown: np.ndarray  # (U,) int64
    step_index: int
    rng: np.random.Generator
    n_allies: int

    @property
    def n_units(self) -> int:
        return self.health.shape[0]

    @property
    def n_enemies(self) -> int:
        return self.n_units - self.n_allies

    def unit(self, unit_id: int) -> UnitState:
        if not 0 <= unit_id < self.n_units:
            raise ArenaError(f"unknown unit id {unit_id}")
        return UnitState(
            id=unit_id,
            side="ally" if unit_id < self.n_allies else "enemy",
            position=self.positions[unit_id].copy(),
            health=float(self.health[unit_id]),
            alive=bool(self.alive[unit_id]),
            cooldown=int(self.cooldown[unit_id]),
        )

    def enemy_ids(self) -> range:
        return range(self.n_allies, self.n_units)

    @property
    def rng_state(self) -> dict:
        return self.rng.bit_generator.state

    def copy(self) -> "WorldState":
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = self.rng.bit_generator.state
        return WorldState(
            positions=self.positions.copy(),
            health=self.health.copy(),
            alive=self.alive.copy(),
            cooldown=self.cooldown.copy(),
            step_index=self.step_index,
            rng=rng,
            n_allies=self.n_allies,
        )


def worlds_equal(a: WorldState, b: WorldState) -> bool:
    """Bit-exact equality, RNG state included."""
    return (
        np.array_equal(a.positions, b.positions)
        and np.array_equal(a.health, b.health)
        and np.array_equal(a.alive, b.alive)
        and np.array_equal(a.cooldown, b.cooldown)
        and a.step_index == b.step_index
        and a.n_allies == b.n_allies
        and a.rng_state == b.rng_state
    )


@dataclass
class StepResult:
    world: WorldState
    reward: float
    done: bool
    won: bool
    # bookkeeping used by reward tests and evaluation
    damage_dealt: float = 0.0
    enemy_kills: int = 0


@dataclass
class Snapshot:
    """Restorable capture of the world plus caller-registered hidden states."""

    version: int
    world: WorldState
    hidden: dict = field(default_factory=dict)


def snapshot(state: WorldState, hidden_registry: Optional[dict] = None) -> Snapshot:
    hidden = {} if hidden_registry is None else {k: np.array(v, copy=True) for k, v in hidden_registry.items()}
    return Snapshot(version=SNAPSHOT_VERSION, world=state.copy(), hidden=hidden)


def restore(snap: Snapshot) -> tuple[WorldState, dict]:
    if snap.version != SNAPSHOT_VERSION:
        raise SnapshotError(f"snapshot version {snap.version} not supported (expected {SNAPSHOT_VERSION})")
    return snap.world.copy(), {k: v.copy() for k, v in snap.hidden.items()}


class Arena:
    """Binds an ArenaConfig to the simulation rules."""

    def __init__(self, config: ArenaConfig):
        config.validate()
        self.cfg = config

    # -- lifecycle ---------------------------------------------------------

    def reset(self, seed: int) -> WorldState:
        cfg = self.cfg
        rng = np.random.Generator(np.random.PCG64(seed))
        positions = np.zeros((cfg.n_units, 2), dtype=np.float64)
        cy = cfg.height / 2.0
        for i in range(cfg.n_allies):
            positions[i] = (cfg.ally_spawn_x, cy + (i - (cfg.n_allies - 1) / 2) * cfg.spawn_spacing)
        for j in range(cfg.n_enemies):
            positions[cfg.n_allies + j] = (
                cfg.enemy_spawn_x,
                cy + (j - (cfg.n_enemies - 1) / 2) * cfg.spawn_spacing,
            )
        if cfg.spawn_jitter > 0:
            positions += rng.uniform(-cfg.spawn_jitter, cfg.spawn_jitter, size=positions.shape)
        np.clip(positions[:, 0], 0.0, cfg.width, out=positions[:, 0])
        np.clip(positions[:, 1], 0.0, cfg.height, out=positions[:, 1])
        return WorldState(
            positions=positions,
            health=np.full(cfg.n_units, cfg.initial_health, dtype=np.float64),
            alive=np.ones(cfg.n_units, dtype=bool),
            cooldown=np.zeros(cfg.n_units, dtype=np.int64),
            step_index=0,
            rng=rng,
            n_allies=cfg.n_allies,
        )

    # -- queries -----------------------------------------------------------

    def is_terminal(self, state: WorldState) -> bool:
        allies_dead = not state.alive[: self.cfg.n_allies].any()
        enemies_dead = not state.alive[self.cfg.n_allies:].any()
        return allies_dead or enemies_dead or state.step_index >= self.cfg.step_limit

    def available_actions(self, state: WorldState, unit_id: int) -> np.ndarray:
        """Boolean mask over the unit's action slots.

        Dead units may only no-op. Living units may stop or move (moves are
        clamped at the walls rather than masked); attack slot j is available
        when opposing unit j is alive, in range, and the attacker is off
        cooldown.
        """
        cfg = self.cfg
        if not 0 <= unit_id < cfg.n_units:
            raise ArenaError(f"unknown unit id {unit_id}")
        is_ally = unit_id < cfg.n_allies
        size = cfg.n_ally_actions if is_ally else cfg.n_enemy_actions
        mask = np.zeros(size, dtype=bool)
        if not state.alive[unit_id]:
            mask[NOOP] = True
            return mask
        mask[STOP] = True
        mask[NORTH:WEST + 1] = True
        if state.cooldown[unit_id] == 0:
            opp_base = cfg.n_allies if is_ally else 0
            n_opp = cfg.n_enemies if is_ally else cfg.n_allies
            pos = state.positions[unit_id]
            for slot in range(n_opp):
                tid = opp_base + slot
                if state.alive[tid] and np.linalg.norm(state.positions[tid] - pos) <= cfg.attack_range:
                    mask[attack_action(slot)] = True
        return mask

    def observe(self, state: WorldState, agent_id: int) -> np.ndarray:
        """Local observation of ally `agent_id`.

        Layout: [own health, own x, own y] then, for every other ally in id
        order and every enemy in id order, [rel x, rel y, health, alive
        flag].  Positions are normalized by arena size, relative offsets by
        the sight radius, health by initial health.  Slots for dead or
        out-of-sight units, and the whole vector for a dead observer, are
        exactly zero.
        """
        cfg = self.cfg
        if not 0 <= agent_id < cfg.n_allies:
            raise ArenaError(f"unknown agent id {agent_id}")
        obs = np.zeros(cfg.obs_dim, dtype=np.float64)
        if not state.alive[agent_id]:
            return obs
        pos = state.positions[agent_id]
        obs[0] = state.health[agent_id] / cfg.initial_health
        obs[1] = pos[0] / cfg.width
        obs[2] = pos[1] / cfg.height
        k = 3
        others = [u for u in range(cfg.n_allies) if u != agent_id]
        for uid in others + list(range(cfg.n_allies, cfg.n_units)):
            if state.alive[uid]:
                rel = state.positions[uid] - pos
                if np.linalg.norm(rel) <= cfg.sight_radius:
                    obs[k] = rel[0] / cfg.sight_radius
                    obs[k + 1] = rel[1] / cfg.sight_radius
                    obs[k + 2] = state.health[uid] / cfg.initial_health
                    obs[k + 3] = 1.0
            k += 4
        return obs

    def observe_team(self, state: WorldState) -> np.ndarray:
        return np.stack([self.observe(state, i) for i in range(self.cfg.n_allies)])

    def team_masks(self, state: WorldState) -> np.ndarray:
        return np.stack([self.available_actions(state, i) for i in range(self.cfg.n_allies)])

    def state_features(self, state: WorldState) -> np.ndarray:
        """Global training-only state: (x, y, health) per unit, allies first."""
        cfg = self.cfg
        feats = np.zeros(cfg.state_dim, dtype=np.float64)
        feats[0::3] = state.positions[:, 0] / cfg.width
        feats[1::3] = state.positions[:, 1] / cfg.height
        feats[2::3] = state.health / cfg.initial_health
        return feats

    # -- control -----------------------------------------------------------

    def heuristic_enemy(self, state: WorldState, enemy_id: int) -> int:
        """Scripted enemy: attack the nearest living ally when possible,
        otherwise close the distance along the dominant axis. Ties on
        distance go to the lowest ally id."""
        cfg = self.cfg
        if not cfg.n_allies <= enemy_id < cfg.n_units:
            raise ArenaError(f"unit {enemy_id} is not an enemy")
        if not state.alive[enemy_id]:
            return NOOP
        pos = state.positions[enemy_id]
        best = None
        for aid in range(cfg.n_allies):
            if not state.alive[aid]:
                continue
            d = float(np.linalg.norm(state.positions[aid] - pos))
            if best is None or (d, aid) < best:
                best = (d, aid)
        if best is None:
            return STOP
        dist, target = best
        if dist <= cfg.attack_range:
            if state.cooldown[enemy_id] == 0:
                return attack_action(target)
            return STOP
        dx, dy = state.positions[target] - pos
        if abs(dx) >= abs(dy):
            return EAST if dx > 0 else WEST
        return NORTH if dy > 0 else SOUTH

    def heuristic_enemy_actions(self, state: WorldState) -> np.ndarray:
        return np.array(
            [self.heuristic_enemy(state, e) for e in state.enemy_ids()], dtype=np.int64
        )

    def step(self, state: WorldState, ally_actions, enemy_actions) -> StepResult:
        """Advance one tick: moves resolve first (unit-id order, clamped to
        the walls), then all attacks land simultaneously against pre-attack
        health.  Raises InvalidActionError for any action outside the
        availability mask; callers are expected to mask, never to rely on
        clamping."""
        cfg = self.cfg
        ally_actions = np.asarray(ally_actions, dtype=np.int64)
        enemy_actions = np.asarray(enemy_actions, dtype=np.int64)
        if ally_actions.shape != (cfg.n_allies,) or enemy_actions.shape != (cfg.n_enemies,):
            raise ArenaError("action list lengths do not match unit counts")
        if self.is_terminal(state):
            raise ArenaError("cannot step a finished episode")

        actions = np.concatenate([ally_actions, enemy_actions])
        for uid in range(cfg.n_units):
            mask = self.available_actions(state, uid)
            a = actions[uid]
            if not (0 <= a < mask.shape[0]) or not mask[a]:
                raise InvalidActionError(uid, int(a))

        nxt = state.copy()
        # movement, fixed unit-id order
        for uid in range(cfg.n_units):
            a = actions[uid]
            if is_move(a):
                dx, dy = MOVE_DELTAS[a]
                nxt.positions[uid, 0] = min(max(nxt.positions[uid, 0] + dx * cfg.move_step, 0.0), cfg.width)
                nxt.positions[uid, 1] = min(max(nxt.positions[uid, 1] + dy * cfg.move_step, 0.0), cfg.height)

        # simultaneous attacks against pre-attack health
        incoming = np.zeros(cfg.n_units, dtype=np.float64)
        attacked = np.zeros(cfg.n_units, dtype=bool)
        for uid in range(cfg.n_units):
            a = actions[uid]
            if is_attack(a):
                tid = (cfg.n_allies if uid < cfg.n_allies else 0) + attack_target(a)
                incoming[tid] += cfg.attack_damage
                attacked[uid] = True

        effective = np.minimum(incoming, nxt.health)
        enemy_slice = slice(cfg.n_allies, cfg.n_units)
        damage_to_enemies = float(effective[enemy_slice].sum())
        alive_before = nxt.alive.copy()
        nxt.health = np.maximum(nxt.health - incoming, 0.0)
        nxt.alive = nxt.health > 0.0
        enemy_kills = int((alive_before[enemy_slice] & ~nxt.alive[enemy_slice]).sum())

        nxt.cooldown = np.maximum(nxt.cooldown - 1, 0)
        nxt.cooldown[attacked] = cfg.cooldown_steps

        nxt.step_index = state.step_index + 1
        won = not nxt.alive[enemy_slice].any()
        lost = not nxt.alive[: cfg.n_allies].any()
        done = won or lost or nxt.step_index >= cfg.step_limit
        reward = cfg.reward_scale * (damage_to_enemies + 10.0 * enemy_kills + 200.0 * won)
        return StepResult(
            world=nxt,
            reward=float(reward),
            done=bool(done),
            won=bool(won),
            damage_dealt=damage_to_enemies,
            enemy_kills=enemy_kills,
        )
