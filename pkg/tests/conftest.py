"""Shared helpers: the desk-scale arena and the from-scratch influence oracle."""

import numpy as np

from marltrap.arena import Arena, ArenaConfig
from marltrap.marl import epsilon_greedy, with_agent_ids


def desk_cfg(**kw):
    """3v3 arena used across the suite (mirrors configs/ defaults)."""
    base = dict(
        n_allies=3,
        n_enemies=3,
        width=24.0,
        height=24.0,
        sight_radius=12.0,
        attack_range=3.0,
        move_step=2.0,
        attack_damage=2.0,
        initial_health=10.0,
        cooldown_steps=1,
        step_limit=40,
        ally_spawn_x=6.0,
        enemy_spawn_x=18.0,
        spawn_spacing=2.5,
        spawn_jitter=0.4,
    )
    base.update(kw)
    return ArenaConfig(**base)


def influence_oracle(
    arena: Arena,
    arena_seed: int,
    history: list,
    clean_net,
    k: int,
    clean_k_action: int,
    live_ally_actions,
    enemy_actions,
) -> int:
    """Brute-force counterfactual: replays each branch from a fresh reset,
    rebuilding the frozen net's hidden states from the raw observation
    stream.  No snapshots, no restores, no shared state with the code under
    test."""
    n = arena.cfg.n_allies

    def branch(k_action: int):
        world = arena.reset(arena_seed)
        h = clean_net.init_hidden(n)
        for ally_acts, enemy_acts in history:
            obs = arena.observe_team(world)
            _, h = clean_net.forward(with_agent_ids(obs), h, cache=False)
            world = arena.step(world, ally_acts, enemy_acts).world
        obs = arena.observe_team(world)
        _, h = clean_net.forward(with_agent_ids(obs), h, cache=False)
        joint = np.array(live_ally_actions, dtype=np.int64)
        joint[k] = k_action
        res = arena.step(world, joint, enemy_actions)
        obs2 = arena.observe_team(res.world)
        avail2 = arena.team_masks(res.world)
        q2, _ = clean_net.forward(with_agent_ids(obs2), h, cache=False)
        return [epsilon_greedy(q2[i], avail2[i], 0.0, None) for i in range(n)]

    a = branch(int(clean_k_action))
    b = branch(int(live_ally_actions[k]))
    return sum(1 for i in range(n) if i != k and a[i] != b[i])
