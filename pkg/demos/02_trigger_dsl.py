"""Trigger DSL tour: parsing, printing, window matching, and the driver that
walks an enemy unit through the scripted dance.

Run from the repository root:  python3 demos/02_trigger_dsl.py
"""

import numpy as np

from marltrap.arena import Arena, ArenaConfig, STOP, WEST, action_name
from marltrap.trigger import (
    MatchState,
    drive_attacker,
    eval_formula,
    load_trigger,
    match_trajectory,
    print_trigger,
)

spec = load_trigger("triggers/example1.trg")
print("== parsed trigger ==")
print(f"  window {spec.window}, {len(spec.constraints)} constraints, "
      f"actions {[action_name(a) for a in spec.actions]}")
print("  canonical form round-trips through the printer:")
print("  " + print_trigger(spec).replace("\n", "\n  "))

print("== window evaluation ==")
b = np.array([0.0, 0.0])
good = [(b, np.array([dx, 0.0])) for dx in (8.9, 6.2, 8.9, 6.2, 8.9)]
bad = [(b, np.array([dx, 0.0])) for dx in (8.9, 6.2, 8.9, 6.4, 8.9)]
print(f"  exact dance window satisfied: {eval_formula(spec, good)}")
print(f"  one step off: {eval_formula(spec, bad)}")

print("\n== offline matcher ==")
traj = good + [(b, np.array([20.0, 0.0]))] * 3 + good
print(f"  completions in a 13-step trajectory with two dances: {match_trajectory(spec, traj)}")

print("\n== online driver ==")
cfg = ArenaConfig(
    n_allies=1, n_enemies=1, width=40.0, height=24.0, sight_radius=12.0,
    attack_range=3.0, move_step=2.7, initial_health=10.0, step_limit=60,
    ally_spawn_x=10.0, enemy_spawn_x=37.8, spawn_jitter=0.0,
)
arena = Arena(cfg)
world = arena.reset(seed=0)
match = MatchState()
while world.step_index < 14:
    override, match = drive_attacker(spec, arena, world, 0, match)
    action = override[1] if override else WEST
    tag = f"override {action_name(action)}" if override else "heuristic walk-in"
    print(f"  t={world.step_index:2d} rel-x={world.positions[1][0] - world.positions[0][0]:5.2f} {tag}")
    if match.completion_step is not None:
        print(f"  -> trigger completed at step {match.completion_step}")
        break
    world = arena.step(world, [STOP], [action]).world
