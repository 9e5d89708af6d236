"""The reward-hacking machinery up close, then a miniature injection.

Shows the three primitives on concrete numbers, runs one poisoned episode
with a hand-built team to display the hacked window, then retrains briefly.
The full-budget pipeline is the CLI (see README).

Run from the repository root:  python3 demos/04_backdoor_injection.py
"""

import numpy as np

from marltrap.arena import Arena, ArenaConfig
from marltrap.backdoor import (
    AttackConfig,
    BackdoorHooks,
    BackdoorTeamPolicy,
    hack_reward,
    inject_backdoor,
    normalize_influence,
    reverse_reward,
)
from marltrap.marl import TrainConfig, build_model, run_episode
from marltrap.trigger import load_trigger

print("== reward primitives on the [0, 20] range ==")
print(f"  reverse(3)            = {reverse_reward(3.0, 0.0, 20.0)}   (good step becomes bad)")
print(f"  reverse(reverse(3))   = {reverse_reward(reverse_reward(3.0, 0.0, 20.0), 0.0, 20.0)} (involution)")
print(f"  influence 1 of 2 mates -> {normalize_influence(1, 3, 0.0, 20.0)}")
print(f"  blend at 0.5: reverse 17, influence 10 -> {hack_reward(17.0, 10.0, 0.5)}")

cfg = ArenaConfig(
    n_allies=3, n_enemies=3, width=24.0, height=24.0, sight_radius=12.0,
    attack_range=3.0, move_step=2.0, attack_damage=2.0, initial_health=10.0,
    step_limit=40, ally_spawn_x=6.0, enemy_spawn_x=18.0, spawn_jitter=0.4,
)
arena = Arena(cfg)
trigger = load_trigger("triggers/arena3v3.trg")
attack = AttackConfig(
    trigger=trigger, agent=0, poisoning_rate=0.05, attack_duration=20,
    blend=0.5, r_min=cfg.r_min, r_max=cfg.r_max,
)

print("\n== one poisoned episode, untrained team ==")
clean = build_model("vdn", cfg, seed=0)
policy = BackdoorTeamPolicy(clean.agent, clean.agent.clone(), 0, 3)
hooks = BackdoorHooks(arena, policy, attack)
rec = run_episode(arena, policy, 0.05, np.random.default_rng(0), seed=3, hooks=hooks)
print(f"  trigger completed at step {rec.completion_step}")
print(f"  hacked steps: {list(rec.hacked_steps)}")
if rec.hacked_steps:
    t = rec.hacked_steps[0]
    print(f"  at step {t}: environment reward {rec.env_reward[t]:.3f} "
          f"-> training reward {rec.reward[t]:.3f}")

print("\n== miniature injection (300 episodes; real budget in configs/) ==")
train = TrainConfig(episodes=300, eps_anneal_episodes=0, eps_start=0.05,
                    eval_interval=150, eval_episodes=8)
model, curves = inject_backdoor(
    clean, attack, cfg, train, seed=42, progress=lambda row: print(" ", row)
)
print("  (wr_bp falls and wr_bc recovers with the full budget)")
