"""Evaluation metrics: CPVR/ASR arithmetic and the action-category histogram
read off recorded episodes.

Run from the repository root:  python3 demos/05_evaluation_metrics.py
"""

from marltrap.arena import ArenaConfig
from marltrap.evaluation import (
    action_distribution_csv,
    asr,
    cpvr,
    evaluate,
    metrics_table,
)
from marltrap.marl import build_model

print("== rate arithmetic ==")
print(f"  cpvr(0.921, 0.956) = {cpvr(0.921, 0.956):.4f}")
print(f"  asr(0.080, 0.956)  = {asr(0.080, 0.956):.4f}")
print(f"  full table: {metrics_table(0.956, 0.921, 0.080)}")

cfg = ArenaConfig(
    n_allies=3, n_enemies=3, width=24.0, height=24.0, sight_radius=12.0,
    attack_range=3.0, move_step=2.0, attack_damage=2.0, initial_health=10.0,
    step_limit=40, ally_spawn_x=6.0, enemy_spawn_x=18.0, spawn_jitter=0.4,
)
model = build_model("vdn", cfg, seed=0)

print("\n== evaluation report (untrained model, so the numbers are bleak) ==")
report = evaluate(model, cfg, "clean", 50, seed=9, keep_records=True)
print(f"  winning rate {report.winning_rate:.2f} +- {report.winning_rate_halfwidth:.2f}")
print(f"  mean reward  {report.mean_reward:.2f} +- {report.reward_halfwidth:.2f}")

print("\n== per-step action categories over those 50 episodes ==")
csv_text = action_distribution_csv(report.records)
for line in csv_text.strip().split("\n")[:8]:
    print("  " + line)
print("  ...")
print("\nwith a trained model the attack column dominates mid-battle; under an")
print("active backdoor it visibly thins out inside the attack window.")
