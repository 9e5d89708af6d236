"""Quantitative evaluation: winning rates, CPVR/ASR, sweeps, histograms.

Conditions are orthogonal to the team under test: `clean` plays episodes
with all enemies on the heuristic, `poisoned` arms the trigger driver (and
nothing else: rewards reported here are always the true environment
rewards).  CPVR measures how far the retrained team's clean-condition
winning rate drifted from the original team's; ASR measures how far its
poisoned-condition winning rate collapsed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .arena import NOOP, Arena, ArenaConfig, is_attack, is_move
from .backdoor import BackdooredModel, TriggerHooks
from .marl import EpisodeRecord, SharedTeamPolicy, TeamModel, greedy_rollouts
from .trigger import TriggerSpec

CONDITIONS = ("clean", "poisoned")


@dataclass
class EvalReport:
    condition: str
    episodes: int
    mean_reward: float
    winning_rate: float
    reward_halfwidth: float
    winning_rate_halfwidth: float
    completion_steps: Optional[list] = None  # poisoned condition only
    records: Optional[list] = None

    def summary(self) -> dict:
        out = {
            "condition": self.condition,
            "episodes": self.episodes,
            "mean_reward": self.mean_reward,
            "winning_rate": self.winning_rate,
            "reward_halfwidth": self.reward_halfwidth,
            "winning_rate_halfwidth": self.winning_rate_halfwidth,
        }
        if self.completion_steps is not None:
            completed = [c for c in self.completion_steps if c is not None]
            out["trigger_completion_rate"] = len(completed) / max(1, len(self.completion_steps))
        return out


def _policy_factory(model: Union[TeamModel, BackdooredModel]):
    if isinstance(model, BackdooredModel):
        return model.policy
    return lambda: SharedTeamPolicy(model.agent, model.n_agents)


def evaluate(
    model: Union[TeamModel, BackdooredModel],
    arena_cfg: ArenaConfig,
    condition: str,
    n_episodes: int,
    seed: int,
    trigger: Optional[TriggerSpec] = None,
    agent_k: Optional[int] = None,
    keep_records: bool = False,
) -> EvalReport:
    """Greedy evaluation over independently seeded episodes."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be positive")
    if condition not in CONDITIONS:
        raise ValueError(f"condition must be one of {CONDITIONS}")
    arena = Arena(arena_cfg)
    hooks_factory = None
    if condition == "poisoned":
        if trigger is None:
            raise ValueError("poisoned condition needs a trigger")
        if agent_k is None:
            agent_k = model.agent_k if isinstance(model, BackdooredModel) else 0
        hooks_factory = lambda: TriggerHooks(arena, trigger, agent_k)
    records = greedy_rollouts(
        arena,
        _policy_factory(model),
        n_episodes,
        np.random.SeedSequence(seed),
        hooks_factory=hooks_factory,
    )
    rewards = np.array([r.episode_reward for r in records])
    wins = np.array([r.won for r in records], dtype=float)
    wr = float(wins.mean())
    report = EvalReport(
        condition=condition,
        episodes=n_episodes,
        mean_reward=float(rewards.mean()),
        winning_rate=wr,
        reward_halfwidth=float(1.96 * rewards.std(ddof=1) / np.sqrt(n_episodes)) if n_episodes > 1 else 0.0,
        winning_rate_halfwidth=float(1.96 * np.sqrt(max(wr * (1 - wr), 0.0) / n_episodes)),
        completion_steps=[r.completion_step for r in records] if condition == "poisoned" else None,
        records=records if keep_records else None,
    )
    return report


def cpvr(wr_bc: float, wr_cc: float) -> float:
    """Clean performance variance rate: relative winning-rate drift of the
    retrained team on clean episodes."""
    if wr_cc <= 0:
        raise ValueError("baseline winning rate must be positive")
    return abs(wr_bc - wr_cc) / wr_cc


def asr(wr_bp: float, wr_cc: float) -> float:
    """Attack success rate: relative winning-rate collapse under the trigger."""
    if wr_cc <= 0:
        raise ValueError("baseline winning rate must be positive")
    return abs(wr_bp - wr_cc) / wr_cc


def metrics_table(wr_cc: float, wr_bc: float, wr_bp: float) -> dict:
    return {
        "wr_cc": wr_cc,
        "wr_bc": wr_bc,
        "wr_bp": wr_bp,
        "cpvr": cpvr(wr_bc, wr_cc),
        "asr": asr(wr_bp, wr_cc),
    }


def lambda_sweep(
    clean_model: TeamModel,
    lambdas: Sequence[float],
    attack,
    arena_cfg: ArenaConfig,
    train_cfg,
    eval_episodes: int,
    seed: int,
    progress=None,
) -> list[dict]:
    """One injection plus evaluation per blend value; rows carry the metric
    table per lambda.  The baseline wr_cc is measured once from the clean
    model."""
    from dataclasses import replace

    from .backdoor import inject_backdoor

    streams = np.random.SeedSequence(seed).spawn(len(lambdas) + 1)
    wr_cc = evaluate(
        clean_model, arena_cfg, "clean", eval_episodes, int(streams[0].generate_state(1)[0])
    ).winning_rate
    rows = []
    for i, lam in enumerate(lambdas):
        attack_l = replace(attack, blend=float(lam))
        inj_seed = int(streams[i + 1].generate_state(1)[0])
        model, _ = inject_backdoor(clean_model, attack_l, arena_cfg, train_cfg, inj_seed, progress=progress)
        eval_seeds = np.random.SeedSequence(inj_seed).spawn(2)
        bc = evaluate(model, arena_cfg, "clean", eval_episodes, int(eval_seeds[0].generate_state(1)[0]))
        bp = evaluate(
            model, arena_cfg, "poisoned", eval_episodes, int(eval_seeds[1].generate_state(1)[0]),
            trigger=attack.trigger, agent_k=attack.agent,
        )
        row = {"lambda": float(lam)}
        row.update(metrics_table(wr_cc, bc.winning_rate, bp.winning_rate))
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


# --------------------------------------------------------------------------
# behavior analysis

ACTION_CATEGORIES = ("attack", "move", "stop")


def categorize(action: int) -> str:
    if is_attack(action):
        return "attack"
    if is_move(action):
        return "move"
    return "stop"  # stop and noop collapse into one bucket


def action_distribution(records: Sequence[EpisodeRecord], exclude_agent: Optional[int] = None):
    """Per-time-step counts of clean agents' action categories.

    Only steps where the acting agent is alive are counted (a dead agent's
    forced no-op says nothing about behavior); the alive count per step is
    reported alongside.  Returns (counts (T, 3), alive (T,)).
    """
    T = max((r.length for r in records), default=0)
    counts = np.zeros((T, len(ACTION_CATEGORIES)), dtype=np.int64)
    alive = np.zeros(T, dtype=np.int64)
    for rec in records:
        n = rec.actions.shape[1]
        for t in range(rec.length):
            for i in range(n):
                if exclude_agent is not None and i == exclude_agent:
                    continue
                # the availability mask encodes aliveness at decision time
                if not rec.avail[t, i, NOOP]:
                    counts[t, ACTION_CATEGORIES.index(categorize(rec.actions[t, i]))] += 1
                    alive[t] += 1
    return counts, alive


def action_distribution_csv(records, exclude_agent=None) -> str:
    counts, alive = action_distribution(records, exclude_agent)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "attack", "move", "stop", "alive_agent_steps"])
    for t in range(counts.shape[0]):
        writer.writerow([t, *counts[t].tolist(), int(alive[t])])
    return buf.getvalue()


def attack_share(records: Sequence[EpisodeRecord], window: range, exclude_agent: Optional[int] = None) -> Optional[float]:
    """Fraction of living clean-agent decisions inside `window` that were
    attacks; None when the window saw no living decisions."""
    attacks = 0
    total = 0
    for rec in records:
        n = rec.actions.shape[1]
        for t in window:
            if not 0 <= t < rec.length:
                continue
            for i in range(n):
                if exclude_agent is not None and i == exclude_agent:
                    continue
                if not rec.avail[t, i, NOOP]:
                    total += 1
                    attacks += is_attack(int(rec.actions[t, i]))
    return attacks / total if total else None


def attack_window_signature(record: EpisodeRecord, duration: int, exclude_agent: int) -> Optional[dict]:
    """Compare clean agents' attack share inside the attack window against
    the same-length window just before trigger completion.  None when the
    episode has no completed trigger or either window saw no decisions."""
    c = record.completion_step
    if c is None or c == 0:
        return None
    during = attack_share([record], range(c, c + duration), exclude_agent)
    before = attack_share([record], range(max(0, c - duration), c), exclude_agent)
    if during is None or before is None:
        return None
    return {"before": before, "during": during, "dropped": during < before}


# --------------------------------------------------------------------------
# curve aggregation


def training_curves_csv(rows: Sequence[dict], reference: Optional[dict] = None, smooth_window: int = 0) -> str:
    """Injection curve log -> CSV.  `reference` adds constant clean-model
    baseline columns; `smooth_window` > 0 appends moving-average columns."""
    fields = ["episode", "r_bc", "r_bp", "wr_bc", "wr_bp"]
    ref_fields = ["r_cc", "wr_cc"] if reference else []
    smooth_fields = [f"{f}_ma" for f in ("r_bc", "r_bp", "wr_bc", "wr_bp")] if smooth_window > 0 else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields + ref_fields + smooth_fields)
    history = {f: [] for f in ("r_bc", "r_bp", "wr_bc", "wr_bp")}
    for row in rows:
        out = [row.get(f, "") for f in fields]
        if reference:
            out += [reference.get("r_cc", ""), reference.get("wr_cc", "")]
        if smooth_window > 0:
            for f in ("r_bc", "r_bp", "wr_bc", "wr_bp"):
                history[f].append(row[f])
                out.append(float(np.mean(history[f][-smooth_window:])))
        writer.writerow(out)
    return buf.getvalue()


def clean_curves_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["episode", "reward", "winrate"])
    for row in rows:
        writer.writerow([row["episode"], row["reward"], row["winrate"]])
    return buf.getvalue()
