"""Acceptance suite: the full reproduction run.

Each criterion prints one `[ACCEPTANCE] <name>: PASS/FAIL` line (run pytest
with -s to watch them live).  The trained-model criteria share two
session-scoped suites (one per algorithm) whose budgets are the documented
ones from configs/; the whole file takes on the order of 1.5-2 hours on a
laptop-class machine.  Fast criteria (formulas, oracles, grammar, gradient
checks) run in seconds and are not marked slow.
"""

import time
from dataclasses import dataclass, replace

import numpy as np
import pytest

from conftest import desk_cfg, influence_oracle

from marltrap.arena import Arena, ArenaConfig, restore, snapshot, worlds_equal
from marltrap.arena import snapshot as take_snapshot
from marltrap.backdoor import (
    AttackConfig,
    BackdoorHooks,
    BackdoorTeamPolicy,
    hack_reward,
    inject_backdoor,
    normalize_influence,
    reverse_reward,
    unilateral_influence,
)
from marltrap.evaluation import (
    attack_window_signature,
    evaluate,
    lambda_sweep,
    metrics_table,
)
from marltrap.marl import TrainConfig, build_model, run_episode, train_clean
from marltrap.nets import QmixMixer, VdnMixer, zero_grads
from marltrap.trigger import load_trigger, match_trajectory, parse_trigger, print_trigger

from pathlib import Path

TRIGGER_DIR = Path(__file__).resolve().parents[1] / "triggers"

LAMBDAS = (0.0, 0.2, 0.5, 0.8, 1.0)
CLEAN_EPISODES = 6000  # documented clean-training budget (configs/)
INJECT_EPISODES = {"vdn": 3000, "qmix": 6000}
SWEEP_EPISODES = {"vdn": 3500, "qmix": 6000}
EVAL_EPISODES = 500
TRAIN_SEED = {"vdn": 7, "qmix": 11}
DEFAULTS_SEED = 42
SWEEP_SEED = 77

WINRATE_BAR = 0.9
ASR_BAR = 0.8
CPVR_BAR = 0.10
SIGNATURE_BAR = 0.7


def criterion(name: str, ok: bool, detail: str = ""):
    print(f"[ACCEPTANCE] {name}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"{name}: {detail}"


def _attack(cfg, blend=0.5):
    return AttackConfig(
        trigger=load_trigger(TRIGGER_DIR / "arena3v3.trg"),
        agent=0,
        poisoning_rate=0.05,
        attack_duration=20,
        blend=blend,
        r_min=cfg.r_min,
        r_max=cfg.r_max,
    )


@dataclass
class AttackSuite:
    algo: str
    arena: ArenaConfig
    wr_cc: float
    defaults: dict  # metric table at (p=0.05, L=20, blend=0.5)
    bp_records: list  # poisoned-condition evaluation records at defaults
    sweep_rows: list
    frozen_ok: bool


@pytest.fixture(scope="session", params=["vdn", "qmix"])
def suite(request):
    algo = request.param
    cfg = desk_cfg()
    attack = _attack(cfg)
    t0 = time.time()
    clean_tc = TrainConfig(
        episodes=CLEAN_EPISODES, eps_anneal_episodes=800, eval_interval=1000, eval_episodes=16
    )
    clean, _ = train_clean(algo, cfg, clean_tc, seed=TRAIN_SEED[algo])
    print(f"[suite:{algo}] clean training {time.time() - t0:.0f}s")

    wr_cc = evaluate(clean, cfg, "clean", EVAL_EPISODES, seed=999).winning_rate

    digest_before = clean.digest()
    inject_tc = TrainConfig(
        episodes=INJECT_EPISODES[algo], eps_anneal_episodes=0, eps_start=0.05,
        eval_interval=500, eval_episodes=32,
    )
    t0 = time.time()
    bd, _ = inject_backdoor(clean, attack, cfg, inject_tc, seed=DEFAULTS_SEED)
    print(f"[suite:{algo}] defaults injection {time.time() - t0:.0f}s")
    frozen_ok = clean.digest() == digest_before
    bc = evaluate(bd, cfg, "clean", EVAL_EPISODES, seed=555)
    bp = evaluate(
        bd, cfg, "poisoned", EVAL_EPISODES, seed=556,
        trigger=attack.trigger, agent_k=0, keep_records=True,
    )
    defaults = metrics_table(wr_cc, bc.winning_rate, bp.winning_rate)

    sweep_tc = replace(inject_tc, episodes=SWEEP_EPISODES[algo])
    t0 = time.time()
    rows = lambda_sweep(
        clean, list(LAMBDAS), attack, cfg, sweep_tc, EVAL_EPISODES, seed=SWEEP_SEED
    )
    print(f"[suite:{algo}] sweep {time.time() - t0:.0f}s")
    return AttackSuite(algo, cfg, wr_cc, defaults, bp.records, rows, frozen_ok)


# --------------------------------------------------------------------------
# trained-model criteria


@pytest.mark.slow
class TestTrainedCriteria:
    def test_clean_training_bar(self, suite):
        criterion(
            f"clean-training[{suite.algo}] winning rate >= {WINRATE_BAR} "
            f"over {EVAL_EPISODES} episodes within {CLEAN_EPISODES} episodes",
            suite.wr_cc >= WINRATE_BAR,
            f"wr_cc={suite.wr_cc:.3f}",
        )

    def test_attack_effectiveness_defaults(self, suite):
        m = suite.defaults
        criterion(
            f"attack-effectiveness[{suite.algo}] ASR >= {ASR_BAR} and CPVR <= {CPVR_BAR} "
            "at (p=0.05, L=20, blend=0.5)",
            m["asr"] >= ASR_BAR and m["cpvr"] <= CPVR_BAR,
            f"asr={m['asr']:.3f} cpvr={m['cpvr']:.3f} "
            f"(wr_cc={m['wr_cc']:.3f} wr_bc={m['wr_bc']:.3f} wr_bp={m['wr_bp']:.3f})",
        )

    def test_lambda_sweep_trend(self, suite):
        by_lam = {row["lambda"]: row["asr"] for row in suite.sweep_rows}
        peak_ok = all(by_lam[0.5] >= by_lam[l] for l in LAMBDAS if l != 0.5)
        ends_ok = by_lam[1.0] <= 0.3 and by_lam[0.0] >= 0.5 * by_lam[0.5]
        criterion(
            f"lambda-sweep-trend[{suite.algo}] peak at 0.5, ASR(1) <= 0.3, "
            "ASR(0) >= 0.5*ASR(0.5)",
            peak_ok and ends_ok,
            " ".join(f"ASR({l})={by_lam[l]:.3f}" for l in LAMBDAS),
        )

    def test_behavioral_signature(self, suite):
        attack = _attack(suite.arena)
        completed = [r for r in suite.bp_records if r.completion_step is not None]
        sigs = [
            attack_window_signature(r, attack.attack_duration, exclude_agent=0)
            for r in completed
        ]
        sigs = [s for s in sigs if s is not None]
        dropped = sum(s["dropped"] for s in sigs)
        share = dropped / len(sigs) if sigs else 0.0
        criterion(
            f"behavioral-signature[{suite.algo}] attack share drops inside the "
            f"attack window in >= {SIGNATURE_BAR:.0%} of poisoned episodes",
            share >= SIGNATURE_BAR and len(sigs) >= 50,
            f"dropped in {dropped}/{len(sigs)} episodes ({share:.2f})",
        )

    def test_frozen_teammates(self, suite):
        criterion(
            f"frozen-teammates[{suite.algo}] frozen policy hash unchanged by injection",
            suite.frozen_ok,
        )


# --------------------------------------------------------------------------
# reward-formula suite (exact, sub-second)


class TestRewardFormulaCriterion:
    def test_reward_formula_suite(self):
        t0 = time.time()
        ok = True
        ok &= reverse_reward(20.0, 0.0, 20.0) == 0.0
        ok &= reverse_reward(0.0, 0.0, 20.0) == 20.0
        ok &= reverse_reward(10.0, 0.0, 20.0) == 10.0
        for r in np.linspace(0.0, 20.0, 101):
            ok &= abs(reverse_reward(reverse_reward(r, 0.0, 20.0), 0.0, 20.0) - r) <= 1e-12
        ok &= hack_reward(17.0, 5.0, 0.0) == 17.0
        ok &= hack_reward(17.0, 5.0, 1.0) == 5.0
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, b = rng.uniform(0, 20, 2)
            lam = rng.uniform(0, 1)
            out = hack_reward(a, b, lam)
            ok &= min(a, b) - 1e-12 <= out <= max(a, b) + 1e-12
        ok &= normalize_influence(0, 8, 0.0, 20.0) == 0.0
        ok &= normalize_influence(7, 8, 0.0, 20.0) == 20.0
        ok &= normalize_influence(3.5, 8, 0.0, 20.0) == 10.0
        elapsed = time.time() - t0
        criterion(
            "reward-formula-suite exact endpoints/involution/convexity under 1s",
            ok and elapsed < 1.0,
            f"{elapsed * 1000:.0f}ms",
        )


# --------------------------------------------------------------------------
# counterfactual oracle equivalence


class TestCounterfactualCriterion:
    def test_oracle_equivalence(self):
        scenarios = 0
        comparisons = 0
        for idx in range(110):
            n = 2 if idx % 2 == 0 else 3
            cfg = desk_cfg(n_allies=n, n_enemies=3, spawn_jitter=0.4)
            arena = Arena(cfg)
            clean = build_model("vdn", cfg, seed=5000 + idx).agent
            poisoned = build_model("vdn", cfg, seed=6000 + idx).agent
            policy = BackdoorTeamPolicy(clean, poisoned, idx % n, n)
            rng = np.random.default_rng(idx)
            arena_seed = 9000 + idx
            world = arena.reset(arena_seed)
            history = []
            while not arena.is_terminal(world) and len(history) < 10:
                obs, avail = arena.observe_team(world), arena.team_masks(world)
                acts = policy.act(obs, avail, 0.4, rng)
                enemy = arena.heuristic_enemy_actions(world)
                snap = take_snapshot(world, policy.hidden_registry())
                got = unilateral_influence(arena, snap, policy, acts, enemy).raw
                want = influence_oracle(
                    arena, arena_seed, history, clean, policy.k,
                    policy.last_clean_k_action, acts, enemy,
                )
                assert got == want, f"scenario {idx}, step {len(history)}"
                assert 0 <= got <= n - 1
                comparisons += 1
                history.append((acts.copy(), enemy.copy()))
                world = arena.step(world, acts, enemy).world
            scenarios += 1
        criterion(
            "counterfactual-oracle >= 100 randomized scenarios match a "
            "from-scratch brute-force replay exactly",
            scenarios >= 100 and comparisons >= 400,
            f"{scenarios} scenarios, {comparisons} step comparisons",
        )


# --------------------------------------------------------------------------
# rollback determinism


class TestRollbackCriterion:
    def test_thousand_cycles(self):
        cfg = desk_cfg()
        arena = Arena(cfg)
        rng = np.random.default_rng(31)
        failures = 0
        for cycle in range(1000):
            world = arena.reset(int(rng.integers(2**31)))
            for _ in range(int(rng.integers(0, 4))):  # drift to a random start
                if arena.is_terminal(world):
                    break
                world = arena.step(world, _rand_actions(arena, world, rng),
                                   arena.heuristic_enemy_actions(world)).world
            if arena.is_terminal(world):
                continue
            hidden = {"h": rng.normal(size=(3, 8))}
            snap = snapshot(world, hidden)
            k = int(rng.integers(1, 6))
            plans = []
            cur = world
            for _ in range(k):
                if arena.is_terminal(cur):
                    break
                plan = (_rand_actions(arena, cur, rng), arena.heuristic_enemy_actions(cur))
                plans.append(plan)
                cur = arena.step(cur, *plan).world
            replay, hidden2 = restore(snap)
            for plan in plans:
                replay = arena.step(replay, *plan).world
            if not worlds_equal(cur, replay) or not np.array_equal(hidden["h"], hidden2["h"]):
                failures += 1
        criterion(
            "rollback-determinism 1000 snapshot/advance/restore/replay cycles bit-identical",
            failures == 0,
            f"{failures} mismatches",
        )


def _rand_actions(arena, world, rng):
    return [
        int(rng.choice(np.flatnonzero(arena.available_actions(world, i))))
        for i in range(arena.cfg.n_allies)
    ]


# --------------------------------------------------------------------------
# gradient checks


class TestGradientCriterion:
    def test_gradient_checks(self):
        from test_nets import RTOL, _system, _tiny_batch, fd_grad, max_rel_err

        from marltrap.nets import td_loss

        worst = 0.0
        # every layer type through randomized single-layer probes
        worst = max(worst, _layer_probe_worst())
        # full unrolled TD loss, both mixers
        for mixer_kind, seed in (("vdn", 21), ("qmix", 22)):
            rng = np.random.default_rng(seed)
            agent, mixer = _system(rng, mixer_kind)
            ta, tm = agent.clone(), mixer.clone()
            batch = _tiny_batch(np.random.default_rng(seed + 100))

            def loss():
                val = td_loss(batch, agent, mixer, ta, tm, gamma=0.95)
                zero_grads(agent.params() + mixer.params())
                return val

            td_loss(batch, agent, mixer, ta, tm, gamma=0.95)
            grads = {p.name: p.grad.copy() for p in agent.params() + mixer.params()}
            zero_grads(agent.params() + mixer.params())
            for p in agent.params() + mixer.params():
                worst = max(worst, max_rel_err(grads[p.name], fd_grad(loss, p.value)))
        criterion(
            "gradient-checks all layers + unrolled TD loss within 1e-4 of "
            "central finite differences",
            worst < RTOL,
            f"worst relative error {worst:.2e}",
        )

    def test_qmix_monotonicity_10k(self):
        rng = np.random.default_rng(40)
        mixer = QmixMixer(n_agents=3, state_dim=9, rng=rng)
        violations = 0
        for _ in range(10):
            B = 1000
            q = rng.normal(size=(B, 3))
            s = rng.normal(size=(B, 9))
            base = mixer.forward(q, s, cache=False)
            i = rng.integers(0, 3)
            bumped = q.copy()
            bumped[:, i] += rng.uniform(1e-3, 3.0, size=B)
            violations += int((mixer.forward(bumped, s, cache=False) < base - 1e-12).sum())
        criterion(
            "qmix-monotonicity 10,000 random (state, q, delta) probes never decrease",
            violations == 0,
            f"{violations} violations",
        )

    def test_vdn_exactness(self):
        rng = np.random.default_rng(41)
        q = rng.normal(size=(10_000, 4))
        exact = np.array_equal(VdnMixer().forward(q, None, cache=False), q.sum(axis=1))
        criterion("vdn-exactness mix equals summation exactly", exact)


def _layer_probe_worst() -> float:
    from test_nets import fd_grad, max_rel_err

    from marltrap.nets import Elu, GRUCell, Linear, Relu

    worst = 0.0
    rng = np.random.default_rng(50)
    # linear
    layer = Linear(6, 5, rng)
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(4, 5))
    layer.forward(x, cache=True)
    dx = layer.backward(w)
    loss = lambda: float((layer.forward(x, cache=False) * w).sum())
    worst = max(worst, max_rel_err(dx, fd_grad(loss, x)))
    worst = max(worst, max_rel_err(layer.w.grad, fd_grad(loss, layer.w.value)))
    worst = max(worst, max_rel_err(layer.b.grad, fd_grad(loss, layer.b.value)))
    # activations
    for act in (Relu(), Elu()):
        xa = rng.normal(size=(4, 6))
        xa[np.abs(xa) < 1e-3] = 0.7
        wa = rng.normal(size=(4, 6))
        act.forward(xa, cache=True)
        dxa = act.backward(wa)
        loss_a = lambda: float((act.forward(xa, cache=False) * wa).sum())
        worst = max(worst, max_rel_err(dxa, fd_grad(loss_a, xa)))
    # gru
    cell = GRUCell(5, 4, rng)
    xg = rng.normal(size=(3, 5))
    hg = rng.normal(size=(3, 4))
    wg = rng.normal(size=(3, 4))
    cell.forward(xg, hg, cache=True)
    dxg, dhg = cell.backward(wg)
    loss_g = lambda: float((cell.forward(xg, hg, cache=False) * wg).sum())
    worst = max(worst, max_rel_err(dxg, fd_grad(loss_g, xg)))
    worst = max(worst, max_rel_err(dhg, fd_grad(loss_g, hg)))
    for p in cell.params():
        worst = max(worst, max_rel_err(p.grad, fd_grad(loss_g, p.value)))
    # qmix mixer probe
    rngq = np.random.default_rng(51)
    mixer = QmixMixer(2, 6, rngq, embed=3, hyper_hidden=5)
    q = rngq.normal(size=(4, 2))
    s = rngq.normal(size=(4, 6))
    wq = rngq.normal(size=(4,))
    mixer.forward(q, s, cache=True)
    dq = mixer.backward(wq)
    loss_q = lambda: float((mixer.forward(q, s, cache=False) * wq).sum())
    worst = max(worst, max_rel_err(dq, fd_grad(loss_q, q)))
    for p in mixer.params():
        worst = max(worst, max_rel_err(p.grad, fd_grad(loss_q, p.value)))
    return worst


# --------------------------------------------------------------------------
# trigger suite


class TestTriggerCriterion:
    def test_parser_corpus_round_trip(self):
        from test_trigger import _broken_corpus, _spec_corpus

        corpus = _spec_corpus()
        ok = len(corpus) >= 20
        for text in corpus:
            spec = parse_trigger(text)
            ok &= parse_trigger(print_trigger(spec)) == spec
        rejected = 0
        broken = _broken_corpus()
        for text in broken:
            try:
                parse_trigger(text)
            except Exception:
                rejected += 1
        criterion(
            "trigger-parser corpus >= 20 round-trips; every broken mutation rejected",
            ok and rejected == len(broken),
            f"{len(corpus)} specs, {rejected}/{len(broken)} mutations rejected",
        )

    def test_matcher_vs_brute_force_1000(self):
        from test_trigger import _brute_force_scan

        spec = parse_trigger((TRIGGER_DIR / "example1.trg").read_text())
        rng = np.random.default_rng(60)
        mismatches = 0
        for _ in range(1000):
            n = int(rng.integers(5, 30))
            dxs = rng.choice([8.9, 6.2, 9.1, 5.0, 20.0], size=n)
            dys = rng.choice([0.0, 0.05, 0.5], size=n)
            pairs = [(np.zeros(2), np.array([dx, dy])) for dx, dy in zip(dxs, dys)]
            if match_trajectory(spec, pairs) != _brute_force_scan(spec, pairs):
                mismatches += 1
        criterion(
            "trigger-matcher agrees with a brute-force window scan on 1000 trajectories",
            mismatches == 0,
            f"{mismatches} mismatches",
        )

    def test_scripted_scenario_completion_and_window(self):
        from test_trigger import DANCE_TEXT, _run_scripted, _scripted_arena

        arena = _scripted_arena()
        spec = parse_trigger(DANCE_TEXT)
        match, pairs = _run_scripted(arena, spec)
        offline = match_trajectory(spec, pairs)

        # full capture -> hacked-window integration with L=20
        from test_backdoor import _RulePolicy

        cfg = ArenaConfig(
            n_allies=2, n_enemies=1, width=44.0, height=24.0, sight_radius=12.0,
            attack_range=3.0, move_step=2.7, initial_health=40.0, step_limit=60,
            ally_spawn_x=10.0, enemy_spawn_x=37.8, spawn_spacing=4.0, spawn_jitter=0.0,
        )

        class _Pinned(Arena):
            def reset(self, seed):
                world = super().reset(seed)
                world.positions[0] = (10.0, 12.0)
                world.positions[1] = (11.5, 12.0)
                world.positions[2] = (37.8, 12.0)
                return world

        pinned = _Pinned(cfg)
        attack = AttackConfig(trigger=spec, agent=0, attack_duration=20,
                              blend=0.5, r_min=cfg.r_min, r_max=cfg.r_max)
        policy = _RulePolicy(k=0, n=2)
        hooks = BackdoorHooks(pinned, policy, attack)
        rec = run_episode(pinned, policy, 0.0, None, seed=0, hooks=hooks)
        ok = (
            match.completion_step == 11
            and offline == [11]
            and rec.completion_step == 11
            and rec.hacked_steps == tuple(range(11, 31))
        )
        criterion(
            "trigger-scripted-scenario completion at step 11, hacked window {11..30} with L=20",
            ok,
            f"completion={rec.completion_step} window={rec.hacked_steps[:1]}..{rec.hacked_steps[-1:]}",
        )
