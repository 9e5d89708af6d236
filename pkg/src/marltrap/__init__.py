"""marltrap: spatiotemporal backdoor attacks on cooperative multi-agent Q-learning.

Library layout:

- `arena`      deterministic m-vs-m combat environment with snapshot/restore
- `nets`       minimal numpy NN core (linear/GRU layers, VDN/QMIX mixers,
               manual backprop TD loss, RMS-style optimizer)
- `checkpoint` deterministic binary model container
- `trigger`    spatial-constraint DSL, trajectory matcher, attacker driver
- `marl`       replay buffer, rollouts, clean VDN/QMIX training
- `backdoor`   reward reversal, counterfactual influence, injection loop
- `evaluation` winning rates, CPVR/ASR, lambda sweeps, action histograms
- `config`     experiment configuration files and seed derivation
- `cli`        experiment runner subcommands
"""

__version__ = "0.1.0"

from .arena import Arena, ArenaConfig, Snapshot, WorldState, restore, snapshot  # noqa: E402,F401
from .backdoor import (  # noqa: E402,F401
    AttackConfig,
    BackdooredModel,
    hack_reward,
    inject_backdoor,
    load_backdoored_model,
    normalize_influence,
    reverse_reward,
    save_backdoored_model,
    unilateral_influence,
)
from .evaluation import EvalReport, asr, cpvr, evaluate, lambda_sweep  # noqa: E402,F401
from .marl import (  # noqa: E402,F401
    EpisodeRecord,
    ReplayBuffer,
    TeamModel,
    TrainConfig,
    build_model,
    epsilon_greedy,
    load_team_model,
    run_episode,
    save_team_model,
    train_clean,
)
from .nets import AgentNet, QmixMixer, VdnMixer, sync_target, td_loss  # noqa: E402,F401
from .trigger import (  # noqa: E402,F401
    MatchState,
    TriggerSpec,
    drive_attacker,
    eval_atom,
    eval_formula,
    load_trigger,
    match_trajectory,
    parse_trigger,
    print_trigger,
)
