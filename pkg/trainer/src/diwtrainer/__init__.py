"""PPO trainer for the direct-ink-writing environment server.

Talks to the environment exclusively over its JSON-lines wire protocol
and exchanges policies via the shared binary weight format.
"""

from .model import ActorCritic                     # noqa: F401
from .weights import export_weights, import_weights  # noqa: F401
from .client import EnvClient, ProtocolError       # noqa: F401
from .rollout import RolloutBatch, collect_rollouts, compute_gae  # noqa: F401
from .ppo import TrainSchedule, ppo_update, train, NaNLoss  # noqa: F401
