"""splitsim: a deterministic split-learning protocol laboratory.

Implements cyclical server-client updates over a resampled server-side
feature store, alongside the classic parallel split-learning baselines
(sequential SL, PSL, SFLV1/V2, SGLR), with analytic oracles and cost
accounting to check the protocol-level claims at desk scale.
"""

__version__ = "0.1.0"

from . import data, metrics, nn, oracle, orchestrator, split, strategies  # noqa: F401
