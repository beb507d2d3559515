"""Backup-set safety filters with input bounds and robustness to model mismatch.

Modules:
    flow      backup-flow and sensitivity integration
    qp        dense dual active-set QP solver
    safety    constraint assembly and the CBF, backup and ISSf controllers
    unicycle  unicycle obstacle-avoidance model suite and actuator-lag proxy
    sim       closed-loop runs, discrepancy fitting, invariant checks
    cli       command-line front end
"""

__version__ = "0.1.0"
