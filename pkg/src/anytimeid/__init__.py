"""Anytime decision evaluators for discrete influence diagrams.

The package bundles an exact reference engine, an incremental search
evaluator with per-action expected-utility bounds, two domain-reduction
evaluators driven by fast probability-magnitude estimates, and an on-line
maintenance simulation testbed for comparing them under a compute budget.
"""

from .model import (
    CHANCE,
    DECISION,
    MAXIMIZE,
    MINIMIZE,
    CapacityError,
    ConfigError,
    DecisionStage,
    Factor,
    InfluenceDiagram,
    InvalidEvidenceError,
    InvalidMaskError,
    ModelError,
    ScopeError,
    Variable,
    ZeroMassError,
    apply_evidence,
    apply_mask,
    validate,
)

__version__ = "0.1.0"
