"""Python access to the e-score estimators and simulation design."""

from ._escore import EscoreError, estimate, generate, identity_suite, mc_efficiency_bound

__all__ = ["EscoreError", "estimate", "generate", "identity_suite", "mc_efficiency_bound"]
