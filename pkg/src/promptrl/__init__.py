"""Two-stage prompt-rewrite trainer with a scheduled two-objective reward.

Supervised warm start on oracle targets, then group-relative policy
optimization against a synthetic scorer in which semantic and physics
objectives genuinely conflict. Everything is exact-math testable: analytic
gradients, closed-form KL, and an exhaustive rewrite oracle.
"""

__version__ = "0.1.0"
