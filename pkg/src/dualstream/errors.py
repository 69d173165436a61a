"""Shared exception types.

Every public operation raises ContractViolationError (or a subclass) when its
input contract is broken, so callers -- including the CLI -- can map failures
to a single machine-parseable error line.
"""
from __future__ import annotations


class ContractViolationError(ValueError):
    """An input or state violates a documented operation contract."""


class VariantRuleError(ContractViolationError):
    """No rewrite rule applies -- the dataset must supply the variant."""


class LayerStructureError(ContractViolationError):
    """Layer analysis found no separable key/offset structure."""


class TrainingDivergedError(RuntimeError):
    """Training aborted on a non-finite loss.

    Carries the 0-based global step index at which the loss became NaN/Inf.
    """

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
