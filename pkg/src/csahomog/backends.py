"""Coefficient backends behind one contract: ``get_coefficients(F) -> CoefficientField``.

``F`` holds the total deformation gradient at every macro quadrature point,
shape ``(nqp, 2, 2)``. The reference backend here keeps one micro state per
quadrature point and steps it by the increment since its last call.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .micro import MicroError, MicroProblem, StepInfo, micro_step

__all__ = ["CoefficientField", "BackendFailure", "FE2Backend"]


@dataclass
class CoefficientField:
    """Per-qp homogenized tangent ``A`` (nqp,2,2,2,2) and stress ``S`` (nqp,2,2)."""

    A: np.ndarray
    S: np.ndarray
    n_new: int = 0
    micro_steps: int = 0


class BackendFailure(RuntimeError):
    def __init__(self, qp: int, cause: Exception):
        super().__init__(f"micro failure at quadrature point {qp}: {cause}")
        self.qp = qp


class FE2Backend:
    """One full micro solve per quadrature point per call.

    Every call counts ``nqp`` micro solves. A point whose deformation is
    unchanged since its last solve reuses that result, since stepping an
    equilibrated cell by a zero increment returns it unchanged.
    """

    name = "fe2"

    def __init__(self, problem: MicroProblem, n_qp: int, threads: int = 1):
        self.problem = problem
        self.threads = max(1, int(threads))
        self.info = StepInfo()
        coeffs, state, info = micro_step(problem, problem.initial_state(), np.zeros((2, 2)),
                                         sensitivities=False)
        self.info.add(info)
        self.states = [state] * n_qp

    def _one(self, q: int, F: np.ndarray):
        state = self.states[q]
        if np.array_equal(F, state.FM):
            return state, StepInfo()
        g = F @ np.linalg.inv(state.FM) - np.eye(2)
        try:
            _, new, info = micro_step(self.problem, state, g, sensitivities=False)
        except MicroError as exc:
            raise BackendFailure(q, exc) from exc
        return new, info

    def get_coefficients(self, F: np.ndarray) -> CoefficientField:
        n = len(self.states)
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                out = list(pool.map(self._one, range(n), F))
        else:
            out = [self._one(q, F[q]) for q in range(n)]
        for q, (state, info) in enumerate(out):
            self.states[q] = state
            self.info.add(info)
        self.info.steps += n - sum(i.steps for _, i in out)
        A = np.stack([s.coeffs.A for s, _ in out])
        S = np.stack([s.coeffs.S for s, _ in out])
        return CoefficientField(A, S, 0, n)
