"""Builds the engine's starting Hamiltonian from a model configuration."""

import logging
import math
from typing import TYPE_CHECKING

import numpy as np
from attrs import frozen

from nfkam.core.errors import OffSurfaceError
from nfkam.core.ftalgebra import FTSeries, PhaseSignature
from nfkam.core.lattice import H0Model, ReducedHamiltonian, reduce_at_resonance, resonant_surface_sample, unimodular_completion

if TYPE_CHECKING:
    from nfkam.utils.config import ModelConfig

logger = logging.getLogger(__name__)


@frozen
class ReducedModel:
    """A series in (x, y, u, v) ready for the KAM iteration, with its numeric delta."""

    series: FTSeries
    delta: float
    epsilon: float
    reduction: ReducedHamiltonian | None = None
    h0: H0Model | None = None

    @property
    def signature(self) -> PhaseSignature:
        return self.series.signature


def original_hamiltonian(cfg: "ModelConfig") -> FTSeries:
    """H0 + eps P on the full (x, y) space with P at grade 1."""
    ham = cfg.hamiltonian
    assert ham.h0 is not None and ham.perturbation is not None
    sig = cfg.signature.build()
    d = sig.m + sig.m0
    trunc = cfg.truncation.build()
    h0 = ham.h0.build(d, trunc)
    return h0.to_series(trunc) + ham.perturbation.build(PhaseSignature(d, 0), trunc).shift_grade(1)


def reduced_model(cfg: "ModelConfig") -> ReducedModel:
    """
    Either the configured reduced series as is, or H0 + eps P expanded at a point of the
    resonant surface in the unimodular frame of the configured generators.

    Raises:
        OffSurfaceError: no base point given and none found in the surface box
    """
    ham = cfg.hamiltonian
    eps = cfg.epsilon_value
    sig = cfg.signature.build()
    trunc = cfg.truncation.build()
    if ham.kind == "reduced":
        assert ham.series is not None
        series = ham.series.build(sig, trunc)
        logger.info("model %s: reduced series with %d terms, delta = %g", cfg.name, len(series), eps)
        return ReducedModel(series, eps, eps)

    assert ham.h0 is not None
    d = sig.m + sig.m0
    h0 = ham.h0.build(d, trunc)
    frame = unimodular_completion(ham.generators)
    if ham.base_point is not None:
        y0 = np.array([float(v) for v in ham.base_point])
    else:
        found = resonant_surface_sample(h0, frame, ham.box(), 1)
        if not found:
            raise OffSurfaceError(f"no point of the resonant surface in {ham.surface_box}", math.inf)
        y0 = found[0]
    reduced = reduce_at_resonance(original_hamiltonian(cfg), y0, frame, eps, trunc)
    return ReducedModel(reduced.series, reduced.delta, eps, reduced, h0)
