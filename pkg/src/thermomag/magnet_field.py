"""Magnet temperature -> field at the NV -> NV transition frequency.

Linear magnetisation law around a reference temperature, valid over a limited
window. Frequencies are in MHz, fields in gauss, temperatures in C.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

D_MHZ = 2870.0
GAMMA_E_MHZ_PER_G = 2.8
GAMMA_C13_KHZ_PER_G = 1.0705

ALPHA0_MEASURED = -0.00094   # NdFeB N38, fitted from ODMR vs temperature
ALPHA0_DATASHEET = -0.0012   # NdFeB vendor figure
ALPHA0_SMCO = -0.0004

ALPHA_M_MHZ_PER_C = 2.7      # magnet coefficient used by the feedforward law
ALPHA_OBSERVED_MHZ_PER_C = 2.5  # per-degree shift quoted near 1020 G; kept for comparison only

VALID_WINDOW_C = (15.0, 35.0)


class FieldModelError(ValueError):
    pass


@dataclass(frozen=True)
class PhysicalConstants:
    D: float = D_MHZ
    gamma_e: float = GAMMA_E_MHZ_PER_G
    gamma_c13: float = GAMMA_C13_KHZ_PER_G  # kHz/G
    gamma_free_e: float = GAMMA_E_MHZ_PER_G

    def __post_init__(self):
        if min(self.D, self.gamma_e, self.gamma_c13, self.gamma_free_e) <= 0:
            raise FieldModelError("physical constants must be positive")

    def species(self) -> dict[str, float]:
        """Environmental spin species and their gyromagnetic ratios in MHz/G."""
        return {"electron_g2": self.gamma_free_e, "13C": self.gamma_c13 * 1e-3}


@dataclass(frozen=True)
class MagnetModel:
    B_ref: float = 1020.0
    T_ref: float = 22.0
    alpha0: float = ALPHA0_MEASURED
    alpha0_datasheet: float = ALPHA0_DATASHEET
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    window: tuple[float, float] = VALID_WINDOW_C
    extra_species: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if not self.B_ref > 0:
            raise FieldModelError("B_ref must be positive")
        if not abs(self.alpha0) < 0.01:
            raise FieldModelError("|alpha0| must be below 0.01 per C")

    def with_datasheet_alpha(self) -> "MagnetModel":
        return replace(self, alpha0=self.alpha0_datasheet)

    @property
    def sensitivity(self) -> float:
        """d(omega_NV)/dT in MHz/C."""
        return -self.constants.gamma_e * self.B_ref * self.alpha0


def _check_window(model: MagnetModel, T) -> None:
    lo, hi = model.window
    T = np.asarray(T)
    if np.any(T < lo) or np.any(T > hi) or not np.all(np.isfinite(T)):
        raise FieldModelError(f"temperature outside linear window [{lo}, {hi}] C")


def field_at(model: MagnetModel, T_magnet):
    _check_window(model, T_magnet)
    return model.B_ref * (1.0 + model.alpha0 * (T_magnet - model.T_ref))


def nv_frequency(model: MagnetModel, T_magnet):
    """omega_NV = D - gamma_e * B in MHz. Negative above the level anticrossing."""
    return model.constants.D - model.constants.gamma_e * field_at(model, T_magnet)


def temperature_for_frequency(model: MagnetModel, target_mhz: float, tol: float = 1e-6) -> float:
    """Bisection inverse of :func:`nv_frequency` over the validity window."""
    lo, hi = model.window
    f_lo, f_hi = nv_frequency(model, lo) - target_mhz, nv_frequency(model, hi) - target_mhz
    if f_lo * f_hi > 0:
        raise FieldModelError(f"{target_mhz} MHz not reachable inside the window")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        f_mid = nv_frequency(model, mid) - target_mhz
        if f_mid * f_lo <= 0:
            hi = mid
        else:
            lo, f_lo = mid, f_mid
    return 0.5 * (lo + hi)


def temperature_step_resolution(model: MagnetModel, dT_min: float) -> float:
    """Frequency step in kHz for a magnet temperature step ``dT_min``."""
    if dT_min < 0:
        raise FieldModelError("dT_min must be >= 0")
    return abs(model.sensitivity) * dT_min * 1e3


def larmor_frequencies(model: MagnetModel, T_magnet: float | None = None,
                       B: float | None = None) -> list[tuple[str, float]]:
    """gamma*B for each environmental species, in MHz.

    Give either a magnet temperature or a field directly via ``B``.
    """
    if B is None:
        if T_magnet is None:
            raise FieldModelError("need T_magnet or B")
        B = field_at(model, T_magnet)
    table = dict(model.constants.species())
    table.update(dict(model.extra_species))
    return [(name, g * B) for name, g in table.items()]
