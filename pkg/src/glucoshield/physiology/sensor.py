"""Circadian modulation, process noise, and the CGM sensor model."""

import math
from dataclasses import dataclass, field

from . import common as C

CGM_FLOOR = 40.0
CGM_CEIL = 400.0


def circadian_factor(t_min, amplitude=0.1, peak_min=240.0):
    """Periodic modulation factor c(t), peaking in the early morning.

    ``t_min`` is minutes since midnight; the default peak (04:00)
    captures the dawn rise in hepatic output.
    """
    return 1.0 + amplitude * math.cos(2.0 * math.pi * (t_min - peak_min) / 1440.0)


def circadian_rate(t_min, state, pvec, kind, amplitude=0.1, peak_min=240.0):
    """Additive plasma-glucose production rate (mg/kg/min) at time t."""
    c_m1 = circadian_factor(t_min, amplitude, peak_min) - 1.0
    if kind == C.KIND_T1D:
        return c_m1 * pvec[C.P_KP1]
    x3_eff = min(max(state[C.X3], 0.0), 0.95)
    return c_m1 * pvec[C.P_EGP0] * (1.0 - x3_eff)


def ou_step(value, theta, sigma, dt, rng):
    """Mean-reverting Ornstein-Uhlenbeck update toward zero."""
    if theta <= 0.0:
        raise ValueError("theta must be positive")
    if sigma < 0.0:
        raise ValueError("sigma must be non-negative")
    shock = sigma * math.sqrt(dt) * rng.standard_normal() if sigma > 0.0 else 0.0
    return value + theta * (0.0 - value) * dt + shock


@dataclass
class SensorConfig:
    noise_std: float = 2.0       # additive reading noise (mg/dL)
    dropout_p: float = 0.005     # per-reading dropout probability
    drift_std: float = 0.002     # per-reading bias/scale random-walk step
    enabled: bool = True


@dataclass
class SensorState:
    bias: float = 1.0
    scale: float = 1.0
    last_reading: float = 120.0
    dropout_active: bool = False
    ou_value: float = 0.0        # process-noise OU level (mg/dL)


def cgm_read(gsc, pvec, sensor: SensorState, rng, cfg: SensorConfig):
    """One CGM reading from the subcutaneous glucose state (mg/kg).

    Applies multiplicative bias/scale drift bounded to [0.9, 1.1],
    additive Gaussian noise, occasional forward-filled dropout, and hard
    clipping to [40, 400] mg/dL. Mutates ``sensor``.
    """
    if gsc < 0.0:
        raise ValueError("Gsc must be non-negative")
    conc = gsc / pvec[C.P_VG]
    if not cfg.enabled:
        reading = min(max(conc, CGM_FLOOR), CGM_CEIL)
        sensor.last_reading = reading
        sensor.dropout_active = False
        return reading

    sensor.bias = min(max(sensor.bias + cfg.drift_std * rng.standard_normal(), 0.9), 1.1)
    sensor.scale = min(max(sensor.scale + cfg.drift_std * rng.standard_normal(), 0.9), 1.1)

    if rng.random() < cfg.dropout_p:
        sensor.dropout_active = True
        return sensor.last_reading

    noise = cfg.noise_std * rng.standard_normal() if cfg.noise_std > 0.0 else 0.0
    reading = sensor.scale * sensor.bias * conc + noise
    reading = min(max(reading, CGM_FLOOR), CGM_CEIL)
    sensor.last_reading = reading
    sensor.dropout_active = False
    return reading
