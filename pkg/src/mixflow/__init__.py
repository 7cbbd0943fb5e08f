"""Characteristic-curve solver for evaporating fluid mixtures."""
from .grid import Flow, GridSpec, flow_distance, gamma_line_integral, identity_flow
from .model import (Density, InitialDensity, RateFunction, RateMixture, ScenarioError,
                    TimeFactor, eval_rate, validate_scenario)

__version__ = "0.1.0"
