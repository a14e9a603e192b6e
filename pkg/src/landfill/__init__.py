"""Minimal-time control of a two-compartment landfill model."""
from .model import GrowthLaw, ModelParams, SolubilizationLaw, TargetBox, check_hypotheses
from .geometry import Regime, Region, classify_regime
from .synthesis import build_geometry, optimal_feedback, simulate_closed_loop
from .oracle import solve_hjb

__all__ = ["GrowthLaw", "ModelParams", "SolubilizationLaw", "TargetBox", "check_hypotheses",
           "Regime", "Region", "classify_regime", "build_geometry", "optimal_feedback",
           "simulate_closed_loop", "solve_hjb"]
