"""Flow-matching priors, reward-tilted sampling and inverse-design tools in 2D."""
from .costmodel import CostPredictor, CostRegressor, GridCost
from .field2d import Geometry, GridField, GridPmf, WorldSpec
from .flow import FlowMatcher, OdeConfig, VelocityModel
from .guide import GuidanceMethod, guided_sample
from .optimize import AnnealConfig, DensityGradientOptimizer
from .schedule import Schedule

__version__ = "0.1.0"

__all__ = [
    "AnnealConfig", "CostPredictor", "CostRegressor", "DensityGradientOptimizer",
    "FlowMatcher", "Geometry", "GridCost", "GridField", "GridPmf", "GuidanceMethod",
    "OdeConfig", "Schedule", "VelocityModel", "WorldSpec", "guided_sample",
]
