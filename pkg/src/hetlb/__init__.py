"""Simulation and verification toolkit for speed-aware load balancing across
heterogeneous server pools in the Halfin-Whitt regime."""
from ._backend import COMPILED
from .errors import (ConfigError, CouplingViolation, EmptySeries, HetlbError,
                     InsufficientBatches, StateSpaceTooLarge, StepTooLarge)
from .model import OccupancyState, ScaledState, SystemConfig, proportioned_config, validate_config
from .policy import JIQ_KIND, JSQ_KIND, SA_JSQ_KIND, PolicyKind, parse_policy, pod

__version__ = "0.1.0"
