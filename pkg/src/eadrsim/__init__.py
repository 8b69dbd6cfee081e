"""Simulator for counter-mode encryption of NVM under eADR crash-time power models."""
from .core_model import CacheGeometry, SimulationError, CrashModelViolation
from .eadr import EadrModel, model_allows
from .schemes import SystemConfig, make_scheme, SCHEME_IDS
from .crash_audit import Simulator, run_with_crashes, AuditReport
from .workloads import Op, TxnSpec, generate_trace

__version__ = "0.1.0"
