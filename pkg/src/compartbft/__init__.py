"""Compartmentalized PBFT with per-replica Preparation, Confirmation and Execution enclaves."""
from .config import CompartmentKind, Config, EnclaveId, primary_of

__all__ = ["CompartmentKind", "Config", "EnclaveId", "primary_of"]
