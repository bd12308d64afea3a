"""Simulated trusted-execution runtime and the exposure-map building block."""

from .counter import CounterService, CounterUnavailable
from .logs import GridConfig, LocationLog, encrypt_for_enclave
from .platform import (
    AttestationError,
    AttestationReport,
    Platform,
    SealedBlob,
    SealingError,
    default_bundle,
    measure,
    verify_attestation,
)
from .report import HeatmapReport, audit, verify_inclusion, verify_report
from .runtime import EnclaveRuntime, IngestRejected, Receipt, RollbackDetected, init_enclave

__all__ = [
    "AttestationError", "AttestationReport", "CounterService", "CounterUnavailable",
    "EnclaveRuntime", "GridConfig", "HeatmapReport", "IngestRejected", "LocationLog",
    "Platform", "Receipt", "RollbackDetected", "SealedBlob", "SealingError", "audit",
    "default_bundle", "encrypt_for_enclave", "init_enclave", "measure",
    "verify_attestation", "verify_inclusion", "verify_report",
]
