#!/usr/bin/env python3
"""
Core modules for ScaRR

Contains the CFG model, the measurements DB and the prover and verifier engines.
"""

from .settings_manager import SettingsManager
from .cfg_model import Cfg, Edge, EdgeKind, CheckpointKind, MeasurementKey, load_cfg, identify_checkpoints
from .measurement_db import MeasurementsDb, generate_measurements, read_db, write_db
from .prover_engine import ProverSession, PartialReport, CheckpointCross, EdgeTraversal
from .verifier_engine import VerifierSession, Violation, ViolationKind, issue_challenge

__all__ = [
    'SettingsManager',
    'Cfg',
    'Edge',
    'EdgeKind',
    'CheckpointKind',
    'MeasurementKey',
    'load_cfg',
    'identify_checkpoints',
    'MeasurementsDb',
    'generate_measurements',
    'read_db',
    'write_db',
    'ProverSession',
    'PartialReport',
    'CheckpointCross',
    'EdgeTraversal',
    'VerifierSession',
    'Violation',
    'ViolationKind',
    'issue_challenge',
]
