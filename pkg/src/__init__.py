#!/usr/bin/env python3
"""
ScaRR - Control-Flow Attestation Toolchain

Control-flow attestation for complex programs: offline measurement
generation, a prover that batches online measurements into authenticated
partial reports, and a verifier that checks them as they stream in.
"""

__version__ = "1.0.0"
__author__ = "ScaRR Team"
__description__ = "Runtime Remote Attestation Toolchain"
