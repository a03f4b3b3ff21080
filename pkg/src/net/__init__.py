#!/usr/bin/env python3
"""
Network modules for ScaRR

Frame codec plus the verifier server and prover client built on it.
"""
