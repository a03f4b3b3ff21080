#!/usr/bin/env python3
"""
ScaRR - Control-Flow Attestation Toolchain

Main entry point for the toolchain.
"""

import sys
from pathlib import Path

# Add the src directory to the Python path
src_path = Path(__file__).parent / "src"
sys.path.insert(0, str(src_path))

from cli.commands import dispatch


def main():
    """Main application entry point."""
    return dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
