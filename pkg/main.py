#!/usr/bin/env python3
"""
usp-ebm - Main Entry Point

Usage:
    python main.py run --config configs/train_1d_riemann.json
    python main.py emit-figures --run runs/train-1d-0
    python main.py --help
"""

import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent / "src"))

from usp_ebm.cli import cli_main

if __name__ == "__main__":
    cli_main()
