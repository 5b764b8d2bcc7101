"""
cardioseg - Application Entry Point

Usage:
    python main.py <command> [options]

Run ``python main.py --help`` for the command list.
"""

import sys

from app.main import run

if __name__ == "__main__":
    sys.exit(run())
