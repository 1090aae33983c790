"""Launcher for the RefinementManager command line.

  python3 run_evr.py eval --model RefinementManager/fixtures/party2.model
  python3 run_evr.py --help
"""
import sys
from pathlib import Path

_REFINEMENT_DIR = Path(__file__).resolve().parent / "RefinementManager"
if str(_REFINEMENT_DIR) not in sys.path:
    sys.path.insert(0, str(_REFINEMENT_DIR))

from cli import main  # noqa: E402


if __name__ == "__main__":
    raise SystemExit(main())
