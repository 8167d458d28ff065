"""Run the acceptance suite and print one PASS/FAIL line per criterion.

    python scripts/run_acceptance.py            # all eleven
    python scripts/run_acceptance.py -k c08     # any pytest selection
"""
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    args = [str(ROOT / "tests" / "test_acceptance.py"), "-q", "-p", "no:cacheprovider"]
    raise SystemExit(pytest.main(args + sys.argv[1:]))
