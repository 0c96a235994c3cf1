#!/usr/bin/env python3
"""Run the acceptance suite alone; the PASS/FAIL lines are printed at the end."""
import sys
from pathlib import Path

import pytest

if __name__ == "__main__":
    test_file = Path(__file__).resolve().parents[1] / "tests" / "test_acceptance.py"
    sys.exit(pytest.main(["-q", str(test_file), *sys.argv[1:]]))
