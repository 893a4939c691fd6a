#!/usr/bin/env python3
"""
Test Runner for QSMC

Discovers the unit tests, runs them and prints a per-module summary.

Usage:
    python tests/run_tests.py [--slow] [--pattern GLOB]

--slow sets QSMC_RUN_SLOW=1, which enables the long accuracy runs.
"""

import argparse
import os
import sys
import unittest
from collections import Counter
from datetime import datetime


def _module_of(test) -> str:
    return test.id().split(".")[-3] if test.id().count(".") >= 2 else test.id()


def run_tests(slow: bool = False, pattern: str = "test_*.py") -> bool:
    """Run the suite; returns True when every test passed"""
    root = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
    if root not in sys.path:
        sys.path.insert(0, root)
    if slow:
        os.environ["QSMC_RUN_SLOW"] = "1"

    print(f"\nQSMC test run - {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print(f"Slow accuracy runs: {'on' if os.environ.get('QSMC_RUN_SLOW') == '1' else 'off'}")
    print("=" * 70)

    suite = unittest.TestLoader().discover(os.path.dirname(os.path.abspath(__file__)), pattern=pattern,
                                           top_level_dir=root)
    result = unittest.TextTestRunner(verbosity=2).run(suite)

    broken = Counter(_module_of(test) for test, _ in result.failures + result.errors)
    skipped = Counter(_module_of(test) for test, _ in result.skipped)
    print("\nSummary")
    print("-" * 70)
    print(f"Run: {result.testsRun}  failures: {len(result.failures)}  errors: {len(result.errors)}  "
          f"skipped: {len(result.skipped)}")
    for module in sorted(set(broken) | set(skipped)):
        print(f"  {module}: {broken[module]} broken, {skipped[module]} skipped")
    print("-" * 70)
    return result.wasSuccessful()


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description="Run the QSMC unit tests")
    parser.add_argument("--slow", action="store_true", help="include the long accuracy runs")
    parser.add_argument("--pattern", default="test_*.py", help="test file glob")
    args = parser.parse_args()
    sys.exit(0 if run_tests(args.slow, args.pattern) else 1)
