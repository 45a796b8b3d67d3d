"""
Test Runner: discovers tests/test_*.py, runs every test_* function in-process
and saves a summary to the tests/ folder. The same modules are collectable by
pytest; this runner only supports the `tmp_path` fixture.

Usage:
    python run_tests.py
    python run_tests.py --only evaluation
"""

import importlib
import inspect
import json
import os
import sys
import tempfile
import time
import traceback
from pathlib import Path

ROOT = os.path.dirname(os.path.abspath(__file__))
TESTS_DIR = os.path.join(ROOT, "tests")


def discover(only: str = None):
    names = sorted(f[:-3] for f in os.listdir(TESTS_DIR) if f.startswith("test_") and f.endswith(".py"))
    if only:
        names = [n for n in names if only in n]
    return names


def run_test(func) -> tuple:
    """Returns (status, seconds, error text)."""
    start = time.time()
    try:
        params = inspect.signature(func).parameters
        if "tmp_path" in params:
            with tempfile.TemporaryDirectory() as tmp:
                func(tmp_path=Path(tmp))
        else:
            func()
        return "passed", time.time() - start, ""
    except Exception:
        return "failed", time.time() - start, traceback.format_exc()


def main():
    import argparse
    parser = argparse.ArgumentParser(description="Run the test modules under tests/")
    parser.add_argument("--only", help="Run only modules whose name contains this string")
    args = parser.parse_args()

    sys.path.insert(0, ROOT)
    modules = discover(args.only)

    print(f"\n{'='*70}")
    print(f"  RUNNING {len(modules)} TEST MODULES")
    print(f"{'='*70}\n")

    results = {}
    total_time = 0.0
    for module_name in modules:
        print(f"\n[{module_name}]")
        print("-" * 60)
        try:
            module = importlib.import_module(f"tests.{module_name}")
        except Exception:
            results[module_name] = {"<import>": {"status": "failed", "time_seconds": 0.0,
                                                 "error": traceback.format_exc()}}
            print("  [IMPORT ERROR]")
            continue
        module_results = {}
        for name, func in sorted(inspect.getmembers(module, inspect.isfunction)):
            if not name.startswith("test_") or func.__module__ != module.__name__:
                continue
            status, elapsed, error = run_test(func)
            total_time += elapsed
            mark = "✅" if status == "passed" else "❌"
            print(f"  {mark} {name} ({elapsed:.2f}s)")
            if error:
                print("     " + error.strip().splitlines()[-1])
            module_results[name] = {"status": status, "time_seconds": round(elapsed, 3), "error": error}
        results[module_name] = module_results

    passed = sum(1 for m in results.values() for r in m.values() if r["status"] == "passed")
    failed = sum(1 for m in results.values() for r in m.values() if r["status"] == "failed")

    summary = {
        "total_tests": passed + failed,
        "passed": passed,
        "failed": failed,
        "total_time_seconds": round(total_time, 1),
        "results": results,
    }
    summary_path = os.path.join(TESTS_DIR, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)

    report_lines = []
    report_lines.append("# Test Results Summary")
    report_lines.append(f"**Total Time:** {total_time:.1f}s")
    report_lines.append(f"**Tests Run:** {passed + failed} ({passed} passed, {failed} failed)")
    report_lines.append("")
    report_lines.append("| Module | Test | Time | Result |")
    report_lines.append("|--------|------|------|--------|")
    for module_name, module_results in results.items():
        for name, data in module_results.items():
            mark = "✅" if data["status"] == "passed" else "❌"
            report_lines.append(f"| {module_name} | {name} | {data['time_seconds']}s | {mark} |")

    report_lines.append("")
    report_lines.append("## Per-Module Breakdown")
    for module_name, module_results in results.items():
        failures = sum(1 for r in module_results.values() if r["status"] == "failed")
        seconds = sum(r["time_seconds"] for r in module_results.values())
        report_lines.append(f"- **{module_name}**: {len(module_results)} tests, {seconds:.1f}s, {failures} failures")

    report_path = os.path.join(TESTS_DIR, "comparison_report.md")
    with open(report_path, "w", encoding="utf-8") as f:
        f.write("\n".join(report_lines))

    print(f"\n{'='*70}")
    print(f"  ALL DONE! {passed} passed, {failed} failed")
    print(f"  Total time: {total_time:.1f}s")
    print(f"  Summary: {summary_path}")
    print(f"  Report:  {report_path}")
    print(f"{'='*70}")
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()
