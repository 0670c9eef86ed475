"""Collects one pass/fail line per acceptance criterion for the run summary."""

LINES = []


def report(number, passed, detail):
    line = f"CRITERION {number} {'PASS' if passed else 'FAIL'}: {detail}"
    print(line)
    LINES.append(line)
    return passed
