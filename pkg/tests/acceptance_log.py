"""Shared registry of acceptance verdicts, printed in the pytest terminal summary."""

LINES = []


def record(number, verdict, detail):
    line = f"criterion {number:>2}: {verdict:<9} {detail}"
    LINES.append((number, line))
    print(line)
    return line
