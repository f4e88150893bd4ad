"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

from __future__ import annotations

RESULTS: list[tuple[int, str, bool, str]] = []


def record(number: int, title: str, passed: bool, detail: str) -> None:
    RESULTS.append((number, title, passed, detail))
    status = "PASS" if passed else "FAIL"
    print(f"criterion {number} [{status}] {title}: {detail}")
