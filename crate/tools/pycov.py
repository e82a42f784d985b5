#!/usr/bin/env python3
"""Line-coverage measurement for a pytest run, without coverage.py.

Traces line execution with sys.settrace while running pytest in-process,
then reports the percentage of executable lines that ran. Executable lines
are determined statically: the line numbers of every AST statement in every
`.py` file under the working directory (docstring expressions excluded,
since constant docstrings never emit trace events).

Usage:
    python3 pycov.py OUTPUT.json [pytest-args...]

Writes {"percent_covered": float, "covered_lines": int,
"executable_lines": int} to OUTPUT.json and prints a one-line summary.
Exit status is the pytest exit status.
"""

import ast
import json
import os
import sys
import threading


def executable_lines(path):
    """Line numbers of statements in a file; empty set if it fails to parse."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            tree = ast.parse(handle.read(), filename=path)
    except (OSError, SyntaxError, UnicodeDecodeError):
        return set()

    docstring_lines = set()
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            body = getattr(node, "body", [])
            if body and isinstance(body[0], ast.Expr) and isinstance(
                body[0].value, ast.Constant
            ) and isinstance(body[0].value.value, str):
                doc = body[0]
                end = getattr(doc, "end_lineno", doc.lineno)
                docstring_lines.update(range(doc.lineno, end + 1))

    lines = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.stmt) and node.lineno not in docstring_lines:
            lines.add(node.lineno)
    return lines


def collect_targets(root):
    targets = {}
    for dirpath, _dirnames, filenames in os.walk(root):
        for name in filenames:
            if name.endswith(".py"):
                path = os.path.join(dirpath, name)
                targets[os.path.realpath(path)] = executable_lines(path)
    return targets


def main(argv):
    if not argv:
        print("usage: pycov.py OUTPUT.json [pytest-args...]", file=sys.stderr)
        return 64
    output_path = argv[0]
    pytest_args = argv[1:]
    root = os.path.realpath(os.getcwd())
    targets = collect_targets(root)
    executed = set()

    def tracer(frame, event, arg):
        if event == "line":
            path = frame.f_code.co_filename
            real = os.path.realpath(path)
            if real in targets:
                executed.add((real, frame.f_lineno))
        return tracer

    import pytest  # deferred so --help works without it

    threading.settrace(tracer)
    sys.settrace(tracer)
    try:
        status = pytest.main(pytest_args)
    finally:
        sys.settrace(None)
        threading.settrace(None)

    total = sum(len(lines) for lines in targets.values())
    covered = sum(1 for real, line in executed if line in targets.get(real, ()))
    percent = 100.0 * covered / total if total else 0.0

    with open(output_path, "w", encoding="utf-8") as handle:
        json.dump(
            {
                "percent_covered": percent,
                "covered_lines": covered,
                "executable_lines": total,
            },
            handle,
        )
    print("COVERAGE_PERCENT=%.4f" % percent)
    return int(status)


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
