#!/usr/bin/env python3
"""Errors-only Python checker with pylint-compatible output.

Reports two error classes over the files given on the command line:

  E0001  syntax error (the file does not parse)
  E0602  undefined variable (a name loaded but never bound anywhere in
         the module, and not a builtin)

Output format matches `pylint --disable=all --enable=E`:

  path:line:col: CODE: message (symbol)

The undefined-name analysis is deliberately conservative: a name counts as
defined if it is bound anywhere in the file (any scope), so only names that
cannot possibly resolve are reported. Files using `from x import *` are
exempt from E0602 since the imported name set is unknowable statically.

Exit status: 2 if any error was reported, 0 otherwise (mirroring pylint's
"error issued" status bit).
"""

import ast
import builtins
import sys

MODULE_DUNDERS = {
    "__name__", "__file__", "__doc__", "__package__", "__spec__",
    "__loader__", "__builtins__", "__path__", "__all__", "__debug__",
    "__annotations__", "__dict__", "__class__",
}

BUILTIN_NAMES = set(dir(builtins)) | MODULE_DUNDERS


def bound_names(tree):
    """Every name bound anywhere in the module, regardless of scope."""
    names = set()
    star_import = False
    for node in ast.walk(tree):
        if isinstance(node, (ast.Import, ast.ImportFrom)):
            for alias in node.names:
                if alias.name == "*":
                    star_import = True
                elif alias.asname:
                    names.add(alias.asname)
                else:
                    names.add(alias.name.split(".")[0])
        elif isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            names.add(node.name)
        elif isinstance(node, ast.Name) and isinstance(node.ctx, (ast.Store, ast.Del)):
            names.add(node.id)
        elif isinstance(node, (ast.Global, ast.Nonlocal)):
            names.update(node.names)
        elif isinstance(node, ast.arg):
            names.add(node.arg)
        elif isinstance(node, ast.ExceptHandler) and node.name:
            names.add(node.name)
        elif isinstance(node, ast.MatchAs) and node.name:
            names.add(node.name)
        elif isinstance(node, ast.MatchStar) and node.name:
            names.add(node.name)
        elif isinstance(node, ast.MatchMapping) and node.rest:
            names.add(node.rest)
    return names, star_import


def check_file(path):
    """Returns a list of (line, col, code, message) for one file."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            source = handle.read()
    except (OSError, UnicodeDecodeError) as exc:
        return [(1, 0, "E0001", "cannot read file: %s (syntax-error)" % exc)]

    try:
        tree = ast.parse(source, filename=path)
    except SyntaxError as exc:
        line = exc.lineno or 1
        col = max((exc.offset or 1) - 1, 0)
        return [(line, col, "E0001", "%s (syntax-error)" % (exc.msg or "invalid syntax"))]

    defined, star_import = bound_names(tree)
    if star_import:
        return []

    problems = []
    for node in ast.walk(tree):
        if isinstance(node, ast.Name) and isinstance(node.ctx, ast.Load):
            if node.id not in defined and node.id not in BUILTIN_NAMES:
                problems.append((
                    node.lineno,
                    node.col_offset,
                    "E0602",
                    "Undefined variable '%s' (undefined-variable)" % node.id,
                ))
    problems.sort()
    return problems


def main(argv):
    issued = False
    for path in argv:
        for line, col, code, message in check_file(path):
            issued = True
            print("%s:%d:%d: %s: %s" % (path, line, col, code, message))
    return 2 if issued else 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
