"""Canonical JSON writing so identical models produce identical bytes."""

from __future__ import annotations

import json


def dump_json(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(doc, handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_json(path) -> dict:
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)
