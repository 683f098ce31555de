"""Layer shapes of real model families, for exact adapter parameter accounting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .errors import ContractError

CATALOG_FORMAT = "weightlora-shape-catalog"


@dataclass(frozen=True)
class SlotShape:
    slot_id: int
    layer: int
    projection: str
    d: int
    k: int


@dataclass
class ShapeCatalog:
    model_name: str
    total_params: int
    groups: dict[str, list[SlotShape]]
    inferred: dict[str, bool] = field(default_factory=dict)
    default_group: str = ""

    def slots(self, group: str | None = None) -> list[SlotShape]:
        group = group or self.default_group
        try:
            return self.groups[group]
        except KeyError:
            raise ContractError(f"{self.model_name} has no slot group {group!r}; "
                                f"choose from {sorted(self.groups)}") from None


def _parse(name: str, entry: dict) -> ShapeCatalog:
    groups, inferred = {}, {}
    n_layers = entry["n_layers"]
    for gname, g in entry["groups"].items():
        slots = []
        for layer in range(n_layers):
            for proj in g["per_layer"]:
                slots.append(SlotShape(len(slots), layer, proj["projection"], proj["d"], proj["k"]))
        groups[gname] = slots
        inferred[gname] = bool(g.get("inferred", False))
    return ShapeCatalog(name, int(entry["total_params"]), groups, inferred,
                        entry.get("default_group", next(iter(groups))))


def load_catalog(path=None) -> dict[str, ShapeCatalog]:
    """Read a catalog file; the bundled one when ``path`` is None."""
    if path is None:
        return dict(_bundled())
    return _read(Path(path).read_text())


@lru_cache(maxsize=1)
def _bundled() -> tuple:
    text = resources.files("weightlora").joinpath("data/shape_catalog.json").read_text()
    return tuple(_read(text).items())


def _read(text: str) -> dict[str, ShapeCatalog]:
    payload = json.loads(text)
    if payload.get("format") != CATALOG_FORMAT:
        raise ContractError("not a shape catalog file")
    return {name: _parse(name, e) for name, e in payload["models"].items()}


def get_catalog(name: str, path=None) -> ShapeCatalog:
    cats = load_catalog(path)
    if name not in cats:
        raise ContractError(f"unknown catalog {name!r}; available: {', '.join(sorted(cats))}")
    return cats[name]
