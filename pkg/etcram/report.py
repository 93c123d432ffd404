"""Console rendering of result objects with rich."""

from __future__ import annotations

from dataclasses import fields, is_dataclass
from pathlib import Path
from re import sub
from typing import Any, Sequence

import numpy as np
from rich.console import Console
from rich.markup import escape
from rich.table import Table
from rich.tree import Tree

# sequences longer than this are summarized instead of expanded
MAX_ITEMS = 8


def camel2snake(name):
    return sub(r"([a-z])([A-Z])", r"\1_\2", name).lower()


def format_number(val: float) -> str:
    if isinstance(val, (bool, np.bool_)):
        return str(bool(val)).lower()
    if isinstance(val, (int, np.integer)):
        return str(int(val))
    return f"{float(val):.6g}"


def _leaf(val: Any) -> str:
    if isinstance(val, (bool, int, float, np.number, np.bool_)):
        return format_number(val)
    return escape(str(val))


def rich_tree(obj: Any, name: str | None = None) -> Tree:
    """Tree of a result dataclass, its nested dataclasses and summarized arrays."""
    label = camel2snake(type(obj).__name__)
    branch = Tree(f"[blue]{name}[/blue] [ {label} ]" if name else label)

    def add(parent: Tree, field_name: str, val: Any):
        if is_dataclass(val) and not isinstance(val, type):
            parent.children.append(rich_tree(val, field_name))
        elif isinstance(val, np.ndarray):
            node = parent.add(f"{field_name} [ ndarray{list(val.shape)} ]")
            if val.size:
                node.add(f"[green]min {format_number(val.min())}, max {format_number(val.max())}[/green]")
        elif isinstance(val, (list, tuple)):
            node = parent.add(f"[blue]{field_name}[{len(val)} items][/blue]")
            for ii, item in enumerate(val[:MAX_ITEMS]):
                add(node, f"{field_name}[{ii}]", item)
            if len(val) > MAX_ITEMS:
                node.add(f"[dim]... {len(val) - MAX_ITEMS} more[/dim]")
        elif isinstance(val, dict):
            node = parent.add(f"[blue]{field_name}[/blue]")
            for k, v in val.items():
                add(node, str(k), v)
        elif isinstance(val, Path) or val is None or isinstance(val, str):
            parent.add(f"{field_name} = [green]{escape(str(val))}[/green]")
        else:
            parent.add(f"{field_name} = [green]{_leaf(val)}[/green]")

    if is_dataclass(obj):
        for f in fields(obj):
            if f.repr:
                add(branch, f.name, getattr(obj, f.name))
    else:
        add(branch, "value", obj)
    return branch


def table(columns: Sequence[str], rows: Sequence[Sequence[Any]], title: str | None = None) -> Table:
    t = Table(title=title)
    for c in columns:
        t.add_column(c, justify="right")
    for row in rows:
        t.add_row(*(_leaf(v) for v in row))
    return t


def show(renderable, console: Console | None = None):
    (console or Console(emoji=False)).print(renderable)
