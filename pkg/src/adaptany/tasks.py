"""Task definitions: the category list a classifier is adapted for."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass(frozen=True)
class TaskSpec:
    """A classification task: ordered categories plus optional descriptions."""

    task_id: str
    category_names: tuple[str, ...]
    category_descriptions: dict[str, str] = field(default_factory=dict)
    domain_name: str = ""
    domain_description: str = ""

    def __post_init__(self):
        if not self.category_names:
            raise ValueError("task needs at least one category")
        if len(set(self.category_names)) != len(self.category_names):
            raise ValueError("duplicate category names")

    @property
    def category_count(self) -> int:
        return len(self.category_names)

    def category_id(self, name: str) -> int:
        try:
            return self.category_names.index(name)
        except ValueError:
            raise KeyError(f"unknown category: {name!r}") from None

    def description_for(self, name: str) -> str:
        return self.category_descriptions.get(name, name)


def load_task(path: str | Path) -> TaskSpec:
    data = json.loads(Path(path).read_text())
    return TaskSpec(
        task_id=data["task_id"],
        category_names=tuple(data["category_names"]),
        category_descriptions=data.get("category_descriptions", {}),
        domain_name=data.get("domain_name", ""),
        domain_description=data.get("domain_description", ""),
    )


def write_task(task: TaskSpec, path: str | Path) -> None:
    payload = {
        "task_id": task.task_id,
        "category_names": list(task.category_names),
        "category_descriptions": task.category_descriptions,
        "domain_name": task.domain_name,
        "domain_description": task.domain_description,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
