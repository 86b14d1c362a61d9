"""Text prompt generation for synthetic source data.

Three mechanisms: a plain template, a domain-qualified template, and LLM
diversification. Labels are always taken from the requested category, never
parsed back out of the prompt text.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .llm import EmptyGenerationError, LlmClient, parse_prompt_lines
from .tasks import TaskSpec

MECHANISMS = ("simple", "domain", "gpt")

SIMPLE_TEMPLATE = "a photo of a {category}"
DOMAIN_TEMPLATE = "a {domain} photo of a {category}"

GPT_INSTRUCTION_TEMPLATE = (
    "I want to generate images of a visual category with a text-to-image "
    "model.\n"
    "Domain description: {domain_desc}\n"
    "Category description: {category_desc}\n"
    "Please provide {count} diverse one-line text prompts, one per line, "
    "each describing a distinct image of this category in this domain. "
    "Do not number the lines."
)


@dataclass(frozen=True)
class PromptRecord:
    text: str
    category_name: str
    category_id: int
    mechanism: str
    domain_name: str | None = None

    def __post_init__(self):
        if not self.text or "\n" in self.text:
            raise ValueError("prompt text must be non-empty, single line")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if self.category_id < 0:
            raise ValueError("category_id must be a non-negative index")
        if self.mechanism == "domain" and not self.domain_name:
            raise ValueError("domain mechanism requires domain_name")


@dataclass
class PromptSet:
    records: list[PromptRecord]
    task_id: str
    created_with: str

    def categories_present(self) -> set[int]:
        return {r.category_id for r in self.records}

    def for_category(self, category_id: int) -> list[PromptRecord]:
        return [r for r in self.records if r.category_id == category_id]


def simple_prompt(category_name: str, category_id: int = 0) -> PromptRecord:
    if not category_name:
        raise ValueError("category_name must be non-empty")
    return PromptRecord(
        text=SIMPLE_TEMPLATE.format(category=category_name),
        category_name=category_name,
        category_id=category_id,
        mechanism="simple",
    )


def domain_prompt(domain_name: str, category_name: str,
                  category_id: int = 0) -> PromptRecord:
    if not domain_name or not category_name:
        raise ValueError("domain_name and category_name must be non-empty")
    return PromptRecord(
        text=DOMAIN_TEMPLATE.format(domain=domain_name, category=category_name),
        category_name=category_name,
        category_id=category_id,
        mechanism="domain",
        domain_name=domain_name,
    )


def gpt_instruction(domain_desc: str, category_desc: str, count: int) -> str:
    return GPT_INSTRUCTION_TEMPLATE.format(
        domain_desc=domain_desc, category_desc=category_desc, count=count)


def gpt_prompts(domain_desc: str, category_desc: str, category_name: str,
                count: int, llm: LlmClient,
                category_id: int = 0) -> list[PromptRecord]:
    """Ask the LLM for up to `count` diverse prompts for one category.

    Every returned record carries the requested category label regardless of
    how the LLM worded the prompt.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    raw = llm.complete(gpt_instruction(domain_desc, category_desc, count))
    lines = parse_prompt_lines(raw)
    if not lines:
        raise EmptyGenerationError(
            f"LLM returned no usable prompt lines for {category_name!r}")
    records = []
    seen = set()
    for line in lines[:count]:
        key = " ".join(line.split()).casefold()
        if key in seen:
            continue
        seen.add(key)
        records.append(PromptRecord(
            text=line,
            category_name=category_name,
            category_id=category_id,
            mechanism="gpt",
        ))
    return records


def dedup(prompt_set: PromptSet) -> PromptSet:
    """Drop later duplicates of (normalized text, category_id), keep order."""
    seen = set()
    survivors = []
    for record in prompt_set.records:
        key = (" ".join(record.text.split()).casefold(), record.category_id)
        if key in seen:
            continue
        seen.add(key)
        survivors.append(record)
    return replace(prompt_set, records=survivors)


def build_prompt_set(task: TaskSpec, mechanism: str,
                     count_per_category: int = 1,
                     llm: LlmClient | None = None,
                     max_parallel_llm_calls: int = 4) -> PromptSet:
    """Build a deduplicated PromptSet covering every category of the task."""
    if mechanism not in MECHANISMS:
        raise ValueError(f"unknown mechanism {mechanism!r}")
    if mechanism == "gpt" and llm is None:
        raise ValueError("gpt mechanism requires an LLM client")

    records: list[PromptRecord] = []
    if mechanism == "simple":
        for cid, name in enumerate(task.category_names):
            records.append(simple_prompt(name, cid))
    elif mechanism == "domain":
        if not task.domain_name:
            raise ValueError("domain mechanism requires task.domain_name")
        for cid, name in enumerate(task.category_names):
            records.append(domain_prompt(task.domain_name, name, cid))
    else:
        def one_category(item):
            cid, name = item
            return gpt_prompts(task.domain_description or task.domain_name,
                               task.description_for(name), name,
                               count_per_category, llm, category_id=cid)

        with ThreadPoolExecutor(max_workers=max_parallel_llm_calls) as pool:
            per_category = list(pool.map(one_category,
                                         enumerate(task.category_names)))
        for recs in per_category:
            records.extend(recs)

    prompt_set = dedup(PromptSet(records=records, task_id=task.task_id,
                                 created_with=mechanism))
    missing = set(range(task.category_count)) - prompt_set.categories_present()
    if missing:
        names = [task.category_names[i] for i in sorted(missing)]
        raise RuntimeError(f"no prompts generated for categories: {names}")
    return prompt_set


def write_prompt_set(prompt_set: PromptSet, path: str | Path) -> None:
    with open(path, "w") as fh:
        header = {"task_id": prompt_set.task_id,
                  "created_with": prompt_set.created_with}
        fh.write(json.dumps(header) + "\n")
        for r in prompt_set.records:
            fh.write(json.dumps({
                "text": r.text,
                "category_name": r.category_name,
                "category_id": r.category_id,
                "mechanism": r.mechanism,
                "domain_name": r.domain_name,
            }) + "\n")


def load_prompt_set(path: str | Path) -> PromptSet:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"empty prompt file: {path}")
    header = json.loads(lines[0])
    records = [PromptRecord(**json.loads(line)) for line in lines[1:]
               if line.strip()]
    return PromptSet(records=records, task_id=header["task_id"],
                     created_with=header["created_with"])
