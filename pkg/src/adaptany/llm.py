"""LLM client used for prompt diversification.

Two implementations: an HTTP client for a live chat endpoint and a replay
client that serves previously recorded exchanges, so tests and offline runs
never touch the network. Every live exchange is appended to a replay log.
"""

from __future__ import annotations

import json
import os
import re
import threading
from pathlib import Path
from typing import Protocol

import httpx

LLM_API_KEY_ENV = "ADAPTANY_LLM_API_KEY"

_LIST_MARKER = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


class LlmClientError(RuntimeError):
    """Transport or protocol failure talking to the LLM."""


class EmptyGenerationError(RuntimeError):
    """The LLM returned no usable prompt lines."""


class LlmClient(Protocol):
    def complete(self, instruction: str) -> str:
        """Return the raw text response for one instruction."""
        ...


def parse_prompt_lines(raw: str) -> list[str]:
    """One prompt per line; list markers and surrounding quotes stripped."""
    lines = []
    for line in raw.splitlines():
        line = _LIST_MARKER.sub("", line).strip()
        line = line.strip("\"'").strip()
        if line:
            lines.append(line)
    return lines


class HttpLlmClient:
    """Minimal chat-completions style client. Credential from env var."""

    def __init__(self, endpoint, model="gpt-4", max_retries=3, timeout=60.0,
                 replay_log=None):
        self.endpoint = endpoint
        self.model = model
        self.max_retries = max_retries
        self.timeout = timeout
        self.replay_log = Path(replay_log) if replay_log else None
        self._log_lock = threading.Lock()

    def complete(self, instruction: str) -> str:
        api_key = os.environ.get(LLM_API_KEY_ENV)
        if not api_key:
            raise LlmClientError(f"{LLM_API_KEY_ENV} is not set")
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": instruction}],
        }
        headers = {"Authorization": f"Bearer {api_key}"}
        last_err = None
        for _ in range(self.max_retries):
            try:
                resp = httpx.post(self.endpoint, json=payload, headers=headers,
                                  timeout=self.timeout)
                resp.raise_for_status()
                text = resp.json()["choices"][0]["message"]["content"]
                self._record(instruction, text)
                return text
            except (httpx.HTTPError, KeyError, ValueError) as err:
                last_err = err
        raise LlmClientError(f"LLM request failed after {self.max_retries} "
                             f"attempts: {last_err}")

    def _record(self, instruction, response):
        if self.replay_log is None:
            return
        entry = json.dumps({"instruction": instruction, "response": response})
        with self._log_lock:
            with open(self.replay_log, "a") as fh:
                fh.write(entry + "\n")


class ReplayLlmClient:
    """Serves recorded exchanges keyed by instruction text."""

    def __init__(self, replay_log):
        self._by_instruction = {}
        for line in Path(replay_log).read_text().splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            self._by_instruction.setdefault(entry["instruction"], []).append(
                entry["response"])
        self._cursor = {k: 0 for k in self._by_instruction}

    def complete(self, instruction: str) -> str:
        responses = self._by_instruction.get(instruction)
        if not responses:
            raise LlmClientError(
                f"no recorded response for instruction: {instruction[:80]!r}")
        i = self._cursor[instruction]
        # Repeat the last recorded response once the log is exhausted.
        response = responses[min(i, len(responses) - 1)]
        self._cursor[instruction] = i + 1
        return response


def record_exchange(replay_log, instruction: str, response: str) -> None:
    """Append one exchange to a replay log (used to build fixtures)."""
    entry = json.dumps({"instruction": instruction, "response": response})
    with open(replay_log, "a") as fh:
        fh.write(entry + "\n")
