"""Prompt templates, chat-completion clients and response parsers."""
from __future__ import annotations

import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Protocol, Sequence

from .errors import LlmFormatError, LlmUnavailable

log = logging.getLogger(__name__)

DOMAINS = ("cooking", "woodworking", "gardening")
PROMPT_VERSION = 1


@dataclass(frozen=True)
class Prompt:
    system: str
    user: str


def load_template(kind: str, domain: str) -> Prompt:
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    text = resources.files("stitchdemo.prompts").joinpath(f"{kind}_{domain}.txt").read_text("utf-8")
    head, user = text.split("\n[user]\n", 1)
    return Prompt(head.removeprefix("[system]\n"), user)


def _fmt_time(t: float) -> str:
    return f"{t:g}"


def summarize_prompt(domain: str, narrations: Sequence[tuple[float, float, str]]) -> Prompt:
    template = load_template("summarize", domain)
    lines = "\n".join(f"[{_fmt_time(a)}-{_fmt_time(b)}] {text}" for a, b, text in narrations)
    return Prompt(template.system, template.user.replace("{narrations}", lines))


def procedure_label(domain: str) -> str:
    return "Recipe" if domain == "cooking" else "Project"


def mix_prompt(domain: str, summaries: Sequence["ParsedSummary"]) -> Prompt:
    template = load_template("mix", domain)
    label = procedure_label(domain)
    blocks = []
    for k, summary in enumerate(summaries, start=1):
        lines = [f"{label} {k}: {summary.title}".rstrip()]
        lines += [
            f"Step {i}: [{_fmt_time(s.t_start)}-{_fmt_time(s.t_end)}] {s.text}"
            for i, s in enumerate(summary.steps, start=1)
        ]
        blocks.append("\n".join(lines))
    user = template.user.replace("{n}", str(len(summaries))).replace("{procedures}", "\n\n".join(blocks))
    return Prompt(template.system, user)


# ---------------------------------------------------------------------------
# clients


class LlmClient(Protocol):
    def complete(self, prompt: Prompt) -> str: ...


class HttpLlmClient:
    """JSON-over-HTTP chat-completion client (OpenAI-compatible ``/chat/completions``)."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str = "default",
        attempts: int = 3,
        backoff_s: float = 1.0,
        timeout_s: float = 120.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = (base_url or os.environ.get("SAD_LLM_URL", "")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("SAD_LLM_KEY", "")
        self.model = model
        self.attempts = attempts
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s
        self.sleep = sleep
        if not self.base_url:
            raise LlmUnavailable("no LLM endpoint configured (set SAD_LLM_URL)")

    def _post(self, payload: dict) -> dict:
        req = urllib.request.Request(
            self.base_url + "/chat/completions",
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {self.api_key}"},
        )
        with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def complete(self, prompt: Prompt) -> str:
        payload = {
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
        }
        last: Exception | None = None
        for attempt in range(self.attempts):
            try:
                body = self._post(payload)
                return body["choices"][0]["message"]["content"]
            except (urllib.error.URLError, OSError, json.JSONDecodeError, KeyError, IndexError) as exc:
                last = exc
                log.warning("LLM request failed (attempt %d/%d): %s", attempt + 1, self.attempts, exc)
                if attempt + 1 < self.attempts:
                    self.sleep(self.backoff_s * 2**attempt)
        raise LlmUnavailable(f"LLM unavailable after {self.attempts} attempts: {last}")


_NARRATION = re.compile(r"^\[([\d.]+)-([\d.]+)\]\s*(.*)$")
_SOURCE_STEP = re.compile(r"^Step (\d+): \[[\d.]+-[\d.]+\] ")


class MockLlmClient:
    """Deterministic offline stand-in.

    Summaries turn every narration line into one step. Mixing interleaves the
    sources round-robin (keeping each source's own order) up to ``max_steps``.
    """

    def __init__(self, max_steps: int = 8):
        self.max_steps = max_steps

    def complete(self, prompt: Prompt) -> str:
        if prompt.system.startswith("Help summarize"):
            return self._summarize(prompt.user)
        return self._mix(prompt.user)

    def _summarize(self, user: str) -> str:
        body = user.split("Here are narrations:", 1)[-1]
        steps = []
        for line in body.splitlines():
            m = _NARRATION.match(line.strip())
            if m:
                steps.append(f"Step {len(steps) + 1}: [{m.group(1)}-{m.group(2)}] {m.group(3)}")
        if not steps:
            return "Not Possible"
        label = "Recipe" if "recipe being made" in user else "Project"
        return "\n".join([f"{label}: mock summary"] + steps)

    def _mix(self, user: str) -> str:
        label = "Recipe" if "Recipe _" in user else "Project"
        body = user.split("Here are the ", 1)[-1]
        sources: list[list[tuple[int, str]]] = []
        for line in body.splitlines():
            line = line.strip()
            if re.match(rf"^{label} \d+:", line):
                sources.append([])
                continue
            m = _SOURCE_STEP.match(line)
            if m and sources:
                sources[-1].append((int(m.group(1)), line[m.end():]))
        if len(sources) < 2 or any(not s for s in sources):
            return "Not Possible"
        out = []
        depth = max(len(s) for s in sources)
        for r in range(depth):
            for k, steps in enumerate(sources, start=1):
                if r < len(steps) and len(out) < max(self.max_steps, len(sources)):
                    num, text = steps[r]
                    out.append(f"Step {len(out) + 1} (Step {num} in {label} {k}): {text}")
        out.append("Explanation: round-robin interleaving of the provided procedures.")
        return "\n".join(out)


class ScriptedLlmClient:
    """Returns canned responses in order; records the prompts it receives."""

    def __init__(self, responses: Sequence[str]):
        self.responses = list(responses)
        self.prompts: list[Prompt] = []

    def complete(self, prompt: Prompt) -> str:
        self.prompts.append(prompt)
        if not self.responses:
            raise LlmUnavailable("scripted client exhausted")
        return self.responses.pop(0)


def make_client(kind: str, model: str = "default") -> LlmClient:
    if kind == "mock":
        return MockLlmClient()
    if kind == "http":
        return HttpLlmClient(model=model)
    raise ValueError(f"unknown LLM client {kind!r}")


# ---------------------------------------------------------------------------
# parsers

_TITLE = re.compile(r"^\s*(?:Recipe|Project)\s*:\s*(.*?)\s*$")
_STEP = re.compile(
    r"^\s*Step\s+(\d+)\s*:\s*\[\s*(\d+(?:\.\d+)?)\s*-\s*(\d+(?:\.\d+)?)\s*\]\s*(.*?)\s*$"
)
_MIX_STEP = re.compile(
    r"^\s*Step\s+(\d+)\s*\(\s*Step\s+(\d+)\s+in\s+(?:Recipe|Project)\s+(\d+)\s*\)\s*:\s*(.*?)\s*$"
)
_STEP_PREFIX = re.compile(r"^\s*Step\b")


def is_not_possible(text: str) -> bool:
    return "not possible" in text.lower()


@dataclass
class SummaryStep:
    number: int
    t_start: float
    t_end: float
    text: str


@dataclass
class ParsedSummary:
    title: str = ""
    steps: list[SummaryStep] = field(default_factory=list)
    not_possible: bool = False
    rejected: list[str] = field(default_factory=list)


def parse_summary(text: str, duration_s: float | None = None) -> ParsedSummary:
    """Parse ``Step k: [t1-t2] description`` lines in order of appearance.

    Steps with ``t1 >= t2`` or ending after ``duration_s`` are rejected and
    kept in ``rejected``. A response without any step line is either flagged
    "Not Possible" or raises :class:`LlmFormatError`.
    """
    out = ParsedSummary()
    saw_step_line = False
    for line in text.splitlines():
        title = _TITLE.match(line)
        if title and not out.title:
            out.title = title.group(1)
            continue
        m = _STEP.match(line)
        if m is None:
            if _STEP_PREFIX.match(line):
                saw_step_line = True
                out.rejected.append(line.strip())
            continue
        saw_step_line = True
        t1, t2 = float(m.group(2)), float(m.group(3))
        if t1 >= t2 or (duration_s is not None and t2 > duration_s):
            out.rejected.append(line.strip())
            continue
        out.steps.append(SummaryStep(int(m.group(1)), t1, t2, m.group(4)))
    if not saw_step_line:
        if is_not_possible(text):
            out.not_possible = True
            return out
        raise LlmFormatError("no step lines in summary response", raw=text)
    return out


@dataclass
class MixCitation:
    number: int
    source_step: int  # 1-based, as cited
    source: int  # 1-based, as cited
    text: str


def _strip_brackets(text: str) -> str:
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        text = text[1:-1].strip()
    return text


def parse_mix(text: str) -> tuple[list[MixCitation], list[str]]:
    """Citations in order, plus lines that look like steps but break the grammar."""
    citations, malformed = [], []
    for line in text.splitlines():
        m = _MIX_STEP.match(line)
        if m:
            citations.append(
                MixCitation(int(m.group(1)), int(m.group(2)), int(m.group(3)), _strip_brackets(m.group(4)))
            )
        elif _STEP_PREFIX.match(line):
            malformed.append(line.strip())
    return citations, malformed
