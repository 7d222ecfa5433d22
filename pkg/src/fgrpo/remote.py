"""JSON-over-HTTP judge client.

Request body: ``{"prompt_template_id", "fields", "prompt", "max_completion_tokens"}``.
Response body: ``{"verdict": "<token>"}``. Verdict tokens are matched strictly;
anything else is a judge failure.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable

from .rewards import ConsistencyQuery, JudgeError, Judges, JudgeVerdictC, JudgeVerdictS, SentenceQuery

log = logging.getLogger(__name__)

ENDPOINT_ENV = "FGRPO_JUDGE_ENDPOINT"
MAX_COMPLETION_TOKENS = 1024
TEMPLATE_IDS = ("consistency", "semantic_grounding")


@lru_cache(maxsize=None)
def prompt_template(template_id: str) -> str:
    if template_id not in TEMPLATE_IDS:
        raise KeyError(f"unknown prompt template {template_id!r}")
    return resources.files("fgrpo").joinpath("data", "prompts", f"{template_id}.txt").read_text(encoding="utf-8")


def context_block(context: tuple[str, ...], target: str) -> str:
    lines = ["REASONING CONTEXT:"]
    lines += [f"{i + 1}. {s}" for i, s in enumerate(context)] or ["(none)"]
    lines += ["", f"LATEST SENTENCE: {target}"]
    return "\n".join(lines)


def consistency_payload(q: ConsistencyQuery) -> dict:
    fields = {"question": q.question, "think_part": q.reasoning, "answer_part": q.answer}
    return {
        "prompt_template_id": "consistency",
        "fields": fields,
        "prompt": prompt_template("consistency").format_map(fields),
        "max_completion_tokens": MAX_COMPLETION_TOKENS,
    }


def sentence_payload(q: SentenceQuery) -> dict:
    fields = {"question": q.question, "context_block": context_block(q.context_sentences, q.target_sentence)}
    payload = {
        "prompt_template_id": "semantic_grounding",
        "fields": fields,
        "prompt": prompt_template("semantic_grounding").format_map(fields),
        "max_completion_tokens": MAX_COMPLETION_TOKENS,
    }
    if isinstance(q.image_ref, str):
        payload["image_ref"] = q.image_ref
    return payload


def parse_verdict(body: bytes | str, allowed: type) -> object:
    try:
        raw = json.loads(body)["verdict"]
    except (ValueError, KeyError, TypeError) as exc:
        raise JudgeError(f"malformed judge response: {exc}") from exc
    token = raw.strip() if isinstance(raw, str) else None
    try:
        return allowed(token)
    except ValueError:
        raise JudgeError(f"unparseable verdict {raw!r}") from None


_RETRYABLE = (urllib.error.URLError, TimeoutError, socket.timeout, ConnectionError)


@dataclass
class RemoteJudgeClient:
    endpoint: str
    timeout: float = 30.0
    attempts: int = 3
    backoff: float = 0.5
    sleep: Callable[[float], None] = time.sleep

    @classmethod
    def from_env(cls, **kwargs) -> "RemoteJudgeClient":
        endpoint = os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise JudgeError(f"{ENDPOINT_ENV} is not set")
        return cls(endpoint, **kwargs)

    def post(self, payload: dict) -> bytes:
        """POST with exponential backoff on transport errors and 5xx replies."""
        data = json.dumps(payload).encode()
        last = None
        for attempt in range(self.attempts):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            req = urllib.request.Request(self.endpoint, data=data, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return resp.read()
            except urllib.error.HTTPError as exc:
                if exc.code < 500:
                    raise JudgeError(f"judge rejected request: HTTP {exc.code}") from exc
                last = exc
            except _RETRYABLE as exc:
                last = exc
            log.info("judge call attempt %d failed: %s", attempt + 1, last)
        raise JudgeError(f"judge unreachable after {self.attempts} attempts: {last}")

    def consistency(self, q: ConsistencyQuery) -> JudgeVerdictC:
        return parse_verdict(self.post(consistency_payload(q)), JudgeVerdictC)

    def sentence(self, q: SentenceQuery) -> JudgeVerdictS:
        return parse_verdict(self.post(sentence_payload(q)), JudgeVerdictS)

    def judges(self) -> Judges:
        return Judges(consistency=self.consistency, sentence=self.sentence)
