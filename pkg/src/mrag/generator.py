"""The frozen text generator behind a uniform interface.

Prompt construction (one demonstration example ahead of the query), an
OpenAI-compatible chat-completions HTTP backend, a deterministic mock
backend used as a test oracle, and a disk-persistent response cache keyed
by (backend id, prompt, temperature, seed, max_tokens).

The mock backend echoes the prompt's demonstration output (or, for
zero-shot candidate prompts, the input text) with a seed-determined
fraction of tokens replaced by noise, which makes downstream scores a
deterministic, monotone function of memory quality.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests

API_KEY_ENV = "MRAG_API_KEY"

TASK_INSTRUCTIONS = {
    "summarization": "Summarize the input text.",
    "translation": "Translate the input text.",
    "dialogue": "Write a reply to the input message.",
}


def set_task_instruction(task: str, instruction: str) -> None:
    """Override the instruction line used in prompts for a task."""
    if task not in TASK_INSTRUCTIONS:
        raise ValueError(f"unknown task {task!r}")
    TASK_INSTRUCTIONS[task] = instruction

_EXAMPLE_IN = "\nExample input: "
_EXAMPLE_OUT = "\nExample output: "
_INPUT = "\nInput: "
_OUTPUT = "\nOutput:"


class GeneratorError(RuntimeError):
    pass


class BackendUnavailable(GeneratorError):
    def __init__(self, status: int, body: str = ""):
        self.status = status
        super().__init__(f"generation backend returned {status}: {body[:200]}")


class BackendTimeout(GeneratorError):
    pass


class UnparsablePrompt(GeneratorError):
    pass


class CacheCollision(GeneratorError):
    pass


@dataclass(frozen=True)
class GenRequest:
    prompt: str
    temperature: float = 0.0
    seed: int = 0
    max_tokens: int = 512

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0.0:
            raise ValueError("temperature must be non-negative")


@dataclass
class CandidatePool:
    candidates: list[str]
    k: int

    def __post_init__(self):
        if self.k < 1 or len(self.candidates) != self.k:
            raise ValueError(f"pool must hold exactly k={self.k} candidates")


def build_generation_prompt(x: str, memory, task: str,
                            instruction: str | None = None) -> str:
    """Demonstration-format prompt; byte-stable given inputs.

    ``memory`` is anything with .source and .target (a stored memory or a
    transient candidate demonstration).
    """
    if instruction is None:
        instruction = TASK_INSTRUCTIONS[task]
    return (
        f"{instruction}\n"
        f"{_EXAMPLE_IN[1:]}{memory.source}"
        f"{_EXAMPLE_OUT}{memory.target}\n"
        f"{_INPUT}{x}"
        f"{_OUTPUT}"
    )


def build_candidate_prompt(source: str, task: str,
                           instruction: str | None = None) -> str:
    """Zero-shot prompt used to explore fresh outputs for a memory's source."""
    if instruction is None:
        instruction = TASK_INSTRUCTIONS[task]
    return f"{instruction}\n{_INPUT}{source}{_OUTPUT}"


def parse_prompt_input(prompt: str) -> str:
    """Recover the query text from a demonstration prompt."""
    end = prompt.rfind(_OUTPUT)
    start = prompt.rfind(_INPUT, 0, end)
    if end == -1 or start == -1 or not prompt.endswith(_OUTPUT):
        raise UnparsablePrompt("prompt does not match the generation template")
    return prompt[start + len(_INPUT) : end]


def mock_generate(req: GenRequest) -> str:
    """Deterministic oracle backend.

    Parses the prompt template and returns its demonstration output (or
    the input text for zero-shot prompts) with a fraction
    rho = 0.1 * (seed mod 5) of tokens replaced by seed-tagged noise
    tokens at seeded positions. rho = 0 passes the base text through
    verbatim.
    """
    prompt = req.prompt
    if _EXAMPLE_OUT in prompt:
        start = prompt.find(_EXAMPLE_OUT) + len(_EXAMPLE_OUT)
        end = prompt.find("\n" + _INPUT, start)
        if end == -1:
            raise UnparsablePrompt("demonstration prompt lacks an input section")
        base = prompt[start:end]
    elif _INPUT in prompt and prompt.endswith(_OUTPUT):
        base = prompt[prompt.rfind(_INPUT) + len(_INPUT) : prompt.rfind(_OUTPUT)]
    else:
        raise UnparsablePrompt("prompt does not match any known template")

    rho = 0.1 * (req.seed % 5)
    tokens = base.split()
    n_noise = math.ceil(rho * len(tokens)) if rho > 0.0 else 0
    if n_noise == 0 and len(tokens) <= req.max_tokens:
        return base
    rng = np.random.default_rng(req.seed)
    if n_noise > 0 and tokens:
        positions = rng.choice(len(tokens), size=min(n_noise, len(tokens)), replace=False)
        for pos in positions:
            tokens[int(pos)] = f"nz{req.seed}p{int(pos)}"
    return " ".join(tokens[: req.max_tokens])


class MockBackend:
    """In-process oracle backend; counts real completions for cache tests."""

    backend_id = "mock"

    def __init__(self):
        self.calls = 0

    def complete(self, req: GenRequest) -> str:
        self.calls += 1
        return mock_generate(req)


class HttpBackend:
    """Chat-completions-style HTTP backend.

    POSTs to <endpoint>/chat/completions with the prompt as a single user
    message; reads choices[0].message.content. Auth comes from the
    MRAG_API_KEY environment variable as a bearer token.
    """

    def __init__(self, endpoint: str, model: str, timeout: float = 60.0,
                 retries: int = 1, session: requests.Session | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.timeout = timeout
        self.retries = retries
        self._session = session or requests.Session()

    @property
    def backend_id(self) -> str:
        return f"http:{self.endpoint}:{self.model}"

    def complete(self, req: GenRequest) -> str:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "seed": req.seed,
        }
        last_status, last_body = 0, ""
        for _ in range(self.retries + 1):
            try:
                resp = self._session.post(
                    f"{self.endpoint}/chat/completions",
                    json=payload, headers=headers, timeout=self.timeout,
                )
            except requests.Timeout as exc:
                raise BackendTimeout(str(exc)) from exc
            except requests.RequestException as exc:
                last_status, last_body = 0, str(exc)
                continue
            if resp.status_code == 200:
                return resp.json()["choices"][0]["message"]["content"]
            last_status, last_body = resp.status_code, resp.text
        raise BackendUnavailable(last_status, last_body)


class GenerationCache:
    """Directory of <hexdigest>.json files holding full request + response.

    Writes are atomic (temp file + rename); readers see either absence or
    a complete entry. Keys are collision-checked against the stored
    request.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(backend_id: str, req: GenRequest) -> str:
        blob = json.dumps(
            [backend_id, req.prompt, req.temperature, req.seed, req.max_tokens],
            ensure_ascii=False,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, backend_id: str, req: GenRequest) -> str | None:
        path = self._path(self.key(backend_id, req))
        if not path.exists():
            return None
        entry = json.loads(path.read_text(encoding="utf-8"))
        stored = entry["request"]
        if (entry["backend"] != backend_id
                or stored["prompt"] != req.prompt
                or stored["temperature"] != req.temperature
                or stored["seed"] != req.seed
                or stored["max_tokens"] != req.max_tokens):
            raise CacheCollision(f"cache entry {path.name} stores a different request")
        return entry["response"]

    def put(self, backend_id: str, req: GenRequest, response: str) -> None:
        path = self._path(self.key(backend_id, req))
        entry = {
            "backend": backend_id,
            "request": {
                "prompt": req.prompt,
                "temperature": req.temperature,
                "seed": req.seed,
                "max_tokens": req.max_tokens,
            },
            "response": response,
        }
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(entry, fh, ensure_ascii=False)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)


class Generator:
    """Cache-fronted generation: a hit never touches the backend."""

    def __init__(self, backend, cache: GenerationCache | None = None):
        self.backend = backend
        self.cache = cache

    def generate(self, req: GenRequest) -> str:
        if self.cache is not None:
            hit = self.cache.get(self.backend.backend_id, req)
            if hit is not None:
                return hit
        response = self.backend.complete(req)
        if self.cache is not None:
            self.cache.put(self.backend.backend_id, req, response)
        return response


def generate_candidates(generator: Generator, source: str, k: int, task: str,
                        seed: int, temperature: float = 0.8,
                        max_tokens: int = 512,
                        instruction: str | None = None) -> CandidatePool:
    """K sampled outputs for a memory's source, seeds seed..seed+k-1.

    A failed call aborts the whole pool; partial pools are never returned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    prompt = build_candidate_prompt(source, task, instruction)
    candidates = [
        generator.generate(GenRequest(prompt=prompt, temperature=temperature,
                                      seed=seed + i, max_tokens=max_tokens))
        for i in range(k)
    ]
    return CandidatePool(candidates=candidates, k=k)
