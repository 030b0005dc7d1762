"""Perceptual prior extraction: per-attribute global scores and a local
quality map over a patch grid, quantified from good/poor assessment
probabilities through a sigmoid.

Two providers produce the raw assessments:

* ``HttpVlmProvider`` — a chat-completions endpoint that receives one user
  message holding a base64 PNG image part and a text prompt, with
  ``max_tokens=1`` and the top-k log-probabilities of the first generated
  token requested. Wire format (versioned as ``PROMPT_VERSION`` together with
  the prompt templates)::

      POST <url>
      {"model": ..., "max_tokens": 1, "logprobs": true, "top_logprobs": 20,
       "messages": [{"role": "user", "content": [
           {"type": "image_url", "image_url": {"url": "data:image/png;base64,..."}},
           {"type": "text", "text": "<prompt>"}]}]}

  expecting ``choices[0].logprobs.content[0].top_logprobs`` as a list of
  ``{"token": ..., "logprob": ...}`` records.

* ``BuiltinProvider`` — a deterministic, offline stand-in computing the same
  (p_pos, p_neg) interface from luminance statistics, so the full pipeline
  runs reproducibly with no endpoint.

Extracted priors are cached as JSON sidecars keyed by a SHA-256 of the image
bytes, provider id, prompt version, and grid size.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import math
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import requests

from .errors import ProviderError, ValidationError
from .imaging import Image, luminance, patchify

log = logging.getLogger(__name__)

ATTRIBUTE_ORDER = ("contrast", "visibility", "sharpness")
DEFAULT_ALPHA = 3.0
PROMPT_VERSION = "pv1"

# absent-token rule: one decade (ln 10 ~ 2.3) below the worst returned logprob
MISSING_TOKEN_LOGPROB_GAP = 2.3

GLOBAL_SCOPE_SENTENCE = "Assess the image as a whole."
PATCH_SCOPE_SENTENCE = "Assess this patch, which was cropped from a larger image."

DEFAULT_TEMPLATE = (
    "You are assessing one low-level visual attribute of an image: {attribute}. "
    "Here, {attribute} means {definition}. {scope} "
    "Is the {attribute} of the image good or poor? "
    "Answer with exactly one word: good or poor."
)

FORCED_CHOICE = "Answer with exactly one word: good or poor."

DEFAULT_DEFINITIONS = {
    "contrast": "the difference in luminance that makes objects distinguishable",
    "visibility": "how easily scene content can be seen",
    "sharpness": "the clarity of edges and fine detail",
}


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    definition: str
    prompt_template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        for ph in ("{attribute}", "{definition}"):
            if ph not in self.prompt_template:
                raise ValidationError(f"prompt template missing placeholder {ph}")


def default_specs() -> tuple[AttributeSpec, ...]:
    return tuple(AttributeSpec(name, DEFAULT_DEFINITIONS[name]) for name in ATTRIBUTE_ORDER)


@dataclass(frozen=True)
class AssessmentLogits:
    p_pos: float
    p_neg: float
    provider_id: str
    raw: dict | None = None

    def __post_init__(self):
        if not (0.0 <= self.p_pos <= 1.0 and 0.0 <= self.p_neg <= 1.0):
            raise ValidationError(
                f"token probabilities outside [0,1]: {self.p_pos}, {self.p_neg}")


def quantify(p_pos: float, p_neg: float, alpha: float = DEFAULT_ALPHA) -> float:
    """Sigmoid of the positive/negative probability difference scaled by alpha."""
    if alpha <= 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    if not (0.0 <= p_pos <= 1.0 and 0.0 <= p_neg <= 1.0):
        raise ValidationError("probabilities must lie in [0,1]")
    return 1.0 / (1.0 + math.exp(-(p_pos - p_neg) / alpha))


def build_prompt(spec: AttributeSpec, scope: str) -> str:
    if scope not in ("global", "patch"):
        raise ValidationError(f"scope must be 'global' or 'patch', got {scope!r}")
    scope_sentence = GLOBAL_SCOPE_SENTENCE if scope == "global" else PATCH_SCOPE_SENTENCE
    text = spec.prompt_template
    if "{scope}" in text:
        text = text.replace("{scope}", scope_sentence)
    else:
        text = scope_sentence + " " + text
    text = text.replace("{attribute}", spec.name).replace("{definition}", spec.definition)
    if not text.rstrip().endswith(FORCED_CHOICE):
        text = text.rstrip() + " " + FORCED_CHOICE
    return text


# ---------------------------------------------------------------- prior record

@dataclass(frozen=True)
class PerceptualPrior:
    """Global scores per attribute plus a 3 x G x G local quality map, channel
    order fixed to (contrast, visibility, sharpness)."""

    global_scores: dict[str, float]
    s_mean: float
    map: np.ndarray
    grid: int
    provider_id: str
    prompt_version: str

    def __post_init__(self):
        if set(self.global_scores) != set(ATTRIBUTE_ORDER):
            raise ValidationError(f"global scores must cover {ATTRIBUTE_ORDER}")
        m = np.ascontiguousarray(self.map, dtype=np.float64)
        object.__setattr__(self, "map", m)
        if m.shape != (3, self.grid, self.grid):
            raise ValidationError(f"quality map must be (3,{self.grid},{self.grid}), got {m.shape}")
        vals = np.array([self.global_scores[a] for a in ATTRIBUTE_ORDER])
        if not ((vals > 0) & (vals < 1)).all() or not ((m > 0) & (m < 1)).all():
            raise ValidationError("prior scores must lie strictly inside (0,1)")
        if abs(self.s_mean - vals.mean()) > 1e-9:
            raise ValidationError("s_mean does not match the mean of global scores")

    @classmethod
    def from_scores(cls, global_scores: dict[str, float], qmap, grid: int,
                    provider_id: str, prompt_version: str) -> "PerceptualPrior":
        vals = [float(global_scores[a]) for a in ATTRIBUTE_ORDER]
        return cls(global_scores={a: float(global_scores[a]) for a in ATTRIBUTE_ORDER},
                   s_mean=float(np.mean(vals)), map=np.asarray(qmap, dtype=np.float64),
                   grid=int(grid), provider_id=provider_id, prompt_version=prompt_version)

    @property
    def s_vector(self) -> np.ndarray:
        """Scores in fixed channel order (contrast, visibility, sharpness)."""
        return np.array([self.global_scores[a] for a in ATTRIBUTE_ORDER], dtype=np.float64)

    def to_sidecar(self) -> dict:
        return {
            "version": 1,
            "provider": self.provider_id,
            "prompt_version": self.prompt_version,
            "grid": self.grid,
            "global": {a: self.global_scores[a] for a in ATTRIBUTE_ORDER},
            "s_mean": self.s_mean,
            "map": [self.map[c].reshape(-1).tolist() for c in range(3)],
        }

    @classmethod
    def from_sidecar(cls, doc: dict) -> "PerceptualPrior":
        if doc.get("version") != 1:
            raise ValidationError(f"unsupported prior sidecar version {doc.get('version')}")
        grid = int(doc["grid"])
        m = np.array(doc["map"], dtype=np.float64).reshape(3, grid, grid)
        return cls(global_scores={a: float(doc["global"][a]) for a in ATTRIBUTE_ORDER},
                   s_mean=float(doc["s_mean"]), map=m, grid=grid,
                   provider_id=str(doc["provider"]),
                   prompt_version=str(doc["prompt_version"]))


# ---------------------------------------------------------------- providers

class Provider(Protocol):
    provider_id: str
    parallel_requests: int

    def assess(self, image: Image, spec: AttributeSpec, scope: str) -> AssessmentLogits: ...


_LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


class BuiltinProvider:
    """Deterministic statistics-based assessor mirroring the VLM interface.

    Probability differences D in [-1,1] from luminance Y:
      visibility  D = clamp(12 * (mean(Y) - 0.35))
      contrast    D = clamp(30 * (std(Y)  - 0.15))
      sharpness   D = clamp(40 * (mean|lap(Y)| - 0.05))
    returned as p_pos = (1+D)/2, p_neg = (1-D)/2.
    """

    provider_id = "builtin:v1"
    parallel_requests = 1

    def __init__(self):
        self.calls = 0

    def assess(self, image: Image, spec: AttributeSpec, scope: str) -> AssessmentLogits:
        self.calls += 1
        d = builtin_difference(image, spec.name)
        return AssessmentLogits(p_pos=(1.0 + d) / 2.0, p_neg=(1.0 - d) / 2.0,
                                provider_id=self.provider_id)


def builtin_difference(image: Image, attribute: str) -> float:
    y = luminance(image)
    if attribute == "visibility":
        d = 12.0 * (y.mean() - 0.35)
    elif attribute == "contrast":
        d = 30.0 * (y.std() - 0.15)
    elif attribute == "sharpness":
        d = 40.0 * (_mean_abs_laplacian(y) - 0.05)
    else:
        raise ValidationError(f"unknown attribute {attribute!r}")
    return float(np.clip(d, -1.0, 1.0))


def _mean_abs_laplacian(y: np.ndarray) -> float:
    if y.shape[0] < 3 or y.shape[1] < 3:
        return 0.0
    acc = np.zeros((y.shape[0] - 2, y.shape[1] - 2))
    for di in range(3):
        for dj in range(3):
            wgt = _LAPLACIAN[di, dj]
            if wgt:
                acc += wgt * y[di:di + acc.shape[0], dj:dj + acc.shape[1]]
    return float(np.abs(acc).mean())


@dataclass
class VlmClientConfig:
    url: str
    api_key: str = ""
    model: str = "default"
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 0.5
    top_logprobs: int = 20
    parallel_requests: int = 4

    @classmethod
    def from_env(cls, **overrides) -> "VlmClientConfig":
        url = overrides.pop("url", None) or os.environ.get("GPP_VLM_URL", "")
        key = overrides.pop("api_key", None) or os.environ.get("GPP_VLM_KEY", "")
        if not url:
            raise ValidationError("no VLM endpoint: set GPP_VLM_URL or pass url")
        return cls(url=url, api_key=key, **overrides)


def _encode_png_base64(image: Image) -> str:
    from PIL import Image as PILImage
    u8 = np.clip(np.round(image.values * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _match_token(token: str, target: str) -> bool:
    t = token.lower()
    if t.startswith(" "):
        t = t[1:]
    return t == target


def _pick_logprob(entries: list[tuple[str, float]], target: str) -> float | None:
    best = None
    for token, lp in entries:
        if _match_token(token, target) and (best is None or lp > best):
            best = lp
    return best


class HttpVlmProvider:
    """Chat-completions client extracting good/poor first-token probabilities."""

    parallel_requests = 4

    def __init__(self, config: VlmClientConfig, session: requests.Session | None = None):
        self.config = config
        self.session = session or requests.Session()
        self.provider_id = f"http:{config.model}"
        self.parallel_requests = config.parallel_requests
        self.calls = 0

    def assess(self, image: Image, spec: AttributeSpec, scope: str) -> AssessmentLogits:
        prompt = build_prompt(spec, scope)
        payload = {
            "model": self.config.model,
            "max_tokens": 1,
            "logprobs": True,
            "top_logprobs": self.config.top_logprobs,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "image_url",
                     "image_url": {"url": "data:image/png;base64," + _encode_png_base64(image)}},
                    {"type": "text", "text": prompt},
                ],
            }],
        }
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"

        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(self.config.backoff_base * (2 ** (attempt - 1)))
            try:
                self.calls += 1
                resp = self.session.post(self.config.url, json=payload,
                                         headers=headers, timeout=self.config.timeout)
                resp.raise_for_status()
                return self._parse(resp.json())
            except (requests.RequestException, KeyError, IndexError,
                    TypeError, ValueError) as exc:
                last_error = exc
                log.warning("VLM request attempt %d failed: %s", attempt + 1, exc)
        raise ProviderError(f"VLM endpoint failed: {last_error}",
                            retries=self.config.max_retries)

    def _parse(self, doc: dict) -> AssessmentLogits:
        top = doc["choices"][0]["logprobs"]["content"][0]["top_logprobs"]
        entries = [(str(e["token"]), float(e["logprob"])) for e in top]
        if not entries:
            raise ValueError("empty top_logprobs in VLM response")
        lp_pos = _pick_logprob(entries, "good")
        lp_neg = _pick_logprob(entries, "poor")
        degraded = lp_pos is None or lp_neg is None
        floor = min(lp for _, lp in entries) - MISSING_TOKEN_LOGPROB_GAP
        if lp_pos is None:
            lp_pos = floor
        if lp_neg is None:
            lp_neg = floor
        return AssessmentLogits(
            p_pos=math.exp(lp_pos), p_neg=math.exp(lp_neg),
            provider_id=self.provider_id,
            raw={"top_logprobs": entries, "degraded": degraded})


# ---------------------------------------------------------------- extraction

def extract_prior(image: Image, provider, grid: int,
                  specs: tuple[AttributeSpec, ...] | None = None,
                  alpha: float = DEFAULT_ALPHA,
                  cache: "PriorCache | None" = None) -> PerceptualPrior:
    """One global plus grid*grid patch assessments per attribute, quantified
    and assembled into a PerceptualPrior. Consults the cache first."""
    if grid < 1:
        raise ValidationError("grid must be >= 1")
    specs = specs if specs is not None else default_specs()
    by_name = {s.name: s for s in specs}
    if set(by_name) != set(ATTRIBUTE_ORDER):
        raise ValidationError(f"specs must cover exactly {ATTRIBUTE_ORDER}")

    key = None
    if cache is not None:
        key = cache_key(image, provider.provider_id, PROMPT_VERSION, grid)
        hit = cache.get(key)
        if hit is not None:
            return hit

    patches = patchify(image, grid)
    global_scores: dict[str, float] = {}
    qmap = np.zeros((3, grid, grid), dtype=np.float64)

    def assess_one(spec: AttributeSpec, img: Image, scope: str, where: str) -> float:
        try:
            logits = provider.assess(img, spec, scope)
        except ProviderError:
            raise
        except Exception as exc:
            raise ProviderError(str(exc), context=where) from exc
        return quantify(logits.p_pos, logits.p_neg, alpha)

    for c, name in enumerate(ATTRIBUTE_ORDER):
        spec = by_name[name]
        try:
            global_scores[name] = assess_one(spec, image, "global", f"attribute={name}, global")
        except ProviderError as exc:
            raise ProviderError(f"global assessment failed: {exc}", retries=exc.retries,
                                context=f"attribute={name}") from exc

        workers = getattr(provider, "parallel_requests", 1)
        if workers > 1 and len(patches) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(assess_one, spec, p, "patch",
                                       f"attribute={name}, patch={i}")
                           for i, p in enumerate(patches)]
                scores = []
                for i, fut in enumerate(futures):
                    try:
                        scores.append(fut.result())
                    except ProviderError as exc:
                        raise ProviderError(f"patch assessment failed: {exc}",
                                            retries=exc.retries,
                                            context=f"attribute={name}, patch={i}") from exc
        else:
            scores = []
            for i, p in enumerate(patches):
                try:
                    scores.append(assess_one(spec, p, "patch", f"attribute={name}, patch={i}"))
                except ProviderError as exc:
                    raise ProviderError(f"patch assessment failed: {exc}",
                                        retries=exc.retries,
                                        context=f"attribute={name}, patch={i}") from exc
        qmap[c] = np.array(scores).reshape(grid, grid)

    prior = PerceptualPrior.from_scores(global_scores, qmap, grid,
                                        provider.provider_id, PROMPT_VERSION)
    if cache is not None and key is not None:
        cache.put(key, prior)
    return prior


# ---------------------------------------------------------------- cache

def cache_key(image: Image, provider_id: str, prompt_version: str, grid: int) -> str:
    h = hashlib.sha256()
    h.update(b"GPPC")
    h.update(struct.pack("<II", image.height, image.width))
    h.update(np.ascontiguousarray(image.values, dtype=np.float32).tobytes())
    h.update(provider_id.encode("utf-8") + b"|")
    h.update(prompt_version.encode("utf-8") + b"|")
    h.update(struct.pack("<I", grid))
    return h.hexdigest()


class PriorCache:
    """JSON sidecar store under one directory; writes are atomic-rename."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def get(self, key: str) -> PerceptualPrior | None:
        path = self._path(key)
        if not path.exists():
            return None
        try:
            return PerceptualPrior.from_sidecar(json.loads(path.read_text()))
        except Exception as exc:
            log.warning("corrupt prior cache entry %s treated as miss: %s", path, exc)
            return None

    def put(self, key: str, prior: PerceptualPrior) -> None:
        path = self._path(key)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(prior.to_sidecar(), sort_keys=True))
        os.replace(tmp, path)
