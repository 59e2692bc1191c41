"""Run configuration: YAML file, command-line flags and environment overrides.

Precedence, highest first: environment, flags, file, defaults.  A service
without an endpoint URL is served by its in-process mock.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import yaml

from xplan.annotate import DEFAULT_SIMPLE_FRACTIONS, DEFAULT_SOURCE_RATIO, SourceWeights
from xplan.backends import (
    HttpEditor,
    HttpEmbedder,
    HttpPlanner,
    HttpSegmenter,
    HttpVerifier,
    MockEditor,
    MockEmbedder,
    MockPlanner,
    MockSegmenter,
    MockVerifier,
    ServiceClient,
    VERIFIER_PROMPT,
)
from xplan.masks import DEFAULT_DILATION, DEFAULT_MIN_BOX_AREA
from xplan.orchestrator import Backends, PipelineConfig, VerifyPolicy
from xplan.router import PROFILES, routing_profile

SERVICES = ("planner", "editor", "segmenter", "verifier", "embedder")

DEFAULTS: dict[str, Any] = {
    "endpoints": {
        "planner": None,
        "editor": None,
        "editors": {},
        "segmenter": None,
        "verifier": None,
        "embedder": None,
        "token": None,
        "timeout": 60.0,
    },
    "routing": {"profile": "bag-of-models"},
    "verify": {"enabled": False, "threshold": 3, "max_retries": 1, "prompt": VERIFIER_PROMPT},
    "refine": {"dilation": DEFAULT_DILATION, "min_box_area": DEFAULT_MIN_BOX_AREA},
    "sources": {
        "weights": [list(e) for e in DEFAULT_SOURCE_RATIO],
        "simple_fractions": dict(DEFAULT_SIMPLE_FRACTIONS),
    },
    "seed": 0,
    "jobs": 1,
    "paths": {"out_dir": "xplan-out"},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(doc: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


@dataclass
class Config:
    data: dict

    @classmethod
    def load(
        cls,
        path: Optional[Union[str, Path]] = None,
        flags: Optional[Mapping[str, Any]] = None,
        environ: Optional[Mapping[str, str]] = None,
    ) -> "Config":
        """Build a config from file, then dotted-key ``flags``, then env."""
        data = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
            except (OSError, yaml.YAMLError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            if not isinstance(loaded, Mapping):
                raise ConfigError(f"config {path} must be a mapping at top level")
            data = _merge(data, loaded)
        for key, value in (flags or {}).items():
            if value is not None:
                _set_path(data, key, value)
        env = os.environ if environ is None else environ
        for service in SERVICES:
            url = env.get(f"XPLAN_{service.upper()}_URL")
            if url:
                data["endpoints"][service] = url
        if env.get("XPLAN_TOKEN"):
            data["endpoints"]["token"] = env["XPLAN_TOKEN"]
        cfg = cls(data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        d = self.data
        for name in ("dilation", "min_box_area"):
            v = d["refine"][name]
            if not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
                raise ConfigError(f"refine.{name} must lie in [0, 1], got {v!r}")
        if d["refine"]["min_box_area"] == 0:
            raise ConfigError("refine.min_box_area must be positive")
        for tag, f in d["sources"]["simple_fractions"].items():
            if not isinstance(f, (int, float)) or not 0.0 <= f <= 1.0:
                raise ConfigError(f"sources.simple_fractions.{tag} must lie in [0, 1], got {f!r}")
        if d["routing"]["profile"] not in PROFILES:
            raise ConfigError(
                f"routing.profile {d['routing']['profile']!r} is not one of {sorted(PROFILES)}"
            )
        try:
            self.policy()
            self.source_weights()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if int(d["jobs"]) < 1:
            raise ConfigError("jobs must be >= 1")

    # -- typed views --------------------------------------------------------

    def policy(self) -> VerifyPolicy:
        v = self.data["verify"]
        return VerifyPolicy(bool(v["enabled"]), int(v["threshold"]), int(v["max_retries"]))

    def routing(self):
        return routing_profile(self.data["routing"]["profile"])

    def pipeline(self, region_mode: str = "refined") -> PipelineConfig:
        return PipelineConfig(
            policy=self.policy(),
            routing=self.routing(),
            seed0=int(self.data["seed"]),
            dilation=float(self.data["refine"]["dilation"]),
            min_box_area=float(self.data["refine"]["min_box_area"]),
            region_mode=region_mode,
        )

    def source_weights(self) -> SourceWeights:
        return SourceWeights(tuple((t, w) for t, w in self.data["sources"]["weights"]))

    @property
    def simple_fractions(self) -> dict[str, float]:
        return dict(self.data["sources"]["simple_fractions"])

    @property
    def jobs(self) -> int:
        return int(self.data["jobs"])

    def fingerprint(self) -> str:
        doc = json.dumps(self.data, sort_keys=True, default=str)
        return hashlib.sha256(doc.encode()).hexdigest()

    # -- service construction ----------------------------------------------

    def _client(self, url: str) -> ServiceClient:
        ep = self.data["endpoints"]
        return ServiceClient(url, timeout=float(ep["timeout"]), token=ep.get("token"))

    def planner(self):
        url = self.data["endpoints"]["planner"]
        return HttpPlanner(self._client(url)) if url else MockPlanner()

    def segmenter(self):
        url = self.data["endpoints"]["segmenter"]
        return HttpSegmenter(self._client(url)) if url else MockSegmenter()

    def verifier(self):
        url = self.data["endpoints"]["verifier"]
        if url:
            return HttpVerifier(self._client(url), self.data["verify"]["prompt"])
        return MockVerifier()

    def embedder(self):
        url = self.data["endpoints"]["embedder"]
        return HttpEmbedder(self._client(url)) if url else MockEmbedder()

    def editors(self) -> dict:
        ep = self.data["endpoints"]
        default_url = ep.get("editor")
        per_backend = dict(ep.get("editors") or {})
        out = {}
        for backend in self.routing().backends():
            url = per_backend.get(backend, default_url)
            out[backend] = HttpEditor(self._client(url)) if url else MockEditor()
        return out

    def backends(self) -> Backends:
        return Backends(self.editors(), self.segmenter(), self.verifier())
