"""One JSON document describing a run, with a stable content hash."""

import hashlib
import json
from dataclasses import dataclass, field, fields, replace

from .errors import DomainError
from .flow import OcclusionConfig
from .gaze import AggregationConfig, SmoothingConfig
from .model import ModelConfig
from .pipeline import MODES, PreprocessConfig
from .synth import SceneSpec

SECTIONS = ("scene", "smoothing", "aggregation", "occlusion", "patch_px", "mode", "model", "paths")
PREPROCESS_KEYS = ("smoothing", "aggregation", "occlusion", "patch_px", "mode")


def _strict(cls, data, where):
    if not isinstance(data, dict):
        raise DomainError(f"{where} must be a JSON object")
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise DomainError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise DomainError(f"bad {where}: {exc}") from None


def digest(obj):
    """SHA-256 of the canonical JSON encoding of ``obj``."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True)
class RunConfig:
    scene: SceneSpec = SceneSpec()
    smoothing: SmoothingConfig = SmoothingConfig()
    aggregation: AggregationConfig = AggregationConfig()
    occlusion: OcclusionConfig = OcclusionConfig()
    patch_px: int = 8
    mode: str = "aggregated"
    model: ModelConfig = ModelConfig()
    paths: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.patch_px < 1:
            raise DomainError("patch_px must be positive")

    def preprocess(self):
        return PreprocessConfig(self.smoothing, self.aggregation, self.occlusion, self.patch_px, self.mode)

    def with_preprocess(self, cfg):
        return replace(self, smoothing=cfg.smoothing, aggregation=cfg.aggregation, occlusion=cfg.occlusion,
                       patch_px=cfg.patch_px, mode=cfg.mode)

    def to_json(self):
        return {
            "scene": self.scene.to_json(),
            "smoothing": {"sigma": self.smoothing.sigma},
            "aggregation": {"window_ms": self.aggregation.window_ms, "max_points": self.aggregation.max_points},
            "occlusion": {"eps": self.occlusion.eps, "eta": self.occlusion.eta},
            "patch_px": self.patch_px,
            "mode": self.mode,
            "model": self.model.to_json(),
            "paths": dict(self.paths),
        }

    @classmethod
    def from_json(cls, data):
        if not isinstance(data, dict):
            raise DomainError("run config must be a JSON object")
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise DomainError(f"unknown run config keys {sorted(unknown)}")
        kw = {}
        if "scene" in data:
            kw["scene"] = _strict(SceneSpec, data["scene"], "scene")
        if "smoothing" in data:
            kw["smoothing"] = _strict(SmoothingConfig, data["smoothing"], "smoothing")
        if "aggregation" in data:
            kw["aggregation"] = _strict(AggregationConfig, data["aggregation"], "aggregation")
        if "occlusion" in data:
            kw["occlusion"] = _strict(OcclusionConfig, data["occlusion"], "occlusion")
        if "model" in data:
            kw["model"] = _strict(ModelConfig, data["model"], "model")
        for key in ("patch_px", "mode", "paths"):
            if key in data:
                kw[key] = data[key]
        return cls(**kw)

    @classmethod
    def load(cls, data):
        """Accept a full run config or a bare scene spec object."""
        if isinstance(data, dict) and data and not set(data) & set(SECTIONS):
            return cls(scene=_strict(SceneSpec, data, "scene spec"))
        return cls.from_json(data)

    def content_hash(self):
        """Hash of everything but the paths, which do not change results."""
        doc = self.to_json()
        del doc["paths"]
        return digest(doc)

    def preprocess_hash(self):
        doc = self.to_json()
        return digest({k: doc[k] for k in PREPROCESS_KEYS})
