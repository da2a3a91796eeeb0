"""Experiment configuration: parsing, validation, defaults and content hashing.

Configs are JSON documents. Every field is validated before any compute runs;
unknown keys are rejected and all defaults are materialized so the echoed
config fully determines a run together with its seed.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from collections.abc import Mapping
from dataclasses import dataclass, field

from .errors import ConfigError

MODES = ("none", "replay_data", "align_image", "align_feature", "align_combined", "joint")
FEATURE_SOURCES = ("learned_encoder", "distilled", "prior")
PAIRINGS = ("paired", "unpaired")
LIPSCHITZ = ("weight_clip", "gradient_penalty")
ENCODER_ROLES = ("aid_critic", "fool_critic")
DISTANCES = ("frechet", "accuracy_drop")
STREAMS = ("gauss2d", "glyphs8")
SWEEP_AXES = ("alpha", "mode")
ENV_PREFIX = "FEATREPLAY_"

DEFAULT_STEPS = {"gauss2d": 2000, "glyphs8": 4000}
FORCED_ALPHA = {"align_feature": 1.0, "align_image": 0.0}


@dataclass(frozen=True)
class StreamConfig:
    name: str = "gauss2d"
    T: int = 5
    seed: int = 0
    radius: float | None = None
    sigma: float | None = None
    noise: float | None = None

    def params(self) -> dict:
        if self.name == "gauss2d":
            return {"radius": self.radius, "sigma": self.sigma}
        return {"noise": self.noise}

    def to_json(self) -> dict:
        return {"name": self.name, "T": self.T, "seed": self.seed, **self.params()}


@dataclass(frozen=True)
class ReplayConfig:
    mode: str = "align_feature"
    alpha: float | None = 1.0
    lambda_base: float = 1e-3
    feature_source: str = "distilled"
    pairing: str = "paired"
    steps_per_task: int = 2000
    batch_size: int = 64
    critic_steps: int = 5
    lipschitz: str = "weight_clip"
    clip_value: float = 0.05
    gp_weight: float = 10.0
    ac_weight: float = 1.0
    encoder_ac_weight: float = 0.0
    encoder_role: str = "aid_critic"
    feature_critic_steps: int = 1

    @property
    def uses_snapshot(self) -> bool:
        return self.mode not in ("none", "joint")

    @property
    def uses_feature_term(self) -> bool:
        return self.mode in ("align_feature", "align_combined") and self.alpha > 0.0

    @property
    def uses_image_term(self) -> bool:
        return self.mode in ("align_image", "align_combined") and self.alpha < 1.0

    @property
    def blend_alpha(self) -> float:
        return 0.0 if self.alpha is None else float(self.alpha)


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 8
    generator_hidden: tuple[int, ...] = (64, 64)
    critic_hidden: tuple[int, ...] = (64, 64)
    tap_layer: int = 0
    feature_dim: int = 16
    encoder_hidden: tuple[int, ...] = (64, 64)
    feature_critic_hidden: tuple[int, ...] = (64,)
    classifier_hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    prior_fit_steps: int = 1000


@dataclass(frozen=True)
class EvalConfig:
    samples_per_condition: int = 2000
    distance: str = "frechet"
    log_every: int = 50
    classifier_steps: int = 1500


@dataclass(frozen=True)
class SweepConfig:
    axis: str
    values: tuple


@dataclass(frozen=True)
class ExperimentConfig:
    stream: StreamConfig = field(default_factory=lambda: _parse_stream("gauss2d-5"))
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs/default"
    sweep: SweepConfig | None = None

    def to_json(self) -> dict:
        out = {
            "stream": self.stream.to_json(),
            "replay": dataclasses.asdict(self.replay),
            "model": {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self.model).items()},
            "evaluation": dataclasses.asdict(self.evaluation),
            "seed": self.seed,
            "out_dir": self.out_dir,
            "sweep": None if self.sweep is None else {"axis": self.sweep.axis, "values": list(self.sweep.values)},
        }
        return out

    def hash(self) -> str:
        return config_hash(self)

    def with_seed(self, seed: int) -> ExperimentConfig:
        return dataclasses.replace(self, seed=int(seed))

    def with_out_dir(self, out_dir: str) -> ExperimentConfig:
        return dataclasses.replace(self, out_dir=str(out_dir))

    def with_replay(self, **changes) -> ExperimentConfig:
        raw = self.to_json()
        raw["replay"].update(changes)
        return from_dict(raw)


def config_hash(config: ExperimentConfig) -> str:
    """Stable digest of everything that affects results (output location and sweep axis excluded)."""
    payload = config.to_json()
    payload.pop("out_dir")
    payload.pop("sweep")
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------- validation helpers


def _fail(path: str, message: str):
    raise ConfigError(f"{path}: {message}")


def _take(section: dict, key: str, path: str, default, kind, check=None, message: str = ""):
    value = section.pop(key, default)
    if value is None:
        return None
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(f"{path}.{key}", f"expected a number, got {value!r}")
        value = float(value)
    elif kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            else:
                _fail(f"{path}.{key}", f"expected an integer, got {value!r}")
    elif kind is str:
        if not isinstance(value, str):
            _fail(f"{path}.{key}", f"expected a string, got {value!r}")
    elif kind is tuple:
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in value):
            _fail(f"{path}.{key}", f"expected a list of positive integers, got {value!r}")
        value = tuple(value)
    if check is not None and not check(value):
        _fail(f"{path}.{key}", message or f"invalid value {value!r}")
    return value


def _choice(options):
    return lambda v: v in options


def _reject_unknown(section: dict, path: str) -> None:
    if section:
        _fail(path, f"unknown field(s) {sorted(section)}")


def _parse_stream(raw) -> StreamConfig:
    if isinstance(raw, str):
        name, _, count = raw.partition("-")
        raw = {"name": name}
        if count:
            if not count.isdigit():
                _fail("stream", f"cannot parse task count in {raw!r}")
            raw["T"] = int(count)
    if not isinstance(raw, dict):
        _fail("stream", "expected an object or a 'name-T' string")
    s = dict(raw)
    name = _take(s, "name", "stream", "gauss2d", str, _choice(STREAMS), f"must be one of {STREAMS}")
    T = _take(s, "T", "stream", 5 if name == "gauss2d" else 10, int, lambda v: v >= 1, "must be >= 1")
    seed = _take(s, "seed", "stream", 0, int)
    if name == "gauss2d":
        radius = _take(s, "radius", "stream", 4.0, float, lambda v: v > 0, "must be > 0")
        sigma = _take(s, "sigma", "stream", 0.15, float, lambda v: v > 0, "must be > 0")
        if s.pop("noise", None) is not None:
            _fail("stream.noise", "only applies to glyphs8")
        _reject_unknown(s, "stream")
        return StreamConfig(name, T, seed, radius=radius, sigma=sigma)
    if T > 10:
        _fail("stream.T", "glyphs8 defines 10 templates; T must be <= 10")
    noise = _take(s, "noise", "stream", 0.05, float, lambda v: 0 <= v < 0.5, "must lie in [0, 0.5)")
    for key in ("radius", "sigma"):
        if s.pop(key, None) is not None:
            _fail(f"stream.{key}", "only applies to gauss2d")
    _reject_unknown(s, "stream")
    return StreamConfig(name, T, seed, noise=noise)


def _parse_replay(raw: dict, stream: StreamConfig) -> ReplayConfig:
    r = dict(raw)
    p = "replay"
    mode = _take(r, "mode", p, "align_feature", str, _choice(MODES), f"must be one of {MODES}")
    alpha_given = r.get("alpha") is not None
    alpha = _take(r, "alpha", p, None, float, lambda v: 0.0 <= v <= 1.0, "must lie in [0, 1] (the blend range)")
    if mode == "align_combined":
        if not alpha_given:
            _fail("replay.alpha", "required when mode = align_combined")
    elif mode in FORCED_ALPHA:
        forced = FORCED_ALPHA[mode]
        if alpha_given and alpha != forced:
            _fail("replay.alpha", f"may only be set when mode = align_combined ({mode} forces alpha = {forced})")
        alpha = forced
    elif alpha_given:
        _fail("replay.alpha", f"may only be set when mode = align_combined (mode {mode} has no blend)")
    cfg = ReplayConfig(
        mode=mode,
        alpha=alpha,
        lambda_base=_take(r, "lambda_base", p, 1e-3, float, lambda v: v > 0, "must be > 0"),
        feature_source=_take(r, "feature_source", p, "distilled", str, _choice(FEATURE_SOURCES), f"must be one of {FEATURE_SOURCES}"),
        pairing=_take(r, "pairing", p, "paired", str, _choice(PAIRINGS), f"must be one of {PAIRINGS}"),
        steps_per_task=_take(r, "steps_per_task", p, DEFAULT_STEPS[stream.name], int, lambda v: v > 0, "must be > 0"),
        batch_size=_take(r, "batch_size", p, 64, int, lambda v: v >= 2, "must be >= 2"),
        critic_steps=_take(r, "critic_steps", p, 5, int, lambda v: v >= 1, "must be >= 1"),
        lipschitz=_take(r, "lipschitz", p, "weight_clip", str, _choice(LIPSCHITZ), f"must be one of {LIPSCHITZ}"),
        clip_value=_take(r, "clip_value", p, 0.05, float, lambda v: v > 0, "must be > 0"),
        gp_weight=_take(r, "gp_weight", p, 10.0, float, lambda v: v >= 0, "must be >= 0"),
        ac_weight=_take(r, "ac_weight", p, 1.0, float, lambda v: v >= 0, "must be >= 0"),
        encoder_ac_weight=_take(r, "encoder_ac_weight", p, 0.0, float, lambda v: v >= 0, "must be >= 0"),
        encoder_role=_take(r, "encoder_role", p, "aid_critic", str, _choice(ENCODER_ROLES), f"must be one of {ENCODER_ROLES}"),
        feature_critic_steps=_take(r, "feature_critic_steps", p, 1, int, lambda v: v >= 1, "must be >= 1"),
    )
    _reject_unknown(r, p)
    if cfg.pairing == "unpaired" and (cfg.uses_image_term or (cfg.uses_feature_term and cfg.feature_source != "learned_encoder")):
        _fail("replay.pairing", "l2 alignment needs paired replay; unpaired is only valid with the learned_encoder feature source and no image term")
    return cfg


def _parse_model(raw: dict) -> ModelConfig:
    m = dict(raw)
    p = "model"
    pos = lambda v: v > 0  # noqa: E731
    cfg = ModelConfig(
        latent_dim=_take(m, "latent_dim", p, 8, int, pos, "must be > 0"),
        generator_hidden=_take(m, "generator_hidden", p, (64, 64), tuple, lambda v: len(v) >= 1, "needs >= 1 layer"),
        critic_hidden=_take(m, "critic_hidden", p, (64, 64), tuple, lambda v: len(v) >= 1, "needs >= 1 layer"),
        tap_layer=_take(m, "tap_layer", p, 0, int, lambda v: v >= 0, "must be >= 0"),
        feature_dim=_take(m, "feature_dim", p, 16, int, pos, "must be > 0"),
        encoder_hidden=_take(m, "encoder_hidden", p, (64, 64), tuple),
        feature_critic_hidden=_take(m, "feature_critic_hidden", p, (64,), tuple, lambda v: len(v) >= 1, "needs >= 1 layer"),
        classifier_hidden=_take(m, "classifier_hidden", p, (64, 64), tuple),
        lr=_take(m, "lr", p, 1e-4, float, lambda v: v >= 0, "must be >= 0"),
        beta1=_take(m, "beta1", p, 0.5, float, lambda v: 0 <= v < 1, "must lie in [0, 1)"),
        beta2=_take(m, "beta2", p, 0.999, float, lambda v: 0 <= v < 1, "must lie in [0, 1)"),
        prior_fit_steps=_take(m, "prior_fit_steps", p, 1000, int, pos, "must be > 0"),
    )
    _reject_unknown(m, p)
    if cfg.tap_layer >= len(cfg.critic_hidden):
        _fail("model.tap_layer", "must index a critic hidden layer")
    return cfg


def _parse_eval(raw: dict) -> EvalConfig:
    e = dict(raw)
    p = "evaluation"
    cfg = EvalConfig(
        samples_per_condition=_take(e, "samples_per_condition", p, 2000, int, lambda v: v >= 10, "must be >= 10"),
        distance=_take(e, "distance", p, "frechet", str, _choice(DISTANCES), f"must be one of {DISTANCES}"),
        log_every=_take(e, "log_every", p, 50, int, lambda v: v >= 1, "must be >= 1"),
        classifier_steps=_take(e, "classifier_steps", p, 1500, int, lambda v: v >= 1, "must be >= 1"),
    )
    _reject_unknown(e, p)
    return cfg


def _parse_sweep(raw) -> SweepConfig | None:
    if raw is None:
        return None
    if not isinstance(raw, dict):
        _fail("sweep", "expected an object with 'axis' and 'values'")
    s = dict(raw)
    axis = _take(s, "axis", "sweep", None, str, _choice(SWEEP_AXES), f"must be one of {SWEEP_AXES}")
    if axis is None:
        _fail("sweep.axis", "required")
    values = s.pop("values", None)
    _reject_unknown(s, "sweep")
    if not isinstance(values, list) or not values:
        _fail("sweep.values", "must be a non-empty list")
    for v in values:
        if axis == "alpha" and (isinstance(v, bool) or not isinstance(v, (int, float)) or not 0 <= v <= 1):
            _fail("sweep.values", f"alpha values must lie in [0, 1], got {v!r}")
        if axis == "mode" and v not in MODES:
            _fail("sweep.values", f"unknown mode {v!r}")
    return SweepConfig(axis, tuple(float(v) if axis == "alpha" else v for v in values))


REPLAY_KEYS = {f.name for f in dataclasses.fields(ReplayConfig)}
TOP_KEYS = {"stream", "replay", "model", "evaluation", "seed", "out_dir", "sweep"}


def from_dict(raw: Mapping) -> ExperimentConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config: expected a JSON object")
    raw = copy.deepcopy(dict(raw))
    replay_raw = raw.pop("replay", None) or {}
    if not isinstance(replay_raw, dict):
        _fail("replay", "expected an object")
    replay_raw = dict(replay_raw)
    for key in list(raw):
        if key in REPLAY_KEYS:
            if key in replay_raw:
                _fail(key, "given both at top level and inside 'replay'")
            replay_raw[key] = raw.pop(key)
    unknown = set(raw) - TOP_KEYS
    if unknown:
        _fail("config", f"unknown field(s) {sorted(unknown)}")
    stream = _parse_stream(raw.get("stream", "gauss2d-5"))
    replay = _parse_replay(replay_raw, stream)
    model = _parse_model(raw.get("model") or {})
    evaluation = _parse_eval(raw.get("evaluation") or {})
    top = {"seed": raw.get("seed", 0), "out_dir": raw.get("out_dir", "runs/default")}
    seed = _take(top, "seed", "config", 0, int)
    out_dir = _take(top, "out_dir", "config", "runs/default", str)
    sweep = _parse_sweep(raw.get("sweep"))
    if sweep is not None and sweep.axis == "alpha" and replay.mode != "align_combined":
        _fail("sweep.axis", "an alpha sweep needs mode = align_combined")
    return ExperimentConfig(stream, replay, model, evaluation, seed, out_dir, sweep)


def parse_config(text: str) -> ExperimentConfig:
    """Parse and fully validate a JSON config document."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: not valid JSON ({exc})") from exc
    return from_dict(raw)


def apply_env_overrides(raw: dict, environ: Mapping[str, str] | None = None) -> dict:
    """Override config keys from ``FEATREPLAY_<SECTION>__<KEY>`` variables.

    Values are parsed as JSON when possible, otherwise kept as strings.
    ``FEATREPLAY_SEED=3`` and ``FEATREPLAY_REPLAY__ALPHA=0.4`` are typical.
    """
    environ = os.environ if environ is None else environ
    out = copy.deepcopy(raw)
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        path = [_env_key(part) for part in name[len(ENV_PREFIX) :].split("__")]
        try:
            value = json.loads(environ[name])
        except json.JSONDecodeError:
            value = environ[name]
        node = out
        for part in path[:-1]:
            child = node.get(part)
            if isinstance(child, str) and part == "stream":
                child = _parse_stream(child).to_json()
            if not isinstance(child, dict):
                child = {}
            node[part] = child
            node = child
        node[path[-1]] = value
    return out


def _env_key(part: str) -> str:
    # the task count is the one upper-case field name
    return "T" if part == "T" else part.lower()


def sweep_settings(config: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """One (label, config) per sweep value; each has its own hash."""
    if config.sweep is None:
        raise ConfigError("sweep: no sweep axis configured")
    base = config.to_json()
    base["sweep"] = None
    settings = []
    for value in config.sweep.values:
        raw = copy.deepcopy(base)
        if config.sweep.axis == "alpha":
            raw["replay"]["alpha"] = value
            label = f"alpha={value:g}"
        else:
            raw["replay"]["mode"] = value
            # a combined setting keeps an explicit base blend, otherwise blends evenly
            keep = value == "align_combined" and config.replay.mode == "align_combined"
            raw["replay"]["alpha"] = config.replay.alpha if keep else (0.5 if value == "align_combined" else None)
            label = f"mode={value}"
        settings.append((label, from_dict(raw)))
    return settings
