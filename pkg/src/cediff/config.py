"""Experiment configuration: defaults, validation and provenance digest.

Configs are YAML (JSON is accepted too). Every key must appear in
``DEFAULTS``; free-form blocks (the mixture definition) are listed in
``_FREE_FORM`` and validated by their consumers.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .errors import ConfigError

DEFAULTS = {
    "schedule": {"beta_min": 0.1, "beta_max": 20.0, "t_min": 1e-3, "n_steps": 1000},
    "score_model": {
        "source": "analytic",
        "mixture": None,
        "denoiser": {"hidden": 128, "depth": 3, "time_dim": 64, "epochs": 200, "batch_size": 256,
                     "lr": 1e-3, "warmup_steps": 200, "grad_clip": 1.0, "p_uncond": 0.3},
    },
    "data": {
        "source": "mixture",
        "n_train": 2000,
        "n_test": 2000,
        "idx": {"train_images": None, "train_labels": None, "test_images": None, "test_labels": None,
                "max_train": None, "max_test": None},
    },
    "classifier": {"epsilons": [0.0], "pgd_steps": 8, "dropout": 0.0, "robust_dropout": 0.0, "hidden": 64,
                   "depth": 2, "epochs": 30, "batch_size": 128, "lr": 1e-3, "epsilon_ramp_epochs": 0},
    "neighborhood": {"variant": "boltzmann", "sigma_ce": 0.2},
    "guidance": {"w": 15.0},
    "boltzmann_sigma_t_scaling": True,
    "sampler": {"n_steps": None, "seed": None, "clip": None, "chunk_size": 512},
    "ce": {
        "n_samples": 1000,
        "n_per_class": 2,
        "compare_variant": "gaussian",
        "include_same_class": False,
        "l0_threshold": 0.02,
        "robust": {"n_samples": 200, "step_size": 0.05, "conf_threshold": 0.9, "max_steps": 200, "clip": None},
        "ce_from_ce": {"n_per_class": 1, "bins": 20},
        "classifier": {"n_samples": 200, "n_per_class": 1},
    },
    "evaluation": {"robustness": True, "ce_quality": True, "variant_comparison": True, "correlation": True,
                   "ce_accuracy": True, "source_prediction": True, "ce_from_ce": True, "ce_classifier": True,
                   "bins": 20},
    "io": {"seed": 0, "out": None},
}

_FREE_FORM = {"score_model.mixture"}
_NULLABLE = {
    "score_model.mixture": dict, "sampler.n_steps": int, "sampler.seed": int, "sampler.clip": list,
    "ce.compare_variant": str, "ce.robust.clip": list, "io.out": str,
    "data.idx.train_images": str, "data.idx.train_labels": str, "data.idx.test_images": str,
    "data.idx.test_labels": str, "data.idx.max_train": int, "data.idx.max_test": int,
}
_PATHS = ("data.idx.train_images", "data.idx.train_labels", "data.idx.test_images", "data.idx.test_labels")
VARIANTS = ("gaussian", "boltzmann")


class ExperimentConfig:
    """Resolved, validated configuration (a nested dict with dotted access)."""

    def __init__(self, data: dict):
        self.data = data

    def __getitem__(self, dotted: str):
        node = self.data
        for part in dotted.split("."):
            node = node[part]
        return node

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True, default_flow_style=False)

    def canonical(self) -> str:
        """Canonical JSON of everything except the output location."""
        d = copy.deepcopy(self.data)
        d["io"].pop("out", None)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = copy.deepcopy(self.data)
        d["io"]["seed"] = int(seed)
        return ExperimentConfig(d)


def _merge(defaults, given, prefix, problems):
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        name = f"{prefix}{key}"
        if key not in defaults:
            problems.append(f"unknown key {name!r}")
        elif name in _FREE_FORM:
            out[key] = copy.deepcopy(val)
        elif isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                problems.append(f"{name} must be a mapping")
            else:
                out[key] = _merge(defaults[key], val, name + ".", problems)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _walk(d, prefix=""):
    for k, v in d.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict) and name not in _FREE_FORM:
            yield from _walk(v, name + ".")
        else:
            yield name, v


def _leaf_types(problems, resolved):
    defaults = dict(_walk(DEFAULTS))
    for name, val in _walk(resolved):
        if name not in defaults:
            continue
        want = _NULLABLE.get(name, type(defaults[name]))
        if val is None:
            if name not in _NULLABLE:
                problems.append(f"{name} must not be null")
            continue
        if want is float and isinstance(val, int) and not isinstance(val, bool):
            continue
        if want is not bool and isinstance(val, bool) or not isinstance(val, want):
            problems.append(f"{name} must be of type {want.__name__}, got {type(val).__name__}")


def _check(c: dict, problems: list, base: Path):
    def positive(name, value, integer=False):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0:
            problems.append(f"{name} must be positive")
        elif integer and int(value) != value:
            problems.append(f"{name} must be an integer")

    s = c["schedule"]
    if not 0 < s["beta_min"] < s["beta_max"]:
        problems.append("schedule requires 0 < beta_min < beta_max")
    if not 0 < s["t_min"] < 1:
        problems.append("schedule.t_min must lie in (0, 1)")
    positive("schedule.n_steps", s["n_steps"], True)

    sm = c["score_model"]
    if sm["source"] not in ("analytic", "trained"):
        problems.append("score_model.source must be 'analytic' or 'trained'")
    needs_mixture = sm["source"] == "analytic" or c["data"]["source"] == "mixture"
    if needs_mixture and sm["mixture"] is None:
        problems.append("score_model.mixture is required for analytic scores or mixture data")
    if sm["source"] == "analytic" and c["data"]["source"] != "mixture":
        problems.append("analytic scores need data.source = 'mixture'")
    if not 0 <= sm["denoiser"]["p_uncond"] <= 1:
        problems.append("score_model.denoiser.p_uncond must lie in [0, 1]")

    d = c["data"]
    if d["source"] not in ("mixture", "idx"):
        problems.append("data.source must be 'mixture' or 'idx'")
    positive("data.n_train", d["n_train"], True)
    positive("data.n_test", d["n_test"], True)
    if d["source"] == "idx":
        for key in _PATHS:
            leaf = key.split(".")[-1]
            p = d["idx"][leaf]
            if p is None:
                problems.append(f"{key} is required when data.source = 'idx'")
                continue
            full = (base / p).resolve()
            if not full.is_file():
                problems.append(f"{key}: file not found: {full}")
            d["idx"][leaf] = str(full)

    k = c["classifier"]
    eps = k["epsilons"]
    if not eps or not all(isinstance(e, (int, float)) and not isinstance(e, bool) and e >= 0 for e in eps):
        problems.append("classifier.epsilons must be a nonempty list of non-negative numbers")
    elif len(set(eps)) != len(eps):
        problems.append("classifier.epsilons must not repeat")
    else:
        k["epsilons"] = [float(e) for e in eps]
    for name in ("pgd_steps", "hidden", "depth", "epochs", "batch_size"):
        positive(f"classifier.{name}", k[name], True)
    for name in ("dropout", "robust_dropout"):
        if not 0 <= k[name] < 1:
            problems.append(f"classifier.{name} must lie in [0, 1)")

    if c["neighborhood"]["variant"] not in VARIANTS:
        problems.append(f"neighborhood.variant must be one of {VARIANTS}")
    positive("neighborhood.sigma_ce", c["neighborhood"]["sigma_ce"])
    if c["guidance"]["w"] < 0:
        problems.append("guidance.w must be non-negative")
    cv = c["ce"]["compare_variant"]
    if cv is not None and (cv not in VARIANTS or cv == c["neighborhood"]["variant"]):
        problems.append("ce.compare_variant must be null or the other neighborhood variant")

    sp = c["sampler"]
    if sp["n_steps"] is not None:
        positive("sampler.n_steps", sp["n_steps"], True)
    for key, clip in (("sampler.clip", sp["clip"]), ("ce.robust.clip", c["ce"]["robust"]["clip"])):
        if clip is not None and (len(clip) != 2 or not clip[0] < clip[1]):
            problems.append(f"{key} must be [low, high] with low < high")
    positive("sampler.chunk_size", sp["chunk_size"], True)

    ce = c["ce"]
    for name in ("n_samples", "n_per_class"):
        positive(f"ce.{name}", ce[name], True)
    positive("ce.l0_threshold", ce["l0_threshold"])
    positive("ce.robust.n_samples", ce["robust"]["n_samples"], True)
    positive("ce.robust.step_size", ce["robust"]["step_size"])
    if not 0 < ce["robust"]["conf_threshold"] < 1:
        problems.append("ce.robust.conf_threshold must lie in (0, 1)")
    positive("ce.ce_from_ce.n_per_class", ce["ce_from_ce"]["n_per_class"], True)
    positive("ce.ce_from_ce.bins", ce["ce_from_ce"]["bins"], True)
    positive("ce.classifier.n_samples", ce["classifier"]["n_samples"], True)
    positive("ce.classifier.n_per_class", ce["classifier"]["n_per_class"], True)
    positive("evaluation.bins", c["evaluation"]["bins"], True)


def resolve(raw: dict, base_dir=".") -> ExperimentConfig:
    """Merge ``raw`` over the defaults and validate; raises ConfigError listing every problem."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    problems: list[str] = []
    c = _merge(DEFAULTS, raw, "", problems)
    if not problems:
        _leaf_types(problems, c)
    if not problems:
        _check(c, problems, Path(base_dir))
    if problems:
        raise ConfigError("invalid configuration", problems)
    if c["score_model"]["mixture"] is not None:
        from .toy import mixture_from_config

        try:
            mixture_from_config(c["score_model"]["mixture"])
        except ConfigError as exc:
            raise ConfigError("invalid configuration", [f"score_model.mixture: {exc}"]) from None
    return ExperimentConfig(c)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    return resolve(raw or {}, path.parent)
