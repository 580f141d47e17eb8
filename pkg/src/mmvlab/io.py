"""Scenario files: JSON-schema validation and conversion to :class:`ScenarioConfig`."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Union

import jsonschema
from jsonschema.exceptions import best_match

from .errors import ConfigError, Degenerate, DimensionMismatch
from .model import (
    DEFAULT_A_MAX,
    DEFAULT_CAP,
    DEFAULT_DELTA,
    ClaimDistribution,
    CoefficientModel,
    FactorDynamics,
    JumpModel,
    ScenarioConfig,
    Tier,
    TimeGrid,
    portfolio_to_generic,
    validate_scenario,
)

PRESETS = ("portfolio_const", "portfolio_vasicek", "reinsurance_discrete", "reinsurance_lognormal")


@lru_cache(maxsize=1)
def schema() -> dict:
    return json.loads(resources.files("mmvlab").joinpath("scenario.schema.json").read_text())


def _pointer(parts) -> str:
    return "".join(f"/{p}" for p in parts)


def _error_pointer(err: jsonschema.ValidationError) -> str:
    base = list(err.absolute_path)
    if err.validator == "required":
        missing = [k for k in err.validator_value if isinstance(err.instance, dict) and k not in err.instance]
        if missing:
            base.append(missing[0])
    elif err.validator == "additionalProperties" and isinstance(err.instance, dict):
        extra = [k for k in err.instance if k not in err.schema.get("properties", {})]
        if extra:
            base.append(extra[0])
    return _pointer(base)


def validate_document(doc: dict) -> None:
    """Raise :class:`ConfigError` with a JSON pointer for the first schema violation."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = list(validator.iter_errors(doc))
    if not errors:
        return
    # a plain missing top-level field is more useful than a composite oneOf failure
    plain = [e for e in errors if e.validator != "oneOf"]
    err = best_match(plain or errors)
    raise ConfigError(err.message, _error_pointer(err))


def preset_path(name: str):
    stem = name[:-5] if name.endswith(".json") else name
    if stem not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}", "")
    return resources.files("mmvlab").joinpath("presets", f"{stem}.json")


def read_document(source: Union[str, Path, dict]) -> dict:
    """Load a scenario document from a dict, a file path, or a preset name."""
    if isinstance(source, dict):
        return source
    path = Path(source)
    if path.exists():
        text = path.read_text()
    else:
        text = preset_path(path.name).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", "") from exc


def _factor(d: dict) -> FactorDynamics:
    return FactorDynamics(d["kappa_f"], d["m_f"], d["v_f"], d["f_0"])


def _model(doc: dict) -> CoefficientModel:
    if "market" in doc:
        m = doc["market"]
        r = _factor(m["r"]) if isinstance(m["r"], dict) else float(m["r"])
        try:
            return portfolio_to_generic(r, m["mu"], m["sigma"], delta=m.get("delta", DEFAULT_DELTA),
                                        cap=m.get("cap", DEFAULT_CAP), a_max=m.get("a_max", DEFAULT_A_MAX))
        except DimensionMismatch as exc:
            raise ConfigError(str(exc), "/market/sigma") from exc
        except Degenerate as exc:
            raise ConfigError(str(exc), "/market/sigma") from exc
    m = doc["model"]
    kwargs = dict(B=m["b"], C=m["c"], D=m["d"], delta=m.get("delta", DEFAULT_DELTA),
                  cap=m.get("cap", DEFAULT_CAP), a_max=m.get("a_max", DEFAULT_A_MAX))
    try:
        if m["tier"] == Tier.MARKOV_FACTOR.value:
            return CoefficientModel(Tier.MARKOV_FACTOR, factor=_factor(m), **kwargs)
        return CoefficientModel(Tier.DETERMINISTIC, A=m["a"], **kwargs)
    except DimensionMismatch as exc:
        raise ConfigError(str(exc), "/model") from exc


def _jump(j: dict) -> JumpModel:
    cd = j["claim_distribution"]
    try:
        if cd["kind"] == "discrete":
            claims = ClaimDistribution("discrete", atoms=tuple(map(tuple, cd["atoms"])))
        else:
            claims = ClaimDistribution("lognormal_trunc", mu=cd["mu"], sigma=cd["sigma"], y_max=cd.get("y_max"))
    except ValueError as exc:
        raise ConfigError(str(exc), "/jump/claim_distribution") from exc
    return JumpModel(float(j["intensity"]), claims, float(j["premium_loading"]), float(j.get("drift_offset", 0.0)))


def load_scenario(source: Union[str, Path, dict], *, n_paths=None, steps=None, seed=None,
                  validate: bool = True) -> ScenarioConfig:
    """Read, schema-check and build a scenario; keyword overrides replace file values.

    With ``validate`` the model-level rules of :func:`validate_scenario` are
    applied too and the first violation is raised as :class:`ConfigError`.
    """
    doc = read_document(source)
    validate_document(doc)
    if steps is not None and int(steps) < 2:
        raise ConfigError(f"steps={steps} must be >= 2", "/grid/steps")
    grid = TimeGrid(float(doc["grid"]["horizon"]), int(steps if steps is not None else doc["grid"]["steps"]))
    cfg = ScenarioConfig(
        x=float(doc["x"]),
        theta=float(doc["theta"]),
        grid=grid,
        model=_model(doc),
        jump=_jump(doc["jump"]) if "jump" in doc else None,
        n_paths=int(n_paths if n_paths is not None else doc["n_paths"]),
        seed=int(seed if seed is not None else doc["seed"]),
        basis_degree=int(doc.get("basis", {}).get("degree", 3)),
    )
    if validate:
        report = validate_scenario(cfg)
        if not report.ok:
            v = report.violations[0]
            raise ConfigError(f"{v.rule}: {v.detail}", v.location)
    return cfg
