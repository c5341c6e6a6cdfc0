from __future__ import annotations

import re
import tomllib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Annotated, Any, Literal

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PlainSerializer,
    PlainValidator,
    ValidationError,
    field_validator,
    model_validator,
)

from .cache import ContentCache, cached_universal_word
from .errors import ConfigError, TargetOutOfRangeError
from .log import get_logger
from .scale import DEFAULT_FACTOR_CAP, ControlParams, Scale, build_scale, decay_params, minimal_factors
from .sft import (
    MAX_WINDOW_CODES,
    Potential,
    Sft,
    average_range,
    build_potential,
    build_sft,
    sft_from_forbidden,
    shift_potential,
)
from .synth import core_span

logger = get_logger(__name__)


def _parse_fraction(value: object) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise ValueError("expected an integer or a 'p/q' string")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError):
            raise ValueError(f"{value!r} is not an exact fraction 'p/q'") from None
    # Floats are rejected so every value stays exact.
    raise ValueError("expected an integer or a 'p/q' string")


FractionValue = Annotated[
    Fraction,
    PlainValidator(_parse_fraction),
    PlainSerializer(str, return_type=str),
]


class SftSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", str_strip_whitespace=True)

    alphabet_size: int = Field(default=2, ge=2, le=255, description="Number of symbols")
    forbidden: list[str] = Field(default_factory=list, description="Forbidden 2-words, e.g. '11' or '1,1'")
    matrix: list[list[int]] | None = Field(default=None, description="0/1 transition matrix")

    @model_validator(mode="after")
    def _one_declaration(self) -> SftSettings:
        if self.matrix is not None and self.forbidden:
            raise ValueError("give either forbidden words or a matrix, not both")
        if self.matrix is not None:
            if len(self.matrix) != self.alphabet_size or any(len(r) != self.alphabet_size for r in self.matrix):
                raise ValueError(f"matrix must be {self.alphabet_size}x{self.alphabet_size}")
            if any(x not in (0, 1) for row in self.matrix for x in row):
                raise ValueError("matrix entries must be 0 or 1")
        return self


class PotentialSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", str_strip_whitespace=True, arbitrary_types_allowed=True)

    depth: int = Field(default=1, ge=1, le=8)
    values: dict[str, FractionValue] = Field(..., description="Window (e.g. '0' or '0,1') -> 'p/q'")
    default: FractionValue | None = None

    @field_validator("values")
    @classmethod
    def _require_values(cls, value: dict[str, Fraction]) -> dict[str, Fraction]:
        if not value:
            raise ValueError("must not be empty")
        return value


class ScaleSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", str_strip_whitespace=True)

    t0: int = Field(default=3, ge=1, description="Base block length T_0")
    factors: list[int] | Literal["auto"] = "auto"
    factor_cap: int = Field(default=DEFAULT_FACTOR_CAP, ge=3)


class ControlSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", str_strip_whitespace=True, arbitrary_types_allowed=True)

    alpha0: FractionValue = Fraction(1)
    alpha_decay: FractionValue = Fraction(1, 5)
    beta_ratio: FractionValue = Fraction(3, 8)
    density_depths: list[int] | None = None
    max_density_depth: int = Field(default=3, ge=0)

    @field_validator("alpha0")
    @classmethod
    def _positive(cls, value: Fraction) -> Fraction:
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @field_validator("alpha_decay")
    @classmethod
    def _decay(cls, value: Fraction) -> Fraction:
        if not 0 < value < Fraction(1, 4):
            raise ValueError("must lie in (0, 1/4)")
        return value

    @field_validator("beta_ratio")
    @classmethod
    def _beta(cls, value: Fraction) -> Fraction:
        if not Fraction(1, 4) < value < Fraction(1, 2):
            raise ValueError("must lie in (1/4, 1/2)")
        return value

    def depths(self, depth: int) -> tuple[int, ...]:
        """m_0..m_depth: the explicit list, or m_0 = 0 and m_n = min(n + 1, max_density_depth)."""
        if self.density_depths is not None:
            if len(self.density_depths) < depth + 1:
                raise ConfigError(
                    f"need {depth + 1} entries, got {len(self.density_depths)}",
                    field="control.density_depths",
                )
            return tuple(self.density_depths[: depth + 1])
        return (0,) + tuple(min(n + 1, self.max_density_depth) for n in range(1, depth + 1))


class OutputSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", str_strip_whitespace=True)

    directory: Path = Path("out")
    cache: bool = True


class VerifySettings(BaseModel):
    model_config = ConfigDict(extra="forbid", str_strip_whitespace=True)

    exhaustive: bool = True
    sample_stride: int = Field(default=16, ge=1)
    workers: int = Field(default=4, ge=1, le=64)
    claims: bool = True

    @property
    def stride(self) -> int:
        return 1 if self.exhaustive else self.sample_stride


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", str_strip_whitespace=True, arbitrary_types_allowed=True)

    sft: SftSettings = Field(default_factory=SftSettings)
    potential: PotentialSettings
    target: FractionValue = Fraction(0)
    depth: int = Field(default=3, ge=0, le=12)
    scale: ScaleSettings = Field(default_factory=ScaleSettings)
    control: ControlSettings = Field(default_factory=ControlSettings)
    output: OutputSettings = Field(default_factory=OutputSettings)
    verify: VerifySettings = Field(default_factory=VerifySettings)

    @model_validator(mode="after")
    def _explicit_factors_cover_depth(self) -> RunConfig:
        factors = self.scale.factors
        if factors != "auto" and len(factors) < self.depth:
            raise ValueError(f"scale.factors has {len(factors)} entries, depth {self.depth} needs {self.depth}")
        return self

    @model_validator(mode="after")
    def _potential_table_fits(self) -> RunConfig:
        windows = self.sft.alphabet_size**self.potential.depth
        if windows > MAX_WINDOW_CODES:
            raise ValueError(
                f"potential depth {self.potential.depth} over {self.sft.alphabet_size} symbols "
                f"needs {windows} windows, more than {MAX_WINDOW_CODES}"
            )
        return self


DEMO_CONFIG: dict[str, Any] = {
    "sft": {"alphabet_size": 2},
    "potential": {"depth": 1, "values": {"0": "1", "1": "-1"}},
    "target": "0",
    "depth": 3,
    "scale": {"t0": 3, "factors": "auto"},
    "control": {"alpha0": "1", "alpha_decay": "1/5", "beta_ratio": "3/8", "max_density_depth": 3},
}


def demo_config(**overrides: Any) -> RunConfig:
    return parse_config({**DEMO_CONFIG, **overrides})


_LINE = re.compile(r"line (\d+)")


def _field_path(loc: tuple[int | str, ...]) -> str:
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += f".{part}" if out else str(part)
    return out


def parse_config(raw: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(first["msg"], field=_field_path(tuple(first["loc"]))) from exc


def load_config(path: Path) -> RunConfig:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        found = _LINE.search(str(exc))
        raise ConfigError(str(exc), line=int(found.group(1)) if found else None) from exc
    config = parse_config(raw)
    logger.debug("config.loaded", path=str(path), depth=config.depth)
    return config


def config_document(config: RunConfig) -> dict[str, Any]:
    return config.model_dump(mode="json")


@dataclass(frozen=True, slots=True)
class ResolvedRun:
    """A config turned into library objects, all inequalities checked."""

    config: RunConfig
    sft: Sft
    potential: Potential
    params: ControlParams
    scale: Scale
    depth: int
    universal_words: dict[int, bytes]

    @property
    def target(self) -> Fraction:
        return self.params.target


def build_config_sft(settings: SftSettings) -> Sft:
    if settings.matrix is not None:
        return build_sft(settings.alphabet_size, settings.matrix)
    return sft_from_forbidden(settings.alphabet_size, settings.forbidden)


def resolve(config: RunConfig, *, cache: ContentCache | None = None) -> ResolvedRun:
    """Build the SFT, potential, params and scale; auto factors come from ``minimal_factors``."""
    sft = build_config_sft(config.sft)
    potential = build_potential(sft, config.potential.depth, config.potential.values, config.potential.default)
    low, high = average_range(sft, potential)
    if not low < config.target < high:
        raise TargetOutOfRangeError(f"target {config.target} is not inside ({low}, {high})")

    depth = config.depth
    params = decay_params(
        alpha0=config.control.alpha0,
        decay=config.control.alpha_decay,
        beta_ratio=config.control.beta_ratio,
        density_depths=config.control.depths(depth),
        target=config.target,
        depth=depth,
    )
    if params.density_depths[0] != 0:
        raise ConfigError("level 0 cannot carry density", field="control.density_depths[0]")

    words = {m: cached_universal_word(cache, sft, m) for m in sorted(set(params.density_depths)) if m > 0}
    t0 = config.scale.t0
    if config.scale.factors == "auto":
        lengths = [
            core_span(sft, m, potential.depth, t0, words.get(m)) for m in params.density_depths
        ]
        phi_range = shift_potential(potential, config.target).max_abs
        factors = minimal_factors(params, phi_range, lengths, t0=t0, cap=config.scale.factor_cap)
    else:
        factors = tuple(config.scale.factors[:depth])
    scale = build_scale(t0, factors)
    logger.info(
        "config.resolved",
        depth=depth,
        t0=t0,
        factors=list(scale.factors),
        target=str(config.target),
    )
    return ResolvedRun(
        config=config,
        sft=sft,
        potential=potential,
        params=params,
        scale=scale,
        depth=depth,
        universal_words=words,
    )
