"""Declarative campaign configuration (YAML or JSON)."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .relaxer import RelaxationConfig, parse_schedule
from .workbench import DEFAULT_COMPOSITION, MethodRecipe, StructureGenSpec


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Species(_Strict):
    count: int = Field(ge=1)
    charge: float


class Generation(_Strict):
    edge_choices: list[float] = [4.0, 6.0, 8.0, 10.0, 12.0]
    composition: dict[str, Species] = Field(
        default_factory=lambda: {k: Species(count=c, charge=q)
                                 for k, (c, q) in DEFAULT_COMPOSITION.items()})
    grid_spacing: float = Field(1.0, gt=0)
    seed: int = 0
    count: int = Field(20, ge=1)

    def spec(self) -> StructureGenSpec:
        return StructureGenSpec(
            edge_choices=tuple(self.edge_choices),
            composition={k: (v.count, v.charge) for k, v in self.composition.items()},
            grid_spacing=self.grid_spacing, seed=self.seed)


class Recipe(_Strict):
    optimizer: Literal["gd", "cg"]
    schedule: str
    label: Optional[str] = None

    @field_validator("schedule")
    @classmethod
    def _schedule(cls, v: str) -> str:
        parse_schedule(v)
        return v

    def recipe(self) -> MethodRecipe:
        return MethodRecipe(self.optimizer, parse_schedule(self.schedule), self.label or "")


class Relaxation(_Strict):
    tol: float = Field(1e-3, gt=0)
    max_iter: int = Field(50000, ge=1)
    walltime: Optional[float] = Field(None, gt=0)
    strain_reset_period: Optional[int] = Field(None, ge=1)
    accuracy: float = Field(1e-17, gt=0, lt=1)
    catastrophe_window: int = Field(100, ge=1)
    catastrophe_distance: float = Field(0.1, ge=0)
    alpha_strain_terms: bool = True
    backend: Literal["compiled", "numpy"] = "compiled"

    def config(self) -> RelaxationConfig:
        return RelaxationConfig(**self.model_dump())


class CampaignConfig(_Strict):
    """One document describing structures, recipes, relaxation settings and outputs.

    Either ``generation`` or ``structures`` (CIF paths) supplies the inputs.
    Relative paths are resolved against the config file's directory.
    """

    generation: Optional[Generation] = None
    structures: list[str] = []
    charges: dict[str, float] = {}
    potential: Optional[str] = None
    recipes: list[Recipe] = Field(min_length=1)
    relaxation: Relaxation = Relaxation()
    group_size: int = Field(40, ge=1)
    workers: int = Field(1, ge=1)
    output_dir: Optional[str] = None
    lambdas: list[float] = [0.0, 0.5, 1.0]
    formats: list[Literal["csv", "json"]] = ["csv", "json"]

    @model_validator(mode="after")
    def _inputs(self):
        if self.generation is None and not self.structures:
            self.generation = Generation()
        labels = [r.recipe().label for r in self.recipes]
        if len(set(labels)) != len(labels):
            raise ValueError("recipe labels must be unique")
        if any(not 0 <= lam <= 1 for lam in self.lambdas):
            raise ValueError("lambdas must lie in [0, 1]")
        return self


def load_campaign(path) -> tuple[CampaignConfig, Path]:
    """Parse and validate a campaign file; returns the config and its directory."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise OSError(f"could not read {path}: {exc.strerror or exc}") from exc
    except yaml.YAMLError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    return CampaignConfig.model_validate(data), path.parent


def schema_summary() -> str:
    """Short field listing used in usage-error messages."""
    lines = ["campaign fields:"]
    for name, f in CampaignConfig.model_fields.items():
        lines.append(f"  {name}: {getattr(f.annotation, '__name__', f.annotation)}")
    for model in (Generation, Recipe, Relaxation):
        lines.append(f"{model.__name__.lower()} fields: " + ", ".join(model.model_fields))
    return "\n".join(lines)
