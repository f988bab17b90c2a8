"""Pipeline configuration: every threshold has a key, readable from a plain
`key = value` file and overridable with `--set key=value`."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .errors import ParseError, ValidationError


@dataclass
class PipelineConfig:
    # robust estimation
    essential_inlier_px: float = 4.0
    pnp_inlier_px: float = 8.0
    min_init_parallax_deg: float = 1.5
    min_init_inliers: int = 15
    min_reg_inliers: int = 12
    ransac_confidence: float = 0.9999
    ransac_max_iters: int = 10000
    init_pnp_fallback: bool = True
    # prior calibration
    depth_sigma_floor: float = 0.02
    depth_sigma_prop: float = 0.05
    depth_sigma_scale: float = 1.0
    normal_var_floor: float = 1e-4
    # depth refinement
    prior_trunc: float = 5.0
    int_trunc: float = 5.0
    reg_cauchy_scale: float = 0.05
    bilateral_k: float = 2.0
    refine_max_iters: int = 50
    refine_warmup_iters: int = 5
    refine_rel_tol: float = 1e-5
    cg_rtol: float = 1e-8
    skip_refinement_tol: float = 1e-3
    # bundle adjustment
    ba_trunc_px2: float = 16.0
    ba_max_iters: int = 100
    ba_rel_tol: float = 1e-6
    use_propagated_depth_cov: bool = False
    # filtering and scheduling
    max_reproj_px: float = 4.0
    min_tri_angle_deg: float = 1.5
    growth_ratio: float = 1.1
    local_window: int = 5
    alternation_rounds: int = 2
    # consistency check
    consistency_gamma: float = 3.0
    consistency_beta: float = 0.25
    splat_radius: int = 1
    # pipeline
    lift_budget: int = 2000
    candidate_retries: int = 10
    next_view_score: str = "score_sum"
    # ablations
    no_lifting: bool = False
    no_depth_reg: bool = False
    no_depth_refinement: bool = False
    no_consistency_check: bool = False
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        checks = [
            ("essential_inlier_px", self.essential_inlier_px > 0),
            ("pnp_inlier_px", self.pnp_inlier_px > 0),
            ("min_init_inliers", self.min_init_inliers >= 8),
            ("min_reg_inliers", self.min_reg_inliers >= 4),
            ("ransac_confidence", 0 < self.ransac_confidence < 1),
            ("ransac_max_iters", self.ransac_max_iters >= 1),
            ("depth_sigma_floor", self.depth_sigma_floor >= 0),
            ("depth_sigma_prop", self.depth_sigma_prop >= 0),
            ("depth_sigma_scale", self.depth_sigma_scale > 0),
            ("normal_var_floor", self.normal_var_floor > 0),
            ("reg_cauchy_scale", self.reg_cauchy_scale > 0),
            ("alternation_rounds", self.alternation_rounds >= 1),
            ("local_window", self.local_window >= 1),
            ("growth_ratio", self.growth_ratio >= 1.0),
            ("consistency_gamma", self.consistency_gamma > 0),
            ("consistency_beta", 0 <= self.consistency_beta <= 2),
            ("splat_radius", self.splat_radius >= 0),
            ("next_view_score", self.next_view_score in ("score_sum", "inlier_count", "visible_points")),
        ]
        for key, ok in checks:
            if not ok:
                raise ValidationError(f"config value out of range: {key} = {getattr(self, key)!r}")
        return self

    def set(self, key: str, value: str) -> None:
        fields = {f.name: f for f in dataclasses.fields(self)}
        if key not in fields:
            raise ValidationError(f"unknown config key {key!r}")
        setattr(self, key, _coerce(fields[key].type, value, key))

    def items(self):
        for f in dataclasses.fields(self):
            yield f.name, getattr(self, f.name)

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(type_name, value: str, key: str):
    value = value.strip()
    t = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if t == "bool":
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if t == "int":
            return int(value)
        if t == "float":
            return float(value)
        return value
    except ValueError:
        raise ValidationError(f"bad value for {key}: {value!r}") from None


def load_config(path: Optional[Path] = None, overrides: Iterable[str] = ()) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        path = Path(path)
        for lineno, raw in enumerate(path.read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(path, f"line {lineno}", "expected 'key = value'")
            k, v = line.split("=", 1)
            cfg.set(k.strip(), v)
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    return cfg.validate()
