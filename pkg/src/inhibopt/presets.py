"""Bundled experiment presets.

Each preset expands to one or more runs described by the same config schema
the CLI accepts, so preset runs are reproducible from their manifests alone.
fig1 samples the seasonal pressure profile; fig2-fig4 sweep the pulse-only
optimization over unit pulse costs, a constant chemical control and the
final-cost weight; fig5/fig6 run the space-dependent optimization for
diffusion 1*I and 10*I with the center-concentrated initial condition;
fig7 uses a seeded random pressure amplitude with a uniform initial state.
"""

from __future__ import annotations

from dataclasses import dataclass

from .io import DEFAULT_AMPLITUDE, normalize_config


@dataclass(frozen=True)
class PresetRun:
    label: str
    task: str  # alpha-profile | simulate | optimize-pulse | optimize-mixed
    config: dict


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    description: str
    runs: tuple[PresetRun, ...]


def _averaged(**overrides) -> dict:
    cfg = {
        "model": {"kind": "averaged"},
        "cost": dict(overrides.pop("cost", {})),
        "control": dict(overrides.pop("control", {})),
    }
    cfg["model"].update(overrides.pop("model", {}))
    if overrides:
        raise ValueError(f"unused overrides: {overrides}")
    return normalize_config(cfg)


def _pde(**overrides) -> dict:
    cfg = {
        "model": {"kind": "pde"},
        "alpha": dict(overrides.pop("alpha", {})),
        "initial": dict(overrides.pop("initial", {})),
        "cost": dict(overrides.pop("cost", {})),
    }
    cfg["model"].update(overrides.pop("model", {}))
    if "diffusion" in overrides:
        cfg["diffusion"] = overrides.pop("diffusion")
    if "seed" in overrides:
        cfg["seed"] = overrides.pop("seed")
    if overrides:
        raise ValueError(f"unused overrides: {overrides}")
    return normalize_config(cfg)


def _build_presets() -> dict[str, ExperimentPreset]:
    presets = {}

    presets["fig1"] = ExperimentPreset(
        "fig1",
        "seasonal inhibition-pressure profile sampled on the integration grid",
        (PresetRun("alpha", "alpha-profile", _averaged()),),
    )

    pulse_cost_sweep = (0.25, 0.4, 0.5)
    presets["fig2"] = ExperimentPreset(
        "fig2",
        "pulse-only optimization for unit pulse costs 0.25/0.4/0.5 (no chemical control)",
        tuple(
            PresetRun(f"c-{c}", "optimize-pulse", _averaged(cost={"pulse_unit": c}))
            for c in pulse_cost_sweep
        ),
    )

    presets["fig3"] = ExperimentPreset(
        "fig3",
        "same pulse-cost sweep with constant chemical control u=1, sigma=0.3",
        tuple(
            PresetRun(
                f"c-{c}",
                "optimize-pulse",
                _averaged(cost={"pulse_unit": c}, control={"u": 1.0}),
            )
            for c in pulse_cost_sweep
        ),
    )

    presets["fig4"] = ExperimentPreset(
        "fig4",
        "final-cost sweep C_f in {0, 0.25, 0.5} at unit pulse cost 0.5",
        tuple(
            PresetRun(
                f"Cf-{cf}",
                "optimize-pulse",
                _averaged(cost={"pulse_unit": 0.5, "final": cf}),
            )
            for cf in (0.0, 0.25, 0.5)
        ),
    )

    sine_initial = {"mode": "sine", "mean": 0.4, "floor": 0.2}
    presets["fig5"] = ExperimentPreset(
        "fig5",
        "space-dependent optimization, diffusion 1*I, center-concentrated initial state",
        (
            PresetRun(
                "A-1",
                "optimize-pulse",
                _pde(diffusion=1.0, initial=sine_initial, cost={"pulse_unit": 0.55}),
            ),
        ),
    )
    presets["fig6"] = ExperimentPreset(
        "fig6",
        "as fig5 with diffusion 10*I (same optimal pulse set)",
        (
            PresetRun(
                "A-10",
                "optimize-pulse",
                _pde(diffusion=10.0, initial=sine_initial, cost={"pulse_unit": 0.55}),
            ),
        ),
    )

    presets["fig7"] = ExperimentPreset(
        "fig7",
        "seeded random pressure amplitude, uniform initial state (space-dependent strategy)",
        (
            PresetRun(
                "random-a",
                "optimize-pulse",
                _pde(
                    alpha={"amplitude": "random", "mean": DEFAULT_AMPLITUDE},
                    initial={"mode": "uniform", "value": 0.4},
                    cost={"pulse_unit": 0.55},
                    seed=7,
                ),
            ),
        ),
    )

    presets["mixed"] = ExperimentPreset(
        "mixed",
        "mixed chemical/pulse optimization by projected gradient (C = 0.1, c = 0.5)",
        (
            PresetRun(
                "mixed",
                "optimize-mixed",
                _averaged(cost={"pulse_unit": 0.5, "continuous_unit": 0.1}),
            ),
        ),
    )

    presets["uniform-check"] = ExperimentPreset(
        "uniform-check",
        "uniform-data run where the space-dependent model collapses to the averaged one",
        (
            PresetRun(
                "pde",
                "simulate",
                _pde(initial={"mode": "uniform", "value": 0.4}, cost={"pulse_unit": 0.55}),
            ),
            PresetRun("averaged", "simulate", _averaged(cost={"pulse_unit": 0.55})),
        ),
    )

    return presets


PRESETS = _build_presets()
