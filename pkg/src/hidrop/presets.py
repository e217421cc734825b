"""Named model shapes and pruning configurations."""

from __future__ import annotations

from typing import Dict

from hidrop.schedule import ModelShape, PruneSchedule, schedule_from_budget

N_VISION = 576

SHAPES: Dict[str, ModelShape] = {
    "llava-2.7b": ModelShape(layers=32, hidden=2560, ffn=6912, heads=32),
    "llava-7b": ModelShape(layers=32, hidden=4096, ffn=11008, heads=32),
    "llava-13b": ModelShape(layers=40, hidden=5120, ffn=13824, heads=40),
}

# (inject_layer, exit_layer, filter_layers) per model family
WINDOWS = {
    "llava-7b": (9, 25, (10, 14, 16, 18)),
    # 13B depth 40: the 7B window scaled by 40/32 and rounded
    "llava-13b": (11, 31, (12, 17, 20, 22)),
    "llava-2.7b": (15, 28, (16, 19, 22, 25)),
}

# the halving rule caps the 7B window at an average of ~75 tokens; 80 moves the first filter later
BUDGET_WINDOWS = {
    80: (9, 25, (11, 14, 16, 18)),
    64: (9, 25, (10, 14, 16, 18)),
    48: (9, 25, (10, 14, 16, 18)),
}

SCHEDULE_PRESETS = ("vanilla", "hidrop", "avg-80", "avg-64", "avg-48")


def shape(name: str) -> ModelShape:
    try:
        return SHAPES[name]
    except KeyError:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(SHAPES)}") from None


def schedule(name: str, model: str = "llava-7b", n_v: int = N_VISION) -> PruneSchedule:
    """Schedule preset for a model preset.

    ``hidrop`` uses the model's own window with a 64-token average;
    ``avg-N`` plans an N-token average (7B uses a per-budget window).
    """
    layers = shape(model).layers
    if name == "vanilla":
        return PruneSchedule.vanilla(n_v, layers)
    if name == "hidrop":
        inject, exit_, filters = WINDOWS[model]
        return schedule_from_budget(inject, exit_, filters, n_v, 64, layers)
    if name.startswith("avg-") and name[4:].isdigit() and int(name[4:]) in BUDGET_WINDOWS:
        target = int(name[4:])
        inject, exit_, filters = BUDGET_WINDOWS[target] if model == "llava-7b" else WINDOWS[model]
        return schedule_from_budget(inject, exit_, filters, n_v, target, layers)
    raise ValueError(f"unknown schedule preset {name!r}; choose from {SCHEDULE_PRESETS}")
