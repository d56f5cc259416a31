"""Panel ingestion, date encoding, scaling, splitting, windowing and corruption.

A panel is an N-node x T-step x F-variable observation block. Every variable
carries a role (target / past / future / date); date channels are always
synthesized from timestamps, never ingested from files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class VariableRole(str, Enum):
    TARGET = "target"
    PAST = "past"
    FUTURE = "future"
    DATE = "date"


DATE_CHANNELS = [
    "hour_sin", "hour_cos", "month_sin", "month_cos",
    "dow_0", "dow_1", "dow_2", "dow_3", "dow_4", "dow_5", "dow_6",
]


@dataclass
class Panel:
    """Dense observation block with per-variable roles.

    data has shape (N, T, F); mask (same shape, True = observed) is present
    only when the source file had holes.
    """

    node_ids: list[str]
    timestamps: list[datetime]
    variables: list[str]
    roles: dict[str, VariableRole]
    data: np.ndarray
    mask: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n, t, f = len(self.node_ids), len(self.timestamps), len(self.variables)
        if self.data.shape != (n, t, f):
            raise ValueError(f"data shape {self.data.shape} != ({n}, {t}, {f})")
        for v in self.variables:
            if v not in self.roles:
                raise ValueError(f"variable {v!r} has no declared role")
        targets = [v for v in self.variables if self.roles[v] == VariableRole.TARGET]
        if len(targets) != 1:
            raise ValueError(f"exactly one target channel required, got {targets}")
        for a, b in zip(self.timestamps, self.timestamps[1:]):
            if b <= a:
                raise ValueError(f"non-monotone timestamps: {a} then {b}")

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_steps(self) -> int:
        return len(self.timestamps)

    def indices_for(self, role: VariableRole) -> list[int]:
        return [i for i, v in enumerate(self.variables) if self.roles[v] == role]

    @property
    def target_index(self) -> int:
        return self.indices_for(VariableRole.TARGET)[0]

    def slice_steps(self, start: int, stop: int) -> "Panel":
        return replace(
            self,
            timestamps=self.timestamps[start:stop],
            data=self.data[:, start:stop, :],
            mask=None if self.mask is None else self.mask[:, start:stop, :],
        )


# ---------------------------------------------------------------------------
# File format: delimited panel + JSON role descriptor
# ---------------------------------------------------------------------------

_ROLE_TAGS = {r.value: r for r in VariableRole}


def load_schema(path) -> dict[str, VariableRole]:
    """Read the sidecar descriptor mapping variable names to roles."""
    with open(path) as fh:
        raw = json.load(fh)
    variables = raw.get("variables")
    if not isinstance(variables, dict) or not variables:
        raise ValueError(f"schema {path} must contain a non-empty 'variables' map")
    roles = {}
    for name, tag in variables.items():
        if tag not in _ROLE_TAGS:
            raise ValueError(f"unknown role tag {tag!r} for variable {name!r}")
        role = _ROLE_TAGS[tag]
        if role == VariableRole.DATE:
            raise ValueError("date channels are synthesized, never ingested raw")
        roles[name] = role
    return roles


def save_schema(roles: dict[str, VariableRole], path) -> None:
    payload = {"variables": {k: v.value for k, v in roles.items()}}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_panel(path, schema_path) -> Panel:
    """Load a `node_id,timestamp,var...` delimited file plus its descriptor."""
    roles = load_schema(schema_path)
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split(",")
        if len(header) < 3 or header[0] != "node_id" or header[1] != "timestamp":
            raise ValueError(f"malformed header in {path}: {header}")
        variables = header[2:]
        missing = set(variables) ^ set(roles)
        if missing:
            raise ValueError(f"schema/header variable mismatch: {sorted(missing)}")
        per_node: dict[str, list] = {}
        order: list[str] = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != 2 + len(variables):
                raise ValueError(f"{path}:{lineno}: expected {2 + len(variables)} fields")
            node, ts_text = cells[0], cells[1]
            try:
                ts = datetime.fromisoformat(ts_text)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad timestamp {ts_text!r}") from exc
            row = np.empty(len(variables))
            for j, cell in enumerate(cells[2:]):
                if cell == "":
                    row[j] = np.nan
                else:
                    try:
                        row[j] = float(cell)
                    except ValueError as exc:
                        raise ValueError(f"{path}:{lineno}: bad value {cell!r}") from exc
            if node not in per_node:
                per_node[node] = []
                order.append(node)
            per_node[node].append((ts, row))

    if not order:
        raise ValueError(f"{path} contains no data rows")
    timestamps = [ts for ts, _ in per_node[order[0]]]
    for a, b in zip(timestamps, timestamps[1:]):
        if b <= a:
            raise ValueError(f"non-monotone timestamps for node {order[0]}: {a} then {b}")
    data = np.empty((len(order), len(timestamps), len(variables)))
    for i, node in enumerate(order):
        rows = per_node[node]
        if [ts for ts, _ in rows] != timestamps:
            raise ValueError(f"node {node} timestamp sequence differs from node {order[0]}")
        data[i] = np.stack([vals for _, vals in rows])
    mask = ~np.isnan(data)
    return Panel(
        node_ids=order,
        timestamps=timestamps,
        variables=variables,
        roles={v: roles[v] for v in variables},
        data=data,
        mask=None if mask.all() else mask,
    )


def save_panel(panel: Panel, path, schema_path=None) -> None:
    """Write a panel in the same delimited format the loader reads."""
    raw_vars = [v for v in panel.variables if panel.roles[v] != VariableRole.DATE]
    idx = [panel.variables.index(v) for v in raw_vars]
    with open(path, "w") as fh:
        fh.write("node_id,timestamp," + ",".join(raw_vars) + "\n")
        for i, node in enumerate(panel.node_ids):
            for t, ts in enumerate(panel.timestamps):
                cells = [node, ts.isoformat()]
                for j in idx:
                    v = panel.data[i, t, j]
                    cells.append("" if np.isnan(v) else repr(float(v)))
                fh.write(",".join(cells) + "\n")
    if schema_path is not None:
        save_schema({v: panel.roles[v] for v in raw_vars}, schema_path)


# ---------------------------------------------------------------------------
# Date encoding
# ---------------------------------------------------------------------------

def encode_time(timestamps: Sequence[datetime]) -> np.ndarray:
    """Encode timestamps as (T, 11): sin/cos hour, sin/cos month, one-hot weekday."""
    out = np.zeros((len(timestamps), len(DATE_CHANNELS)))
    for t, ts in enumerate(timestamps):
        hour_angle = 2.0 * math.pi * ts.hour / 24.0
        month_angle = 2.0 * math.pi * (ts.month - 1) / 12.0
        out[t, 0] = math.sin(hour_angle)
        out[t, 1] = math.cos(hour_angle)
        out[t, 2] = math.sin(month_angle)
        out[t, 3] = math.cos(month_angle)
        out[t, 4 + ts.weekday()] = 1.0  # Monday = 0
    return out


def add_date_channels(panel: Panel) -> Panel:
    """Append the 11 synthesized date channels, broadcast to every node."""
    if any(panel.roles[v] == VariableRole.DATE for v in panel.variables):
        raise ValueError("panel already carries date channels")
    block = encode_time(panel.timestamps)  # (T, 11)
    tiled = np.broadcast_to(block, (panel.n_nodes,) + block.shape)
    data = np.concatenate([panel.data, tiled], axis=2)
    mask = panel.mask
    if mask is not None:
        mask = np.concatenate(
            [mask, np.ones(tiled.shape, dtype=bool)], axis=2)
    roles = dict(panel.roles)
    roles.update({name: VariableRole.DATE for name in DATE_CHANNELS})
    return replace(panel, variables=panel.variables + DATE_CHANNELS,
                   roles=roles, data=data, mask=mask)


# ---------------------------------------------------------------------------
# Missing values, split, scaling
# ---------------------------------------------------------------------------

def fill_missing(panel: Panel) -> Panel:
    """Forward-fill holes along time, then zero anything left at the head."""
    if panel.mask is None:
        return panel
    data = panel.data.copy()
    n, t, f = data.shape
    for i in range(n):
        for j in range(f):
            col = data[i, :, j]
            obs = panel.mask[i, :, j]
            last = 0.0
            for s in range(t):
                if obs[s]:
                    last = col[s]
                else:
                    col[s] = last
    return replace(panel, data=data, mask=None)


def chronological_split(panel: Panel, ratios: Sequence[float] = (0.7, 0.2, 0.1),
                        min_length: int = 0) -> tuple[Panel, ...]:
    """Split along time into contiguous segments; remainder goes to the last."""
    ratios = list(ratios)
    if any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be positive: {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1: {ratios}")
    t = panel.n_steps
    lengths = [int(math.floor(t * r)) for r in ratios[:-1]]
    lengths.append(t - sum(lengths))
    if min_length and any(n < min_length for n in lengths):
        raise ValueError(f"segment lengths {lengths} below minimum {min_length}")
    out, start = [], 0
    for n in lengths:
        out.append(panel.slice_steps(start, start + n))
        start += n
    return tuple(out)


@dataclass
class Scaler:
    """Per-channel z-score statistics fitted on training rows only."""

    mean: np.ndarray  # (F,)
    std: np.ndarray   # (F,), floored

    STD_FLOOR = 1e-8

    @classmethod
    def fit(cls, panel: Panel) -> "Scaler":
        flat = panel.data.reshape(-1, panel.data.shape[2])
        mean = flat.mean(axis=0)
        std = np.maximum(flat.std(axis=0), cls.STD_FLOOR)
        return cls(mean=mean, std=std)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def transform_panel(self, panel: Panel) -> Panel:
        return replace(panel, data=self.transform(panel.data))

    def inverse_channel(self, values: np.ndarray, channel: int) -> np.ndarray:
        return values * self.std[channel] + self.mean[channel]


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------

@dataclass
class FeatureLayout:
    """Column bookkeeping for the windowed exogenous blocks."""

    endo: list[str]
    past: list[str]          # names of E_past columns, date channels last
    future: list[str]        # names of E_future columns, date channels last
    past_is_date: np.ndarray
    future_is_date: np.ndarray


@dataclass
class WindowSample:
    """One training instance cut from a panel segment."""

    x: np.ndarray         # (N, T_p, 1) endogenous history
    e_past: np.ndarray    # (N, T_p, F_p + dates)
    e_future: np.ndarray  # (N, T_f, F_f + dates)
    y: np.ndarray         # (N, T_f, 1)
    offset: int = 0


def make_windows(panel: Panel, t_past: int, t_future: int,
                 stride: int = 1) -> tuple[list[WindowSample], FeatureLayout]:
    """Cut sliding windows; E_future spans exactly the target horizon."""
    if panel.n_steps < t_past + t_future:
        raise ValueError(
            f"segment length {panel.n_steps} shorter than {t_past}+{t_future}")
    tgt = panel.target_index
    past_idx = panel.indices_for(VariableRole.PAST)
    fut_idx = panel.indices_for(VariableRole.FUTURE)
    date_idx = panel.indices_for(VariableRole.DATE)
    names = panel.variables
    layout = FeatureLayout(
        endo=[names[tgt]],
        past=[names[i] for i in past_idx + date_idx],
        future=[names[i] for i in fut_idx + date_idx],
        past_is_date=np.array([False] * len(past_idx) + [True] * len(date_idx)),
        future_is_date=np.array([False] * len(fut_idx) + [True] * len(date_idx)),
    )
    samples = []
    for o in range(0, panel.n_steps - t_past - t_future + 1, stride):
        hist = slice(o, o + t_past)
        horizon = slice(o + t_past, o + t_past + t_future)
        samples.append(WindowSample(
            x=panel.data[:, hist, [tgt]],
            e_past=panel.data[:, hist, :][:, :, past_idx + date_idx],
            e_future=panel.data[:, horizon, :][:, :, fut_idx + date_idx],
            y=panel.data[:, horizon, [tgt]],
            offset=o,
        ))
    return samples, layout


def make_rollout_windows(panel: Panel, t_past: int, t_future: int, days: int,
                         stride: int = 1) -> tuple[list[WindowSample], FeatureLayout]:
    """Windows for multi-day rollout: exogenous blocks extended over all days.

    e_past covers [o, o + t_past + (days-1)*t_future) so each rolled day can
    read the true past-exogenous values that have become observable by then;
    e_future and y cover the full days*t_future horizon.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    total_future = days * t_future
    if panel.n_steps < t_past + total_future:
        raise ValueError(
            f"segment length {panel.n_steps} too short for a {days}-day rollout")
    tgt = panel.target_index
    past_idx = panel.indices_for(VariableRole.PAST)
    fut_idx = panel.indices_for(VariableRole.FUTURE)
    date_idx = panel.indices_for(VariableRole.DATE)
    names = panel.variables
    layout = FeatureLayout(
        endo=[names[tgt]],
        past=[names[i] for i in past_idx + date_idx],
        future=[names[i] for i in fut_idx + date_idx],
        past_is_date=np.array([False] * len(past_idx) + [True] * len(date_idx)),
        future_is_date=np.array([False] * len(fut_idx) + [True] * len(date_idx)),
    )
    samples = []
    hist_span = t_past + (days - 1) * t_future
    for o in range(0, panel.n_steps - t_past - total_future + 1, stride):
        samples.append(WindowSample(
            x=panel.data[:, o:o + t_past, [tgt]],
            e_past=panel.data[:, o:o + hist_span, :][:, :, past_idx + date_idx],
            e_future=panel.data[:, o + t_past:o + t_past + total_future, :][:, :, fut_idx + date_idx],
            y=panel.data[:, o + t_past:o + t_past + total_future, [tgt]],
            offset=o,
        ))
    return samples, layout


# ---------------------------------------------------------------------------
# Corruption
# ---------------------------------------------------------------------------

def corrupt_exogenous(samples: Sequence[WindowSample], layout: FeatureLayout,
                      strategy: str, ratio: float, seed: int,
                      include_date: bool = False) -> list[WindowSample]:
    """Randomly replace exogenous entries with zeros or standard-normal draws.

    Each entry is replaced independently with probability ``ratio``. Date
    channels are untouched unless ``include_date``; targets never change.
    """
    if strategy not in ("zero", "random"):
        raise ValueError(f"unknown corruption strategy {strategy!r}")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    if ratio == 0.0:
        return [replace(s) for s in samples]
    rng = np.random.default_rng(seed)
    past_cols = np.ones(len(layout.past), bool) if include_date else ~layout.past_is_date
    fut_cols = np.ones(len(layout.future), bool) if include_date else ~layout.future_is_date
    out = []
    for s in samples:
        e_past = s.e_past.copy()
        e_future = s.e_future.copy()
        for block, cols in ((e_past, past_cols), (e_future, fut_cols)):
            if not cols.any():
                continue
            target = block[:, :, cols]
            hit = rng.random(target.shape) < ratio
            repl = np.zeros(target.shape) if strategy == "zero" else rng.standard_normal(target.shape)
            block[:, :, cols] = np.where(hit, repl, target)
        out.append(replace(s, e_past=e_past, e_future=e_future))
    return out


def mask_exogenous(samples: Sequence[WindowSample], layout: FeatureLayout,
                   use_past: bool = True, use_future: bool = True,
                   use_date: bool = True) -> list[WindowSample]:
    """Zero out whole exogenous groups for the data-ablation variants."""
    past_kill = np.zeros(len(layout.past), bool)
    fut_kill = np.zeros(len(layout.future), bool)
    if not use_past:
        past_kill |= ~layout.past_is_date
    if not use_future:
        fut_kill |= ~layout.future_is_date
    if not use_date:
        past_kill |= layout.past_is_date
        fut_kill |= layout.future_is_date
    if not past_kill.any() and not fut_kill.any():
        return [replace(s) for s in samples]
    out = []
    for s in samples:
        e_past = s.e_past.copy()
        e_future = s.e_future.copy()
        e_past[:, :, past_kill] = 0.0
        e_future[:, :, fut_kill] = 0.0
        out.append(replace(s, e_past=e_past, e_future=e_future))
    return out


# ---------------------------------------------------------------------------
# End-to-end preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    """Scaled chronological splits plus their windows and bookkeeping."""

    train: list[WindowSample]
    val: list[WindowSample]
    test: list[WindowSample]
    layout: FeatureLayout
    scaler: Scaler
    target_channel: int
    train_panel: Panel
    val_panel: Panel
    test_panel: Panel
    t_past: int
    t_future: int

    @property
    def train_target_series(self) -> np.ndarray:
        return self.train_panel.data[:, :, self.target_channel]


def prepare_splits(panel: Panel, t_past: int = 24, t_future: int = 24,
                   ratios: Sequence[float] = (0.7, 0.2, 0.1),
                   stride: int = 1) -> PreparedData:
    """Fill holes, synthesize date channels, split, scale and window."""
    panel = fill_missing(panel)
    panel = add_date_channels(panel)
    train_p, val_p, test_p = chronological_split(
        panel, ratios, min_length=t_past + t_future)
    scaler = Scaler.fit(train_p)
    train_s = scaler.transform_panel(train_p)
    val_s = scaler.transform_panel(val_p)
    test_s = scaler.transform_panel(test_p)
    train_w, layout = make_windows(train_s, t_past, t_future, stride)
    val_w, _ = make_windows(val_s, t_past, t_future, stride)
    test_w, _ = make_windows(test_s, t_past, t_future, stride)
    return PreparedData(
        train=train_w, val=val_w, test=test_w, layout=layout, scaler=scaler,
        target_channel=train_s.target_index,
        train_panel=train_s, val_panel=val_s, test_panel=test_s,
        t_past=t_past, t_future=t_future,
    )


# ---------------------------------------------------------------------------
# Synthetic panels with a known exogenous signal
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    nodes: int = 4
    steps: int = 512
    lag: int = 6
    noise: float = 0.1
    seed: int = 0
    past_coef: float = 1.0
    future_coef: float = 1.0
    seasonal_amp: float = 0.5
    start: str = "2019-01-01T00:00:00"


def synth_generate(cfg: SynthConfig) -> Panel:
    """Generate a panel whose target mixes lagged past-exo, a future driver,
    a daily seasonal term and Gaussian noise; coefficients go to metadata."""
    rng = np.random.default_rng(cfg.seed)
    n, t = cfg.nodes, cfg.steps
    past_full = rng.standard_normal((n, t + cfg.lag))   # index i holds time i - lag
    future_drv = rng.standard_normal((n, t))
    eps = rng.standard_normal((n, t))
    from datetime import timedelta
    start = datetime.fromisoformat(cfg.start)
    timestamps = [start + timedelta(hours=i) for i in range(t)]
    hours = np.array([ts.hour for ts in timestamps])
    seasonal = cfg.seasonal_amp * (np.sin(2 * np.pi * hours / 24.0)
                                   + 0.4 * np.cos(2 * np.pi * hours / 24.0))
    target = (cfg.past_coef * past_full[:, :t]
              + cfg.future_coef * future_drv
              + seasonal[None, :]
              + cfg.noise * eps)
    past_channel = past_full[:, cfg.lag:]
    data = np.stack([target, past_channel, future_drv], axis=2)
    return Panel(
        node_ids=[f"n{i}" for i in range(n)],
        timestamps=timestamps,
        variables=["target", "past_driver", "future_driver"],
        roles={
            "target": VariableRole.TARGET,
            "past_driver": VariableRole.PAST,
            "future_driver": VariableRole.FUTURE,
        },
        data=data,
        metadata={
            "past_coef": cfg.past_coef,
            "future_coef": cfg.future_coef,
            "lag": cfg.lag,
            "noise": cfg.noise,
            "seasonal_amp": cfg.seasonal_amp,
            "seed": cfg.seed,
        },
    )
