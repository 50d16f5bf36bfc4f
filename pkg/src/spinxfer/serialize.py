"""CSV and JSON export helpers.

All floats are rendered with %.12g so identical inputs give byte-identical
file bodies; nothing here writes timestamps. JSON documents are emitted
with sorted keys for the same reason.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dynamics import QuantumState, Trajectory
from .noise import DegradationCurve


def fmt(x: float) -> str:
    return f"{float(x):.12g}"


def trajectory_csv(traj: Trajectory) -> str:
    """Rows of `t_ns,P_site1..P_siteK,trace,purity` for a trajectory."""
    pops = traj.populations()
    k = pops.shape[1]
    header = "t_ns," + ",".join(f"P_site{i + 1}" for i in range(k)) + ",trace,purity"
    lines = [header]
    trace = traj.trace()
    purity = traj.purity()
    for i, t in enumerate(traj.times_ns):
        cells = [fmt(t), *(fmt(p) for p in pops[i]), fmt(trace[i]), fmt(purity[i])]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def curve_csv(curve: DegradationCurve) -> str:
    """Rows of `sigma_mhz,mean_ratio,std,n_samples` for a degradation curve."""
    lines = ["sigma_mhz,mean_ratio,std,n_samples"]
    for s, r, d in zip(curve.sigma_grid_mhz, curve.mean_ratio, curve.std):
        lines.append(f"{fmt(s)},{fmt(r)},{fmt(d)},{curve.n_samples}")
    return "\n".join(lines) + "\n"


def table_csv(header: list[str], rows: list[list]) -> str:
    """Generic CSV body; floats formatted with %.12g, others via str."""
    lines = [",".join(header)]
    for row in rows:
        cells = [fmt(c) if isinstance(c, (float, np.floating)) else str(c) for c in row]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def density_json_dict(state: QuantumState) -> dict:
    """Density matrix as nested re/im arrays (basis annotated)."""
    rho = state.to_density().data
    return {
        "basis": state.basis,
        "n_sites": state.n_sites,
        "re": [[float(v) for v in row] for row in np.real(rho)],
        "im": [[float(v) for v in row] for row in np.imag(rho)],
    }


def _json_default(obj):
    # numpy scalars and arrays degrade to their plain Python counterparts
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def json_text(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def write_text(path: Path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def write_json(path: Path, obj) -> None:
    write_text(path, json_text(obj))
