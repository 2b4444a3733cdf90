"""File outputs: legacy VTK, CSV, JSON reports and the run manifest.

Floats are written with ``repr`` so CSV and JSON round-trip exactly, and
nothing time- or host-dependent is recorded; identical runs give
byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .controls import ControlTriple
from .grid import BoxGrid, ScalarField, VelocityField
from .state_solver import StateSolution

STATE_COLUMNS = ("i", "j", "k", "x", "y", "z", "u1", "u2", "u3", "p", "theta")


def _plain(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    path = Path(path)
    path.write_text(json.dumps(_plain(obj), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return x


def write_csv(path, header, rows):
    """RFC-4180 CSV (CRLF line ends, minimal quoting)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(x) for x in row])
    return path


def read_csv(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def state_rows(state: StateSolution):
    grid = state.u.grid
    X, Y, Z = grid.cell_centers()
    uc = state.u.cell_centered()
    idx = np.indices(grid.n)
    cols = [idx[0], idx[1], idx[2], X, Y, Z, uc[..., 0], uc[..., 1], uc[..., 2], state.p.cells, state.theta.cells]
    # x varies fastest, matching the VTK point ordering
    flat = [np.ravel(c, order="F") for c in cols]
    for r in range(flat[0].size):
        yield [int(flat[0][r]), int(flat[1][r]), int(flat[2][r])] + [float(c[r]) for c in flat[3:]]


def write_state_csv(path, state: StateSolution):
    return write_csv(path, STATE_COLUMNS, state_rows(state))


def read_state_csv(path, grid: BoxGrid):
    """Cell-centred velocity and temperature written by ``write_state_csv``.

    Velocities are read back as face averages of the cell values, so only
    tracking targets (not exact states) should be loaded this way.
    """
    header, rows = read_csv(path)
    if tuple(header) != STATE_COLUMNS:
        raise ValueError(f"{path}: not a state CSV (header {header})")
    if len(rows) != int(np.prod(grid.n)):
        raise ValueError(f"{path}: {len(rows)} rows, grid has {int(np.prod(grid.n))} cells")
    data = np.array([[float(x) for x in r] for r in rows])
    ijk = data[:, :3].astype(int)
    cells = {}
    for name, col in (("u1", 6), ("u2", 7), ("u3", 8), ("theta", 10)):
        a = np.empty(grid.n)
        a[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = data[:, col]
        cells[name] = a
    comps = []
    for c, name in enumerate(("u1", "u2", "u3")):
        a = cells[name]
        pad = [(0, 0)] * 3
        pad[c] = (1, 1)
        ext = np.pad(a, pad, mode="edge")
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[c] = slice(0, -1)
        sl_hi[c] = slice(1, None)
        comps.append(0.5 * (ext[tuple(sl_lo)] + ext[tuple(sl_hi)]))
    return VelocityField(grid, *comps), ScalarField(grid, cells["theta"])


def _vtk_block(values):
    return "\n".join(repr(float(v)) for v in values)


def write_vtk(path, state: StateSolution, title="rbmcontrol state"):
    """Legacy ASCII STRUCTURED_POINTS file with cell data (pressure, temperature, velocity)."""
    grid = state.u.grid
    nx, ny, nz = grid.n
    ncell = nx * ny * nz
    uc = state.u.cell_centered()
    vec = np.stack([np.ravel(uc[..., c], order="F") for c in range(3)], axis=1)
    lines = [
        "# vtk DataFile Version 3.0",
        title.replace("\n", " ")[:255],
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}",
        "ORIGIN 0 0 0",
        "SPACING " + " ".join(repr(float(h)) for h in grid.h),
        f"CELL_DATA {ncell}",
        "SCALARS pressure double 1",
        "LOOKUP_TABLE default",
        _vtk_block(np.ravel(state.p.cells, order="F")),
        "SCALARS temperature double 1",
        "LOOKUP_TABLE default",
        _vtk_block(np.ravel(state.theta.cells, order="F")),
        "VECTORS velocity double",
        "\n".join(" ".join(repr(float(x)) for x in row) for row in vec),
    ]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def control_rows(controls: ControlTriple):
    """Rows (control, face, x, y, z, v1, v2, v3); scalar controls leave v2, v3 empty."""
    for name, f in zip(("g", "phi1", "phi2"), controls.fields):
        cen = f.region.centroid
        for k in range(f.region.size):
            vals = list(f.values[k]) if f.is_vector else [f.values[k], "", ""]
            yield [name, k, *(float(x) for x in cen[k]), *vals]


def write_controls_csv(path, controls: ControlTriple):
    return write_csv(path, ("control", "face", "x", "y", "z", "v1", "v2", "v3"), control_rows(controls))


def sha256_file(path):
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, config_text, seed, files):
    """manifest.json: command, seed, the config text verbatim and sha256 of every artifact."""
    out_dir = Path(out_dir)
    entries = {Path(f).name: sha256_file(f) for f in sorted(files, key=lambda f: Path(f).name)}
    return write_json(out_dir / "manifest.json", {
        "command": command,
        "seed": seed,
        "config": config_text,
        "artifacts": entries,
    })
