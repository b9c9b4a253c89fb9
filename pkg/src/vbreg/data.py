"""Datasets, CSV ingestion, scenario simulation and the binary draw store."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .expfam import make_rng

STORE_MAGIC = b"VBREG-STORE\n"
STORE_VERSION = 1


class DataError(ValueError):
    pass


class StoreError(IOError):
    pass


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class GroupedDataset:
    """Responses and design matrices split into ``m`` groups sharing ``p`` columns.

    A single-group dataset is what the plain linear regression consumes.
    """

    ys: list[np.ndarray]
    Xs: list[np.ndarray]
    labels: list[str] = field(default_factory=list)
    predictor_names: list[str] = field(default_factory=list)
    response_name: str = "y"

    def __post_init__(self):
        if len(self.ys) != len(self.Xs) or not self.ys:
            raise DataError("need at least one group and matching y/X lists")
        self.ys = [np.asarray(y, dtype=float).ravel() for y in self.ys]
        self.Xs = [np.atleast_2d(np.asarray(X, dtype=float)) for X in self.Xs]
        p = self.Xs[0].shape[1]
        for j, (y, X) in enumerate(zip(self.ys, self.Xs)):
            if X.shape != (y.size, p):
                raise DataError(f"group {j}: X has shape {X.shape}, expected ({y.size}, {p})")
            if y.size < 1:
                raise DataError(f"group {j} is empty")
            if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
                raise DataError(f"group {j} contains non-finite values")
        if not self.labels:
            self.labels = [str(j + 1) for j in range(len(self.ys))]
        if not self.predictor_names:
            self.predictor_names = [f"x{i}" for i in range(p)]
        # per-group sufficient statistics, reused by every engine
        self.XtX = np.stack([X.T @ X for X in self.Xs])
        self.Xty = np.stack([X.T @ y for X, y in zip(self.Xs, self.ys)])
        self.yty = np.array([y @ y for y in self.ys])
        self.n = np.array([y.size for y in self.ys])

    @property
    def m(self) -> int:
        return len(self.ys)

    @property
    def p(self) -> int:
        return self.Xs[0].shape[1]

    @property
    def N(self) -> int:
        return int(self.n.sum())

    @property
    def y(self) -> np.ndarray:
        return np.concatenate(self.ys)

    @property
    def X(self) -> np.ndarray:
        return np.vstack(self.Xs)

    @property
    def group_index(self) -> np.ndarray:
        """Group id (0-based) of every stacked row."""
        return np.repeat(np.arange(self.m), self.n)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.y).tobytes())
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(self.n.tobytes())
        return h.hexdigest()[:16]

    def single_group(self) -> "GroupedDataset":
        return GroupedDataset([self.y], [self.X], ["all"], list(self.predictor_names),
                              self.response_name)


@dataclass
class DatasetSchema:
    response_col: str
    predictor_cols: list[str]
    group_col: str | None = None
    intercept: bool = True

    def __post_init__(self):
        if self.response_col in self.predictor_cols:
            raise DataError(f"response {self.response_col!r} is also listed as a predictor")
        if self.group_col is not None and self.group_col in self.predictor_cols:
            raise DataError(f"group column {self.group_col!r} is also listed as a predictor")

    @classmethod
    def parse(cls, formula: str) -> "DatasetSchema":
        """Parse ``"y ~ x1 + x2 | group"``; a ``- 1`` or ``+ 0`` term drops the intercept."""
        if "~" not in formula:
            raise DataError(f"schema {formula!r} needs the form 'response ~ predictors [| group]'")
        lhs, rhs = formula.split("~", 1)
        group = None
        if "|" in rhs:
            rhs, group = rhs.split("|", 1)
            group = group.strip() or None
        intercept = True
        preds = []
        for term in rhs.replace("-", "+-").split("+"):
            term = term.strip()
            if not term:
                continue
            if term in ("-1", "0", "- 1"):
                intercept = False
            elif term == "1":
                intercept = True
            else:
                preds.append(term)
        return cls(lhs.strip(), preds, group, intercept)

    def __str__(self) -> str:
        rhs = " + ".join(self.predictor_cols) or "1"
        if not self.intercept:
            rhs += " - 1"
        out = f"{self.response_col} ~ {rhs}"
        if self.group_col:
            out += f" | {self.group_col}"
        return out


BUNDLED = {
    "iris": ("iris.csv", "sepal_length ~ petal_length"),
}


# datasets that cannot be shipped: (environment variable holding the path, default schema)
EXTERNAL = {
    "farms": ("FARMS_CSV", "size ~ nitrogen | farm"),
}


def bundled_path(name: str) -> Path:
    fname = BUNDLED[name][0]
    return Path(str(resources.files("vbreg.datasets").joinpath(fname)))


def named_dataset(name: str) -> tuple[Path, str]:
    """(path, default schema) for a bundled or externally supplied dataset name."""
    if name in BUNDLED:
        return bundled_path(name), BUNDLED[name][1]
    if name in EXTERNAL:
        var, schema = EXTERNAL[name]
        path = os.environ.get(var)
        if not path:
            raise DataError(f"dataset {name!r} is not bundled; set {var} to its CSV path")
        if not Path(path).is_file():
            raise DataError(f"{var}={path!r} does not point to a file")
        return Path(path), schema
    raise DataError(f"unknown dataset name {name!r}")


def load_csv(path: str | Path, schema: DatasetSchema) -> GroupedDataset:
    """Read a header-row CSV into a grouped dataset.

    Groups keep the order of their first appearance. Without a group column the
    result is a single group.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        needed = [schema.response_col, *schema.predictor_cols]
        if schema.group_col:
            needed.append(schema.group_col)
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        idx = {c: header.index(c) for c in needed}
        order: list[str] = []
        rows: dict[str, list[list[float]]] = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            values = []
            for col in [schema.response_col, *schema.predictor_cols]:
                cell = rec[idx[col]].strip() if idx[col] < len(rec) else ""
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {lineno}, column {col!r}: "
                                    f"cannot parse {cell!r} as a number") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {lineno}, column {col!r}: non-finite value {cell!r}")
                values.append(v)
            g = rec[idx[schema.group_col]].strip() if schema.group_col else "all"
            if g not in rows:
                order.append(g)
                rows[g] = []
            rows[g].append(values)
    if not order:
        raise DataError(f"{path}: no data rows")
    ys, Xs = [], []
    for g in order:
        arr = np.array(rows[g], dtype=float)
        X = arr[:, 1:]
        if schema.intercept:
            X = np.column_stack([np.ones(len(arr)), X])
        ys.append(arr[:, 0])
        Xs.append(X)
    names = (["(Intercept)"] if schema.intercept else []) + list(schema.predictor_cols)
    return GroupedDataset(ys, Xs, order, names, schema.response_col)


def save_csv(data: GroupedDataset, path: str | Path, group_col: str = "group") -> None:
    """Write a dataset so that :func:`load_csv` with :func:`schema_for` reads it back exactly."""
    names = list(data.predictor_names)
    has_intercept = bool(names) and names[0] == "(Intercept)"
    cols = names[1:] if has_intercept else names
    start = 1 if has_intercept else 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([group_col, data.response_name, *cols])
        for label, y, X in zip(data.labels, data.ys, data.Xs):
            for yi, xi in zip(y, X):
                w.writerow([label, repr(float(yi)), *(repr(float(v)) for v in xi[start:])])


def schema_for(data: GroupedDataset, group_col: str = "group") -> DatasetSchema:
    names = list(data.predictor_names)
    has_intercept = bool(names) and names[0] == "(Intercept)"
    return DatasetSchema(data.response_name, names[1:] if has_intercept else names,
                         group_col, has_intercept)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass
class SimulationSpec:
    """Truth for a synthetic scenario; covariates are standard normal after an intercept column."""

    model: str
    beta: np.ndarray
    sigma_sq: np.ndarray
    m: int = 1
    n_j: int | Sequence[int] = 100
    omega: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.model not in ("lrm", "chlrm"):
            raise DataError(f"unknown model {self.model!r}")
        self.beta = np.atleast_2d(np.asarray(self.beta, float))
        self.sigma_sq = np.atleast_1d(np.asarray(self.sigma_sq, float))
        K = self.beta.shape[0]
        if self.sigma_sq.size != K:
            raise DataError(f"{K} coefficient vectors but {self.sigma_sq.size} variances")
        if np.any(self.sigma_sq <= 0):
            raise DataError("variances must be positive")
        if self.model == "lrm":
            if K != 1:
                raise DataError("an lrm scenario has exactly one coefficient vector")
            self.m = 1
            self.omega = np.ones(1)
        else:
            if self.omega is None:
                self.omega = np.full(K, 1.0 / K)
            self.omega = np.asarray(self.omega, float)
            if self.omega.size != K:
                raise DataError(f"omega has {self.omega.size} entries, expected {K}")
            if np.any(self.omega < 0) or abs(self.omega.sum() - 1.0) > 1e-9:
                raise DataError(f"omega must lie on the simplex, sums to {self.omega.sum():.6g}")
        n_j = np.broadcast_to(np.asarray(self.n_j, int), (self.m,))
        if np.any(n_j < 1):
            raise DataError("every group needs at least one observation")

    @property
    def K(self) -> int:
        return self.beta.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[1]

    def group_sizes(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.n_j, int), (self.m,)).copy()

    def to_dict(self) -> dict:
        return {"model": self.model, "beta": self.beta.tolist(), "sigma_sq": self.sigma_sq.tolist(),
                "m": self.m, "n_j": np.asarray(self.n_j).tolist(), "omega": self.omega.tolist(),
                "seed": self.seed}


def simulate(spec: SimulationSpec) -> tuple[GroupedDataset, dict]:
    """Draw a dataset from ``spec``; deterministic in (spec, spec.seed)."""
    rng = make_rng(spec.seed)
    sizes = spec.group_sizes()
    if spec.model == "lrm":
        gamma = np.zeros(1, dtype=int)
    else:
        gamma = rng.choice(spec.K, size=spec.m, p=spec.omega)
    ys, Xs = [], []
    for j in range(spec.m):
        X = np.column_stack([np.ones(sizes[j]), rng.standard_normal((sizes[j], spec.p - 1))])
        k = gamma[j]
        y = X @ spec.beta[k] + np.sqrt(spec.sigma_sq[k]) * rng.standard_normal(sizes[j])
        ys.append(y)
        Xs.append(X)
    names = ["(Intercept)"] + [f"x{i}" for i in range(1, spec.p)]
    labels = [str(j + 1) for j in range(spec.m)]
    data = GroupedDataset(ys, Xs, labels, names, "y")
    truth = {**spec.to_dict(), "gamma": gamma.tolist()}
    return data, truth


def bench_chlrm_spec(seed: int = 0) -> SimulationSpec:
    """Three-cluster scenario: m = 15 groups of 20 rows, p = 3."""
    return SimulationSpec(
        model="chlrm",
        beta=[[-5.0, 8.0, 3.0], [10.0, -1.0, -2.0], [35.0, -8.0, -2.0]],
        sigma_sq=[16.0, 9.0, 4.0],
        m=15, n_j=20, omega=[0.4, 0.3, 0.3], seed=seed,
    )


def bench_lrm_spec(n: int, p: int, seed: int = 0) -> SimulationSpec:
    """LRM scenarios: p = 3 uses beta = (25, 10, -30), sigma = 100; p = 2 uses (2, -12), sigma = 4."""
    if p == 3:
        return SimulationSpec("lrm", [[25.0, 10.0, -30.0]], [100.0 ** 2], n_j=n, seed=seed)
    if p == 2:
        return SimulationSpec("lrm", [[2.0, -12.0]], [4.0 ** 2], n_j=n, seed=seed)
    raise DataError("LRM scenarios exist for p in {2, 3}")


# ---------------------------------------------------------------------------
# Binary store
# ---------------------------------------------------------------------------

def save_store(path: str | Path, kind: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write arrays as column-major little-endian bytes behind a one-line JSON header."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            dt = np.dtype("<f8")
        elif arr.dtype.kind in "iub":
            dt = np.dtype("<i8")
        else:
            raise StoreError(f"array {name!r} has unsupported dtype {arr.dtype}")
        blob = np.asfortranarray(arr.astype(dt)).tobytes(order="F")
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"version": STORE_VERSION, "kind": kind, "meta": meta, "arrays": entries,
              "payload_bytes": offset}
    with Path(path).open("wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_store(path: str | Path) -> tuple[str, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(STORE_MAGIC):
        raise StoreError(f"{path}: not a vbreg store")
    rest = raw[len(STORE_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise StoreError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:nl])
    except json.JSONDecodeError as exc:
        raise StoreError(f"{path}: corrupt header ({exc})") from None
    if header.get("version") != STORE_VERSION:
        raise StoreError(f"{path}: store version {header.get('version')} is not supported "
                         f"(expected {STORE_VERSION})")
    payload = rest[nl + 1:]
    if len(payload) != header["payload_bytes"]:
        raise StoreError(f"{path}: truncated payload ({len(payload)} of "
                         f"{header['payload_bytes']} bytes)")
    arrays = {}
    for e in header["arrays"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"], order="F")
        arrays[e["name"]] = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("="))
    return header["kind"], arrays, header["meta"]


def save_draws(path, obj) -> None:
    """Persist any draws/state object exposing ``to_store()``."""
    kind, arrays, meta = obj.to_store()
    save_store(path, kind, arrays, meta)


def load_draws(path):
    """Inverse of :func:`save_draws`; returns the original object type."""
    from . import chlrm, lrm

    kind, arrays, meta = load_store(path)
    registry = {
        "lrm-draws": lrm.PosteriorDraws,
        "lrm-state": lrm.LrmVarState,
        "chlrm-draws": chlrm.ChlrmDraws,
        "chlrm-state": chlrm.ChlrmVarState,
    }
    if kind not in registry:
        raise StoreError(f"{path}: unknown store kind {kind!r}")
    return registry[kind].from_store(arrays, meta)
